use std::time::Instant;

use hurricast::error::Error;
use hurricast::forecast::ForecastRecord;
use hurricast::gbt::GbtConfig;
use hurricast::linear_ensemble::simple_average;
use hurricast::pipeline::{
    assemble_input, fit_huml_ensemble, huml_op_average, predict_case, predict_cases,
    predict_with_embedding, read_bundle, train_variant, write_bundle, HumlVariant, PipelineConfig,
    BUNDLE_VERSION,
};
use hurricast::storm_data::{
    ingest_tracks, normalize_lon, FeatureLayout, ForecastCase, SplitCases, SplitYears,
};
use hurricast::synth::{generate_synthetic, SignalPlacement, SyntheticData, SyntheticSpec};
use hurricast::tensor_ops::{CubeStore, FrameSource};

fn data(storms: usize, steps: usize, signal: SignalPlacement, noise_sd: f64, seed: u64) -> (SyntheticData, SplitCases) {
    let spec = SyntheticSpec {
        storms,
        steps,
        signal,
        noise_sd,
        seed,
        ..SyntheticSpec::default()
    };
    let d = generate_synthetic(&spec).unwrap();
    let ing = ingest_tracks(
        d.tracks.clone(),
        FeatureLayout::default(),
        Some(&d.cubes),
        &SplitYears::default(),
    )
    .unwrap();
    (d, ing.cases)
}

fn quick_gbt() -> GbtConfig {
    GbtConfig {
        max_depth: 3,
        n_estimators: 20,
        ..GbtConfig::default()
    }
}

fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        gbt: quick_gbt(),
        seed: 5,
        ..PipelineConfig::default()
    };
    let n = &mut cfg.network;
    n.widths = [2, 4, 4];
    n.embed_dim = 8;
    n.gru_hidden = 8;
    n.gru_layers = 1;
    n.head_dims = [16, 8];
    n.d_model = 12;
    n.heads = 2;
    n.ff_dim = 8;
    n.tf_layers = 1;
    cfg.train.max_epochs = 2;
    cfg.train.batch_size = 32;
    cfg
}

fn frames(d: &SyntheticData) -> Option<&dyn FrameSource> {
    Some(&d.cubes)
}

fn intensity_mae(preds: &[ForecastRecord], cases: &[ForecastCase]) -> f64 {
    preds
        .iter()
        .zip(cases)
        .map(|(p, c)| (p.wind.unwrap() - c.target_intensity).abs())
        .sum::<f64>()
        / cases.len() as f64
}

#[test]
fn stat_variant_reaches_noise_floor() {
    let (d, c) = data(200, 40, SignalPlacement::Statistical, 2.0, 11);
    let cfg = PipelineConfig::default();
    let t = train_variant(&c.train, &c.validation, HumlVariant::Stat, &cfg, None).unwrap();
    let preds = predict_cases(&t.bundle, &c.test, None, None).unwrap();
    let mae = intensity_mae(&preds, &c.test);
    let floor = d.manifest.noise_floor_mae;
    assert!(mae <= 1.2 * floor, "test MAE {mae:.3} above 1.2 x floor {floor:.3}");
}

#[test]
fn noiseless_statistical_signal_is_learned() {
    let (_, c) = data(80, 30, SignalPlacement::Statistical, 0.0, 7);
    let t = train_variant(&c.train, &c.validation, HumlVariant::Stat, &PipelineConfig::default(), None).unwrap();
    let preds = predict_cases(&t.bundle, &c.test, None, None).unwrap();
    let mae = intensity_mae(&preds, &c.test);
    assert!(mae < 0.5, "noiseless MAE {mae:.3}");
}

#[test]
fn vision_variant_beats_stat_on_cube_signal() {
    let (d, c) = data(40, 30, SignalPlacement::Vision, 2.0, 3);
    let mut cfg = tiny_config();
    cfg.gbt = GbtConfig {
        n_estimators: 100,
        ..GbtConfig::default()
    };
    cfg.network.widths = [4, 8, 8];
    cfg.network.d_model = 16;
    cfg.train.max_epochs = 6;
    let v1 = train_variant(&c.train, &c.validation, HumlVariant::Stat, &cfg, None).unwrap();
    let v4 = train_variant(&c.train, &c.validation, HumlVariant::CnnTransformer, &cfg, frames(&d)).unwrap();
    let m1 = intensity_mae(&predict_cases(&v1.bundle, &c.test, None, None).unwrap(), &c.test);
    let m4 = intensity_mae(&predict_cases(&v4.bundle, &c.test, frames(&d), None).unwrap(), &c.test);
    assert!(m4 < m1, "variant 4 MAE {m4:.3} not below variant 1 MAE {m1:.3}");
}

#[test]
fn input_lengths_by_variant() {
    let (d, c) = data(40, 30, SignalPlacement::Both, 2.0, 1);
    let mut cfg = tiny_config();
    cfg.train.max_epochs = 1;
    let case = &c.test[0];
    for (v, e) in [
        (HumlVariant::Stat, 0),
        (HumlVariant::Tucker, 135),
        (HumlVariant::CnnGru, 8),
        (HumlVariant::CnnTransformer, 12),
    ] {
        let t = train_variant(&c.train, &c.validation, v, &cfg, frames(&d)).unwrap();
        let x = assemble_input(case, &t.bundle.scaler, &t.bundle.extractor, frames(&d)).unwrap();
        assert_eq!(x.len(), 216 + e, "variant {v}");
        assert_eq!(t.bundle.input_len(), 216 + e);
    }
}

#[test]
fn retraining_is_deterministic() {
    let (d, c) = data(40, 30, SignalPlacement::Both, 2.0, 2);
    let cfg = tiny_config();
    for v in [HumlVariant::Stat, HumlVariant::CnnGru] {
        let a = train_variant(&c.train, &c.validation, v, &cfg, frames(&d)).unwrap();
        let b = train_variant(&c.train, &c.validation, v, &cfg, frames(&d)).unwrap();
        assert_eq!(write_bundle(&a.bundle).unwrap(), write_bundle(&b.bundle).unwrap());
        let pa = predict_cases(&a.bundle, &c.test, frames(&d), None).unwrap();
        let pb = predict_cases(&b.bundle, &c.test, frames(&d), None).unwrap();
        assert_eq!(pa, pb);
    }
}

#[test]
fn bundle_round_trip_and_damage() {
    let (d, c) = data(40, 30, SignalPlacement::Both, 2.0, 4);
    let t = train_variant(&c.train, &c.validation, HumlVariant::CnnGru, &tiny_config(), frames(&d)).unwrap();
    let bytes = write_bundle(&t.bundle).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v3.hbnd");
    hurricast::pipeline::save_bundle(&t.bundle, &path).unwrap();
    let back = hurricast::pipeline::load_bundle(&path).unwrap();
    assert_eq!(write_bundle(&back).unwrap(), bytes);
    let before = predict_cases(&t.bundle, &c.test, frames(&d), None).unwrap();
    let after = predict_cases(&back, &c.test, frames(&d), None).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.wind.unwrap().to_bits(), b.wind.unwrap().to_bits());
        let (x, y) = (a.displacement.unwrap(), b.displacement.unwrap());
        assert_eq!((x.0.to_bits(), x.1.to_bits()), (y.0.to_bits(), y.1.to_bits()));
    }

    for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
        assert!(matches!(read_bundle(&bytes[..cut]), Err(Error::Corrupt(_))), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 3] ^= 0x40;
    assert!(matches!(read_bundle(&flipped), Err(Error::Corrupt(_))));
    let mut newer = bytes.clone();
    newer[4..6].copy_from_slice(&(BUNDLE_VERSION + 1).to_le_bytes());
    match read_bundle(&newer) {
        Err(Error::Version { found, expected }) => {
            assert_eq!((found, expected), (BUNDLE_VERSION as u32 + 1, BUNDLE_VERSION as u32));
        }
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn wrongly_tagged_cases_are_rejected() {
    let (_, c) = data(40, 30, SignalPlacement::Statistical, 2.0, 5);
    let cfg = PipelineConfig {
        gbt: quick_gbt(),
        ..PipelineConfig::default()
    };
    let mut leaky = c.train.clone();
    leaky.push(c.test[0].clone());
    match train_variant(&leaky, &c.validation, HumlVariant::Stat, &cfg, None) {
        Err(Error::Leakage { case_id, .. }) => assert_eq!(case_id, c.test[0].id()),
        other => panic!("expected leakage error, got {:?}", other.map(|_| ())),
    }
    assert!(matches!(
        train_variant(&c.train, &c.test, HumlVariant::Stat, &cfg, None),
        Err(Error::Leakage { .. })
    ));
    assert!(matches!(
        train_variant(&[], &c.validation, HumlVariant::Stat, &cfg, None),
        Err(Error::Empty(_))
    ));
}

#[test]
fn vision_forecasts_depend_on_cubes_only_through_embedding() {
    let (d, c) = data(40, 30, SignalPlacement::Both, 2.0, 6);
    let cfg = tiny_config();
    for v in [HumlVariant::Tucker, HumlVariant::CnnTransformer] {
        let t = train_variant(&c.train, &c.validation, v, &cfg, frames(&d)).unwrap();
        let b = &t.bundle;
        let cases: Vec<&ForecastCase> = c.test.iter().take(12).collect();
        let stat: Vec<Vec<f64>> = cases.iter().map(|k| b.scaled_stat(k).unwrap()).collect();
        let emb = b.extractor.embed_cases(&cases, &stat, frames(&d)).unwrap();
        for (k, e) in cases.iter().zip(&emb) {
            let direct = predict_case(b, k, frames(&d)).unwrap();
            assert_eq!(predict_with_embedding(b, k, e).unwrap(), direct);
            assert_eq!(predict_case(b, k, frames(&d)).unwrap(), direct);
        }
        assert!(predict_with_embedding(b, cases[0], &[0.0; 3]).is_err());
    }
}

#[test]
fn missing_cube_names_the_step() {
    let (d, c) = data(40, 30, SignalPlacement::Both, 2.0, 8);
    let t = train_variant(&c.train, &c.validation, HumlVariant::Tucker, &tiny_config(), frames(&d)).unwrap();
    let case = &c.test[0];
    let missing = case.history_times[3];
    let mut partial = CubeStore::new(d.cubes.frame_dims());
    for (sid, time, f) in d.cubes.iter() {
        if !(sid == case.storm_id && time == missing) {
            partial.insert_frame(sid, time, f.to_vec()).unwrap();
        }
    }
    let err = predict_case(&t.bundle, case, Some(&partial)).unwrap_err().to_string();
    assert!(err.contains(&case.storm_id), "{err}");
    assert!(err.contains(&missing.to_rfc3339()), "{err}");
    assert!(predict_case(&t.bundle, case, None).is_err());
}

#[test]
fn zero_displacement_keeps_t0_position() {
    let (_, c) = data(40, 30, SignalPlacement::Statistical, 2.0, 9);
    let zero = |v: &[ForecastCase]| -> Vec<ForecastCase> {
        v.iter()
            .cloned()
            .map(|mut k| {
                k.target_dlat = 0.0;
                k.target_dlon = 0.0;
                k
            })
            .collect()
    };
    let cfg = PipelineConfig {
        gbt: quick_gbt(),
        ..PipelineConfig::default()
    };
    let t = train_variant(&zero(&c.train), &zero(&c.validation), HumlVariant::Stat, &cfg, None).unwrap();
    for k in &c.test {
        let p = predict_case(&t.bundle, k, None).unwrap();
        assert_eq!(p.displacement.unwrap(), (0.0, 0.0));
        assert_eq!(p.position.unwrap(), (k.lat0, normalize_lon(k.lon0)));
    }
}

#[test]
fn single_case_latency() {
    let (d, c) = data(40, 30, SignalPlacement::Both, 2.0, 10);
    let t = train_variant(&c.train, &c.validation, HumlVariant::Tucker, &tiny_config(), frames(&d)).unwrap();
    let start = Instant::now();
    for k in c.test.iter().take(5) {
        predict_case(&t.bundle, k, frames(&d)).unwrap();
    }
    let per_case = start.elapsed().as_secs_f64() / 5.0;
    assert!(per_case < 1.0, "{per_case:.3} s per case");
}

fn records(model: &str, cases: &[ForecastCase], f: impl Fn(&ForecastCase) -> (f64, f64, f64)) -> Vec<ForecastRecord> {
    cases
        .iter()
        .map(|k| {
            let (w, dlat, dlon) = f(k);
            ForecastRecord {
                model: model.into(),
                storm_id: k.storm_id.clone(),
                t0: k.t0,
                wind: Some(w),
                displacement: Some((dlat, dlon)),
                position: Some((k.lat0 + dlat, normalize_lon(k.lon0 + dlon))),
            }
        })
        .collect()
}

#[test]
fn ensemble_of_identical_members_reproduces_them() {
    let (_, c) = data(80, 30, SignalPlacement::Statistical, 2.0, 12);
    let cfg = PipelineConfig {
        gbt: quick_gbt(),
        ..PipelineConfig::default()
    };
    let t = train_variant(&c.train, &c.validation, HumlVariant::Stat, &cfg, None).unwrap();
    let val = predict_cases(&t.bundle, &c.validation, None, None).unwrap();
    let test = predict_cases(&t.bundle, &c.test, None, None).unwrap();

    // whatever the weights, the output is affine in the shared member
    let ens = fit_huml_ensemble(&[&val, &val, &val], &c.validation).unwrap();
    let out = ens.apply(&[&test, &test, &test], &c.test).unwrap();
    let w = &ens.intensity.coefficients;
    for (e, b) in out.iter().zip(&test) {
        let affine = ens.intensity.intercept + w.iter().sum::<f64>() * b.wind.unwrap();
        assert!((e.wind.unwrap() - affine).abs() < 1e-9);
    }

    // members that are calibrated on the stacking period come back unchanged
    let mut calibrated = c.validation.clone();
    for (k, p) in calibrated.iter_mut().zip(&val) {
        k.target_intensity = p.wind.unwrap();
        (k.target_dlat, k.target_dlon) = p.displacement.unwrap();
    }
    let ens = fit_huml_ensemble(&[&val, &val, &val], &calibrated).unwrap();
    let out = ens.apply(&[&test, &test, &test], &c.test).unwrap();
    for (e, b) in out.iter().zip(&test) {
        assert!((e.wind.unwrap() - b.wind.unwrap()).abs() < 0.05, "{e:?} vs {b:?}");
        let (x, y) = (e.displacement.unwrap(), b.displacement.unwrap());
        assert!((x.0 - y.0).abs() < 0.01 && (x.1 - y.1).abs() < 0.01, "{x:?} vs {y:?}");
    }
}

#[test]
fn ensemble_recovers_a_perfect_member() {
    let (_, c) = data(80, 30, SignalPlacement::Statistical, 2.0, 13);
    let val = &c.validation;
    let truth = records("truth", val, |k| (k.target_intensity, k.target_dlat, k.target_dlon));
    let noisy = records("noisy", val, |k| {
        let h = (k.t0.timestamp() % 7) as f64 - 3.0;
        (k.target_intensity + 4.0 * h, k.target_dlat - 0.2 * h, k.target_dlon + 0.3 * h)
    });
    let ens = fit_huml_ensemble(&[&noisy, &truth], val).unwrap();
    let out = ens.apply(&[&noisy, &truth], val).unwrap();
    let var: f64 = {
        let m = val.iter().map(|k| k.target_intensity).sum::<f64>() / val.len() as f64;
        val.iter().map(|k| (k.target_intensity - m).powi(2)).sum::<f64>() / val.len() as f64
    };
    let mse = out
        .iter()
        .zip(val)
        .map(|(p, k)| (p.wind.unwrap() - k.target_intensity).powi(2))
        .sum::<f64>()
        / val.len() as f64;
    assert!(mse <= 1e-3 * var, "ensemble MSE {mse} vs target variance {var}");
    assert!(ens.intensity.coefficients[1] > 0.99, "{:?}", ens.intensity.coefficients);
}

#[test]
fn misaligned_members_are_reported() {
    let (_, c) = data(40, 30, SignalPlacement::Statistical, 2.0, 14);
    let val = &c.validation;
    let full = records("a", val, |k| (k.target_intensity, 0.0, 0.0));
    let short: Vec<ForecastRecord> = full[1..].iter().cloned().map(|mut r| {
        r.model = "b".into();
        r
    }).collect();
    match fit_huml_ensemble(&[&full, &short], val) {
        Err(Error::Misaligned(ids)) => assert_eq!(ids, vec![val[0].id()]),
        other => panic!("expected misaligned error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn op_average_is_the_member_mean() {
    let (d, c) = data(40, 30, SignalPlacement::Statistical, 2.0, 15);
    let test = &c.test;
    let huml = records("HUML", test, |k| (k.target_intensity + 1.0, k.target_dlat * 0.9, k.target_dlon * 1.1));
    let ops: Vec<Vec<ForecastRecord>> = d
        .manifest
        .member_models
        .iter()
        .map(|m| {
            let mut v: Vec<ForecastRecord> = d.operational.iter().filter(|r| &r.model == m).cloned().collect();
            v.retain(|r| test.iter().any(|k| k.storm_id == r.storm_id && k.t0 == r.t0));
            v
        })
        .collect();
    let op_refs: Vec<&[ForecastRecord]> = ops.iter().map(Vec::as_slice).collect();
    let out = huml_op_average(&huml, &op_refs, test).unwrap();
    assert_eq!(out.len(), test.len());
    for (i, k) in test.iter().enumerate() {
        let find = |v: &[ForecastRecord]| v.iter().find(|r| r.storm_id == k.storm_id && r.t0 == k.t0).unwrap().clone();
        let members: Vec<ForecastRecord> = std::iter::once(huml[i].clone()).chain(ops.iter().map(|v| find(v))).collect();
        let k_f = members.len() as f64;
        let wind = members.iter().map(|r| r.wind.unwrap()).sum::<f64>() / k_f;
        let lat = members.iter().map(|r| r.position.unwrap().0).sum::<f64>() / k_f;
        assert_eq!(out[i].wind.unwrap(), wind);
        assert_eq!(out[i].position.unwrap().0, lat);
        let refs: Vec<&ForecastRecord> = members.iter().collect();
        assert_eq!(out[i], simple_average(HumlVariant::OpAverage.label(), &refs, Some(k)).unwrap());
    }
}
