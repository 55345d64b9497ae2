use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hurricast::config::RunConfig;
use hurricast::eval::{
    build_comparison_table, evaluate_intensity, evaluate_track, fixture_reports, parse_fixture,
    reproduce_skills, EvalReport, Task,
};
use hurricast::forecast::{
    group_by_model, parse_forecasts_csv, parse_operational_csv, write_forecasts, ForecastRecord,
    Provenance,
};
use hurricast::linear_ensemble::consensus;
use hurricast::pipeline::{
    assemble_inputs, huml_op_average, load_bundle, predict_cases, save_bundle, train_huml_ensemble,
    train_variant, EmbeddingCache, HumlVariant, ModelBundle,
};
use hurricast::storm_data::{ingest_tracks, parse_track_csv, ForecastCase, Split};
use hurricast::synth::{generate_synthetic, write_synthetic};
use hurricast::tensor_ops::{
    read_hcub, reconstruct, tucker, CubeStore, FrameSource, Tensor4, VISION_RANKS,
};

use crate::workspace::{load_config, split_cases, Workspace};
use crate::Common;

const OP_CONSENSUS: &str = "OP-average consensus";

fn provenance(cfg: &RunConfig, model: &str) -> Provenance {
    Provenance {
        model: model.to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
    }
}

fn variant(cfg: &RunConfig, flag: Option<u8>) -> Result<HumlVariant> {
    Ok(match flag {
        Some(id) => HumlVariant::from_id(id)?,
        None => cfg.variant,
    })
}

fn frames(store: &Option<CubeStore>) -> Option<&dyn FrameSource> {
    store.as_ref().map(|s| s as &dyn FrameSource)
}

fn write_forecast_file(path: &Path, records: &[ForecastRecord], prov: &Provenance) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    write_forecasts(BufWriter::new(f), records, prov)?;
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        _ => bail!("unknown split {s:?}; expected train, validation or test"),
    }
}

pub fn synth(
    common: &Common,
    storms: Option<usize>,
    steps: Option<usize>,
    signal: Option<&str>,
    noise_sd: Option<f64>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(n) = storms {
        cfg.synth.storms = n;
    }
    if let Some(n) = steps {
        cfg.synth.steps = n;
    }
    if let Some(s) = signal {
        cfg.synth.signal = s.parse()?;
    }
    if let Some(s) = noise_sd {
        cfg.synth.noise_sd = s;
    }
    let ws = Workspace::open(cfg)?;
    let spec = ws.cfg.synth_spec();
    let data = generate_synthetic(&spec)?;
    let prov = provenance(&ws.cfg, "synthetic").to_line();
    let paths = write_synthetic(&data, ws.dir(), Some(prov.trim_start_matches("# ")))?;
    ws.save_config()?;
    println!(
        "wrote {} storms ({} fixes), {} operational forecasts to {}",
        data.manifest.storms,
        data.manifest.records,
        data.operational.len(),
        ws.dir().display()
    );
    println!(
        "noise floor (Bayes intensity MAE): {:.3} kt; manifest {}",
        data.manifest.noise_floor_mae,
        paths.manifest.display()
    );
    Ok(())
}

pub fn ingest(common: &Common, tracks: Option<PathBuf>, cubes: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(t) = tracks {
        cfg.paths.tracks = t;
    }
    if let Some(c) = cubes {
        cfg.paths.cubes = c;
    }
    let ws = Workspace::open(cfg)?;
    let path = ws.cfg.paths.tracks();
    let parsed = parse_track_csv(&path).with_context(|| format!("reading tracks {}", path.display()))?;
    for d in parsed.rejected.iter().take(10) {
        log::warn!("rejected row: {d:?}");
    }
    let store = ws.cubes()?;
    if store.is_none() {
        log::warn!("no cube directory at {}; vision variants will be unavailable", ws.cfg.paths.cubes().display());
    }
    let ing = ingest_tracks(parsed.tracks, ws.cfg.layout()?, frames(&store), &ws.cfg.split)?;
    let c = &ing.cases;
    let file = ws.save_cases(c)?;
    ws.save_config()?;
    println!(
        "{} rows rejected; {} of {} storms selected; cases train {} / validation {} / test {} / excluded {}",
        parsed.rejected.len(),
        ing.storms_selected,
        ing.storms_in,
        c.train.len(),
        c.validation.len(),
        c.test.len(),
        c.excluded.len()
    );
    if ing.skipped_missing_cube + ing.skipped_incomplete > 0 {
        println!(
            "skipped windows: {} missing cubes, {} incomplete records",
            ing.skipped_missing_cube, ing.skipped_incomplete
        );
    }
    println!("case store {}", file.display());
    Ok(())
}

pub fn train(common: &Common, flag: Option<u8>) -> Result<()> {
    let cfg = load_config(common)?;
    let v = variant(&cfg, flag)?;
    if !v.is_base() {
        bail!("variant {} is built by `hurricast ensemble`", v.id());
    }
    let ws = Workspace::open(cfg)?;
    let cases = ws.load_cases()?;
    let store = if v.uses_vision() { ws.cubes()? } else { None };
    if v.uses_vision() && store.is_none() {
        bail!("variant {} needs cubes at {}", v.id(), ws.cfg.paths.cubes().display());
    }
    let out = train_variant(&cases.train, &cases.validation, v, &ws.cfg.pipeline_config(), frames(&store))?;
    ws.subdir("bundles")?;
    let path = ws.bundle_path(v);
    save_bundle(&out.bundle, &path)?;
    let summary = serde_json::json!({
        "variant": v.id(),
        "model": v.label(),
        "seed": ws.cfg.seed,
        "config": ws.cfg.hash(),
        "validation": out.validation,
        "curve": out.curve,
    });
    let spath = path.with_extension("json");
    fs::write(&spath, serde_json::to_string_pretty(&summary)? + "\n")?;
    ws.save_config()?;
    let s = out.validation;
    println!(
        "{}: validation on {} cases: intensity MAE {:.3} kt, track {:.2} km (dlat {:.4}, dlon {:.4} deg)",
        v.label(),
        s.cases,
        s.intensity_mae,
        s.track_km,
        s.dlat_mae,
        s.dlon_mae
    );
    println!("bundle {}", path.display());
    Ok(())
}

fn load_trained(ws: &Workspace, v: HumlVariant) -> Result<ModelBundle> {
    let p = ws.bundle_path(v);
    if !p.exists() {
        bail!(
            "no trained bundle for variant {} at {}; run `hurricast train --variant {}` first",
            v.id(),
            p.display(),
            v.id()
        );
    }
    let b = load_bundle(&p).with_context(|| format!("loading {}", p.display()))?;
    if b.variant != v {
        bail!("{} holds variant {}, not {}", p.display(), b.variant.id(), v.id());
    }
    Ok(b)
}

fn cache_for(ws: &Workspace, b: &ModelBundle) -> Result<Option<(PathBuf, EmbeddingCache)>> {
    if !b.extractor.needs_frames() {
        return Ok(None);
    }
    let dir = ws.subdir("cache")?;
    let p = EmbeddingCache::path_in(&dir, &b.extractor)?;
    Ok(Some((p.clone(), EmbeddingCache::load_or_new(&p, &b.extractor)?)))
}

pub fn extract(common: &Common, flag: Option<u8>) -> Result<()> {
    let cfg = load_config(common)?;
    let v = variant(&cfg, flag)?;
    if !v.uses_vision() || !v.is_base() {
        bail!("variant {} has no vision extractor", v.id());
    }
    let ws = Workspace::open(cfg)?;
    let b = load_trained(&ws, v)?;
    let cases = ws.load_cases()?;
    let store = ws.cubes()?;
    let (cpath, mut cache) = cache_for(&ws, &b)?.expect("vision bundles have an extractor");
    let all: Vec<&ForecastCase> = cases
        .train
        .iter()
        .chain(&cases.validation)
        .chain(&cases.test)
        .collect();
    assemble_inputs(&all, &b.scaler, &b.extractor, frames(&store), Some(&mut cache))?;
    cache.save(&cpath)?;

    let out = ws.subdir("embeddings")?.join(format!("variant{}.csv", v.id()));
    let mut w = BufWriter::new(File::create(&out)?);
    writeln!(w, "{}", provenance(&ws.cfg, v.label()).to_line())?;
    let cols: Vec<String> = (0..cache.dim()).map(|i| format!("e{i}")).collect();
    writeln!(w, "case_id,split,{}", cols.join(","))?;
    for c in &all {
        let e = cache.get(&c.id()).ok_or_else(|| anyhow!("embedding for {} missing", c.id()))?;
        let vals: Vec<String> = e.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{},{},{}", c.id(), c.split.label(), vals.join(","))?;
    }
    w.flush()?;
    println!(
        "{} embeddings of length {} (extractor {}) written to {}",
        all.len(),
        cache.dim(),
        cache.extractor_hash(),
        out.display()
    );
    Ok(())
}

pub fn predict(common: &Common, flag: Option<u8>, split: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let v = variant(&cfg, flag)?;
    if !v.is_base() {
        bail!("variant {} forecasts are written by `hurricast ensemble`", v.id());
    }
    let split = parse_split(split)?;
    let ws = Workspace::open(cfg)?;
    let b = load_trained(&ws, v)?;
    let cases = ws.load_cases()?;
    let store = if v.uses_vision() { ws.cubes()? } else { None };
    let mut cache = cache_for(&ws, &b)?;
    let target = split_cases(&cases, split);
    let preds = predict_cases(&b, target, frames(&store), cache.as_mut().map(|(_, c)| c))?;
    if let Some((p, c)) = &cache {
        c.save(p)?;
    }
    let out = ws.forecast_path(v, split);
    write_forecast_file(&out, &preds, &provenance(&ws.cfg, v.label()))?;
    println!("{} {} forecasts written to {}", preds.len(), split.label(), out.display());
    Ok(())
}

fn operational_members(path: &Path) -> Result<Vec<(String, Vec<ForecastRecord>)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let recs = parse_operational_csv(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(group_by_model(recs))
}

fn is_baseline(model: &str) -> bool {
    [Task::Track, Task::Intensity].iter().any(|t| t.baseline_model() == model)
}

/// Cases covered by every member.
fn covered(cases: &[ForecastCase], members: &[&[ForecastRecord]]) -> Vec<ForecastCase> {
    let ids: Vec<BTreeSet<String>> = members
        .iter()
        .map(|m| m.iter().map(ForecastRecord::case_id).collect())
        .collect();
    cases
        .iter()
        .filter(|c| {
            let id = c.id();
            ids.iter().all(|s| s.contains(&id))
        })
        .cloned()
        .collect()
}

pub fn ensemble(common: &Common, operational: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(p) = operational {
        cfg.paths.operational = p;
    }
    let ws = Workspace::open(cfg)?;
    let cases = ws.load_cases()?;
    let bundles = HumlVariant::BASE
        .iter()
        .map(|&v| load_trained(&ws, v))
        .collect::<Result<Vec<_>>>()?;
    let store = ws.cubes()?;
    let refs: Vec<&ModelBundle> = bundles.iter().collect();
    let (ens, v5) = train_huml_ensemble(&refs, &cases.validation, &cases.test, frames(&store))?;
    write_forecast_file(
        &ws.forecast_path(HumlVariant::Ensemble, Split::Test),
        &v5,
        &provenance(&ws.cfg, HumlVariant::Ensemble.label()),
    )?;
    fs::write(
        ws.path("bundles").join("variant5.json"),
        serde_json::to_string_pretty(&ens)? + "\n",
    )?;
    println!("{}: {} test forecasts", HumlVariant::Ensemble.label(), v5.len());

    let mut ops = operational_members(&ws.cfg.paths.operational())?;
    ops.retain(|(m, _)| !is_baseline(m));
    if ops.is_empty() {
        log::warn!("no operational forecasts; skipping {}", HumlVariant::OpAverage.label());
        return Ok(());
    }
    let v4 = predict_cases(&bundles[3], &cases.test, frames(&store), None)?;
    let op_refs: Vec<&[ForecastRecord]> = ops.iter().map(|(_, v)| v.as_slice()).collect();
    let shared = covered(&cases.test, &op_refs);
    if shared.len() < cases.test.len() {
        log::warn!(
            "{} of {} test cases lack an operational forecast from some member",
            cases.test.len() - shared.len(),
            cases.test.len()
        );
    }
    let v6 = huml_op_average(&v4, &op_refs, &shared)?;
    write_forecast_file(
        &ws.forecast_path(HumlVariant::OpAverage, Split::Test),
        &v6,
        &provenance(&ws.cfg, HumlVariant::OpAverage.label()),
    )?;
    let base = consensus(OP_CONSENSUS, &op_refs, &shared)?;
    write_forecast_file(
        &ws.path("forecasts").join("op_consensus.csv"),
        &base,
        &provenance(&ws.cfg, OP_CONSENSUS),
    )?;
    let names: Vec<&str> = ops.iter().map(|(m, _)| m.as_str()).collect();
    println!(
        "{}: {} test forecasts (members: {}, {})",
        HumlVariant::OpAverage.label(),
        v6.len(),
        HumlVariant::CnnTransformer.label(),
        names.join(", ")
    );
    Ok(())
}

fn evaluate_fixtures(path: &Path) -> Result<()> {
    let entries = parse_fixture(path).with_context(|| format!("reading {}", path.display()))?;
    let checks = reproduce_skills(&entries)?;
    let mut failed = 0;
    for c in &checks {
        let e = &c.entry;
        let ok = c.passed();
        failed += usize::from(!ok);
        println!(
            "{} table {} {} {} {}: MAE {} vs {} {} -> skill {:.2} (reported {}, tolerance {})",
            if ok { "ok  " } else { "FAIL" },
            e.table,
            e.task,
            e.basin,
            e.model,
            e.mae,
            c.entry.task().map(|t| t.baseline_model()).unwrap_or("?"),
            c.baseline_mae,
            c.computed,
            e.skill,
            c.tolerance
        );
    }
    let mut tables: Vec<u32> = entries.iter().map(|e| e.table).collect();
    tables.sort_unstable();
    tables.dedup();
    for t in tables {
        let (task, reports) = fixture_reports(&entries, t)?;
        let table = build_comparison_table(&reports, task.baseline_model())?;
        println!("\nTable {t} ({}, {}):\n{}", task.label(), task.unit(), table.to_text());
    }
    println!("{} of {} skills reproduced", checks.len() - failed, checks.len());
    if failed > 0 {
        bail!("{failed} reported skills not reproduced");
    }
    Ok(())
}

pub fn evaluate(common: &Common, fixtures: Option<PathBuf>, operational: Option<PathBuf>) -> Result<()> {
    if let Some(f) = fixtures {
        return evaluate_fixtures(&f);
    }
    let mut cfg = load_config(common)?;
    if let Some(p) = operational {
        cfg.paths.operational = p;
    }
    let ws = Workspace::open(cfg)?;
    let cases = ws.load_cases()?;
    let dir = ws.path("forecasts");
    let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    let mut models: Vec<(String, Vec<ForecastRecord>)> = Vec::new();
    for f in &files {
        let (recs, prov) = parse_forecasts_csv(f)?;
        let name = prov.map_or_else(|| f.display().to_string(), |p| p.model);
        models.push((name, recs));
    }
    models.extend(operational_members(&ws.cfg.paths.operational())?);
    if models.is_empty() {
        bail!("no forecasts in {}; run `hurricast predict` first", dir.display());
    }
    let refs: Vec<&[ForecastRecord]> = models.iter().map(|(_, v)| v.as_slice()).collect();
    let shared = covered(&cases.test, &refs);
    if shared.is_empty() {
        bail!("no test case is covered by every model");
    }
    if shared.len() < cases.test.len() {
        log::warn!("scoring {} of {} test cases covered by every model", shared.len(), cases.test.len());
    }
    let mut by_basin: BTreeMap<String, Vec<ForecastCase>> = BTreeMap::new();
    for c in &shared {
        by_basin.entry(c.basin.label().to_string()).or_default().push(c.clone());
    }
    by_basin.insert("ALL".into(), shared.clone());

    let reports_dir = ws.subdir("reports")?;
    for task in [Task::Intensity, Task::Track] {
        let baseline = models
            .iter()
            .find(|(m, _)| m == task.baseline_model())
            .map(|(m, v)| (m.as_str(), v.as_slice()));
        if baseline.is_none() {
            log::warn!("no {} forecasts; {} skill omitted", task.baseline_model(), task.label());
        }
        let mut reports: Vec<EvalReport> = Vec::new();
        for (basin, cs) in &by_basin {
            for (m, recs) in &models {
                let r = match task {
                    Task::Intensity => evaluate_intensity(m, basin, recs, cs, baseline)?,
                    Task::Track => evaluate_track(m, basin, recs, cs, baseline)?,
                };
                reports.push(r);
            }
        }
        let table = build_comparison_table(&reports, task.baseline_model())?;
        let stem = reports_dir.join(task.label());
        fs::write(
            stem.with_extension("csv"),
            format!("{}\n{}", provenance(&ws.cfg, "evaluation").to_line(), table.to_csv()),
        )?;
        fs::write(stem.with_extension("txt"), table.to_text())?;
        println!("{} MAE ({}) on {} test cases:\n{}", task.label(), task.unit(), shared.len(), table.to_text());
    }
    Ok(())
}

fn parse_ranks(s: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("ranks {s:?} are not integers"))?;
    v.try_into().map_err(|_| anyhow!("expected four ranks, got {s:?}"))
}

pub fn decompose(cube: &Path, ranks: &str) -> Result<()> {
    let ranks = parse_ranks(ranks)?;
    let (dims, data) = read_hcub(cube).with_context(|| format!("reading {}", cube.display()))?;
    let t = Tensor4::from_vec(dims, data.into_iter().map(f64::from).collect())?;
    let f = tucker(&t, ranks)?;
    let approx = reconstruct(&f)?;
    let norm = t.frobenius_norm();
    let rel = approx.sub(&t)?.frobenius_norm() / norm.max(f64::MIN_POSITIVE);
    let mut ortho: f64 = 0.0;
    for u in &f.factors {
        let g = u.transpose().matmul(u)?;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                ortho = ortho.max((g.get(i, j) - target).abs());
            }
        }
    }
    let core = &f.core;
    let vals = core.data();
    let energy = core.frobenius_norm().powi(2) / (norm * norm).max(f64::MIN_POSITIVE);
    println!("cube {} dims {:?}", cube.display(), dims);
    println!("core dims {:?} ({} values)", core.dims(), vals.len());
    println!(
        "core norm {:.6e}, tensor norm {:.6e}, captured energy {:.6}",
        core.frobenius_norm(),
        norm,
        energy
    );
    println!(
        "core min {:.6e} max {:.6e} mean {:.6e}",
        vals.iter().cloned().fold(f64::INFINITY, f64::min),
        vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        vals.iter().sum::<f64>() / vals.len() as f64
    );
    println!("relative reconstruction error {rel:.6e}");
    println!("max factor orthonormality defect {ortho:.3e}");
    for (n, s) in f.singular_values.iter().enumerate() {
        let shown: Vec<String> = s.iter().take(6).map(|x| format!("{x:.4e}")).collect();
        println!("mode {} leading singular values: {}", n + 1, shown.join(" "));
    }
    if ranks == VISION_RANKS {
        println!("feature vector length {}", vals.len());
    }
    Ok(())
}
