use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
# small network, quick trees
neural.widths = 2,4,4
neural.embed_dim = 8
neural.gru_hidden = 8
neural.gru_layers = 1
neural.head_dims = 16,8
neural.d_model = 12
neural.heads = 2
neural.ff_dim = 8
neural.tf_layers = 1
neural.max_epochs = 2
gbt.max_depth = 3
gbt.n_estimators = 20
";

fn hurricast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hurricast"))
        .args(args)
        .env_remove("HURICAST_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = hurricast(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

struct Run {
    _tmp: tempfile::TempDir,
    out: PathBuf,
    cfg: PathBuf,
}

impl Run {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tmp.path().join("small.cfg");
        fs::write(&cfg, SMALL).unwrap();
        let out = tmp.path().join("run");
        Self { _tmp: tmp, out, cfg }
    }

    fn args<'a>(&'a self, cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec![cmd, "--out", self.out.to_str().unwrap(), "--config", self.cfg.to_str().unwrap()];
        v.extend_from_slice(extra);
        v
    }

    fn ok(&self, cmd: &str, extra: &[&str]) -> String {
        ok(&self.args(cmd, extra))
    }

    fn status(&self, cmd: &str, extra: &[&str]) -> Output {
        hurricast(&self.args(cmd, extra))
    }
}

fn stat_run(seed: &str) -> Run {
    let r = Run::new();
    r.ok("synth", &["--storms", "40", "--steps", "24", "--seed", seed]);
    r.ok("ingest", &["--seed", seed]);
    r.ok("train", &["--variant", "1", "--seed", seed]);
    r.ok("predict", &["--variant", "1", "--seed", seed]);
    r
}

fn data_lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn statistical_chain_end_to_end() {
    let r = stat_run("3");
    let fc = r.out.join("forecasts/variant1.csv");
    let text = fs::read_to_string(&fc).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("# generated-by=hurricast"), "{first}");
    assert!(first.contains("seed=3"), "{first}");
    assert!(first.contains("model=HUML-(stat, xgb)"), "{first}");
    let lines = data_lines(&fc);
    assert_eq!(lines[0], "sid,iso_t0,pred_wind,pred_dlat,pred_dlon,pred_lat,pred_lon");
    assert!(lines.len() > 1);

    let report = r.ok("evaluate", &[]);
    assert!(report.contains("HUML-(stat, xgb)"), "{report}");
    assert!(report.contains("skill relative to Decay-SHIPS"), "{report}");
    for f in ["reports/intensity.csv", "reports/intensity.txt", "reports/track.csv", "reports/track.txt"] {
        assert!(r.out.join(f).is_file(), "{f}");
    }
    assert!(r.out.join("effective.cfg").is_file());
    assert!(!r.out.join(".hurricast.lock").exists());
}

#[test]
fn same_seed_gives_identical_outputs() {
    let a = stat_run("11");
    let b = stat_run("11");
    for f in ["tracks.csv", "operational.csv", "cases.json", "forecasts/variant1.csv", "bundles/variant1.hbnd"] {
        assert_eq!(
            fs::read(a.out.join(f)).unwrap(),
            fs::read(b.out.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_from_environment_and_flag_precedence() {
    let r = Run::new();
    let run = |env: Option<&str>, extra: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_hurricast"));
        c.args(r.args("synth", extra)).args(["--storms", "5", "--steps", "24"]);
        match env {
            Some(v) => c.env("HURICAST_SEED", v),
            None => c.env_remove("HURICAST_SEED"),
        };
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(r.out.join("effective.cfg")).unwrap()
    };
    assert!(run(Some("42"), &[]).contains("seed=42"));
    assert!(run(Some("42"), &["--seed", "5"]).contains("seed=5"));
    assert!(run(None, &[]).contains("seed=0"));

    let mut c = Command::new(env!("CARGO_BIN_EXE_hurricast"));
    let o = c.args(r.args("synth", &[])).env("HURICAST_SEED", "abc").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("HURICAST_SEED"));
}

#[test]
fn effective_config_reloads_to_the_same_run() {
    let r = Run::new();
    r.ok("synth", &["--storms", "5", "--steps", "24", "--seed", "9"]);
    let saved = r.out.join("effective.cfg");
    let first = fs::read_to_string(&saved).unwrap();
    let copy = r.out.parent().unwrap().join("copy.cfg");
    fs::copy(&saved, &copy).unwrap();
    let o = hurricast(&["synth", "--config", copy.to_str().unwrap(), "--storms", "5", "--steps", "24"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&saved).unwrap(), first);
}

#[test]
fn unknown_flag_exits_two() {
    let o = hurricast(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = hurricast(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = hurricast(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn predict_without_bundle_names_the_missing_file() {
    let r = Run::new();
    r.ok("synth", &["--storms", "20", "--steps", "24"]);
    r.ok("ingest", &[]);
    let o = r.status("predict", &["--variant", "2"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("variant2.hbnd"), "{err}");
    assert!(err.contains("hurricast train --variant 2"), "{err}");
}

#[test]
fn bad_inputs_fail_with_status_one() {
    let r = Run::new();
    assert_eq!(r.status("train", &["--variant", "1"]).status.code(), Some(1));
    assert_eq!(r.status("train", &["--variant", "9"]).status.code(), Some(1));
    assert_eq!(r.status("predict", &["--split", "later"]).status.code(), Some(1));
    let bad = r.out.parent().unwrap().join("bad.cfg");
    fs::write(&bad, "gbt.max_depth = deep\n").unwrap();
    let o = hurricast(&["synth", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gbt.max_depth"));
}

#[test]
fn locked_output_directory_is_refused() {
    let r = Run::new();
    fs::create_dir_all(&r.out).unwrap();
    fs::write(r.out.join(".hurricast.lock"), "1\n").unwrap();
    let o = r.status("synth", &["--storms", "5", "--steps", "24"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
    assert!(!r.out.join("tracks.csv").exists());
}

#[test]
fn full_chain_with_vision_variants_and_ensemble() {
    let r = Run::new();
    r.ok("synth", &["--storms", "40", "--steps", "24"]);
    r.ok("ingest", &[]);
    for v in ["1", "2", "3", "4"] {
        r.ok("train", &["--variant", v]);
        r.ok("predict", &["--variant", v]);
    }
    let emb = r.ok("extract", &["--variant", "2"]);
    assert!(emb.contains("length 135"), "{emb}");
    let lines = data_lines(&r.out.join("embeddings/variant2.csv"));
    assert_eq!(lines[0].split(',').count(), 2 + 135);
    r.ok("predict", &["--variant", "3", "--split", "validation"]);
    assert!(r.out.join("forecasts/validation/variant3.csv").is_file());

    r.ok("ensemble", &[]);
    for v in ["variant5.csv", "variant6.csv", "op_consensus.csv"] {
        assert!(r.out.join("forecasts").join(v).is_file(), "{v}");
    }
    let report = r.ok("evaluate", &[]);
    for m in ["HUML-ensemble", "HUML/OP-average consensus", "OP-A", "CLP5"] {
        assert!(report.contains(m), "{m} missing from\n{report}");
    }
}

#[test]
fn fixture_skills_are_reproduced() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/tables_fixture.csv");
    let out = ok(&["evaluate", "--fixtures", fixture.to_str().unwrap()]);
    assert!(!out.contains("FAIL"), "{out}");
    assert!(out.contains("Table 3"));
    assert!(out.contains("Table 6"));
}

#[test]
fn decompose_reports_a_135_value_core() {
    let r = Run::new();
    r.ok("synth", &["--storms", "2", "--steps", "24"]);
    let cube = fs::read_dir(r.out.join("cubes"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "hcub"))
        .unwrap();
    let out = ok(&["decompose", "--cube", cube.to_str().unwrap()]);
    assert!(out.contains("feature vector length 135"), "{out}");
    assert!(out.contains("relative reconstruction error"));

    let o = hurricast(&["decompose", "--cube", cube.to_str().unwrap(), "--ranks", "3,5"]);
    assert_eq!(o.status.code(), Some(1));
}
