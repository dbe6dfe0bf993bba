use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fruitsense::channel_model::plan_cfr;
use fruitsense::experiment::{build_library, run_benchmark};
use fruitsense::{Artifact, CsiDataset, ExperimentConfig};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fruitsense"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const NOISE_FREE: &str = "phi_s_range = 0.0\n\
[errors]\nphi_c = false\nphi_d_sigma = 0.0\namplitude_sigma = 0.0\n\
[room]\nreflectors_min = 0\nreflectors_max = 0\n";

#[test]
fn simulate_is_deterministic_and_uses_21_channels() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&["simulate", "--seed", "11", "--out", s(&a)]);
    ok(&["simulate", "--seed", "11", "--out", s(&b)]);
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let ds = CsiDataset::load(&a).unwrap();
    assert_eq!(ds.plan.channel_count(), 21);
    assert_eq!(ds.frames.len(), 10);
    ok(&["simulate", "--seed", "12", "--out", s(&b)]);
    assert_ne!(std::fs::read(&b).unwrap(), ta);
}

#[test]
fn zero_error_simulation_matches_the_channel_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", NOISE_FREE);
    let out = dir.path().join("ds.jsonl");
    ok(&["--config", s(&cfg), "simulate", "--class", "unripen", "--out", s(&out)]);
    let ds = CsiDataset::load(&out).unwrap();
    let h = plan_cfr(ds.truth.as_ref().unwrap(), &ds.plan).unwrap();
    for frame in &ds.frames {
        assert_eq!(frame, &h);
    }
}

#[test]
fn staged_commands_compose_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let mut feats = Vec::new();
    for (i, class) in ["unripen", "half_ripen", "ripen", "over_ripen"].iter().enumerate() {
        let t = i.to_string();
        ok(&["simulate", "--class", class, "--trial", &t, "--out", s(&p("ds.jsonl"))]);
        ok(&["calibrate", s(&p("ds.jsonl")), "--out", s(&p("cal.jsonl"))]);
        ok(&["pdp", s(&p("cal.jsonl")), "--out", s(&p("pdp.jsonl")), "--plot-data", s(&p("plot"))]);
        ok(&["extract", s(&p("pdp.jsonl")), "--out", s(&p("dp.jsonl")), "--plot-data", s(&p("plot"))]);
        let f = p(&format!("f{i}.jsonl"));
        ok(&["features", s(&p("dp.jsonl")), "--out", s(&f)]);
        feats.push(format!("{class}={}", s(&f)));
    }
    let cal = std::fs::read_to_string(p("cal.jsonl")).unwrap();
    assert!(cal.lines().next().unwrap().contains("\"calibrated\":true"));
    let pdp_csv = std::fs::read_to_string(p("plot.pdp.csv")).unwrap();
    assert_eq!(pdp_csv.lines().next(), Some("delay_ns,lasso,refit"));
    assert_eq!(pdp_csv.lines().count(), 202);
    let spec_csv = std::fs::read_to_string(p("plot.spectrum.csv")).unwrap();
    assert_eq!(spec_csv.lines().count(), 1 + 21 * 56);

    let lib = p("lib.jsonl");
    let mut args = vec!["profile-build", "--out", s(&lib)];
    for f in &feats {
        args.push("--sample");
        args.push(f);
    }
    ok(&args);
    let out = ok(&["classify", s(&p("f2.jsonl")), "--library", s(&p("lib.jsonl"))]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    // A sample that built its own profile matches that profile perfectly.
    assert_eq!(v["label"], "ripen");
    assert_eq!(v["scores"].as_array().unwrap().len(), 4);
}

#[test]
fn noise_free_single_slab_reports_one_tap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", NOISE_FREE);
    let ds = dir.path().join("ds.jsonl");
    ok(&["--config", s(&cfg), "simulate", "--out", s(&ds)]);
    let out = ok(&["--config", s(&cfg), "pipeline", s(&ds)]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["schema"], "fruitsense.report/1");
    assert_eq!(v["paths"].as_array().unwrap().len(), 1);
    assert!(v["objective_monotone"].as_bool().unwrap());
}

fn strip_timings(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timings");
    v
}

fn assert_close(path: &str, got: &Value, want: &Value) {
    match (got, want) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-3), "{path}: {a} != {b}");
        }
        (Value::Array(a), Value::Array(b)) => {
            assert_eq!(a.len(), b.len(), "{path}: length");
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                assert_close(&format!("{path}[{i}]"), x, y);
            }
        }
        (Value::Object(a), Value::Object(b)) => {
            let mut ka: Vec<_> = a.keys().collect();
            let mut kb: Vec<_> = b.keys().collect();
            ka.sort();
            kb.sort();
            assert_eq!(ka, kb, "{path}: keys");
            for k in ka {
                assert_close(&format!("{path}.{k}"), &a[k], &b[k]);
            }
        }
        _ => assert_eq!(got, want, "{path}"),
    }
}

#[test]
fn pipeline_report_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds.jsonl");
    ok(&["simulate", "--seed", "7", "--class", "half_ripen", "--out", s(&ds)]);
    let out = ok(&["pipeline", s(&ds)]);
    let got = strip_timings(serde_json::from_slice(&out.stdout).unwrap());
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/pipeline_seed7.json");
    if std::env::var_os("FRUITSENSE_UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let want: Value = serde_json::from_str(&std::fs::read_to_string(&golden).unwrap()).unwrap();
    assert_close("report", &got, &want);
}

#[test]
fn monte_carlo_pipeline_matches_library_run() {
    let dir = tempfile::tempdir().unwrap();
    let text = "seed = 3\ntrials = 8\ntraining_samples = 2\n";
    let cfg_path = write(dir.path(), "c.toml", text);
    let out = ok(&["--config", s(&cfg_path), "pipeline"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["schema"], "fruitsense.benchmark/1");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("accuracy:"), "{stderr}");

    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    let lib = build_library(&cfg).unwrap();
    let report = run_benchmark(&cfg, &lib).unwrap();
    assert_eq!(v["accuracy"].as_f64().unwrap(), report.accuracy);
    assert_eq!(v["outcomes"].as_array().unwrap().len(), 8);

    lib.save(&dir.path().join("lib.jsonl")).unwrap();
    let again = ok(&["--config", s(&cfg_path), "--trials", "4", "pipeline", "--library", s(&dir.path().join("lib.jsonl"))]);
    let w: Value = serde_json::from_slice(&again.stdout).unwrap();
    assert_eq!(w["trials"], 4);
}

fn bench_rows(out: &Output) -> Vec<(String, String)> {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,value"));
    lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.to_string(), b.to_string())
        })
        .collect()
}

fn row<'a>(rows: &'a [(String, String)], key: &str) -> &'a str {
    &rows.iter().find(|r| r.0 == key).unwrap().1
}

#[test]
fn bench_rows_are_machine_readable_and_deterministic() {
    let a = bench_rows(&ok(&["bench", "--seed", "5"]));
    let b = bench_rows(&ok(&["bench", "--seed", "5"]));
    assert_eq!(row(&a, "solver_iterations"), row(&b, "solver_iterations"));
    assert_eq!(row(&a, "objective_monotone"), "true");
    assert_eq!(row(&a, "channels"), "21");
    for key in ["simulate_s", "calibrate_s", "pdp_s", "refit_s", "extract_s", "features_s", "total_s"] {
        assert!(row(&a, key).parse::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn bench_on_a_single_channel_plan_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[plan]\ncenters_mhz = [5500.0]\n");
    let rows = bench_rows(&ok(&["--config", s(&cfg), "bench"]));
    assert_eq!(row(&rows, "channels"), "1");
    assert!(row(&rows, "total_s").parse::<f64>().unwrap() < 1.0);
}

#[test]
fn exit_codes_name_the_failing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| run(args).status.code().unwrap();

    let bad_key = write(dir.path(), "bad.toml", "sed = 1\n");
    assert_eq!(code(&["--config", s(&bad_key), "simulate"]), 2);
    assert_eq!(code(&["--config", s(&dir.path().join("missing.toml")), "simulate"]), 2);
    assert_eq!(code(&["simulate", "--class", "mushy"]), 2);
    assert_eq!(code(&["calibrate", s(&dir.path().join("missing.jsonl"))]), 3);

    let garbage = write(dir.path(), "g.jsonl", "{\"format\":\"other\"}\n");
    assert_eq!(code(&["calibrate", s(&garbage)]), 3);

    // A profile with no taps has no direct path to extract.
    let ds = dir.path().join("ds.jsonl");
    ok(&["simulate", "--out", s(&ds)]);
    ok(&["calibrate", s(&ds), "--out", s(&dir.path().join("cal.jsonl"))]);
    ok(&["pdp", s(&dir.path().join("cal.jsonl")), "--out", s(&dir.path().join("pdp.jsonl"))]);
    let text = std::fs::read_to_string(dir.path().join("pdp.jsonl")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: Value = serde_json::from_str(&lines[1]).unwrap();
    for pair in rec["complex"].as_array_mut().unwrap() {
        *pair = serde_json::json!([0.0, 0.0]);
    }
    lines[1] = rec.to_string();
    let empty = write(dir.path(), "empty.jsonl", &(lines.join("\n") + "\n"));
    let out = run(&["extract", s(&empty)]);
    assert_eq!(out.status.code(), Some(13));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[extract]"));
}
