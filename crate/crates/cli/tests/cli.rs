use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use resmatch::featio::read_features;
use resmatch::pipeline::{save_weights, ModelConfig, ModelParams};
use serde_json::Value;
use tempfile::TempDir;

fn resmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resmatch"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Value of `key=` in line-oriented output.
fn field(out: &Output, key: &str) -> String {
    stdout(out)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
        .unwrap_or_else(|| panic!("no `{key}` in:\n{}", stdout(out)))
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn synth_pair(dir: &TempDir, channels: usize, points: usize, seed: u64) -> (String, String) {
    let (a, b, gt) = (p(dir, "a.rmf"), p(dir, "b.rmf"), p(dir, "gt.rmg"));
    let out = resmatch(&[
        "synth", "--out-a", &a, "--out-b", &b, "--gt", &gt,
        "--channels", &channels.to_string(), "--points", &points.to_string(), "--seed", &seed.to_string(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (a, b)
}

fn micro_weights(dir: &TempDir, name: &str, cfg: ModelConfig) -> String {
    let path = p(dir, name);
    save_weights(&ModelParams::new(&cfg).unwrap(), &path).unwrap();
    path
}

fn schema() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas/attention-dump.schema.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_flag_errors() {
    assert_eq!(code(&resmatch(&["--help"])), 0);
    assert_eq!(code(&resmatch(&["match", "--bogus"])), 3);
    assert_eq!(code(&resmatch(&[])), 3);
}

#[test]
fn synth_writes_readable_files() {
    let dir = TempDir::new().unwrap();
    let (a, b) = synth_pair(&dir, 16, 20, 4);
    assert_eq!(read_features(&a).unwrap().channels(), 16);
    assert!(read_features(&b).unwrap().len() > 0);
}

#[test]
fn missing_weights_is_io_error_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let (a, b) = synth_pair(&dir, 8, 8, 0);
    let missing = p(&dir, "nowhere.rmw");
    let out = resmatch(&["match", "--weights", &missing, "--a", &a, "--b", &b]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains(&missing), "{}", stderr(&out));
}

#[test]
fn out_of_range_threshold_is_config_error() {
    let dir = TempDir::new().unwrap();
    let (a, b) = synth_pair(&dir, 8, 8, 0);
    let w = micro_weights(&dir, "w.rmw", ModelConfig::micro());
    let out = resmatch(&["match", "--weights", &w, "--a", &a, "--b", &b, "--threshold", "1.1"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("threshold"));
}

#[test]
fn corrupt_weights_and_bad_thread_count() {
    let dir = TempDir::new().unwrap();
    let (a, b) = synth_pair(&dir, 8, 8, 0);
    let w = micro_weights(&dir, "w.rmw", ModelConfig::micro());
    let mut bytes = fs::read(&w).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&w, bytes).unwrap();
    assert_eq!(code(&resmatch(&["match", "--weights", &w, "--a", &a, "--b", &b])), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_resmatch"))
        .args(["gradcheck", "--preset", "micro"])
        .env("RESMATCH_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
}

#[test]
fn match_output_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = synth_pair(&dir, 8, 12, 2);
    let w = micro_weights(&dir, "w.rmw", ModelConfig { match_threshold: 0.05, ..ModelConfig::micro() });
    let run = |name: &str| {
        let out_path = p(&dir, name);
        let out = resmatch(&["match", "--weights", &w, "--a", &a, "--b", &b, "--out", &out_path]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert_eq!(field(&out, "n_a"), read_features(&a).unwrap().len().to_string());
        fs::read(out_path).unwrap()
    };
    assert_eq!(run("m1.txt"), run("m2.txt"));
}

#[test]
fn trained_weights_match_a_file_against_itself() {
    let dir = TempDir::new().unwrap();
    let w = p(&dir, "trained.rmw");
    let metrics = p(&dir, "metrics.json");
    let out = resmatch(&[
        "train", "--preset", "micro", "--points", "16", "--sigma", "0.1", "--outliers", "0", "--steps", "2000", "--batch", "4",
        "--lr", "3e-3", "--eval-every", "500", "--eval-pairs", "4", "--out", &w, "--metrics", &metrics,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log: Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    let steps: Vec<u64> = log.as_array().unwrap().iter().map(|r| r["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![0, 500, 1000, 1500, 2000]);
    for key in ["loss", "precision", "matching_score", "recall"] {
        assert!(log[0][key].is_number(), "{key}");
    }

    let (a, _) = synth_pair(&dir, 8, 24, 77);
    let n = read_features(&a).unwrap().len();
    let out = resmatch(&["match", "--weights", &w, "--a", &a, "--b", &a]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let identity: usize = field(&out, "identity_matches").parse().unwrap();
    assert!(identity as f64 >= 0.95 * n as f64, "{identity} of {n}\n{}", stdout(&out));
}

#[test]
fn dump_attn_validates_against_schema() {
    let dir = TempDir::new().unwrap();
    let (a, b) = synth_pair(&dir, 8, 24, 5);
    let w = micro_weights(&dir, "w.rmw", ModelConfig { k: 8, ..ModelConfig::micro() });
    let out_path = p(&dir, "dump.json");
    let out = resmatch(&[
        "dump-attn", "--weights", &w, "--a", &a, "--b", &b, "--layer", "1", "--head", "1", "--out", &out_path, "--sparse",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&out_path).unwrap();
    let dump: Value = serde_json::from_str(&text).unwrap();
    let validator = jsonschema::validator_for(&schema()).unwrap();
    assert!(validator.is_valid(&dump), "{:?}", validator.iter_errors(&dump).map(|e| e.to_string()).collect::<Vec<_>>());
    let again: Value = serde_json::from_str(&serde_json::to_string(&dump).unwrap()).unwrap();
    assert_eq!(again, dump);

    // a malformed document is rejected by the same schema
    let mut broken = dump.clone();
    broken["streams"][0]["queries"][0]["attention"][0]["key"] = Value::from(-1);
    assert!(!validator.is_valid(&broken));

    for stream in dump["streams"].as_array().unwrap() {
        for q in stream["queries"].as_array().unwrap() {
            let neighbors: Vec<u64> = q["neighbors"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
            let attention = q["attention"].as_array().unwrap();
            assert!(!attention.is_empty() && attention.len() <= 16);
            for t in attention {
                assert!(neighbors.contains(&t["key"].as_u64().unwrap()));
            }
        }
        assert_eq!(stream["bypass_uniform"], Value::Bool(false));
    }
}

#[test]
fn dump_attn_flags_uniform_bypass_of_zero_modulation() {
    let dir = TempDir::new().unwrap();
    let (a, b) = synth_pair(&dir, 8, 10, 6);
    let cfg = ModelConfig { lambda_init: 0.0, beta_init: 0.0, ..ModelConfig::micro() };
    let w = micro_weights(&dir, "zero.rmw", cfg);
    let out_path = p(&dir, "dump.json");
    let out = resmatch(&["dump-attn", "--weights", &w, "--a", &a, "--b", &b, "--layer", "0", "--head", "0", "--out", &out_path]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(field(&out, "uniform_bypass"), "4");
    let dump: Value = serde_json::from_str(&fs::read_to_string(&out_path).unwrap()).unwrap();
    for stream in dump["streams"].as_array().unwrap() {
        assert_eq!(stream["bypass_uniform"], Value::Bool(true));
        assert!(stream["queries"].as_array().unwrap().iter().all(|q| q["bypass"].as_array().unwrap().is_empty()));
        assert!(stream["queries"][0]["neighbors"].is_null());
    }
}

#[test]
fn dump_attn_rejects_out_of_range_layer_or_head() {
    let dir = TempDir::new().unwrap();
    let (a, b) = synth_pair(&dir, 8, 8, 0);
    let w = micro_weights(&dir, "w.rmw", ModelConfig::micro());
    let o = p(&dir, "d.json");
    for (layer, head) in [("2", "0"), ("0", "2")] {
        let out = resmatch(&["dump-attn", "--weights", &w, "--a", &a, "--b", &b, "--layer", layer, "--head", head, "--out", &o]);
        assert_eq!(code(&out), 3, "{}", stderr(&out));
    }
    assert!(!PathBuf::from(&o).exists());
}

#[test]
fn feature_width_mismatch_is_config_error() {
    let dir = TempDir::new().unwrap();
    let (a, b) = synth_pair(&dir, 16, 8, 0);
    let w = micro_weights(&dir, "w.rmw", ModelConfig::micro());
    let out = resmatch(&["match", "--weights", &w, "--a", &a, "--b", &b]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn bench_eval_and_gradcheck_wrappers() {
    let dir = TempDir::new().unwrap();
    let csv = p(&dir, "bench.csv");
    let out = resmatch(&["bench", "--preset", "micro", "--sizes", "8,16", "--out", &csv]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("n,mode,"));
    assert_eq!(code(&resmatch(&["bench", "--preset", "micro", "--modes", "warp"])), 3);

    let out = resmatch(&["gradcheck", "--preset", "micro"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(field(&out, "passed"), "true");

    let w = micro_weights(&dir, "w.rmw", ModelConfig::micro());
    let out = resmatch(&["eval", "--weights", &w, "--pairs", "3", "--points", "12"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(field(&out, "pairs"), "3");
    let precision: f64 = field(&out, "baseline_precision").parse().unwrap();
    assert!((0.0..=1.0).contains(&precision));
}
