use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &["--image-size", "32", "--r-min", "4", "--r-max", "10", "--noise-min", "2", "--noise-max", "5", "--noise-side-max", "3"];
const GEN_SHAPE: &[&str] = &["--r-min", "4", "--r-max", "10", "--noise-min", "2", "--noise-max", "5", "--noise-side-max", "3"];

fn sidnet(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sidnet"))
        .args(args)
        .env("SIDNET_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = sidnet(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn cat(a: &[&str], b: &[&str]) -> Vec<String> {
    a.iter().chain(b).map(|s| s.to_string()).collect()
}

fn run(out: &Path, args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(out, &refs)
}

fn train_tiny(out: &Path) {
    let mut args = vec!["train", "--samples", "200", "--heldout", "64", "--epochs", "1", "--batch-size", "32"];
    args.extend(SMALL);
    ok(out, &args);
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_is_reproducible_and_validates_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["gen", "--count", "100", "--seed", "7"]);
    ok(b.path(), &["gen", "--count", "100", "--seed", "7"]);
    assert_eq!(fs::read(a.path().join("dataset.sids")).unwrap(), fs::read(b.path().join("dataset.sids")).unwrap());
    assert_eq!(fs::read(a.path().join("manifest_gen.json")).unwrap(), fs::read(b.path().join("manifest_gen.json")).unwrap());

    let o = sidnet(a.path(), &["gen", "--count", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_exports_pgms_and_permutes() {
    let d = tempfile::tempdir().unwrap();
    run(d.path(), cat(&["gen", "--count", "5", "--export-pgm", "3", "--permute", "--image-size", "32"], GEN_SHAPE));
    let pgms: Vec<_> = fs::read_dir(d.path().join("samples")).unwrap().collect();
    assert_eq!(pgms.len(), 3);
    let m = json(d.path().join("manifest_gen.json"));
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 4);
    assert_eq!(m["args"]["permute"], true);
}

#[test]
fn config_file_fills_flags_and_cli_wins() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    fs::write(&cfg, r#"{"count": 3, "seed": 11, "export_pgm": 1, "image_size": 32, "r_min": 4, "r_max": 10, "noise_min": 2, "noise_max": 5, "noise_side_max": 3}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    ok(d.path(), &["--config", cfg, "gen", "--count", "4"]);
    let m = json(d.path().join("manifest_gen.json"));
    assert_eq!(m["args"]["count"], 4);
    assert_eq!(m["args"]["export_pgm"], 1);
    assert_eq!(m["global"]["seed"], 11);
    ok(d.path(), &["gen", "--config", cfg, "--seed", "12"]);
    let m = json(d.path().join("manifest_gen.json"));
    assert_eq!(m["args"]["count"], 3);
    assert_eq!(m["global"]["seed"], 12);
}

#[test]
fn train_eval_and_arch_mismatch() {
    let d = tempfile::tempdir().unwrap();
    train_tiny(d.path());
    for f in ["model.sidm", "train_log.csv", "train_report.json", "manifest_train.json"] {
        assert!(d.path().join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(d.path().join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss,heldout_acc\n"));
    run(d.path(), cat(&["eval", "--samples", "50", "--arch", "small"], GEN_SHAPE));
    let r = json(d.path().join("eval_report.json"));
    assert_eq!(r["count"], 50);

    let o = sidnet(d.path(), &["eval", "--samples", "50", "--arch", "large"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("architecture"));

    let o = sidnet(d.path(), &["eval", "--checkpoint", "missing.sidm"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_from_dataset_file() {
    let d = tempfile::tempdir().unwrap();
    run(d.path(), cat(&["gen", "--count", "64", "--image-size", "32"], GEN_SHAPE));
    let ds = d.path().join("dataset.sids");
    ok(d.path(), &["train", "--dataset", ds.to_str().unwrap(), "--heldout", "32", "--epochs", "1", "--batch-size", "16"]);
    let m = json(d.path().join("manifest_train.json"));
    assert_eq!(m["resolved"]["config"]["num_samples"], 64);
    assert_eq!(m["inputs"][0]["path"], "dataset.sids");
}

#[test]
fn search_ranks_trials() {
    let d = tempfile::tempdir().unwrap();
    let mut args = vec!["search", "--trials", "3", "--samples", "64", "--heldout", "32", "--epochs", "1", "--batch-size", "16"];
    args.extend(SMALL);
    ok(d.path(), &args);
    let r = json(d.path().join("search.json"));
    let ranked = r["ranked"].as_array().unwrap();
    assert_eq!(ranked.len(), 3);
    let acc: Vec<f64> = ranked.iter().map(|t| t["accuracy"].as_f64().unwrap()).collect();
    assert!(acc.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn profile_saliency_inspect() {
    let d = tempfile::tempdir().unwrap();
    train_tiny(d.path());
    ok(d.path(), &["profile", "--layer", "3", "--all-channels", "--step", "40", "--samples-per-point", "2", "--r-min", "4", "--r-max", "10", "--noise-min", "2", "--noise-max", "5"]);
    assert!(d.path().join("profiles/layer3.svg").exists());
    assert!(d.path().join("profiles/layer3_channel5.csv").exists());
    let o = sidnet(d.path(), &["profile", "--layer", "9"]);
    assert_eq!(o.status.code(), Some(2));
    let o = sidnet(d.path(), &["profile", "--layer", "1", "--channel", "2"]);
    assert_eq!(o.status.code(), Some(2));

    let o = sidnet(d.path(), &["saliency", "--method", "patch_pca", "--r-min", "4", "--r-max", "10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("basis"));
    ok(d.path(), &["saliency", "--method", "patch_pca", "--fit-basis", "--count", "2", "--max-patches", "300", "--basis-images", "5", "--r-min", "4", "--r-max", "10", "--noise-min", "2", "--noise-max", "5"]);
    assert!(d.path().join("basis.sidb").exists());
    for f in ["image001_input.pgm", "image001_saliency.pgm", "image001_baseline.pgm", "image001.json", "summary.json"] {
        assert!(d.path().join("saliency").join(f).exists(), "{f}");
    }
    ok(d.path(), &["saliency", "--method", "guided", "--count", "1", "--r-min", "4", "--r-max", "10"]);

    ok(d.path(), &["inspect", "--kernels"]);
    let k = json(d.path().join("kernels.json"));
    let d: Vec<f64> = k["kernels"].as_array().unwrap().iter().filter_map(|e| e["dominance"].as_f64()).collect();
    assert_eq!(d.len(), 2 + 4 + 12 + 36);
    assert!(d.windows(2).all(|w| w[0] >= w[1]));
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn deterministic_pipeline_is_byte_identical() {
    let runs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for r in &runs {
        let p = r.path();
        let args = |sub: &[&str]| cat(sub, &["--deterministic", "--seed", "5"]);
        run(p, args(&["gen", "--count", "16", "--image-size", "32", "--r-min", "4", "--r-max", "10", "--noise-min", "2", "--noise-max", "5"]));
        run(p, args(&["train", "--samples", "128", "--heldout", "32", "--epochs", "2", "--batch-size", "32", "--image-size", "32", "--r-min", "4", "--r-max", "10", "--noise-min", "2", "--noise-max", "5"]));
        run(p, args(&["profile", "--layer", "4", "--all-channels", "--step", "60", "--samples-per-point", "2", "--r-min", "4", "--r-max", "10"]));
        run(p, args(&["saliency", "--fit-basis", "--count", "2", "--max-patches", "200", "--basis-images", "4", "--r-min", "4", "--r-max", "10"]));
    }
    let (a, b) = (files(runs[0].path()), files(runs[1].path()));
    assert_eq!(a.len(), b.len());
    assert!(a.len() > 20);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.strip_prefix(runs[0].path()).unwrap(), y.strip_prefix(runs[1].path()).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}
