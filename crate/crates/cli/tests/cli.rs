use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rare_cli::store::{DatasetManifest, WeightsManifest};
use rare_core::io::read_image;
use serde_json::Value;

fn minimal_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/minimal.toml")
}

fn rare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rare"))
        .args(args)
        .env_remove("RARE_THREADS")
        .output()
        .expect("spawning rare")
}

fn stage(stage: &str, out: &Path, extra: &[&str]) -> Output {
    let cfg = minimal_config();
    let mut args = vec![stage, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    rare(&args)
}

fn ok(output: Output) -> String {
    assert!(
        output.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        output.status,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout).unwrap()
}

fn run_pipeline(out: &Path, extra: &[&str]) {
    for s in ["simulate", "train", "reconstruct", "evaluate", "report"] {
        ok(stage(s, out, extra));
    }
}

fn error_record(output: &Output) -> Value {
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    let line = stderr.lines().last().expect("stderr is empty");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn read(path: PathBuf) -> Vec<u8> {
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    run_pipeline(out, &["-q"]);

    let manifest: DatasetManifest = toml::from_str(&fs::read_to_string(out.join("data/manifest.toml")).unwrap()).unwrap();
    // One training and one test object, two acquisitions each for training, one cell.
    assert_eq!(manifest.objects.len(), 2);
    assert_eq!(manifest.acquisitions.len(), 2);
    assert_eq!(manifest.cases.len(), 1);
    assert_eq!(manifest.dims, [2, 16, 16]);

    let weights: WeightsManifest = toml::from_str(&fs::read_to_string(out.join("weights/manifest.toml")).unwrap()).unwrap();
    assert_eq!(weights.find("a2a").len(), 1);
    assert_eq!(weights.find("denoiser").len(), 1);

    let case = &manifest.cases[0].name;
    for m in ["zf", "cs-tv", "rare-a2a", "red-denoiser"] {
        assert!(out.join(format!("recon/{case}/{m}.cimg")).is_file(), "{m} image");
        assert!(out.join(format!("report/residuals/{case}/{m}.cimg")).is_file(), "{m} residual");
    }

    let table = fs::read_to_string(out.join("results/table.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "method,rate,snr_db,cases,psnr_db,ssim");
    assert_eq!(table.lines().count(), 5);
    assert_eq!(table, fs::read_to_string(out.join("report/table.csv")).unwrap());
    assert!(out.join("results/metrics.csv").is_file());
    assert!(out.join("results/phase_curves.csv").is_file());
}

#[test]
fn same_seed_reproduces_bytes_and_a_new_seed_does_not() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    run_pipeline(a.path(), &["-q", "--seed", "7"]);
    run_pipeline(b.path(), &["-q", "--seed", "7"]);
    for rel in ["data/manifest.toml", "weights/a2a.rw", "weights/manifest.toml", "results/table.csv", "results/metrics.csv"] {
        assert_eq!(read(a.path().join(rel)), read(b.path().join(rel)), "{rel}");
    }
    ok(stage("simulate", c.path(), &["-q", "--seed", "8"]));
    assert_ne!(read(a.path().join("data/manifest.toml")), read(c.path().join("data/manifest.toml")));
}

#[test]
fn resume_skips_finished_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    run_pipeline(out, &["-q"]);
    let before = read(out.join("weights/a2a.rw"));
    let said = ok(stage("simulate", out, &["--resume"]));
    assert!(said.contains("up to date"), "{said}");
    let said = ok(stage("train", out, &["--resume"]));
    assert!(said.contains("a2a weights up to date"), "{said}");
    let said = ok(stage("reconstruct", out, &["--resume"]));
    assert_eq!(said.matches("up to date").count(), 4, "{said}");
    assert_eq!(before, read(out.join("weights/a2a.rw")));

    // A changed grid invalidates only the methods that use it.
    let said = ok(stage("reconstruct", out, &["--resume", "--grid", "lambda=0.01"]));
    assert_eq!(said.matches("up to date").count(), 3, "{said}");
}

#[test]
fn report_scales_residuals_and_rejects_stale_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    run_pipeline(out, &["-q"]);
    let manifest: DatasetManifest = toml::from_str(&fs::read_to_string(out.join("data/manifest.toml")).unwrap()).unwrap();
    let rel = format!("report/residuals/{}/zf.cimg", manifest.cases[0].name);
    let base = read_image(&out.join(&rel)).unwrap();
    ok(stage("report", out, &["-q", "--residual-factor", "20"]));
    let doubled = read_image(&out.join(&rel)).unwrap();
    let err = doubled.sub(&base.scaled(2.0)).norm();
    assert!(err <= 1e-12 * base.norm(), "{err}");

    fs::write(out.join("results/table.csv"), "method\n").unwrap();
    let rec = error_record(&stage("report", out, &["-q"]));
    assert_eq!(rec["error"]["command"], "report");
    assert!(rec["error"]["message"].as_str().unwrap().contains("stale"));
}

#[test]
fn failures_print_a_json_record_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let output = stage("reconstruct", out, &[]);
    assert_eq!(output.status.code(), Some(1));
    let rec = error_record(&output);
    assert_eq!(rec["error"]["command"], "reconstruct");
    assert!(rec["error"]["message"].as_str().unwrap().contains("rare simulate"));

    let rec = error_record(&rare(&["simulate", "--config", "/nonexistent.toml", "--out", out.to_str().unwrap()]));
    assert_eq!(rec["error"]["command"], "simulate");

    let rec = error_record(&stage("simulate", out, &["--methods", "zf,bogus"]));
    assert!(rec["error"]["message"].as_str().unwrap().contains("bogus"));

    let rec = error_record(&stage("simulate", out, &["--grid", "mu=1"]));
    assert_eq!(rec["error"]["command"], "simulate");

    let bad = out.join("bad.toml");
    fs::write(&bad, "schema_version = 1\n[phantom]\nsize = 4\n").unwrap();
    let rec = error_record(&rare(&["simulate", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert!(rec["error"]["message"].as_str().unwrap().contains("phantom.size"));

    let output = rare(&["simulate", "--no-such-flag"]);
    assert_eq!(output.status.code(), Some(2));
    assert_eq!(error_record(&output)["error"]["command"], "usage");

    let cfg = minimal_config();
    let output = Command::new(env!("CARGO_BIN_EXE_rare"))
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("RARE_THREADS", "0")
        .output()
        .unwrap();
    assert!(error_record(&output)["error"]["message"].as_str().unwrap().contains("RARE_THREADS"));
}

#[test]
fn thread_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = minimal_config();
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        for s in ["simulate", "train", "reconstruct", "evaluate"] {
            let output = Command::new(env!("CARGO_BIN_EXE_rare"))
                .args([s, "-q", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
                .env("RARE_THREADS", threads)
                .output()
                .unwrap();
            ok(output);
        }
    }
    for rel in ["data/manifest.toml", "weights/a2a.rw", "results/metrics.csv"] {
        assert_eq!(read(a.path().join(rel)), read(b.path().join(rel)), "{rel}");
    }
}
