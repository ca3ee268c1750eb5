//! End-to-end pipeline contracts: idempotent stage skipping, stage
//! isolation, manifest integrity, byte-identical reports, and the CLI
//! surface.

use once_cell::sync::Lazy;
use sendvae::experiment::{
    emit_report, hash_tree, run_sweep, smoke_config, ExperimentManifest, SweepOutcome,
};
use std::path::PathBuf;
use std::sync::Mutex;

struct SharedRun {
    dir: PathBuf,
    first: SweepOutcome,
}

/// One smoke sweep shared by the tests below (each test locks it).
static RUN: Lazy<Mutex<SharedRun>> = Lazy::new(|| {
    sendvae::init_threads();
    let dir = std::env::temp_dir().join(format!("sendvae-pipeline-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let first = run_sweep(&smoke_config(), &dir, false).expect("smoke sweep");
    assert_eq!(first.partial_failures, 0, "smoke sweep must complete");
    Mutex::new(SharedRun { dir, first })
});

fn lock() -> std::sync::MutexGuard<'static, SharedRun> {
    RUN.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn smoke_sweep_completes_with_all_hashes() {
    let run = lock();
    let manifest = &run.first.manifests[0];
    assert!(manifest.partial.is_none());
    let expected = ["dataset", "teacher", "pretrain-vae", "align-vae", "train-flow", "eval"];
    assert_eq!(manifest.stages.len(), expected.len());
    for (s, name) in manifest.stages.iter().zip(expected) {
        assert_eq!(s.name, name);
        assert_eq!(s.artifact_hash.len(), 64, "sha256 hex expected");
        assert!(!s.input_hash.is_empty());
    }
    manifest.verify(&run.dir).expect("artifacts match recorded hashes");
    assert!(run.dir.join("report.json").exists());
    assert!(run.dir.join("report.md").exists());
}

#[test]
fn rerun_skips_every_stage_and_keeps_manifest_content() {
    let run = lock();
    // settle state (other tests may have mutated the shared dir), then the
    // back-to-back rerun must skip everything and reproduce the manifest
    let settled = run_sweep(&smoke_config(), &run.dir, false).expect("settle sweep");
    let again = run_sweep(&smoke_config(), &run.dir, false).expect("second sweep");
    let (a, b) = (&settled.manifests[0], &again.manifests[0]);
    for s in &b.stages {
        assert!(s.skipped, "stage {} should be skipped on identical rerun", s.name);
    }
    assert_eq!(a.config_hash, b.config_hash);
    for (sa, sb) in a.stages.iter().zip(b.stages.iter()) {
        assert_eq!(sa.input_hash, sb.input_hash);
        assert_eq!(sa.artifact_hash, sb.artifact_hash);
        // completion timestamps carry over from the original execution
        assert_eq!(sa.completed_unix_nanos, sb.completed_unix_nanos);
    }
}

#[test]
fn deleting_flow_checkpoint_reruns_only_flow_and_eval() {
    let run = lock();
    let flow_dir = run.dir.join("variants/default/flow");
    std::fs::remove_dir_all(&flow_dir).unwrap();
    let again = run_sweep(&smoke_config(), &run.dir, false).expect("post-delete sweep");
    let stages = &again.manifests[0].stages;
    for s in stages {
        match s.name.as_str() {
            "train-flow" | "eval" => {
                assert!(!s.skipped, "{} must rerun after flow deletion", s.name)
            }
            other => assert!(s.skipped, "{other} must stay cached"),
        }
    }
    assert_eq!(again.partial_failures, 0);
}

#[test]
fn fresh_runs_produce_byte_identical_reports() {
    let _guard = lock(); // serialize with the shared-dir tests
    let base = std::env::temp_dir().join(format!("sendvae-repro-{}", std::process::id()));
    let (d1, d2) = (base.join("one"), base.join("two"));
    let _ = std::fs::remove_dir_all(&base);
    run_sweep(&smoke_config(), &d1, false).unwrap();
    run_sweep(&smoke_config(), &d2, false).unwrap();
    let r1 = std::fs::read(d1.join("variants/default/eval/report.json")).unwrap();
    let r2 = std::fs::read(d2.join("variants/default/eval/report.json")).unwrap();
    assert_eq!(r1, r2, "metric reports must be byte-identical across fresh runs");
    let s1 = std::fs::read(d1.join("report.json")).unwrap();
    let s2 = std::fs::read(d2.join("report.json")).unwrap();
    assert_eq!(s1, s2);
    let _ = std::fs::remove_dir_all(&base);
}

#[test]
fn manifest_verify_detects_artifact_tampering() {
    let run = lock();
    let manifest =
        ExperimentManifest::load(run.dir.join("variants/default/manifest.json")).unwrap();
    manifest.verify(&run.dir).unwrap();

    // tamper with a dataset byte, verify must fail, then restore
    let path = run.dir.join("dataset/labels.svtf");
    let original = std::fs::read(&path).unwrap();
    let mut bad = original.clone();
    let last = bad.len() - 1;
    bad[last] ^= 0xff;
    std::fs::write(&path, &bad).unwrap();
    assert!(manifest.verify(&run.dir).is_err());
    std::fs::write(&path, &original).unwrap();
    manifest.verify(&run.dir).unwrap();
}

#[test]
fn emit_report_rebuilds_from_disk() {
    let run = lock();
    let report = emit_report(&run.dir).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert!(report.correlation[0].r.value.is_none(), "one variant cannot correlate");
    sendvae::report::validate_report_json(
        &serde_json::to_value(&report.rows[0]).unwrap(),
    )
    .unwrap();
}

#[test]
fn plots_render_loss_curves_and_skip_missing_scatter() {
    let run = lock();
    let files = sendvae::experiment::plot::render_plots(&run.dir).unwrap();
    // scatter needs >= 3 variants, so only loss curves appear
    assert!(!files.is_empty());
    for f in &files {
        let name = f.file_name().unwrap().to_string_lossy().into_owned();
        assert!(name.starts_with("loss_"), "unexpected plot {name}");
        let svg = std::fs::read_to_string(f).unwrap();
        assert!(svg.contains("<polyline"));
    }
}

#[test]
fn hash_tree_is_stable_for_unchanged_artifacts() {
    let run = lock();
    let d = run.dir.join("dataset");
    assert_eq!(hash_tree(&d).unwrap(), hash_tree(&d).unwrap());
}

#[test]
fn cli_surface_and_exit_codes() {
    let _guard = lock();
    let dir = std::env::temp_dir().join(format!("sendvae-cli-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("config.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_string_pretty(&smoke_config()).unwrap(),
    )
    .unwrap();
    let out = dir.join("out");

    // config error -> exit 2
    let bad_cfg = dir.join("bad.json");
    let mut bad = smoke_config();
    bad.dataset.config.canvas_size = 48;
    std::fs::write(&bad_cfg, serde_json::to_string_pretty(&bad).unwrap()).unwrap();
    let code = sendvae::cli::main_with_args([
        "sendvae",
        "gen-data",
        "--config",
        bad_cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);

    // gen-data succeeds -> exit 0 and dataset artifacts exist
    let code = sendvae::cli::main_with_args([
        "sendvae",
        "gen-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(out.join("dataset/images.svtf").exists());

    // unknown variant -> exit 2
    let code = sendvae::cli::main_with_args([
        "sendvae",
        "eval",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--variant",
        "nope",
    ]);
    assert_eq!(code, 2);

    // report on an empty out dir -> exit 3 (no variant reports yet)
    let code = sendvae::cli::main_with_args([
        "sendvae",
        "report",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
    let _ = std::fs::remove_dir_all(&dir);
}
