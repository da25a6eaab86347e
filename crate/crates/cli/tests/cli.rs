use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;
use std::sync::OnceLock;

use neurodecode_cli::artifacts::{read_json, sha256_file, Run, RunManifest};
use neurodecode_cli::report::{shape_contracts, Summary, SUMMARY};
use neurodecode_cli::stages::{load_images, Split, SweepRow, GUESS, NOISE_SWEEP, REFINED, REFINED_METRICS, SPLIT, STAGE1};
use neurodecode_cli::{execute, resolve_config, CliError, Command, ConfigArgs, ExperimentConfig, Preset, PIPELINE};
use neurodecode_core::image::decode_ppm;
use neurodecode_metrics::MetricReport;
use neurodecode_models::Stage1Kind;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::smoke();
    c.out = out.to_path_buf();
    c.data.synth.n_stimuli = 32;
    c.data.synth.voxels = 80;
    c.data.pool_images = 48;
    c.hvae_train.epochs = 1;
    c.stage1.train.epochs = 3;
    c.embed.train.epochs = 1;
    c.embed.classifier_train.epochs = 1;
    c.ldm.codec_train.epochs = 1;
    c.ldm.train.epochs = 1;
    c.metrics.amplitudes = vec![0, 64];
    let c = c.resolve();
    c.validate().unwrap();
    c
}

/// One full pipeline run shared by the read-only tests.
fn shared() -> &'static Run {
    static RUN: OnceLock<(tempfile::TempDir, Run)> = OnceLock::new();
    &RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(tiny(dir.path()));
        execute(&run, Command::Run).unwrap();
        (dir, run)
    })
    .1
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            fs::copy(e.path(), target).unwrap();
        }
    }
}

/// A private copy of the shared run that a test may modify.
fn scratch() -> (tempfile::TempDir, Run) {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&shared().dir, dir.path());
    let run = Run::new(tiny(dir.path()));
    (dir, run)
}

fn bin() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_neurodecode"))
}

fn manifest(run: &Run, stage: &str) -> RunManifest {
    RunManifest::load(&run.manifest_path(stage)).unwrap()
}

#[test]
fn config_round_trips_through_json() {
    for p in [Preset::Smoke, Preset::Desk, Preset::PaperDimsShapes] {
        let c = ExperimentConfig::preset(p);
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }
    let partial = ExperimentConfig::from_json(r#"{"seed": 9}"#).unwrap();
    assert_eq!(partial.seed, 9);
    assert!(ExperimentConfig::from_json("{not json").is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = ExperimentConfig::smoke();
    let mut bad = base.clone();
    bad.stage1.model.output_len += 1;
    assert!(bad.validate().is_err());
    let mut bad = base.clone();
    bad.metrics.amplitudes = vec![8, 16];
    assert!(bad.validate().is_err());
    let mut bad = base.clone();
    bad.data.val_fraction = 1.0;
    assert!(bad.validate().is_err());
    let mut bad = base.clone();
    bad.stage1.cv_folds = 1;
    assert!(bad.validate().is_err());
    let mut bad = base;
    bad.hvae.image_size = 32;
    assert!(bad.validate().is_err());
}

#[test]
fn seed_and_out_override_the_preset() {
    let args = ConfigArgs { preset: Some(Preset::Desk), seed: Some(5), out: Some(PathBuf::from("elsewhere")), ..Default::default() };
    let c = resolve_config(&args).unwrap();
    assert_eq!((c.seed, c.out.as_path()), (5, Path::new("elsewhere")));
    assert_eq!(c.data.synth.n_stimuli, ExperimentConfig::desk().data.synth.n_stimuli);
}

#[test]
fn full_size_shape_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["--preset", "paper-dims-shapes", "--out"]).arg(dir.path()).arg("run").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s: serde_json::Value = read_json(&dir.path().join("reports/shapes.json")).unwrap();
    assert_eq!(s["stage1_input"], 15_724);
    assert_eq!(s["stage1_output"], 13_344);
    assert_eq!(s["stage1_params"], 12_400_344);
    assert_eq!(s["hvae_injected"], 13_344);
    assert_eq!(s["hvae_latent"], 91_168);
    assert_eq!(s["vision_rows"], serde_json::json!([257, 768]));
    assert_eq!(s["text_rows"], serde_json::json!([77, 768]));
    let c = shape_contracts(&Run::new(ExperimentConfig::paper_dims_shapes()));
    assert_eq!(c.ridge_vision_outputs, 257 * 768);
    assert_eq!(c.ridge_text_outputs, 77 * 768);
}

#[test]
fn shape_only_preset_refuses_training_stages() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["--preset", "paper-dims-shapes", "--out"]).arg(dir.path()).arg("synth").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_file_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut c = ExperimentConfig::smoke();
    c.metrics.amplitudes = vec![8];
    fs::write(&path, c.to_json()).unwrap();
    let out = bin().arg("--config").arg(&path).arg("--out").arg(dir.path()).arg("synth").output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(&path, "{").unwrap();
    let out = bin().arg("--config").arg(&path).arg("synth").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_upstream_artifact_names_its_producer() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("--out").arg(dir.path()).arg("train-stage1").output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("neurodecode glm"), "{err}");

    let run = Run::new(tiny(dir.path()));
    match execute(&run, Command::Reconstruct) {
        Err(e @ CliError::Missing { producer: "glm", .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected a missing glm artifact, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn every_stage_writes_a_manifest_with_audited_hashes() {
    let run = shared();
    for cmd in PIPELINE {
        let m = manifest(run, cmd.name());
        assert_eq!(m.stage, cmd.name());
        assert_eq!(m.config, run.cfg);
        assert!(!m.outputs.is_empty());
        for a in m.inputs.iter().chain(&m.outputs) {
            assert_eq!(sha256_file(&run.path(&a.path)).unwrap(), a.sha256, "{}", a.path);
        }
    }
    let stored = ExperimentConfig::load(&run.path("config.json")).unwrap();
    assert_eq!(stored, run.cfg);
}

#[test]
fn one_reconstruction_per_test_sample() {
    let run = shared();
    let split: Split = read_json(&run.path(SPLIT)).unwrap();
    for rel in [GUESS, REFINED] {
        let imgs = load_images(&run.path(rel)).unwrap();
        assert_eq!(imgs.len(), split.test.len(), "{rel}");
        assert!(imgs.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }
}

#[test]
fn rerunning_a_stage_reproduces_its_hashes() {
    let (_dir, run) = scratch();
    for cmd in [Command::Reconstruct, Command::NoiseSweep, Command::Report] {
        let before = execute(&run, cmd).unwrap().remove(0);
        let after = execute(&run, cmd).unwrap().remove(0);
        assert_eq!(before.outputs, after.outputs, "{}", cmd.name());
        assert_eq!(before.inputs, after.inputs, "{}", cmd.name());
    }
}

#[test]
fn montage_is_three_images_wide() {
    let run = shared();
    let summary: Summary = read_json(&run.path(&format!("{SUMMARY}.json"))).unwrap();
    let split: Split = read_json(&run.path(SPLIT)).unwrap();
    assert_eq!(summary.montages.len(), split.test.len());
    let size = run.cfg.data.synth.image_size;
    for rel in &summary.montages {
        let img = decode_ppm(&fs::read(run.path(rel)).unwrap()).unwrap();
        assert_eq!(img.shape(), &[3, size, 3 * size], "{rel}");
    }
}

#[test]
fn summary_aggregates_are_per_sample_means() {
    let run = shared();
    let summary: Summary = read_json(&run.path(&format!("{SUMMARY}.json"))).unwrap();
    assert!(summary.missing.is_empty(), "{:?}", summary.missing);
    assert_eq!(summary.stages.len(), 2);
    let refined: MetricReport = read_json(&run.path(&format!("{REFINED_METRICS}.json"))).unwrap();
    let n = refined.samples.len() as f64;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let mean = |f: &dyn Fn(&neurodecode_metrics::SampleMetrics) -> f64| refined.samples.iter().map(f).sum::<f64>() / n;
    let s = &summary.stages[1].mean;
    assert!(close(s.mse, mean(&|m| m.mse)));
    assert!(close(s.ssim, mean(&|m| m.ssim)));
    assert!(close(s.pixcorr, mean(&|m| m.pixcorr)));
    for k in 0..s.two_way.len() {
        assert!(close(s.two_way[k], mean(&|m| m.two_way[k])));
        assert!(close(s.sdc[k], mean(&|m| m.sdc[k])));
    }
}

#[test]
fn zero_amplitude_row_equals_the_reconstruction() {
    let run = shared();
    let rows: Vec<SweepRow> = read_json(&run.path(&format!("{NOISE_SWEEP}.json"))).unwrap();
    let refined: MetricReport = read_json(&run.path(&format!("{REFINED_METRICS}.json"))).unwrap();
    assert_eq!(rows.iter().map(|r| r.amplitude).collect::<Vec<_>>(), run.cfg.metrics.amplitudes);
    assert_eq!(rows[0].report.samples, refined.samples);
}

#[test]
fn report_needs_no_models() {
    let (_dir, run) = scratch();
    let before = fs::read(run.path(&format!("{SUMMARY}.json"))).unwrap();
    fs::remove_dir_all(run.path("models")).unwrap();
    execute(&run, Command::Report).unwrap();
    assert_eq!(fs::read(run.path(&format!("{SUMMARY}.json"))).unwrap(), before);
}

#[test]
fn partial_run_reports_placeholders() {
    let (_dir, run) = scratch();
    for rel in ["recon", "reports"] {
        fs::remove_dir_all(run.path(rel)).unwrap();
    }
    execute(&run, Command::Report).unwrap();
    let summary: Summary = read_json(&run.path(&format!("{SUMMARY}.json"))).unwrap();
    assert!(summary.stages.is_empty());
    assert!(summary.noise_sweep.is_none());
    assert!(summary.missing.iter().any(|m| m == REFINED), "{:?}", summary.missing);
    let size = run.cfg.data.synth.image_size;
    let img = decode_ppm(&fs::read(run.path(&summary.montages[0])).unwrap()).unwrap();
    assert_eq!(img.shape(), &[3, size, 3 * size]);
}

#[test]
fn injected_layer_mismatch_is_a_config_error() {
    let (_dir, run) = scratch();
    let mut cfg = run.cfg.clone();
    cfg.hvae.injected_layers -= 1;
    let cfg = cfg.resolve();
    let err = execute(&Run::new(cfg), Command::Reconstruct).map(|_| ()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");

    let mut ck: serde_json::Value = read_json(&run.path(&format!("{STAGE1}.json"))).unwrap();
    ck["model"]["output_len"] = serde_json::json!(7);
    fs::write(run.path(&format!("{STAGE1}.json")), ck.to_string()).unwrap();
    let err = execute(&run, Command::Reconstruct).map(|_| ()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn ridge_stage1_variant_runs_end_to_end() {
    let (_dir, run) = scratch();
    let mut cfg = run.cfg.clone();
    cfg.stage1.kind = Stage1Kind::Ridge;
    let run = Run::new(cfg);
    for cmd in [Command::TrainStage1, Command::Reconstruct] {
        execute(&run, cmd).unwrap();
    }
    let split: Split = read_json(&run.path(SPLIT)).unwrap();
    assert_eq!(load_images(&run.path(GUESS)).unwrap().len(), split.test.len());
}
