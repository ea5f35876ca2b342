use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rgba_dit::attention::MaskMode;
use rgba_dit::cli::{self, ExperimentConfig, Leg, Phase, RunManifest};
use rgba_dit::dataset::{load_dataset, pam, read_video_dir};
use rgba_dit::model::JointDesign;
use rgba_dit::Error;

fn tiny(dir: &Path) -> ExperimentConfig {
    ExperimentConfig::load(
        None,
        &[
            format!("output_dir={:?}", dir.display().to_string()),
            "model.depth=2".into(),
            "model.dim=32".into(),
            "model.heads=2".into(),
            "model.frames=2".into(),
            "model.height=8".into(),
            "model.width=8".into(),
            "model.time_embed_dim=16".into(),
            "model.lora_rank=4".into(),
            "dataset.n_scenes=20".into(),
            "pretrain.steps=4".into(),
            "pretrain.batch=2".into(),
            "finetune.steps=4".into(),
            "finetune.batch=2".into(),
            "eval.videos=3".into(),
            "sampler.steps=3".into(),
        ],
    )
    .unwrap()
}

fn binary(args: &[&str]) -> std::process::ExitStatus {
    Command::new(env!("CARGO_BIN_EXE_rgba-dit"))
        .env("RUST_LOG", "off")
        .args(args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .unwrap()
}

#[test]
fn gen_dataset_is_deterministic_and_cycles_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tiny(&tmp.path().join("a"));
    let b = tiny(&tmp.path().join("b"));
    let (ia, _) = cli::gen_dataset(&a).unwrap();
    let (ib, _) = cli::gen_dataset(&b).unwrap();
    assert_eq!(ia.content_hash, ib.content_hash);
    assert_eq!(ia.scenes.len(), 20);
    let (_, scenes) = load_dataset(&a.dataset_dir()).unwrap();
    for (i, s) in scenes.iter().enumerate() {
        assert_eq!(s.manifest.cond_id, i % 16);
        assert_eq!((s.video.frames(), s.video.height(), s.video.width()), (2, 8, 8));
    }
    let c = ExperimentConfig {
        dataset: rgba_dit::dataset::DatasetConfig { seed: 9, ..a.dataset.clone() },
        ..tiny(&tmp.path().join("c"))
    };
    assert_ne!(cli::gen_dataset(&c).unwrap().0.content_hash, ia.content_hash);
}

#[test]
fn train_sample_eval_round() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    cli::gen_dataset(&cfg).unwrap();
    let base = cli::train(&cfg, Phase::Pretrain, None, None, None).unwrap();
    assert_eq!(base.checkpoint, cfg.base_checkpoint());
    let tuned = cli::train(&cfg, Phase::Finetune, None, None, None).unwrap();
    assert_eq!(tuned.checkpoint, cfg.finetuned_checkpoint());
    let report = tuned.manifest.training.as_ref().unwrap();
    assert_eq!(report.base_hash_before, report.base_hash_after);

    // a fine-tuned checkpoint is not a base
    assert!(matches!(
        cli::train(&cfg, Phase::Finetune, None, Some(&tuned.checkpoint), Some(&tmp.path().join("x.ckpt"))),
        Err(Error::Config(_))
    ));

    let out = tmp.path().join("s");
    let defaults = ExperimentConfig { sampler: rgba_dit::diffusion::SamplerConfig::default(), ..cfg.clone() };
    let s = cli::sample(&defaults, &tuned.checkpoint, 4, 11, None, &out).unwrap();
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest.config.sampler.steps, 50);
    assert_eq!(manifest.config.sampler.seed, 11);
    assert!(s.video.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let (back, vm, _) = read_video_dir(&out).unwrap();
    assert_eq!(vm.cond_id, 4);
    assert_eq!(back.frames(), 2);
    for sub in ["rgb", "alpha", "preview"] {
        let img = pam::read(&out.join(sub).join("frame_0001.pam")).unwrap();
        assert_eq!((img.width, img.height), (8, 8));
    }
    assert_eq!(pam::read(&out.join("alpha/frame_0000.pam")).unwrap().tuple_type, pam::TupleType::Grayscale);
    let again = cli::sample(&defaults, &tuned.checkpoint, 4, 11, None, &tmp.path().join("s2")).unwrap();
    assert_eq!(again.hash, s.hash);

    // the RGB-only base samples opaque videos
    let opaque = cli::sample(&cfg, &base.checkpoint, 0, 1, Some(2), &tmp.path().join("b")).unwrap();
    assert!((0..2).all(|f| opaque.video.alpha_frame(f).iter().all(|&a| a == 1.0)));

    let metrics = tmp.path().join("m.json");
    let (record, run) = cli::eval(&cfg, &[out.clone(), cfg.dataset_dir()], &metrics).unwrap();
    assert_eq!(record.videos.len(), 21);
    assert_eq!(run.inputs.len(), 21);
    assert!(record.videos.iter().all(|v| v.hash.len() == 64));
    assert!(metrics.is_file());
}

#[test]
fn ground_truth_dataset_scores_perfect_alignment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        model: rgba_dit::model::DiTConfig { frames: 3, height: 16, width: 16, ..tiny(tmp.path()).model },
        ..tiny(tmp.path())
    };
    cli::gen_dataset(&cfg).unwrap();
    let (record, _) = cli::eval(&cfg, &[cfg.dataset_dir()], &tmp.path().join("m.json")).unwrap();
    assert!(record.mean_iou.unwrap() >= 0.99, "{:?}", record.mean_iou);
    assert!(record.mean_flow_difference.is_finite());
}

#[test]
fn eval_without_videos_is_no_input() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert!(matches!(
        cli::eval(&cfg, std::slice::from_ref(&empty), &tmp.path().join("m.json")),
        Err(Error::NoInput(_))
    ));
    let status = binary(&["eval", empty.to_str().unwrap()]);
    assert_eq!(status.code(), Some(6));
}

#[test]
fn ablate_runs_every_leg_from_one_base() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    cli::gen_dataset(&cfg).unwrap();
    cli::train(&cfg, Phase::Pretrain, None, None, None).unwrap();
    let (report, _) = cli::ablate(&cfg, None).unwrap();
    assert_eq!(report.rows.len(), 5);
    assert!(!report.failed());
    let first = &report.rows[0];
    for (row, leg) in report.rows.iter().zip(Leg::MATRIX) {
        assert_eq!((row.design, row.mask_mode), (leg.design, leg.mask_mode));
        assert_eq!((&row.dataset_hash, &row.base_hash), (&first.dataset_hash, &first.base_hash));
        assert_eq!(row.sample_hashes.len(), 3);
        assert!(row.flow_difference.is_some());
    }
    assert!(report.row(JointDesign::SequenceExtension, MaskMode::AllAlphaKeysBlocked).is_some());
    let md = std::fs::read_to_string(tmp.path().join("ablation/report.md")).unwrap();
    assert_eq!(md.lines().count(), 7);
}

#[test]
fn binary_reports_configuration_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(binary(&["show-config", "--set", "model.heads=3"]).code(), Some(3));
    assert_eq!(binary(&["show-config", "--set", "nope=1"]).code(), Some(3));
    assert_eq!(binary(&["show-config"]).code(), Some(0));
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[model\n").unwrap();
    assert_eq!(binary(&["--config", bad.to_str().unwrap(), "show-config"]).code(), Some(7));
    let missing: PathBuf = tmp.path().join("none.ckpt");
    assert_eq!(binary(&["sample", "--checkpoint", missing.to_str().unwrap(), "--out", "x"]).code(), Some(8));
}
