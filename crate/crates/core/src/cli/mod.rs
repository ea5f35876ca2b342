//! The experiment commands behind the `rgba-dit` binary.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{EvalConfig, ExperimentConfig, CONFIG_VERSION};

use crate::attention::MaskMode;
use crate::dataset::{
    self, load_dataset, pam, read_video_dir, rgb_tokens_to_video, tokens_to_video, video_to_tokens, write_dataset,
    write_video_dir, DatasetIndex, Geometry, RgbaVideo, VideoManifest, DATASET_INDEX, VIDEO_MANIFEST,
};
use crate::diffusion::{sample_tokens, Example, SamplerConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{score_video, MetricsRecord};
use crate::model::{checkpoint, finetune_rgba, pretrain_base, DiT, JointDesign, TrainReport};

/// Record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ExperimentConfig,
    /// SHA-256 of every input artifact.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output artifact.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_flow_difference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
}

impl RunManifest {
    fn new(command: &str, config: &ExperimentConfig) -> Self {
        RunManifest {
            command: command.into(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_clock_secs: 0.0,
            training: None,
            mean_flow_difference: None,
            mean_iou: None,
        }
    }

    fn finish(mut self, started: Instant, path: &Path) -> Result<Self> {
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        io::write_json(path, &self)?;
        Ok(self)
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(io::sha256_hex(&io::read(path)?))
}

fn geometry(config: &ExperimentConfig) -> Geometry {
    let m = &config.model;
    Geometry { frames: m.frames, height: m.height, width: m.width, patch: m.patch }
}

pub fn gen_dataset(config: &ExperimentConfig) -> Result<(DatasetIndex, RunManifest)> {
    let started = Instant::now();
    let dir = config.dataset_dir();
    let m = &config.model;
    let index = write_dataset(&dir, &config.dataset, m.frames, m.height, m.width)?;
    let mut manifest = RunManifest::new("gen-dataset", config);
    manifest.outputs.insert(dir.display().to_string(), index.content_hash.clone());
    let manifest = manifest.finish(started, &dir.join("run.json"))?;
    Ok((index, manifest))
}

/// Training examples from a dataset directory, checked against the model.
pub fn load_examples(dir: &Path, config: &ExperimentConfig, joint: bool) -> Result<(DatasetIndex, Vec<Example>)> {
    let (index, scenes) = load_dataset(dir)?;
    let m = &config.model;
    if (index.frames, index.height, index.width) != (m.frames, m.height, m.width) {
        return Err(Error::Config(format!(
            "dataset {} holds {}x{}x{} videos, the model expects {}x{}x{}",
            dir.display(),
            index.frames,
            index.height,
            index.width,
            m.frames,
            m.height,
            m.width
        )));
    }
    let examples = scenes
        .iter()
        .map(|s| Ok(Example { tokens: video_to_tokens(&s.video, m.patch, joint)?, cond_id: s.manifest.cond_id }))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, examples))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DiT,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub manifest: RunManifest,
}

/// Pretrains the base model, or fine-tunes `base` with the configured
/// design and mask mode.
pub fn train(
    config: &ExperimentConfig,
    phase: Phase,
    dataset_dir: Option<&Path>,
    base: Option<&Path>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let default_data = config.dataset_dir();
    let data_dir = dataset_dir.unwrap_or(&default_data);
    let (index, examples) = load_examples(data_dir, config, phase == Phase::Finetune)?;
    let mut manifest = RunManifest::new(
        match phase {
            Phase::Pretrain => "train pretrain",
            Phase::Finetune => "train finetune",
        },
        config,
    );
    manifest.inputs.insert(data_dir.display().to_string(), index.content_hash);
    let (model, report, default_out) = match phase {
        Phase::Pretrain => {
            let (model, report) = pretrain_base(config.model.clone(), &examples, &config.objective, &config.pretrain)?;
            (model, report, config.base_checkpoint())
        }
        Phase::Finetune => {
            let default_base = config.base_checkpoint();
            let base_path = base.unwrap_or(&default_base);
            manifest.inputs.insert(base_path.display().to_string(), file_hash(base_path)?);
            let base = checkpoint::load(base_path)?;
            if base.design().is_some() {
                return Err(Error::Config(format!("{} is already fine-tuned", base_path.display())));
            }
            if base.config() != &config.model {
                return Err(Error::Config(format!(
                    "{} was trained with a different model config",
                    base_path.display()
                )));
            }
            let (model, report) =
                finetune_rgba(base, &examples, &config.objective, config.mask_mode, config.design, &config.finetune)?;
            (model, report, config.finetuned_checkpoint())
        }
    };
    let out = out.map(Path::to_path_buf).unwrap_or(default_out);
    let checkpoint_hash = checkpoint::save(&model, &out)?;
    manifest.outputs.insert(out.display().to_string(), checkpoint_hash.clone());
    manifest.training = Some(report);
    let manifest = manifest.finish(started, &out.with_extension("run.json"))?;
    Ok(TrainOutcome { model, checkpoint: out, checkpoint_hash, manifest })
}

const CHECKER_CELL: usize = 4;

fn checkerboard_preview(video: &RgbaVideo, f: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(video.frame_len() * 3);
    for y in 0..video.height() {
        for x in 0..video.width() {
            let p = video.pixel(f, y, x);
            let bg = if (y / CHECKER_CELL + x / CHECKER_CELL).is_multiple_of(2) { 0.4 } else { 0.6 };
            out.extend((0..3).map(|c| p[c] * p[3] + bg * (1.0 - p[3])));
        }
    }
    out
}

/// Writes a sampled video: RGBA frames plus `video.json`, and `rgb/`,
/// `alpha/` and `preview/` frame sets. Returns one hash over all of them.
pub fn write_sample(dir: &Path, video: &RgbaVideo, manifest: &VideoManifest) -> Result<String> {
    let mut hashes = write_video_dir(dir, video, manifest)?;
    let (w, h) = (video.width(), video.height());
    for f in 0..video.frames() {
        let sets = [
            ("rgb", pam::TupleType::Rgb, video.rgb_frame(f)),
            ("alpha", pam::TupleType::Grayscale, video.alpha_frame(f)),
            ("preview", pam::TupleType::Rgb, checkerboard_preview(video, f)),
        ];
        for (sub, tuple_type, samples) in sets {
            let bytes = pam::encode(&pam::PamImage { width: w, height: h, tuple_type, samples })?;
            io::write_atomic(&dir.join(sub).join(dataset::frame_file(f)), &bytes)?;
            hashes.push_str(&io::sha256_hex(&bytes));
        }
    }
    Ok(io::sha256_hex(hashes.as_bytes()))
}

/// Samples one video from a loaded model.
pub fn sample_video(
    model: &DiT,
    config: &ExperimentConfig,
    cond_id: usize,
    sampler: &SamplerConfig,
) -> Result<RgbaVideo> {
    let geo = geometry(config);
    let mode = match model.design() {
        Some(JointDesign::SequenceExtension) => config.mask_mode,
        _ => MaskMode::Unmasked,
    };
    let tokens = sample_tokens(
        model,
        (model.input_rows(), model.config().patch_dim()),
        cond_id,
        mode,
        &config.objective,
        sampler,
    )?;
    match model.design() {
        Some(_) => tokens_to_video(&tokens, geo),
        None => rgb_tokens_to_video(&tokens, geo),
    }
}

pub struct SampleOutcome {
    pub video: RgbaVideo,
    pub hash: String,
    pub manifest: RunManifest,
}

pub fn sample(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    cond_id: usize,
    seed: u64,
    steps: Option<usize>,
    out_dir: &Path,
) -> Result<SampleOutcome> {
    let started = Instant::now();
    let model = checkpoint::load(checkpoint_path)?;
    if model.config() != &config.model {
        return Err(Error::Config(format!("{} does not match the model config", checkpoint_path.display())));
    }
    let sampler = SamplerConfig { steps: steps.unwrap_or(config.sampler.steps), seed };
    let video = sample_video(&model, config, cond_id, &sampler)?;
    let m = &config.model;
    let vm = VideoManifest {
        frames: m.frames,
        height: m.height,
        width: m.width,
        fps: config.dataset.fps,
        cond_id,
        seed,
        spec: None,
    };
    let hash = write_sample(out_dir, &video, &vm)?;
    let mut manifest = RunManifest::new("sample", config);
    manifest.config.sampler = sampler;
    manifest.inputs.insert(checkpoint_path.display().to_string(), file_hash(checkpoint_path)?);
    manifest.outputs.insert(out_dir.display().to_string(), hash.clone());
    let manifest = manifest.finish(started, &out_dir.join("run.json"))?;
    Ok(SampleOutcome { video, hash, manifest })
}

fn has_video(dir: &Path) -> bool {
    dir.join(VIDEO_MANIFEST).is_file()
}

/// Video directories named by `inputs`: a video directory itself, a
/// dataset, or a directory whose immediate subdirectories are videos.
pub fn discover_videos(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for input in inputs {
        if has_video(input) {
            found.push(input.clone());
        } else if input.join(DATASET_INDEX).is_file() {
            let (index, _) = load_dataset(input)?;
            found.extend(index.scenes.iter().map(|s| input.join(s)));
        } else {
            let entries = std::fs::read_dir(input).map_err(|e| Error::io(input, e))?;
            let mut dirs: Vec<PathBuf> =
                entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| has_video(p)).collect();
            dirs.sort();
            found.extend(dirs);
        }
    }
    if found.is_empty() {
        return Err(Error::NoInput(format!(
            "no video directories (with {VIDEO_MANIFEST}) under {}",
            inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(found)
}

pub fn eval(config: &ExperimentConfig, inputs: &[PathBuf], out: &Path) -> Result<(MetricsRecord, RunManifest)> {
    let started = Instant::now();
    let dirs = discover_videos(inputs)?;
    let mut scores = Vec::with_capacity(dirs.len());
    let mut flow = None;
    for dir in &dirs {
        let (video, _, hash) = read_video_dir(dir)?;
        let params = config.eval.flow_for(video.height(), video.width());
        flow.get_or_insert(params);
        scores.push(score_video(&dir.display().to_string(), &hash, &video, &params, config.eval.iou_threshold)?);
    }
    let record = MetricsRecord::from_scores(flow.unwrap_or(config.eval.flow), config.eval.iou_threshold, scores)?;
    io::write_json(out, &record)?;
    let mut manifest = RunManifest::new("eval", config);
    for v in &record.videos {
        manifest.inputs.insert(v.name.clone(), v.hash.clone());
    }
    manifest.outputs.insert(out.display().to_string(), file_hash(out)?);
    manifest.mean_flow_difference = Some(record.mean_flow_difference);
    manifest.mean_iou = record.mean_iou;
    let manifest = manifest.finish(started, &out.with_extension("run.json"))?;
    Ok((record, manifest))
}

/// One leg of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leg {
    pub design: JointDesign,
    pub mask_mode: MaskMode,
}

impl Leg {
    pub const MATRIX: [Leg; 5] = [
        Leg { design: JointDesign::SequenceExtension, mask_mode: MaskMode::TextToAlphaBlocked },
        Leg { design: JointDesign::SequenceExtension, mask_mode: MaskMode::AllAlphaKeysBlocked },
        Leg { design: JointDesign::SequenceExtension, mask_mode: MaskMode::Unmasked },
        Leg { design: JointDesign::BatchExtension, mask_mode: MaskMode::Unmasked },
        Leg { design: JointDesign::LatentDimExtension, mask_mode: MaskMode::Unmasked },
    ];

    pub fn name(&self) -> String {
        match self.design {
            JointDesign::SequenceExtension => format!("{}_{}", self.design, self.mask_mode),
            other => other.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub leg: String,
    pub design: JointDesign,
    pub mask_mode: MaskMode,
    /// `None` when the leg succeeded.
    pub failure: Option<String>,
    pub flow_difference: Option<f64>,
    pub iou: Option<f64>,
    pub trainable_params: Option<usize>,
    pub final_loss: Option<f64>,
    pub wall_clock_secs: f64,
    pub checkpoint_hash: Option<String>,
    pub sample_hashes: Vec<String>,
    pub dataset_hash: String,
    pub base_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, design: JointDesign, mask_mode: MaskMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.design == design && r.mask_mode == mask_mode)
    }

    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.failure.is_some())
    }

    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::from(
            "| leg | flow difference | IoU | trainable | final loss | wall (s) | status |\n|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.1} | {} |\n",
                r.leg,
                fmt(r.flow_difference),
                fmt(r.iou),
                r.trainable_params.map_or("-".into(), |n| n.to_string()),
                fmt(r.final_loss),
                r.wall_clock_secs,
                r.failure.as_deref().unwrap_or("ok"),
            ));
        }
        s
    }
}

fn mean_tail(losses: &[f64], n: usize) -> Option<f64> {
    let tail = &losses[losses.len().saturating_sub(n)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

fn run_leg(
    config: &ExperimentConfig,
    leg: Leg,
    base: &DiT,
    examples: &[Example],
    dir: &Path,
    row: &mut AblationRow,
) -> Result<()> {
    let (model, report) =
        finetune_rgba(base.clone(), examples, &config.objective, leg.mask_mode, leg.design, &config.finetune)?;
    row.trainable_params = Some(report.trainable_params);
    row.final_loss = mean_tail(&report.losses, 100);
    row.checkpoint_hash = Some(checkpoint::save(&model, &dir.join("model.ckpt"))?);
    let leg_config = ExperimentConfig { design: leg.design, mask_mode: leg.mask_mode, ..config.clone() };
    let m = &config.model;
    let flow = config.eval.flow_for(m.height, m.width);
    let mut scores = Vec::with_capacity(config.eval.videos);
    for i in 0..config.eval.videos {
        let cond_id = i % crate::model::NUM_CONDITIONS;
        let sampler = SamplerConfig { steps: config.sampler.steps, seed: config.sampler.seed + i as u64 };
        let video = sample_video(&model, &leg_config, cond_id, &sampler)?;
        let vm = VideoManifest {
            frames: m.frames,
            height: m.height,
            width: m.width,
            fps: config.dataset.fps,
            cond_id,
            seed: sampler.seed,
            spec: None,
        };
        let name = format!("video_{i:03}");
        let hash = write_sample(&dir.join("samples").join(&name), &video, &vm)?;
        scores.push(score_video(&name, &hash, &video, &flow, config.eval.iou_threshold)?);
        row.sample_hashes.push(hash);
    }
    let record = MetricsRecord::from_scores(flow, config.eval.iou_threshold, scores)?;
    io::write_json(&dir.join("metrics.json"), &record)?;
    row.flow_difference = Some(record.mean_flow_difference);
    row.iou = record.mean_iou;
    Ok(())
}

/// Fine-tunes, samples and scores every leg of [`Leg::MATRIX`] from one
/// base checkpoint and dataset. A failing leg is recorded and the rest
/// still run.
pub fn ablate(config: &ExperimentConfig, base_path: Option<&Path>) -> Result<(AblationReport, RunManifest)> {
    let started = Instant::now();
    let default_base = config.base_checkpoint();
    let base_path = base_path.unwrap_or(&default_base);
    let base_hash = file_hash(base_path)?;
    let base = checkpoint::load(base_path)?;
    if base.design().is_some() || base.config() != &config.model {
        return Err(Error::Config(format!("{} is not a base checkpoint for this config", base_path.display())));
    }
    let data_dir = config.dataset_dir();
    let (index, examples) = load_examples(&data_dir, config, true)?;
    let out = config.output_dir.join("ablation");
    let mut rows = Vec::with_capacity(Leg::MATRIX.len());
    for leg in Leg::MATRIX {
        let leg_started = Instant::now();
        let mut row = AblationRow {
            leg: leg.name(),
            design: leg.design,
            mask_mode: leg.mask_mode,
            failure: None,
            flow_difference: None,
            iou: None,
            trainable_params: None,
            final_loss: None,
            wall_clock_secs: 0.0,
            checkpoint_hash: None,
            sample_hashes: Vec::new(),
            dataset_hash: index.content_hash.clone(),
            base_hash: base_hash.clone(),
        };
        log::info!("ablation leg {}", row.leg);
        if let Err(e) = run_leg(config, leg, &base, &examples, &out.join(&row.leg), &mut row) {
            log::error!("ablation leg {} failed: {e}", row.leg);
            row.failure = Some(e.to_string());
        }
        row.wall_clock_secs = leg_started.elapsed().as_secs_f64();
        rows.push(row);
    }
    let report = AblationReport { rows };
    io::write_json(&out.join("report.json"), &report)?;
    io::write_atomic(&out.join("report.md"), report.to_markdown().as_bytes())?;
    let mut manifest = RunManifest::new("ablate", config);
    manifest.inputs.insert(data_dir.display().to_string(), index.content_hash);
    manifest.inputs.insert(base_path.display().to_string(), base_hash);
    for r in &report.rows {
        if let Some(h) = &r.checkpoint_hash {
            manifest.outputs.insert(format!("{}/model.ckpt", r.leg), h.clone());
        }
    }
    let manifest = manifest.finish(started, &out.join("run.json"))?;
    Ok((report, manifest))
}
