use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::MaskMode;
use crate::dataset::DatasetConfig;
use crate::diffusion::{Objective, SamplerConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::FlowParams;
use crate::model::{DiTConfig, JointDesign, OptimConfig, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Videos sampled per checkpoint by `ablate`.
    pub videos: usize,
    pub flow: FlowParams,
    /// Shrink the flow pyramid/window to fit small frames.
    pub fit_flow_to_frames: bool,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { videos: 16, flow: FlowParams::default(), fit_flow_to_frames: true, iou_threshold: 0.5 }
    }
}

impl EvalConfig {
    pub fn flow_for(&self, height: usize, width: usize) -> FlowParams {
        if self.fit_flow_to_frames {
            let fitted = self.flow.fitted_to(height, width);
            if fitted != self.flow {
                log::debug!("flow parameters fitted to {height}x{width} frames: {fitted:?}");
            }
            fitted
        } else {
            self.flow
        }
    }
}

/// Everything a run depends on. Frame count and size of the dataset come
/// from `model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub output_dir: PathBuf,
    pub model: DiTConfig,
    pub objective: Objective,
    pub sampler: SamplerConfig,
    pub mask_mode: MaskMode,
    pub design: JointDesign,
    pub dataset: DatasetConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            output_dir: PathBuf::from("runs/default"),
            model: DiTConfig::default(),
            objective: Objective::FlowMatching,
            sampler: SamplerConfig::default(),
            mask_mode: MaskMode::TextToAlphaBlocked,
            design: JointDesign::SequenceExtension,
            dataset: DatasetConfig::default(),
            pretrain: TrainConfig { steps: 2000, optim: OptimConfig::with_lr(1e-3), ..TrainConfig::default() },
            finetune: TrainConfig { steps: 1000, optim: OptimConfig::with_lr(1e-4), ..TrainConfig::default() },
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to a
/// bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table =
            node.as_table_mut().ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parse_value(raw.trim()));
            return Ok(());
        }
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config(format!("empty override key in `{assignment}`")))
}

impl ExperimentConfig {
    /// Defaults, overlaid by the file (if any), overlaid by `key=value`
    /// overrides, then validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(ExperimentConfig::default())
            .map_err(|e| Error::Config(format!("default config does not serialize: {e}")))?;
        if let Some(p) = path {
            let text = String::from_utf8(io::read(p)?).map_err(|_| Error::format(p, "config is not UTF-8"))?;
            let file: toml::Value = toml::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?;
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.objective.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.eval.flow.validate()?;
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler.steps must be at least 1".into()));
        }
        if self.dataset.n_scenes == 0 || self.eval.videos == 0 {
            return Err(Error::Config("dataset.n_scenes and eval.videos must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(Error::Config("eval.iou_threshold must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output_dir.join("dataset")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.output_dir.join("base.ckpt")
    }

    pub fn finetuned_checkpoint(&self) -> PathBuf {
        self.output_dir.join(format!("rgba_{}_{}.ckpt", self.design, self.mask_mode))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        assert_eq!(ExperimentConfig::load(Some(&p), &[]).unwrap(), c);
        assert_eq!(c.sampler.steps, 50);
        assert_eq!(c.model.lora_rank, 128);
    }

    #[test]
    fn overrides_and_partial_files() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("c.toml");
        std::fs::write(&p, "[model]\ndepth = 2\n").unwrap();
        let c = ExperimentConfig::load(
            Some(&p),
            &[
                "model.dim=32".into(),
                "mask_mode=all_alpha_keys_blocked".into(),
                "finetune.optim.lr=0.01".into(),
                "output_dir=out/x".into(),
            ],
        )
        .unwrap();
        assert_eq!((c.model.depth, c.model.dim), (2, 32));
        assert_eq!(c.mask_mode, MaskMode::AllAlphaKeysBlocked);
        assert_eq!(c.finetune.optim.lr, 0.01);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
        let ddpm = ExperimentConfig::load(
            None,
            &["objective={ kind = \"ddpm\", beta_start = 0.0001, beta_end = 0.02, steps = 100 }".into()],
        )
        .unwrap();
        assert!(matches!(ddpm.objective, Objective::Ddpm { steps: 100, .. }));
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(ExperimentConfig::load(None, &["model.nope=1".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["version=2".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["model.heads=3".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["novalue".into()]).is_err());
    }
}
