use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::base_hash;
use super::{DiT, DiTConfig, JointDesign, OptimConfig, Rmsprop};
use crate::attention::MaskMode;
use crate::diffusion::{training_step, Example, LossWeights, Objective};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 4,
            seed: 0,
            optim: OptimConfig::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("training batch must be positive".into()));
        }
        self.optim.validate()
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub trainable_params: usize,
    pub trainable_names: Vec<String>,
    /// Hash of the base weights before and after training (fine-tuning only).
    pub base_hash_before: Option<String>,
    pub base_hash_after: Option<String>,
}

fn run(
    model: &mut DiT,
    data: &[Example],
    objective: &Objective,
    mode: MaskMode,
    train: &TrainConfig,
) -> Result<Vec<f64>> {
    train.validate()?;
    objective.validate()?;
    if data.is_empty() {
        return Err(Error::NoInput("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut optimizer = Rmsprop::new(train.optim.clone())?;
    let mut losses = Vec::with_capacity(train.steps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    for step in 0..train.steps {
        optimizer.set_lr_scale(train.optim.lr_factor(step, train.steps));
        let mut batch = Vec::with_capacity(train.batch);
        while batch.len() < train.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let loss = training_step(model, &mut optimizer, &batch, objective, mode, train.loss_weights, &mut rng)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Training { step, seed: train.seed, loss: f64::NAN },
                other => other,
            })?;
        if step % 100 == 0 || step + 1 == train.steps {
            log::info!("step {step}/{}: loss {loss:.6}", train.steps);
        }
        losses.push(loss);
    }
    Ok(losses)
}

fn trainable_names(model: &DiT) -> Vec<String> {
    model.params().iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.name.clone()).collect()
}

/// Trains the RGB-only model from scratch on `L`-row tokens.
pub fn pretrain_base(
    config: DiTConfig,
    data: &[Example],
    objective: &Objective,
    train: &TrainConfig,
) -> Result<(DiT, TrainReport)> {
    let mut model = DiT::new_base(config, train.seed)?;
    let losses = run(&mut model, data, objective, MaskMode::Unmasked, train)?;
    let report = TrainReport {
        losses,
        trainable_params: model.params().trainable_count(),
        trainable_names: trainable_names(&model),
        base_hash_before: None,
        base_hash_after: None,
    };
    Ok((model, report))
}

/// Extends a pretrained base model and trains only the extension on
/// `2L`-row RGBA tokens.
pub fn finetune_rgba(
    base: DiT,
    data: &[Example],
    objective: &Objective,
    mode: MaskMode,
    design: JointDesign,
    train: &TrainConfig,
) -> Result<(DiT, TrainReport)> {
    let before = base_hash(&base);
    let snapshot = base.params().clone();
    let mut model = base.extend(design, train.seed)?;
    let expected = DiT::expected_trainable_count(model.config(), design);
    let trainable = model.params().trainable_count();
    if trainable != expected {
        return Err(Error::Contract(format!("{design} has {trainable} trainable values, expected {expected}")));
    }
    let losses = run(&mut model, data, objective, mode, train)?;
    let after = base_hash(&model);
    if after != before {
        let changed = snapshot
            .iter()
            .find(|(id, p)| {
                let now = model.params().tensor(*id).data();
                p.tensor.data().iter().zip(now).any(|(a, b)| a.to_bits() != b.to_bits())
            })
            .map(|(_, p)| p.name.clone())
            .unwrap_or_else(|| "<unknown>".into());
        return Err(Error::FrozenViolation(changed));
    }
    let report = TrainReport {
        losses,
        trainable_params: trainable,
        trainable_names: trainable_names(&model),
        base_hash_before: Some(before),
        base_hash_after: Some(after),
    };
    Ok((model, report))
}
