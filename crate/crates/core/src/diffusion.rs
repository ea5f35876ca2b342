//! Flow-matching and DDPM objectives, the training step and the samplers.
//!
//! Orientation: `x0` is noise and `x1` is data. Flow-matching time runs from
//! 0 (pure noise) to 1 (data); DDPM steps run from 1 (almost clean) to `T`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::MaskMode;
use crate::error::{Error, Result};
use crate::model::{DiT, Rmsprop};
use crate::numerics::{Graph, NodeId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum Objective {
    #[default]
    FlowMatching,
    Ddpm {
        beta_start: f64,
        beta_end: f64,
        steps: usize,
    },
}

impl Objective {
    pub fn ddpm_default() -> Self {
        Objective::Ddpm { beta_start: 1e-4, beta_end: 0.02, steps: 1000 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::FlowMatching => Ok(()),
            Objective::Ddpm { beta_start, beta_end, steps } => {
                DdpmSchedule::new(beta_start, beta_end, steps).map(|_| ())
            }
        }
    }

    fn schedule(&self) -> Result<Option<DdpmSchedule>> {
        match *self {
            Objective::FlowMatching => Ok(None),
            Objective::Ddpm { beta_start, beta_end, steps } => DdpmSchedule::new(beta_start, beta_end, steps).map(Some),
        }
    }
}

/// Linear-beta DDPM schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DdpmSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DdpmSchedule {
    pub fn new(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end {
            return Err(Error::Config(format!(
                "invalid ddpm schedule: beta {beta_start}..{beta_end} over {steps} steps"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha_bar = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(DdpmSchedule { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t` for `t ∈ [1, T]`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index { index: t, max: self.steps() });
        }
        Ok(self.alpha_bar[t - 1])
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.alpha_bar(t)?;
        Ok(self.betas[t - 1])
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn lerp(a: &Tensor, wa: f64, b: &Tensor, wb: f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| wa * x + wb * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// Rectified-flow interpolation: `x_t = (1−t)·x0 + t·x1`, target `x1 − x0`.
pub fn fm_interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("flow-matching time {t} outside [0,1]")));
    }
    check_same_shape(x0, x1)?;
    Ok((lerp(x0, 1.0 - t, x1, t), lerp(x1, 1.0, x0, -1.0)))
}

/// Forward noising `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn ddpm_q_sample(schedule: &DdpmSchedule, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    check_same_shape(x0, noise)?;
    Ok(lerp(x0, ab.sqrt(), noise, (1.0 - ab).sqrt()))
}

/// A network mapping noisy tokens to the objective's regression target.
pub trait Denoiser {
    fn predict(&self, g: &mut Graph, x_t: &Tensor, time: f64, cond_id: usize, mode: MaskMode) -> Result<NodeId>;

    /// Whether tokens carry an RGB half followed by an alpha half.
    fn joint(&self) -> bool;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Denoiser for DiT {
    fn predict(&self, g: &mut Graph, x_t: &Tensor, time: f64, cond_id: usize, mode: MaskMode) -> Result<NodeId> {
        Ok(self.forward(g, x_t, time, cond_id, mode)?.prediction)
    }

    fn joint(&self) -> bool {
        self.design().is_some()
    }

    fn params(&self) -> &ParamStore {
        DiT::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        DiT::params_mut(self)
    }
}

/// One training video in token form.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Tensor,
    pub cond_id: usize,
}

/// Random quantities of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    /// Flow-matching time in `[0,1]`, or the DDPM step as an integer value.
    pub t: f64,
    pub noise: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rgb: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rgb: 0.5, alpha: 0.5 }
    }
}

fn normal_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

pub fn sample_draws(objective: &Objective, batch: &[Example], rng: &mut impl Rng) -> Result<Vec<Draw>> {
    let schedule = objective.schedule()?;
    Ok(batch
        .iter()
        .map(|ex| {
            let t = match &schedule {
                None => rng.gen_range(0.0..=1.0),
                Some(s) => rng.gen_range(1..=s.steps()) as f64,
            };
            Draw { t, noise: normal_tensor(ex.tokens.rows(), ex.tokens.cols(), rng) }
        })
        .collect())
}

/// Noisy input, regression target and model time for one example.
pub fn training_pair(objective: &Objective, data: &Tensor, draw: &Draw) -> Result<(Tensor, Tensor, f64)> {
    match objective.schedule()? {
        None => {
            let (x_t, v) = fm_interpolate(&draw.noise, data, draw.t)?;
            Ok((x_t, v, draw.t))
        }
        Some(s) => {
            if draw.t.fract() != 0.0 || draw.t < 1.0 {
                return Err(Error::Contract(format!("ddpm step {} is not a positive integer", draw.t)));
            }
            let step = draw.t as usize;
            let x_t = ddpm_q_sample(&s, data, step, &draw.noise)?;
            Ok((x_t, draw.noise.clone(), step as f64 / s.steps() as f64))
        }
    }
}

/// Mean over the batch of the (half-weighted) squared error.
pub fn batch_loss<D: Denoiser + ?Sized>(
    g: &mut Graph,
    model: &D,
    batch: &[Example],
    draws: &[Draw],
    objective: &Objective,
    mode: MaskMode,
    weights: LossWeights,
) -> Result<NodeId> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::Contract(format!("batch of {} examples with {} draws", batch.len(), draws.len())));
    }
    let mut total = None;
    for (ex, draw) in batch.iter().zip(draws) {
        let (x_t, target, time) = training_pair(objective, &ex.tokens, draw)?;
        let pred = model.predict(g, &x_t, time, ex.cond_id, mode)?;
        let target = g.constant(target);
        let loss = if model.joint() {
            let half = ex.tokens.rows() / 2;
            let rows = ex.tokens.rows();
            let mut parts = Vec::with_capacity(2);
            for (range, w) in [(0..half, weights.rgb), (half..rows, weights.alpha)] {
                let p = g.slice_rows(pred, range.clone())?;
                let t = g.slice_rows(target, range)?;
                let m = g.mse(p, t)?;
                parts.push(g.scale(m, w)?);
            }
            g.add(parts[0], parts[1])?
        } else {
            g.mse(pred, target)?
        };
        total = Some(match total {
            None => loss,
            Some(acc) => g.add(acc, loss)?,
        });
    }
    g.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64)
}

/// Draws noise and times, backpropagates and updates the trainable set.
pub fn training_step<D: Denoiser + ?Sized>(
    model: &mut D,
    optimizer: &mut Rmsprop,
    batch: &[Example],
    objective: &Objective,
    mode: MaskMode,
    weights: LossWeights,
    rng: &mut impl Rng,
) -> Result<f64> {
    let draws = sample_draws(objective, batch, rng)?;
    let mut g = Graph::new();
    let loss = batch_loss(&mut g, model, batch, &draws, objective, mode, weights)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    model.params_mut().zero_grad();
    g.backward(loss, model.params_mut())?;
    optimizer.step(model.params_mut());
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, seed: 0 }
    }
}

fn eval<D: Denoiser + ?Sized>(model: &D, x: &Tensor, time: f64, cond_id: usize, mode: MaskMode) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = model.predict(&mut g, x, time, cond_id, mode)?;
    Ok(g.value(out).clone())
}

/// Generates `rows × cols` tokens; a pure function of the model, condition,
/// seed and step count.
pub fn sample_tokens<D: Denoiser + ?Sized>(
    model: &D,
    shape: (usize, usize),
    cond_id: usize,
    mode: MaskMode,
    objective: &Objective,
    sampler: &SamplerConfig,
) -> Result<Tensor> {
    if sampler.steps == 0 {
        return Err(Error::Config("sampler steps must be at least 1".into()));
    }
    if cond_id >= crate::model::NUM_CONDITIONS {
        return Err(Error::Lookup(cond_id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut x = normal_tensor(shape.0, shape.1, &mut rng);
    match objective.schedule()? {
        None => {
            let dt = 1.0 / sampler.steps as f64;
            for i in 0..sampler.steps {
                let v = eval(model, &x, i as f64 * dt, cond_id, mode)?;
                x = lerp(&x, 1.0, &v, dt);
            }
        }
        Some(s) => {
            let big_t = s.steps();
            let mut taus: Vec<usize> = (0..sampler.steps)
                .map(|k| {
                    if sampler.steps == 1 {
                        big_t
                    } else {
                        1 + ((big_t - 1) as f64 * k as f64 / (sampler.steps - 1) as f64).round() as usize
                    }
                })
                .collect();
            taus.dedup();
            for (k, &tau) in taus.iter().enumerate().rev() {
                let ab = s.alpha_bar(tau)?;
                let ab_prev = if k == 0 { 1.0 } else { s.alpha_bar(taus[k - 1])? };
                let eps = eval(model, &x, tau as f64 / big_t as f64, cond_id, mode)?;
                let x0 = lerp(&x, 1.0 / ab.sqrt(), &eps, -(1.0 - ab).sqrt() / ab.sqrt());
                let x0 = Tensor::new(x0.shape().to_vec(), x0.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect())?;
                let beta = 1.0 - ab / ab_prev;
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                x = lerp(&x0, c0, &x, ct);
                if k > 0 {
                    let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                    let z = normal_tensor(shape.0, shape.1, &mut rng);
                    x = lerp(&x, 1.0, &z, sigma);
                }
            }
        }
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("sampler"));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Returns a fixed tensor regardless of input.
    struct Constant {
        out: Tensor,
        joint: bool,
        store: ParamStore,
    }

    impl Denoiser for Constant {
        fn predict(&self, g: &mut Graph, _: &Tensor, _: f64, _: usize, _: MaskMode) -> Result<NodeId> {
            Ok(g.constant(self.out.clone()))
        }
        fn joint(&self) -> bool {
            self.joint
        }
        fn params(&self) -> &ParamStore {
            &self.store
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let x0 = normal_tensor(3, 4, &mut rng(1));
        let x1 = normal_tensor(3, 4, &mut rng(2));
        assert_eq!(fm_interpolate(&x0, &x1, 0.0).unwrap().0, x0);
        assert_eq!(fm_interpolate(&x0, &x1, 1.0).unwrap().0, x1);
        let zero = Tensor::zeros(&[3, 4]);
        let (xt, v) = fm_interpolate(&zero, &x1, 0.5).unwrap();
        assert_eq!(v, x1);
        for (a, b) in xt.data().iter().zip(x1.data()) {
            assert_eq!(*a, b / 2.0);
        }
        assert!(matches!(fm_interpolate(&x0, &x1, 1.5), Err(Error::Contract(_))));
    }

    #[test]
    fn default_schedule_is_decreasing_and_nearly_pure_noise_at_the_end() {
        let s = DdpmSchedule::new(1e-4, 0.02, 1000).unwrap();
        for t in 2..=1000 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
        assert!(s.alpha_bar(1000).unwrap() < 0.01);
        assert!(s.alpha_bar(0).is_err() && s.alpha_bar(1001).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let x0 = normal_tensor(2, 3, &mut rng(3));
        let noise = normal_tensor(2, 3, &mut rng(4));
        let clean = DdpmSchedule::new(1e-12, 1e-12, 10).unwrap();
        assert!(ddpm_q_sample(&clean, &x0, 10, &noise).unwrap().max_abs_diff(&x0) < 1e-5);
        let noisy = DdpmSchedule::new(0.999_999, 0.999_999, 10).unwrap();
        assert!(ddpm_q_sample(&noisy, &x0, 3, &noise).unwrap().max_abs_diff(&noise) < 1e-6);
    }

    #[test]
    fn q_sample_variance_monte_carlo() {
        let s = DdpmSchedule::new(1e-4, 0.02, 1000).unwrap();
        let t = 300;
        let ab = s.alpha_bar(t).unwrap();
        let n = 10_000;
        let x0 = normal_tensor(n, 1, &mut rng(5));
        let noise = normal_tensor(n, 1, &mut rng(6));
        let xt = ddpm_q_sample(&s, &x0, t, &noise).unwrap();
        let mean = xt.data().iter().sum::<f64>() / n as f64;
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = ab + (1.0 - ab);
        // standard error of a gaussian sample variance
        let se = expected * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - expected).abs() < 3.0 * se, "var {var} expected {expected} se {se}");
    }

    #[test]
    fn perfect_predictor_has_zero_loss_under_both_objectives() {
        let data = normal_tensor(6, 3, &mut rng(7));
        let batch = [Example { tokens: data.clone(), cond_id: 0 }];
        for objective in [Objective::FlowMatching, Objective::ddpm_default()] {
            let draws = sample_draws(&objective, &batch, &mut rng(8)).unwrap();
            let (_, target, _) = training_pair(&objective, &data, &draws[0]).unwrap();
            for joint in [false, true] {
                let stub = Constant { out: target.clone(), joint, store: ParamStore::new() };
                let mut g = Graph::new();
                let loss =
                    batch_loss(&mut g, &stub, &batch, &draws, &objective, MaskMode::Unmasked, LossWeights::default())
                        .unwrap();
                assert_eq!(g.value(loss).data()[0], 0.0);
            }
        }
    }

    #[test]
    fn zero_predictor_loss_is_mean_squared_target() {
        let data = normal_tensor(6, 3, &mut rng(9));
        let batch = [Example { tokens: data.clone(), cond_id: 2 }];
        let objective = Objective::FlowMatching;
        let draws = sample_draws(&objective, &batch, &mut rng(10)).unwrap();
        let (_, target, _) = training_pair(&objective, &data, &draws[0]).unwrap();
        let expected = target.data().iter().map(|v| v * v).sum::<f64>() / target.numel() as f64;
        let stub = Constant { out: Tensor::zeros(&[6, 3]), joint: true, store: ParamStore::new() };
        let mut g = Graph::new();
        let loss =
            batch_loss(&mut g, &stub, &batch, &draws, &objective, MaskMode::Unmasked, LossWeights::default()).unwrap();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn single_euler_step_adds_the_predicted_velocity() {
        let v = normal_tensor(4, 2, &mut rng(11));
        let stub = Constant { out: v.clone(), joint: false, store: ParamStore::new() };
        let cfg = SamplerConfig { steps: 1, seed: 12 };
        let x1 = sample_tokens(&stub, (4, 2), 0, MaskMode::Unmasked, &Objective::FlowMatching, &cfg).unwrap();
        let x0 = normal_tensor(4, 2, &mut rng(12));
        for ((a, b), c) in x1.data().iter().zip(x0.data()).zip(v.data()) {
            assert_eq!(*a, b + c);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_rejects_unknown_conditions() {
        let stub = Constant { out: Tensor::filled(&[4, 2], 0.1), joint: false, store: ParamStore::new() };
        let cfg = SamplerConfig { steps: 7, seed: 3 };
        for objective in [Objective::FlowMatching, Objective::ddpm_default()] {
            let a = sample_tokens(&stub, (4, 2), 1, MaskMode::Unmasked, &objective, &cfg).unwrap();
            let b = sample_tokens(&stub, (4, 2), 1, MaskMode::Unmasked, &objective, &cfg).unwrap();
            assert_eq!(a, b);
            assert!(matches!(
                sample_tokens(&stub, (4, 2), 16, MaskMode::Unmasked, &objective, &cfg),
                Err(Error::Lookup(16))
            ));
        }
    }

    #[test]
    fn single_ddpm_step_returns_the_clipped_clean_estimate() {
        // one step from t=T lands on the clipped x0 estimate x/√ᾱ
        let stub = Constant { out: Tensor::zeros(&[2, 2]), joint: false, store: ParamStore::new() };
        let objective = Objective::Ddpm { beta_start: 1e-4, beta_end: 0.02, steps: 10 };
        let cfg = SamplerConfig { steps: 1, seed: 4 };
        let out = sample_tokens(&stub, (2, 2), 0, MaskMode::Unmasked, &objective, &cfg).unwrap();
        let s = DdpmSchedule::new(1e-4, 0.02, 10).unwrap();
        let start = normal_tensor(2, 2, &mut rng(4));
        let ab = s.alpha_bar(10).unwrap();
        for (o, x) in out.data().iter().zip(start.data()) {
            assert!((o - (x / ab.sqrt()).clamp(-1.0, 1.0)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn interpolation_is_affine_in_t(t in 0.0f64..=1.0, seed in 0u64..1000) {
            let x0 = normal_tensor(2, 2, &mut rng(seed));
            let x1 = normal_tensor(2, 2, &mut rng(seed + 1));
            let (xt, v) = fm_interpolate(&x0, &x1, t).unwrap();
            for ((a, b), (c, d)) in xt.data().iter().zip(x0.data()).zip(x1.data().iter().zip(v.data())) {
                prop_assert!((a - (b + t * d)).abs() < 1e-12);
                prop_assert!((d - (c - b)).abs() < 1e-15);
            }
        }
    }
}
