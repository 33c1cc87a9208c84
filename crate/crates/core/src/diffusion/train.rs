use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Conditioning, ConditionalUnet};
use super::schedule::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamGrads, Tensor};

/// Modalities removed for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Replace the condition image with an all-zero image.
    pub no_image: bool,
    /// Drop the coordinate terms from the fused conditioning vector.
    pub no_metadata: bool,
    /// Replace the caption with the bare city name.
    pub no_prompt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps of the first phase of two-phase training (control branch
    /// frozen); after it only the control branch is updated. 0 trains
    /// everything jointly.
    pub phase1_steps: u64,
    /// Cosine-anneal the learning rate to zero over this many steps;
    /// 0 keeps it constant.
    pub lr_decay_steps: u64,
    /// Worker threads for per-sample gradients; results do not depend on
    /// it, so it is not stored in checkpoints.
    #[serde(skip)]
    pub jobs: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            seed: 0,
            phase1_steps: 0,
            lr_decay_steps: 0,
            jobs: 1,
            ablation: Ablation::default(),
        }
    }
}

/// One training example, already in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// Target image `[C, S, S]` in `[-1, 1]`.
    pub x0: Tensor,
    /// Condition image `[cond_channels, S, S]` in `[0, 1]`.
    pub condition: Tensor,
    /// Caption embedding.
    pub caption: Vec<f64>,
    /// Tile-center `(lon, lat)`, or `None` when metadata is ablated.
    pub coords: Option<(f64, f64)>,
}

impl TrainSample {
    pub fn conditioning(&self) -> Conditioning<'_> {
        Conditioning {
            coords: self.coords,
            text: &self.caption,
            image: Some(&self.condition),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ConditionalUnet,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub step: u64,
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn new(model: ConditionalUnet, config: TrainConfig) -> Self {
        let adam = AdamState {
            m: ParamGrads::zeros_like(&model.params),
            v: ParamGrads::zeros_like(&model.params),
            t: 0,
        };
        Self {
            model,
            config,
            adam,
            step: 0,
            losses: Vec::new(),
        }
    }

    /// RNG for everything random in step `step`: a pure function of
    /// `(seed, step)`, so resumed runs draw identical noise.
    pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        rng
    }
}

/// Noise draw for one sample of one step.
struct Draw {
    t: usize,
    eps: Tensor,
}

fn draw_noise(rng: &mut ChaCha8Rng, sched: &NoiseSchedule, shape: &[usize]) -> Draw {
    let t = rng.random_range(1..=sched.steps());
    let n = shape.iter().product();
    let eps = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Draw {
        t,
        eps: Tensor::from_vec(shape, eps).expect("shape"),
    }
}

/// Source of the noise prediction during a step.
pub enum Predictor<'a> {
    Model,
    /// Test hook replacing the network output by a function of the true noise.
    Override(&'a (dyn Fn(&Tensor) -> Tensor + Sync)),
}

/// Loss and parameter gradients of one sample.
fn sample_loss(
    model: &ConditionalUnet,
    sample: &TrainSample,
    draw: &Draw,
    sched: &NoiseSchedule,
    predictor: &Predictor,
) -> Result<(f64, ParamGrads)> {
    let x_t = forward_diffuse(&sample.x0, draw.t, &draw.eps, sched)?;
    let mut g = Graph::new(&model.params);
    let eps_hat = match predictor {
        Predictor::Model => model.forward(&mut g, &x_t, draw.t, &sample.conditioning())?,
        Predictor::Override(f) => g.input(f(&draw.eps)),
    };
    let loss = g.mse_loss(eps_hat, draw.eps.clone())?;
    let value = g.value(loss).data()[0];
    let mut grads = ParamGrads::zeros_like(&model.params);
    g.backward(loss, &mut grads)?;
    Ok((value, grads))
}

/// Computes the batch loss and gradient without updating parameters.
pub fn batch_gradients(
    state: &TrainState,
    batch: &[TrainSample],
    sched: &NoiseSchedule,
    predictor: &Predictor,
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut rng = TrainState::step_rng(state.config.seed, state.step);
    let draws: Vec<Draw> = batch
        .iter()
        .map(|s| draw_noise(&mut rng, sched, s.x0.shape()))
        .collect();
    let per_sample = |(s, d): (&TrainSample, &Draw)| sample_loss(&state.model, s, d, sched, predictor);
    let results: Vec<Result<(f64, ParamGrads)>> = if state.config.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(state.config.jobs)
            .build()
            .map_err(|e| Error::Model(e.to_string()))?;
        pool.install(|| batch.par_iter().zip(&draws).map(per_sample).collect())
    } else {
        batch.iter().zip(&draws).map(per_sample).collect()
    };
    let mut total = ParamGrads::zeros_like(&state.model.params);
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g);
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale_assign(scale);
    Ok((loss * scale, total))
}

/// One optimizer step on `batch`. Returns the batch loss.
pub fn train_step(state: &mut TrainState, batch: &[TrainSample], sched: &NoiseSchedule) -> Result<f64> {
    train_step_with(state, batch, sched, &Predictor::Model)
}

pub fn train_step_with(
    state: &mut TrainState,
    batch: &[TrainSample],
    sched: &NoiseSchedule,
    predictor: &Predictor,
) -> Result<f64> {
    let (loss, grads) = batch_gradients(state, batch, sched, predictor)?;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} at step {}",
            state.step + 1
        )));
    }
    adam_update(state, &grads);
    state.step += 1;
    state.losses.push(loss);
    Ok(loss)
}

fn trainable(state: &TrainState, name: &str) -> bool {
    let p1 = state.config.phase1_steps;
    if p1 == 0 {
        return true;
    }
    let control = ConditionalUnet::is_control_param(name);
    if state.step < p1 {
        !control
    } else {
        control
    }
}

impl TrainConfig {
    /// Learning rate applied at 0-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.lr_decay_steps == 0 {
            return self.learning_rate;
        }
        let frac = step.min(self.lr_decay_steps) as f64 / self.lr_decay_steps as f64;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

fn adam_update(state: &mut TrainState, grads: &ParamGrads) {
    let cfg = state.config;
    let lr = cfg.lr_at(state.step);
    state.adam.t += 1;
    let t = state.adam.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = state.model.params.ids().collect();
    for id in ids {
        if !trainable(state, state.model.params.name(id)) {
            continue;
        }
        let g = grads.get(id).data();
        let m = state.adam.m.get_mut(id).data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.adam.v.get_mut(id).data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let m = state.adam.m.get(id).data();
        let v = state.adam.v.get(id).data();
        let p = state.model.params.get_mut(id).data_mut();
        for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
}

/// Draws a batch of `size` indices into a dataset of `n` examples for
/// step `step`, independently of the noise stream.
pub fn batch_indices(seed: u64, step: u64, n: usize, size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B);
    rng.set_stream(step);
    (0..size).map(|_| rng.random_range(0..n)).collect()
}
