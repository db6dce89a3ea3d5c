//! Artifact2Artifact training: pairs of independent reconstructions of the
//! same object serve as input and target for each other.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ComplexImage, Shape};
use crate::priors::{backward, dims_of, forward_cached, image_to_tensor, NetConfig, NetWeights};

/// Acquisition id used for groundtruth targets in supervised pairs.
pub const GROUNDTRUTH: usize = usize::MAX;

#[derive(Clone, Debug)]
pub struct TrainPair {
    pub input: Arc<ComplexImage>,
    pub target: Arc<ComplexImage>,
    pub object: usize,
    pub input_acq: usize,
    pub target_acq: usize,
}

impl TrainPair {
    pub fn new(
        input: Arc<ComplexImage>,
        target: Arc<ComplexImage>,
        object: usize,
        input_acq: usize,
        target_acq: usize,
    ) -> Result<Self> {
        target.check_shape(input.shape())?;
        if input_acq == target_acq {
            return Err(Error::param("target_acq", "must differ from input_acq"));
        }
        Ok(Self {
            input,
            target,
            object,
            input_acq,
            target_acq,
        })
    }
}

/// All ordered same-object pairs `(i, i')`, `i != i'`, objects in order.
///
/// Objects with fewer than two acquisitions are skipped and counted.
pub fn build_pairs(objects: &[Vec<Arc<ComplexImage>>]) -> Result<(Vec<TrainPair>, usize)> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (j, acqs) in objects.iter().enumerate() {
        if acqs.len() < 2 {
            skipped += 1;
            continue;
        }
        for (i, a) in acqs.iter().enumerate() {
            for (k, b) in acqs.iter().enumerate() {
                if i != k {
                    pairs.push(TrainPair::new(a.clone(), b.clone(), j, i, k)?);
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientPairs { skipped });
    }
    Ok((pairs, skipped))
}

/// Input `clean + n`, target `clean`, with complex Gaussian `n` of standard
/// deviation `sigma` per real component; one pair per (image, sigma).
pub fn awgn_pairs(clean: &[Arc<ComplexImage>], sigmas: &[f64], seed: u64) -> Result<Vec<TrainPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (j, x) in clean.iter().enumerate() {
        for (i, &sigma) in sigmas.iter().enumerate() {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::param("sigma", e.to_string()))?;
            let mut noisy = (**x).clone();
            for v in noisy.data_mut() {
                v.re += normal.sample(&mut rng);
                v.im += normal.sample(&mut rng);
            }
            pairs.push(TrainPair::new(Arc::new(noisy), x.clone(), j, i, GROUNDTRUTH)?);
        }
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Glorot,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the l1 term in the mixed loss.
    pub alpha: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Random `(phase, y, x)` crop extents; full volumes when unset.
    pub crop: Option<[usize; 3]>,
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 4,
            epochs: 10,
            seed: 0,
            crop: None,
            init: Init::Glorot,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha <= 1.0) {
            return Err(Error::param("alpha", "must lie in [0, 1]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("beta", "ADAM betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("eps", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::param("batch", "must be >= 1"));
        }
        if let Some(c) = self.crop {
            if c.contains(&0) {
                return Err(Error::param("crop", "extents must be >= 1"));
            }
        }
        Ok(())
    }
}

/// `alpha * mean|r| + (1 - alpha) * mean r^2` over the real and imaginary
/// parts of `r = pred - target`.
pub fn mixed_loss(pred: &ComplexImage, target: &ComplexImage, alpha: f64) -> Result<f64> {
    target.check_shape(pred.shape())?;
    let n = 2.0 * pred.data().len() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for (p, t) in pred.data().iter().zip(target.data()) {
        let r = p - t;
        l1 += r.re.abs() + r.im.abs();
        l2 += r.re * r.re + r.im * r.im;
    }
    Ok(alpha * l1 / n + (1.0 - alpha) * l2 / n)
}

/// Loss and parameter gradient for one tensor pair.
fn tensor_loss_grad(w: &NetWeights, input: &[f64], target: &[f64], dims: [usize; 3], alpha: f64) -> (f64, Vec<f64>) {
    let cache = forward_cached(w, input, dims);
    let n = target.len() as f64;
    let mut loss = 0.0;
    let g: Vec<f64> = cache
        .output()
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            loss += alpha * r.abs() + (1.0 - alpha) * r * r;
            // Subgradient of |r| at 0 is taken as 0.
            let sign = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            (alpha * sign + 2.0 * (1.0 - alpha) * r) / n
        })
        .collect();
    (loss / n, backward(w, &cache, &g))
}

fn reduce(parts: Vec<(f64, Vec<f64>)>, n_params: usize) -> (f64, Vec<f64>) {
    let count = parts.len() as f64;
    let mut grad = vec![0.0; n_params];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|a| *a /= count);
    (loss / count, grad)
}

/// Mean mixed loss over the batch and its exact gradient with respect to
/// every kernel weight and bias, in [`NetWeights::params`] order.
pub fn loss_gradient(w: &NetWeights, batch: &[TrainPair], alpha: f64) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::param("batch", "must be nonempty"));
    }
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|p| {
            let dims = dims_of(p.input.shape());
            tensor_loss_grad(w, &image_to_tensor(&p.input), &image_to_tensor(&p.target), dims, alpha)
        })
        .collect();
    Ok(reduce(parts, w.n_params()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(params.len(), grads.len()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: NetWeights,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    pub adam: AdamState,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (e, l) in self.loss_history.iter().enumerate() {
            s.push_str(&format!("{e},{l:.17e}\n"));
        }
        s
    }
}

fn crop_tensor(t: &[f64], shape: Shape, origin: [usize; 3], ext: [usize; 3]) -> Vec<f64> {
    let vol = shape.len();
    let mut out = Vec::with_capacity(2 * ext.iter().product::<usize>());
    for c in 0..2 {
        for p in origin[0]..origin[0] + ext[0] {
            for y in origin[1]..origin[1] + ext[1] {
                let start = c * vol + shape.index(p, y, origin[2]);
                out.extend_from_slice(&t[start..start + ext[2]]);
            }
        }
    }
    out
}

/// Seeded mini-batch ADAM from a fresh initialization.
pub fn train(pairs: &[TrainPair], net: &NetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let weights = match cfg.init {
        Init::Glorot => NetWeights::glorot(net, cfg.seed)?,
        Init::Identity => NetWeights::identity(net, cfg.seed)?,
    };
    train_from(weights, AdamState::new(0), pairs, cfg)
}

/// Continues training from given weights and optimizer state. An empty
/// `adam` state is reinitialized.
pub fn train_from(mut weights: NetWeights, mut adam: AdamState, pairs: &[TrainPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InsufficientPairs { skipped: 0 });
    }
    if adam.m.is_empty() {
        adam = AdamState::new(weights.n_params());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a2a0);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            // Draw crops sequentially so the stream does not depend on thread count.
            let jobs: Vec<(usize, [usize; 3], [usize; 3])> = chunk
                .iter()
                .map(|&i| {
                    let shape = pairs[i].input.shape();
                    let full = dims_of(shape);
                    let ext = match cfg.crop {
                        Some(c) => [c[0].min(full[0]), c[1].min(full[1]), c[2].min(full[2])],
                        None => full,
                    };
                    let origin = [
                        rng.gen_range(0..=full[0] - ext[0]),
                        rng.gen_range(0..=full[1] - ext[1]),
                        rng.gen_range(0..=full[2] - ext[2]),
                    ];
                    (i, origin, ext)
                })
                .collect();
            let parts: Vec<(f64, Vec<f64>)> = jobs
                .par_iter()
                .map(|&(i, origin, ext)| {
                    let p = &pairs[i];
                    let shape = p.input.shape();
                    let input = crop_tensor(&image_to_tensor(&p.input), shape, origin, ext);
                    let target = crop_tensor(&image_to_tensor(&p.target), shape, origin, ext);
                    tensor_loss_grad(&weights, &input, &target, ext, cfg.alpha)
                })
                .collect();
            let (loss, grad) = reduce(parts, weights.n_params());
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam_step(&mut adam, weights.params_mut(), &grad, cfg)?;
            total += loss;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    if weights.params().iter().any(|w| !w.is_finite()) {
        return Err(Error::TrainingDiverged { epoch: cfg.epochs.saturating_sub(1) });
    }
    Ok(TrainOutcome {
        weights,
        loss_history: history,
        adam,
    })
}
