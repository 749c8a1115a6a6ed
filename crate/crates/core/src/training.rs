//! Maximum-likelihood training.
//!
//! The loss is the mean negative log-likelihood of a batch under the flow,
//! `L = (1/N) Σᵢ −(log N(f(xᵢ); 0, I) + log|det J_f(xᵢ)|)`, differentiated
//! exactly through every coupling layer and optimized with Adam.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoding::DataVector;
use crate::error::{Error, Result};
use crate::flow::{prior_log_density, FlowModel};
use crate::linalg::Matrix;
use crate::resnet::GradientBundle;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub grad_clip_norm: Option<f64>,
    /// Uniform dequantization noise amplitude; must stay below half a lattice step.
    pub jitter: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 512,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            shuffle: true,
            grad_clip_norm: None,
            jitter: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || self.adam_beta1 == 0.0 {
            return bad("adam beta1 must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta2) || self.adam_beta2 == 0.0 {
            return bad("adam beta2 must be in (0, 1)");
        }
        if self.adam_epsilon <= 0.0 {
            return bad("adam epsilon must be positive");
        }
        if matches!(self.grad_clip_norm, Some(c) if c <= 0.0 || c.is_nan()) {
            return bad("gradient clip norm must be positive");
        }
        Ok(())
    }
}

/// Gradients for every net of a model, in flow order (scale net, then translation net).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients(Vec<GradientBundle>);

impl ModelGradients {
    pub fn zeros_like(model: &FlowModel) -> Self {
        Self(model.param_slices().map(|p| GradientBundle::zeros(p.len())).collect())
    }

    pub fn bundles(&self) -> &[GradientBundle] {
        &self.0
    }

    pub fn bundles_mut(&mut self) -> &mut [GradientBundle] {
        &mut self.0
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(GradientBundle::squared_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|g| g.scale(k));
    }

    /// All entries, flow order.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|g| g.as_slice().iter().copied()).collect()
    }
}

fn batch_nll(z: &Matrix, logdet: &[f64]) -> f64 {
    let n = z.rows() as f64;
    z.iter_rows().zip(logdet).map(|(row, ld)| -(prior_log_density(row) + ld)).sum::<f64>() / n
}

/// Mean negative log-likelihood, evaluated in chunks to bound memory.
pub fn nll_loss(model: &FlowModel, data: &Matrix) -> Result<f64> {
    if data.rows() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let chunk = 4096;
    let mut total = 0.0;
    let mut start = 0;
    while start < data.rows() {
        let end = (start + chunk).min(data.rows());
        let (z, ld) = model.forward_batch(&data.slice_rows(start, end))?;
        total += batch_nll(&z, &ld) * (end - start) as f64;
        start = end;
    }
    let loss = total / data.rows() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    Ok(loss)
}

pub fn nll_loss_and_grads(model: &FlowModel, batch: &Matrix) -> Result<(f64, ModelGradients)> {
    if batch.rows() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let (z, logdet, tapes) = model.forward_batch_taped(batch)?;
    let loss = batch_nll(&z, &logdet);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let n = batch.rows() as f64;
    // ∂L/∂z = z/N, ∂L/∂logdetᵢ = −1/N
    let mut dy = z;
    dy.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    let dlogdet = vec![-1.0 / n; batch.rows()];
    let mut grads = Vec::with_capacity(2 * model.layers().len());
    for (layer, tape) in model.layers().iter().zip(&tapes).rev() {
        let (gs, gt, dx) = layer.backward_batch(tape, &dy, &dlogdet)?;
        grads.push(gt);
        grads.push(gs);
        dy = dx;
    }
    grads.reverse();
    Ok((loss, ModelGradients(grads)))
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

/// One bias-corrected Adam update of a parameter slice. `step` is the 1-based step index.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(first.iter_mut()).zip(second.iter_mut()) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

impl AdamState {
    pub fn new(model: &FlowModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.param_slices().map(|p| vec![0.0; p.len()]).collect();
        Self { first: zeros.clone(), second: zeros, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut FlowModel, grads: &ModelGradients, cfg: &TrainConfig) -> Result<()> {
        if grads.bundles().len() != self.first.len() {
            return Err(Error::TapeMismatch("gradient count differs from optimizer state".into()));
        }
        self.step += 1;
        let t = self.step;
        for (((params, g), m), v) in model
            .param_slices_mut()
            .zip(grads.bundles())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            if params.len() != g.len() || m.len() != g.len() {
                return Err(Error::TapeMismatch("gradient shape differs from parameters".into()));
            }
            adam_update(params, g.as_slice(), m, v, t, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
        }
        Ok(())
    }
}

/// Progress event emitted after each epoch.
#[derive(Debug)]
pub struct EpochReport<'a> {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub improved: bool,
    pub model: &'a FlowModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// NLL of the whole corpus before any update.
    pub initial_loss: f64,
    /// Mean batch loss per epoch.
    pub history: Vec<f64>,
    /// 1-based epoch whose parameters the model holds on return, if any epoch ran.
    pub best_epoch: Option<usize>,
}

pub fn stack(data: &[DataVector], dim: usize) -> Result<Matrix> {
    if data.iter().any(|v| v.dim() != dim) {
        return Err(Error::InvalidConfig(format!("all vectors must have dimension {dim}")));
    }
    Ok(Matrix::from_rows(data, dim))
}

/// Runs the epoch loop. On return the model holds the parameters of the epoch
/// with the lowest mean loss. If the loss diverges, the model is restored to the
/// best parameters seen so far and `NonFiniteLoss` is returned.
pub fn train(
    model: &mut FlowModel,
    data: &[DataVector],
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&EpochReport<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(a) = cfg.jitter {
        let limit = 0.5 / model.charset().size() as f64;
        if !(a > 0.0 && a < limit) {
            return Err(Error::InvalidConfig(format!("jitter must be in (0, {limit})")));
        }
    }
    let all = stack(data, model.dim())?;
    let initial_loss = nll_loss(model, &all)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut adam = AdamState::new(model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, rng::purpose::SHUFFLE);
    let mut jitter_rng = rng::stream(cfg.seed, rng::purpose::JITTER);
    let mut best: Option<(f64, usize, FlowModel)> = None;
    let dim = model.dim();
    let initial = model.clone();

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Matrix::zeros(chunk.len(), dim);
            for (r, &i) in chunk.iter().enumerate() {
                batch.row_mut(r).copy_from_slice(data[i].as_slice());
            }
            if let Some(a) = cfg.jitter {
                batch.as_mut_slice().iter_mut().for_each(|v| *v += jitter_rng.gen_range(-a..a));
            }
            let step = nll_loss_and_grads(model, &batch).and_then(|(loss, mut grads)| {
                if let Some(limit) = cfg.grad_clip_norm {
                    let norm = grads.global_norm();
                    if norm > limit {
                        grads.scale(limit / norm);
                    }
                }
                if !grads.global_norm().is_finite() {
                    return Err(Error::NonFiniteLoss { epoch });
                }
                adam.step(model, &grads, cfg)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => {
                    total += loss;
                    batches += 1;
                }
                Err(Error::NonFiniteLoss { .. } | Error::NonFiniteActivation(_)) => {
                    *model = match best.take() {
                        Some((_, _, m)) => m,
                        None => initial,
                    };
                    return Err(Error::NonFiniteLoss { epoch });
                }
                Err(e) => return Err(e),
            }
        }
        let mean = total / batches as f64;
        history.push(mean);
        let improved = best.as_ref().is_none_or(|(l, _, _)| mean < *l);
        sink(&EpochReport { epoch, mean_loss: mean, improved, model });
        if improved {
            best = Some((mean, epoch, model.clone()));
        }
    }
    let best_epoch = best.map(|(_, e, m)| {
        *model = m;
        e
    });
    Ok(TrainOutcome { initial_loss, history, best_epoch })
}
