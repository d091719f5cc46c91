//! Constrained training with the alternating direction method of multipliers.
//!
//! The constrained problem `min f(W) s.t. W in S` is split per layer into a
//! gradient-solvable W-step on the augmented objective
//! `f(W) + sum_i rho_i/2 ||W_i - Q_i + U_i||_F^2`, a Q-step that projects
//! `W + U` onto the constraint set, and a dual update `U += W - Q`. The
//! auxiliary copy `Q` is feasible after every iteration by construction; the
//! residual `||W - Q||_F` measures how far the trainable weights are from the
//! constraint set.
//!
//! Block selection is re-evaluated at every Q-step (the projection is applied
//! to the current `W + U`, not to a frozen block set); selection churn decays
//! as the penalty factor grows.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Dataset, LossKind, Model, Optimizer, OptimizerKind};
use crate::projection::{
    project_with_rule, verify_constraint, ConstraintReport, ConstraintSpec, LayerReport, Method,
    VerifyOutcome,
};
use crate::tensor::{frobenius_distance, frobenius_norm, DenseTensor};

/// ADMM hyperparameters, including the inner W-step optimizer settings.
#[derive(Debug, Clone)]
pub struct AdmmConfig {
    /// Outer ADMM iterations `K`.
    pub iterations: usize,
    /// Gradient epochs per W-step.
    pub inner_epochs: usize,
    pub rho_init: f32,
    /// Multiplicative penalty growth, applied every `rho_period` iterations.
    pub rho_growth: f32,
    pub rho_period: usize,
    pub rho_cap: f32,
    /// Per-layer initial penalty overrides.
    pub rho_overrides: BTreeMap<usize, f32>,
    /// Early stop when every layer residual falls below
    /// `tolerance * max(||W||_F, 1e-12)`.
    pub tolerance: f64,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            inner_epochs: 1,
            rho_init: 1e-3,
            rho_growth: 1.5,
            rho_period: 1,
            rho_cap: 1e-1,
            rho_overrides: BTreeMap::new(),
            tolerance: 1e-4,
            optimizer: OptimizerKind::Sgd,
            lr: 5e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            loss: LossKind::SoftmaxCrossEntropy,
            seed: 0,
        }
    }
}

/// Per-layer ADMM variables: the feasible copy `Q`, the scaled dual `U`, and
/// the penalty factor `rho`.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub q: DenseTensor,
    pub u: DenseTensor,
    pub rho: f32,
}

/// ADMM variables for every constrained layer.
#[derive(Debug, Clone, Default)]
pub struct AdmmState {
    pub layers: BTreeMap<usize, LayerState>,
}

/// One history record per (outer iteration, constrained layer).
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub layer: usize,
    pub task_loss: f64,
    pub penalty: f64,
    pub residual: f64,
    pub rho: f32,
}

/// `rho/2 * ||W - Q + U||_F^2`, accumulated in 64-bit.
pub fn penalty_loss(w: &DenseTensor, q: &DenseTensor, u: &DenseTensor, rho: f32) -> Result<f64> {
    check_shapes(w, q, u)?;
    let sum: f64 = w
        .data()
        .iter()
        .zip(q.data())
        .zip(u.data())
        .map(|((&w, &q), &u)| {
            let d = w as f64 - q as f64 + u as f64;
            d * d
        })
        .sum();
    Ok(rho as f64 / 2.0 * sum)
}

/// Gradient of [`penalty_loss`] w.r.t. `W`: `rho * (W - Q + U)`.
pub fn penalty_grad(
    w: &DenseTensor,
    q: &DenseTensor,
    u: &DenseTensor,
    rho: f32,
) -> Result<DenseTensor> {
    check_shapes(w, q, u)?;
    Ok(w.sub(q)?.add(u)?.scale(rho))
}

/// Q-step: Euclidean projection of `W + U` under the layer rule.
pub fn q_step(
    w: &DenseTensor,
    u: &DenseTensor,
    rule: &crate::projection::LayerRule,
) -> Result<(DenseTensor, LayerReport)> {
    project_with_rule(&w.add(u)?, rule)
}

/// Dual update: `U' = U + W - Q`.
pub fn u_step(u: &DenseTensor, w: &DenseTensor, q: &DenseTensor) -> Result<DenseTensor> {
    u.add(&w.sub(q)?)
}

/// Feasibility gap `||W - Q||_F` of one layer.
pub fn residual(w: &DenseTensor, q: &DenseTensor) -> Result<f64> {
    frobenius_distance(w, q)
}

fn check_shapes(w: &DenseTensor, q: &DenseTensor, u: &DenseTensor) -> Result<()> {
    if w.shape() != q.shape() || w.shape() != u.shape() {
        return Err(Error::ShapeMismatch {
            expected: w.shape().to_vec(),
            actual: if w.shape() != q.shape() { q.shape().to_vec() } else { u.shape().to_vec() },
        });
    }
    Ok(())
}

/// The W-step provider: anything owning trainable weights and able to run one
/// inner epoch on `task loss + penalty`.
pub trait AdmmTask {
    /// Identifiers of the trainable layers the spec may constrain.
    fn layer_ids(&self) -> Vec<usize>;

    fn weight(&self, id: usize) -> Result<&DenseTensor>;

    /// One inner optimization pass minimizing the task loss plus the penalty
    /// terms in `state`; returns the mean task loss.
    fn optimize(&mut self, state: &AdmmState) -> Result<f64>;
}

/// Runs the ADMM loop against an arbitrary W-step provider. Returns the
/// per-iteration history; the task's weights end up near the constraint set
/// (call a finalize-style projection for exact feasibility).
pub fn admm_run(
    task: &mut impl AdmmTask,
    spec: &ConstraintSpec,
    cfg: &AdmmConfig,
) -> Result<Vec<HistoryRow>> {
    let ids = task.layer_ids();
    for layer in spec.constrained_layers() {
        if !ids.contains(&layer) {
            return Err(Error::InvalidSpec(format!("spec names unknown layer {layer}")));
        }
    }

    // Q0 = project(W0), U0 = 0.
    let mut state = AdmmState::default();
    for &id in &ids {
        let rule = spec.rule(id);
        if rule.method == Method::None {
            continue;
        }
        let w = task.weight(id)?;
        let (q, _) = project_with_rule(w, &rule)?;
        let rho = cfg.rho_overrides.get(&id).copied().unwrap_or(cfg.rho_init);
        state.layers.insert(id, LayerState { q, u: DenseTensor::zeros(w.shape()), rho });
    }

    let mut history = Vec::new();
    for iteration in 0..cfg.iterations {
        // W-step: inner epochs of gradient descent on task + penalty.
        let mut task_loss = 0.0;
        for _ in 0..cfg.inner_epochs.max(1) {
            task_loss = task.optimize(&state)?;
        }
        if !task_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "task loss {task_loss} at iteration {iteration}"
            )));
        }

        // Q-step, dual update, penalty adjustment, bookkeeping.
        let mut worst_relative = 0.0f64;
        for (&id, layer) in state.layers.iter_mut() {
            let w = task.weight(id)?;
            let (q, _) = q_step(w, &layer.u, &spec.rule(id))?;
            let u = u_step(&layer.u, w, &q)?;
            let res = residual(w, &q)?;
            let penalty = penalty_loss(w, &q, &u, layer.rho)?;
            history.push(HistoryRow {
                iteration,
                layer: id,
                task_loss,
                penalty,
                residual: res,
                rho: layer.rho,
            });
            layer.q = q;
            layer.u = u;
            if cfg.rho_period > 0 && (iteration + 1) % cfg.rho_period == 0 {
                layer.rho = (layer.rho * cfg.rho_growth).min(cfg.rho_cap);
            }
            let scale = (frobenius_norm(w) as f64).max(1e-12);
            worst_relative = worst_relative.max(res / scale);
        }

        if !state.layers.is_empty() && worst_relative < cfg.tolerance {
            break;
        }
    }
    Ok(history)
}

/// W-step provider backed by the network engine: mini-batch gradient epochs on
/// `task loss + sum rho/2 ||W - Q + U||^2`.
struct ModelTask<'a> {
    model: &'a mut Model,
    data: &'a Dataset,
    loss: LossKind,
    batch_size: usize,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
}

impl AdmmTask for ModelTask<'_> {
    fn layer_ids(&self) -> Vec<usize> {
        self.model.trainable_layers()
    }

    fn weight(&self, id: usize) -> Result<&DenseTensor> {
        self.model.weight(id).ok_or(Error::Layer {
            index: id,
            message: "not a trainable layer".into(),
        })
    }

    fn optimize(&mut self, state: &AdmmState) -> Result<f64> {
        let penalties = &state.layers;
        nn::train_epoch(
            self.model,
            self.data,
            self.loss,
            self.batch_size,
            &mut self.optimizer,
            &mut self.rng,
            &|id, w| match penalties.get(&id) {
                Some(layer) => penalty_grad(w, &layer.q, &layer.u, layer.rho).map(Some),
                None => Ok(None),
            },
        )
    }
}

/// ADMM training of a network model. Runs `iterations` outer steps of
/// (W-step, Q-step, U-step, penalty growth) and returns the history; call
/// [`finalize`] afterwards for exact feasibility.
pub fn admm_train(
    model: &mut Model,
    data: &Dataset,
    spec: &ConstraintSpec,
    cfg: &AdmmConfig,
) -> Result<Vec<HistoryRow>> {
    let mut task = ModelTask {
        model,
        data,
        loss: cfg.loss,
        batch_size: cfg.batch_size,
        optimizer: Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    admm_run(&mut task, spec, cfg)
}

/// Hard projection of the trained weights under the spec. Magnitudes are
/// re-fitted from the current weights (not frozen from the last Q-step), and
/// the result is verified to satisfy every constraint exactly.
pub fn finalize(model: &mut Model, spec: &ConstraintSpec) -> Result<ConstraintReport> {
    let mut report = ConstraintReport::default();
    for id in model.trainable_layers() {
        let rule = spec.rule(id);
        let weight = model.weight(id).expect("trainable layer has weights");
        let (projected, layer_report) = project_with_rule(weight, &rule)?;
        match verify_constraint(&projected, &rule)? {
            VerifyOutcome::Clean(_) => {}
            VerifyOutcome::Violated(violations) => {
                return Err(Error::ReportMismatch(format!(
                    "finalize left layer {id} infeasible: {} violations",
                    violations.len()
                )));
            }
        }
        *model.weight_mut(id).unwrap() = projected;
        report.layers.insert(id, layer_report);
    }
    Ok(report)
}
