//! ADMM loop behavior on a convex toy objective with a closed-form optimum.
//!
//! Minimizing `||W - a||^2` with `a = [1, 3]` over vectors whose two entries
//! share one absolute value (both signs positive at the optimum) has the
//! unique solution `q* = argmin (q-1)^2 + (q-3)^2 = 2`, i.e. `W* = [2, 2]`.

use msu_core::admm::{admm_run, penalty_grad, AdmmConfig, AdmmState, AdmmTask, HistoryRow};
use msu_core::blocking::BlockShape;
use msu_core::projection::{ConstraintSpec, LayerRule};
use msu_core::tensor::DenseTensor;
use msu_core::{Error, Result};

/// `f(W) = ||W - a||^2` minimized by full-batch gradient steps.
struct QuadraticTask {
    w: DenseTensor,
    a: DenseTensor,
    lr: f32,
    steps: usize,
}

impl QuadraticTask {
    fn new(a: &[f32], w0: &[f32]) -> Self {
        Self {
            w: DenseTensor::new(&[1, a.len()], w0.to_vec()).unwrap(),
            a: DenseTensor::new(&[1, a.len()], a.to_vec()).unwrap(),
            lr: 0.05,
            steps: 40,
        }
    }
}

impl AdmmTask for QuadraticTask {
    fn layer_ids(&self) -> Vec<usize> {
        vec![0]
    }

    fn weight(&self, id: usize) -> Result<&DenseTensor> {
        if id != 0 {
            return Err(Error::BlockIndexOutOfRange { index: id, num_blocks: 1 });
        }
        Ok(&self.w)
    }

    fn optimize(&mut self, state: &AdmmState) -> Result<f64> {
        for _ in 0..self.steps {
            let mut grad = self.w.sub(&self.a)?.scale(2.0);
            if let Some(layer) = state.layers.get(&0) {
                grad = grad.add(&penalty_grad(&self.w, &layer.q, &layer.u, layer.rho)?)?;
            }
            self.w = self.w.sub(&grad.scale(self.lr))?;
        }
        let diff = self.w.sub(&self.a)?;
        Ok(diff.data().iter().map(|&v| (v as f64) * (v as f64)).sum())
    }
}

fn toy_config() -> AdmmConfig {
    AdmmConfig {
        iterations: 500,
        inner_epochs: 1,
        rho_init: 0.5,
        rho_growth: 1.2,
        rho_period: 1,
        rho_cap: 4.0,
        tolerance: 0.0,
        ..AdmmConfig::default()
    }
}

fn unify_spec() -> ConstraintSpec {
    let mut spec = ConstraintSpec::new();
    spec.set(0, LayerRule::unify(BlockShape::new(&[2, 1]).unwrap(), 1.0)).unwrap();
    spec
}

#[test]
fn toy_unify_converges_to_closed_form_optimum() {
    let mut task = QuadraticTask::new(&[1.0, 3.0], &[1.0, 3.0]);
    let history = admm_run(&mut task, &unify_spec(), &toy_config()).unwrap();
    assert!(history.len() <= 500);
    let w = task.w.data();
    assert!(
        (w[0] - 2.0).abs() < 1e-4 && (w[1] - 2.0).abs() < 1e-4,
        "converged to {w:?}, want [2, 2]"
    );
}

#[test]
fn toy_residual_non_increasing_over_final_quartile() {
    let mut task = QuadraticTask::new(&[1.0, 3.0], &[1.0, 3.0]);
    let history = admm_run(&mut task, &unify_spec(), &toy_config()).unwrap();
    let residuals: Vec<f64> = history.iter().map(|row: &HistoryRow| row.residual).collect();
    let start = residuals.len() * 3 / 4;
    for k in start..residuals.len() - 1 {
        assert!(
            residuals[k + 1] <= residuals[k],
            "residual rose at iteration {k}: {} -> {}",
            residuals[k],
            residuals[k + 1]
        );
    }
}

#[test]
fn toy_prune_converges_to_zero() {
    let mut spec = ConstraintSpec::new();
    spec.set(0, LayerRule::prune(BlockShape::new(&[2, 1]).unwrap(), 1.0)).unwrap();
    let mut task = QuadraticTask::new(&[1.0, 3.0], &[1.0, 3.0]);
    admm_run(&mut task, &spec, &toy_config()).unwrap();
    let w = task.w.data();
    assert!(w[0].abs() < 1e-3 && w[1].abs() < 1e-3, "converged to {w:?}, want [0, 0]");
}

#[test]
fn early_stop_on_small_relative_residual() {
    let cfg = AdmmConfig { tolerance: 1e-3, ..toy_config() };
    let mut task = QuadraticTask::new(&[1.0, 3.0], &[1.0, 3.0]);
    let history = admm_run(&mut task, &unify_spec(), &cfg).unwrap();
    let iterations = history.last().unwrap().iteration + 1;
    assert!(iterations < 500, "early stop never fired; ran {iterations} iterations");
}
