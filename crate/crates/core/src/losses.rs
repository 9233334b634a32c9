//! Local objective: heatmap MSE at the native level, multi-resolution
//! distillation between adjacent levels, an ℓ2 penalty `½‖w‖²`, and the
//! optional FedProx proximal term `½‖w − w_global‖²`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{invalid, Result};
use crate::model::ModelParams;
use crate::tensor::{Tensor, UpsampleOp};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossCoeffs {
    /// Distillation weight.
    pub alpha: f64,
    /// ℓ2 weight.
    pub gamma: f64,
    /// Proximal weight; zero disables the term.
    pub mu_prox: f64,
}

impl Default for LossCoeffs {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 0.01,
            mu_prox: 0.0,
        }
    }
}

impl LossCoeffs {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("mu_prox", self.mu_prox)] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `(1/n) Σ_j ‖y⁽⁰⁾_j − T_j‖²` over the batch.
pub fn task_loss(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId> {
    tape.mse(pred, target)
}

/// `Σ_i (1/n) Σ_j ‖sg(y⁽ⁱ⁻¹⁾_j) − U y⁽ⁱ⁾_j‖²` over adjacent levels.
///
/// `ops[i - 1]` lifts the level-`i` heatmap grid onto the level-`(i-1)`
/// grid. A single level yields a constant zero that carries no gradient.
pub fn mrkd_loss(tape: &mut Tape, preds: &[NodeId], ops: &[Arc<UpsampleOp>]) -> Result<NodeId> {
    if preds.is_empty() {
        return Err(invalid("distillation needs at least one level"));
    }
    if ops.len() + 1 < preds.len() {
        return Err(invalid(format!(
            "{} levels need {} upsampling operators, got {}",
            preds.len(),
            preds.len() - 1,
            ops.len()
        )));
    }
    if preds.len() == 1 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::with_capacity(preds.len() - 1);
    for i in 1..preds.len() {
        let teacher = tape.stop_gradient(preds[i - 1]);
        let student = tape.upsample(preds[i], Arc::clone(&ops[i - 1]))?;
        terms.push(tape.mse(teacher, student)?);
    }
    tape.sum(&terms)
}

/// Nodes of one assembled objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub task: NodeId,
    pub kd: NodeId,
    /// `½‖w‖²`
    pub reg: NodeId,
    /// `½‖w − w_global‖²`, present only when the proximal term is active.
    pub prox: Option<NodeId>,
}

/// Scalar values of the loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub total: f64,
    pub task: f64,
    pub kd: f64,
    pub reg: f64,
    pub prox: f64,
}

impl LossNodes {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            total: tape.scalar(self.total),
            task: tape.scalar(self.task),
            kd: tape.scalar(self.kd),
            reg: tape.scalar(self.reg),
            prox: self.prox.map_or(0.0, |p| tape.scalar(p)),
        }
    }
}

/// `task + α·kd + γ·½‖w‖² + μ·½‖w − w_global‖²`. Terms with a zero
/// coefficient are left off the tape.
pub fn total_loss(
    tape: &mut Tape,
    task: NodeId,
    kd: NodeId,
    params: &[NodeId],
    coeffs: &LossCoeffs,
    global: Option<&ModelParams>,
) -> Result<LossNodes> {
    coeffs.validate()?;
    if params.is_empty() {
        return Err(invalid("no parameters"));
    }
    let norms: Vec<NodeId> = params.iter().map(|&p| tape.sq_norm(p)).collect();
    let sum = tape.sum(&norms)?;
    let reg = tape.scale(sum, 0.5);

    let prox = if coeffs.mu_prox > 0.0 {
        let global = global.ok_or_else(|| invalid("proximal term needs the global parameters"))?;
        if global.entries().len() != params.len() {
            return Err(invalid("global parameters do not match the model"));
        }
        let mut dists = Vec::with_capacity(params.len());
        for (&p, (_, g)) in params.iter().zip(global.entries()) {
            let anchor = tape.constant(g.clone());
            let d = tape.sub(p, anchor)?;
            dists.push(tape.sq_norm(d));
        }
        let s = tape.sum(&dists)?;
        Some(tape.scale(s, 0.5))
    } else {
        None
    };

    let mut terms = vec![task];
    if coeffs.alpha > 0.0 {
        terms.push(tape.scale(kd, coeffs.alpha));
    }
    if coeffs.gamma > 0.0 {
        terms.push(tape.scale(reg, coeffs.gamma));
    }
    if let Some(p) = prox {
        terms.push(tape.scale(p, coeffs.mu_prox));
    }
    let total = tape.sum(&terms)?;
    Ok(LossNodes {
        total,
        task,
        kd,
        reg,
        prox,
    })
}
