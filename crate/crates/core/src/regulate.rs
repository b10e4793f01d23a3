//! Gradient surgery on flattened encoder parameters: anchor maintenance,
//! the drift direction, its projection onto the orthogonal complement of
//! the live task gradient, the controlled update, and SGD with momentum.
//!
//! The controlled update is applied to the raw gradient before momentum
//! accumulation, so `⟨g̃, g⟩ = ‖g‖²` holds for the step it modifies.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numerics::dot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegulationConfig {
    pub beta: f64,
    /// Per-epoch EMA decay `ρ` of the anchor.
    pub anchor_decay: f64,
    /// Guard in the projector denominator `‖g‖² + ε`.
    pub eps: f64,
}

impl Default for RegulationConfig {
    fn default() -> Self {
        RegulationConfig {
            beta: 0.9,
            anchor_decay: 0.99,
            eps: 1e-30,
        }
    }
}

impl RegulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!("regulation.beta must be >= 0, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.anchor_decay) {
            return Err(invalid(format!(
                "regulation.anchor_decay must lie in [0, 1), got {}",
                self.anchor_decay
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(invalid(format!("regulation.eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: 0.002, momentum: 0.9 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("optimizer.lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("optimizer.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape(format!("{what}: lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// `anchor ← ρ·anchor + (1 − ρ)·w`.
pub fn update_anchor(anchor: &mut [f64], w: &[f64], rho: f64) -> Result<()> {
    same_len(anchor, w, "update_anchor")?;
    for (a, x) in anchor.iter_mut().zip(w) {
        *a = rho * *a + (1.0 - rho) * x;
    }
    Ok(())
}

/// `d = w − anchor`.
pub fn anchor_direction(w: &[f64], anchor: &[f64]) -> Result<Vec<f64>> {
    same_len(w, anchor, "anchor_direction")?;
    Ok(w.iter().zip(anchor).map(|(x, a)| x - a).collect())
}

/// `d − g·⟨g, d⟩/(‖g‖² + ε)`, i.e. `P⊥(g)·d` without forming the projector.
pub fn project_orthogonal(d: &[f64], g: &[f64], eps: f64) -> Result<Vec<f64>> {
    same_len(d, g, "project_orthogonal")?;
    let coef = dot(g, d) / (dot(g, g) + eps);
    Ok(d.iter().zip(g).map(|(di, gi)| di - coef * gi).collect())
}

/// `g̃ = g + β·gate·d⊥`. A closed gate returns `g` untouched.
pub fn controlled_update(g: &[f64], gate: bool, d_perp: &[f64], beta: f64) -> Result<Vec<f64>> {
    same_len(g, d_perp, "controlled_update")?;
    if !gate || beta == 0.0 {
        return Ok(g.to_vec());
    }
    Ok(g.iter().zip(d_perp).map(|(gi, di)| gi + beta * di).collect())
}

/// `v ← μ·v + g̃`, then `w ← w − η·v`.
pub fn sgd_momentum_step(w: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) -> Result<()> {
    same_len(w, velocity, "sgd_momentum_step")?;
    same_len(w, grad, "sgd_momentum_step")?;
    for ((wi, vi), gi) in w.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *vi = momentum * *vi + gi;
        *wi -= lr * *vi;
    }
    Ok(())
}
