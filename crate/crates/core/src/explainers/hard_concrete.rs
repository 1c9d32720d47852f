use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{sigmoid, Mat, Tape, Var};

/// Stretched, clamped concrete distribution giving gates in `[0, 1]` with
/// point masses at 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardConcreteParams {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for HardConcreteParams {
    fn default() -> Self {
        Self { beta: 2.0 / 3.0, gamma: -0.1, zeta: 1.1 }
    }
}

impl HardConcreteParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma < 0.0 && self.zeta > 1.0) {
            return Err(Error::Config(format!(
                "stretch interval must satisfy gamma < 0 < 1 < zeta, got ({}, {})",
                self.gamma, self.zeta
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("temperature beta must lie in (0, 1], got {}", self.beta)));
        }
        Ok(())
    }

    /// `β·ln(−γ/ζ)`, the log-alpha shift giving `P(z > 0)`.
    fn offset(&self) -> f64 {
        self.beta * (-self.gamma / self.zeta).ln()
    }

    /// Probability that the gate is non-zero.
    pub fn prob_nonzero(&self, log_alpha: f64) -> f64 {
        sigmoid(log_alpha - self.offset())
    }

    /// One gate from logistic noise `u ∈ (0, 1)`.
    pub fn gate(&self, log_alpha: f64, u: f64) -> f64 {
        let s = sigmoid(((u / (1.0 - u)).ln() + log_alpha) / self.beta);
        (s * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }
}

/// Sample gates `z` and their non-zero probabilities `pt`.
pub fn hard_concrete_sample(log_alpha: &[f64], p: &HardConcreteParams, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if log_alpha.len() != u.len() {
        return Err(Error::Shape(format!("{} log-alphas but {} noise values", log_alpha.len(), u.len())));
    }
    if let Some(bad) = u.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::Data(format!("noise must lie strictly inside (0, 1), got {bad}")));
    }
    let z = log_alpha.iter().zip(u).map(|(&la, &u)| p.gate(la, u)).collect();
    let pt = log_alpha.iter().map(|&la| p.prob_nonzero(la)).collect();
    Ok((z, pt))
}

/// Tape version; `u` holds noise of the same shape as `log_alpha`.
pub fn hard_concrete_tape(tape: &mut Tape, log_alpha: Var, u: &Mat, p: &HardConcreteParams) -> (Var, Var) {
    let logit_u = tape.constant(u.mapv(|u| (u / (1.0 - u)).ln()));
    let t = tape.add(log_alpha, logit_u);
    let t = tape.scale(t, 1.0 / p.beta);
    let s = tape.sigmoid(t);
    let s = tape.scale(s, p.zeta - p.gamma);
    let s = tape.add_scalar(s, p.gamma);
    let z = tape.clamp(s, 0.0, 1.0);
    (z, prob_nonzero_tape(tape, log_alpha, p))
}

pub fn prob_nonzero_tape(tape: &mut Tape, log_alpha: Var, p: &HardConcreteParams) -> Var {
    let shifted = tape.add_scalar(log_alpha, -p.offset());
    tape.sigmoid(shifted)
}
