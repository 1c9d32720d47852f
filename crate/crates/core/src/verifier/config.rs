use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierConfig {
    /// Hop count `L`: transformer sub-layers followed by one graph-attention step.
    pub layers: usize,
    pub sublayers_per_hop: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Class-capsule dimension.
    pub capsule_dim: usize,
    pub routing_iters: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            sublayers_per_hop: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            capsule_dim: 10,
            routing_iters: 3,
            num_classes: 2,
            dropout: 0.1,
            max_len: 64,
        }
    }
}

impl VerifierConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers < 1 {
            return fail("verifier.layers must be at least 1");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("verifier.d_model must be divisible by verifier.n_heads");
        }
        if self.routing_iters < 1 || self.num_classes < 2 || self.capsule_dim < 1 {
            return fail("verifier capsule settings are invalid");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("verifier.dropout must lie in [0, 1)");
        }
        if self.max_len < 5 {
            return fail("verifier.max_len is too small");
        }
        Ok(())
    }
}
