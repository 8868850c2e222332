use serde::{Deserialize, Serialize};

use super::ModelError;

fn default_rotary_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

/// Dimensions of a Llama-style decoder. Desk-scale instances shrink every
/// dimension; [`ModelConfig::llama2_7b`] gives the full-size shape used for
/// parameter accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rotary_base")]
    pub rotary_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn llama2_7b(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 32,
            d_model: 4096,
            n_heads: 32,
            d_ffn: 11008,
            vocab_size,
            max_seq_len: 4096,
            rotary_base: default_rotary_base(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.n_layers == 0 {
            return bad("n_layers must be positive".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 || self.max_seq_len == 0 {
            return bad("d_model, n_heads, d_ffn and max_seq_len must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even for rotary positions", self.head_dim()));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} must be at least 2", self.vocab_size));
        }
        if !(self.rotary_base > 0.0) || !(self.norm_eps > 0.0) {
            return bad("rotary_base and norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: 10,
            max_seq_len: 16,
            rotary_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(tiny().validate().is_ok());
        assert!(ModelConfig { n_layers: 0, ..tiny() }.validate().is_err());
        assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { vocab_size: 1, ..tiny() }.validate().is_err());
        // head_dim 1 cannot be rotated in pairs
        assert!(ModelConfig { n_heads: 8, ..tiny() }.validate().is_err());
    }

    #[test]
    fn serde_defaults() {
        let cfg: ModelConfig = serde_json::from_str(
            r#"{"n_layers":2,"d_model":16,"n_heads":2,"d_ffn":32,"vocab_size":40,"max_seq_len":8}"#,
        )
        .unwrap();
        assert_eq!(cfg.rotary_base, 10_000.0);
        assert_eq!(cfg.norm_eps, 1e-5);
    }
}
