use serde::{Deserialize, Serialize};

use super::conditions::{validate_schema, Condition};
use super::ModelError;
use crate::elements::MAX_ATOMIC_NUMBER;

/// Transformer and conditioning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_emb: usize,
    pub d_ffn_hidden: usize,
    pub dropout_rate: f64,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub condition_schema: Vec<Condition>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Rows of the formula element table (atomic numbers 1..=n).
    #[serde(default = "default_num_elements")]
    pub num_elements: usize,
    /// Rows of the stoichiometry table (counts 1..=n).
    #[serde(default = "default_stoich")]
    pub stoich_table_size: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_rope_base() -> f64 {
    10_000.0
}
fn default_num_elements() -> usize {
    MAX_ATOMIC_NUMBER as usize
}
fn default_stoich() -> usize {
    20
}
fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// 12 blocks, width 512, 16 heads, FFN width 1536, 10% dropout.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            n_heads: 16,
            d_emb: 512,
            d_ffn_hidden: 1536,
            dropout_rate: 0.1,
            vocab_size,
            max_seq_len: 128,
            condition_schema: Condition::ALL.to_vec(),
            rope_base: default_rope_base(),
            num_elements: default_num_elements(),
            stoich_table_size: default_stoich(),
            init_std: default_init_std(),
        }
    }

    /// Desk-scale model: 4 blocks, width 128, 4 heads, FFN width 384.
    pub fn tiny(vocab_size: usize) -> Self {
        Self { n_layers: 4, n_heads: 4, d_emb: 128, d_ffn_hidden: 384, ..Self::paper(vocab_size) }
    }

    pub fn d_head(&self) -> usize {
        self.d_emb / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_emb == 0 || self.d_ffn_hidden == 0 {
            return bad("all dimensions must be at least 1");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size and max_seq_len must be at least 1");
        }
        if !self.d_emb.is_multiple_of(self.n_heads) {
            return bad("d_emb must be divisible by n_heads");
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(ModelError::OddHeadDim(self.d_head()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.rope_base > 1.0) {
            return bad("rope_base must exceed 1");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        if self.num_elements == 0 || self.stoich_table_size == 0 {
            return bad("formula tables must be non-empty");
        }
        validate_schema(&self.condition_schema)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::tiny(100).validate().is_ok());
        let mut c = ModelConfig::tiny(100);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = ModelConfig::tiny(100);
        c.d_emb = 12;
        c.n_heads = 4;
        assert_eq!(c.validate(), Err(ModelError::OddHeadDim(3)));
        c = ModelConfig::tiny(100);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn serde_defaults() {
        let c = ModelConfig::tiny(50);
        let mut v = serde_json::to_value(&c).unwrap();
        v.as_object_mut().unwrap().remove("rope_base");
        let back: ModelConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }
}
