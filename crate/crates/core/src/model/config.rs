use crate::error::{Error, Result};

/// Architecture of the policy transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    pub max_seq_len: usize,
    /// Hidden width of each expert perceptron.
    pub expert_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            d_model: 64,
            layers: 4,
            heads: 4,
            experts: 8,
            top_k: 2,
            max_seq_len: 128,
            expert_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(msg.into()));
        if self.vocab < 2 {
            return bad("vocab must be at least 2");
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.layers == 0 {
            return bad("at least one layer is required");
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return bad("top_k must be in 1..=experts");
        }
        if self.experts > u16::MAX as usize || self.layers > u16::MAX as usize {
            return bad("experts and layers must fit in 16 bits");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2");
        }
        if self.expert_hidden == 0 {
            return bad("expert_hidden must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        let base = ModelConfig::default();
        for cfg in [
            ModelConfig { heads: 3, ..base },
            ModelConfig { layers: 0, ..base },
            ModelConfig { top_k: 9, ..base },
            ModelConfig { top_k: 0, ..base },
            ModelConfig { vocab: 1, ..base },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
