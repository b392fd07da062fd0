use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::hash::{Digest, Hasher};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub v_prompt: usize,
    pub v_gen: usize,
    /// Generated sequence length `L`.
    pub seq_len: usize,
    pub prompt_len: usize,
    pub init_seed: u64,
    /// Reuse the generation embedding table as the output projection.
    #[serde(default)]
    pub tie_output: bool,
}

impl ModelConfig {
    /// Width of the hidden MLP layer.
    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Positions the network ever reads: the prompt plus `L - 1` generated tokens,
    /// rounded up to `prompt_len + L`.
    pub fn n_positions(&self) -> usize {
        self.prompt_len + self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.d_model,
            self.n_blocks,
            self.n_heads,
            self.v_prompt,
            self.v_gen,
            self.seq_len,
            self.prompt_len,
        ];
        if sizes.iter().any(|&s| s == 0) {
            return Err(arg("all model sizes must be at least 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(arg("d_model must be divisible by n_heads"));
        }
        Ok(())
    }

    /// Content hash of every field. Two parameter vectors may only be merged
    /// when their lineage hashes agree.
    pub fn lineage_hash(&self) -> Digest {
        let mut h = Hasher::new();
        h.str("qdcfg.policy.v1");
        for v in [
            self.d_model,
            self.n_blocks,
            self.n_heads,
            self.v_prompt,
            self.v_gen,
            self.seq_len,
            self.prompt_len,
        ] {
            h.u64(v as u64);
        }
        h.u64(self.init_seed);
        h.u64(self.tie_output as u64);
        h.finish()
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 16,
            n_blocks: 2,
            n_heads: 2,
            v_prompt: 10,
            v_gen: 18,
            seq_len: 32,
            prompt_len: 1,
            init_seed: 0,
            tie_output: false,
        }
    }
}
