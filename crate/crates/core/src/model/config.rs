use serde::{Deserialize, Serialize};

use crate::task::Task;

use super::ModelError;

/// Architecture hyper-parameters. Encoder and decoder have the same depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_prompt_per_task: usize,
    pub n_tasks: usize,
    pub whole_word_capacity: usize,
    pub init_std: f64,
}

impl ModelConfig {
    /// Small default that trains on a laptop CPU.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            max_seq_len: 1024,
            n_prompt_per_task: 3,
            n_tasks: Task::COUNT,
            whole_word_capacity: 256,
            init_std: 0.02,
        }
    }

    /// The T5-small sized backbone (6 layers, 8 heads, width 512).
    pub fn t5_small(vocab_size: usize) -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            d_model: 512,
            d_ff: 2048,
            vocab_size,
            max_seq_len: 512,
            n_prompt_per_task: 3,
            n_tasks: Task::COUNT,
            whole_word_capacity: 512,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers and d_ff must be positive".into());
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        if self.n_tasks != Task::COUNT {
            return bad(format!("n_tasks must be {}", Task::COUNT));
        }
        if self.n_prompt_per_task == 0 {
            return bad("n_prompt_per_task must be positive".into());
        }
        if self.max_seq_len <= self.n_prompt_per_task {
            return bad("max_seq_len must exceed the prompt length".into());
        }
        if self.whole_word_capacity == 0 {
            return bad("whole_word_capacity must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std must be finite and non-negative".into());
        }
        Ok(())
    }
}
