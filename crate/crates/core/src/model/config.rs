use serde::{Deserialize, Serialize};

use crate::embedding::PositionalKind;
use crate::error::{Error, Result};

/// Number of scene condition classes (4 shapes x 4 motions).
pub const NUM_CONDITIONS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub patch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Condition tokens per scene class (`L_text`).
    pub cond_tokens: usize,
    pub time_embed_dim: usize,
    pub positional: PositionalKind,
    pub rope_theta: f64,
    pub lora_rank: usize,
    pub lora_gamma: f64,
    pub ln_eps: f64,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            depth: 4,
            dim: 64,
            heads: 4,
            ffn_mult: 4,
            patch: 4,
            frames: 8,
            height: 16,
            width: 16,
            cond_tokens: 4,
            time_embed_dim: 64,
            positional: PositionalKind::AbsoluteSinusoidal,
            rope_theta: 10_000.0,
            lora_rank: 128,
            lora_gamma: 1.0,
            ln_eps: 1e-6,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if !(self.dim / self.heads).is_multiple_of(2) {
            return fail(format!("head width {} must be even", self.dim / self.heads));
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return fail(format!("frame {}x{} not divisible by patch {}", self.height, self.width, self.patch));
        }
        if self.frames == 0 || self.ffn_mult == 0 {
            return fail("frames and ffn_mult must be positive".into());
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return fail(format!("time_embed_dim {} must be even", self.time_embed_dim));
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be positive".into());
        }
        if !(self.ln_eps > 0.0) || !(self.rope_theta > 0.0) || !self.lora_gamma.is_finite() {
            return fail("ln_eps and rope_theta must be positive, lora_gamma finite".into());
        }
        Ok(())
    }

    /// Video tokens per domain: `frames · (H/patch) · (W/patch)`.
    pub fn video_len(&self) -> usize {
        self.frames * (self.height / self.patch) * (self.width / self.patch)
    }

    /// Values per RGB patch token.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Adapter rank actually used: the configured rank when it is below the
    /// model width, otherwise half the width.
    pub fn effective_lora_rank(&self) -> usize {
        if self.lora_rank < self.dim {
            self.lora_rank
        } else {
            (self.dim / 2).max(1)
        }
    }
}
