use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel RGB mean subtracted before the network and added back after.
pub const DEFAULT_IMG_MEAN: [f32; 3] = [0.4488, 0.4371, 0.4040];

/// Architecture hyper-parameters of a SwinIR-style network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_rstb: usize,
    pub stl_per_rstb: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub upscale: usize,
    pub in_chans: usize,
    pub img_mean: [f32; 3],
}

impl ModelConfig {
    /// The light configuration: 4 RSTBs of 6 STLs, 6 heads, dim 60, window 8.
    pub fn light(upscale: usize) -> Self {
        Self {
            embed_dim: 60,
            num_rstb: 4,
            stl_per_rstb: 6,
            num_heads: 6,
            window_size: 8,
            mlp_ratio: 2,
            upscale,
            in_chans: 3,
            img_mean: DEFAULT_IMG_MEAN,
        }
    }

    /// A reduced configuration small enough for exhaustive numerical checks.
    pub fn toy(upscale: usize) -> Self {
        Self {
            embed_dim: 12,
            num_rstb: 1,
            stl_per_rstb: 2,
            num_heads: 2,
            window_size: 4,
            mlp_ratio: 2,
            upscale,
            in_chans: 3,
            img_mean: DEFAULT_IMG_MEAN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_rstb == 0 || self.stl_per_rstb == 0 {
            return bad("need at least one RSTB and one STL".into());
        }
        if self.window_size < 2 {
            return bad(format!("window size {} too small", self.window_size));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp ratio must be positive".into());
        }
        if !(1..=4).contains(&self.upscale) {
            return bad(format!("unsupported upscale {}", self.upscale));
        }
        if self.in_chans != 3 {
            return bad(format!("expected 3 input channels, got {}", self.in_chans));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn num_stl(&self) -> usize {
        self.num_rstb * self.stl_per_rstb
    }

    /// Cyclic shift of STL `j` within its RSTB: every second layer is shifted.
    pub fn shift_for(&self, stl: usize) -> usize {
        if stl % 2 == 1 {
            self.window_size / 2
        } else {
            0
        }
    }

    /// Tokens per window.
    pub fn window_tokens(&self) -> usize {
        self.window_size * self.window_size
    }

    /// Extents after padding up to a multiple of the window size.
    pub fn padded_extent(&self, n: usize) -> usize {
        n.div_ceil(self.window_size) * self.window_size
    }
}
