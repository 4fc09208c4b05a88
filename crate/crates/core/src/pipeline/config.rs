use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{neighbor_budgets, MiningStage};
use crate::tensor::LRELU_SLOPE;

/// Network shape and inference settings. Everything that determines the
/// parameter layout lives here, so a config plus a seed fixes a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub sparse: bool,
    pub k: usize,
    /// Explicit `(k_self, k_cross before adjustment, k_cross after)`;
    /// derived from `k` when absent.
    pub budgets: Option<[usize; 3]>,
    /// The bypass scores are refreshed after this many blocks.
    pub adjust_layer: usize,
    pub sinkhorn_iters: usize,
    pub match_threshold: f64,
    pub mutual_check: bool,
    pub lrelu_slope: f64,
    /// Output width of the bypass embeddings f4–f7.
    pub bypass_dim: usize,
    pub lambda_init: f64,
    pub beta_init: f64,
    pub dustbin_init: f64,
    /// Inject the relative-position score into self-attention.
    pub res_self: bool,
    /// Inject the descriptor-similarity score into cross-attention.
    pub res_cross: bool,
    /// Refresh the bypass scores mid-network.
    pub adjust: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// The small model used for training on a desktop CPU.
    pub fn desk() -> Self {
        Self {
            channels: 32,
            layers: 4,
            heads: 4,
            sparse: false,
            k: 16,
            budgets: None,
            adjust_layer: 2,
            sinkhorn_iters: 10,
            match_threshold: 0.2,
            mutual_check: true,
            lrelu_slope: LRELU_SLOPE,
            bypass_dim: 8,
            lambda_init: 1.0,
            beta_init: 0.0,
            dustbin_init: 1.0,
            res_self: true,
            res_cross: true,
            adjust: true,
            seed: 0,
        }
    }

    /// Nine 4-head blocks with the refresh after the fourth and `k = 64`.
    pub fn full(channels: usize) -> Self {
        Self {
            channels,
            layers: 9,
            k: 64,
            adjust_layer: 4,
            bypass_dim: (channels / 4).max(1),
            ..Self::desk()
        }
    }

    /// Tiny network for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            channels: 8,
            layers: 2,
            heads: 2,
            k: 4,
            adjust_layer: 1,
            bypass_dim: 2,
            ..Self::desk()
        }
    }

    /// A variant with residual self-attention disabled.
    pub fn without_res_self(mut self) -> Self {
        self.res_self = false;
        self
    }

    pub fn without_res_cross(mut self) -> Self {
        self.res_cross = false;
        self
    }

    pub fn without_adjust(mut self) -> Self {
        self.adjust = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.layers == 0 {
            return fail("channels and layers must be positive".into());
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            ));
        }
        if self.adjust_layer == 0 || self.adjust_layer >= self.layers {
            return fail(format!(
                "adjust_layer {} must lie in 1..{}",
                self.adjust_layer, self.layers
            ));
        }
        if self.sinkhorn_iters == 0 {
            return fail("sinkhorn_iters must be at least 1".into());
        }
        if !(self.match_threshold > 0.0 && self.match_threshold < 1.0) {
            return fail(format!(
                "match threshold {} must lie in (0, 1)",
                self.match_threshold
            ));
        }
        if !(self.lrelu_slope > 0.0 && self.lrelu_slope < 1.0) {
            return fail(format!("LReLU slope {} must lie in (0, 1)", self.lrelu_slope));
        }
        if self.bypass_dim == 0 {
            return fail("bypass_dim must be positive".into());
        }
        if self.sparse {
            match self.budgets {
                Some(b) if b.contains(&0) => return fail("neighbor budgets must be positive".into()),
                Some(_) => {}
                None => {
                    neighbor_budgets(MiningStage::PreAdjust, self.k)?;
                }
            }
        }
        Ok(())
    }

    /// `(k_self, k_cross)` for a mining stage, before clamping to set sizes.
    pub fn stage_budgets(&self, stage: MiningStage) -> Result<(usize, usize)> {
        match self.budgets {
            Some([s, pre, post]) => Ok(match stage {
                MiningStage::PreAdjust => (s, pre),
                MiningStage::PostAdjust => (s, post),
            }),
            None => neighbor_budgets(stage, self.k),
        }
    }
}
