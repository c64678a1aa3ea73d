//! Convolutional temporal modeling over frames: a stack of dual dilated
//! residual layers produces refined frame features and framewise action
//! probabilities.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::nn::Linear;

#[derive(Debug, Error)]
pub enum FrameBranchError {
    #[error("non-finite activations in block {block}, layer {layer}")]
    NonFinite { block: usize, layer: usize },
    #[error("conv stage requires a non-empty input")]
    EmptyInput,
}

/// Hyperparameters of one convolution stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConvStageConfig {
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub dilation_base: usize,
}

impl ConvStageConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.layers < 1 || self.hidden < 1 {
            return Err("conv stage needs layers ≥ 1 and hidden ≥ 1".into());
        }
        if self.dilation_base < 1 {
            return Err("dilation base must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Frames farther apart than this cannot influence each other.
    pub fn receptive_radius(&self) -> usize {
        (0..self.layers)
            .map(|i| {
                let da = self.dilation_base.pow(i as u32);
                let db = self.dilation_base.pow((self.layers - 1 - i) as u32);
                da.max(db)
            })
            .sum()
    }
}

/// Frame-branch output of one block: refined features, framewise class
/// probabilities and their concatenation.
pub struct FrameState {
    pub refined: Var,  // T×H
    pub probs: Var,    // T×A, rows stochastic
    pub combined: Var, // T×(H+A)
}

struct DualDilatedLayer {
    conv_short: Linear, // 3H×H over taps at dilation base^i
    conv_long: Linear,  // 3H×H over taps at dilation base^(L−1−i)
    fuse: Linear,       // 1×1
    dilation_short: usize,
    dilation_long: usize,
}

/// One convolution stage: input projection, `layers` dual dilated residual
/// layers, and a softmax classifier head.
pub struct ConvStage {
    block: usize,
    config: ConvStageConfig,
    in_proj: Linear,
    layers: Vec<DualDilatedLayer>,
    classifier: Linear,
}

impl ConvStage {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        block: usize,
        in_dim: usize,
        num_classes: usize,
        config: ConvStageConfig,
    ) -> Self {
        let h = config.hidden;
        let in_proj = Linear::new(store, rng, &format!("{prefix}.in_proj"), in_dim, h);
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let dilation_short = config.dilation_base.pow(i as u32);
            let dilation_long = config.dilation_base.pow((config.layers - 1 - i) as u32);
            layers.push(DualDilatedLayer {
                conv_short: Linear::new(store, rng, &format!("{prefix}.layer{i}.short"), 3 * h, h),
                conv_long: Linear::new(store, rng, &format!("{prefix}.layer{i}.long"), 3 * h, h),
                fuse: Linear::new(store, rng, &format!("{prefix}.layer{i}.fuse"), h, h),
                dilation_short,
                dilation_long,
            });
        }
        let classifier = Linear::zeros(store, &format!("{prefix}.classifier"), h, num_classes);
        Self {
            block,
            config,
            in_proj,
            layers,
            classifier,
        }
    }

    pub fn config(&self) -> &ConvStageConfig {
        &self.config
    }

    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        input: &Var,
    ) -> Result<FrameState, FrameBranchError> {
        if input.rows() == 0 {
            return Err(FrameBranchError::EmptyInput);
        }
        let mut h = self.in_proj.forward(g, store, input);
        for (i, layer) in self.layers.iter().enumerate() {
            let short = layer
                .conv_short
                .forward(g, store, &g.dilated_shift_concat(&h, layer.dilation_short));
            let long = layer
                .conv_long
                .forward(g, store, &g.dilated_shift_concat(&h, layer.dilation_long));
            let mixed = g.relu(&g.add(&short, &long));
            let fused = g.dropout(&layer.fuse.forward(g, store, &mixed), self.config.dropout);
            h = g.add(&h, &fused);
            if h.value().iter().any(|v| !v.is_finite()) {
                return Err(FrameBranchError::NonFinite {
                    block: self.block,
                    layer: i,
                });
            }
        }
        let probs = g.softmax_rows(&self.classifier.forward(g, store, &h));
        let combined = g.concat_cols(&h, &probs);
        Ok(FrameState {
            refined: h,
            probs,
            combined,
        })
    }

    /// Zero the classifier head; tests use this to pin the uniform-probs
    /// contract independently of the default init.
    #[cfg(test)]
    pub(crate) fn zero_classifier(&self, store: &mut ParamStore) {
        let shape = store.value(self.classifier.w).raw_dim();
        store.set_value(self.classifier.w, crate::autodiff::Matrix::zeros(shape));
        let bshape = store.value(self.classifier.b).raw_dim();
        store.set_value(self.classifier.b, crate::autodiff::Matrix::zeros(bshape));
    }
}
