//! Transformer computation over the action tokens: the input transformer
//! initializes tokens from frame features through multi-head cross-attention,
//! update transformers refine them with self-attention only, and a
//! single-head cross-attention primitive exposes the token–frame alignment.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, SingleHeadAttention};

#[derive(Debug, Error)]
pub enum ActionBranchError {
    #[error("cross-attention requires a non-empty key/value sequence")]
    EmptyFrames,
}

/// Transformer hyperparameters shared by both token transformers.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TransformerConfig {
    pub input_layers: usize,
    pub update_layers: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn validate(&self, hidden: usize) -> Result<(), String> {
        if self.input_layers < 1 || self.update_layers < 1 {
            return Err("transformers need at least one layer".into());
        }
        if self.heads < 1 || hidden % self.heads != 0 {
            return Err("head count must divide the model width".into());
        }
        if self.ffn_expansion < 1 {
            return Err("feed-forward expansion must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Action-branch output of one block: refined tokens, token class
/// probabilities over `A+1` classes (null last), and their concatenation.
pub struct TokenState {
    pub refined: Var,  // M×H
    pub probs: Var,    // M×(A+1), rows stochastic
    pub combined: Var, // M×(H+A+1)
}

/// One pre-norm layer of the input transformer: cross-attention to frames,
/// self-attention among tokens, feed-forward.
struct InputLayer {
    norm_cross: LayerNorm,
    cross: MultiHeadAttention,
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Token transformer of the input block.
pub struct InputTransformer {
    layers: Vec<InputLayer>,
    final_norm: LayerNorm,
    head: Linear,
}

impl InputTransformer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        hidden: usize,
        num_classes: usize,
        config: &TransformerConfig,
    ) -> Self {
        let mut layers = Vec::with_capacity(config.input_layers);
        for i in 0..config.input_layers {
            let p = format!("{prefix}.layer{i}");
            layers.push(InputLayer {
                norm_cross: LayerNorm::new(store, &format!("{p}.norm_cross"), hidden),
                cross: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{p}.cross"),
                    hidden,
                    config.heads,
                    config.dropout,
                ),
                norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), hidden),
                self_attn: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{p}.self"),
                    hidden,
                    config.heads,
                    config.dropout,
                ),
                norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), hidden),
                ffn: FeedForward::new(
                    store,
                    rng,
                    &format!("{p}.ffn"),
                    hidden,
                    config.ffn_expansion,
                    config.dropout,
                ),
            });
        }
        Self {
            layers,
            final_norm: LayerNorm::new(store, &format!("{prefix}.final_norm"), hidden),
            head: Linear::zeros(store, &format!("{prefix}.head"), hidden, num_classes + 1),
        }
    }

    /// `tokens` are the initial token contents (usually zeros), `token_pos`
    /// the per-token positional encoding, `frames`/`frame_pos` the keyed
    /// sequence the tokens attend to.
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        tokens: &Var,
        token_pos: &Var,
        frames: &Var,
        frame_pos: &Var,
    ) -> Result<TokenState, ActionBranchError> {
        if frames.rows() == 0 {
            return Err(ActionBranchError::EmptyFrames);
        }
        let mut x = tokens.clone();
        for layer in &self.layers {
            let q = layer.norm_cross.forward(g, store, &x);
            x = g.add(&x, &layer.cross.forward(g, store, &q, token_pos, frames, frame_pos));
            let q = layer.norm_self.forward(g, store, &x);
            x = g.add(&x, &layer.self_attn.forward(g, store, &q, token_pos, &q, token_pos));
            let q = layer.norm_ffn.forward(g, store, &x);
            x = g.add(&x, &layer.ffn.forward(g, store, &q));
        }
        let refined = self.final_norm.forward(g, store, &x);
        let probs = g.softmax_rows(&self.head.forward(g, store, &refined));
        let combined = g.concat_cols(&refined, &probs);
        Ok(TokenState {
            refined,
            probs,
            combined,
        })
    }

    #[cfg(test)]
    pub(crate) fn zero_head(&self, store: &mut ParamStore) {
        let wshape = store.value(self.head.w).raw_dim();
        store.set_value(self.head.w, crate::autodiff::Matrix::zeros(wshape));
        let bshape = store.value(self.head.b).raw_dim();
        store.set_value(self.head.b, crate::autodiff::Matrix::zeros(bshape));
    }
}

struct UpdateLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Token transformer of an update block: self-attention only.
pub struct UpdateTransformer {
    layers: Vec<UpdateLayer>,
    final_norm: LayerNorm,
    head: Linear,
}

impl UpdateTransformer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        hidden: usize,
        num_classes: usize,
        config: &TransformerConfig,
    ) -> Self {
        let mut layers = Vec::with_capacity(config.update_layers);
        for i in 0..config.update_layers {
            let p = format!("{prefix}.layer{i}");
            layers.push(UpdateLayer {
                norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), hidden),
                self_attn: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{p}.self"),
                    hidden,
                    config.heads,
                    config.dropout,
                ),
                norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), hidden),
                ffn: FeedForward::new(
                    store,
                    rng,
                    &format!("{p}.ffn"),
                    hidden,
                    config.ffn_expansion,
                    config.dropout,
                ),
            });
        }
        Self {
            layers,
            final_norm: LayerNorm::new(store, &format!("{prefix}.final_norm"), hidden),
            head: Linear::zeros(store, &format!("{prefix}.head"), hidden, num_classes + 1),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, tokens: &Var, token_pos: &Var) -> TokenState {
        let mut x = tokens.clone();
        for layer in &self.layers {
            let q = layer.norm_self.forward(g, store, &x);
            x = g.add(&x, &layer.self_attn.forward(g, store, &q, token_pos, &q, token_pos));
            let q = layer.norm_ffn.forward(g, store, &x);
            x = g.add(&x, &layer.ffn.forward(g, store, &q));
        }
        let refined = self.final_norm.forward(g, store, &x);
        let probs = g.softmax_rows(&self.head.forward(g, store, &refined));
        let combined = g.concat_cols(&refined, &probs);
        TokenState {
            refined,
            probs,
            combined,
        }
    }
}

/// The shared single-head cross-attention of the update blocks. Thin alias
/// so callers name it by role.
pub type CrossAttentionSingle = SingleHeadAttention;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Matrix;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn config() -> TransformerConfig {
        TransformerConfig {
            input_layers: 2,
            update_layers: 1,
            heads: 2,
            ffn_expansion: 2,
            dropout: 0.0,
        }
    }

    fn token_inputs(m: usize, h: usize) -> (Matrix, Matrix) {
        let tokens = Matrix::from_shape_fn((m, h), |(i, j)| ((i * h + j) as f64 * 0.07).sin());
        let pos = Matrix::from_shape_fn((m, h), |(i, j)| ((i + 2 * j) as f64 * 0.11).cos());
        (tokens, pos)
    }

    #[test]
    fn input_transformer_shapes_and_stochastic_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tf = InputTransformer::new(&mut store, &mut rng, "it", 8, 4, &config());
        let g = Graph::eval();
        let (tokens, pos) = token_inputs(3, 8);
        let frames = g.constant(Matrix::from_shape_fn((10, 8), |(i, j)| ((i + j) as f64 * 0.2).sin()));
        let frame_pos = g.constant(Matrix::zeros((10, 8)));
        let out = tf
            .forward(&g, &store, &g.constant(tokens), &g.constant(pos), &frames, &frame_pos)
            .unwrap();
        assert_eq!(out.refined.value().dim(), (3, 8));
        assert_eq!(out.probs.value().dim(), (3, 5));
        assert_eq!(out.combined.value().dim(), (3, 13));
        for row in out.probs.value().rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn zeroed_head_gives_uniform_token_probabilities() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tf = InputTransformer::new(&mut store, &mut rng, "it", 8, 3, &config());
        tf.zero_head(&mut store);
        let g = Graph::eval();
        let (tokens, pos) = token_inputs(2, 8);
        let frames = g.constant(Matrix::from_elem((6, 8), 0.5));
        let frame_pos = g.constant(Matrix::zeros((6, 8)));
        let out = tf
            .forward(&g, &store, &g.constant(tokens), &g.constant(pos), &frames, &frame_pos)
            .unwrap();
        for row in out.probs.value().rows() {
            for v in row {
                assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn empty_frame_sequence_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tf = InputTransformer::new(&mut store, &mut rng, "it", 8, 3, &config());
        let g = Graph::eval();
        let (tokens, pos) = token_inputs(2, 8);
        let frames = g.constant(Matrix::zeros((0, 8)));
        let frame_pos = g.constant(Matrix::zeros((0, 8)));
        assert!(matches!(
            tf.forward(&g, &store, &g.constant(tokens), &g.constant(pos), &frames, &frame_pos),
            Err(ActionBranchError::EmptyFrames)
        ));
    }

    fn permute(m: &Matrix, perm: &[usize]) -> Matrix {
        Matrix::from_shape_fn(m.raw_dim(), |(i, j)| m[[perm[i], j]])
    }

    #[test]
    fn input_transformer_is_token_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tf = InputTransformer::new(&mut store, &mut rng, "it", 8, 3, &config());
        let (tokens, pos) = token_inputs(4, 8);
        let frames = Matrix::from_shape_fn((9, 8), |(i, j)| ((3 * i + j) as f64 * 0.05).sin());
        let perm = [3usize, 1, 0, 2];

        let run = |toks: Matrix, p: Matrix| {
            let g = Graph::eval();
            let out = tf
                .forward(
                    &g,
                    &store,
                    &g.constant(toks),
                    &g.constant(p),
                    &g.constant(frames.clone()),
                    &g.constant(Matrix::zeros((9, 8))),
                )
                .unwrap();
            out.combined.value().clone()
        };
        let base = run(tokens.clone(), pos.clone());
        let permuted = run(permute(&tokens, &perm), permute(&pos, &perm));
        for i in 0..4 {
            for j in 0..base.ncols() {
                assert_abs_diff_eq!(permuted[[i, j]], base[[perm[i], j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn update_transformer_handles_single_token_and_permutes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tf = UpdateTransformer::new(&mut store, &mut rng, "ut", 8, 3, &config());
        let g = Graph::eval();
        let (tokens, pos) = token_inputs(1, 8);
        let out = tf.forward(&g, &store, &g.constant(tokens), &g.constant(pos));
        assert!(out.combined.value().iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(out.probs.value().row(0).sum(), 1.0, epsilon = 1e-9);

        let (tokens, pos) = token_inputs(5, 8);
        let perm = [4usize, 2, 0, 1, 3];
        let run = |toks: Matrix, p: Matrix| {
            let g = Graph::eval();
            tf.forward(&g, &store, &g.constant(toks), &g.constant(p))
                .combined
                .value()
                .clone()
        };
        let base = run(tokens.clone(), pos.clone());
        let permuted = run(permute(&tokens, &perm), permute(&pos, &perm));
        for i in 0..5 {
            for j in 0..base.ncols() {
                assert_abs_diff_eq!(permuted[[i, j]], base[[perm[i], j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn update_transformer_eval_mode_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tf = UpdateTransformer::new(&mut store, &mut rng, "ut", 8, 3, &config());
        let (tokens, pos) = token_inputs(4, 8);
        let run = || {
            let g = Graph::eval();
            tf.forward(&g, &store, &g.constant(tokens.clone()), &g.constant(pos.clone()))
                .combined
                .value()
                .clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn self_attention_never_materializes_frame_sized_intermediates() {
        // token transformer cost depends on M only: feeding a frame count of
        // 4096 through the input transformer allocates nothing close to T×T
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tf = InputTransformer::new(&mut store, &mut rng, "it", 8, 3, &config());
        let g = Graph::eval();
        let (tokens, pos) = token_inputs(3, 8);
        let t = 4096;
        let frames = g.constant(Matrix::from_elem((t, 8), 0.1));
        let frame_pos = g.constant(Matrix::zeros((t, 8)));
        tf.forward(&g, &store, &g.constant(tokens), &g.constant(pos), &frames, &frame_pos)
            .unwrap();
        let audit = g.audit();
        assert!(audit.max_min_dim <= 16, "audit: {audit:?}");
        assert!(audit.max_area <= t * 16, "audit: {audit:?}");
    }
}
