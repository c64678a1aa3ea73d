//! The assembled bi-level network: an input block followed by update blocks,
//! each pairing a convolutional frame branch with a transformer action
//! branch coupled through single-head cross-attention. Also holds framewise
//! prediction generation and the exact parameter count.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_branch::{
    ActionBranchError, CrossAttentionSingle, InputTransformer, TokenState, TransformerConfig,
    UpdateTransformer,
};
use crate::autodiff::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::data::{FrameLabels, Transcript, VideoFeatures};
use crate::frame_branch::{ConvStage, ConvStageConfig, FrameBranchError, FrameState};
use crate::nn::{embedding_init, sinusoidal_table, LayerNorm, Linear};
use crate::resampler::{upsample_attention, AttentionKind, Resampler, SegmentMap};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    FrameBranch(#[from] FrameBranchError),
    #[error(transparent)]
    ActionBranch(#[from] ActionBranchError),
    #[error("transcript mode requires a transcript for every video")]
    TranscriptRequired,
    #[error("transcript entry {id} is outside the {classes}-class vocabulary")]
    TranscriptClass { id: usize, classes: usize },
    #[error("features for {video} are empty or non-finite")]
    BadFeatures { video: String },
}

/// How ground-truth segments may map onto tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchingMode {
    OneToOne,
    OneToMany,
    Transcript,
}

/// Complete architecture description. Checkpoints embed this verbatim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BitConfig {
    pub num_blocks: usize,
    pub num_tokens: usize,
    pub hidden: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub conv_layers: usize,
    pub conv_dropout: f64,
    pub dilation_base: usize,
    pub transformer: TransformerConfig,
    /// One flag per update block; pooled cross-attention where true.
    pub downsample: Vec<bool>,
    pub matching_mode: MatchingMode,
}

impl BitConfig {
    /// Paper-scale defaults: one input block plus three update blocks with
    /// downsampling in the last two.
    pub fn with_defaults(input_dim: usize, num_classes: usize) -> Self {
        Self {
            num_blocks: 4,
            num_tokens: 60,
            hidden: 64,
            input_dim,
            num_classes,
            conv_layers: 10,
            conv_dropout: 0.5,
            dilation_base: 2,
            transformer: TransformerConfig {
                input_layers: 2,
                update_layers: 1,
                heads: 4,
                ffn_expansion: 4,
                dropout: 0.1,
            },
            downsample: vec![false, true, true],
            matching_mode: MatchingMode::OneToOne,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let err = |msg: String| Err(NetworkError::Config(msg));
        if self.num_blocks < 2 {
            return err("need at least one input and one update block".into());
        }
        if self.num_tokens < 1 {
            return err("need at least one action token".into());
        }
        if self.input_dim < 1 || self.num_classes < 1 || self.hidden < 1 {
            return err("dimensions must be ≥ 1".into());
        }
        if self.downsample.len() != self.num_blocks - 1 {
            return err(format!(
                "expected {} downsample flags, got {}",
                self.num_blocks - 1,
                self.downsample.len()
            ));
        }
        self.conv_config()
            .validate()
            .map_err(NetworkError::Config)?;
        self.transformer
            .validate(self.hidden)
            .map_err(NetworkError::Config)?;
        Ok(())
    }

    pub fn conv_config(&self) -> ConvStageConfig {
        ConvStageConfig {
            layers: self.conv_layers,
            hidden: self.hidden,
            dropout: self.conv_dropout,
            dilation_base: self.dilation_base,
        }
    }
}

/// Per-block tensors of one forward pass. Attention maps exist for update
/// blocks only; the input block has no cross-attention.
pub struct BlockOutputs {
    /// `P^f_b`, `T×A`, one per block.
    pub frame_probs: Vec<Var>,
    /// `P^a_b`, `M×(A+1)`, one per block.
    pub token_probs: Vec<Var>,
    /// Token-to-frame maps `Λ^a_b`, `M×T`, one per update block.
    pub attn_token_to_frame: Vec<Var>,
    /// Frame-to-token maps `Λ^f_b`, `M×T` column-stochastic, one per update block.
    pub attn_frame_to_token: Vec<Var>,
}

impl BlockOutputs {
    pub fn num_blocks(&self) -> usize {
        self.frame_probs.len()
    }

    pub fn num_frames(&self) -> usize {
        self.frame_probs[0].rows()
    }

    pub fn num_tokens(&self) -> usize {
        self.token_probs[0].rows()
    }

    pub fn last_frame_probs(&self) -> &Var {
        self.frame_probs.last().unwrap()
    }

    pub fn last_token_probs(&self) -> &Var {
        self.token_probs.last().unwrap()
    }

    pub fn last_frame_to_token(&self) -> &Var {
        self.attn_frame_to_token.last().unwrap()
    }
}

enum TokenInit {
    /// Learned positional rows, zero-initialized token contents.
    LearnedQueries(ParamId),
    /// Class-embedding rows selected by the transcript, sinusoidal order
    /// encoding as positions.
    ClassEmbeddings(ParamId),
}

/// Projection of a combined state to the attention width, normalized so the
/// attention logits stay in range regardless of the incoming feature scale.
struct NormedProj {
    proj: Linear,
    norm: LayerNorm,
}

impl NormedProj {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Self {
            proj: Linear::new(store, rng, &format!("{prefix}.proj"), fan_in, fan_out),
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), fan_out),
        }
    }

    fn forward(&self, g: &Graph, store: &ParamStore, x: &Var) -> Var {
        self.norm.forward(g, store, &self.proj.forward(g, store, x))
    }
}

struct UpdateBlock {
    token_proj: NormedProj,
    frame_proj: NormedProj,
    token_cross: CrossAttentionSingle,
    transformer: UpdateTransformer,
    token_kv_proj: NormedProj,
    frame_cross: CrossAttentionSingle,
    resampler: Option<Resampler>,
    conv: ConvStage,
}

/// The trainable model: parameters plus wiring.
pub struct BitModel {
    config: BitConfig,
    store: ParamStore,
    input_conv: ConvStage,
    input_frame_proj: NormedProj,
    input_transformer: InputTransformer,
    token_init: TokenInit,
    update_blocks: Vec<UpdateBlock>,
}

impl BitModel {
    pub fn new(config: BitConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let a = config.num_classes;

        let input_conv = ConvStage::new(
            &mut store,
            &mut rng,
            "block1.conv",
            1,
            config.input_dim,
            a,
            config.conv_config(),
        );
        let input_frame_proj = NormedProj::new(&mut store, &mut rng, "block1.frame_proj", h + a, h);
        let input_transformer = InputTransformer::new(
            &mut store,
            &mut rng,
            "block1.transformer",
            h,
            a,
            &config.transformer,
        );
        let token_init = match config.matching_mode {
            MatchingMode::Transcript => TokenInit::ClassEmbeddings(store.register(
                "tokens.class_embed",
                embedding_init(&mut rng, a, h),
            )),
            _ => TokenInit::LearnedQueries(store.register(
                "tokens.pos",
                embedding_init(&mut rng, config.num_tokens, h),
            )),
        };

        let token_width = h + a + 1;
        let frame_width = h + a;
        let mut update_blocks = Vec::with_capacity(config.num_blocks - 1);
        for u in 0..config.num_blocks - 1 {
            let b = u + 2; // human-facing block number
            let p = format!("block{b}");
            update_blocks.push(UpdateBlock {
                token_proj: NormedProj::new(&mut store, &mut rng, &format!("{p}.token_proj"), token_width, h),
                frame_proj: NormedProj::new(&mut store, &mut rng, &format!("{p}.frame_proj"), frame_width, h),
                token_cross: CrossAttentionSingle::new(&mut store, &mut rng, &format!("{p}.token_cross"), h),
                transformer: UpdateTransformer::new(
                    &mut store,
                    &mut rng,
                    &format!("{p}.transformer"),
                    h,
                    a,
                    &config.transformer,
                ),
                token_kv_proj: NormedProj::new(&mut store, &mut rng, &format!("{p}.token_kv_proj"), token_width, h),
                frame_cross: CrossAttentionSingle::new(&mut store, &mut rng, &format!("{p}.frame_cross"), h),
                resampler: config.downsample[u].then(|| {
                    Resampler::new(&mut store, &mut rng, &format!("{p}.resampler"), h, frame_width)
                }),
                conv: ConvStage::new(
                    &mut store,
                    &mut rng,
                    &format!("{p}.conv"),
                    b,
                    h,
                    a,
                    config.conv_config(),
                ),
            });
        }
        Ok(Self {
            config,
            store,
            input_conv,
            input_frame_proj,
            input_transformer,
            token_init,
            update_blocks,
        })
    }

    pub fn config(&self) -> &BitConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Token contents and positional rows for this video.
    fn init_tokens(
        &self,
        g: &Graph,
        transcript: Option<&Transcript>,
    ) -> Result<(Var, Var), NetworkError> {
        let h = self.config.hidden;
        match (&self.token_init, self.config.matching_mode) {
            (TokenInit::ClassEmbeddings(embed), MatchingMode::Transcript) => {
                let transcript = transcript.ok_or(NetworkError::TranscriptRequired)?;
                if transcript.is_empty() {
                    return Err(NetworkError::TranscriptRequired);
                }
                for &id in transcript {
                    if id >= self.config.num_classes {
                        return Err(NetworkError::TranscriptClass {
                            id,
                            classes: self.config.num_classes,
                        });
                    }
                }
                let table = g.param(&self.store, *embed);
                let tokens = g.gather_rows(&table, transcript.clone());
                let pos = g.constant(sinusoidal_table(transcript.len(), h));
                Ok((tokens, pos))
            }
            (TokenInit::LearnedQueries(pos), _) => {
                let m = self.config.num_tokens;
                let tokens = g.constant(Matrix::zeros((m, h)));
                Ok((tokens, g.param(&self.store, *pos)))
            }
            _ => unreachable!("token init always matches the matching mode"),
        }
    }

    /// Run the full pipeline. `transcript` is required in transcript mode
    /// and ignored otherwise.
    pub fn forward(
        &self,
        g: &Graph,
        features: &VideoFeatures,
        transcript: Option<&Transcript>,
    ) -> Result<BlockOutputs, NetworkError> {
        let t_len = features.num_frames();
        if t_len == 0 || features.values.iter().any(|v| !v.is_finite()) {
            return Err(NetworkError::BadFeatures {
                video: features.video_id.clone(),
            });
        }
        let h = self.config.hidden;
        let frame_pos = g.constant(sinusoidal_table(t_len, h));
        let (token_content, token_pos) = self.init_tokens(g, transcript)?;

        // input block
        let input = g.constant(features.values.clone());
        let frame_state = self.input_conv.forward(g, &self.store, &input)?;
        let projected = self
            .input_frame_proj
            .forward(g, &self.store, &frame_state.combined);
        let token_state = self.input_transformer.forward(
            g,
            &self.store,
            &token_content,
            &token_pos,
            &projected,
            &frame_pos,
        )?;

        let mut outputs = BlockOutputs {
            frame_probs: vec![frame_state.probs.clone()],
            token_probs: vec![token_state.probs.clone()],
            attn_token_to_frame: Vec::new(),
            attn_frame_to_token: Vec::new(),
        };
        let mut prev_frame: FrameState = frame_state;
        let mut prev_tokens: TokenState = token_state;

        for block in &self.update_blocks {
            let tokens_in = block.token_proj.forward(g, &self.store, &prev_tokens.combined);
            let frames_in = block.frame_proj.forward(g, &self.store, &prev_frame.combined);

            let (token_state, frame_attn_input, map_a, map_f) = match &block.resampler {
                Some(resampler) => {
                    let seg_map = SegmentMap::from_probs(prev_frame.probs.value());
                    let pooled = resampler.downsample(g, &self.store, &frames_in, &frame_pos, &seg_map);

                    let (tokens_attn, pooled_map_a) = block.token_cross.forward(
                        g,
                        &self.store,
                        &tokens_in,
                        &token_pos,
                        &pooled.values,
                        &pooled.positions,
                    );
                    let map_a = upsample_attention(g, &pooled_map_a, &seg_map, AttentionKind::RowStochastic)
                        .expect("pooled map width equals segment count");

                    let token_state = block.transformer.forward(g, &self.store, &tokens_attn, &token_pos);
                    let token_kv = block.token_kv_proj.forward(g, &self.store, &token_state.combined);

                    let (pooled_frames_attn, frame_query_map) = block.frame_cross.forward(
                        g,
                        &self.store,
                        &pooled.values,
                        &pooled.positions,
                        &token_kv,
                        &token_pos,
                    );
                    let pooled_map_f = g.transpose(&frame_query_map); // M×K, columns stochastic
                    let map_f =
                        upsample_attention(g, &pooled_map_f, &seg_map, AttentionKind::ColumnStochastic)
                            .expect("pooled map width equals segment count");

                    let merged = resampler
                        .upsample(g, &self.store, &pooled_frames_attn, &seg_map, &prev_frame.combined)
                        .expect("pooled rows equal segment count");
                    (token_state, merged, map_a, map_f)
                }
                None => {
                    let (tokens_attn, map_a) = block.token_cross.forward(
                        g,
                        &self.store,
                        &tokens_in,
                        &token_pos,
                        &frames_in,
                        &frame_pos,
                    );
                    let token_state = block.transformer.forward(g, &self.store, &tokens_attn, &token_pos);
                    let token_kv = block.token_kv_proj.forward(g, &self.store, &token_state.combined);
                    let (frames_attn, frame_query_map) = block.frame_cross.forward(
                        g,
                        &self.store,
                        &frames_in,
                        &frame_pos,
                        &token_kv,
                        &token_pos,
                    );
                    let map_f = g.transpose(&frame_query_map);
                    (token_state, frames_attn, map_a, map_f)
                }
            };

            let frame_state = block.conv.forward(g, &self.store, &frame_attn_input)?;
            outputs.frame_probs.push(frame_state.probs.clone());
            outputs.token_probs.push(token_state.probs.clone());
            outputs.attn_token_to_frame.push(map_a);
            outputs.attn_frame_to_token.push(map_f);
            prev_frame = frame_state;
            prev_tokens = token_state;
        }
        Ok(outputs)
    }

    /// Framewise prediction: the mean of the frame-branch distribution and
    /// the attention-mixed token-class distribution, with null-classified
    /// tokens masked out of the mixing. Falls back to the frame branch alone
    /// when every token is null.
    pub fn predict(&self, outputs: &BlockOutputs) -> FrameLabels {
        let frame_dist = outputs.last_frame_probs().value();
        let token_probs = outputs.last_token_probs().value();
        let attn = outputs.last_frame_to_token().value();
        predict_from_distributions(frame_dist, token_probs, attn, self.config.num_classes)
    }
}

/// The prediction rule, exposed for direct testing.
pub fn predict_from_distributions(
    frame_dist: &Matrix,
    token_probs: &Matrix,
    attn_frame_to_token: &Matrix,
    num_classes: usize,
) -> FrameLabels {
    let t_len = frame_dist.nrows();
    let m = token_probs.nrows();
    let null_id = num_classes;

    // token m is masked iff its argmax class is null
    let keep: Vec<bool> = (0..m)
        .map(|i| {
            let row = token_probs.row(i);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(c, _)| c)
                .unwrap();
            best != null_id
        })
        .collect();
    let any_kept = keep.iter().any(|&k| k);

    // per-token class distribution over the real classes, renormalized
    let mut token_class = Array2::zeros((m, num_classes));
    for i in 0..m {
        let row = token_probs.row(i);
        let real_mass: f64 = row.iter().take(num_classes).sum();
        if real_mass > 0.0 {
            for c in 0..num_classes {
                token_class[[i, c]] = row[c] / real_mass;
            }
        }
    }

    let mut labels = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut mixed = vec![0.0; num_classes];
        if any_kept {
            let mut column_mass = 0.0;
            for i in 0..m {
                if keep[i] {
                    column_mass += attn_frame_to_token[[i, t]];
                }
            }
            if column_mass > 0.0 {
                for i in 0..m {
                    if keep[i] {
                        let w = attn_frame_to_token[[i, t]] / column_mass;
                        for c in 0..num_classes {
                            mixed[c] += w * token_class[[i, c]];
                        }
                    }
                }
            }
        }
        let best = (0..num_classes)
            .map(|c| {
                let score = if any_kept {
                    0.5 * (frame_dist[[t, c]] + mixed[c])
                } else {
                    frame_dist[[t, c]]
                };
                (c, score)
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(c, _)| c)
            .unwrap();
        labels.push(best);
    }
    labels
}

/// Exact learnable-scalar count for a configuration.
pub fn parameter_count(config: &BitConfig) -> Result<usize, NetworkError> {
    Ok(BitModel::new(config.clone(), 0)?.num_parameters())
}
