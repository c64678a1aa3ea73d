//! Training loop and evaluation harness: one video per optimization step,
//! matching recomputed each step from the last block's detached outputs,
//! Adam with global gradient clipping, JSON-lines metric logging.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::checkpoint::{self, CheckpointError, MetricSnapshot};
use crate::data::{labels_to_segments, shuffled_indices, DataError, Dataset};
use crate::metrics::{aggregate, evaluate_video, EvalReport, MetricsError};
use crate::network::{BitConfig, BitModel, MatchingMode, NetworkError};
use crate::supervision::{
    compute_matching, total_loss, LossBreakdown, LossConfig, MatchError, MatchingConfig,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}, video {video}: {breakdown:?}")]
    NonFiniteLoss {
        epoch: usize,
        video: String,
        breakdown: LossBreakdown,
    },
    #[error("unsupported device {0:?}; only \"cpu\" is available")]
    Device(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint vocabulary does not match the dataset vocabulary")]
    VocabMismatch,
}

/// Model hyperparameters as they appear in config files: the data-dependent
/// dimensions are filled in from the dataset at build time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub num_blocks: usize,
    pub num_tokens: usize,
    pub hidden: usize,
    pub conv_layers: usize,
    pub conv_dropout: f64,
    pub dilation_base: usize,
    pub input_tf_layers: usize,
    pub update_tf_layers: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub tf_dropout: f64,
    /// Update blocks that run pooled cross-attention (1-based update index).
    pub downsample_blocks: Vec<usize>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            num_tokens: 60,
            hidden: 64,
            conv_layers: 10,
            conv_dropout: 0.5,
            dilation_base: 2,
            input_tf_layers: 2,
            update_tf_layers: 1,
            heads: 4,
            ffn_expansion: 4,
            tf_dropout: 0.1,
            downsample_blocks: vec![2, 3],
        }
    }
}

impl ModelSettings {
    pub fn to_bit_config(
        &self,
        input_dim: usize,
        num_classes: usize,
        mode: MatchingMode,
    ) -> BitConfig {
        let downsample = (1..self.num_blocks)
            .map(|u| self.downsample_blocks.contains(&u))
            .collect();
        BitConfig {
            num_blocks: self.num_blocks,
            num_tokens: self.num_tokens,
            hidden: self.hidden,
            input_dim,
            num_classes,
            conv_layers: self.conv_layers,
            conv_dropout: self.conv_dropout,
            dilation_base: self.dilation_base,
            transformer: crate::action_branch::TransformerConfig {
                input_layers: self.input_tf_layers,
                update_layers: self.update_tf_layers,
                heads: self.heads,
                ffn_expansion: self.ffn_expansion,
                dropout: self.tf_dropout,
            },
            downsample,
            matching_mode: mode,
        }
    }
}

/// Full training configuration; JSON-serializable, CLI flags override
/// individual fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub device: String,
    /// Evaluate (and consider checkpointing) every this many epochs.
    pub eval_every: usize,
    pub data_root: PathBuf,
    pub train_split: String,
    pub val_split: Option<String>,
    pub vocab_file: Option<PathBuf>,
    pub loss: LossConfig,
    pub matching: MatchingConfig,
    pub model: ModelSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            learning_rate: 5e-4,
            grad_clip: 10.0,
            seed: 0,
            device: "cpu".into(),
            eval_every: 20,
            data_root: PathBuf::from("."),
            train_split: "train.bundle".into(),
            val_split: None,
            vocab_file: None,
            loss: LossConfig::default(),
            matching: MatchingConfig::default(),
            model: ModelSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.device != "cpu" {
            return Err(TrainError::Device(self.device.clone()));
        }
        if self.epochs < 1 || self.learning_rate <= 0.0 {
            return Err(TrainError::Network(NetworkError::Config(
                "epochs must be ≥ 1 and learning rate > 0".into(),
            )));
        }
        Ok(())
    }

    /// Stable digest of the canonical JSON form, stored in checkpoints.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub frame: f64,
    pub token: f64,
    pub cross_attention: f64,
    pub smoothing: f64,
    pub grad_norm: f64,
    pub num_tokens_last_video: usize,
    pub val_acc: Option<f64>,
}

/// Outcome of a training run: the trained model plus per-epoch logs.
pub struct TrainOutcome {
    pub model: BitModel,
    pub dataset: Dataset,
    pub logs: Vec<EpochLog>,
    /// Epoch whose evaluation was best (by accuracy), with its snapshot.
    pub best: (usize, MetricSnapshot),
}

/// Train a model on the dataset according to the configuration. The
/// matching is recomputed each step from detached outputs; gradients never
/// flow through it.
pub fn train(config: &TrainConfig, dataset: Dataset) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.videos.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let input_dim = dataset.videos[0].features.dim();
    let num_classes = dataset.vocab.num_classes();
    let bit_config = config
        .model
        .to_bit_config(input_dim, num_classes, config.matching.mode);

    let mut seed_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init_seed: u64 = seed_rng.gen();
    let shuffle_seed: u64 = seed_rng.gen();
    let dropout_seed: u64 = seed_rng.gen();

    let mut model = BitModel::new(bit_config, init_seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(dropout_seed);

    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: (usize, MetricSnapshot) = (0, MetricSnapshot::default());
    let mut best_acc = f64::NEG_INFINITY;
    let mut step: u64 = 0;

    for epoch in 1..=config.epochs {
        let order = shuffled_indices(dataset.videos.len(), &mut shuffle_rng);
        let mut epoch_losses = Vec::with_capacity(order.len());
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut grad_norm_last = 0.0;
        let mut tokens_last = 0;

        for &vi in &order {
            let video = &dataset.videos[vi];
            let per_step: u64 = dropout_rng.gen();
            let g = Graph::train(ChaCha8Rng::seed_from_u64(per_step));
            let transcript = matches!(config.matching.mode, MatchingMode::Transcript)
                .then_some(&video.transcript);
            let outputs = model.forward(&g, &video.features, transcript)?;
            let segments = labels_to_segments(&video.labels);
            let matching = compute_matching(&config.matching, &segments, &outputs)?;
            let (loss, breakdown) = total_loss(
                &g,
                &outputs,
                &matching,
                &video.labels,
                &segments,
                &config.loss,
            );
            if !breakdown.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    video: video.features.video_id.clone(),
                    breakdown,
                });
            }
            model.store_mut().zero_grads();
            g.backward(&loss, model.store_mut());
            let norm = model.store().grad_norm();
            if norm > config.grad_clip {
                model.store_mut().scale_grads(config.grad_clip / norm);
            }
            step += 1;
            model
                .store_mut()
                .adam_step(config.learning_rate, 0.9, 0.999, 1e-8, step);

            epoch_losses.push(breakdown.total);
            sums.0 += breakdown.frame;
            sums.1 += breakdown.token;
            sums.2 += breakdown.cross_attention;
            sums.3 += breakdown.smoothing;
            grad_norm_last = norm;
            tokens_last = outputs.num_tokens();
        }

        let n = epoch_losses.len() as f64;
        let mean_loss = epoch_losses.iter().sum::<f64>() / n;

        let mut val_acc = None;
        let evaluate_now = epoch % config.eval_every == 0 || epoch == config.epochs;
        if evaluate_now {
            let report = evaluate(&model, &dataset, config.matching.mode, None)?;
            val_acc = Some(report.acc);
            if report.acc > best_acc {
                best_acc = report.acc;
                best = (
                    epoch,
                    MetricSnapshot {
                        acc: report.acc,
                        edit: report.edit,
                        f1_50: report.f1["0.50"],
                        mean_loss,
                    },
                );
            }
        }

        logs.push(EpochLog {
            epoch,
            mean_loss,
            frame: sums.0 / n,
            token: sums.1 / n,
            cross_attention: sums.2 / n,
            smoothing: sums.3 / n,
            grad_norm: grad_norm_last,
            num_tokens_last_video: tokens_last,
            val_acc,
        });
    }

    Ok(TrainOutcome {
        model,
        dataset,
        logs,
        best,
    })
}

/// Run forward + predict over every video of a dataset and aggregate.
pub fn evaluate(
    model: &BitModel,
    dataset: &Dataset,
    mode: MatchingMode,
    background: Option<usize>,
) -> Result<EvalReport, TrainError> {
    let mut reports = Vec::with_capacity(dataset.videos.len());
    for video in &dataset.videos {
        let g = Graph::eval();
        let transcript = matches!(mode, MatchingMode::Transcript).then_some(&video.transcript);
        let outputs = model.forward(&g, &video.features, transcript)?;
        let pred = model.predict(&outputs);
        reports.push(evaluate_video(
            &video.features.video_id,
            &pred,
            &video.labels,
            background,
        )?);
    }
    Ok(aggregate(reports))
}

/// Evaluate a checkpointed model against a dataset, enforcing vocabulary
/// agreement.
pub fn evaluate_checkpoint(
    ckpt: &checkpoint::Checkpoint,
    dataset: &Dataset,
    background: Option<usize>,
) -> Result<EvalReport, TrainError> {
    if ckpt.manifest.vocab != dataset.vocab {
        return Err(TrainError::VocabMismatch);
    }
    evaluate(
        &ckpt.model,
        dataset,
        ckpt.manifest.config.matching_mode,
        background,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn quick_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_videos: 4,
            num_classes: 3,
            min_segments: 2,
            max_segments: 3,
            min_segment_len: 6,
            max_segment_len: 10,
            feature_dim: 6,
            separation: 4.0,
            noise: 0.2,
            seed: 5,
        }
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            eval_every: 2,
            model: ModelSettings {
                num_blocks: 2,
                num_tokens: 6,
                hidden: 8,
                conv_layers: 2,
                conv_dropout: 0.1,
                dilation_base: 2,
                input_tf_layers: 1,
                update_tf_layers: 1,
                heads: 2,
                ffn_expansion: 2,
                tf_dropout: 0.1,
                downsample_blocks: vec![],
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_reproduces_the_epoch_losses_exactly() {
        let config = quick_config();
        let a = train(&config, generate_synthetic(&quick_spec()).unwrap()).unwrap();
        let b = train(&config, generate_synthetic(&quick_spec()).unwrap()).unwrap();
        assert_eq!(a.logs.len(), b.logs.len());
        for (la, lb) in a.logs.iter().zip(&b.logs) {
            assert_eq!(la.mean_loss, lb.mean_loss);
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let config = quick_config();
        let mut other = quick_config();
        other.seed = 1;
        let a = train(&config, generate_synthetic(&quick_spec()).unwrap()).unwrap();
        let b = train(&other, generate_synthetic(&quick_spec()).unwrap()).unwrap();
        assert_ne!(a.logs[0].mean_loss, b.logs[0].mean_loss);
    }

    #[test]
    fn transcript_mode_logs_token_count_equal_to_transcript_length() {
        let mut config = quick_config();
        config.matching.mode = MatchingMode::Transcript;
        let data = generate_synthetic(&quick_spec()).unwrap();
        let transcript_lens: std::collections::HashSet<usize> =
            data.videos.iter().map(|v| v.transcript.len()).collect();
        let outcome = train(&config, data).unwrap();
        for log in &outcome.logs {
            assert!(transcript_lens.contains(&log.num_tokens_last_video));
        }
    }

    #[test]
    fn rejects_non_cpu_devices_and_empty_datasets() {
        let mut config = quick_config();
        config.device = "cuda".into();
        assert!(matches!(
            train(&config, generate_synthetic(&quick_spec()).unwrap()),
            Err(TrainError::Device(_))
        ));
        let config = quick_config();
        let data = Dataset {
            vocab: crate::data::ActionVocabulary::new(vec!["a".into()]).unwrap(),
            videos: vec![],
        };
        assert!(matches!(train(&config, data), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn config_digest_is_stable_and_sensitive() {
        let a = quick_config();
        let mut b = quick_config();
        assert_eq!(a.digest(), b.digest());
        b.learning_rate = 2e-3;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_evaluation() {
        let config = quick_config();
        let outcome = train(&config, generate_synthetic(&quick_spec()).unwrap()).unwrap();
        let before = evaluate(&outcome.model, &outcome.dataset, config.matching.mode, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint::save(
            &path,
            &outcome.model,
            &outcome.dataset.vocab,
            &config.digest(),
            config.epochs,
            MetricSnapshot::default(),
        )
        .unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        let after = evaluate_checkpoint(&loaded, &outcome.dataset, None).unwrap();
        assert_eq!(before.acc, after.acc);
        assert_eq!(before.edit, after.edit);
        assert_eq!(before.f1, after.f1);
    }

    #[test]
    fn vocab_mismatch_is_detected() {
        let config = quick_config();
        let outcome = train(&config, generate_synthetic(&quick_spec()).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint::save(
            &path,
            &outcome.model,
            &outcome.dataset.vocab,
            "d",
            1,
            MetricSnapshot::default(),
        )
        .unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        let mut other = generate_synthetic(&SyntheticSpec {
            num_classes: 4,
            ..quick_spec()
        })
        .unwrap();
        other.videos.truncate(1);
        assert!(matches!(
            evaluate_checkpoint(&loaded, &other, None),
            Err(TrainError::VocabMismatch)
        ));
    }
}
