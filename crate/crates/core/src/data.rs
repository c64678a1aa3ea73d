//! Dataset ingestion for the standard action-segmentation layout, the
//! framewise-label/segment conversions, and a synthetic generator for
//! desk-scale runs.
//!
//! Layout on disk (the public Breakfast/GTEA release convention):
//!
//! ```text
//! root/
//!   mapping.txt            # "<id> <name>" per line
//!   groundTruth/<vid>.txt  # one label name per frame
//!   features/<vid>.npy     # D×T float32, NPY v1.0
//!   splits/<split-file>    # newline-separated video names
//! ```
//!
//! Features are D×T on disk and T×D in memory.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::npy;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {path}")]
    MissingFile { path: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("npy error in {path}: {msg}")]
    Npy { path: String, msg: String },
    #[error("unknown label {name:?} in {path}")]
    UnknownLabel { name: String, path: String },
    #[error("integrity error for video {video}: {msg}")]
    Integrity { video: String, msg: String },
}

/// The closed set of action classes plus the implicit null class at id `A`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionVocabulary {
    names: Vec<String>,
}

impl ActionVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self, DataError> {
        if names.is_empty() {
            return Err(DataError::Parse {
                path: "<vocabulary>".into(),
                msg: "vocabulary must contain at least one class".into(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.is_empty() || !seen.insert(n.clone()) {
                return Err(DataError::Parse {
                    path: "<vocabulary>".into(),
                    msg: format!("class names must be unique and non-empty, offending: {n:?}"),
                });
            }
        }
        Ok(Self { names })
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    /// Id of the extra class for unassigned tokens.
    pub fn null_id(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Pre-extracted framewise features, `T×D` in memory.
#[derive(Debug, Clone)]
pub struct VideoFeatures {
    pub values: Array2<f64>,
    pub video_id: String,
}

impl VideoFeatures {
    pub fn new(values: Array2<f64>, video_id: impl Into<String>) -> Result<Self, DataError> {
        let video_id = video_id.into();
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(DataError::Integrity {
                video: video_id,
                msg: "features must be non-empty".into(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Integrity {
                video: video_id,
                msg: "features contain non-finite entries".into(),
            });
        }
        Ok(Self { values, video_id })
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

pub type FrameLabels = Vec<usize>;

/// A labeled half-open frame interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

pub type SegmentAnnotation = Vec<Segment>;

/// Ordered class sequence of a video's segments (repetitions allowed).
pub type Transcript = Vec<usize>;

/// Run-length encode framewise labels into contiguous segments.
pub fn labels_to_segments(labels: &[usize]) -> SegmentAnnotation {
    let mut segments = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            segments.push(Segment {
                class_id: labels[start],
                start,
                end: t,
            });
            start = t;
        }
    }
    segments
}

/// Expand segments back to framewise labels; exact inverse of
/// [`labels_to_segments`].
pub fn segments_to_labels(segments: &[Segment]) -> FrameLabels {
    let mut labels = Vec::new();
    for seg in segments {
        labels.extend(std::iter::repeat(seg.class_id).take(seg.len()));
    }
    labels
}

pub fn transcript_of(labels: &[usize]) -> Transcript {
    labels_to_segments(labels)
        .iter()
        .map(|s| s.class_id)
        .collect()
}

/// One loaded video: features, framewise ground truth and its transcript.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub features: VideoFeatures,
    pub labels: FrameLabels,
    pub transcript: Transcript,
}

#[derive(Debug)]
pub struct Dataset {
    pub vocab: ActionVocabulary,
    pub videos: Vec<VideoSample>,
}

/// Parse a `"<id> <name>"`-per-line mapping file.
pub fn load_vocabulary(path: &Path) -> Result<ActionVocabulary, DataError> {
    let text = read_text(path)?;
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, char::is_whitespace);
        let id: usize = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|_| DataError::Parse {
                path: path.display().to_string(),
                msg: format!("bad class id in line {line:?}"),
            })?;
        let name = parts
            .next()
            .ok_or_else(|| DataError::Parse {
                path: path.display().to_string(),
                msg: format!("missing class name in line {line:?}"),
            })?
            .trim()
            .to_string();
        entries.push((id, name));
    }
    entries.sort_by_key(|(id, _)| *id);
    for (expect, (id, _)) in entries.iter().enumerate() {
        if *id != expect {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                msg: format!("class ids must be 0-based and contiguous, found {id}"),
            });
        }
    }
    ActionVocabulary::new(entries.into_iter().map(|(_, n)| n).collect()).map_err(|e| match e {
        DataError::Parse { msg, .. } => DataError::Parse {
            path: path.display().to_string(),
            msg,
        },
        other => other,
    })
}

/// Load every video listed in `splits/<split_name>`.
///
/// Feature/label length differences of at most two frames are truncated to
/// the shorter length; anything larger is an integrity error.
pub fn load_dataset(root: &Path, split_name: &str, vocab_file: &Path) -> Result<Dataset, DataError> {
    let vocab = load_vocabulary(vocab_file)?;
    let split_path = root.join("splits").join(split_name);
    let split_text = read_text(&split_path)?;
    let mut videos = Vec::new();
    for line in split_text.lines() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        videos.push(load_video(root, name, &vocab)?);
    }
    Ok(Dataset { vocab, videos })
}

fn load_video(root: &Path, listed: &str, vocab: &ActionVocabulary) -> Result<VideoSample, DataError> {
    let stem = listed.strip_suffix(".txt").unwrap_or(listed);
    let gt_path = root.join("groundTruth").join(format!("{stem}.txt"));
    let feat_path = root.join("features").join(format!("{stem}.npy"));

    let gt_text = read_text(&gt_path)?;
    let mut labels = Vec::new();
    for line in gt_text.lines() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        let id = vocab.id_of(name).ok_or_else(|| DataError::UnknownLabel {
            name: name.to_string(),
            path: gt_path.display().to_string(),
        })?;
        labels.push(id);
    }
    if labels.is_empty() {
        return Err(DataError::Integrity {
            video: stem.to_string(),
            msg: "ground-truth file has no labels".into(),
        });
    }

    // on disk D×T; transpose to T×D
    let on_disk = npy::read_matrix(&feat_path)?;
    let mut features = on_disk.t().to_owned();

    let t_feat = features.nrows();
    let t_lab = labels.len();
    if t_feat != t_lab {
        let diff = t_feat.abs_diff(t_lab);
        if diff > 2 {
            return Err(DataError::Integrity {
                video: stem.to_string(),
                msg: format!("feature length {t_feat} vs label length {t_lab} differ by {diff} > 2 frames"),
            });
        }
        let t = t_feat.min(t_lab);
        features = features.slice(ndarray::s![..t, ..]).to_owned();
        labels.truncate(t);
    }

    let transcript = transcript_of(&labels);
    Ok(VideoSample {
        features: VideoFeatures::new(features, stem)?,
        labels,
        transcript,
    })
}

fn read_text(path: &Path) -> Result<String, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile {
            path: path.display().to_string(),
        });
    }
    fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

// ── Synthetic generation ───────────────────────────────────────────────────

/// Recipe for a synthetic dataset: class sequences from a first-order
/// Markov chain without self-transitions, per-class Gaussian prototypes,
/// isotropic frame noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub num_classes: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_segment_len: usize,
    pub max_segment_len: usize,
    pub feature_dim: usize,
    /// Scale of the isotropic Gaussian the class prototypes are drawn from.
    pub separation: f64,
    /// Standard deviation of per-frame noise added to the prototype.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let ok = self.num_videos >= 1
            && self.num_classes >= 1
            && self.min_segments >= 1
            && self.max_segments >= self.min_segments
            && self.min_segment_len >= 1
            && self.max_segment_len >= self.min_segment_len
            && self.feature_dim >= 1
            && self.noise >= 0.0
            && self.separation.is_finite()
            && self.noise.is_finite();
        if ok {
            Ok(())
        } else {
            Err(DataError::Parse {
                path: "<synthetic spec>".into(),
                msg: "all counts must be ≥ 1, ranges ordered, noise ≥ 0".into(),
            })
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate a dataset purely from the spec; identical spec, identical data.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = spec.num_classes;
    let names = (0..a).map(|i| format!("action_{i:02}")).collect();
    let vocab = ActionVocabulary::new(names)?;

    let prototypes: Vec<Vec<f64>> = (0..a)
        .map(|_| (0..spec.feature_dim).map(|_| spec.separation * normal(&mut rng)).collect())
        .collect();

    let mut videos = Vec::with_capacity(spec.num_videos);
    for v in 0..spec.num_videos {
        let num_segments = rng.gen_range(spec.min_segments..=spec.max_segments);
        let mut labels = Vec::new();
        let mut current = rng.gen_range(0..a);
        for _ in 0..num_segments {
            let len = rng.gen_range(spec.min_segment_len..=spec.max_segment_len);
            labels.extend(std::iter::repeat(current).take(len));
            if a > 1 {
                // Markov step without self-transition, uniform over the rest
                let step = rng.gen_range(0..a - 1);
                current = if step >= current { step + 1 } else { step };
            }
        }
        let t = labels.len();
        let mut values = Array2::zeros((t, spec.feature_dim));
        for (frame, &class) in labels.iter().enumerate() {
            for d in 0..spec.feature_dim {
                values[[frame, d]] = prototypes[class][d] + spec.noise * normal(&mut rng);
            }
        }
        let transcript = transcript_of(&labels);
        videos.push(VideoSample {
            features: VideoFeatures::new(values, format!("synthetic_{v:04}"))?,
            labels,
            transcript,
        });
    }
    Ok(Dataset { vocab, videos })
}

/// Write a dataset in the standard on-disk layout, splitting `train`/`test`
/// bundles (every video lands in both when `holdout` is zero).
pub fn write_dataset(dataset: &Dataset, root: &Path, holdout: usize) -> Result<(), DataError> {
    let io_err = |p: &Path| {
        let path = p.display().to_string();
        move |e: std::io::Error| DataError::Io {
            path: path.clone(),
            source: e,
        }
    };
    for sub in ["groundTruth", "features", "splits"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mapping: String = dataset
        .vocab
        .names()
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{i} {n}\n"))
        .collect();
    let mapping_path = root.join("mapping.txt");
    fs::write(&mapping_path, mapping).map_err(io_err(&mapping_path))?;

    let mut names = Vec::new();
    for video in &dataset.videos {
        let stem = &video.features.video_id;
        let gt: String = video
            .labels
            .iter()
            .map(|&id| format!("{}\n", dataset.vocab.name(id)))
            .collect();
        let gt_path = root.join("groundTruth").join(format!("{stem}.txt"));
        fs::write(&gt_path, gt).map_err(io_err(&gt_path))?;
        let feat_path = root.join("features").join(format!("{stem}.npy"));
        npy::write_matrix(&feat_path, &video.features.values.t().to_owned())?;
        names.push(format!("{stem}.txt"));
    }
    let split = |list: &[String], file: &str| -> Result<(), DataError> {
        let path = root.join("splits").join(file);
        fs::write(&path, list.join("\n") + "\n").map_err(io_err(&path))
    };
    let cut = names.len().saturating_sub(holdout);
    split(&names[..cut], "train.bundle")?;
    split(if holdout > 0 { &names[cut..] } else { &names[..] }, "test.bundle")?;
    Ok(())
}

/// Convenience for tests: where the split files live.
pub fn split_path(root: &Path, split_name: &str) -> PathBuf {
    root.join("splits").join(split_name)
}

// Shuffle an index order deterministically; used by the training loop.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocabulary_assigns_null_after_last_class() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mapping.txt");
        fs::write(&path, "0 pour\n1 stir\n").unwrap();
        let vocab = load_vocabulary(&path).unwrap();
        assert_eq!(vocab.num_classes(), 2);
        assert_eq!(vocab.null_id(), 2);
        assert_eq!(vocab.id_of("stir"), Some(1));
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let dup = dir.path().join("dup.txt");
        fs::write(&dup, "0 pour\n1 pour\n").unwrap();
        assert!(load_vocabulary(&dup).is_err());
        let gap = dir.path().join("gap.txt");
        fs::write(&gap, "0 pour\n2 stir\n").unwrap();
        assert!(load_vocabulary(&gap).is_err());
    }

    #[test]
    fn labels_to_segments_handles_singletons_and_alternation() {
        assert_eq!(
            labels_to_segments(&[0, 0, 1]),
            vec![
                Segment { class_id: 0, start: 0, end: 2 },
                Segment { class_id: 1, start: 2, end: 3 },
            ]
        );
        assert_eq!(
            labels_to_segments(&[2]),
            vec![Segment { class_id: 2, start: 0, end: 1 }]
        );
        assert_eq!(
            labels_to_segments(&[0, 1, 0]),
            vec![
                Segment { class_id: 0, start: 0, end: 1 },
                Segment { class_id: 1, start: 1, end: 2 },
                Segment { class_id: 0, start: 2, end: 3 },
            ]
        );
    }

    #[test]
    fn segments_to_labels_inverts_examples() {
        let seg = vec![
            Segment { class_id: 0, start: 0, end: 2 },
            Segment { class_id: 1, start: 2, end: 3 },
        ];
        assert_eq!(segments_to_labels(&seg), vec![0, 0, 1]);
        assert_eq!(
            segments_to_labels(&[Segment { class_id: 3, start: 0, end: 1 }]),
            vec![3]
        );
    }

    proptest! {
        #[test]
        fn segment_round_trip_is_identity(labels in proptest::collection::vec(0usize..5, 1..200)) {
            let segments = labels_to_segments(&labels);
            // invariants: contiguity, cover, non-empty, no equal neighbours
            prop_assert_eq!(segments[0].start, 0);
            prop_assert_eq!(segments.last().unwrap().end, labels.len());
            for w in segments.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
                prop_assert_ne!(w[0].class_id, w[1].class_id);
            }
            prop_assert!(segments.iter().all(|s| s.len() >= 1));
            prop_assert_eq!(segments_to_labels(&segments), labels.clone());
            // transcript matches the segment class sequence
            let transcript = transcript_of(&labels);
            let classes: Vec<usize> = segments.iter().map(|s| s.class_id).collect();
            prop_assert_eq!(transcript, classes);
        }
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_videos: 20,
            num_classes: 6,
            min_segments: 3,
            max_segments: 5,
            min_segment_len: 4,
            max_segment_len: 9,
            feature_dim: 8,
            separation: 2.0,
            noise: 0.1,
            seed: 99,
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic_and_respects_bounds() {
        let spec = small_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.videos.len(), 20);
        for (va, vb) in a.videos.iter().zip(&b.videos) {
            assert_eq!(va.labels, vb.labels);
            assert_eq!(va.features.values, vb.features.values);
            let segments = labels_to_segments(&va.labels);
            assert!(segments.len() >= spec.min_segments && segments.len() <= spec.max_segments);
            for s in &segments {
                assert!(s.len() >= spec.min_segment_len && s.len() <= spec.max_segment_len);
                assert!(s.class_id < spec.num_classes);
            }
        }
    }

    #[test]
    fn zero_noise_makes_frames_of_a_class_identical() {
        let mut spec = small_spec();
        spec.noise = 0.0;
        let data = generate_synthetic(&spec).unwrap();
        for video in &data.videos {
            for (t, &class) in video.labels.iter().enumerate() {
                let first = video.labels.iter().position(|&c| c == class).unwrap();
                assert_eq!(
                    video.features.values.row(t),
                    video.features.values.row(first),
                    "frames of one class must share the prototype exactly"
                );
            }
        }
    }

    #[test]
    fn written_dataset_loads_back_identically() {
        let spec = small_spec();
        let data = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path(), 0).unwrap();
        let back = load_dataset(dir.path(), "train.bundle", &dir.path().join("mapping.txt")).unwrap();
        assert_eq!(back.vocab, data.vocab);
        assert_eq!(back.videos.len(), data.videos.len());
        for (orig, loaded) in data.videos.iter().zip(&back.videos) {
            assert_eq!(orig.labels, loaded.labels);
            assert_eq!(orig.transcript, loaded.transcript);
            // float32 round trip
            for (a, b) in orig.features.values.iter().zip(loaded.features.values.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn length_mismatch_rules() {
        let spec = SyntheticSpec { num_videos: 1, ..small_spec() };
        let data = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path(), 0).unwrap();
        let stem = &data.videos[0].features.video_id;
        let t = data.videos[0].labels.len();

        // features longer by 2 → silently truncated to label length
        let feat_path = dir.path().join("features").join(format!("{stem}.npy"));
        let wide = Array2::from_shape_fn((spec.feature_dim, t + 2), |(d, fr)| (d + fr) as f64);
        npy::write_matrix(&feat_path, &wide).unwrap();
        let loaded = load_dataset(dir.path(), "train.bundle", &dir.path().join("mapping.txt")).unwrap();
        assert_eq!(loaded.videos[0].features.num_frames(), t);

        // difference > 2 → integrity error
        let too_wide = Array2::zeros((spec.feature_dim, t + 3));
        npy::write_matrix(&feat_path, &too_wide).unwrap();
        let err = load_dataset(dir.path(), "train.bundle", &dir.path().join("mapping.txt"));
        assert!(matches!(err, Err(DataError::Integrity { .. })));
    }

    #[test]
    fn missing_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), "train.bundle", &dir.path().join("mapping.txt"))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mapping.txt"), "got: {msg}");
    }
}
