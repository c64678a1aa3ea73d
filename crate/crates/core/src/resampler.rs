//! Temporal downsampling of frame features to one pooled feature per
//! predicted segment before cross-attention, plus the matching upsampling of
//! features and attention maps afterwards.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, Matrix, ParamStore, Var};
use crate::nn::{Gru, Linear};

#[derive(Debug, Error)]
pub enum ResampleError {
    #[error("pooled rows ({pooled}) do not match segment count ({segments})")]
    LengthMismatch { pooled: usize, segments: usize },
}

/// Partition of `[0, T)` into the runs of a framewise argmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    boundaries: Vec<(usize, usize)>,
    middles: Vec<usize>,
}

impl SegmentMap {
    /// Run-length partition of the per-frame argmax of `probs`.
    pub fn from_probs(probs: &Matrix) -> Self {
        let argmax: Vec<usize> = probs
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect();
        Self::from_assignments(&argmax)
    }

    pub fn from_assignments(assign: &[usize]) -> Self {
        assert!(!assign.is_empty());
        let mut boundaries = Vec::new();
        let mut start = 0;
        for t in 1..=assign.len() {
            if t == assign.len() || assign[t] != assign[start] {
                boundaries.push((start, t));
                start = t;
            }
        }
        let middles = boundaries
            .iter()
            .map(|&(s, e)| (s + e - 1) / 2)
            .collect();
        Self { boundaries, middles }
    }

    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    pub fn num_frames(&self) -> usize {
        self.boundaries.last().map(|&(_, e)| e).unwrap_or(0)
    }

    pub fn boundaries(&self) -> &[(usize, usize)] {
        &self.boundaries
    }

    pub fn middles(&self) -> &[usize] {
        &self.middles
    }

    /// Segment index containing each frame, length `T`.
    pub fn segment_of_frame(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_frames());
        for (k, &(s, e)) in self.boundaries.iter().enumerate() {
            out.extend(std::iter::repeat(k).take(e - s));
        }
        out
    }
}

/// Which normalization an attention map carries through upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Rows sum to one over time (token-to-frame attention).
    RowStochastic,
    /// Columns sum to one over tokens (frame-to-token attention).
    ColumnStochastic,
}

/// Learned pieces of the downsample/upsample path of one update block.
pub struct Resampler {
    gru: Gru,
    merge: Linear,
}

/// Pooled frame features plus their positional rows.
pub struct PooledFrameState {
    pub values: Var,    // K×H after the recurrent refinement
    pub positions: Var, // K×H, middle-frame rows of the frame positional table
}

impl Resampler {
    /// `merged_width` is the width of the previous block's combined frame
    /// state (`H+A`); the merge layer consumes `[combined | pooled]`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        hidden: usize,
        merged_width: usize,
    ) -> Self {
        Self {
            gru: Gru::new(store, rng, &format!("{prefix}.gru"), hidden),
            merge: Linear::new(
                store,
                rng,
                &format!("{prefix}.merge"),
                merged_width + hidden,
                hidden,
            ),
        }
    }

    /// Average-pool projected frame features per segment, refine the pooled
    /// sequence with the recurrent pass, and pick middle-frame positions.
    pub fn downsample(
        &self,
        g: &Graph,
        store: &ParamStore,
        projected_frames: &Var, // T×H
        frame_pos: &Var,        // T×H
        seg_map: &SegmentMap,
    ) -> PooledFrameState {
        let pooled = g.segment_mean_rows(projected_frames, seg_map.boundaries().to_vec());
        let refined = self.gru.forward(g, store, &pooled);
        let positions = g.gather_rows(frame_pos, seg_map.middles().to_vec());
        PooledFrameState {
            values: refined,
            positions,
        }
    }

    /// Copy each pooled row across its segment and merge with the previous
    /// frame state through the fully-connected layer.
    pub fn upsample(
        &self,
        g: &Graph,
        store: &ParamStore,
        pooled_attn: &Var,        // K×H
        seg_map: &SegmentMap,
        frame_state_prev: &Var,   // T×(H+A)
    ) -> Result<Var, ResampleError> {
        if pooled_attn.rows() != seg_map.len() {
            return Err(ResampleError::LengthMismatch {
                pooled: pooled_attn.rows(),
                segments: seg_map.len(),
            });
        }
        let copies = g.gather_rows(pooled_attn, seg_map.segment_of_frame());
        let stacked = g.concat_cols(frame_state_prev, &copies);
        Ok(self.merge.forward(g, store, &stacked))
    }
}

/// Expand a pooled `M×K` attention map to `M×T`. Row-stochastic maps divide
/// each copied entry by its segment length so rows still sum to one;
/// column-stochastic maps copy columns unchanged.
pub fn upsample_attention(
    g: &Graph,
    pooled_map: &Var,
    seg_map: &SegmentMap,
    kind: AttentionKind,
) -> Result<Var, ResampleError> {
    if pooled_map.cols() != seg_map.len() {
        return Err(ResampleError::LengthMismatch {
            pooled: pooled_map.cols(),
            segments: seg_map.len(),
        });
    }
    let transposed = g.transpose(pooled_map); // K×M
    let expanded = match kind {
        AttentionKind::ColumnStochastic => g.gather_rows(&transposed, seg_map.segment_of_frame()),
        AttentionKind::RowStochastic => {
            let inv_len: Vec<f64> = seg_map
                .boundaries()
                .iter()
                .map(|&(s, e)| 1.0 / (e - s) as f64)
                .collect();
            let weights = Matrix::from_shape_fn((seg_map.len(), pooled_map.rows()), |(k, _)| {
                inv_len[k]
            });
            let scaled = g.mul(&transposed, &g.constant(weights));
            g.gather_rows(&scaled, seg_map.segment_of_frame())
        }
    };
    Ok(g.transpose(&expanded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn run_lengths_boundaries_and_floor_middles() {
        // argmax pattern [A,A,B,B,B] → segments [(0,2),(2,5)], middles [0,3]
        let probs = array![
            [0.9, 0.1],
            [0.8, 0.2],
            [0.3, 0.7],
            [0.2, 0.8],
            [0.4, 0.6]
        ];
        let map = SegmentMap::from_probs(&probs);
        assert_eq!(map.boundaries(), &[(0, 2), (2, 5)]);
        assert_eq!(map.middles(), &[0, 3]);
        assert_eq!(map.segment_of_frame(), vec![0, 0, 1, 1, 1]);
    }

    #[test]
    fn segment_map_always_partitions_the_frame_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let t = rng.gen_range(1..60);
            let assign: Vec<usize> = (0..t).map(|_| rng.gen_range(0..4)).collect();
            let map = SegmentMap::from_assignments(&assign);
            assert_eq!(map.num_frames(), t);
            assert_eq!(map.boundaries()[0].0, 0);
            for w in map.boundaries().windows(2) {
                assert_eq!(w[0].1, w[1].0);
            }
            for (&(s, e), &m) in map.boundaries().iter().zip(map.middles()) {
                assert!(s < e && (s..e).contains(&m));
                assert_eq!(m, (s + e - 1) / 2);
            }
        }
    }

    fn resampler(hidden: usize, merged: usize) -> (Resampler, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let r = Resampler::new(&mut store, &mut rng, "rs", hidden, merged);
        (r, store)
    }

    #[test]
    fn pooling_single_segment_gives_global_mean_pre_recurrence() {
        let g = Graph::eval();
        let frames = g.constant(Matrix::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64));
        let map = SegmentMap::from_assignments(&[1, 1, 1, 1, 1, 1]);
        assert_eq!(map.len(), 1);
        let pooled = g.segment_mean_rows(&frames, map.boundaries().to_vec());
        for j in 0..3 {
            let mean = (0..6).map(|i| (i * 3 + j) as f64).sum::<f64>() / 6.0;
            assert_abs_diff_eq!(pooled.value()[[0, j]], mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn per_frame_segments_make_pooling_identity_pre_recurrence() {
        let g = Graph::eval();
        let src = Matrix::from_shape_fn((5, 3), |(i, j)| ((i + j) as f64).sin());
        let frames = g.constant(src.clone());
        let map = SegmentMap::from_assignments(&[0, 1, 0, 1, 0]);
        assert_eq!(map.len(), 5);
        let pooled = g.segment_mean_rows(&frames, map.boundaries().to_vec());
        assert_eq!(pooled.value(), &src);
    }

    #[test]
    fn pooled_mean_ignores_order_within_a_segment() {
        let g = Graph::eval();
        let map = SegmentMap::from_assignments(&[0, 0, 0, 1]);
        let a = Matrix::from_shape_vec((4, 2), vec![1.0, 0.0, 2.0, 5.0, 3.0, 1.0, 9.0, 9.0]).unwrap();
        let b = Matrix::from_shape_vec((4, 2), vec![3.0, 1.0, 1.0, 0.0, 2.0, 5.0, 9.0, 9.0]).unwrap();
        let pa = g.segment_mean_rows(&g.constant(a), map.boundaries().to_vec());
        let pb = g.segment_mean_rows(&g.constant(b), map.boundaries().to_vec());
        assert_eq!(pa.value(), pb.value());
    }

    #[test]
    fn downsample_positions_are_middle_frame_rows() {
        let (rs, store) = resampler(4, 6);
        let g = Graph::eval();
        let frames = g.constant(Matrix::from_shape_fn((7, 4), |(i, j)| (10 * i + j) as f64));
        let pos = g.constant(Matrix::from_shape_fn((7, 4), |(i, j)| (100 * i + j) as f64));
        let map = SegmentMap::from_assignments(&[0, 0, 1, 1, 1, 2, 2]);
        let pooled = rs.downsample(&g, &store, &frames, &pos, &map);
        assert_eq!(pooled.values.value().dim(), (3, 4));
        // middles: (0+1)/2=0, (2+4)/2=3, (5+6)/2=5
        assert_eq!(map.middles(), &[0, 3, 5]);
        for (k, &mid) in map.middles().iter().enumerate() {
            for j in 0..4 {
                assert_abs_diff_eq!(
                    pooled.positions.value()[[k, j]],
                    (100 * mid + j) as f64,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn upsample_frames_in_one_segment_with_equal_prev_rows_match() {
        let (rs, store) = resampler(3, 5);
        let g = Graph::eval();
        let map = SegmentMap::from_assignments(&[0, 0, 0, 1, 1]);
        let pooled = g.constant(Matrix::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64));
        // identical combined rows inside each segment
        let prev = g.constant(Matrix::from_shape_fn((5, 5), |(i, j)| {
            if i < 3 { j as f64 } else { (j + 7) as f64 }
        }));
        let out = rs.upsample(&g, &store, &pooled, &map, &prev).unwrap();
        for t in 1..3 {
            assert_eq!(out.value().row(t), out.value().row(0));
        }
        assert_eq!(out.value().row(4), out.value().row(3));
    }

    #[test]
    fn upsample_sensitivity_is_confined_to_the_segment() {
        let (rs, store) = resampler(3, 5);
        let map = SegmentMap::from_assignments(&[0, 0, 1, 1, 2]);
        let prev_src = Matrix::from_shape_fn((5, 5), |(i, j)| ((i * 5 + j) as f64 * 0.21).sin());
        let pooled_src = Matrix::from_shape_fn((3, 3), |(i, j)| ((i + j) as f64 * 0.3).cos());

        let run = |pooled: Matrix| {
            let g = Graph::eval();
            rs.upsample(&g, &store, &g.constant(pooled), &map, &g.constant(prev_src.clone()))
                .unwrap()
                .value()
                .clone()
        };
        let base = run(pooled_src.clone());
        let mut poked = pooled_src;
        poked[[1, 2]] += 1.0; // segment 1 covers frames 2..4
        let changed = run(poked);
        for t in 0..5 {
            let differs = base.row(t) != changed.row(t);
            assert_eq!(differs, (2..4).contains(&t), "frame {t}");
        }
    }

    #[test]
    fn upsample_rejects_mismatched_pooled_rows() {
        let (rs, store) = resampler(3, 5);
        let g = Graph::eval();
        let map = SegmentMap::from_assignments(&[0, 0, 1]);
        let pooled = g.constant(Matrix::zeros((3, 3))); // map has 2 segments
        let prev = g.constant(Matrix::zeros((3, 5)));
        assert!(matches!(
            rs.upsample(&g, &store, &pooled, &map, &prev),
            Err(ResampleError::LengthMismatch { pooled: 3, segments: 2 })
        ));
    }

    #[test]
    fn identity_segment_map_makes_attention_upsampling_identity() {
        let g = Graph::eval();
        let map = SegmentMap::from_assignments(&[0, 1, 0, 1]);
        let pooled = Matrix::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64 * 0.1).exp());
        let row = upsample_attention(&g, &g.constant(pooled.clone()), &map, AttentionKind::RowStochastic).unwrap();
        let col = upsample_attention(&g, &g.constant(pooled.clone()), &map, AttentionKind::ColumnStochastic).unwrap();
        assert_eq!(row.value(), &pooled);
        assert_eq!(col.value(), &pooled);
    }

    #[test]
    fn row_stochastic_upsampling_divides_by_segment_length() {
        // one segment of length 4, pooled row [1.0] → upsampled all 0.25
        let g = Graph::eval();
        let map = SegmentMap::from_assignments(&[0, 0, 0, 0]);
        let pooled = g.constant(Matrix::from_elem((1, 1), 1.0));
        let up = upsample_attention(&g, &pooled, &map, AttentionKind::RowStochastic).unwrap();
        assert_eq!(up.value().dim(), (1, 4));
        for v in up.value().iter() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn column_stochastic_upsampling_copies_columns() {
        // pooled column [0.7, 0.3] copied to every frame of the segment
        let g = Graph::eval();
        let map = SegmentMap::from_assignments(&[0, 0, 0]);
        let pooled = g.constant(Matrix::from_shape_vec((2, 1), vec![0.7, 0.3]).unwrap());
        let up = upsample_attention(&g, &pooled, &map, AttentionKind::ColumnStochastic).unwrap();
        assert_eq!(up.value().dim(), (2, 3));
        for t in 0..3 {
            assert_abs_diff_eq!(up.value()[[0, t]], 0.7, epsilon = 1e-12);
            assert_abs_diff_eq!(up.value()[[1, t]], 0.3, epsilon = 1e-12);
            assert_abs_diff_eq!(up.value().column(t).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn upsampling_preserves_declared_stochasticity_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let t = rng.gen_range(2..40);
            let m = rng.gen_range(1..6);
            let assign: Vec<usize> = (0..t).map(|_| rng.gen_range(0..3)).collect();
            let map = SegmentMap::from_assignments(&assign);
            let k = map.len();

            // row-stochastic pooled map
            let mut rows = Matrix::from_shape_fn((m, k), |_| rng.gen::<f64>() + 1e-3);
            for mut r in rows.rows_mut() {
                let s = r.sum();
                r.mapv_inplace(|v| v / s);
            }
            let g = Graph::eval();
            let up = upsample_attention(&g, &g.constant(rows), &map, AttentionKind::RowStochastic).unwrap();
            for r in up.value().rows() {
                assert_abs_diff_eq!(r.sum(), 1.0, epsilon = 1e-6);
            }

            // column-stochastic pooled map
            let mut cols = Matrix::from_shape_fn((m, k), |_| rng.gen::<f64>() + 1e-3);
            for j in 0..k {
                let s = cols.column(j).sum();
                cols.column_mut(j).mapv_inplace(|v| v / s);
            }
            let up = upsample_attention(&g, &g.constant(cols), &map, AttentionKind::ColumnStochastic).unwrap();
            for j in 0..t {
                assert_abs_diff_eq!(up.value().column(j).sum(), 1.0, epsilon = 1e-6);
            }
        }
    }
}
