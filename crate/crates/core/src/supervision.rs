//! Token–segment matching and the four training losses.
//!
//! The matching cost combines a token's class probability with a soft IoU
//! between its attention row and the segment's frames. One-to-one matching
//! is solved exactly with the Hungarian algorithm; one-to-many matching
//! groups segments by class first and solves the group-level assignment,
//! which guarantees per-token class purity.

use ndarray::Array2;
use thiserror::Error;

use crate::autodiff::{Graph, Matrix, Var};
use crate::data::{FrameLabels, Segment, SegmentAnnotation};
use crate::network::{BlockOutputs, MatchingMode};

/// Floor applied to every probability/attention entry before a logarithm.
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("{needed} segments (or classes) exceed the {available} available tokens")]
    Capacity { needed: usize, available: usize },
    #[error("cost matrix must be non-empty")]
    Empty,
}

/// Matching regime plus the cost trade-off `beta`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MatchingConfig {
    pub mode: MatchingMode,
    pub beta: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            mode: MatchingMode::OneToOne,
            beta: 1.0,
        }
    }
}

/// Smoothing-loss weight and truncation threshold.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub smoothing_weight: f64,
    pub smoothing_tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smoothing_weight: 0.15,
            smoothing_tau: 4.0,
        }
    }
}

/// An assignment of the `N` ground-truth segments to token indices, plus the
/// set of tokens left unmatched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    pub pi_star: Vec<usize>,
    pub null_set: Vec<usize>,
}

impl Matching {
    fn from_assignment(pi_star: Vec<usize>, num_tokens: usize) -> Self {
        let mut used = vec![false; num_tokens];
        for &m in &pi_star {
            used[m] = true;
        }
        let null_set = (0..num_tokens).filter(|&m| !used[m]).collect();
        Self { pi_star, null_set }
    }

    /// The fixed identity matching of transcript mode.
    pub fn identity(n: usize) -> Self {
        Self {
            pi_star: (0..n).collect(),
            null_set: Vec::new(),
        }
    }
}

/// Matching cost `S(n, m)`: negated class probability minus `beta` times the
/// soft IoU between token `m`'s attention row and segment `n`'s frames.
/// Computed on detached values; gradients never flow through the matching.
pub fn match_cost(
    segments: &[Segment],
    token_probs: &Matrix,
    attn_frame_to_token: &Matrix,
    beta: f64,
) -> Matrix {
    let n = segments.len();
    let m = token_probs.nrows();
    let t_len = attn_frame_to_token.ncols();
    let mut cost = Array2::zeros((n, m));
    for (i, seg) in segments.iter().enumerate() {
        for j in 0..m {
            let inside: f64 = (seg.start..seg.end)
                .map(|t| attn_frame_to_token[[j, t]])
                .sum();
            // min(Λ + 1, 1) = 1 inside the segment; Λ entries are ≤ 1 outside
            let mut denom = seg.len() as f64;
            for t in 0..t_len {
                if t < seg.start || t >= seg.end {
                    denom += attn_frame_to_token[[j, t]].min(1.0);
                }
            }
            let soft_iou = inside / denom;
            cost[[i, j]] = -token_probs[[j, seg.class_id]] - beta * soft_iou;
        }
    }
    cost
}

/// Exact minimum-cost assignment of rows to distinct columns, `N ≤ M`.
/// Shortest-augmenting-path formulation with potentials, O(N·M²).
pub fn hungarian(cost: &Matrix) -> Result<Vec<usize>, MatchError> {
    let n = cost.nrows();
    let m = cost.ncols();
    if n == 0 || m == 0 {
        return Err(MatchError::Empty);
    }
    if n > m {
        return Err(MatchError::Capacity {
            needed: n,
            available: m,
        });
    }
    const UNASSIGNED: usize = usize::MAX;
    // 1-based rows; column 0 is the virtual root
    let mut row_potential = vec![0.0; n + 1];
    let mut col_potential = vec![0.0; m + 1];
    let mut col_match = vec![UNASSIGNED; m + 1]; // row currently assigned to column
    let mut col_prev = vec![0usize; m + 1];

    for row in 1..=n {
        col_match[0] = row;
        let mut j0 = 0usize;
        let mut min_dist = vec![f64::INFINITY; m + 1];
        let mut visited = vec![false; m + 1];
        loop {
            visited[j0] = true;
            let i0 = col_match[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if visited[j] {
                    continue;
                }
                let reduced = cost[[i0 - 1, j - 1]] - row_potential[i0] - col_potential[j];
                if reduced < min_dist[j] {
                    min_dist[j] = reduced;
                    col_prev[j] = j0;
                }
                if min_dist[j] < delta {
                    delta = min_dist[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if visited[j] {
                    row_potential[col_match[j]] += delta;
                    col_potential[j] -= delta;
                } else {
                    min_dist[j] -= delta;
                }
            }
            j0 = j1;
            if col_match[j0] == UNASSIGNED {
                break;
            }
        }
        // augment along the alternating path
        while j0 != 0 {
            let j1 = col_prev[j0];
            col_match[j0] = col_match[j1];
            j0 = j1;
        }
    }

    let mut assignment = vec![UNASSIGNED; n];
    for j in 1..=m {
        if col_match[j] != UNASSIGNED && col_match[j] != 0 {
            assignment[col_match[j] - 1] = j - 1;
        }
    }
    debug_assert!(assignment.iter().all(|&a| a != UNASSIGNED));
    Ok(assignment)
}

/// Optimal one-to-one matching: distinct token per segment.
pub fn match_one_to_one(cost: &Matrix) -> Result<Matching, MatchError> {
    let assignment = hungarian(cost)?;
    Ok(Matching::from_assignment(assignment, cost.ncols()))
}

/// Class-pure one-to-many matching: segments are grouped by ground-truth
/// class, the group-level cost is the sum of member costs, and groups are
/// assigned to distinct tokens optimally.
pub fn match_one_to_many(cost: &Matrix, classes: &[usize]) -> Result<Matching, MatchError> {
    assert_eq!(cost.nrows(), classes.len());
    let m = cost.ncols();
    let mut group_of_class: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &c) in classes.iter().enumerate() {
        match group_of_class.iter_mut().find(|(class, _)| *class == c) {
            Some((_, members)) => members.push(i),
            None => group_of_class.push((c, vec![i])),
        }
    }
    let g = group_of_class.len();
    if g > m {
        return Err(MatchError::Capacity {
            needed: g,
            available: m,
        });
    }
    let mut group_cost = Array2::zeros((g, m));
    for (gi, (_, members)) in group_of_class.iter().enumerate() {
        for j in 0..m {
            group_cost[[gi, j]] = members.iter().map(|&i| cost[[i, j]]).sum();
        }
    }
    let group_assignment = hungarian(&group_cost)?;
    let mut pi_star = vec![0usize; classes.len()];
    for (gi, (_, members)) in group_of_class.iter().enumerate() {
        for &i in members {
            pi_star[i] = group_assignment[gi];
        }
    }
    Ok(Matching::from_assignment(pi_star, m))
}

/// Compute the matching dictated by the configuration from the last block's
/// detached outputs.
pub fn compute_matching(
    config: &MatchingConfig,
    segments: &[Segment],
    outputs: &BlockOutputs,
) -> Result<Matching, MatchError> {
    match config.mode {
        MatchingMode::Transcript => Ok(Matching::identity(segments.len())),
        MatchingMode::OneToOne => {
            let cost = match_cost(
                segments,
                outputs.last_token_probs().value(),
                outputs.last_frame_to_token().value(),
                config.beta,
            );
            match_one_to_one(&cost)
        }
        MatchingMode::OneToMany => {
            let cost = match_cost(
                segments,
                outputs.last_token_probs().value(),
                outputs.last_frame_to_token().value(),
                config.beta,
            );
            let classes: Vec<usize> = segments.iter().map(|s| s.class_id).collect();
            match_one_to_many(&cost, &classes)
        }
    }
}

// ── Losses ─────────────────────────────────────────────────────────────────

/// Framewise cross-entropy summed over blocks, averaged over frames.
pub fn frame_loss(g: &Graph, outputs: &BlockOutputs, labels: &FrameLabels) -> Var {
    let t_len = outputs.num_frames();
    assert_eq!(labels.len(), t_len);
    let picks: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    let mut total: Option<Var> = None;
    for probs in &outputs.frame_probs {
        let term = g.pick_neg_log_sum(probs, picks.clone(), 1.0 / t_len as f64, LOG_FLOOR);
        total = Some(match total {
            Some(acc) => g.add(&acc, &term),
            None => term,
        });
    }
    total.unwrap()
}

/// Token classification loss: matched tokens toward their segment classes
/// (one term per segment, so shared tokens accumulate), unmatched tokens
/// toward the null class. Summed over blocks, averaged over tokens.
pub fn token_loss(
    g: &Graph,
    outputs: &BlockOutputs,
    matching: &Matching,
    segments: &[Segment],
) -> Var {
    assert_eq!(matching.pi_star.len(), segments.len());
    let m = outputs.num_tokens();
    let null_id = outputs.token_probs[0].cols() - 1;
    let mut picks: Vec<(usize, usize)> = matching
        .pi_star
        .iter()
        .zip(segments)
        .map(|(&token, seg)| (token, seg.class_id))
        .collect();
    picks.extend(matching.null_set.iter().map(|&token| (token, null_id)));
    let mut total: Option<Var> = None;
    for probs in &outputs.token_probs {
        let term = g.pick_neg_log_sum(probs, picks.clone(), 1.0 / m as f64, LOG_FLOOR);
        total = Some(match total {
            Some(acc) => g.add(&acc, &term),
            None => term,
        });
    }
    total.unwrap()
}

/// Alignment loss over both cross-attention maps of every update block:
/// each segment's frames must attend to (and be attended by) its matched
/// token. Null tokens are unconstrained.
pub fn cross_attention_loss(
    g: &Graph,
    outputs: &BlockOutputs,
    matching: &Matching,
    segments: &[Segment],
) -> Var {
    let t_len = outputs.num_frames();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (&token, seg) in matching.pi_star.iter().zip(segments) {
        for t in seg.start..seg.end {
            picks.push((token, t));
        }
    }
    let mut total = g.constant(Matrix::zeros((1, 1)));
    for (map_a, map_f) in outputs
        .attn_token_to_frame
        .iter()
        .zip(&outputs.attn_frame_to_token)
    {
        let scale = 1.0 / t_len as f64;
        let term_a = g.pick_neg_log_sum(map_a, picks.clone(), scale, LOG_FLOOR);
        let term_f = g.pick_neg_log_sum(map_f, picks.clone(), scale, LOG_FLOOR);
        total = g.add(&total, &g.add(&term_a, &term_f));
    }
    total
}

/// Truncated mean-squared log-difference along the temporal axis. `weight`
/// multiplies only the framewise-probability term.
pub fn smoothing_loss(g: &Graph, outputs: &BlockOutputs, config: &LossConfig) -> Var {
    let tau = config.smoothing_tau;
    let mut total = g.constant(Matrix::zeros((1, 1)));
    for probs in &outputs.frame_probs {
        let logs = g.ln_clamped(probs, LOG_FLOOR);
        let h = g.truncated_sq_mean_rowdiff(&logs, tau);
        total = g.add(&total, &g.scale(&h, config.smoothing_weight));
    }
    for map in outputs
        .attn_token_to_frame
        .iter()
        .chain(&outputs.attn_frame_to_token)
    {
        // temporal axis is the column axis of an M×T map
        let logs = g.ln_clamped(&g.transpose(map), LOG_FLOOR);
        let h = g.truncated_sq_mean_rowdiff(&logs, tau);
        total = g.add(&total, &h);
    }
    total
}

/// Loss component values, for logging.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    pub frame: f64,
    pub token: f64,
    pub cross_attention: f64,
    pub smoothing: f64,
    pub total: f64,
}

/// Sum of the four losses, plus the detached component values.
pub fn total_loss(
    g: &Graph,
    outputs: &BlockOutputs,
    matching: &Matching,
    labels: &FrameLabels,
    segments: &SegmentAnnotation,
    loss_config: &LossConfig,
) -> (Var, LossBreakdown) {
    let l_f = frame_loss(g, outputs, labels);
    let l_a = token_loss(g, outputs, matching, segments);
    let l_c = cross_attention_loss(g, outputs, matching, segments);
    let l_ts = smoothing_loss(g, outputs, loss_config);
    let total = g.add(&g.add(&l_a, &l_f), &g.add(&l_c, &l_ts));
    let breakdown = LossBreakdown {
        frame: l_f.scalar(),
        token: l_a.scalar(),
        cross_attention: l_c.scalar(),
        smoothing: l_ts.scalar(),
        total: total.scalar(),
    };
    (total, breakdown)
}
