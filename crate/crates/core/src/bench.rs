//! Timing harness for the efficiency claim: forward wall-times of the
//! network over a range of sequence lengths, the same measurement for a
//! reference full frame-level self-attention layer, and the fitted log-log
//! slope of time versus length.

use std::time::Instant;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Matrix};
use crate::data::VideoFeatures;
use crate::network::{BitModel, NetworkError};

/// One measurement row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub num_frames: usize,
    pub seconds: f64,
}

fn random_features(rng: &mut ChaCha8Rng, t: usize, d: usize) -> VideoFeatures {
    VideoFeatures::new(
        Matrix::from_shape_fn((t, d), |_| rng.gen::<f64>() * 2.0 - 1.0),
        format!("bench_{t}"),
    )
    .expect("random features are finite")
}

/// Best-of-`repeats` forward wall time per length, eval mode.
pub fn time_network_forward(
    model: &BitModel,
    lengths: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>, NetworkError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.config().input_dim;
    let mut rows = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let features = random_features(&mut rng, t, d);
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let g = Graph::eval();
            let start = Instant::now();
            let outputs = model.forward(&g, &features, None)?;
            let elapsed = start.elapsed().as_secs_f64();
            std::hint::black_box(outputs.last_frame_probs().value()[[0, 0]]);
            best = best.min(elapsed);
        }
        rows.push(BenchRow {
            num_frames: t,
            seconds: best,
        });
    }
    Ok(rows)
}

/// A plain full self-attention layer over frames, the frame-level temporal
/// modeling the network is designed to avoid. Queries, keys and values all
/// have length `T`, so its score matrix is `T×T`; it is evaluated in row
/// chunks to bound memory while keeping the full quadratic compute.
pub struct ReferenceSelfAttention {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    width: usize,
}

impl ReferenceSelfAttention {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize| {
            let bound = (6.0 / (r + c) as f64).sqrt();
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-bound..bound))
        };
        Self {
            wq: mat(width, width),
            wk: mat(width, width),
            wv: mat(width, width),
            wo: mat(width, width),
            width,
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let q = x.dot(&self.wq);
        let k = x.dot(&self.wk);
        let v = x.dot(&self.wv);
        let scale = 1.0 / (self.width as f64).sqrt();
        let t = x.nrows();
        let chunk = 512usize;
        let mut mixed = Matrix::zeros((t, self.width));
        let kt = k.t().to_owned();
        let mut lo = 0;
        while lo < t {
            let hi = (lo + chunk).min(t);
            let mut scores = q.slice(s![lo..hi, ..]).dot(&kt);
            scores.mapv_inplace(|s| s * scale);
            for mut row in scores.rows_mut() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|s| (s - max).exp());
                let sum: f64 = row.sum();
                row.mapv_inplace(|s| s / sum);
            }
            mixed.slice_mut(s![lo..hi, ..]).assign(&scores.dot(&v));
            lo = hi;
        }
        x + &mixed.dot(&self.wo)
    }
}

/// Best-of-`repeats` wall time of the reference layer per length.
pub fn time_reference_attention(
    width: usize,
    lengths: &[usize],
    repeats: usize,
    seed: u64,
) -> Vec<BenchRow> {
    let layer = ReferenceSelfAttention::new(width, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut rows = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let x = Matrix::from_shape_fn((t, width), |_| rng.gen::<f64>() - 0.5);
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let out = layer.forward(&x);
            let elapsed = start.elapsed().as_secs_f64();
            std::hint::black_box(out[[0, 0]]);
            best = best.min(elapsed);
        }
        rows.push(BenchRow {
            num_frames: t,
            seconds: best,
        });
    }
    rows
}

/// Least-squares slope of `ln(seconds)` against `ln(frames)`.
pub fn loglog_slope(rows: &[BenchRow]) -> f64 {
    assert!(rows.len() >= 2, "slope needs at least two measurements");
    let points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.num_frames as f64).ln(), r.seconds.max(1e-12).ln()))
        .collect();
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let var: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    cov / var
}

/// CSV table of measurement rows.
pub fn rows_to_csv(label: &str, rows: &[BenchRow]) -> String {
    let mut out = String::from("variant,num_frames,seconds\n");
    for r in rows {
        out.push_str(&format!("{label},{},{:.9}\n", r.num_frames, r.seconds));
    }
    out
}

/// A minimal log-log SVG scatter/line plot of one or two measurement series.
pub fn plot_svg(series: &[(&str, &[BenchRow])]) -> String {
    let (w, h, margin) = (640.0, 420.0, 60.0);
    let mut all_x: Vec<f64> = Vec::new();
    let mut all_y: Vec<f64> = Vec::new();
    for (_, rows) in series {
        for r in *rows {
            all_x.push((r.num_frames as f64).ln());
            all_y.push(r.seconds.max(1e-12).ln());
        }
    }
    let (min_x, max_x) = bounds(&all_x);
    let (min_y, max_y) = bounds(&all_y);
    let sx = |x: f64| margin + (x - min_x) / (max_x - min_x).max(1e-9) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - min_y) / (max_y - min_y).max(1e-9) * (h - 2.0 * margin);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-size=\"14\">forward time vs sequence length (log-log)</text>\n",
        w / 2.0 - 150.0
    );
    let colors = ["#1f77b4", "#d62728", "#2ca02c"];
    for (si, (label, rows)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let mut path = String::new();
        for (i, r) in rows.iter().enumerate() {
            let x = sx((r.num_frames as f64).ln());
            let y = sy(r.seconds.max(1e-12).ln());
            path.push_str(&format!("{}{x:.1},{y:.1} ", if i == 0 { "M" } else { "L" }));
            svg.push_str(&format!(
                "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
        svg.push_str(&format!(
            "<path d=\"{path}\" stroke=\"{color}\" fill=\"none\" stroke-width=\"1.5\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            w - margin - 160.0,
            margin + 16.0 * si as f64
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">ln T</text>\n\
         <text x=\"12\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {})\">ln seconds</text>\n</svg>\n",
        w / 2.0,
        h - 20.0,
        h / 2.0,
        h / 2.0
    ));
    svg
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}
