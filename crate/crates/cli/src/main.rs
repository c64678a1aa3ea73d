//! Command-line harness: train, evaluate, predict, synthesize datasets and
//! benchmark forward timing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bitseg::autodiff::Graph;
use bitseg::bench::{
    loglog_slope, plot_svg, rows_to_csv, time_network_forward, time_reference_attention,
};
use bitseg::checkpoint::{self, MetricSnapshot};
use bitseg::data::{
    self, generate_synthetic, load_dataset, SyntheticSpec, VideoFeatures,
};
use bitseg::network::{BitModel, MatchingMode};
use bitseg::npy;
use bitseg::train::{self, TrainConfig};

#[derive(Parser)]
#[command(
    name = "bitseg",
    about = "Bi-level temporal action segmentation: training, evaluation and benchmarking",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a JSON-lines metric log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Predict framewise labels for one features file.
    Predict(PredictArgs),
    /// Generate a synthetic dataset in the standard layout.
    Synth(SynthArgs),
    /// Measure forward wall-time across sequence lengths.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split file name under <data>/splits/.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint output path; the metric log goes to <out>.log.jsonl.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test.bundle")]
    split: String,
    /// Write the JSON report here (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-video rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Class name excluded from Edit/F1 as background.
    #[arg(long)]
    background: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Features file (NPY, D×T).
    #[arg(long)]
    features: PathBuf,
    /// Transcript file (one class name per line); required by
    /// transcript-mode checkpoints.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Output label file, one class name per line.
    #[arg(long, default_value = "labels.txt")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file with the synthetic spec; flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// How many videos go only into test.bundle instead of train.bundle.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint to time; a freshly initialized default model is used when
    /// omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000,8000")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Also time the reference full frame-level self-attention layer.
    #[arg(long, default_value_t = true)]
    reference: bool,
    /// Output directory for bench.csv and bench.svg.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Predict(args) => run_predict(args),
        Command::Synth(args) => run_synth(args),
        Command::Bench(args) => run_bench(args),
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(data) = args.data {
        config.data_root = data;
    }
    if let Some(split) = args.split {
        config.train_split = split;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }

    let vocab_file = config
        .vocab_file
        .clone()
        .unwrap_or_else(|| config.data_root.join("mapping.txt"));
    let dataset = load_dataset(&config.data_root, &config.train_split, &vocab_file)?;
    eprintln!(
        "loaded {} videos, {} classes, feature dim {}",
        dataset.videos.len(),
        dataset.vocab.num_classes(),
        dataset.videos.first().map(|v| v.features.dim()).unwrap_or(0)
    );

    let outcome = train::train(&config, dataset)?;

    let log_path = log_path_for(&args.out);
    let mut log = String::new();
    for entry in &outcome.logs {
        log.push_str(&serde_json::to_string(entry)?);
        log.push('\n');
    }
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;

    let final_eval = train::evaluate(
        &outcome.model,
        &outcome.dataset,
        config.matching.mode,
        None,
    )?;
    let snapshot = MetricSnapshot {
        acc: final_eval.acc,
        edit: final_eval.edit,
        f1_50: final_eval.f1["0.50"],
        mean_loss: outcome.logs.last().map(|l| l.mean_loss).unwrap_or(0.0),
    };
    checkpoint::save(
        &args.out,
        &outcome.model,
        &outcome.dataset.vocab,
        &config.digest(),
        config.epochs,
        snapshot.clone(),
    )?;
    println!(
        "trained {} epochs | train acc {:.2} edit {:.2} f1@50 {:.2} | checkpoint {} | log {}",
        config.epochs,
        snapshot.acc,
        snapshot.edit,
        snapshot.f1_50,
        args.out.display(),
        log_path.display()
    );
    Ok(())
}

fn log_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".log.jsonl");
    out.with_file_name(name)
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let vocab_file = args.data.join("mapping.txt");
    let dataset = load_dataset(&args.data, &args.split, &vocab_file)?;
    let background = match &args.background {
        Some(name) => Some(
            dataset
                .vocab
                .id_of(name)
                .with_context(|| format!("background class {name:?} not in vocabulary"))?,
        ),
        None => None,
    };
    let report = train::evaluate_checkpoint(&ckpt, &dataset, background)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }
    if let Some(csv_path) = &args.csv {
        let mut csv = String::from("video_id,num_frames,acc,edit,f1_10,f1_25,f1_50\n");
        for v in &report.per_video {
            csv.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                v.video_id, v.num_frames, v.acc, v.edit, v.f1["0.10"], v.f1["0.25"], v.f1["0.50"]
            ));
        }
        fs::write(csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    }
    eprintln!(
        "acc {:.2} edit {:.2} f1@10/25/50 {:.2}/{:.2}/{:.2} over {} videos",
        report.acc,
        report.edit,
        report.f1["0.10"],
        report.f1["0.25"],
        report.f1["0.50"],
        report.num_videos
    );
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let vocab = &ckpt.manifest.vocab;
    let on_disk = npy::read_matrix(&args.features)?;
    let features = VideoFeatures::new(on_disk.t().to_owned(), "predict")?;

    let transcript = match &args.transcript {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading transcript {}", path.display()))?;
            let mut ids = Vec::new();
            for line in text.lines() {
                let name = line.trim();
                if name.is_empty() {
                    continue;
                }
                let id = vocab
                    .id_of(name)
                    .with_context(|| format!("unknown transcript class {name:?}"))?;
                ids.push(id);
            }
            Some(ids)
        }
        None => None,
    };
    if matches!(ckpt.manifest.config.matching_mode, MatchingMode::Transcript)
        && transcript.is_none()
    {
        bail!("this checkpoint was trained in transcript mode; pass --transcript");
    }

    let g = Graph::eval();
    let outputs = ckpt.model.forward(&g, &features, transcript.as_ref())?;
    let labels = ckpt.model.predict(&outputs);
    let mut out = String::with_capacity(labels.len() * 8);
    for id in &labels {
        out.push_str(vocab.name(*id));
        out.push('\n');
    }
    fs::write(&args.out, out).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} labels to {}", labels.len(), args.out.display());
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SyntheticSpec {
            num_videos: 20,
            num_classes: 6,
            min_segments: 5,
            max_segments: 7,
            min_segment_len: 40,
            max_segment_len: 57,
            feature_dim: 16,
            separation: 5.0,
            noise: 0.25,
            seed: 0,
        },
    };
    if let Some(v) = args.videos {
        spec.num_videos = v;
    }
    if let Some(c) = args.classes {
        spec.num_classes = c;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let dataset = generate_synthetic(&spec)?;
    data::write_dataset(&dataset, &args.out, args.holdout)?;
    println!(
        "wrote {} videos ({} classes) to {}",
        dataset.videos.len(),
        dataset.vocab.num_classes(),
        args.out.display()
    );
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    if args.lengths.len() < 2 {
        bail!("bench needs at least two lengths to fit a slope");
    }
    let model = match &args.checkpoint {
        Some(path) => checkpoint::load(path)?.model,
        None => {
            let config = bitseg::network::BitConfig::with_defaults(64, 16);
            BitModel::new(config, args.seed)?
        }
    };
    eprintln!(
        "timing network forward (M={}, H={}) over lengths {:?}",
        model.config().num_tokens,
        model.config().hidden,
        args.lengths
    );
    let net_rows = time_network_forward(&model, &args.lengths, args.repeats, args.seed)?;
    let net_slope = loglog_slope(&net_rows);

    fs::create_dir_all(&args.out).ok();
    let mut csv = rows_to_csv("network", &net_rows);
    let mut series: Vec<(&str, &[bitseg::bench::BenchRow])> = vec![("network", &net_rows)];

    let ref_rows;
    let mut ref_slope = None;
    if args.reference {
        eprintln!("timing reference full self-attention layer");
        ref_rows = time_reference_attention(model.config().hidden, &args.lengths, args.repeats, args.seed);
        ref_slope = Some(loglog_slope(&ref_rows));
        for line in rows_to_csv("full_attention", &ref_rows).lines().skip(1) {
            csv.push_str(line);
            csv.push('\n');
        }
        series.push(("full_attention", &ref_rows));
    }

    let csv_path = args.out.join("bench.csv");
    fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let svg_path = args.out.join("bench.svg");
    fs::write(&svg_path, plot_svg(&series)).with_context(|| format!("writing {}", svg_path.display()))?;

    for r in &net_rows {
        println!("network T={} {:.4}s", r.num_frames, r.seconds);
    }
    println!("network log-log slope: {net_slope:.3}");
    if let Some(slope) = ref_slope {
        println!("full-attention log-log slope: {slope:.3}");
    }
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}
