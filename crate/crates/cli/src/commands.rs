use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use resmatch::assignment::write_matches;
use resmatch::featio::{generate_pair, read_features, write_features, write_ground_truth, SynthConfig};
use resmatch::pipeline::{
    bench_csv, benchmark, evaluate, evaluate_baseline, forward_capture, load_weights, match_pair, model_grad_check,
    synthetic_pairs, train_with, AdamConfig, BenchMode, EvalMetrics, ModelConfig, TrainConfig,
};
use resmatch::{Error, Result};

use crate::dump::{build_dump, DEFAULT_TOP};

#[derive(Parser, Debug)]
#[command(name = "resmatch", version, about = "Residual-attention local feature matcher")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic image pair with ground truth.
    Synth(SynthArgs),
    /// Train a model on synthetic pairs.
    Train(TrainArgs),
    /// Match two feature files.
    Match(MatchArgs),
    /// Score a model and the nearest-neighbor baseline on synthetic pairs.
    Eval(EvalArgs),
    /// Time forward passes over a grid of set sizes.
    Bench(BenchArgs),
    /// Finite-difference check of the full network.
    Gradcheck(GradcheckArgs),
    /// Write the attention maps and bypass neighbors of one block as JSON.
    DumpAttn(DumpArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Detections per image before outliers are added.
    #[arg(long, default_value_t = 32)]
    points: usize,
    /// Per-component descriptor noise.
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 0.2)]
    outliers: f64,
    /// Pixel noise on warped positions.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
}

impl DataArgs {
    fn synth(&self, channels: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_points: self.points,
            channels,
            descriptor_noise_sigma: self.sigma,
            outlier_fraction: self.outliers,
            position_jitter: self.jitter,
            rng_seed: seed,
            ..SynthConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Desk,
    Micro,
    Full,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Block after which the bypass scores are refreshed.
    #[arg(long)]
    adjust_layer: Option<usize>,
    /// Restrict attention to mined neighbors.
    #[arg(long)]
    sparse: bool,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    no_res_self: bool,
    #[arg(long)]
    no_res_cross: bool,
    #[arg(long)]
    no_adjust: bool,
}

impl ModelArgs {
    fn config(&self, seed: u64) -> Result<ModelConfig> {
        let mut cfg = match self.preset {
            Preset::Desk => ModelConfig::desk(),
            Preset::Micro => ModelConfig::micro(),
            Preset::Full => ModelConfig::full(self.channels.unwrap_or(128)),
        };
        if let Some(c) = self.channels {
            cfg.channels = c;
        }
        cfg.layers = self.layers.unwrap_or(cfg.layers);
        cfg.heads = self.heads.unwrap_or(cfg.heads);
        cfg.adjust_layer = self.adjust_layer.unwrap_or(cfg.adjust_layer);
        cfg.k = self.k.unwrap_or(cfg.k);
        cfg.sparse = self.sparse;
        cfg.res_self = !self.no_res_self;
        cfg.res_cross = !self.no_res_cross;
        cfg.adjust = !self.no_adjust;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    out_a: PathBuf,
    #[arg(long)]
    out_b: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Weight file, rewritten at every evaluation.
    #[arg(long)]
    out: PathBuf,
    /// JSON metric log.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = AdamConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = 250)]
    eval_every: usize,
    #[arg(long, default_value_t = 32)]
    eval_pairs: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Seeds both the initialization and the training data.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    sparse: bool,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Match file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 64)]
    pairs: usize,
    /// Ratio-test threshold of the baseline.
    #[arg(long, default_value_t = resmatch::pipeline::DEFAULT_RATIO)]
    ratio: f64,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096])]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values = ["dense", "sparse"])]
    modes: Vec<String>,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// CSV report; printed to standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    points: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    head: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sparse: bool,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TOP)]
    top: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Match(a) => match_files(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::DumpAttn(a) => dump_attn(a),
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = args.data.synth(args.channels, args.seed);
    let (a, b, gt) = generate_pair(&cfg)?;
    write_features(&a, &args.out_a)?;
    write_features(&b, &args.out_b)?;
    write_ground_truth(&gt, &args.gt)?;
    println!("n_a={}", a.len());
    println!("n_b={}", b.len());
    println!("inliers={}", gt.inlier_pairs.len());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let model = args.model.config(args.seed)?;
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: args.lr,
            ..AdamConfig::default()
        },
        steps: args.steps,
        batch_size: args.batch,
        synth: args.data.synth(model.channels, 0),
        eval_every: args.eval_every,
        eval_pairs: args.eval_pairs,
        checkpoint: Some(args.out.clone()),
        metrics_log: args.metrics.clone(),
        seed: args.seed,
    };
    let out = train_with(&cfg, &model, |r| {
        println!(
            "step={} loss={:.6} precision={:.4} matching_score={:.4} recall={:.4}",
            r.step, r.loss, r.precision, r.matching_score, r.recall
        );
    })?;
    println!("parameters={}", out.params.num_scalars());
    println!("loss_ratio={:.4}", out.final_loss() / out.initial_loss());
    println!("weights={}", args.out.display());
    Ok(())
}

fn check_threshold(t: f64) -> Result<f64> {
    if t > 0.0 && t < 1.0 {
        Ok(t)
    } else {
        Err(Error::Config(format!("threshold must lie in (0, 1), got {t}")))
    }
}

fn match_files(args: MatchArgs) -> Result<()> {
    let threshold = args.threshold.map(check_threshold).transpose()?;
    let mut params = load_weights(&args.weights)?;
    params.config.sparse |= args.sparse;
    if let Some(k) = args.k {
        params.config.k = k;
    }
    if let Some(t) = threshold {
        params.config.match_threshold = t;
    }
    params.config.validate()?;
    let a = read_features(&args.a)?;
    let b = read_features(&args.b)?;
    let (_, matches) = match_pair(&params, &a, &b)?;
    if let Some(out) = &args.out {
        write_matches(&matches, params.config.match_threshold, out)?;
    }
    println!("n_a={}", a.len());
    println!("n_b={}", b.len());
    println!("matches={}", matches.len());
    println!("identity_matches={}", matches.pairs.iter().filter(|m| m.i == m.j).count());
    println!("mean_confidence={:.6}", matches.mean_confidence());
    Ok(())
}

fn print_metrics(prefix: &str, m: &EvalMetrics) {
    println!("{prefix}_precision={:.6}", m.precision);
    println!("{prefix}_matching_score={:.6}", m.matching_score);
    println!("{prefix}_recall={:.6}", m.recall);
    println!("{prefix}_mean_matches={:.3}", m.mean_matches);
    println!("{prefix}_empty_pairs={}", m.empty_pairs);
}

fn eval(args: EvalArgs) -> Result<()> {
    let params = load_weights(&args.weights)?;
    let pairs = synthetic_pairs(&args.data.synth(params.config.channels, args.seed), args.pairs)?;
    println!("pairs={}", pairs.len());
    print_metrics("model", &evaluate(&params, &pairs)?);
    print_metrics("baseline", &evaluate_baseline(&pairs, args.ratio)?);
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let cfg = args.model.config(args.seed)?;
    let modes = args
        .modes
        .iter()
        .map(|m| match m.as_str() {
            "dense" => Ok(BenchMode::Dense),
            "sparse" => Ok(BenchMode::Sparse),
            other => Err(Error::Config(format!("unknown mode `{other}` (dense or sparse)"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = benchmark(&cfg, &args.sizes, &modes, args.repeats, args.seed)?;
    let csv = bench_csv(&rows);
    match &args.out {
        Some(path) => {
            fs::write(path, csv).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            println!("rows={}", rows.len());
            println!("report={}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = args.model.config(args.seed)?;
    let report = model_grad_check(&cfg, args.points, args.seed, args.tol)?;
    for e in &report.entries {
        println!("param={} max_rel_err={:.3e}", e.name, e.max_rel_err);
    }
    println!("max_rel_err={:.3e}", report.max_rel_err());
    println!("passed={}", report.passed());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_err(),
            args.tol
        )))
    }
}

fn dump_attn(args: DumpArgs) -> Result<()> {
    let mut params = load_weights(&args.weights)?;
    params.config.sparse |= args.sparse;
    if let Some(k) = args.k {
        params.config.k = k;
    }
    params.config.validate()?;
    let cfg = &params.config;
    if args.layer >= cfg.layers {
        return Err(Error::Config(format!("layer {} outside 0..{}", args.layer, cfg.layers)));
    }
    if args.head >= cfg.heads {
        return Err(Error::Config(format!("head {} outside 0..{}", args.head, cfg.heads)));
    }
    let a = read_features(&args.a)?;
    let b = read_features(&args.b)?;
    let (_, diag) = forward_capture(&params, &a, &b, Some(args.layer))?;
    let capture = diag.capture.expect("capture of a valid layer");
    let dump = build_dump(&capture, args.head, args.top, cfg.sparse, cfg.lrelu_slope);
    let json = serde_json::to_string_pretty(&dump).expect("dump serializes");
    fs::write(&args.out, json).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    println!("layer={}", args.layer);
    println!("head={}", args.head);
    println!("streams={}", dump.streams.len());
    println!(
        "uniform_bypass={}",
        dump.streams.iter().filter(|s| s.bypass_uniform).count()
    );
    println!("out={}", args.out.display());
    Ok(())
}
