//! `cts`: architecture analysis, synthetic data, training, evaluation,
//! report comparison and gradient checking.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use convtransseg::data::{load_dataset, synth_generate, Dataset, DatasetManifest, Split};
use convtransseg::metrics::{compare, render_comparison, EvalReport};
use convtransseg::model::{
    count_params, derive_dims, gradcheck_input_name, gradcheck_model, EmptyClassMask, ModelConfig, SegModel,
};
use convtransseg::runconfig::RunConfig;
use convtransseg::tensor::{parallel, GradcheckOptions};
use convtransseg::trainer::{evaluate_checkpoint, train, TrainRecord};
use convtransseg::{CtsError, Result};

#[derive(Parser, Debug)]
#[command(name = "cts", version, about = "CNN encoder / Transformer decoder segmentation toolkit")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the per-level dimension table and parameter counts.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic ellipse dataset with a split manifest.
    Synth(SynthArgs),
    /// Train on a manifest dataset, keeping the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split and print the CSV report.
    Eval(EvalArgs),
    /// Paired signed-rank comparison of two CSV reports.
    Compare(CompareArgs),
    /// Finite-difference gradient check of a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    downsample: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Square input side; sets width and height.
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    no_skip: bool,
    #[arg(long)]
    no_dsl: bool,
    /// none | dice | dice+ce
    #[arg(long)]
    mask_empty: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Enable intra-op parallelism (results stay deterministic).
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Manifest file or directory containing `manifest.txt`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to `<data>/run`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the CSV report here instead of the output stream.
    #[arg(long)]
    out: Option<PathBuf>,
    /// none keeps entries of classes absent from the ground truth.
    #[arg(long, default_value = "dice")]
    mask_empty: String,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 2)]
    coords: usize,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
}

/// Keys a config file text assigns.
fn assigned_keys(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| l.split('#').next()?.split_once('=').map(|(k, _)| k.trim().to_string()))
        .collect()
}

/// Builds the run config from an optional file and flag overrides; also
/// reports whether the input size was given explicitly.
fn resolve(base: RunConfig, flags: &ModelFlags) -> Result<(RunConfig, bool)> {
    let mut cfg = base;
    let mut sized = false;
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path).map_err(|e| CtsError::io(path, e))?;
        cfg.apply_text(&text)?;
        sized = assigned_keys(&text).iter().any(|k| k == "width" || k == "height");
    }
    let m = &mut cfg.model;
    if let Some(v) = flags.levels {
        m.levels = v;
    }
    if let Some(v) = flags.blocks {
        m.blocks = v;
    }
    if let Some(v) = flags.base_channels {
        m.base_channels = v;
    }
    if let Some(v) = flags.downsample {
        m.downsample = v;
    }
    if let Some(v) = flags.classes {
        m.classes = v;
    }
    if let Some(v) = flags.input_size {
        m.width = v;
        m.height = v;
        sized = true;
    }
    if flags.no_skip {
        m.use_skip_connections = false;
    }
    if flags.no_dsl {
        m.use_dsl = false;
    }
    if let Some(v) = &flags.mask_empty {
        cfg.loss.mask_empty = EmptyClassMask::parse(v)?;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    cfg.parallel |= flags.parallel;
    Ok((cfg, sized))
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let (cfg, _) = resolve(RunConfig::default(), &args.model)?;
    let m = &cfg.model;
    let dims = derive_dims(m)?;
    let counts = count_params(m)?;
    if args.json {
        let config: serde_json::Map<String, serde_json::Value> =
            m.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v.into())).collect();
        let doc = serde_json::json!({ "config": config, "dims": dims, "params": counts });
        println!("{}", serde_json::to_string_pretty(&doc).expect("serializable"));
        return Ok(());
    }
    println!("input {}x{}x{}, {} classes, {} tokens per level, head width {}", m.height, m.width, m.in_channels, m.classes, dims.tokens, dims.head_dim);
    for l in &dims.levels {
        let dsl = l.dsl_channels.map(|c| format!(", dsl {}", c)).unwrap_or_default();
        println!(
            "level {}: {}×{}×{} → {}×{} (patch {}, {} heads{})",
            l.level, l.height, l.width, l.channels, dims.tokens, l.token_dim, l.patch_side, l.heads, dsl
        );
    }
    println!("head input channels: {}", dims.head_channels);
    println!("parameters:");
    for g in &counts.groups {
        println!("  {:<16} {:>12}", g.name, g.count);
    }
    println!("  {:<16} {:>12} ({:.2}M)", "total", counts.total, counts.millions());
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let m = synth_generate(args.count, args.size, args.classes, args.seed, &args.out)?;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        m.entries.len(),
        args.out.display(),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test)
    );
    Ok(())
}

/// Resizes `ds` to the model input when needed.
fn fit_dataset(ds: Dataset, m: &ModelConfig) -> Dataset {
    if ds.uniform_size() == Some((m.width, m.height)) {
        ds
    } else {
        ds.resized(m.width, m.height)
    }
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let (mut cfg, sized) = resolve(RunConfig::default(), &args.model)?;
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.lr {
        cfg.adam.lr = v;
    }
    let data = cfg.data.clone().ok_or_else(|| CtsError::usage("train needs --data (or `data =` in the config file)"))?;
    let manifest = DatasetManifest::read(&data)?;
    if args.model.classes.is_some() && cfg.model.classes != manifest.classes {
        return Err(CtsError::config(format!(
            "--classes {} disagrees with the manifest's {}",
            cfg.model.classes, manifest.classes
        )));
    }
    cfg.model.classes = manifest.classes;
    cfg.model.in_channels = manifest.channels;
    let ds = load_dataset(&manifest)?;
    if !sized {
        let (w, h) = ds
            .uniform_size()
            .ok_or_else(|| CtsError::config("images differ in size; pass --input-size"))?;
        cfg.model.width = w;
        cfg.model.height = h;
    }
    if cfg.out.is_none() {
        cfg.out = Some(manifest.root.join("run"));
    }
    cfg.validate()?;
    parallel::set_enabled(cfg.parallel);
    let ds = fit_dataset(ds, &cfg.model);
    let out = cfg.out.clone().expect("set above");
    std::fs::create_dir_all(&out).map_err(|e| CtsError::io(&out, e))?;
    let cfg_path = out.join("run.cfg");
    std::fs::write(&cfg_path, cfg.render()).map_err(|e| CtsError::io(&cfg_path, e))?;

    let mut model = SegModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    eprintln!(
        "training {} parameters on {} train / {} val samples for {} epochs",
        model.num_parameters(),
        ds.train.len(),
        ds.val.len(),
        cfg.epochs
    );
    println!("{}", TrainRecord::CSV_HEADER);
    let outcome = train(&mut model, &ds, &cfg.train_config(), |r| println!("{}", r.csv_row()))?;
    eprintln!(
        "best epoch {} with val loss {:.6}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.best_checkpoint.as_deref().map(Path::display).map(|d| d.to_string()).unwrap_or_default()
    );
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    parallel::set_enabled(args.parallel);
    let split = Split::parse(&args.split)?;
    let mask_empty = EmptyClassMask::parse(&args.mask_empty)? != EmptyClassMask::None;
    let manifest = DatasetManifest::read(&args.data)?;
    let (model, _) = convtransseg::model::load_checkpoint::<f32>(&args.checkpoint)?;
    let ds = fit_dataset(load_dataset(&manifest)?, model.config());
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(CtsError::data(format!("split `{}` is empty", split)));
    }
    let (report, meta) = evaluate_checkpoint(&args.checkpoint, &ds, samples, mask_empty)?;
    eprintln!(
        "checkpoint epoch {}: mean DC {:.4}, mean ASSD {:.4} over {} {} samples",
        meta.epoch,
        report.overall.dc_mean,
        report.overall.assd_mean,
        samples.len(),
        split
    );
    let csv = report.to_csv();
    match &args.out {
        Some(p) => std::fs::write(p, csv).map_err(|e| CtsError::io(p, e))?,
        None => print!("{}", csv),
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CtsError::io(path, e))?;
    EvalReport::from_csv(&text).map_err(|e| CtsError::data(format!("{}: {}", path.display(), e)))
}

fn compare_cmd(args: &CompareArgs) -> Result<()> {
    let rows = compare(&read_report(&args.a)?, &read_report(&args.b)?)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&rows).expect("serializable"));
    } else {
        print!("{}", render_comparison(&rows));
    }
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs) -> Result<()> {
    let base = RunConfig {
        model: ModelConfig {
            width: 16,
            height: 16,
            in_channels: 1,
            classes: 2,
            levels: 3,
            blocks: 1,
            base_channels: 8,
            downsample: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    let (cfg, _) = resolve(base, &args.model)?;
    parallel::set_enabled(cfg.parallel);
    let opts = GradcheckOptions { max_coords: args.coords, step: args.step, seed: cfg.seed, ..GradcheckOptions::default() };
    let report = gradcheck_model(&cfg.model, cfg.seed, &opts, 4)?;
    let names = SegModel::<f64>::new(cfg.model.clone(), cfg.seed)?;
    for r in &report.inputs {
        println!("{:<48} {:>3} coords  max rel err {:.3e}", gradcheck_input_name(&names, r.index), r.checked, r.max_rel_error);
    }
    println!("overall max rel err {:.3e} (tolerance {:.0e})", report.max_rel_error(), report.tolerance);
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(CtsError::Numerical(format!(
            "gradient check failed: max relative error {:.3e}{}",
            report.max_rel_error(),
            if report.kink_hit { " (non-differentiable point hit)" } else { "" }
        )))
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
