//! `poselift`: synthesize data, train, evaluate, infer, inspect model cost
//! and run the gradient-check suite.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use poselift::accounting::{count_macs, human, MacConvention};
use poselift::data::{
    generate_synthetic_sequence, load_dataset, load_sequence, root_centered, save_sequence, ManifestEntry, PoseKind,
    Sequence, SyntheticSceneConfig,
};
use poselift::gradcheck::{self, Selection};
use poselift::metrics::{Alignment, MetricsReport};
use poselift::model::{checkpoint, CompositionMode, Variant};
use poselift::report::{epoch_plot_svg, to_json, write_cost, write_metrics};
use poselift::tensor::Tensor;
use poselift::train::{evaluate, predict_windows, train_run, EvalOptions};

use config::{load_model_config, RunConfig, SynthConfig};

#[derive(Parser)]
#[command(name = "poselift", version, about = "Lift 2D keypoint sequences to 3D poses", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic 2D/3D sequence pairs and a dataset manifest.
    Synth(SynthArgs),
    /// Train a model and write checkpoints, a log and metric reports.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset (read-only).
    Eval(EvalArgs),
    /// Lift one 2D sequence file to 3D.
    Infer(InferArgs),
    /// Print parameter and multiply-accumulate counts.
    Inspect(InspectArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of training sequences.
    #[arg(long)]
    sequences: Option<usize>,
    /// Number of held-out sequences (written to a second manifest).
    #[arg(long)]
    eval_sequences: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// 2D noise standard deviation in pixels.
    #[arg(long)]
    noise_px: Option<f64>,
    /// Skeleton JSON file (default: 17-joint Human3.6M layout).
    #[arg(long)]
    skeleton: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration (`variant`, `model`, `train`, `data`, `eval_data`, `out`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation manifest (default: the training manifest).
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// XS, S, B or L; sets depth, width and frames.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    mode: Option<CompositionMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Also write an SVG plot of the per-epoch metrics.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Average with the un-flipped prediction of the flipped input.
    #[arg(long)]
    tta_flip: bool,
    #[arg(long)]
    out: PathBuf,
    /// similarity or rigid_only.
    #[arg(long, default_value = "similarity", value_parser = parse_alignment)]
    alignment: Alignment,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// 2D sequence file.
    #[arg(long)]
    input: PathBuf,
    /// 3D sequence file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tta_flip: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    variant: Option<Variant>,
    /// Model or run configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which products enter the MAC total: layers or dense.
    #[arg(long, default_value = "layers")]
    macs: MacConvention,
    /// Print one row per module.
    #[arg(long)]
    breakdown: bool,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
    /// Also write the JSON report and a CSV breakdown here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// all, primitives, layers, model, loss, or a primitive name.
    #[arg(long, default_value = "all")]
    module: Selection,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_alignment(s: &str) -> Result<Alignment, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown alignment `{s}` (expected similarity or rigid_only)"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Inspect(a) => inspect(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Seed of the `i`-th generated sequence.
fn sequence_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.sequences = a.sequences.unwrap_or(cfg.sequences);
    cfg.eval_sequences = a.eval_sequences.unwrap_or(cfg.eval_sequences);
    cfg.frames = a.frames.unwrap_or(cfg.frames);
    cfg.noise_px = a.noise_px.unwrap_or(cfg.noise_px);
    if a.skeleton.is_some() {
        cfg.skeleton = a.skeleton;
    }
    let skeleton = cfg.skeleton_spec()?;
    cfg.validate()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let splits = [
        ("train", "manifest.json", 0, cfg.sequences),
        ("eval", "eval_manifest.json", cfg.sequences, cfg.eval_sequences),
    ];
    for (prefix, manifest, offset, count) in splits {
        if count == 0 {
            continue;
        }
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let mut scene = SyntheticSceneConfig::randomized(skeleton.clone(), sequence_seed(cfg.seed, offset + i))?;
            scene.noise_px = cfg.noise_px;
            scene.fps = cfg.fps;
            let (p3, p2) = generate_synthetic_sequence(&scene, cfg.frames)?;
            let action = cfg.actions[i % cfg.actions.len()].clone();
            let (input, target) = (format!("{prefix}_{i:04}_2d.json"), format!("{prefix}_{i:04}_3d.json"));
            save_sequence(&p2.with_action(action.clone()), &a.out.join(&input))?;
            save_sequence(&p3.with_action(action.clone()), &a.out.join(&target))?;
            entries.push(ManifestEntry { input: input.into(), target: target.into(), action: Some(action) });
        }
        std::fs::write(a.out.join(manifest), to_json(&entries)?)?;
        println!("{count} {prefix} sequences of {} frames -> {}", cfg.frames, a.out.join(manifest).display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.variant.is_some() {
        run.variant = a.variant;
    }
    run.data = a.data.or(run.data);
    run.eval_data = a.eval_data.or(run.eval_data);
    run.out = a.out.or(run.out);
    run.train.seed = a.seed.unwrap_or(run.train.seed);
    run.train.epochs = a.epochs.unwrap_or(run.train.epochs);
    run.train.batch_size = a.batch_size.unwrap_or(run.train.batch_size);
    run.train.lr_init = a.lr.unwrap_or(run.train.lr_init);
    let mut model_cfg = run.model_config()?;
    if let Some(m) = a.mode {
        model_cfg.mode = m;
    }
    model_cfg.validate()?;
    run.train.validate()?;
    let Some(data) = run.data.clone() else { bail!("no training data: pass --data or set `data` in the config") };
    let Some(out) = run.out.clone() else { bail!("no output directory: pass --out or set `out` in the config") };
    let train_set = load_dataset(&data, &model_cfg.skeleton)?;
    let eval_set = match &run.eval_data {
        Some(p) => load_dataset(p, &model_cfg.skeleton)?,
        None => train_set.clone(),
    };
    let outcome = train_run(&model_cfg, &run.train, &train_set, &eval_set)?;
    outcome.write(&out, &run.train)?;
    write_metrics(&outcome.best_metrics, &model_cfg.skeleton.joints, &out, "eval_best")?;
    run.model = Some(model_cfg);
    run.variant = None;
    std::fs::write(out.join("run_config.json"), to_json(&run)?)?;
    if a.plot {
        std::fs::write(out.join("train_plot.svg"), epoch_plot_svg(&outcome.log))?;
    }
    for r in &outcome.log {
        println!(
            "epoch {:>4}  lr {:.3e}  loss {:>12.3}  P1 {:>8.2} mm  P2 {:>8.2} mm",
            r.epoch, r.lr, r.train_loss, r.eval_p1, r.eval_p2
        );
    }
    println!("initial P1 {:.2} mm", outcome.initial.mpjpe_mm);
    print_summary(&format!("best (epoch {})", outcome.best_epoch), &outcome.best_metrics);
    println!("wrote {}", out.display());
    Ok(())
}

fn print_summary(label: &str, r: &MetricsReport) {
    println!(
        "{label}: P1 {:.2} mm  P2 {:.2} mm  PCK {:.1}%  AUC {:.1}%  accel {:.2} mm  ({} frames, {} sequences)",
        r.mpjpe_mm, r.p_mpjpe_mm, r.pck_pct, r.auc_pct, r.accel_err_mm, r.frames, r.sequences
    );
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let cfg = model.config();
    let dataset = load_dataset(&a.data, &cfg.skeleton)?;
    let mut opts = EvalOptions::new(cfg, a.tta_flip);
    opts.metrics.alignment = a.alignment;
    opts.batch_size = a.batch_size.max(1);
    let report = evaluate(&model, &dataset, &opts)?;
    write_metrics(&report, &cfg.skeleton.joints, &a.out, "eval")?;
    print_summary("eval", &report);
    for (action, m) in &report.per_action {
        println!("  {action:<20} P1 {:>8.2}  P2 {:>8.2}  ({} frames)", m.mpjpe_mm, m.p_mpjpe_mm, m.frames);
    }
    Ok(())
}

/// Window starts covering `len` frames with stride `window`; a trailing
/// partial window is replaced by the last full one.
fn cover(len: usize, window: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..len / window).map(|i| i * window).collect();
    if !len.is_multiple_of(window) {
        starts.push(len - window);
    }
    starts
}

fn infer(a: InferArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let cfg = model.config();
    let input = load_sequence(&a.input)?;
    if input.kind != PoseKind::TwoD {
        bail!("{}: expected a 2d sequence", a.input.display());
    }
    input.check_skeleton(&cfg.skeleton)?;
    let (t, j, len) = (cfg.frames, cfg.joints(), input.frames());
    if len < t {
        bail!("{}: {len} frames but the model window is {t}", a.input.display());
    }
    let starts = cover(len, t);
    let mut batch = Vec::with_capacity(starts.len() * t * j * 3);
    for &s in &starts {
        batch.extend_from_slice(input.window(s, t).data());
    }
    let pred = predict_windows(&model, &Tensor::new(vec![starts.len(), t, j, 3], batch)?, a.tta_flip)?;
    let row = t * j * 3;
    let mut data = vec![0.0f32; len * j * 3];
    for (w, &s) in starts.iter().enumerate() {
        let window = &pred.data()[w * row..(w + 1) * row];
        // Earlier windows keep the frames they already cover.
        let skip = if w > 0 && s < starts[w - 1] + t { starts[w - 1] + t - s } else { 0 };
        let frame = j * 3;
        data[(s + skip) * frame..(s + t) * frame].copy_from_slice(&window[skip * frame..]);
    }
    let mut out = root_centered(&Sequence::new(PoseKind::ThreeD, input.fps, j, data)?, cfg.skeleton.root);
    if let Some(action) = &input.action {
        out = out.with_action(action.clone());
    }
    save_sequence(&out, &a.out)?;
    println!("{len} frames lifted in {} windows -> {}", starts.len(), a.out.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let cfg = match (&a.variant, &a.config) {
        (Some(v), _) => poselift::model::ModelConfig::variant(*v),
        (None, Some(p)) => load_model_config(p)?,
        (None, None) => bail!("pass --variant or --config"),
    };
    cfg.validate()?;
    let report = count_macs(&cfg, a.macs);
    if a.json {
        print!("{}", to_json(&report)?);
    } else {
        let name = a.variant.map_or_else(|| "custom".to_string(), |v| v.to_string());
        println!(
            "model {name}: depth {}, dim {}, frames {}, joints {}, heads {}, mode {}",
            cfg.depth,
            cfg.dim,
            cfg.frames,
            cfg.joints(),
            cfg.heads,
            cfg.mode
        );
        print!("{}", report.table(a.breakdown));
        let other = match a.macs {
            MacConvention::Layers => MacConvention::Dense,
            MacConvention::Dense => MacConvention::Layers,
        };
        let alt = count_macs(&cfg, other);
        println!("({other} convention: {} MACs, {} per frame)", human(alt.total_macs), human(alt.macs_per_frame));
    }
    if let Some(dir) = &a.out {
        write_cost(&report, dir, "cost")?;
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = gradcheck::run(a.module, a.seed)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        bail!("{failed} gradient checks exceeded their tolerance");
    }
    Ok(())
}
