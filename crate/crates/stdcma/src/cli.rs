//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use stdcma_core::attention::{multiscale_infer, AttentionMode};
use stdcma_core::dataset::{class_histogram, gen_shapes_dataset, render_mask, small_object_classes, SegSample, PALETTE};
use stdcma_core::grad_suites::{run_suite, SUITES};
use stdcma_core::metrics::{argmax_labels, ConfusionMatrix};
use stdcma_core::network::{count_params_flops, parse_key_values, NetworkConfig, NetworkParams};
use stdcma_core::train::{synthetic_splits, train, TrainConfig, TrainEvent, TrainReport};
use stdcma_core::RngState;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{read_dataset, write_dataset};
use crate::error::AppError;
use crate::netpbm::{read_ppm, write_pgm, write_ppm, GrayMap};
use crate::parallel::{evaluate_parallel, worker_count};

/// Published totals for the full-scale configuration at 1024×512.
pub const REFERENCE_GFLOPS: f64 = 102.27;
pub const REFERENCE_MPARAMS: f64 = 22.2;

#[derive(Debug, Parser)]
#[command(name = "stdcma", version, about = "Multi-scale attention segmentation: train, infer, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network from a `key = value` config file
    Train(TrainArgs),
    /// Segment one PPM image
    Infer(InferArgs),
    /// Per-class IoU and mIoU over a dataset directory
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites
    Gradcheck(GradcheckArgs),
    /// Parameter and FLOP accounting
    Count(CountArgs),
    /// Write a synthetic shapes dataset
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the checkpoint, log and snapshots
    #[arg(long)]
    out: PathBuf,
    /// Blend scales with a fixed α = 0.5 instead of the learned attention
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation dataset directory; defaults to the held-out synthetic split
    #[arg(long)]
    eval_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "0.5,1.0", value_parser = scales_arg)]
    scales: Scales,
    /// Label map output (PGM)
    #[arg(long)]
    out: PathBuf,
    /// Also write a color rendering of the labels (PPM)
    #[arg(long)]
    color: Option<PathBuf>,
    #[arg(long)]
    no_attention: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "0.5,1.0", value_parser = scales_arg)]
    scales: Scales,
    #[arg(long)]
    no_attention: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// One of tensor, deform, alignment, network; all when omitted
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
    module: Option<String>,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Debug, Args)]
struct CountArgs {
    /// Network config file; the full-scale reference config when omitted
    #[arg(long, conflicts_with = "toy")]
    config: Option<PathBuf>,
    /// Count the toy configuration with this many classes
    #[arg(long)]
    toy: Option<usize>,
    /// Input extent as HxW
    #[arg(long, value_parser = size_arg)]
    input_size: (usize, usize),
    #[arg(long, default_value = "0.5,1.0", value_parser = scales_arg)]
    scales: Scales,
    /// Print every layer instead of per-module totals
    #[arg(long)]
    layers: bool,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    size: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Comma-separated ascending scale list.
#[derive(Debug, Clone, PartialEq)]
struct Scales(Vec<f64>);

fn scales_arg(s: &str) -> Result<Scales, String> {
    stdcma_core::train::parse_scales(s).map(Scales).map_err(|e| e.to_string())
}

fn size_arg(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (parse(h), parse(w)) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(format!("expected positive HxW extents, got `{s}`")),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), AppError> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Count(a) => cmd_count(a),
        Command::GenData(a) => cmd_gen_data(a),
    }
}

fn mode(no_attention: bool) -> AttentionMode {
    if no_attention {
        AttentionMode::Fixed(0.5)
    } else {
        AttentionMode::Learned
    }
}

fn read_config(path: &Path) -> Result<BTreeMap<String, String>, AppError> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    let pairs = parse_key_values(&text).map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
    if let Some(k) = pairs
        .keys()
        .find(|k| !NetworkConfig::KEYS.contains(&k.as_str()) && !TrainConfig::KEYS.contains(&k.as_str()))
    {
        return Err(AppError::data(format!("{}: unknown key `{k}`", path.display())));
    }
    Ok(pairs)
}

fn create_dir(path: &Path) -> Result<(), AppError> {
    std::fs::create_dir_all(path).map_err(|e| AppError::io(path, e))
}

fn iou_lines(cm: &ConfusionMatrix) -> Vec<String> {
    cm.per_class_iou()
        .iter()
        .enumerate()
        .map(|(c, v)| match v {
            Some(v) => format!("class {c:>2}  IoU {v:.4}"),
            None => format!("class {c:>2}  IoU   n/a"),
        })
        .collect()
}

fn summary(report: &TrainReport, cfg: &TrainConfig) -> Result<String, AppError> {
    let small = small_object_classes(cfg.classes);
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let mut s = String::new();
    s += &format!("iterations {}\n", report.losses.len());
    s += &format!("initial loss (mean of first 10) {:.6}\n", report.initial_loss(10));
    s += &format!("final loss (mean of last 10) {:.6}\n", report.final_loss(10));
    s += &format!("blend {}\n", if cfg.attention { "learned attention" } else { "fixed 0.5" });
    s += &format!("mIoU {:.4}\n", report.eval.miou()?);
    s += &format!("mIoU with fixed 0.5 blend {:.4}\n", report.eval_fixed_blend.miou()?);
    s += &format!("small-object classes {small:?} mIoU {}\n", opt(report.eval.subset_miou(&small)));
    for line in iou_lines(&report.eval) {
        s += &line;
        s.push('\n');
    }
    Ok(s)
}

fn cmd_train(a: TrainArgs) -> Result<(), AppError> {
    let pairs = read_config(&a.config)?;
    let mut cfg = TrainConfig::from_pairs(&pairs, TrainConfig::default())?;
    if a.no_attention {
        cfg.attention = false;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let net = NetworkConfig::from_pairs(&pairs, NetworkConfig::toy(cfg.classes))?;

    let (train_set, mut eval_set): (Vec<SegSample>, Vec<SegSample>) = match &cfg.data_root {
        Some(root) => {
            let t = read_dataset(Path::new(root))?;
            (t.clone(), t)
        }
        None => synthetic_splits(&cfg)?,
    };
    if let Some(dir) = &a.eval_data {
        eval_set = read_dataset(dir)?;
    }
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(AppError::data("training and evaluation sets must be non-empty"));
    }

    create_dir(&a.out)?;
    let snapshots = a.out.join("snapshots");
    if cfg.snapshot_interval > 0 {
        create_dir(&snapshots)?;
    }
    let log_path = a.out.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| AppError::io(&log_path, e))?);
    writeln!(log, "iteration,loss").map_err(|e| AppError::io(&log_path, e))?;

    let mut params = NetworkParams::init(net, &mut RngState::new(cfg.seed))?;
    let mut failure: Option<AppError> = None;
    let mut observer = |e: &TrainEvent| -> stdcma_core::Result<()> {
        let r = match e {
            TrainEvent::Loss { iteration, loss } => {
                println!("iter {iteration:>6}  loss {loss:.6}");
                writeln!(log, "{iteration},{loss:e}").map_err(|e| AppError::io(&log_path, e))
            }
            TrainEvent::Snapshot { iteration, params } => {
                save_checkpoint(&snapshots.join(format!("iter_{iteration:06}.stdcma")), params)
            }
        };
        r.map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            stdcma_core::Error::InvalidArgument(msg)
        })
    };
    let trained = train(&mut params, &train_set, &cfg, &mut observer);
    if let Some(e) = failure {
        return Err(e);
    }
    let losses = trained?;
    log.flush().map_err(|e| AppError::io(&log_path, e))?;

    let workers = worker_count()?;
    let eval = evaluate_parallel(&params, &eval_set, &cfg.scales, cfg.mode(), workers)?;
    let eval_fixed_blend = evaluate_parallel(&params, &eval_set, &cfg.scales, AttentionMode::Fixed(0.5), workers)?;
    let report = TrainReport { losses, eval, eval_fixed_blend };

    let ckpt = a.out.join("checkpoint.stdcma");
    save_checkpoint(&ckpt, &params)?;
    let text = summary(&report, &cfg)?;
    let report_path = a.out.join("report.txt");
    std::fs::write(&report_path, &text).map_err(|e| AppError::io(&report_path, e))?;
    print!("{text}");
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<(), AppError> {
    let params = load_checkpoint(&a.ckpt)?;
    let image = read_ppm(&a.image)?;
    let pyramid = multiscale_infer(&params, &image, &a.scales.0, mode(a.no_attention))?;
    let [_, _, h, w] = pyramid.fused.shape();
    let labels = argmax_labels(&pyramid.fused);
    println!("scales {:?}, {} fusion(s)", a.scales.0, pyramid.fusions);
    for p in &pyramid.pairs {
        println!(
            "pair {} -> {}: alpha min {:.4} mean {:.4} max {:.4}, fold delta {:.3e}",
            p.low_scale, p.high_scale, p.alpha_min, p.alpha_mean, p.alpha_max, p.fold_delta
        );
    }
    if let Some(path) = &a.color {
        write_ppm(path, &render_mask(&labels, h, w, &PALETTE)?)?;
    }
    write_pgm(&a.out, &GrayMap { width: w, height: h, data: labels })?;
    println!("mask {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), AppError> {
    let params = load_checkpoint(&a.ckpt)?;
    let samples = read_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(AppError::data(format!("{}: no samples", a.data.display())));
    }
    let cm = evaluate_parallel(&params, &samples, &a.scales.0, mode(a.no_attention), worker_count()?)?;
    for line in iou_lines(&cm) {
        println!("{line}");
    }
    println!("mIoU {:.4}", cm.miou()?);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), AppError> {
    let suites: Vec<&str> = match &a.module {
        Some(m) => vec![m.as_str()],
        None => SUITES.to_vec(),
    };
    let mut failed = 0;
    for suite in suites {
        for o in run_suite(suite, a.seed)? {
            let verdict = if o.passed() { "ok  " } else { "FAIL" };
            println!(
                "{verdict} {suite:<9} {:<36} max rel err {:.3e} (< {:.0e}, {} elements)",
                o.name, o.max_rel_error, o.tolerance, o.checked
            );
            if !o.passed() {
                failed += 1;
                if let Some(w) = &o.worst {
                    println!("     worst at {w}");
                }
            }
        }
    }
    if failed > 0 {
        return Err(AppError::data(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

fn delta(value: f64, reference: f64) -> String {
    format!("{:+.1}%", 100.0 * (value - reference) / reference)
}

fn cmd_count(a: CountArgs) -> Result<(), AppError> {
    let (cfg, label) = match (&a.config, a.toy) {
        (Some(path), _) => (NetworkConfig::from_pairs(&read_config(path)?, NetworkConfig::reference())?, path.display().to_string()),
        (None, Some(k)) => (NetworkConfig::toy(k), format!("toy, {k} classes")),
        (None, None) => (NetworkConfig::reference(), "reference".to_string()),
    };
    let (h, w) = a.input_size;
    let acc = count_params_flops(&cfg, h, w, &a.scales.0)?;
    let mparams = acc.params as f64 / 1e6;
    let gflops = acc.flops as f64 / 1e9;
    println!("config {label}; input {h}x{w} (HxW); scales {:?}", a.scales.0);
    println!("{:<28} {:>12} {:>14}", "", "Params (M)", "FLOPs (G)");
    println!("{:<28} {:>12.3} {:>14.2}", "this model", mparams, gflops);
    if cfg == NetworkConfig::reference() {
        println!("{:<28} {:>12.3} {:>14.2}", "reference", REFERENCE_MPARAMS, REFERENCE_GFLOPS);
        println!("{:<28} {:>12} {:>14}", "delta", delta(mparams, REFERENCE_MPARAMS), delta(gflops, REFERENCE_GFLOPS));
    }
    println!();
    println!("{:<28} {:>12} {:>14}", if a.layers { "layer" } else { "module" }, "params", "MACs");
    let rows: Vec<(String, usize, u64)> = if a.layers {
        acc.rows.iter().map(|r| (r.name.clone(), r.params, r.macs)).collect()
    } else {
        acc.groups()
    };
    for (name, p, m) in rows {
        println!("{name:<28} {p:>12} {m:>14}");
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), AppError> {
    let samples = gen_shapes_dataset(a.seed, a.count, a.size, a.classes)?;
    write_dataset(&a.out, &samples)?;
    println!("{} samples of {}x{} in {}", samples.len(), a.size, a.size, a.out.display());
    for (c, n) in class_histogram(&samples, a.classes).iter().enumerate() {
        println!("class {c:>2}  {n} pixels");
    }
    Ok(())
}
