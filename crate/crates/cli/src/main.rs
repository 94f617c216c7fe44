//! `patcher` command-line interface.
//!
//! Exit status is 0 on success, 1 when a command fails at run time and 2 for
//! usage or configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use patcher::autodiff::{inject_fault, OP_NAMES};
use patcher::config::{PerStage, RunConfig};
use patcher::data::{load_image, save_gray, to_u8};
use patcher::encoder::STAGES;
use patcher::gradcheck::{check_op, end_to_end_check};
use patcher::model::{infer, ModelConfig};
use patcher::train::{evaluate, read_log, Checkpoint, LogRow, Trainer};
use patcher::{ParameterStore, Tensor};

const OP_TOL: f64 = 1e-3;
const NETWORK_TOL: f64 = 1e-2;

#[derive(Parser)]
#[command(name = "patcher", version, about = "Train and run Patcher segmentation models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and the metric log.
    Train {
        /// Continue from a checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of the configured dataset.
    Eval {
        /// Defaults to `<out>/best.ckpt`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Write binary mask PNGs for images.
    Predict {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Also write the sigmoid probability map.
        #[arg(long)]
        prob: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write the four gate weight maps of an image as PNGs.
    VizMoe {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        image: PathBuf,
    },
    /// Finite-difference checks of every op and of the whole model.
    Gradcheck {
        /// Check only the first N elements of each parameter tensor in the
        /// whole-model check.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train and score variants of the config over context sizes and
    /// large-patch sizes.
    Ablate {
        /// Context sizes, swept at the config's large-patch sizes.
        #[arg(long = "p")]
        p: Vec<usize>,
        /// Large-patch sizes, one value or four comma-separated per-stage
        /// values, swept at the config's context sizes.
        #[arg(long = "l", value_parser = parse_per_stage)]
        l: Vec<PerStage>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

fn parse_per_stage(s: &str) -> Result<PerStage, String> {
    let values: Vec<usize> = s
        .trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| format!("not a size list: {s}")))
        .collect::<Result<_, _>>()?;
    match values[..] {
        [v] => Ok(PerStage::All(v)),
        [a, b, c, d] => Ok(PerStage::Each([a, b, c, d])),
        _ => Err(format!("expected 1 or {STAGES} values, got {}", values.len())),
    }
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

type Outcome = Result<(), Failure>;

/// A config with the command-line overrides applied, and the text it hashes
/// to: the file itself when the overrides change nothing, otherwise its
/// canonical rendering.
struct Loaded {
    cfg: RunConfig,
    text: String,
}

impl Loaded {
    fn hash(&self) -> u32 {
        RunConfig::hash(&self.text)
    }

    fn out(&self) -> &Path {
        &self.cfg.out
    }
}

fn load(common: &Common) -> Result<Loaded, Failure> {
    let path = common.config.as_ref().ok_or_else(|| usage(anyhow!("--config is required")))?;
    let (file_cfg, text) = RunConfig::load(path).map_err(usage)?;
    let mut cfg = file_cfg.clone();
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.out = common.out.clone().unwrap_or(cfg.out);
    let text = if cfg == file_cfg { text } else { cfg.to_text() };
    Ok(Loaded { cfg, text })
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Writes the effective config into the output directory.
fn copy_config(run: &Loaded) -> anyhow::Result<()> {
    let path = run.out().join("config.toml");
    if fs::read_to_string(&path).ok().as_deref() != Some(run.text.as_str()) {
        fs::write(&path, &run.text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn load_params(run: &Loaded, ckpt: Option<&Path>) -> Result<(ModelConfig, ParameterStore<f32>), Failure> {
    let model = run.cfg.model_config().map_err(usage)?;
    let path = ckpt.map_or_else(|| run.out().join("best.ckpt"), Path::to_path_buf);
    let template = model.init(run.cfg.seed)?;
    let params = Checkpoint::load(&path)?
        .params(run.hash(), &template)
        .with_context(|| format!("{} does not belong to this config", path.display()))?;
    Ok((model, params))
}

fn stem(path: &Path) -> anyhow::Result<&str> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("{}: no usable file name", path.display()))
}

fn cmd_train(common: &Common, resume: Option<&Path>) -> Outcome {
    let run = load(common)?;
    let mut trainer = Trainer::from_config(&run.cfg, run.hash())?;
    create_out(run.out())?;
    copy_config(&run)?;
    let mut log = Vec::new();
    if let Some(path) = resume {
        trainer.resume(&Checkpoint::load(path)?)?;
        let log_path = run.out().join("log.csv");
        if log_path.exists() {
            log = read_log(&log_path)?;
            log.retain(|r: &LogRow| r.step <= trainer.state.step);
        }
        info!("resuming at step {}", trainer.state.step);
    }
    info!(
        "training {} steps on {} samples, validating on {}",
        trainer.total_steps(),
        trainer.train_set.len(),
        trainer.val_set.len()
    );
    trainer.run(Some(run.out()), log, |row| {
        if let (Some(dsc), Some(iou)) = (row.val_dsc, row.val_iou) {
            info!(
                "step {:>6}  lr {:.3e}  loss {:.5}  val dsc {dsc:.4}  iou {iou:.4}",
                row.step, row.lr, row.train_loss
            );
        }
    })?;
    println!("best val DSC {:.4}", trainer.state.best_val_dsc);
    Ok(())
}

fn cmd_eval(common: &Common, ckpt: Option<&Path>, which: SplitName) -> Outcome {
    let run = load(common)?;
    let data = run.cfg.datasets()?;
    let (model, params) = load_params(&run, ckpt)?;
    let (samples, name) = match which {
        SplitName::Train => (data.train, "train"),
        SplitName::Val => (data.val, "val"),
        SplitName::Test => (data.test, "test"),
    };
    if samples.is_empty() {
        return Err(anyhow!("the {name} split is empty").into());
    }
    let result = evaluate(&model, &params, &samples)?;
    create_out(run.out())?;
    let csv = run.out().join(format!("eval_{name}.csv"));
    let file = fs::File::create(&csv).with_context(|| format!("cannot write {}", csv.display()))?;
    result.write_csv(file)?;
    println!("{name}: DSC {:.4}  IoU {:.4}  ({} images)", result.dsc, result.iou, result.per_image.len());
    Ok(())
}

fn cmd_predict(common: &Common, ckpt: Option<&Path>, prob: bool, images: &[PathBuf]) -> Outcome {
    let run = load(common)?;
    let (model, params) = load_params(&run, ckpt)?;
    create_out(run.out())?;
    for path in images {
        let image = load_image(path, model.encoder.in_channels)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let logits = infer(&model, &params, &image.reshape(&[1, model.encoder.in_channels, h, w])?)?.logits;
        let name = stem(path)?;
        let mask = logits.data().iter().map(|&z| if z > 0.0 { 255 } else { 0 }).collect();
        save_gray(&run.out().join(format!("{name}_mask.png")), w, h, mask)?;
        if prob {
            let p: Vec<f32> = logits.data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
            save_gray(&run.out().join(format!("{name}_prob.png")), w, h, to_u8(&p))?;
        }
        info!("{}: {w}x{h}", path.display());
    }
    Ok(())
}

fn cmd_viz_moe(common: &Common, ckpt: Option<&Path>, path: &Path) -> Outcome {
    let run = load(common)?;
    let (model, params) = load_params(&run, ckpt)?;
    let c = model.encoder.in_channels;
    let image = load_image(path, c)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let weights: Tensor<f32> = infer(&model, &params, &image.reshape(&[1, c, h, w])?)?.weights;
    // Weights live on the padded half-resolution grid; keep the part over
    // the image.
    let (gh, gw) = (weights.shape()[2], weights.shape()[3]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    create_out(run.out())?;
    let name = stem(path)?;
    for i in 0..STAGES {
        let plane = &weights.data()[i * gh * gw..(i + 1) * gh * gw];
        let cropped: Vec<f32> = (0..oh).flat_map(|y| plane[y * gw..y * gw + ow].iter().copied()).collect();
        save_gray(&run.out().join(format!("{name}_moe_{}.png", i + 1)), ow, oh, to_u8(&cropped))?;
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common, sample: Option<usize>, fault: Option<&str>) -> Outcome {
    let model = match &common.config {
        Some(_) => load(common)?.cfg.model_config().map_err(usage)?,
        None => ModelConfig::tiny(1),
    };
    if let Some(op) = fault {
        let op = OP_NAMES.iter().find(|&&n| n == op).ok_or_else(|| usage(anyhow!("unknown op `{op}`")))?;
        inject_fault(Some(op));
    }
    let mut failed = 0;
    println!("{:<18} {:>8} {:>12}", "check", "elements", "max rel err");
    let mut row = |name: &str, checked: usize, err: f64, tol: f64| {
        let ok = err < tol;
        failed += usize::from(!ok);
        println!("{name:<18} {checked:>8} {err:>12.3e}  {}", if ok { "ok" } else { "FAIL" });
    };
    for op in OP_NAMES {
        let r = check_op(op)?;
        row(op, r.checked, r.max_rel_err, OP_TOL);
    }
    let seed = common.seed.unwrap_or(0);
    let r = end_to_end_check(&model, seed, sample)?;
    row("end_to_end", r.checked, r.max_rel_err, NETWORK_TOL);
    inject_fault(None);
    if failed > 0 {
        return Err(anyhow!("{failed} gradient check(s) above tolerance").into());
    }
    Ok(())
}

fn list(v: [usize; STAGES]) -> String {
    format!("[{}]", v.map(|x| x.to_string()).join(","))
}

fn per_stage_cell(v: [usize; STAGES]) -> String {
    if v.iter().all(|&x| x == v[0]) {
        v[0].to_string()
    } else {
        list(v)
    }
}

fn cmd_ablate(common: &Common, ps: &[usize], ls: &[PerStage]) -> Outcome {
    let run = load(common)?;
    if ps.is_empty() && ls.is_empty() {
        return Err(usage(anyhow!("give at least one --p or --l value")));
    }
    let mut variants = Vec::new();
    for &p in ps {
        let mut cfg = run.cfg.clone();
        cfg.model.context = Some(PerStage::All(p));
        variants.push(("P", cfg));
    }
    for &l in ls {
        let mut cfg = run.cfg.clone();
        cfg.model.large_patch = Some(l);
        variants.push(("L", cfg));
    }
    // Reject every bad variant before training any.
    let mut models = Vec::new();
    for (i, (sweep, cfg)) in variants.iter_mut().enumerate() {
        cfg.out = run.out().join(format!("{i:02}_{sweep}"));
        let model = cfg.model_config().map_err(|e| usage(anyhow!("variant {i} ({sweep} sweep): {e}")))?;
        models.push(model);
    }
    create_out(run.out())?;
    copy_config(&run)?;
    let csv_path = run.out().join("ablation.csv");
    let mut csv = csv::Writer::from_path(&csv_path).with_context(|| format!("cannot write {}", csv_path.display()))?;
    csv.write_record(["sweep", "L", "P", "dsc", "iou"])?;
    for ((sweep, cfg), model) in variants.iter().zip(&models) {
        let text = cfg.to_text();
        let variant = Loaded { cfg: cfg.clone(), text };
        create_out(variant.out())?;
        copy_config(&variant)?;
        let mut trainer = Trainer::from_config(cfg, variant.hash())?;
        trainer.run(Some(variant.out()), Vec::new(), |_| {})?;
        let test = cfg.datasets()?.test;
        let result = trainer.evaluate(&test)?;
        let l = model.encoder.patches.map(|p| p.large);
        let p = model.encoder.patches.map(|p| p.context);
        info!("{sweep} sweep  L {}  P {}  DSC {:.4}  IoU {:.4}", list(l), per_stage_cell(p), result.dsc, result.iou);
        csv.write_record([sweep.to_string(), list(l), per_stage_cell(p), result.dsc.to_string(), result.iou.to_string()])?;
        csv.flush()?;
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let common = &cli.common;
    let outcome = match &cli.command {
        Command::Train { resume } => cmd_train(common, resume.as_deref()),
        Command::Eval { ckpt, split } => cmd_eval(common, ckpt.as_deref(), *split),
        Command::Predict { ckpt, prob, images } => cmd_predict(common, ckpt.as_deref(), *prob, images),
        Command::VizMoe { ckpt, image } => cmd_viz_moe(common, ckpt.as_deref(), image),
        Command::Gradcheck { sample, inject_fault } => cmd_gradcheck(common, *sample, inject_fault.as_deref()),
        Command::Ablate { p, l } => cmd_ablate(common, p, l),
    };
    let (e, code) = match outcome {
        Ok(()) => return ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => (e, 2),
        Err(Failure::Runtime(e)) => (e, 1),
    };
    eprintln!("error: {}", describe(&e));
    ExitCode::from(code)
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain().map(|c| c.to_string()) {
        if !text.contains(&cause) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&cause);
        }
    }
    text
}
