//! `somgen`: dataset generation, training, evaluation, transfer and cost
//! reporting for the radio-map model.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use somgen::config::{Profile, RunConfig};
use somgen::dataset::{build_dataset, ConditionTag, Dataset, Sample, Split};
use somgen::model::Model;
use somgen::trainer::{evaluate_nmse, few_shot_transfer, predict_db, report_costs, train, write_metrics};
use somgen::{Error, ErrorCategory, Result};

#[derive(Parser)]
#[command(name = "somgen", version, about = "Radio maps from aerial RGB-D imagery")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing fields come from the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Base profile: desk or paper.
    #[arg(long, default_value = "desk")]
    profile: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesise a dataset tree with manifest and split.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training conditions and write a checkpoint directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// NMSE on the test split, optionally with rendered maps.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Few-shot fine-tuning curve on the transfer target.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter counts and step timings.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Training => 4,
            })
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { common, out } => {
            let cfg = resolve(&common)?;
            let manifest = build_dataset(&cfg.dataset, cfg.seed, &out)?;
            let counts = manifest.split_counts();
            emit(&json!({ "records": manifest.records.len(), "splits": counts }), None, "")
        }
        Cmd::Train { common, dataset, out } => {
            let cfg = resolve(&common)?;
            let ds = Dataset::open(&dataset)?;
            let sources = cfg.training_conditions();
            let mut model = Model::<f32>::new(&cfg.model)?;
            let train_set = load(&ds, Split::Train, &sources, &model)?;
            let val = load(&ds, Split::Val, &sources, &model)?;
            let report = train(&mut model, &train_set, &val, &cfg.train.cfg)?;
            model.save(&out)?;
            write_metrics(&out.join("metrics.jsonl"), &report.metrics)?;
            let mut run = cfg.clone();
            run.train.conditions = sources;
            write_text(&out.join("run.json"), &run.to_json())?;
            let summary = json!({
                "steps": report.steps,
                "epochs_run": report.epochs_run,
                "best_epoch": report.best_epoch,
                "best_val_mse": report.best_val_mse,
                "final_train_mse": report.train_mse.last(),
                "n_train": train_set.len(),
                "n_val": val.len(),
            });
            emit(&summary, Some(&out), "train_report.json")
        }
        Cmd::Eval { common, checkpoint, dataset, out } => {
            let cfg = resolve(&common)?;
            let mut model = Model::<f32>::load(&checkpoint)?;
            let ds = Dataset::open(&dataset)?;
            let test = load(&ds, Split::Test, &cfg.training_conditions(), &model)?;
            let report = evaluate_nmse(&mut model, &test, cfg.train.cfg.batch_size)?;
            if let Some(dir) = &out {
                let n = cfg.output.render_maps.min(test.len());
                let preds = predict_db(&mut model, &test[..n], cfg.train.cfg.batch_size)?;
                let maps = dir.join("maps");
                std::fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
                for (s, p) in test.iter().zip(&preds) {
                    render_pair(&maps.join(format!("{}.png", s.id)), p, &s.target_db, model.cfg.output_side())?;
                }
            }
            emit(&report, out.as_deref(), "eval.json")
        }
        Cmd::Transfer { common, checkpoint, dataset, out } => {
            let cfg = resolve(&common)?;
            let model = Model::<f32>::load(&checkpoint)?;
            let ds = Dataset::open(&dataset)?;
            let target = [cfg.transfer.target];
            let mut pool = load(&ds, Split::Train, &target, &model)?;
            pool.extend(load(&ds, Split::Val, &target, &model)?);
            let test = load(&ds, Split::Test, &target, &model)?;
            let curve = few_shot_transfer(&model, &cfg.transfer_plan(), &pool, &test, &cfg.train.cfg)?;
            emit(&curve, out.as_deref(), "transfer.json")
        }
        Cmd::Report { common, checkpoint, out } => {
            let cfg = resolve(&common)?;
            let model = match &checkpoint {
                Some(dir) => Model::<f32>::load(dir)?,
                None => Model::<f32>::new(&cfg.model)?,
            };
            let costs = report_costs(&model, cfg.output.timing_steps, cfg.train.cfg.batch_size)?;
            emit(&costs, out.as_deref(), "costs.json")
        }
    }
}

/// Profile, then config file, then `SOMGEN_*` variables, then `--seed`.
fn resolve(common: &Common) -> Result<RunConfig> {
    let profile: Profile = common.profile.parse()?;
    let mut doc = serde_json::to_value(RunConfig::profile(profile))?;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let file: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut doc, file);
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    cfg = cfg.apply_env(std::env::vars())?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn load(ds: &Dataset, split: Split, conditions: &[ConditionTag], model: &Model<f32>) -> Result<Vec<Sample>> {
    let samples = ds.load(
        split,
        |c| conditions.contains(c),
        model.cfg.embed.depth_scale_m,
        model.cfg.output_side(),
    )?;
    let r = model.cfg.embed.resolution;
    if let Some(s) = samples.first() {
        if s.rgb.dim().1 != r {
            return Err(Error::ConfigMismatch(format!(
                "dataset images are {} px but the model expects {r} px",
                s.rgb.dim().1
            )));
        }
    }
    Ok(samples)
}

fn emit<T: serde::Serialize>(value: &T, dir: Option<&Path>, name: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join(name), &text)?;
    }
    // A closed stdout (e.g. piped into `head`) is not an error.
    let _ = writeln!(std::io::stdout(), "{text}");
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, format!("{text}\n")).map_err(|e| Error::io(path, e))
}

/// Prediction on the left, ground truth on the right, dB as grey level.
fn render_pair(path: &Path, pred: &[f64], truth: &[f32], side: usize) -> Result<()> {
    let mut pixels = vec![0u8; 2 * side * side];
    for y in 0..side {
        for x in 0..side {
            let i = y * side + x;
            pixels[y * 2 * side + x] = pred[i].round().clamp(0.0, 255.0) as u8;
            pixels[y * 2 * side + side + x] = truth[i].round().clamp(0.0, 255.0) as u8;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), (2 * side) as u32, side as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()
        .and_then(|mut w| w.write_image_data(&pixels))
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}
