//! `llfer` command-line entry point.

mod plot;
mod record;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use llfer::data::{load_dataset, synth_toy_splits, Dataset, LoadOptions, Split};
use llfer::degrade::{degrade_dataset, histogram, DegradeParams, EntryStatus, Histogram, HIST_BINS, MANIFEST_FILE};
use llfer::eval::{
    ablation_run, evaluate, export_embeddings, iteration_sweep, retrain_sweep, EmbeddingExport, EmbeddingLayer,
    EvalOptions,
};
use llfer::raster::Image;
use llfer::training::{parse_flat_config, train_stage1, train_stage2, Checkpoint, RunOptions, Settings};

use record::{hash_inputs, output_root, RunRecord};

#[derive(Parser)]
#[command(
    name = "llfer",
    version,
    about = "Low-light facial expression recognition: data synthesis, two-stage training, evaluation"
)]
#[command(
    after_help = "Outputs default to $LLFER_OUT (or ./llfer-out); every run appends one record to runs.jsonl there."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Training settings shared by the training-type subcommands.
#[derive(Args, Clone, Default)]
struct TrainArgs {
    /// Flat TOML file of `key = value` settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed for initialization, batch order and noise.
    #[arg(long)]
    seed: Option<u64>,
    /// desk or paper.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Diffusion steps for stage 2.
    #[arg(long = "T")]
    t_steps: Option<usize>,
    /// Reverse-step form: paper or ddpm_bar.
    #[arg(long)]
    variant: Option<String>,
    /// Extra setting as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl TrainArgs {
    fn cli_pairs(&self) -> Result<Vec<(String, String)>> {
        let mut kv = Vec::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            kv.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        push("profile", self.profile.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("max_steps", self.max_steps.map(|v| v.to_string()));
        push("T", self.t_steps.map(|v| v.to_string()));
        push("variant", self.variant.clone());
        Ok(kv)
    }

    fn resolve(&self) -> Result<Settings> {
        let file = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_flat_config(&text).map_err(|e| usage(e.to_string()))?
            }
            None => Vec::new(),
        };
        Settings::resolve(&file, &self.cli_pairs()?).map_err(|e| usage(e.to_string()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a low-light twin of every image in a dataset directory.
    ///
    /// Deterministic: identical flags give byte-identical images and manifest.
    Degrade {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        /// Exposure in stops (<= 0).
        #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
        ev: f64,
        /// White-balance gains R,G,B.
        #[arg(long, default_value = "1.0,0.95,0.9")]
        wb: String,
        #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
        highlights: f64,
        #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
        shadows: f64,
        /// Per-image exposure jitter half-width (stops), keyed by seed and path.
        #[arg(long, default_value_t = 0.0)]
        ev_jitter: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the procedural toy dataset as a directory layout.
    ///
    /// Deterministic in --seed.
    SynthToy {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        test_per_class: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also darken the images with the default low-light settings.
        #[arg(long)]
        lowlight: bool,
    },
    /// Train LA-CLIP, the stage-1 prior network and the classifier.
    ///
    /// Deterministic in --seed: reruns reproduce the loss log and checkpoint.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train the image-only prior, the denoiser and the classifier from a stage-1 checkpoint.
    ///
    /// Deterministic in --seed: reruns reproduce the loss log and checkpoint.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        s1_ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Accuracy, confusion matrix and confidence of a checkpoint.
    ///
    /// Deterministic in --seed (stage-2 starting noise).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Low-light dataset.
        #[arg(long)]
        data: PathBuf,
        /// Optional clear counterpart, reported as its own subset.
        #[arg(long)]
        clear: Option<PathBuf>,
        /// train or test; all samples when omitted.
        #[arg(long)]
        split: Option<String>,
        #[arg(long = "T")]
        t_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the four component variants from one stage-1 checkpoint.
    ///
    /// Deterministic in --seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        s1_ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Accuracy of a stage-2 checkpoint at several diffusion step counts.
    ///
    /// Inference-only by default; --retrain trains one stage-2 model per T.
    /// Deterministic in --seed.
    #[command(name = "sweep-T")]
    SweepT {
        #[arg(long)]
        data: PathBuf,
        /// Stage-2 checkpoint (inference-only sweep).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Comma-separated step counts.
        #[arg(long, default_value = "1,2,4,8")]
        t_list: String,
        #[arg(long)]
        retrain: bool,
        /// Stage-1 checkpoint for --retrain.
        #[arg(long)]
        s1_ckpt: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write embeddings (raw f32 array + JSON header) and a labels file for external projection.
    ///
    /// Bit-identical across reruns with the same --seed.
    ExportEmb {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clear: Option<PathBuf>,
        /// epd or penultimate.
        #[arg(long, default_value = "epd")]
        layer: String,
        #[arg(long)]
        split: Option<String>,
        #[arg(long = "T")]
        t_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output stem; `.bin`, `.json` and `.labels.csv` are appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render an SVG figure from a JSON output of another subcommand.
    ///
    /// Deterministic: the figure depends only on the input file.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<plot::PlotKind>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accepted for uniformity; plotting uses no randomness.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Errors in user-supplied flags or config; exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn parse_split(s: &Option<String>) -> Result<Option<Split>> {
    match s.as_deref() {
        None => Ok(None),
        Some("train") => Ok(Some(Split::Train)),
        Some("test") => Ok(Some(Split::Test)),
        Some(o) => Err(usage(format!("--split: expected train or test, got {o:?}"))),
    }
}

fn load(path: &Path, resolution: usize, landmark_count: usize) -> Result<Dataset> {
    load_dataset(path, &LoadOptions { resolution, landmark_count })
        .with_context(|| format!("loading dataset {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn sum_histograms(hs: &[Histogram]) -> Histogram {
    let mut bins = vec![0u64; HIST_BINS];
    let (mut weighted, mut total) = (0.0, 0u64);
    for h in hs {
        for (a, b) in bins.iter_mut().zip(&h.bins) {
            *a += b;
        }
        weighted += h.mean_intensity * h.total() as f64;
        total += h.total();
    }
    Histogram { bins, mean_intensity: if total > 0 { weighted / total as f64 } else { 0.0 } }
}

/// What one subcommand produced, for the run record.
struct Outcome {
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn run(cmd: Command, root: &Path) -> Result<Outcome> {
    match cmd {
        Command::Degrade { src, dst, ev, wb, highlights, shadows, ev_jitter, seed } => {
            let gains: Vec<f64> = wb
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| usage(format!("--wb: expected R,G,B numbers, got {wb:?}")))?;
            let white_balance: [f64; 3] =
                gains.try_into().map_err(|_| usage(format!("--wb: expected three gains, got {wb:?}")))?;
            let params = DegradeParams { exposure_ev: ev, white_balance, highlights, shadows, ev_jitter, seed };
            params.validate().map_err(|e| usage(e.to_string()))?;
            let manifest = degrade_dataset(&src, &dst, &params)?;
            let (mut before, mut after) = (Vec::new(), Vec::new());
            for e in manifest.entries.iter().filter(|e| e.status == EntryStatus::Ok) {
                before.push(histogram(&Image::open(&e.src)?)?);
                if let Some(d) = &e.dst {
                    after.push(histogram(&Image::open(d)?)?);
                }
            }
            let hist_path = dst.join("histograms.json");
            write_json(&hist_path, &json!({ "before": sum_histograms(&before), "after": sum_histograms(&after) }))?;
            eprintln!("degraded {} images, skipped {}", manifest.ok_count(), manifest.skipped_count());
            Ok(Outcome {
                config: serde_json::to_value(&params)?,
                seed: Some(seed),
                inputs: vec![src],
                outputs: vec![dst.join(MANIFEST_FILE), hist_path],
            })
        }
        Command::SynthToy { out, classes, per_class, test_per_class, resolution, seed, lowlight } => {
            let out = out.unwrap_or_else(|| root.join("toy"));
            let mut ds = synth_toy_splits(classes, per_class, test_per_class, resolution, seed)?;
            if lowlight {
                ds = ds.degraded(&DegradeParams { seed, ..DegradeParams::default() })?;
            }
            ds.save(&out)?;
            eprintln!("wrote {} samples to {}", ds.len(), out.display());
            Ok(Outcome {
                config: json!({ "classes": classes, "per_class": per_class, "test_per_class": test_per_class, "resolution": resolution, "lowlight": lowlight }),
                seed: Some(seed),
                inputs: vec![],
                outputs: vec![out],
            })
        }
        Command::TrainStage1 { data, out, train } => {
            let settings = train.resolve()?;
            let probe = LoadOptions::default();
            let ds = load(&data, probe.resolution, probe.landmark_count)?;
            let model = settings
                .model_config(&ds.manifest.class_names, ds.manifest.landmark_count)
                .map_err(|e| usage(e.to_string()))?;
            let ds = if ds.manifest.resolution == model.llformer.resolution {
                ds
            } else {
                load(&data, model.llformer.resolution, model.landmark_count)?
            };
            let out = out.unwrap_or_else(|| root.join("stage1.safetensors"));
            let log_path = out.with_extension("log.jsonl");
            let opts =
                RunOptions { log_path: Some(log_path.clone()), snapshot_dir: out.parent().map(Path::to_path_buf) };
            let outcome = train_stage1(&settings.train, &model, &ds, &opts)?;
            outcome.checkpoint.save(&out)?;
            let summary = out.with_extension("summary.json");
            write_json(
                &summary,
                &json!({ "final_train_accuracy": outcome.final_train_accuracy, "epochs": outcome.epochs }),
            )?;
            println!("stage 1: {} steps, train accuracy {:.4}", outcome.steps.len(), outcome.final_train_accuracy);
            Ok(Outcome {
                config: serde_json::to_value(&settings)?,
                seed: Some(settings.train.seed),
                inputs: vec![data],
                outputs: vec![out, log_path, summary],
            })
        }
        Command::TrainStage2 { data, s1_ckpt, out, train } => {
            let settings = train.resolve()?;
            let s1 = load_ckpt(&s1_ckpt)?;
            let expected = settings
                .model_config(&s1.model().class_names, s1.model().landmark_count)
                .map_err(|e| usage(e.to_string()))?;
            s1.validate_stage1(Some(&expected))?;
            let ds = load(&data, s1.model().llformer.resolution, s1.model().landmark_count)?;
            let out = out.unwrap_or_else(|| root.join("stage2.safetensors"));
            let log_path = out.with_extension("log.jsonl");
            let opts =
                RunOptions { log_path: Some(log_path.clone()), snapshot_dir: out.parent().map(Path::to_path_buf) };
            let outcome = train_stage2(&settings.train, &s1, &ds, &opts)?;
            outcome.checkpoint.save(&out)?;
            let summary = out.with_extension("summary.json");
            write_json(
                &summary,
                &json!({ "final_train_accuracy": outcome.final_train_accuracy, "frozen_intact": outcome.frozen_intact, "epochs": outcome.epochs }),
            )?;
            println!(
                "stage 2: {} steps, train accuracy {:.4}, stage-1 parameters unchanged: {}",
                outcome.steps.len(),
                outcome.final_train_accuracy,
                outcome.frozen_intact.unwrap_or(false)
            );
            Ok(Outcome {
                config: serde_json::to_value(&settings)?,
                seed: Some(settings.train.seed),
                inputs: vec![data, s1_ckpt],
                outputs: vec![out, log_path, summary],
            })
        }
        Command::Eval { ckpt, data, clear, split, t_steps, seed, out } => {
            let c = load_ckpt(&ckpt)?;
            let (res, k) = (c.model().llformer.resolution, c.model().landmark_count);
            let ds = load(&data, res, k)?;
            let clear_ds = clear.as_deref().map(|p| load(p, res, k)).transpose()?;
            let opts = EvalOptions { t_steps, seed, split: parse_split(&split)? };
            let report = evaluate(&c, &ds, clear_ds.as_ref(), &opts)?;
            let out = out.unwrap_or_else(|| root.join("eval.json"));
            write_json(&out, &report)?;
            print!("{}", report.to_table());
            let mut inputs = vec![ckpt, data];
            inputs.extend(clear);
            Ok(Outcome { config: serde_json::to_value(opts)?, seed: Some(seed), inputs, outputs: vec![out] })
        }
        Command::Ablate { data, s1_ckpt, out, train } => {
            let settings = train.resolve()?;
            let s1 = load_ckpt(&s1_ckpt)?;
            let ds = load(&data, s1.model().llformer.resolution, s1.model().landmark_count)?;
            let out = out.unwrap_or_else(|| root.join("ablation.json"));
            let opts = RunOptions {
                log_path: Some(out.with_extension("log.jsonl")),
                snapshot_dir: out.parent().map(Path::to_path_buf),
            };
            let grid = ablation_run(&settings.train, &s1, &ds, &opts)?;
            write_json(&out, &grid)?;
            let table = out.with_extension("txt");
            std::fs::write(&table, grid.to_table())?;
            print!("{}", grid.to_table());
            Ok(Outcome {
                config: serde_json::to_value(&settings)?,
                seed: Some(settings.train.seed),
                inputs: vec![data, s1_ckpt],
                outputs: vec![out, table],
            })
        }
        Command::SweepT { data, ckpt, t_list, retrain, s1_ckpt, split, out, train } => {
            let ts: Vec<usize> = t_list
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| usage(format!("--t-list: expected comma-separated integers, got {t_list:?}")))?;
            if ts.is_empty() || ts.contains(&0) {
                return Err(usage("--t-list: every T must be at least 1"));
            }
            let settings = train.resolve()?;
            let opts = EvalOptions { t_steps: None, seed: settings.train.seed, split: parse_split(&split)? };
            let (report, ds, mut inputs) = if retrain {
                let s1_path = s1_ckpt.ok_or_else(|| usage("--retrain needs --s1-ckpt"))?;
                let s1 = load_ckpt(&s1_path)?;
                let ds = load(&data, s1.model().llformer.resolution, s1.model().landmark_count)?;
                (retrain_sweep(&settings.train, &s1, &ds, &ts, &opts)?, ds, vec![s1_path])
            } else {
                let path = ckpt.ok_or_else(|| usage("sweep-T needs --ckpt (or --retrain with --s1-ckpt)"))?;
                let c = load_ckpt(&path)?;
                let ds = load(&data, c.model().llformer.resolution, c.model().landmark_count)?;
                (iteration_sweep(&c, &ds, &ts, &opts)?, ds, vec![path])
            };
            let labels = match opts.split {
                Some(sp) => ds.split(sp).labels(),
                None => ds.labels(),
            };
            inputs.push(data.clone());
            let out = out.unwrap_or_else(|| root.join("sweep"));
            let json_path = out.join("sweep.json");
            write_json(&json_path, &report)?;
            let mut outputs = vec![json_path];
            for (row, prior) in report.rows.iter().zip(&report.priors) {
                let export = EmbeddingExport {
                    rows: prior.clone(),
                    labels: labels.clone(),
                    low_light: vec![true; labels.len()],
                    layer: EmbeddingLayer::Epd,
                };
                let stem = out.join(format!("prior_T{}", row.t_steps));
                outputs.extend(export.write(&stem)?);
            }
            for r in &report.rows {
                println!("T={:<3} accuracy {:.4} ({:.2}s)", r.t_steps, r.accuracy, r.seconds);
            }
            Ok(Outcome {
                config: json!({ "settings": settings, "t_list": ts, "retrain": retrain }),
                seed: Some(settings.train.seed),
                inputs,
                outputs,
            })
        }
        Command::ExportEmb { ckpt, data, clear, layer, split, t_steps, seed, out } => {
            let layer: EmbeddingLayer = layer.parse().map_err(|e: llfer::Error| usage(e.to_string()))?;
            let c = load_ckpt(&ckpt)?;
            let (res, k) = (c.model().llformer.resolution, c.model().landmark_count);
            let ds = load(&data, res, k)?;
            let clear_ds = clear.as_deref().map(|p| load(p, res, k)).transpose()?;
            let opts = EvalOptions { t_steps, seed, split: parse_split(&split)? };
            let export = export_embeddings(&c, &ds, clear_ds.as_ref(), layer, &opts)?;
            let stem = out.unwrap_or_else(|| root.join("embeddings"));
            let files = export.write(&stem)?;
            println!("exported {} rows of width {}", export.rows.len(), export.header().shape[1]);
            let mut inputs = vec![ckpt, data];
            inputs.extend(clear);
            Ok(Outcome {
                config: json!({ "layer": layer, "eval": opts }),
                seed: Some(seed),
                inputs,
                outputs: files.to_vec(),
            })
        }
        Command::Plot { input, kind, out, seed } => {
            let out = out.unwrap_or_else(|| input.with_extension("svg"));
            plot::render(&input, kind, &out)?;
            Ok(Outcome {
                config: json!({ "kind": kind.map(|k| format!("{k:?}")) }),
                seed,
                inputs: vec![input],
                outputs: vec![out],
            })
        }
    }
}

fn subcommand_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Degrade { .. } => "degrade",
        Command::SynthToy { .. } => "synth-toy",
        Command::TrainStage1 { .. } => "train-stage1",
        Command::TrainStage2 { .. } => "train-stage2",
        Command::Eval { .. } => "eval",
        Command::Ablate { .. } => "ablate",
        Command::SweepT { .. } => "sweep-T",
        Command::ExportEmb { .. } => "export-emb",
        Command::Plot { .. } => "plot",
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<llfer::Error>() {
        Some(llfer::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = output_root();
    let name = subcommand_name(&cli.command);
    let started_at = chrono::Utc::now().to_rfc3339();
    let result = run(cli.command, &root);
    let finished_at = chrono::Utc::now().to_rfc3339();
    let (record, code) = match result {
        Ok(o) => {
            let refs: Vec<&Path> = o.inputs.iter().map(PathBuf::as_path).collect();
            let input_hash = match hash_inputs(&refs) {
                Ok(h) => h,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    return ExitCode::from(1);
                }
            };
            let rec = RunRecord {
                subcommand: name.into(),
                config: o.config,
                seed: o.seed,
                input_hash,
                outputs: o.outputs,
                started_at,
                finished_at,
                status: "ok".into(),
                error: None,
            };
            (rec, 0)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let rec = RunRecord {
                subcommand: name.into(),
                config: serde_json::Value::Null,
                seed: None,
                input_hash: String::new(),
                outputs: vec![],
                started_at,
                finished_at,
                status: "error".into(),
                error: Some(format!("{e:#}")),
            };
            (rec, exit_code(&e))
        }
    };
    if let Err(e) = record.append(&root) {
        eprintln!("error: could not append run record: {e:#}");
        return ExitCode::from(1);
    }
    ExitCode::from(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn explicit_flags_override_set_pairs() {
        let args = TrainArgs { seed: Some(9), set: vec!["seed=3".into(), "lr=0.01".into()], ..Default::default() };
        let s = args.resolve().unwrap();
        assert_eq!(s.train.seed, 9);
        assert_eq!(s.train.lr, 0.01);
        let bad = TrainArgs { set: vec!["nonsense=1".into()], ..Default::default() };
        let e = bad.resolve().unwrap_err();
        assert_eq!(exit_code(&e), 2);
        assert!(e.to_string().contains("nonsense"));
    }
}
