//! Accuracy and confidence reports, the component ablation grid, the
//! diffusion-step sweep, and embedding export for external projection.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::llformer::probabilities;
use crate::model::{inference_batch, Stage1Model, Stage2Model, Stage2Toggles};
use crate::nn::ParamStore;
use crate::training::{train_stage2, Checkpoint, RunOptions, TrainConfig};

/// Accuracy and confidence over one group of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub n: usize,
    pub accuracy: f64,
    /// Mean max-softmax probability over correctly classified samples.
    pub mean_confidence_correct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub n: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub mean_confidence_correct: Option<f64>,
    pub low_light: SubsetReport,
    pub clear: Option<SubsetReport>,
    pub stage: u8,
    pub t_steps: Option<usize>,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

fn subset(labels: &[usize], probs: &[Vec<f64>]) -> SubsetReport {
    let mut correct = 0;
    let mut conf = 0.0;
    for (l, p) in labels.iter().zip(probs) {
        if argmax(p) == *l {
            correct += 1;
            conf += p[*l];
        }
    }
    SubsetReport {
        n: labels.len(),
        accuracy: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
        mean_confidence_correct: (correct > 0).then(|| conf / correct as f64),
    }
}

impl EvalReport {
    /// Builds the report from per-sample class probabilities. Ties go to the
    /// lowest class index.
    pub fn from_probabilities(
        class_names: &[String],
        labels: &[usize],
        probs: &[Vec<f64>],
        clear: Option<(&[usize], &[Vec<f64>])>,
    ) -> Result<Self> {
        let m = class_names.len();
        if labels.len() != probs.len() {
            return Err(Error::shape("evaluate", labels.len(), probs.len()));
        }
        let mut confusion = vec![vec![0usize; m]; m];
        for (l, p) in labels.iter().zip(probs) {
            if *l >= m || p.len() != m {
                return Err(Error::InvalidInput(format!(
                    "label {l} or probability width {} outside {m} classes",
                    p.len()
                )));
            }
            confusion[*l][argmax(p)] += 1;
        }
        let n = labels.len();
        let trace: usize = (0..m).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[i] as f64 / total as f64)
            })
            .collect();
        let low_light = subset(labels, probs);
        Ok(Self {
            class_names: class_names.to_vec(),
            n,
            accuracy: if n == 0 { 0.0 } else { trace as f64 / n as f64 },
            per_class_accuracy,
            confusion,
            mean_confidence_correct: low_light.mean_confidence_correct,
            low_light,
            clear: clear.map(|(l, p)| subset(l, p)),
            stage: 0,
            t_steps: None,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("accuracy {:.4} over {} samples (stage {}", self.accuracy, self.n, self.stage);
        if let Some(t) = self.t_steps {
            s.push_str(&format!(", T={t}"));
        }
        s.push_str(")\n");
        let conf = |c: Option<f64>| c.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "low-light: acc {:.4}, confidence(correct) {}\n",
            self.low_light.accuracy,
            conf(self.low_light.mean_confidence_correct)
        ));
        if let Some(c) = &self.clear {
            s.push_str(&format!(
                "clear:     acc {:.4}, confidence(correct) {}\n",
                c.accuracy,
                conf(c.mean_confidence_correct)
            ));
        }
        let w = self.class_names.iter().map(String::len).max().unwrap_or(5).max(5);
        s.push_str(&format!("{:w$} {:>7} |", "class", "acc"));
        for i in 0..self.class_names.len() {
            s.push_str(&format!(" {i:>4}"));
        }
        s.push('\n');
        for (i, name) in self.class_names.iter().enumerate() {
            let acc = self.per_class_accuracy[i].map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!("{name:w$} {acc:>7} |"));
            for v in &self.confusion[i] {
                s.push_str(&format!(" {v:>4}"));
            }
            s.push('\n');
        }
        s
    }
}

/// A checkpoint rebuilt for inference.
pub enum Classifier {
    Stage1(Box<Stage1Model>),
    Stage2(Box<Stage2Model>),
}

/// Per-sample outputs of one pass over a sample list.
pub struct Predictions {
    pub probs: Vec<Vec<f64>>,
    pub prior: Vec<Vec<f32>>,
    pub penultimate: Vec<Vec<f32>>,
}

impl Classifier {
    /// Rebuilds the model stored in `ckpt`; `t_steps` overrides the stage-2
    /// diffusion step count.
    pub fn from_checkpoint(ckpt: &Checkpoint, t_steps: Option<usize>) -> Result<Self> {
        let model = ckpt.model();
        let mut store = ParamStore::from_tensors(ckpt.tensors.clone(), ckpt.dtype(), ckpt.meta.train.seed)?;
        match ckpt.stage() {
            1 => {
                ckpt.validate_stage1(None)?;
                Ok(Self::Stage1(Box::new(Stage1Model::new(&mut store, model)?)))
            }
            2 => {
                let toggles = ckpt.meta.toggles.unwrap_or_default();
                let t = t_steps.unwrap_or(ckpt.meta.train.t_steps);
                if t == 0 {
                    return Err(Error::InvalidInput("T must be at least 1".into()));
                }
                Ok(Self::Stage2(Box::new(Stage2Model::new(&mut store, model, toggles, t, ckpt.meta.train.variant)?)))
            }
            s => Err(Error::Checkpoint(format!("unknown stage {s}"))),
        }
    }

    pub fn stage(&self) -> u8 {
        match self {
            Self::Stage1(_) => 1,
            Self::Stage2(_) => 2,
        }
    }

    pub fn t_steps(&self) -> Option<usize> {
        match self {
            Self::Stage1(_) => None,
            Self::Stage2(m) => m.steps(),
        }
    }

    /// Label-free pass in fixed-size chunks. Stage-2 starting noise comes
    /// from a single stream seeded with `seed`.
    pub fn run(&self, samples: &[Sample], dtype: DType, seed: u64) -> Result<Predictions> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Predictions { probs: Vec::new(), prior: Vec::new(), penultimate: Vec::new() };
        let rows = |t: &Tensor| -> Result<Vec<Vec<f32>>> { Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?) };
        for chunk in samples.chunks(EVAL_BATCH) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = inference_batch(&refs, dtype)?;
            let (logits, prior) = match self {
                Self::Stage1(m) => {
                    let prior = m.prior(&batch.images)?;
                    (m.llformer.forward(&batch.images, &batch.landmarks, &prior)?, prior)
                }
                Self::Stage2(m) => {
                    let o = m.infer(&batch, &mut rng)?;
                    (o.logits, o.prior)
                }
            };
            out.probs.extend(probabilities(&logits.logits)?.to_dtype(DType::F64)?.to_vec2::<f64>()?);
            out.prior.extend(rows(&prior)?);
            out.penultimate.extend(rows(&logits.embedding)?);
        }
        Ok(out)
    }
}

const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Stage-2 diffusion steps; `None` uses the training value.
    pub t_steps: Option<usize>,
    pub seed: u64,
    /// Restricts both datasets to one split.
    pub split: Option<Split>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { t_steps: None, seed: 0, split: None }
    }
}

fn restrict(data: &Dataset, split: Option<Split>) -> Dataset {
    match split {
        Some(s) => data.split(s),
        None => data.clone(),
    }
}

fn check_classes(ckpt: &Checkpoint, data: &Dataset) -> Result<()> {
    let (a, b) = (ckpt.model().n_classes(), data.n_classes());
    if a != b {
        return Err(Error::InvalidInput(format!("checkpoint predicts {a} classes but the dataset has {b}")));
    }
    Ok(())
}

fn evaluate_with(
    net: &Classifier,
    ckpt: &Checkpoint,
    low_light: &Dataset,
    clear: Option<&Dataset>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let dtype = ckpt.dtype();
    let ll = restrict(low_light, opts.split);
    let preds = net.run(&ll.samples, dtype, opts.seed)?;
    let clear_data = clear.map(|c| restrict(c, opts.split));
    let clear_preds = match &clear_data {
        Some(c) => Some((c.labels(), net.run(&c.samples, dtype, opts.seed)?.probs)),
        None => None,
    };
    let mut report = EvalReport::from_probabilities(
        &ckpt.model().class_names,
        &ll.labels(),
        &preds.probs,
        clear_preds.as_ref().map(|(l, p)| (l.as_slice(), p.as_slice())),
    )?;
    report.stage = net.stage();
    report.t_steps = net.t_steps();
    Ok(report)
}

/// Classifies `low_light` (and `clear`, reported as a separate subset) with
/// the label-free path of `ckpt`.
pub fn evaluate(
    ckpt: &Checkpoint,
    low_light: &Dataset,
    clear: Option<&Dataset>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_classes(ckpt, low_light)?;
    if let Some(c) = clear {
        check_classes(ckpt, c)?;
    }
    let net = Classifier::from_checkpoint(ckpt, opts.t_steps)?;
    evaluate_with(&net, ckpt, low_light, clear, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    V1,
    V2,
    V3,
    V4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::V1, Variant::V2, Variant::V3, Variant::V4];

    /// Component switches of each row.
    pub fn toggles(self) -> Stage2Toggles {
        let (diffusion, total_loss, insert_noise) = match self {
            Variant::V1 => (false, false, false),
            Variant::V2 => (true, true, true),
            Variant::V3 => (true, false, false),
            Variant::V4 => (true, false, true),
        };
        Stage2Toggles { diffusion, total_loss, insert_noise }
    }

    /// Full-scale reference accuracy (%), for context only.
    pub fn reference_accuracy(self) -> f64 {
        match self {
            Variant::V1 => 89.46,
            Variant::V2 => 91.67,
            Variant::V3 => 92.16,
            Variant::V4 => 92.97,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub toggles: Stage2Toggles,
    pub accuracy: f64,
    pub built_denoiser: bool,
    pub built_schedule: bool,
    pub final_train_accuracy: f64,
    pub first_epoch_kl: Option<f64>,
    pub last_epoch_kl: Option<f64>,
    /// Full-scale published accuracy; not an expectation for desk runs.
    pub reference_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
    pub evaluated_split: Option<Split>,
    pub reference_note: String,
}

impl AblationGrid {
    pub fn to_table(&self) -> String {
        let mark = |b: bool| if b { "x" } else { " " };
        let mut s = String::from("variant | diffusion | L_total | insert noise | accuracy | reference\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:7} |     {}     |    {}    |      {}       |  {:6.2}% |  {:.2}%\n",
                r.variant.to_string(),
                mark(r.toggles.diffusion),
                mark(r.toggles.total_loss),
                mark(r.toggles.insert_noise),
                100.0 * r.accuracy,
                r.reference_accuracy
            ));
        }
        s.push_str(&self.reference_note);
        s.push('\n');
        s
    }
}

/// Trains and evaluates the four stage-2 variants from one stage-1
/// checkpoint. Evaluation uses the test split when present, else train.
pub fn ablation_run(base: &TrainConfig, s1: &Checkpoint, data: &Dataset, opts: &RunOptions) -> Result<AblationGrid> {
    s1.validate_stage1(None)?;
    check_classes(s1, data)?;
    let split = if data.samples.iter().any(|s| s.split == Split::Test) { Some(Split::Test) } else { None };
    let mut rows = Vec::with_capacity(4);
    for v in Variant::ALL {
        let mut cfg = base.clone();
        cfg.toggles = v.toggles();
        let run_opts = RunOptions {
            log_path: opts.log_path.as_ref().map(|p| suffixed(p, &v.to_string().to_lowercase())),
            snapshot_dir: opts.snapshot_dir.clone(),
        };
        log::info!("ablation {v}: {:?}", cfg.toggles);
        let out = train_stage2(&cfg, s1, data, &run_opts)?;
        let net = Classifier::from_checkpoint(&out.checkpoint, None)?;
        let (built_denoiser, built_schedule) = match &net {
            Classifier::Stage2(m) => (m.denoiser.is_some(), m.schedule.is_some()),
            Classifier::Stage1(_) => (false, false),
        };
        let eval_opts = EvalOptions { t_steps: None, seed: cfg.seed, split };
        let report = evaluate_with(&net, &out.checkpoint, data, None, &eval_opts)?;
        rows.push(AblationRow {
            variant: v,
            toggles: cfg.toggles,
            accuracy: report.accuracy,
            built_denoiser,
            built_schedule,
            final_train_accuracy: out.final_train_accuracy,
            first_epoch_kl: out.epochs.first().and_then(|e| e.mean_kl),
            last_epoch_kl: out.epochs.last().and_then(|e| e.mean_kl),
            reference_accuracy: v.reference_accuracy(),
        });
    }
    Ok(AblationGrid {
        rows,
        evaluated_split: split,
        reference_note: "reference: published full-scale accuracies, shown for context only; desk-scale runs are not expected to match"
            .into(),
    })
}

fn suffixed(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}.{tag}{ext}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t_steps: usize,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub trained_t: usize,
    pub retrained: bool,
    pub rows: Vec<SweepRow>,
    /// Prior estimates per row, each `n × C`, for projection plots.
    #[serde(skip)]
    pub priors: Vec<Vec<Vec<f32>>>,
}

fn check_t_list(ts: &[usize]) -> Result<()> {
    if ts.is_empty() || ts.contains(&0) {
        return Err(Error::InvalidInput(format!("T list must be non-empty with every T >= 1, got {ts:?}")));
    }
    Ok(())
}

/// Re-runs stage-2 inference at each `T` with the matching default schedule.
pub fn iteration_sweep(ckpt: &Checkpoint, data: &Dataset, ts: &[usize], opts: &EvalOptions) -> Result<SweepReport> {
    check_t_list(ts)?;
    if ckpt.stage() != 2 {
        return Err(Error::Checkpoint("the step sweep needs a stage-2 checkpoint".into()));
    }
    if !ckpt.meta.toggles.unwrap_or_default().diffusion {
        return Err(Error::Config("the step sweep needs a checkpoint trained with diffusion".into()));
    }
    check_classes(ckpt, data)?;
    let mut rows = Vec::with_capacity(ts.len());
    let mut priors = Vec::with_capacity(ts.len());
    for &t in ts {
        let start = Instant::now();
        let net = Classifier::from_checkpoint(ckpt, Some(t))?;
        let ll = restrict(data, opts.split);
        let preds = net.run(&ll.samples, ckpt.dtype(), opts.seed)?;
        let report = EvalReport::from_probabilities(&ckpt.model().class_names, &ll.labels(), &preds.probs, None)?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!("T={t}: accuracy {:.4} in {seconds:.2}s", report.accuracy);
        rows.push(SweepRow { t_steps: t, accuracy: report.accuracy, seconds });
        priors.push(preds.prior);
    }
    Ok(SweepReport { trained_t: ckpt.meta.train.t_steps, retrained: false, rows, priors })
}

/// Trains a fresh stage-2 model per `T` and evaluates it at that `T`.
pub fn retrain_sweep(
    base: &TrainConfig,
    s1: &Checkpoint,
    data: &Dataset,
    ts: &[usize],
    opts: &EvalOptions,
) -> Result<SweepReport> {
    check_t_list(ts)?;
    let mut rows = Vec::with_capacity(ts.len());
    let mut priors = Vec::with_capacity(ts.len());
    for &t in ts {
        let start = Instant::now();
        let cfg = TrainConfig { t_steps: t, ..base.clone() };
        let out = train_stage2(&cfg, s1, data, &RunOptions::default())?;
        let net = Classifier::from_checkpoint(&out.checkpoint, None)?;
        let ll = restrict(data, opts.split);
        let preds = net.run(&ll.samples, out.checkpoint.dtype(), opts.seed)?;
        let report = EvalReport::from_probabilities(&s1.model().class_names, &ll.labels(), &preds.probs, None)?;
        rows.push(SweepRow { t_steps: t, accuracy: report.accuracy, seconds: start.elapsed().as_secs_f64() });
        priors.push(preds.prior);
    }
    Ok(SweepReport { trained_t: base.t_steps, retrained: true, rows, priors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingLayer {
    Epd,
    Penultimate,
}

impl std::str::FromStr for EmbeddingLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epd" => Ok(Self::Epd),
            "penultimate" => Ok(Self::Penultimate),
            _ => Err(Error::Config(format!("layer: expected epd or penultimate, got {s:?}"))),
        }
    }
}

/// Header written next to a raw embedding array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_order: String,
    pub layer: EmbeddingLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub rows: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub low_light: Vec<bool>,
    pub layer: EmbeddingLayer,
}

impl EmbeddingExport {
    pub fn header(&self) -> ArrayHeader {
        ArrayHeader {
            dtype: "f32".into(),
            shape: vec![self.rows.len(), self.rows.first().map_or(0, Vec::len)],
            byte_order: "little".into(),
            layer: self.layer,
        }
    }

    /// Writes `<stem>.bin`, `<stem>.json` and `<stem>.labels.csv`; returns
    /// the three paths.
    pub fn write(&self, stem: &Path) -> Result<[PathBuf; 3]> {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let labels = stem.with_extension("labels.csv");
        let bytes: Vec<u8> = self.rows.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        std::fs::write(&json, serde_json::to_string_pretty(&self.header())?).map_err(|e| Error::io(&json, e))?;
        let mut f = std::fs::File::create(&labels).map_err(|e| Error::io(&labels, e))?;
        writeln!(f, "row,label,low_light").map_err(|e| Error::io(&labels, e))?;
        for (i, (l, d)) in self.labels.iter().zip(&self.low_light).enumerate() {
            writeln!(f, "{i},{l},{}", u8::from(*d)).map_err(|e| Error::io(&labels, e))?;
        }
        Ok([bin, json, labels])
    }

    /// Reads an array written by [`EmbeddingExport::write`].
    pub fn read_array(stem: &Path) -> Result<(ArrayHeader, Vec<f32>)> {
        let json = stem.with_extension("json");
        let bin = stem.with_extension("bin");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let header: ArrayHeader = serde_json::from_str(&text)?;
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if data.len() != header.shape.iter().product::<usize>() {
            return Err(Error::shape("read_array", format!("{:?}", header.shape), data.len()));
        }
        Ok((header, data))
    }
}

/// Row-aligned embeddings, labels and low-light flags for `low_light`
/// followed by `clear`.
pub fn export_embeddings(
    ckpt: &Checkpoint,
    low_light: &Dataset,
    clear: Option<&Dataset>,
    layer: EmbeddingLayer,
    opts: &EvalOptions,
) -> Result<EmbeddingExport> {
    check_classes(ckpt, low_light)?;
    let net = Classifier::from_checkpoint(ckpt, opts.t_steps)?;
    let mut out = EmbeddingExport { rows: Vec::new(), labels: Vec::new(), low_light: Vec::new(), layer };
    let mut groups = vec![(restrict(low_light, opts.split), true)];
    if let Some(c) = clear {
        check_classes(ckpt, c)?;
        groups.push((restrict(c, opts.split), false));
    }
    for (data, flag) in groups {
        let p = net.run(&data.samples, ckpt.dtype(), opts.seed)?;
        out.rows.extend(match layer {
            EmbeddingLayer::Epd => p.prior,
            EmbeddingLayer::Penultimate => p.penultimate,
        });
        out.labels.extend(data.labels());
        out.low_light.extend(std::iter::repeat_n(flag, data.len()));
    }
    Ok(out)
}
