//! Stage-1 and stage-2 optimization loops.

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{parse_flat_config, Precision, Profile, Settings, TrainConfig};
pub use optim::{Adam, LrSchedule};

use crate::data::{Dataset, Sample, Split};
use crate::diffusion::{gaussian, kl_loss, total_loss};
use crate::error::{Error, Result};
use crate::llformer::{ce_loss, predict};
use crate::model::{
    inference_batch, labeled_batch, ModelConfig, Stage1Model, Stage2Model, DENOISER, LACLIP, LLFORMER, PNET_S1, PNET_S2,
};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_align: Option<f64>,
    pub mean_kl: Option<f64>,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub running_accuracy: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    /// Accuracy over the whole training split after the last step.
    pub final_train_accuracy: f64,
    /// Stage 2 only: whether the frozen stage-1 arrays came out bit-identical.
    pub frozen_intact: Option<bool>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// JSON-lines step log.
    pub log_path: Option<PathBuf>,
    /// Where to write a parameter snapshot if the loss goes non-finite.
    pub snapshot_dir: Option<PathBuf>,
}

struct StepLog {
    file: Option<std::fs::File>,
    records: Vec<StepRecord>,
}

impl StepLog {
    fn open(opts: &RunOptions) -> Result<Self> {
        let file = match &opts.log_path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?)
            }
            None => None,
        };
        Ok(Self { file, records: Vec::new() })
    }

    fn push(&mut self, r: StepRecord, opts: &RunOptions) -> Result<()> {
        if let (Some(f), Some(p)) = (self.file.as_mut(), opts.log_path.as_ref()) {
            writeln!(f, "{}", serde_json::to_string(&r)?).map_err(|e| Error::io(p, e))?;
        }
        log::debug!("stage {} step {} loss {:.5}", r.stage, r.step, r.loss);
        self.records.push(r);
        Ok(())
    }
}

fn summarize(epoch: usize, recs: &[StepRecord], correct: usize, seen: usize) -> EpochSummary {
    let n = recs.len().max(1) as f64;
    let mean_opt = |f: fn(&StepRecord) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = recs.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    EpochSummary {
        epoch,
        mean_loss: recs.iter().map(|r| r.loss).sum::<f64>() / n,
        mean_ce: recs.iter().map(|r| r.ce).sum::<f64>() / n,
        mean_align: mean_opt(|r| r.align),
        mean_kl: mean_opt(|r| r.kl),
        running_accuracy: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mini-batch index lists for one epoch. Batches smaller than two are folded
/// into their predecessor so contrastive terms always see a pair.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn training_split(data: &Dataset, model: &ModelConfig) -> Result<Vec<Sample>> {
    if data.manifest.class_names != model.class_names {
        return Err(Error::Dataset(format!(
            "dataset classes {:?} differ from model classes {:?}",
            data.manifest.class_names, model.class_names
        )));
    }
    let train = data.split(Split::Train).samples;
    if train.len() < 2 {
        return Err(Error::Dataset(format!("need at least 2 training samples, found {}", train.len())));
    }
    Ok(train)
}

fn snapshot(store: &ParamStore, meta: CheckpointMeta, step: usize, opts: &RunOptions) -> Result<Error> {
    let dir = opts.snapshot_dir.clone().unwrap_or_else(std::env::temp_dir);
    let path = dir.join(format!("nonfinite-stage{}-step{step}.safetensors", meta.stage));
    Checkpoint { meta, tensors: store.tensors()? }.save(&path)?;
    Ok(Error::NonFiniteLoss { step, snapshot: path.display().to_string() })
}

fn total_steps(cfg: &TrainConfig, n: usize) -> usize {
    let per_epoch = n.div_ceil(cfg.batch_size).max(1);
    let all = cfg.epochs * per_epoch;
    cfg.max_steps.map_or(all, |m| m.min(all))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    Ok(predict(logits)?.iter().zip(labels).filter(|(p, l)| p == l).count())
}

/// Accuracy of the stage-1 path (prior from images) over `samples`.
pub fn stage1_accuracy(net: &Stage1Model, samples: &[Sample], dtype: DType, batch_size: usize) -> Result<f64> {
    let mut correct = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let out = net.predict(&inference_batch(&refs, dtype)?)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        correct += count_correct(&out.logits, &labels)?;
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

/// Jointly trains LA-CLIP (alignment loss), the stage-1 prior network and the
/// classifier (cross-entropy on the prior-conditioned logits).
pub fn train_stage1(cfg: &TrainConfig, model: &ModelConfig, data: &Dataset, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let train = training_split(data, model)?;
    let dtype = cfg.precision.dtype();
    let mut store = ParamStore::new(dtype, cfg.seed);
    let net = Stage1Model::new(&mut store, model)?;
    let vars = store.all_vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = Adam::new(vars, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let meta = CheckpointMeta { stage: 1, model: model.clone(), train: cfg.clone(), toggles: None };

    let limit = total_steps(cfg, train.len());
    let mut log = StepLog::open(opts)?;
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if step >= limit {
            break;
        }
        let first = log.records.len();
        let (mut correct, mut seen) = (0, 0);
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            if step >= limit {
                break;
            }
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = labeled_batch(&refs, &model.class_names, dtype)?;
            let out = net.forward(&batch)?;
            let ce = ce_loss(&out.logits.logits, &batch.labels, cfg.reduction)?;
            let loss = (&out.align_loss + &ce)?;
            let loss_v = scalar(&loss)?;
            if !loss_v.is_finite() {
                return Err(snapshot(&store, meta, step, opts)?);
            }
            let lr = cfg.lr_schedule.lr_at(cfg.lr, step, limit);
            opt.step(&loss.backward()?, lr)?;
            correct += count_correct(&out.logits.logits, &batch.labels)?;
            seen += batch.labels.len();
            let rec = StepRecord {
                stage: 1,
                step,
                epoch,
                lr,
                loss: loss_v,
                ce: scalar(&ce)?,
                align: Some(scalar(&out.align_loss)?),
                kl: None,
            };
            log.push(rec, opts)?;
            step += 1;
        }
        epochs.push(summarize(epoch, &log.records[first..], correct, seen));
    }
    let final_train_accuracy = stage1_accuracy(&net, &train, dtype, 64)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint { meta, tensors: store.tensors()? },
        steps: log.records,
        epochs,
        final_train_accuracy,
        frozen_intact: None,
    })
}

fn frozen_arrays(store: &ParamStore) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for prefix in [LACLIP, PNET_S1] {
        for (name, v) in store.vars_with_prefix(prefix) {
            let bytes = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            out.insert(name, bytes.iter().flat_map(|x| x.to_le_bytes()).collect());
        }
    }
    Ok(out)
}

/// Trains the image-only prior network, the denoiser and the classifier with
/// LA-CLIP and the stage-1 prior network frozen as the KL reference.
pub fn train_stage2(cfg: &TrainConfig, s1: &Checkpoint, data: &Dataset, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    s1.validate_stage1(None)?;
    let model = s1.model().clone();
    let train = training_split(data, &model)?;
    let dtype = cfg.precision.dtype();
    let mut store = ParamStore::from_tensors(s1.tensors.clone(), dtype, cfg.seed)?;
    let reference = Stage1Model::new(&mut store, &model)?;
    let net = Stage2Model::new(&mut store, &model, cfg.toggles, cfg.t_steps, cfg.variant)?;
    let before = frozen_arrays(&store)?;
    let vars = [PNET_S2, DENOISER, LLFORMER].iter().flat_map(|p| store.vars_with_prefix(p)).map(|(_, v)| v).collect();
    let mut opt = Adam::new(vars, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let meta = CheckpointMeta { stage: 2, model: model.clone(), train: cfg.clone(), toggles: Some(cfg.toggles) };

    let limit = total_steps(cfg, train.len());
    let mut log = StepLog::open(opts)?;
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if step >= limit {
            break;
        }
        let first = log.records.len();
        let (mut correct, mut seen) = (0, 0);
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            if step >= limit {
                break;
            }
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = labeled_batch(&refs, &model.class_names, dtype)?;
            let z_ref = reference.prior(&batch.inputs.images)?.detach();
            let noise = gaussian(refs.len(), model.c_epd(), &mut noise_rng, dtype, z_ref.device())?;
            let out = net.forward_train(&batch.inputs, &z_ref, &noise)?;
            let ce = ce_loss(&out.logits.logits, &batch.labels, cfg.reduction)?;
            let kl = kl_loss(&z_ref, &out.prior, cfg.reduction)?;
            let loss = if cfg.toggles.total_loss { total_loss(&ce, &kl)? } else { ce.clone() };
            let loss_v = scalar(&loss)?;
            if !loss_v.is_finite() {
                return Err(snapshot(&store, meta, step, opts)?);
            }
            let lr = cfg.lr_schedule.lr_at(cfg.lr, step, limit);
            opt.step(&loss.backward()?, lr)?;
            correct += count_correct(&out.logits.logits, &batch.labels)?;
            seen += batch.labels.len();
            let rec = StepRecord {
                stage: 2,
                step,
                epoch,
                lr,
                loss: loss_v,
                ce: scalar(&ce)?,
                align: None,
                kl: Some(scalar(&kl)?),
            };
            log.push(rec, opts)?;
            step += 1;
        }
        epochs.push(summarize(epoch, &log.records[first..], correct, seen));
    }
    let frozen_intact = frozen_arrays(&store)? == before;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut correct = 0;
    for chunk in train.chunks(64) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let out = net.infer(&inference_batch(&refs, dtype)?, &mut eval_rng)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        correct += count_correct(&out.logits.logits, &labels)?;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint { meta, tensors: store.tensors()? },
        steps: log.records,
        epochs,
        final_train_accuracy: correct as f64 / train.len() as f64,
        frozen_intact: Some(frozen_intact),
    })
}
