//! Assembled networks for both stages and the label-free inference path.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::diffusion::{
    default_schedule, gaussian, q_sample, run_reverse_chain, BetaSchedule, Denoiser, DenoiserConfig, ReverseVariant,
};
use crate::error::{Error, Result};
use crate::laclip::{LaClip, LaClipConfig, TextKind, CLASS_NAMES};
use crate::llformer::{Llformer, LlformerConfig, LlformerOutput};
use crate::nn::ParamStore;
use crate::pnet::{PnetS1, PnetS1Config, PnetS2, PnetS2Config, PriorConfig};

pub const LACLIP: &str = "laclip";
pub const PNET_S1: &str = "pnet_s1";
pub const PNET_S2: &str = "pnet_s2";
pub const DENOISER: &str = "denoiser";
pub const LLFORMER: &str = "llformer";

/// Architecture shared by both stages. Its fingerprint ties a stage-2 run to
/// the stage-1 checkpoint it starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub class_names: Vec<String>,
    pub landmark_count: usize,
    pub laclip: LaClipConfig,
    pub prior: PriorConfig,
    pub llformer: LlformerConfig,
    pub denoiser_hidden_mult: usize,
    pub denoiser_layers: usize,
}

impl ModelConfig {
    /// Small profile used for tests and toy runs: 32×32 input, `C = D_e = 32`.
    pub fn desk(class_names: &[String], landmark_count: usize) -> Self {
        let resolution = 32;
        let d_embed = 32;
        let c_epd = 32;
        Self {
            class_names: class_names.to_vec(),
            landmark_count,
            laclip: LaClipConfig {
                d_embed,
                channels: vec![16, 32, 32],
                resolution,
                max_text_len: 16,
                temperature_init: 0.07,
            },
            prior: PriorConfig {
                d_embed,
                c_epd,
                s1: PnetS1Config { layers: 1, heads: 2, n_tokens: 4, ffn: true },
                s2: PnetS2Config { width: 16, res_blocks: 2, resolution },
            },
            llformer: LlformerConfig {
                resolution,
                landmark_channels: landmark_count,
                n_classes: class_names.len(),
                channels: vec![16, 32],
                heads: vec![1, 2],
                window: 4,
                mlp_ratio: 2,
                fusion_grid: 4,
                d_model: 32,
                fusion_heads: 4,
            },
            denoiser_hidden_mult: 4,
            denoiser_layers: 4,
        }
    }

    /// Wider profile closer to full-size training; not exercised by tests.
    pub fn paper_scale(class_names: &[String], landmark_count: usize) -> Self {
        let resolution = 112;
        let mut cfg = Self::desk(class_names, landmark_count);
        cfg.laclip = LaClipConfig {
            d_embed: 256,
            channels: vec![32, 64, 128, 256],
            resolution,
            max_text_len: 16,
            temperature_init: 0.07,
        };
        cfg.prior = PriorConfig {
            d_embed: 256,
            c_epd: 128,
            s1: PnetS1Config { layers: 2, heads: 4, n_tokens: 8, ffn: true },
            s2: PnetS2Config { width: 48, res_blocks: 4, resolution },
        };
        cfg.llformer = LlformerConfig {
            resolution,
            landmark_channels: landmark_count,
            n_classes: class_names.len(),
            channels: vec![48, 96, 192],
            heads: vec![1, 2, 4],
            window: 7,
            mlp_ratio: 2,
            fusion_grid: 7,
            d_model: 192,
            fusion_heads: 8,
        };
        cfg
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn c_epd(&self) -> usize {
        self.prior.c_epd
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.llformer.validate()?;
        let r = self.llformer.resolution;
        if self.laclip.resolution != r || self.prior.s2.resolution != r {
            return Err(Error::Config(format!(
                "resolution differs across networks (laclip {}, pnet_s2 {}, llformer {r})",
                self.laclip.resolution, self.prior.s2.resolution
            )));
        }
        if self.laclip.d_embed != self.prior.d_embed {
            return Err(Error::Config(format!(
                "laclip embedding width {} does not match prior input width {}",
                self.laclip.d_embed, self.prior.d_embed
            )));
        }
        if self.llformer.landmark_channels != self.landmark_count || self.llformer.n_classes != self.n_classes() {
            return Err(Error::Config("llformer landmark/class counts disagree with the model config".into()));
        }
        for name in &self.class_names {
            if !CLASS_NAMES.contains(&name.as_str()) {
                return Err(Error::Config(format!("class {name:?} has no text vocabulary entry")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            c_epd: self.c_epd(),
            hidden_mult: self.denoiser_hidden_mult,
            layers: self.denoiser_layers,
            zero_init_output: false,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let parse = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
        };
        match key {
            "c_epd" => self.prior.c_epd = parse(value)?,
            "d_embed" => {
                let d = parse(value)?;
                self.prior.d_embed = d;
                self.laclip.d_embed = d;
            }
            "llformer_channels" => {
                self.llformer.channels = value.split(',').map(|s| parse(s.trim())).collect::<Result<Vec<_>>>()?;
                self.llformer.heads = self.llformer.channels.iter().enumerate().map(|(i, _)| 1 << i.min(2)).collect();
            }
            "denoiser_layers" => self.denoiser_layers = parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Images and landmarks only; the label-free stage-2 input.
pub struct InferenceBatch {
    pub images: Tensor,
    pub landmarks: Tensor,
}

/// A training batch adds labels and captions.
pub struct LabeledBatch {
    pub inputs: InferenceBatch,
    pub labels: Vec<usize>,
    pub captions: Vec<String>,
    pub label_texts: Vec<String>,
}

pub fn inference_batch(samples: &[&Sample], dtype: DType) -> Result<InferenceBatch> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let images = samples.iter().map(|s| s.image.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    let landmarks = samples.iter().map(|s| s.landmarks.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    Ok(InferenceBatch { images: Tensor::stack(&images, 0)?, landmarks: Tensor::stack(&landmarks, 0)? })
}

pub fn labeled_batch(samples: &[&Sample], class_names: &[String], dtype: DType) -> Result<LabeledBatch> {
    let inputs = inference_batch(samples, dtype)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    if let Some(l) = labels.iter().find(|l| **l >= class_names.len()) {
        return Err(Error::InvalidInput(format!("label {l} out of range for {} classes", class_names.len())));
    }
    Ok(LabeledBatch {
        inputs,
        captions: samples.iter().map(|s| s.caption.clone()).collect(),
        label_texts: labels.iter().map(|l| class_names[*l].clone()).collect(),
        labels,
    })
}

/// LA-CLIP, the stage-1 prior network and the classifier.
pub struct Stage1Model {
    pub cfg: ModelConfig,
    pub laclip: LaClip,
    pub pnet_s1: PnetS1,
    pub llformer: Llformer,
}

pub struct Stage1Output {
    pub logits: LlformerOutput,
    pub prior: Tensor,
    pub align_loss: Tensor,
}

impl Stage1Model {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut root = store.root();
        Ok(Self {
            laclip: LaClip::new(&mut root.pp(LACLIP), &cfg.laclip)?,
            pnet_s1: PnetS1::new(&mut root.pp(PNET_S1), &cfg.prior)?,
            llformer: Llformer::new(&mut root.pp(LLFORMER), &cfg.llformer, cfg.c_epd())?,
            cfg: cfg.clone(),
        })
    }

    /// Prior `Z` computed from the images alone.
    pub fn prior(&self, images: &Tensor) -> Result<Tensor> {
        let e = self.laclip.encode_image(images)?;
        self.pnet_s1.forward(&e.feat, &e.label_pred)
    }

    pub fn forward(&self, batch: &LabeledBatch) -> Result<Stage1Output> {
        let e = self.laclip.encode_image(&batch.inputs.images)?;
        let caption = self.laclip.encode_texts(&batch.captions, TextKind::Caption)?;
        let label_text = self.laclip.encode_texts(&batch.label_texts, TextKind::Label)?;
        let align_loss =
            crate::laclip::alignment_loss(&e.feat, &caption, &e.label_pred, &label_text, &self.laclip.temperature()?)?;
        let prior = self.pnet_s1.forward(&e.feat, &e.label_pred)?;
        let logits = self.llformer.forward(&batch.inputs.images, &batch.inputs.landmarks, &prior)?;
        Ok(Stage1Output { logits, prior, align_loss })
    }

    pub fn predict(&self, batch: &InferenceBatch) -> Result<LlformerOutput> {
        let z = self.prior(&batch.images)?;
        self.llformer.forward(&batch.images, &batch.landmarks, &z)
    }
}

/// Which stage-2 pieces are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Toggles {
    pub diffusion: bool,
    /// Train under `L_ce + L_kl` rather than `L_ce` alone.
    pub total_loss: bool,
    pub insert_noise: bool,
}

impl Default for Stage2Toggles {
    fn default() -> Self {
        Self { diffusion: true, total_loss: true, insert_noise: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceNode {
    pub op: &'static str,
    pub inputs: Vec<&'static str>,
}

pub struct Stage2Output {
    pub logits: LlformerOutput,
    pub x_s2: Tensor,
    /// Prior fed to the classifier: chain output, or `x_s2` without diffusion.
    pub prior: Tensor,
    pub trace: Vec<TraceNode>,
}

/// Image-only prior network, optional diffusion chain and the classifier.
pub struct Stage2Model {
    pub cfg: ModelConfig,
    pub toggles: Stage2Toggles,
    pub variant: ReverseVariant,
    pub pnet_s2: PnetS2,
    pub denoiser: Option<Denoiser>,
    pub schedule: Option<BetaSchedule>,
    pub llformer: Llformer,
}

impl Stage2Model {
    /// Built on a store that may already hold stage-1 weights; classifier
    /// weights present there are reused, everything else is initialized.
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        toggles: Stage2Toggles,
        t_steps: usize,
        variant: ReverseVariant,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut root = store.root();
        let pnet_s2 = PnetS2::new(&mut root.pp(PNET_S2), &cfg.prior)?;
        let (denoiser, schedule) = if toggles.diffusion {
            (Some(Denoiser::new(&mut root.pp(DENOISER), &cfg.denoiser_config())?), Some(default_schedule(t_steps)?))
        } else {
            (None, None)
        };
        let llformer = Llformer::new(&mut root.pp(LLFORMER), &cfg.llformer, cfg.c_epd())?;
        Ok(Self { cfg: cfg.clone(), toggles, variant, pnet_s2, denoiser, schedule, llformer })
    }

    pub fn steps(&self) -> Option<usize> {
        self.schedule.as_ref().map(BetaSchedule::steps)
    }

    /// Replaces the schedule for inference at a different step count.
    pub fn with_steps(&mut self, t_steps: usize) -> Result<()> {
        if t_steps == 0 {
            return Err(Error::InvalidInput("T must be at least 1".into()));
        }
        if self.denoiser.is_some() {
            self.schedule = Some(default_schedule(t_steps)?);
        }
        Ok(())
    }

    fn chain(&self, z_t: &Tensor, x_s2: &Tensor) -> Result<Tensor> {
        let (Some(d), Some(s)) = (&self.denoiser, &self.schedule) else {
            return Err(Error::Config("diffusion chain requested on a model built without it".into()));
        };
        run_reverse_chain(d, z_t, x_s2, s, self.variant)
    }

    /// Training forward. With noise insertion the chain starts from
    /// `q_sample(z_ref, noise)`; otherwise from `x_s2`.
    pub fn forward_train(&self, inputs: &InferenceBatch, z_ref: &Tensor, noise: &Tensor) -> Result<Stage2Output> {
        let x_s2 = self.pnet_s2.forward(&inputs.images)?;
        let mut trace = vec![TraceNode { op: "pnet_s2", inputs: vec!["images"] }];
        let prior = if self.toggles.diffusion {
            let start = if self.toggles.insert_noise {
                trace.push(TraceNode { op: "q_sample", inputs: vec!["z_ref", "noise"] });
                q_sample(z_ref, self.schedule.as_ref().expect("schedule with diffusion"), noise)?
            } else {
                x_s2.clone()
            };
            trace.push(TraceNode { op: "reverse_chain", inputs: vec!["z_T", "x_s2"] });
            self.chain(&start, &x_s2)?
        } else {
            x_s2.clone()
        };
        trace.push(TraceNode { op: "llformer", inputs: vec!["images", "landmarks", "prior"] });
        let logits = self.llformer.forward(&inputs.images, &inputs.landmarks, &prior)?;
        Ok(Stage2Output { logits, x_s2, prior, trace })
    }

    /// Label-free inference. With noise insertion the chain starts from a
    /// standard-normal draw; otherwise from `x_s2`.
    pub fn infer(&self, inputs: &InferenceBatch, rng: &mut impl Rng) -> Result<Stage2Output> {
        let x_s2 = self.pnet_s2.forward(&inputs.images)?;
        let mut trace = vec![TraceNode { op: "pnet_s2", inputs: vec!["images"] }];
        let prior = if self.toggles.diffusion {
            let start = if self.toggles.insert_noise {
                let (b, c) = x_s2.dims2()?;
                trace.push(TraceNode { op: "gaussian", inputs: vec!["rng"] });
                gaussian(b, c, rng, x_s2.dtype(), x_s2.device())?
            } else {
                x_s2.clone()
            };
            trace.push(TraceNode { op: "reverse_chain", inputs: vec!["z_T", "x_s2"] });
            self.chain(&start, &x_s2)?
        } else {
            x_s2.clone()
        };
        trace.push(TraceNode { op: "llformer", inputs: vec!["images", "landmarks", "prior"] });
        let logits = self.llformer.forward(&inputs.images, &inputs.landmarks, &prior)?;
        Ok(Stage2Output { logits, x_s2, prior, trace })
    }
}
