//! Label-aware contrastive image/text encoder.
//!
//! A small conv backbone feeds two heads: a feature embedding aligned with
//! the image caption and a label embedding aligned with the class-name text.
//! Both text kinds share one encoder over a closed vocabulary made of the
//! caption template words and the expression class names.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize_last, log_softmax_last, Builder, Conv2d, Init, Linear, Mlp};

/// Expression classes in canonical index order.
pub const CLASS_NAMES: [&str; 7] = ["surprise", "fear", "disgust", "happy", "sad", "angry", "neutral"];

const TEMPLATE_WORDS: [&str; 6] = ["a", "photo", "of", "person", "showing", "expression"];

pub fn caption_for(class_name: &str) -> String {
    format!("a photo of a person showing a {class_name} expression")
}

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|c| *c == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    Caption,
    Label,
}

/// Whitespace tokenizer over the closed vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<&'static str>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self { vocab: TEMPLATE_WORDS.iter().chain(CLASS_NAMES.iter()).copied().collect() }
    }
}

impl Tokenizer {
    pub fn vocab(&self) -> &[&'static str] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let ids = text
            .split_whitespace()
            .map(|w| {
                self.vocab
                    .iter()
                    .position(|v| *v == w)
                    .map(|i| i as u32)
                    .ok_or_else(|| Error::InvalidInput(format!("token {w:?} is not in the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty text".into()));
        }
        Ok(ids)
    }

    /// Label texts must be exactly one class name.
    pub fn encode_kind(&self, text: &str, kind: TextKind) -> Result<Vec<u32>> {
        let ids = self.encode(text)?;
        if kind == TextKind::Label && (ids.len() != 1 || class_index(text.trim()).is_none()) {
            return Err(Error::InvalidInput(format!("label text {text:?} is not a class name")));
        }
        Ok(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaClipConfig {
    pub d_embed: usize,
    /// Output channels of each backbone block; the first block keeps the
    /// resolution, the rest halve it.
    pub channels: Vec<usize>,
    pub resolution: usize,
    pub max_text_len: usize,
    pub temperature_init: f64,
}

impl Default for LaClipConfig {
    fn default() -> Self {
        Self { d_embed: 64, channels: vec![16, 32, 32, 64], resolution: 32, max_text_len: 16, temperature_init: 0.07 }
    }
}

/// Unit-norm image-side embeddings `(B, D_e)` each.
#[derive(Debug, Clone)]
pub struct DualImageEmbedding {
    pub feat: Tensor,
    pub label_pred: Tensor,
}

#[derive(Debug, Clone)]
struct ImageEncoder {
    blocks: Vec<Conv2d>,
    feat_head: Linear,
    label_head: Mlp,
    label_out: Linear,
}

#[derive(Debug, Clone)]
struct TextEncoder {
    token_emb: Tensor,
    pos_emb: Tensor,
    mlp: Mlp,
    proj: Linear,
}

#[derive(Debug, Clone)]
pub struct LaClip {
    cfg: LaClipConfig,
    tokenizer: Tokenizer,
    image: ImageEncoder,
    text: TextEncoder,
    /// `ln(1/τ)`; the contrastive temperature is `exp(-log_inv_temp)`.
    pub log_inv_temp: Tensor,
}

impl LaClip {
    pub fn new(b: &mut Builder, cfg: &LaClipConfig) -> Result<Self> {
        if cfg.channels.is_empty() {
            return Err(Error::Config("laclip backbone needs at least one block".into()));
        }
        let d = cfg.d_embed;
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut c_in = 3;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(Conv2d::new(&mut b.pp(format!("backbone/{i}")), c_in, c, 3, stride, true)?);
            c_in = c;
        }
        let image = ImageEncoder {
            blocks,
            feat_head: Linear::new(&mut b.pp("feat_head"), c_in, d, true)?,
            label_head: Mlp::new(&mut b.pp("label_head"), c_in, c_in)?,
            label_out: Linear::new(&mut b.pp("label_out"), c_in, d, true)?,
        };
        let tokenizer = Tokenizer::default();
        let text = TextEncoder {
            token_emb: b.var("text/token_emb", &[tokenizer.vocab_size(), d], Init::Normal(0.5))?,
            pos_emb: b.var("text/pos_emb", &[cfg.max_text_len, d], Init::Normal(0.1))?,
            mlp: Mlp::new(&mut b.pp("text/mlp"), d, 2 * d)?,
            proj: Linear::new(&mut b.pp("text/proj"), d, d, true)?,
        };
        let log_inv_temp = b.var("log_inv_temp", &[], Init::Const((1.0 / cfg.temperature_init).ln()))?;
        Ok(Self { cfg: cfg.clone(), tokenizer, image, text, log_inv_temp })
    }

    pub fn config(&self) -> &LaClipConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn temperature(&self) -> Result<Tensor> {
        Ok(self.log_inv_temp.neg()?.exp()?)
    }

    /// `images`: `(B, 3, H, W)` at the configured resolution.
    pub fn encode_image(&self, images: &Tensor) -> Result<DualImageEmbedding> {
        let (_, c, h, w) = images.dims4()?;
        let r = self.cfg.resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::shape("encode_image", format!("(B, 3, {r}, {r})"), format!("{:?}", images.dims())));
        }
        let mut x = images.clone();
        for (i, conv) in self.image.blocks.iter().enumerate() {
            let y = crate::nn::gelu(&conv.forward(&x)?)?;
            x = if i > 0 && y.dims() == x.dims() { (y + x)? } else { y };
        }
        let pooled = x.mean(3)?.mean(2)?;
        let feat = l2_normalize_last(&self.image.feat_head.forward(&pooled)?)?;
        let hidden = (self.image.label_head.forward(&pooled)? + &pooled)?;
        let label_pred = l2_normalize_last(&self.image.label_out.forward(&hidden)?)?;
        Ok(DualImageEmbedding { feat, label_pred })
    }

    /// Encodes one text to a unit-norm `(D_e,)` vector.
    pub fn encode_text(&self, text: &str, kind: TextKind) -> Result<Tensor> {
        let ids = self.tokenizer.encode_kind(text, kind)?;
        Ok(self.encode_token_batch(&[ids])?.squeeze(0)?)
    }

    /// Encodes many texts to `(B, D_e)`; sequences of different lengths are
    /// encoded in groups and reassembled in input order.
    pub fn encode_texts(&self, texts: &[String], kind: TextKind) -> Result<Tensor> {
        let ids = texts.iter().map(|t| self.tokenizer.encode_kind(t, kind)).collect::<Result<Vec<_>>>()?;
        let uniform = ids.windows(2).all(|w| w[0].len() == w[1].len());
        if uniform {
            return self.encode_token_batch(&ids);
        }
        let rows =
            ids.iter().map(|seq| self.encode_token_batch(std::slice::from_ref(seq))).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }

    fn encode_token_batch(&self, ids: &[Vec<u32>]) -> Result<Tensor> {
        let n = ids.first().map(Vec::len).unwrap_or(0);
        if n == 0 {
            return Err(Error::InvalidInput("empty text".into()));
        }
        if n > self.cfg.max_text_len {
            return Err(Error::InvalidInput(format!("text longer than {} tokens", self.cfg.max_text_len)));
        }
        let flat: Vec<u32> = ids.iter().flatten().copied().collect();
        let idx = Tensor::from_vec(flat, ids.len() * n, self.token_device())?;
        let d = self.cfg.d_embed;
        let tok = self.text.token_emb.index_select(&idx, 0)?.reshape((ids.len(), n, d))?;
        let x = tok.broadcast_add(&self.text.pos_emb.narrow(0, 0, n)?.unsqueeze(0)?)?;
        let x = (self.text.mlp.forward(&x)? + x)?;
        let pooled = x.mean(1)?;
        l2_normalize_last(&self.text.proj.forward(&pooled)?)
    }

    fn token_device(&self) -> &Device {
        self.text.token_emb.device()
    }

    pub fn dtype(&self) -> DType {
        self.text.token_emb.dtype()
    }
}

/// Symmetric InfoNCE between row-paired embeddings `a` and `b`, `(N, D)`:
/// the mean of the a→b and b→a cross-entropies over the similarity matrix
/// `a·bᵀ/τ` with the diagonal as targets.
pub fn info_nce(a: &Tensor, b: &Tensor, temperature: &Tensor) -> Result<Tensor> {
    let (n, d) = a.dims2()?;
    if b.dims() != [n, d] {
        return Err(Error::shape("info_nce", format!("({n}, {d})"), format!("{:?}", b.dims())));
    }
    let logits = a.matmul(&b.t()?)?.broadcast_div(temperature)?;
    let eye = Tensor::eye(n, a.dtype(), a.device())?;
    let row = log_softmax_last(&logits)?.mul(&eye)?.sum_all()?;
    let col = log_softmax_last(&logits.t()?)?.mul(&eye)?.sum_all()?;
    Ok(((row + col)? * (-0.5 / n as f64))?)
}

/// Feature↔caption plus label-prediction↔label-text contrastive loss.
pub fn alignment_loss(
    feat: &Tensor,
    caption: &Tensor,
    label_pred: &Tensor,
    label_text: &Tensor,
    temperature: &Tensor,
) -> Result<Tensor> {
    let n = feat.dim(0)?;
    if n < 2 {
        return Err(Error::InvalidInput("alignment loss needs a batch of at least 2".into()));
    }
    let t = temperature.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if t.len() != 1 || !(t[0] > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be a positive scalar, got {t:?}")));
    }
    for (name, e) in [("feat", feat), ("caption", caption), ("label_pred", label_pred), ("label_text", label_text)] {
        check_unit_norm(name, e)?;
    }
    let temperature = temperature.reshape(())?;
    Ok((info_nce(feat, caption, &temperature)? + info_nce(label_pred, label_text, &temperature)?)?)
}

fn check_unit_norm(name: &str, e: &Tensor) -> Result<()> {
    let norms = e.sqr()?.sum(1)?.sqrt()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let tol = if e.dtype() == DType::F64 { 1e-6 } else { 1e-3 };
    if let Some(bad) = norms.iter().find(|v| (*v - 1.0).abs() > tol) {
        return Err(Error::InvalidInput(format!("{name} embeddings must be unit-norm, found norm {bad}")));
    }
    Ok(())
}
