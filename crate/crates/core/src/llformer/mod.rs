//! Label-restoration transformer: a prior-modulated U-Net over the image, a
//! landmark-guided windowed attention branch, and a token-mixing head that
//! fuses both into class logits.

pub mod dlnet;
pub mod dtnet;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, multi_head_attention, softmax_last, Builder, Init, LayerNorm, Linear, Mlp};

pub use dlnet::{
    cross_window_attention, window_merge, window_partition, DlNet, MhcaEncoder, WindowAttention, WindowSet,
};
pub use dtnet::{channel_attention, epd_modulate, DgNet, DmNet, DtBlock, DtNet, Modulation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::Config(format!("reduction must be sum or mean, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlformerConfig {
    pub resolution: usize,
    pub landmark_channels: usize,
    pub n_classes: usize,
    /// Channel width per scale, finest first.
    pub channels: Vec<usize>,
    /// Attention heads per scale, shared by both branches.
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Side of the pooled token grid each scale contributes to the head.
    pub fusion_grid: usize,
    pub d_model: usize,
    pub fusion_heads: usize,
}

impl Default for LlformerConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            landmark_channels: crate::data::DEFAULT_LANDMARKS,
            n_classes: 7,
            channels: vec![16, 32, 32],
            heads: vec![1, 2, 2],
            window: 4,
            mlp_ratio: 2,
            fusion_grid: 4,
            d_model: 32,
            fusion_heads: 4,
        }
    }
}

impl LlformerConfig {
    pub fn n_scales(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_scales();
        if n == 0 || self.heads.len() != n {
            return Err(Error::Config(format!(
                "llformer needs one head count per scale ({} channels, {} heads)",
                n,
                self.heads.len()
            )));
        }
        for (c, h) in self.channels.iter().zip(&self.heads) {
            if *h == 0 || c % h != 0 {
                return Err(Error::Config(format!("channel width {c} not divisible by {h} heads")));
            }
        }
        let coarsest = self.resolution >> (n - 1);
        if self.resolution % (1 << (n - 1)) != 0 || coarsest < self.fusion_grid || coarsest % self.fusion_grid != 0 {
            return Err(Error::Config(format!(
                "resolution {} does not reduce to a multiple of the {}x{} fusion grid over {n} scales",
                self.resolution, self.fusion_grid, self.fusion_grid
            )));
        }
        if self.fusion_heads == 0 || self.d_model % self.fusion_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.fusion_heads
            )));
        }
        if self.window == 0 || self.landmark_channels == 0 || self.n_classes < 2 {
            return Err(Error::Config("window, landmark channels must be positive and n_classes >= 2".into()));
        }
        Ok(())
    }
}

/// Pools each scale's concatenated `[F_i, O_i]` to a fixed token grid, mixes
/// all tokens with self-attention, and classifies the mean token.
#[derive(Debug, Clone)]
pub struct FusionHead {
    proj: Vec<Linear>,
    pos: Tensor,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm: LayerNorm,
    mlp: Mlp,
    out_norm: LayerNorm,
    pub classifier: Linear,
    grid: usize,
    heads: usize,
    channels: Vec<usize>,
}

pub struct FusionOutput {
    pub logits: Tensor,
    pub embedding: Tensor,
    pub attention: Tensor,
}

impl FusionHead {
    pub fn new(b: &mut Builder, cfg: &LlformerConfig) -> Result<Self> {
        let d = cfg.d_model;
        let n_tokens = cfg.n_scales() * cfg.fusion_grid * cfg.fusion_grid;
        let proj = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, c)| Linear::new(&mut b.pp(format!("proj{i}")), 2 * c, d, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            proj,
            pos: b.var("pos", &[n_tokens, d], Init::Normal(0.02))?,
            wq: Linear::new(&mut b.pp("q"), d, d, false)?,
            wk: Linear::new(&mut b.pp("k"), d, d, false)?,
            wv: Linear::new(&mut b.pp("v"), d, d, false)?,
            wo: Linear::new(&mut b.pp("o"), d, d, true)?,
            norm: LayerNorm::new(&mut b.pp("norm"), d)?,
            mlp: Mlp::new(&mut b.pp("mlp"), d, cfg.mlp_ratio * d)?,
            out_norm: LayerNorm::new(&mut b.pp("out_norm"), d)?,
            classifier: Linear::new(&mut b.pp("cls"), d, cfg.n_classes, true)?,
            grid: cfg.fusion_grid,
            heads: cfg.fusion_heads,
            channels: cfg.channels.clone(),
        })
    }

    pub fn forward(&self, dt: &[Tensor], dl: &[Tensor]) -> Result<FusionOutput> {
        let n = self.channels.len();
        if dt.len() != n || dl.len() != n {
            return Err(Error::shape(
                "fusion",
                format!("{n} scales from each branch"),
                format!("{} and {}", dt.len(), dl.len()),
            ));
        }
        let mut tokens = Vec::with_capacity(n);
        for i in 0..n {
            if dt[i].dims() != dl[i].dims() {
                return Err(Error::shape(
                    "fusion",
                    format!("scale {i} maps of equal shape"),
                    format!("{:?} vs {:?}", dt[i].dims(), dl[i].dims()),
                ));
            }
            let (b, c, h, w) = dt[i].dims4()?;
            if c != self.channels[i] || h % self.grid != 0 || w % self.grid != 0 {
                return Err(Error::shape(
                    "fusion",
                    format!("{} channels, side divisible by {}", self.channels[i], self.grid),
                    format!("{c}x{h}x{w}"),
                ));
            }
            let x = Tensor::cat(&[&dt[i], &dl[i]], 1)?;
            let pooled =
                if h == self.grid && w == self.grid { x } else { x.avg_pool2d((h / self.grid, w / self.grid))? };
            let t = pooled.reshape((b, 2 * c, self.grid * self.grid))?.transpose(1, 2)?.contiguous()?;
            tokens.push(self.proj[i].forward(&t)?);
        }
        let x = Tensor::cat(&tokens, 1)?.broadcast_add(&self.pos)?;
        let (a, attention) = multi_head_attention(
            &self.wq.forward(&x)?,
            &self.wk.forward(&x)?,
            &self.wv.forward(&x)?,
            self.heads,
            None,
        )?;
        let x1 = (self.wo.forward(&a)? + &x)?;
        let x2 = (self.mlp.forward(&self.norm.forward(&x1)?)? + &x1)?;
        let embedding = self.out_norm.forward(&x2.mean(1)?)?;
        let logits = self.classifier.forward(&embedding)?;
        Ok(FusionOutput { logits, embedding, attention })
    }
}

/// Everything one LLformer forward produces.
pub struct LlformerOutput {
    pub logits: Tensor,
    /// Penultimate representation, `(B, d_model)`.
    pub embedding: Tensor,
    pub dt_features: Vec<Tensor>,
    pub dl_features: Vec<Tensor>,
    /// Every softmax map in the network, labelled by where it came from.
    pub attention: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct Llformer {
    cfg: LlformerConfig,
    c_epd: usize,
    pub dtnet: DtNet,
    pub dlnet: DlNet,
    pub head: FusionHead,
}

impl Llformer {
    pub fn new(b: &mut Builder, cfg: &LlformerConfig, c_epd: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            dtnet: DtNet::new(&mut b.pp("dt"), c_epd, &cfg.channels, &cfg.heads)?,
            dlnet: DlNet::new(
                &mut b.pp("dl"),
                cfg.landmark_channels,
                &cfg.channels,
                &cfg.heads,
                cfg.window,
                cfg.mlp_ratio,
            )?,
            head: FusionHead::new(&mut b.pp("head"), cfg)?,
            cfg: cfg.clone(),
            c_epd,
        })
    }

    pub fn config(&self) -> &LlformerConfig {
        &self.cfg
    }

    /// `images (B, 3, H, W)`, `landmarks (B, K, H, W)`, prior `z (B, C)`.
    pub fn forward(&self, images: &Tensor, landmarks: &Tensor, z: &Tensor) -> Result<LlformerOutput> {
        let (b, c, h, w) = images.dims4()?;
        let r = self.cfg.resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::shape("llformer images", format!("(B, 3, {r}, {r})"), format!("{:?}", images.dims())));
        }
        let expect_lm = [b, self.cfg.landmark_channels, r, r];
        if landmarks.dims() != expect_lm {
            return Err(Error::shape(
                "llformer landmarks",
                format!("{expect_lm:?}"),
                format!("{:?}", landmarks.dims()),
            ));
        }
        if z.dims() != [b, self.c_epd] {
            return Err(Error::shape("llformer prior", format!("({b}, {})", self.c_epd), format!("{:?}", z.dims())));
        }
        let dt = self.dtnet.forward(images, z)?;
        let dl = self.dlnet.forward(images, landmarks)?;
        let fused = self.head.forward(&dt.features, &dl.features)?;
        let mut attention = Vec::new();
        attention.extend(dt.attention.into_iter().enumerate().map(|(i, a)| (format!("dmnet{i}"), a)));
        attention.extend(dl.attention.into_iter().enumerate().map(|(i, a)| (format!("window{i}"), a)));
        attention.push(("fusion".to_string(), fused.attention));
        Ok(LlformerOutput {
            logits: fused.logits,
            embedding: fused.embedding,
            dt_features: dt.features,
            dl_features: dl.features,
            attention,
        })
    }
}

fn one_hot(labels: &[usize], n_classes: usize, like: &Tensor) -> Result<Tensor> {
    let mut v = vec![0f64; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::InvalidInput(format!("label {l} out of range for {n_classes} classes")));
        }
        v[i * n_classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), n_classes), like.device())?.to_dtype(like.dtype())?)
}

/// Cross-entropy between `logits (B, M)` and integer labels.
pub fn ce_loss(logits: &Tensor, labels: &[usize], reduction: Reduction) -> Result<Tensor> {
    let (b, m) = logits.dims2()?;
    if labels.len() != b || b == 0 {
        return Err(Error::shape("ce_loss", format!("{b} labels"), labels.len()));
    }
    let picked = (one_hot(labels, m, logits)? * log_softmax_last(logits)?)?.sum_all()?.neg()?;
    Ok(match reduction {
        Reduction::Sum => picked,
        Reduction::Mean => (picked / b as f64)?,
    })
}

/// Row-wise softmax probabilities of `logits (B, M)`.
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    softmax_last(logits)
}

/// Indices of the largest logit per row.
pub fn predict(logits: &Tensor) -> Result<Vec<usize>> {
    Ok(logits.argmax(D::Minus1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn small_cfg() -> LlformerConfig {
        LlformerConfig {
            resolution: 16,
            landmark_channels: 2,
            n_classes: 3,
            channels: vec![4, 8],
            heads: vec![1, 2],
            window: 4,
            mlp_ratio: 2,
            fusion_grid: 4,
            d_model: 8,
            fusion_heads: 2,
        }
    }

    fn inputs(b: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let dev = Device::Cpu;
        let mut s = ParamStore::new(DType::F64, seed);
        let mut r = s.root();
        let img = r.var("img", &[b, 3, 16, 16], Init::Uniform(1.0)).unwrap().abs().unwrap();
        let lm = r.var("lm", &[b, 2, 16, 16], Init::Uniform(1.0)).unwrap().abs().unwrap();
        let z = r.var("z", &[b, 6], Init::Normal(1.0)).unwrap();
        let _ = dev;
        (img, lm, z)
    }

    #[test]
    fn ce_matches_closed_form() {
        let logits = Tensor::from_slice(&[1.0f64, 2.0, 0.5, -1.0, 0.0, 3.0], (2, 3), &Device::Cpu).unwrap();
        let lse = |r: &[f64]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
        let expect = (lse(&[1.0, 2.0, 0.5]) - 2.0) + (lse(&[-1.0, 0.0, 3.0]) - (-1.0));
        let sum = ce_loss(&logits, &[1, 0], Reduction::Sum).unwrap().to_scalar::<f64>().unwrap();
        let mean = ce_loss(&logits, &[1, 0], Reduction::Mean).unwrap().to_scalar::<f64>().unwrap();
        assert!((sum - expect).abs() < 1e-12);
        assert!((mean - expect / 2.0).abs() < 1e-12);
        assert!(ce_loss(&logits, &[1, 3], Reduction::Sum).is_err());
        assert!(ce_loss(&logits, &[1], Reduction::Sum).is_err());
    }

    #[test]
    fn forward_shapes_and_normalized_attention() {
        let cfg = small_cfg();
        let mut store = ParamStore::new(DType::F64, 21);
        let net = Llformer::new(&mut store.root().pp("llformer"), &cfg, 6).unwrap();
        let (img, lm, z) = inputs(3, 1);
        let out = net.forward(&img, &lm, &z).unwrap();
        assert_eq!(out.logits.dims(), &[3, 3]);
        assert_eq!(out.embedding.dims(), &[3, 8]);
        assert_eq!(out.attention.len(), 3 + 2 + 1);
        for (name, a) in &out.attention {
            let sums = a.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12), "{name}");
        }
    }

    #[test]
    fn batch_permutation_commutes() {
        let cfg = small_cfg();
        let mut store = ParamStore::new(DType::F64, 22);
        let net = Llformer::new(&mut store.root().pp("llformer"), &cfg, 6).unwrap();
        let (img, lm, z) = inputs(3, 2);
        let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let base = net.forward(&img, &lm, &z).unwrap().logits.index_select(&perm, 0).unwrap();
        let permuted = net
            .forward(
                &img.index_select(&perm, 0).unwrap(),
                &lm.index_select(&perm, 0).unwrap(),
                &z.index_select(&perm, 0).unwrap(),
            )
            .unwrap()
            .logits;
        let d = (base - permuted).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes_and_configs() {
        let cfg = small_cfg();
        let mut store = ParamStore::new(DType::F64, 23);
        let net = Llformer::new(&mut store.root().pp("llformer"), &cfg, 6).unwrap();
        let (img, lm, z) = inputs(2, 3);
        assert!(net.forward(&img, &lm, &z.narrow(1, 0, 5).unwrap()).is_err());
        assert!(net.forward(&img, &lm.narrow(1, 0, 1).unwrap(), &z).is_err());
        let dt = net.dtnet.forward(&img, &z).unwrap();
        let dl = net.dlnet.forward(&img, &lm).unwrap();
        assert!(net.head.forward(&dt.features[..1], &dl.features).is_err());

        let mut bad = small_cfg();
        bad.heads = vec![3, 2];
        assert!(bad.validate().is_err());
        let mut bad = small_cfg();
        bad.resolution = 12;
        assert!(bad.validate().is_err());
    }
}
