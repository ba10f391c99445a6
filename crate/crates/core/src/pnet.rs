//! Prior networks producing the compact embedding prior.
//!
//! `PnetS1` fuses the two image-side contrastive embeddings into the prior
//! `Z` with cross-attention (queries from the label embedding, keys/values
//! from the feature embedding, each vector split into `n_tokens` tokens).
//! `PnetS2` maps a raw image to the conditioning vector of the diffusion
//! chain. Both share one `c_epd`, so their output widths cannot diverge.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Builder, Conv2d, LayerNorm, Linear, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnetS1Config {
    pub layers: usize,
    pub heads: usize,
    pub n_tokens: usize,
    pub ffn: bool,
}

impl Default for PnetS1Config {
    fn default() -> Self {
        Self { layers: 2, heads: 4, n_tokens: 4, ffn: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnetS2Config {
    pub width: usize,
    pub res_blocks: usize,
    pub resolution: usize,
}

impl Default for PnetS2Config {
    fn default() -> Self {
        Self { width: 16, res_blocks: 3, resolution: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Input embedding width `D_e`.
    pub d_embed: usize,
    /// Prior width `C`, shared by both networks.
    pub c_epd: usize,
    pub s1: PnetS1Config,
    pub s2: PnetS2Config,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { d_embed: 64, c_epd: 128, s1: PnetS1Config::default(), s2: PnetS2Config::default() }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let s1 = &self.s1;
        if s1.n_tokens == 0 || self.d_embed % s1.n_tokens != 0 {
            return Err(Error::Config(format!("d_embed {} must split into {} tokens", self.d_embed, s1.n_tokens)));
        }
        let d_tok = self.d_embed / s1.n_tokens;
        if s1.heads == 0 || d_tok % s1.heads != 0 {
            return Err(Error::Config(format!("token width {d_tok} not divisible by {} heads", s1.heads)));
        }
        if self.c_epd == 0 {
            return Err(Error::Config("c_epd must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttentionLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    ffn: Option<(LayerNorm, Mlp)>,
    heads: usize,
}

impl CrossAttentionLayer {
    fn new(b: &mut Builder, d: usize, heads: usize, ffn: bool) -> Result<Self> {
        let ffn = if ffn {
            Some((LayerNorm::new(&mut b.pp("ffn_norm"), d)?, Mlp::new(&mut b.pp("ffn"), d, 2 * d)?))
        } else {
            None
        };
        Ok(Self {
            wq: Linear::new(&mut b.pp("q"), d, d, false)?,
            wk: Linear::new(&mut b.pp("k"), d, d, false)?,
            wv: Linear::new(&mut b.pp("v"), d, d, false)?,
            wo: Linear::new(&mut b.pp("o"), d, d, false)?,
            ffn,
            heads,
        })
    }

    /// `x`: query tokens `(B, N, d)`; `ctx`: key/value tokens `(B, M, d)`.
    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<(Tensor, Tensor)> {
        let (attended, attn) = multi_head_attention(
            &self.wq.forward(x)?,
            &self.wk.forward(ctx)?,
            &self.wv.forward(ctx)?,
            self.heads,
            None,
        )?;
        let mut y = (x + self.wo.forward(&attended)?)?;
        if let Some((ln, mlp)) = &self.ffn {
            y = (&y + mlp.forward(&ln.forward(&y)?)?)?;
        }
        Ok((y, attn))
    }
}

#[derive(Debug, Clone)]
pub struct PnetS1 {
    cfg: PriorConfig,
    pub layers: Vec<CrossAttentionLayer>,
    pub proj: Linear,
}

impl PnetS1 {
    pub fn new(b: &mut Builder, cfg: &PriorConfig) -> Result<Self> {
        cfg.validate()?;
        let d_tok = cfg.d_embed / cfg.s1.n_tokens;
        let layers = (0..cfg.s1.layers)
            .map(|i| CrossAttentionLayer::new(&mut b.pp(format!("layer{i}")), d_tok, cfg.s1.heads, cfg.s1.ffn))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), layers, proj: Linear::new(&mut b.pp("proj"), cfg.d_embed, cfg.c_epd, true)? })
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.c_epd
    }

    /// `feat`, `label_pred`: `(B, D_e)`. Returns `Z`, `(B, C)`.
    pub fn forward(&self, feat: &Tensor, label_pred: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(feat, label_pred)?.0)
    }

    /// Also returns each layer's attention weights `(B, heads, N, N)`.
    pub fn forward_traced(&self, feat: &Tensor, label_pred: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let d = self.cfg.d_embed;
        for (name, t) in [("feat", feat), ("label_pred", label_pred)] {
            let dims = t.dims();
            if dims.len() != 2 || dims[1] != d {
                return Err(Error::shape("pnet_s1", format!("{name} (B, {d})"), format!("{dims:?}")));
            }
        }
        if feat.dim(0)? != label_pred.dim(0)? {
            return Err(Error::shape(
                "pnet_s1",
                "equal batch sizes",
                format!("{:?} vs {:?}", feat.dims(), label_pred.dims()),
            ));
        }
        let b = feat.dim(0)?;
        let n = self.cfg.s1.n_tokens;
        let ctx = feat.reshape((b, n, d / n))?;
        let mut x = label_pred.reshape((b, n, d / n))?;
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, attn) = layer.forward(&x, &ctx)?;
            x = y;
            maps.push(attn);
        }
        Ok((self.proj.forward(&x.reshape((b, d))?)?, maps))
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct PnetS2 {
    cfg: PriorConfig,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    pub head: Linear,
}

impl PnetS2 {
    pub fn new(b: &mut Builder, cfg: &PriorConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.s2.width;
        let stem = Conv2d::new(&mut b.pp("stem"), 3, w, 3, 2, true)?;
        let blocks = (0..cfg.s2.res_blocks)
            .map(|i| {
                let mut bb = b.pp(format!("res{i}"));
                Ok(ResBlock {
                    conv1: Conv2d::new(&mut bb.pp("conv1"), w, w, 3, 1, true)?,
                    conv2: Conv2d::new(&mut bb.pp("conv2"), w, w, 3, 1, true)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), stem, blocks, head: Linear::new(&mut b.pp("head"), w, cfg.c_epd, true)? })
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.c_epd
    }

    /// `images`: `(B, 3, H, W)`. Returns the conditioning vector `(B, C)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let r = self.cfg.s2.resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::shape("pnet_s2", format!("(B, 3, {r}, {r})"), format!("{:?}", images.dims())));
        }
        let mut x = crate::nn::gelu(&self.stem.forward(images)?)?;
        for blk in &self.blocks {
            let y = blk.conv2.forward(&crate::nn::gelu(&blk.conv1.forward(&x)?)?)?;
            x = (x + y)?;
        }
        let pooled = x.mean(3)?.mean(2)?;
        self.head.forward(&pooled)
    }
}
