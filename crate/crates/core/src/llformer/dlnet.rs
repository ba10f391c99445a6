//! Landmark-guided branch: image features attend to landmark features inside
//! non-overlapping windows.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Builder, Conv1x1, Conv2d, Init, LayerNorm, Linear, Mlp};

/// Feature map cut into `ws × ws` windows, flattened to `(B·nW, M, D)`.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub windows: Tensor,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl WindowSet {
    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn grid(&self) -> (usize, usize) {
        ((self.height + self.pad_h) / self.window, (self.width + self.pad_w) / self.window)
    }

    fn same_layout(&self, other: &WindowSet) -> bool {
        self.batch == other.batch
            && self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
            && self.window == other.window
    }
}

/// Zero-pads the bottom/right edges up to a multiple of `ws` and splits into windows.
pub fn window_partition(x: &Tensor, ws: usize) -> Result<WindowSet> {
    if ws == 0 {
        return Err(Error::InvalidInput("window size must be positive".into()));
    }
    let (b, d, h, w) = x.dims4()?;
    let pad_h = (ws - h % ws) % ws;
    let pad_w = (ws - w % ws) % ws;
    let padded = x.pad_with_zeros(2, 0, pad_h)?.pad_with_zeros(3, 0, pad_w)?;
    let (nh, nw) = ((h + pad_h) / ws, (w + pad_w) / ws);
    // (B, D, nh, ws, nw, ws) -> (B, nh, nw, ws, ws, D)
    let windows = padded.reshape((b, d, nh, ws, nw, ws))?.permute((0, 2, 4, 3, 5, 1))?.contiguous()?.reshape((
        b * nh * nw,
        ws * ws,
        d,
    ))?;
    Ok(WindowSet { windows, batch: b, channels: d, height: h, width: w, window: ws, pad_h, pad_w })
}

/// Inverse of [`window_partition`] for a tensor laid out like `layout`.
pub fn window_merge(windows: &Tensor, layout: &WindowSet) -> Result<Tensor> {
    let ws = layout.window;
    let (nh, nw) = layout.grid();
    let (b, d) = (layout.batch, layout.channels);
    let expect = [b * nh * nw, ws * ws, d];
    if windows.dims() != expect {
        return Err(Error::shape("window_merge", format!("{expect:?}"), format!("{:?}", windows.dims())));
    }
    let full = windows.reshape((b, nh, nw, ws, ws, d))?.permute((0, 5, 1, 3, 2, 4))?.contiguous()?.reshape((
        b,
        d,
        nh * ws,
        nw * ws,
    ))?;
    Ok(full.narrow(2, 0, layout.height)?.narrow(3, 0, layout.width)?)
}

/// Projections and positional bias for one cross-window attention layer.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    /// `(heads, M, M)`, added to the logits of each head.
    pub pos_bias: Tensor,
    pub heads: usize,
}

impl WindowAttention {
    pub fn new(b: &mut Builder, d: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} channels not divisible by {heads} heads")));
        }
        let m = window * window;
        Ok(Self {
            wq: Linear::new(&mut b.pp("q"), d, d, false)?,
            wk: Linear::new(&mut b.pp("k"), d, d, false)?,
            wv: Linear::new(&mut b.pp("v"), d, d, false)?,
            wo: Linear::new(&mut b.pp("o"), d, d, true)?,
            pos_bias: b.var("pos_bias", &[heads, m, m], Init::Zeros)?,
            heads,
        })
    }
}

/// Queries from the landmark windows, keys and values from the image windows.
/// Returns `(B·nW, M, D)` and the attention `(B·nW, heads, M, M)`.
pub fn cross_window_attention(
    landmarks: &WindowSet,
    image: &WindowSet,
    attn: &WindowAttention,
) -> Result<(Tensor, Tensor)> {
    if !landmarks.same_layout(image) {
        return Err(Error::shape(
            "cross_window_attention",
            format!("{}ch {}x{} ws{}", image.channels, image.height, image.width, image.window),
            format!("{}ch {}x{} ws{}", landmarks.channels, landmarks.height, landmarks.width, landmarks.window),
        ));
    }
    let m = image.tokens_per_window();
    if attn.pos_bias.dims() != [attn.heads, m, m] {
        return Err(Error::shape(
            "cross_window_attention",
            format!("bias ({}, {m}, {m})", attn.heads),
            format!("{:?}", attn.pos_bias.dims()),
        ));
    }
    let q = attn.wq.forward(&landmarks.windows)?;
    let k = attn.wk.forward(&image.windows)?;
    let v = attn.wv.forward(&image.windows)?;
    let bias = attn.pos_bias.unsqueeze(0)?;
    let (merged, weights) = multi_head_attention(&q, &k, &v, attn.heads, Some(&bias))?;
    Ok((attn.wo.forward(&merged)?, weights))
}

/// `X' = MHCA(X_fl, X_ll) + X_ll`, `X'' = MLP(LN(X')) + X'`.
#[derive(Debug, Clone)]
pub struct MhcaEncoder {
    pub attn: WindowAttention,
    pub norm: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
}

impl MhcaEncoder {
    pub fn new(b: &mut Builder, d: usize, heads: usize, window: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            attn: WindowAttention::new(&mut b.pp("attn"), d, heads, window)?,
            norm: LayerNorm::new(&mut b.pp("norm"), d)?,
            mlp: Mlp::new(&mut b.pp("mlp"), d, mlp_ratio * d)?,
            window,
        })
    }

    /// Inputs and output are `(B, D, H, W)` maps.
    pub fn forward(&self, image: &Tensor, landmarks: &Tensor) -> Result<(Tensor, Tensor)> {
        let xi = window_partition(image, self.window)?;
        let xl = window_partition(landmarks, self.window)?;
        let (a, weights) = cross_window_attention(&xl, &xi, &self.attn)?;
        let x1 = (a + &xi.windows)?;
        let x2 = (self.mlp.forward(&self.norm.forward(&x1)?)? + &x1)?;
        Ok((window_merge(&x2, &xi)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct DlNet {
    embed: Conv2d,
    down: Vec<Conv2d>,
    landmark_proj: Vec<Conv1x1>,
    encoders: Vec<MhcaEncoder>,
}

pub struct DlNetOutput {
    pub features: Vec<Tensor>,
    pub attention: Vec<Tensor>,
}

impl DlNet {
    pub fn new(
        b: &mut Builder,
        landmark_channels: usize,
        channels: &[usize],
        heads: &[usize],
        window: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let n = channels.len();
        let embed = Conv2d::new(&mut b.pp("embed"), 3, channels[0], 3, 1, true)?;
        let mut down = Vec::new();
        let mut landmark_proj = Vec::new();
        let mut encoders = Vec::new();
        for i in 0..n {
            if i + 1 < n {
                down.push(Conv2d::new(&mut b.pp(format!("down{i}")), channels[i], channels[i + 1], 3, 2, true)?);
            }
            landmark_proj.push(Conv1x1::new(&mut b.pp(format!("lm{i}")), landmark_channels, channels[i])?);
            encoders.push(MhcaEncoder::new(&mut b.pp(format!("enc{i}")), channels[i], heads[i], window, mlp_ratio)?);
        }
        Ok(Self { embed, down, landmark_proj, encoders })
    }

    pub fn forward(&self, images: &Tensor, landmarks: &Tensor) -> Result<DlNetOutput> {
        let (_, _, h, w) = images.dims4()?;
        let (_, _, lh, lw) = landmarks.dims4()?;
        if (lh, lw) != (h, w) {
            return Err(Error::shape("dlnet landmarks", format!("{h}x{w}"), format!("{lh}x{lw}")));
        }
        let n = self.encoders.len();
        let mut features = Vec::with_capacity(n);
        let mut attention = Vec::with_capacity(n);
        let mut x = crate::nn::gelu(&self.embed.forward(images)?)?;
        for i in 0..n {
            if i > 0 {
                x = crate::nn::gelu(&self.down[i - 1].forward(&x)?)?;
            }
            let scale = 1usize << i;
            let lm = if scale == 1 { landmarks.clone() } else { landmarks.avg_pool2d(scale)? };
            let lm = self.landmark_proj[i].forward(&lm)?;
            let (o, a) = self.encoders[i].forward(&x, &lm)?;
            features.push(o);
            attention.push(a);
        }
        Ok(DlNetOutput { features, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device, D};
    use proptest::prelude::*;

    fn vals(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn partition_layout_matches_index_arithmetic() {
        let (b, d, h, w, ws) = (2, 3, 5, 6, 4);
        let data: Vec<f64> = (0..b * d * h * w).map(|i| i as f64).collect();
        let x = Tensor::from_slice(&data, (b, d, h, w), &Device::Cpu).unwrap();
        let set = window_partition(&x, ws).unwrap();
        assert_eq!((set.pad_h, set.pad_w), (3, 2));
        let (nh, nw) = set.grid();
        assert_eq!((nh, nw), (2, 2));
        let win = set.windows.to_vec3::<f64>().unwrap();
        for bi in 0..b {
            for wy in 0..nh {
                for wx in 0..nw {
                    for ty in 0..ws {
                        for tx in 0..ws {
                            for c in 0..d {
                                let (y, xx) = (wy * ws + ty, wx * ws + tx);
                                let expect = if y < h && xx < w { data[((bi * d + c) * h + y) * w + xx] } else { 0.0 };
                                assert_eq!(win[(bi * nh + wy) * nw + wx][ty * ws + tx][c], expect);
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(vals(&window_merge(&set.windows, &set).unwrap()), data);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn partition_roundtrip(h in 1usize..11, w in 1usize..11, ws in 1usize..6, seed in 0u64..1000) {
            let n = 2 * h * w;
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64).collect();
            let x = Tensor::from_slice(&data, (1, 2, h, w), &Device::Cpu).unwrap();
            let set = window_partition(&x, ws).unwrap();
            prop_assert_eq!(vals(&window_merge(&set.windows, &set).unwrap()), data);
        }
    }

    #[test]
    fn cross_attention_matches_dense_oracle() {
        let mut store = ParamStore::new(DType::F64, 11);
        let (d, heads, ws) = (4, 2, 2);
        let wa = WindowAttention::new(&mut store.root().pp("wa"), d, heads, ws).unwrap();
        let bias: Vec<f64> = (0..heads * 16).map(|i| (i as f64 * 0.13).sin()).collect();
        store.assign("wa/pos_bias", &bias).unwrap();
        let img = Tensor::randn(0f64, 1.0, (1, d, 2, 2), &Device::Cpu).unwrap();
        let lm = Tensor::randn(0f64, 1.0, (1, d, 2, 2), &Device::Cpu).unwrap();
        let (xi, xl) = (window_partition(&img, ws).unwrap(), window_partition(&lm, ws).unwrap());
        let (out, attn) = cross_window_attention(&xl, &xi, &wa).unwrap();

        let mat = |t: &Tensor| t.to_vec2::<f64>().unwrap();
        let (wq, wk, wv, wo) = (mat(&wa.wq.weight), mat(&wa.wk.weight), mat(&wa.wv.weight), mat(&wa.wo.weight));
        let bo = wa.wo.bias.as_ref().unwrap().to_vec1::<f64>().unwrap();
        let li = xl.windows.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let ii = xi.windows.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let lin = |w: &Vec<Vec<f64>>, x: &Vec<f64>| -> Vec<f64> {
            w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
        };
        let q: Vec<Vec<f64>> = li.iter().map(|x| lin(&wq, x)).collect();
        let k: Vec<Vec<f64>> = ii.iter().map(|x| lin(&wk, x)).collect();
        let v: Vec<Vec<f64>> = ii.iter().map(|x| lin(&wv, x)).collect();
        let dh = d / heads;
        let m = 4;
        let mut concat = vec![vec![0.0; d]; m];
        for hd in 0..heads {
            for i in 0..m {
                let logits: Vec<f64> = (0..m)
                    .map(|j| {
                        let dot: f64 = (0..dh).map(|c| q[i][hd * dh + c] * k[j][hd * dh + c]).sum();
                        dot / (dh as f64).sqrt() + bias[(hd * m + i) * m + j]
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..dh {
                    concat[i][hd * dh + c] = (0..m).map(|j| e[j] / s * v[j][hd * dh + c]).sum();
                }
            }
        }
        let got = out.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..m {
            let expect = lin(&wo, &concat[i]);
            for c in 0..d {
                assert!((got[i][c] - expect[c] - bo[c]).abs() < 1e-6);
            }
        }
        for s in vals(&attn.sum(D::Minus1).unwrap()) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_attention_leaves_mlp_residual() {
        let mut store = ParamStore::new(DType::F64, 12);
        let enc = MhcaEncoder::new(&mut store.root().pp("e"), 4, 2, 2, 2).unwrap();
        store.zero("e/attn/v").unwrap();
        store.zero("e/attn/o/bias").unwrap();
        let img = Tensor::randn(0f64, 1.0, (1, 4, 4, 4), &Device::Cpu).unwrap();
        let lm = Tensor::randn(0f64, 1.0, (1, 4, 4, 4), &Device::Cpu).unwrap();
        let (out, _) = enc.forward(&img, &lm).unwrap();
        // With the attention branch silenced, X' = X_ll.
        let xi = window_partition(&img, 2).unwrap();
        let x1 = &xi.windows;
        let expect = (enc.mlp.forward(&enc.norm.forward(x1).unwrap()).unwrap() + x1).unwrap();
        let expect = window_merge(&expect, &xi).unwrap();
        assert_eq!(vals(&out), vals(&expect));

        store.zero("e/mlp/fc2").unwrap();
        let (out, _) = enc.forward(&img, &lm).unwrap();
        assert_eq!(vals(&out), vals(&img));
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        let mut store = ParamStore::new(DType::F64, 13);
        let wa = WindowAttention::new(&mut store.root().pp("wa"), 4, 2, 2).unwrap();
        let a = window_partition(&Tensor::zeros((1, 4, 4, 4), DType::F64, &Device::Cpu).unwrap(), 2).unwrap();
        let b = window_partition(&Tensor::zeros((1, 4, 6, 4), DType::F64, &Device::Cpu).unwrap(), 2).unwrap();
        assert!(cross_window_attention(&a, &b, &wa).is_err());
    }
}
