//! Prior-modulated U-Net branch: every stage runs a channel-attention block
//! followed by a gated convolution block, both conditioned on `Z`.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{
    conv1x1, l2_normalize_last, layer_norm_channels, softmax_last, upsample_nearest, Builder, Conv1x1, Conv2d,
    DepthwiseConv3x3, Init, Linear,
};

const LN_EPS: f64 = 1e-5;

/// The two prior-driven linear maps `W₁, W₂: C → c`.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub scale: Linear,
    pub shift: Linear,
}

impl Modulation {
    pub fn new(b: &mut Builder, c_epd: usize, channels: usize) -> Result<Self> {
        let bound = 0.1 / (c_epd as f64).sqrt();
        Ok(Self {
            scale: Linear::with_init(
                &mut b.pp("scale"),
                c_epd,
                channels,
                Init::Uniform(bound),
                Some(Init::Const(1.0)),
            )?,
            shift: Linear::with_init(&mut b.pp("shift"), c_epd, channels, Init::Uniform(bound), Some(Init::Zeros))?,
        })
    }

    pub fn forward(&self, f: &Tensor, z: &Tensor) -> Result<Tensor> {
        epd_modulate(f, z, &self.scale, &self.shift)
    }
}

/// `F' = (W₁Z) ⊙ LN(F) + W₂Z`, with LN across channels at each spatial site
/// and the two `(B, c)` vectors broadcast over space.
pub fn epd_modulate(f: &Tensor, z: &Tensor, w1: &Linear, w2: &Linear) -> Result<Tensor> {
    let (b, c, _, _) = f.dims4()?;
    let c_epd = w1.weight.dim(1)?;
    if z.dims() != [b, c_epd] {
        return Err(Error::shape("epd_modulate", format!("Z ({b}, {c_epd})"), format!("{:?}", z.dims())));
    }
    if w1.weight.dim(0)? != c || w2.weight.dim(0)? != c {
        return Err(Error::shape("epd_modulate", format!("{c} output channels"), w1.weight.dim(0)?));
    }
    let scale = w1.forward(z)?.reshape((b, c, 1, 1))?;
    let shift = w2.forward(z)?.reshape((b, c, 1, 1))?;
    Ok(layer_norm_channels(f, LN_EPS)?.broadcast_mul(&scale)?.broadcast_add(&shift)?)
}

/// Transposed (channel × channel) attention. Queries and keys are
/// L2-normalized along the spatial axis; `alpha` holds one temperature per
/// head. Returns the attended map `(B, c, H, W)` and the attention
/// `(B, heads, c_h, c_h)` whose rows sum to one.
pub fn channel_attention(q: &Tensor, k: &Tensor, v: &Tensor, alpha: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = q.dims4()?;
    if k.dims() != q.dims() || v.dims() != q.dims() {
        return Err(Error::shape(
            "channel_attention",
            format!("{:?}", q.dims()),
            format!("k {:?}, v {:?}", k.dims(), v.dims()),
        ));
    }
    let heads = alpha.dim(0)?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape("channel_attention", format!("channels divisible by {heads} heads"), c));
    }
    let ch = c / heads;
    let split = |t: &Tensor| t.reshape((b, heads, ch, h * w));
    let qn = l2_normalize_last(&split(q)?)?;
    let kn = l2_normalize_last(&split(k)?)?;
    let logits = qn.matmul(&kn.t()?)?.broadcast_div(&alpha.reshape((1, heads, 1, 1))?)?;
    let attn = softmax_last(&logits)?;
    let out = attn.matmul(&split(v)?.contiguous()?)?.reshape((b, c, h, w))?;
    Ok((out, attn))
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub pointwise: Conv1x1,
    pub depthwise: DepthwiseConv3x3,
}

impl Projection {
    fn new(b: &mut Builder, c: usize) -> Result<Self> {
        Ok(Self {
            pointwise: Conv1x1::new(&mut b.pp("pw"), c, c)?,
            depthwise: DepthwiseConv3x3::new(&mut b.pp("dw"), c)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.depthwise.forward(&self.pointwise.forward(x)?)
    }
}

/// Channel-attention block with learnable temperature.
#[derive(Debug, Clone)]
pub struct DmNet {
    pub modulation: Modulation,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub log_alpha: Tensor,
    pub out: Conv1x1,
}

impl DmNet {
    pub fn new(b: &mut Builder, c_epd: usize, c: usize, heads: usize) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("{c} channels not divisible by {heads} heads")));
        }
        let d_head = (c / heads) as f64;
        Ok(Self {
            modulation: Modulation::new(&mut b.pp("mod"), c_epd, c)?,
            q: Projection::new(&mut b.pp("q"), c)?,
            k: Projection::new(&mut b.pp("k"), c)?,
            v: Projection::new(&mut b.pp("v"), c)?,
            log_alpha: b.var("log_alpha", &[heads], Init::Const(d_head.sqrt().ln()))?,
            out: Conv1x1::new(&mut b.pp("out"), c, c)?,
        })
    }

    pub fn alpha(&self) -> Result<Tensor> {
        Ok(self.log_alpha.exp()?)
    }

    /// `F'' = W_c(V · softmax(K·Q/α)) + F` given the modulated map `F'`.
    pub fn attend(&self, f_mod: &Tensor, f: &Tensor) -> Result<(Tensor, Tensor)> {
        if f_mod.dims() != f.dims() {
            return Err(Error::shape("dmnet", format!("{:?}", f.dims()), format!("{:?}", f_mod.dims())));
        }
        let (att, attn) = channel_attention(
            &self.q.forward(f_mod)?,
            &self.k.forward(f_mod)?,
            &self.v.forward(f_mod)?,
            &self.alpha()?,
        )?;
        Ok(((self.out.forward(&att)? + f)?, attn))
    }

    pub fn forward(&self, f: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)> {
        self.attend(&self.modulation.forward(f, z)?, f)
    }
}

/// Gated convolution block: `GELU(W_d¹W_c¹F') ⊙ W_d²W_c²F' + F`.
#[derive(Debug, Clone)]
pub struct DgNet {
    pub modulation: Modulation,
    pub gate: Projection,
    pub value: Projection,
}

impl DgNet {
    pub fn new(b: &mut Builder, c_epd: usize, c: usize) -> Result<Self> {
        Ok(Self {
            modulation: Modulation::new(&mut b.pp("mod"), c_epd, c)?,
            gate: Projection::new(&mut b.pp("gate"), c)?,
            value: Projection::new(&mut b.pp("value"), c)?,
        })
    }

    pub fn attend(&self, f_mod: &Tensor, f: &Tensor) -> Result<Tensor> {
        if f_mod.dims() != f.dims() {
            return Err(Error::shape("dgnet", format!("{:?}", f.dims()), format!("{:?}", f_mod.dims())));
        }
        let g = crate::nn::gelu(&self.gate.forward(f_mod)?)?;
        let v = self.value.forward(f_mod)?;
        Ok(((g * v)? + f)?)
    }

    pub fn forward(&self, f: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.attend(&self.modulation.forward(f, z)?, f)
    }
}

/// One U-Net stage: DMNet then DGNet.
#[derive(Debug, Clone)]
pub struct DtBlock {
    pub dm: DmNet,
    pub dg: DgNet,
}

impl DtBlock {
    pub fn new(b: &mut Builder, c_epd: usize, c: usize, heads: usize) -> Result<Self> {
        Ok(Self { dm: DmNet::new(&mut b.pp("dm"), c_epd, c, heads)?, dg: DgNet::new(&mut b.pp("dg"), c_epd, c)? })
    }

    pub fn forward(&self, f: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (x, attn) = self.dm.forward(f, z)?;
        Ok((self.dg.forward(&x, z)?, attn))
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    reduce: Conv1x1,
    fuse: Conv1x1,
    block: DtBlock,
}

#[derive(Debug, Clone)]
pub struct DtNet {
    embed: Conv2d,
    enc: Vec<DtBlock>,
    down: Vec<Conv2d>,
    dec: Vec<UpStage>,
}

/// Per-scale outputs, finest first, plus every channel-attention map.
pub struct DtNetOutput {
    pub features: Vec<Tensor>,
    pub attention: Vec<Tensor>,
}

impl DtNet {
    pub fn new(b: &mut Builder, c_epd: usize, channels: &[usize], heads: &[usize]) -> Result<Self> {
        let n = channels.len();
        let embed = Conv2d::new(&mut b.pp("embed"), 3, channels[0], 3, 1, true)?;
        let mut enc = Vec::with_capacity(n);
        let mut down = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            enc.push(DtBlock::new(&mut b.pp(format!("enc{i}")), c_epd, channels[i], heads[i])?);
            if i + 1 < n {
                down.push(Conv2d::new(&mut b.pp(format!("down{i}")), channels[i], channels[i + 1], 3, 2, true)?);
            }
        }
        let mut dec = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n.saturating_sub(1) {
            let mut bb = b.pp(format!("dec{i}"));
            dec.push(UpStage {
                reduce: Conv1x1::new(&mut bb.pp("reduce"), channels[i + 1], channels[i])?,
                fuse: Conv1x1::new(&mut bb.pp("fuse"), 2 * channels[i], channels[i])?,
                block: DtBlock::new(&mut bb.pp("block"), c_epd, channels[i], heads[i])?,
            });
        }
        Ok(Self { embed, enc, down, dec })
    }

    pub fn forward(&self, images: &Tensor, z: &Tensor) -> Result<DtNetOutput> {
        let n = self.enc.len();
        let mut attention = Vec::with_capacity(2 * n);
        let mut skips = Vec::with_capacity(n);
        let mut x = self.embed.forward(images)?;
        for i in 0..n {
            let (y, attn) = self.enc[i].forward(&x, z)?;
            attention.push(attn);
            if i + 1 < n {
                skips.push(y.clone());
                x = self.down[i].forward(&y)?;
            } else {
                x = y;
            }
        }
        let mut features = vec![x.clone(); n];
        for i in (0..n.saturating_sub(1)).rev() {
            let stage = &self.dec[i];
            let skip = &skips[i];
            let (_, _, h, w) = skip.dims4()?;
            let up = stage.reduce.forward(&upsample_nearest(&x, h, w)?)?;
            if up.dims() != skip.dims() {
                return Err(Error::shape("dtnet skip", format!("{:?}", skip.dims()), format!("{:?}", up.dims())));
            }
            let fused = conv1x1(&Tensor::cat(&[&up, skip], 1)?, &stage.fuse.weight)?;
            let (y, attn) = stage.block.forward(&fused, z)?;
            attention.push(attn);
            features[i] = y.clone();
            x = y;
        }
        Ok(DtNetOutput { features, attention })
    }
}

/// Sums attention rows; used by tests to confirm normalization.
pub fn attention_row_sums(attn: &Tensor) -> Result<Tensor> {
    Ok(attn.sum(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    fn vals(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn modulation_identities() {
        let mut store = ParamStore::new(DType::F64, 0);
        let m = Modulation::new(&mut store.root().pp("m"), 2, 3).unwrap();
        let f = Tensor::randn(0f64, 1.0, (2, 3, 2, 2), &Device::Cpu).unwrap();
        let z = Tensor::randn(0f64, 1.0, (2, 2), &Device::Cpu).unwrap();

        // Z = 0 with zero biases kills both terms.
        store.zero("m/scale/bias").unwrap();
        store.zero("m/shift/bias").unwrap();
        let out = m.forward(&f, &z.zeros_like().unwrap()).unwrap();
        assert!(vals(&out).iter().all(|v| *v == 0.0));

        // W₁Z = 1, W₂Z = 0 leaves LN(F).
        store.zero("m/scale/weight").unwrap();
        store.zero("m/shift").unwrap();
        store.assign("m/scale/bias", &[1.0; 3]).unwrap();
        let out = m.forward(&f, &z).unwrap();
        let ln = layer_norm_channels(&f, LN_EPS).unwrap();
        assert_eq!(vals(&out), vals(&ln));

        assert!(m.forward(&f, &Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn modulation_matches_scalar_oracle() {
        let mut store = ParamStore::new(DType::F64, 0);
        let m = Modulation::new(&mut store.root().pp("m"), 2, 2).unwrap();
        let w1 = [0.5, -1.0, 2.0, 0.3];
        let b1 = [0.1, 0.2];
        let w2 = [-0.4, 0.6, 1.5, -0.7];
        let b2 = [0.05, -0.3];
        store.assign("m/scale/weight", &w1).unwrap();
        store.assign("m/scale/bias", &b1).unwrap();
        store.assign("m/shift/weight", &w2).unwrap();
        store.assign("m/shift/bias", &b2).unwrap();
        // 1 sample, 2 channels, 1×2 spatial
        let f = [1.0, -2.0, 3.0, 0.5];
        let z = [0.7, -1.2];
        let out = vals(&m.forward(&t(&f, &[1, 2, 1, 2]), &t(&z, &[1, 2])).unwrap());
        let sc = [w1[0] * z[0] + w1[1] * z[1] + b1[0], w1[2] * z[0] + w1[3] * z[1] + b1[1]];
        let sh = [w2[0] * z[0] + w2[1] * z[1] + b2[0], w2[2] * z[0] + w2[3] * z[1] + b2[1]];
        for p in 0..2 {
            let (a, b) = (f[p], f[2 + p]);
            let mean = (a + b) / 2.0;
            let var = ((a - mean).powi(2) + (b - mean).powi(2)) / 2.0;
            let sd = (var + LN_EPS).sqrt();
            let expect = [(a - mean) / sd * sc[0] + sh[0], (b - mean) / sd * sc[1] + sh[1]];
            assert!((out[p] - expect[0]).abs() < 1e-6);
            assert!((out[2 + p] - expect[1]).abs() < 1e-6);
        }
    }

    fn dm_store() -> (ParamStore, DmNet) {
        let mut store = ParamStore::new(DType::F64, 4);
        let dm = DmNet::new(&mut store.root().pp("dm"), 2, 2, 1).unwrap();
        (store, dm)
    }

    #[test]
    fn dmnet_zero_value_is_pure_residual() {
        let (store, dm) = dm_store();
        store.zero("dm/v/pw").unwrap();
        let f = Tensor::randn(0f64, 1.0, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let z = Tensor::randn(0f64, 1.0, (1, 2), &Device::Cpu).unwrap();
        let (out, attn) = dm.forward(&f, &z).unwrap();
        assert_eq!(vals(&out), vals(&f));
        for s in vals(&attention_row_sums(&attn).unwrap()) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dmnet_matches_two_channel_oracle() {
        let (store, dm) = dm_store();
        // 1×1 spatial: each depthwise kernel contributes only its centre tap.
        let wq = [1.0, 0.5, -0.3, 2.0];
        let wk = [0.2, -1.0, 1.5, 0.4];
        let wv = [0.7, 0.1, -0.6, 1.1];
        let wc = [1.2, -0.4, 0.3, 0.9];
        store.assign("dm/q/pw/weight", &wq).unwrap();
        store.assign("dm/k/pw/weight", &wk).unwrap();
        store.assign("dm/v/pw/weight", &wv).unwrap();
        store.assign("dm/out/weight", &wc).unwrap();
        let centre = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let dw = [centre, centre].concat();
        for n in ["q", "k", "v"] {
            store.assign(&format!("dm/{n}/dw/weight"), &dw).unwrap();
        }
        let alpha = 0.8f64;
        store.assign("dm/log_alpha", &[alpha.ln()]).unwrap();

        let fm = [0.9, -0.4];
        let f = [0.3, 0.25];
        let mv = |m: &[f64; 4], x: [f64; 2]| [m[0] * x[0] + m[1] * x[1], m[2] * x[0] + m[3] * x[1]];
        let (q, k, v) = (mv(&wq, fm), mv(&wk, fm), mv(&wv, fm));
        // L2 over a single spatial site reduces to the sign.
        let (qn, kn) = (q.map(f64::signum), k.map(f64::signum));
        let mut att = [0.0; 2];
        for i in 0..2 {
            let s = [qn[i] * kn[0] / alpha, qn[i] * kn[1] / alpha];
            let zsum = s[0].exp() + s[1].exp();
            att[i] = (s[0].exp() * v[0] + s[1].exp() * v[1]) / zsum;
        }
        let proj = mv(&wc, att);
        let expect = [proj[0] + f[0], proj[1] + f[1]];
        let (out, _) = dm.attend(&t(&fm, &[1, 2, 1, 1]), &t(&f, &[1, 2, 1, 1])).unwrap();
        let out = vals(&out);
        for i in 0..2 {
            assert!((out[i] - expect[i]).abs() < 1e-6, "{out:?} vs {expect:?}");
        }
    }

    #[test]
    fn dgnet_zero_branches_pass_through() {
        let mut store = ParamStore::new(DType::F64, 5);
        let dg = DgNet::new(&mut store.root().pp("dg"), 2, 2).unwrap();
        let f = Tensor::randn(0f64, 1.0, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let z = Tensor::randn(0f64, 1.0, (1, 2), &Device::Cpu).unwrap();
        store.zero("dg/gate/pw").unwrap();
        assert_eq!(vals(&dg.forward(&f, &z).unwrap()), vals(&f));

        let mut store = ParamStore::new(DType::F64, 6);
        let dg = DgNet::new(&mut store.root().pp("dg"), 2, 2).unwrap();
        store.zero("dg/value/dw").unwrap();
        assert_eq!(vals(&dg.forward(&f, &z).unwrap()), vals(&f));
    }

    #[test]
    fn dgnet_matches_direct_convolution() {
        let mut store = ParamStore::new(DType::F64, 7);
        let dg = DgNet::new(&mut store.root().pp("dg"), 2, 2).unwrap();
        let p1 = [1.0, -0.5, 0.25, 0.75];
        let p2 = [-0.3, 0.8, 1.1, 0.2];
        let d1: Vec<f64> = (0..18).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.4).collect();
        let d2: Vec<f64> = (0..18).map(|i| ((i * 3) % 5) as f64 / 5.0 - 0.3).collect();
        store.assign("dg/gate/pw/weight", &p1).unwrap();
        store.assign("dg/value/pw/weight", &p2).unwrap();
        store.assign("dg/gate/dw/weight", &d1).unwrap();
        store.assign("dg/value/dw/weight", &d2).unwrap();
        let fm: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let f: Vec<f64> = (0..18).map(|i| (i as f64 * 0.11).cos()).collect();

        let pw = |w: &[f64], x: &[f64]| -> Vec<f64> {
            (0..2).flat_map(|o| (0..9).map(move |p| w[o * 2] * x[p] + w[o * 2 + 1] * x[9 + p])).collect()
        };
        let dw = |k: &[f64], x: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; 18];
            for c in 0..2 {
                for i in 0..3i32 {
                    for j in 0..3i32 {
                        let mut s = 0.0;
                        for di in -1..=1i32 {
                            for dj in -1..=1i32 {
                                let (y, x2) = (i + di, j + dj);
                                if (0..3).contains(&y) && (0..3).contains(&x2) {
                                    s += k[c * 9 + ((di + 1) * 3 + dj + 1) as usize] * x[c * 9 + (y * 3 + x2) as usize];
                                }
                            }
                        }
                        out[c * 9 + (i * 3 + j) as usize] = s;
                    }
                }
            }
            out
        };
        let gelu = |x: f64| {
            let t = Tensor::new(x, &Device::Cpu).unwrap();
            t.gelu_erf().unwrap().to_scalar::<f64>().unwrap()
        };
        let g = dw(&d1, &pw(&p1, &fm));
        let v = dw(&d2, &pw(&p2, &fm));
        let expect: Vec<f64> = (0..18).map(|i| gelu(g[i]) * v[i] + f[i]).collect();
        let out = vals(&dg.attend(&t(&fm, &[1, 2, 3, 3]), &t(&f, &[1, 2, 3, 3])).unwrap());
        for i in 0..18 {
            assert!((out[i] - expect[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn unet_taps_have_expected_geometry() {
        let mut store = ParamStore::new(DType::F64, 8);
        let net = DtNet::new(&mut store.root().pp("dt"), 4, &[4, 8, 8], &[1, 2, 2]).unwrap();
        let img = Tensor::rand(0f64, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let z = Tensor::randn(0f64, 1.0, (2, 4), &Device::Cpu).unwrap();
        let out = net.forward(&img, &z).unwrap();
        let dims: Vec<Vec<usize>> = out.features.iter().map(|f| f.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![2, 4, 16, 16], vec![2, 8, 8, 8], vec![2, 8, 4, 4]]);
        assert_eq!(out.attention.len(), 5);
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        // Both scales feed the loss, so the coarsest map has two consumers.
        use crate::gradcheck::{check_gradients, GradCheckOptions};
        let mut store = ParamStore::new(DType::F64, 9);
        let net = DtNet::new(&mut store.root().pp("dt"), 4, &[4, 8], &[1, 2]).unwrap();
        let images = Tensor::randn(0f64, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let z = Tensor::randn(0f64, 1.0, (1, 4), &Device::Cpu).unwrap();
        let r0 = Tensor::randn(0f64, 1.0, (1, 4, 8, 8), &Device::Cpu).unwrap();
        let r1 = Tensor::randn(0f64, 1.0, (1, 8, 4, 4), &Device::Cpu).unwrap();
        let loss = || -> Result<Tensor> {
            let out = net.forward(&images, &z)?;
            Ok(((&out.features[0] * &r0)?.sum_all()? + (&out.features[1] * &r1)?.sum_all()?)?)
        };
        let vars: Vec<_> =
            ["dt/embed", "dt/enc0", "dt/down0", "dt/enc1"].iter().flat_map(|p| store.vars_with_prefix(p)).collect();
        let opts = GradCheckOptions { eps: 1e-5, coords_per_var: 2, floor: 1e-5, ..Default::default() };
        let rep = check_gradients(&vars, loss, &opts).unwrap();
        assert!(rep.passes(1e-4), "{:?}", rep.worst);
    }
}
