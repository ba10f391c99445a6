//! Hand-written CPU kernels for ops whose composed autodiff form is slow.

use std::ops::{Add, Mul};

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use crate::error::{Error, Result};

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("depthwise kernel expects contiguous inputs"),
    }
}

fn tap(flip: bool, dy: usize, dx: usize) -> usize {
    if flip {
        (2 - dy) * 3 + (2 - dx)
    } else {
        dy * 3 + dx
    }
}

/// Same-padded 3×3 depthwise correlation of `x (B, C, H, W)` with `w (C, 3, 3)`.
fn dw_forward<T>(x: &[T], w: &[T], dims: [usize; 4], flip: bool) -> Vec<T>
where
    T: Copy + Default + Add<Output = T> + Mul<Output = T>,
{
    let [b, c, h, wd] = dims;
    let mut y = vec![T::default(); x.len()];
    for bc in 0..b * c {
        let ch = bc % c;
        let k = &w[ch * 9..ch * 9 + 9];
        let src = &x[bc * h * wd..(bc + 1) * h * wd];
        let dst = &mut y[bc * h * wd..(bc + 1) * h * wd];
        for dy in 0..3 {
            for dx in 0..3 {
                let kv = k[tap(flip, dy, dx)];
                let (y0, y1) = (1usize.saturating_sub(dy), (h + 1 - dy).min(h));
                let (x0, x1) = (1usize.saturating_sub(dx), (wd + 1 - dx).min(wd));
                for i in y0..y1 {
                    let si = (i + dy - 1) * wd;
                    let di = i * wd;
                    for j in x0..x1 {
                        dst[di + j] = dst[di + j] + kv * src[si + j + dx - 1];
                    }
                }
            }
        }
    }
    y
}

/// `∂L/∂w` for [`dw_forward`] given the input and the output gradient.
fn dw_weight_grad<T>(x: &[T], g: &[T], dims: [usize; 4], flip: bool) -> Vec<T>
where
    T: Copy + Default + Add<Output = T> + Mul<Output = T>,
{
    let [b, c, h, wd] = dims;
    let mut gw = vec![T::default(); c * 9];
    for bc in 0..b * c {
        let ch = bc % c;
        let src = &x[bc * h * wd..(bc + 1) * h * wd];
        let gr = &g[bc * h * wd..(bc + 1) * h * wd];
        for dy in 0..3 {
            for dx in 0..3 {
                let (y0, y1) = (1usize.saturating_sub(dy), (h + 1 - dy).min(h));
                let (x0, x1) = (1usize.saturating_sub(dx), (wd + 1 - dx).min(wd));
                let mut acc = T::default();
                for i in y0..y1 {
                    let si = (i + dy - 1) * wd;
                    let di = i * wd;
                    for j in x0..x1 {
                        acc = acc + gr[di + j] * src[si + j + dx - 1];
                    }
                }
                let slot = ch * 9 + tap(flip, dy, dx);
                gw[slot] = gw[slot] + acc;
            }
        }
    }
    gw
}

struct Depthwise3x3 {
    flip: bool,
}

struct Depthwise3x3WeightGrad {
    flip: bool,
}

fn dims4(l: &Layout) -> candle_core::Result<[usize; 4]> {
    let (b, c, h, w) = l.shape().dims4()?;
    Ok([b, c, h, w])
}

impl CustomOp2 for Depthwise3x3 {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = dims4(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(dw_forward(contiguous_slice(x, l1)?, contiguous_slice(w, l2)?, dims, self.flip))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(dw_forward(contiguous_slice(x, l1)?, contiguous_slice(w, l2)?, dims, self.flip))
            }
            _ => candle_core::bail!("depthwise3x3 supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2(w, Depthwise3x3 { flip: !self.flip })?;
        let gw = x.apply_op2_no_bwd(&grad, &Depthwise3x3WeightGrad { flip: self.flip })?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for Depthwise3x3WeightGrad {
    fn name(&self) -> &'static str {
        "depthwise3x3_weight_grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = dims4(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(dw_weight_grad(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, dims, self.flip))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(dw_weight_grad(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, dims, self.flip))
            }
            _ => candle_core::bail!("depthwise3x3 supports matching f32 or f64 inputs"),
        };
        Ok((out, Shape::from((dims[1], 3, 3))))
    }
}

/// Same-padded 3×3 depthwise correlation, `x (B, C, H, W)`, `weight (C, 3, 3)`.
pub fn depthwise3x3(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if weight.dims() != [c, 3, 3] {
        return Err(Error::shape("depthwise3x3", format!("({c}, 3, 3)"), format!("{:?}", weight.dims())));
    }
    if x.dtype() != weight.dtype() {
        return Err(Error::InvalidInput(format!(
            "depthwise3x3 dtype mismatch: {:?} vs {:?}",
            x.dtype(),
            weight.dtype()
        )));
    }
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, Depthwise3x3 { flip: false })?)
}

trait Real: Copy + Default + Add<Output = Self> + Mul<Output = Self> {
    fn f(self) -> f64;
    fn of(v: f64) -> Self;
}

impl Real for f32 {
    fn f(self) -> f64 {
        self as f64
    }
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn f(self) -> f64 {
        self
    }
    fn of(v: f64) -> Self {
        v
    }
}

fn map_unary(s: &CpuStorage, l: &Layout, f: impl Fn(f64) -> f64) -> candle_core::Result<CpuStorage> {
    Ok(match s {
        CpuStorage::F32(v) => CpuStorage::F32(contiguous_slice(v, l)?.iter().map(|x| f(x.f()) as f32).collect()),
        CpuStorage::F64(v) => CpuStorage::F64(contiguous_slice(v, l)?.iter().map(|x| f(*x)).collect()),
        _ => candle_core::bail!("kernel supports f32 or f64"),
    })
}

fn map_binary(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    f: impl Fn(f64, f64) -> f64,
) -> candle_core::Result<CpuStorage> {
    Ok(match (s1, s2) {
        (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32(
            contiguous_slice(a, l1)?
                .iter()
                .zip(contiguous_slice(b, l2)?)
                .map(|(x, y)| f(x.f(), y.f()) as f32)
                .collect(),
        ),
        (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64(
            contiguous_slice(a, l1)?.iter().zip(contiguous_slice(b, l2)?).map(|(x, y)| f(*x, *y)).collect(),
        ),
        _ => candle_core::bail!("kernel supports matching f32 or f64 inputs"),
    })
}

fn erf(x: f64) -> f64 {
    candle_core::cpu::erf::erf_f64(x)
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_prime(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

struct Gelu;
struct GeluGrad;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu_erf_fused"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((map_unary(s, l, gelu_scalar)?, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu_erf_grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((map_binary(s1, l1, s2, l2, |x, g| g * gelu_prime(x))?, l1.shape().clone()))
    }
}

/// Exact (erf-based) GELU with a single fused backward kernel.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

/// Normalizes `x` viewed as `(outer, n, inner)` over the middle axis.
struct Normalize {
    n: usize,
    inner: usize,
    eps: f64,
}

fn normalize_fwd<T: Real>(x: &[T], n: usize, inner: usize, eps: f64) -> Vec<T> {
    let mut y = vec![T::default(); x.len()];
    let outer = x.len() / (n * inner);
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |k: usize| base + k * inner + i;
            let mean = (0..n).map(|k| x[at(k)].f()).sum::<f64>() / n as f64;
            let var = (0..n).map(|k| (x[at(k)].f() - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for k in 0..n {
                y[at(k)] = T::of((x[at(k)].f() - mean) * inv);
            }
        }
    }
    y
}

fn normalize_bwd<T: Real>(x: &[T], g: &[T], n: usize, inner: usize, eps: f64) -> Vec<T> {
    let mut dx = vec![T::default(); x.len()];
    let outer = x.len() / (n * inner);
    let nf = n as f64;
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |k: usize| base + k * inner + i;
            let mean = (0..n).map(|k| x[at(k)].f()).sum::<f64>() / nf;
            let var = (0..n).map(|k| (x[at(k)].f() - mean).powi(2)).sum::<f64>() / nf;
            let inv = 1.0 / (var + eps).sqrt();
            let (mut gm, mut gym) = (0.0, 0.0);
            for k in 0..n {
                let y = (x[at(k)].f() - mean) * inv;
                gm += g[at(k)].f();
                gym += g[at(k)].f() * y;
            }
            gm /= nf;
            gym /= nf;
            for k in 0..n {
                let y = (x[at(k)].f() - mean) * inv;
                dx[at(k)] = T::of(inv * (g[at(k)].f() - gm - y * gym));
            }
        }
    }
    dx
}

struct NormalizeGrad {
    n: usize,
    inner: usize,
    eps: f64,
}

impl CustomOp1 for Normalize {
    fn name(&self) -> &'static str {
        "normalize_axis"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(normalize_fwd(contiguous_slice(v, l)?, self.n, self.inner, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(normalize_fwd(contiguous_slice(v, l)?, self.n, self.inner, self.eps)),
            _ => candle_core::bail!("normalize supports f32 or f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = NormalizeGrad { n: self.n, inner: self.inner, eps: self.eps };
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &op)?))
    }
}

impl CustomOp2 for NormalizeGrad {
    fn name(&self) -> &'static str {
        "normalize_axis_grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(normalize_bwd(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                self.n,
                self.inner,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(normalize_bwd(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                self.n,
                self.inner,
                self.eps,
            )),
            _ => candle_core::bail!("normalize supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Zero-mean, unit-variance normalization along `axis` (biased variance, `eps` inside the root).
pub fn normalize_axis(x: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    let dims = x.dims();
    if axis >= dims.len() {
        return Err(Error::shape("normalize_axis", format!("axis < {}", dims.len()), axis));
    }
    let n = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    Ok(x.contiguous()?.apply_op1(Normalize { n, inner, eps })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use candle_core::{Device, Var};

    #[test]
    fn gradients_match_finite_differences() {
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &Device::Cpu).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (3, 3, 3), &Device::Cpu).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &Device::Cpu).unwrap();
        let (xc, wc) = (x.clone(), w.clone());
        let loss = move || -> Result<Tensor> {
            let y = depthwise3x3(xc.as_tensor(), wc.as_tensor())?;
            // Second application exercises the flipped-kernel path in backward.
            let y2 = depthwise3x3(&y.sqr()?, wc.as_tensor())?;
            Ok((y2 * &probe)?.sum_all()?)
        };
        let opts = GradCheckOptions { coords_per_var: 40, ..Default::default() };
        let rep = check_gradients(&[("x".into(), x), ("w".into(), w)], loss, &opts).unwrap();
        assert!(rep.passes(1e-6), "{rep:?}");
    }

    #[test]
    fn gelu_matches_candle_and_finite_differences() {
        let x = ramp(&[3, 7], 2.0);
        let a = gelu(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = x.gelu_erf().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        let v = Var::from_tensor(&x).unwrap();
        let vc = v.clone();
        let probe = ramp(&[3, 7], 0.7).cos().unwrap();
        let loss = move || -> Result<Tensor> { Ok((gelu(vc.as_tensor())? * &probe)?.sum_all()?) };
        let rep =
            check_gradients(&[("x".into(), v)], loss, &GradCheckOptions { coords_per_var: 21, ..Default::default() })
                .unwrap();
        assert!(rep.passes(1e-5), "{rep:?}");
    }

    /// Deterministic, non-degenerate values `scale·sin(1.3·i + 0.4)`.
    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| scale * (1.3 * i as f64 + 0.4).sin()).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn normalize_matches_composed_ops_and_finite_differences() {
        let x = ramp(&[2, 4, 3, 5], 1.5);
        let fused = normalize_axis(&x, 1, 1e-5).unwrap();
        let mean = x.mean_keepdim(1).unwrap();
        let c = x.broadcast_sub(&mean).unwrap();
        let var = c.sqr().unwrap().mean_keepdim(1).unwrap();
        let composed = c.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap();
        let d = (fused - composed).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);

        for axis in [1, 3] {
            let v = Var::from_tensor(&x).unwrap();
            let vc = v.clone();
            let probe = ramp(&[2, 4, 3, 5], 1.0).cos().unwrap();
            let loss =
                move || -> Result<Tensor> { Ok((normalize_axis(vc.as_tensor(), axis, 1e-5)? * &probe)?.sum_all()?) };
            let rep = check_gradients(
                &[("x".into(), v)],
                loss,
                &GradCheckOptions { coords_per_var: 48, ..Default::default() },
            )
            .unwrap();
            assert!(rep.passes(1e-5), "axis {axis}: {rep:?}");
        }
    }
}
