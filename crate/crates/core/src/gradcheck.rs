//! Central finite-difference check of autodiff gradients.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per variable; all of them when the tensor is smaller.
    pub coords_per_var: usize,
    /// When set, samples `ceil(fraction · n)` coordinates of each variable
    /// instead of `coords_per_var`.
    pub fraction: Option<f64>,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-6, coords_per_var: 8, fraction: None, floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradMismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

fn set_coord(var: &Var, base: &[f64], idx: usize, value: f64) -> Result<()> {
    let mut v = base.to_vec();
    v[idx] = value;
    let t = Tensor::from_vec(v, var.shape(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Compares `d loss / d var` from backprop against central differences for a
/// sample of coordinates of every variable. `loss` must return a scalar and be
/// a pure function of the variables' current values. Variables are restored
/// afterwards. Use `F64` variables; single precision is too coarse for the
/// default step.
pub fn check_gradients<F>(vars: &[(String, Var)], loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let l0 = loss()?;
    if l0.rank() != 0 {
        return Err(Error::shape("check_gradients", "scalar loss", format!("{:?}", l0.dims())));
    }
    let grads = l0.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    let eval = || -> Result<f64> { Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?) };

    for (name, var) in vars {
        let base = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        let n = base.len();
        let want = match opts.fraction {
            Some(f) => ((f * n as f64).ceil() as usize).max(1),
            None => opts.coords_per_var,
        };
        let picks: Vec<usize> = if n <= want { (0..n).collect() } else { sample(&mut rng, n, want).into_vec() };
        for idx in picks {
            set_coord(var, &base, idx, base[idx] + opts.eps)?;
            let up = eval()?;
            set_coord(var, &base, idx, base[idx] - opts.eps)?;
            let down = eval()?;
            set_coord(var, &base, idx, base[idx])?;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[idx];
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel_err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel_err);
                if rel_err >= report.max_rel_err {
                    report.worst = Some(GradMismatch { name: name.clone(), index: idx, analytic: a, numeric, rel_err });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn polynomial_gradient_matches() {
        let x = Var::from_slice(&[0.5f64, -1.5, 2.0], 3, &Device::Cpu).unwrap();
        let xc = x.clone();
        let loss = move || -> Result<Tensor> { Ok((xc.as_tensor().powf(3.0)? * 0.5)?.sum_all()?) };
        let rep = check_gradients(&[("x".into(), x)], loss, &GradCheckOptions::default()).unwrap();
        assert_eq!(rep.checked, 3);
        assert!(rep.passes(1e-6), "{rep:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Var::from_slice(&[0.5f64, -1.5], 2, &Device::Cpu).unwrap();
        let xc = x.clone();
        // detach hides the dependence from backprop, so analytic = 0.
        let loss = move || -> Result<Tensor> { Ok(xc.as_tensor().detach().sqr()?.sum_all()?) };
        let rep = check_gradients(&[("x".into(), x)], loss, &GradCheckOptions::default()).unwrap();
        assert!(!rep.passes(1e-4));
    }
}
