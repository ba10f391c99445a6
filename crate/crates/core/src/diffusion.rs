//! Prior diffusion: forward noising of the prior vector, a conditional noise
//! predictor, and the deterministic reverse chain that recovers the prior
//! from the stage-2 conditioning vector.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llformer::Reduction;
use crate::nn::{sinusoidal_embedding, softmax_last, Builder, Init, Linear};

/// Target for `ᾱ_T` when a schedule is chosen automatically.
pub const ALPHA_BAR_TARGET: f64 = 0.01;
pub const DEFAULT_T: usize = 4;
pub const DEFAULT_BETA_START: f64 = 0.1;
const KL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl BetaSchedule {
    /// Builds a schedule from explicit betas; each must lie in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let s = Self::build(beta);
        debug_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        Ok(s)
    }

    /// Accepts `β = 0` steps so identity limits can be exercised.
    #[doc(hidden)]
    pub fn from_betas_unchecked(beta: Vec<f64>) -> Self {
        Self::build(beta)
    }

    fn build(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self { beta, alpha, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t` for `t ∈ 0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end` (a single step uses `beta_end`).
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<BetaSchedule> {
    if t == 0 {
        return Err(Error::Config("diffusion steps T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}")));
    }
    let beta = if t == 1 {
        vec![beta_end]
    } else {
        (0..t).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64).collect()
    };
    BetaSchedule::from_betas(beta)
}

/// Linear schedule starting at [`DEFAULT_BETA_START`] whose end point is the
/// smallest (to bisection precision) that drives `ᾱ_T` below [`ALPHA_BAR_TARGET`].
pub fn default_schedule(t: usize) -> Result<BetaSchedule> {
    let start = DEFAULT_BETA_START;
    let bar = |end: f64| -> Result<f64> { Ok(make_schedule(t, start, end)?.alpha_bar(t)) };
    if bar(start)? < ALPHA_BAR_TARGET {
        return make_schedule(t, start, start);
    }
    let (mut lo, mut hi) = (start, 0.999);
    if bar(hi)? >= ALPHA_BAR_TARGET {
        return Err(Error::Config(format!(
            "no linear schedule from {start} reaches alpha_bar < {ALPHA_BAR_TARGET} in {t} steps"
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if bar(mid)? < ALPHA_BAR_TARGET {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    make_schedule(t, start, hi)
}

/// `Z_T = √ᾱ_T · Z + √(1 − ᾱ_T) · noise`.
pub fn q_sample(z: &Tensor, schedule: &BetaSchedule, noise: &Tensor) -> Result<Tensor> {
    if z.dims() != noise.dims() {
        return Err(Error::shape("q_sample", format!("{:?}", z.dims()), format!("{:?}", noise.dims())));
    }
    let ab = schedule.alpha_bar(schedule.steps());
    Ok(((z * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariant {
    /// Noise coefficient `(1 − α_t) / √(1 − α_t)`.
    #[default]
    Paper,
    /// Noise coefficient `(1 − α_t) / √(1 − ᾱ_t)`.
    DdpmBar,
}

impl ReverseVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Paper => "paper",
            Self::DdpmBar => "ddpm_bar",
        }
    }
}

impl std::str::FromStr for ReverseVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "ddpm_bar" => Ok(Self::DdpmBar),
            _ => Err(Error::Config(format!("variant must be paper or ddpm_bar, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for ReverseVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Anything that predicts the noise in `z_t` given step and conditioning.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub c_epd: usize,
    /// Hidden width as a multiple of `c_epd`.
    pub hidden_mult: usize,
    pub layers: usize,
    pub zero_init_output: bool,
}

impl DenoiserConfig {
    pub fn new(c_epd: usize) -> Self {
        Self { c_epd, hidden_mult: 4, layers: 4, zero_init_output: false }
    }
}

/// MLP over `concat(z_t, emb(t), x_s2)`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    layers: Vec<Linear>,
    c_epd: usize,
}

impl Denoiser {
    pub fn new(b: &mut Builder, cfg: &DenoiserConfig) -> Result<Self> {
        if cfg.layers < 2 || cfg.c_epd == 0 || cfg.hidden_mult == 0 {
            return Err(Error::Config("denoiser needs >= 2 layers and positive widths".into()));
        }
        let c = cfg.c_epd;
        let hidden = cfg.hidden_mult * c;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let d_in = if i == 0 { 3 * c } else { hidden };
            let d_out = if i + 1 == cfg.layers { c } else { hidden };
            let mut lb = b.pp(format!("fc{i}"));
            let layer = if i + 1 == cfg.layers && cfg.zero_init_output {
                Linear::with_init(&mut lb, d_in, d_out, Init::Zeros, Some(Init::Zeros))?
            } else {
                Linear::new(&mut lb, d_in, d_out, true)?
            };
            layers.push(layer);
        }
        Ok(Self { layers, c_epd: c })
    }

    pub fn c_epd(&self) -> usize {
        self.c_epd
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        let (b, c) = z_t.dims2()?;
        if c != self.c_epd || cond.dims() != [b, c] {
            return Err(Error::shape(
                "denoiser",
                format!("z_t and x_s2 of shape ({b}, {})", self.c_epd),
                format!("{:?} / {:?}", z_t.dims(), cond.dims()),
            ));
        }
        let temb = sinusoidal_embedding(t, c, z_t.dtype(), z_t.device())?.unsqueeze(0)?.broadcast_as((b, c))?;
        let mut x = Tensor::cat(&[z_t, &temb, cond], 1)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i < last {
                x = crate::nn::gelu(&x)?;
            }
        }
        Ok(x)
    }
}

/// Predicts the same value everywhere; useful for checking the update arithmetic.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

impl NoisePredictor for ConstantPredictor {
    fn predict(&self, z_t: &Tensor, _t: usize, _cond: &Tensor) -> Result<Tensor> {
        Ok((z_t.ones_like()? * self.0)?)
    }
}

/// Noise coefficient applied to `ε_θ` at step `t`.
pub fn noise_coefficient(schedule: &BetaSchedule, t: usize, variant: ReverseVariant) -> f64 {
    let beta = schedule.beta(t);
    if beta == 0.0 {
        return 0.0;
    }
    match variant {
        ReverseVariant::Paper => beta / beta.sqrt(),
        ReverseVariant::DdpmBar => beta / (1.0 - schedule.alpha_bar(t)).sqrt(),
    }
}

/// `Z'_{t−1} = (Z'_t − coef_t · ε_θ(Z'_t, t, x_s2)) / √α_t`, deterministic.
pub fn reverse_step(
    predictor: &dyn NoisePredictor,
    z_t: &Tensor,
    t: usize,
    cond: &Tensor,
    schedule: &BetaSchedule,
    variant: ReverseVariant,
) -> Result<Tensor> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::InvalidInput(format!("reverse step t={t} outside 1..={}", schedule.steps())));
    }
    let eps = predictor.predict(z_t, t, cond)?;
    if eps.dims() != z_t.dims() {
        return Err(Error::shape("reverse_step", format!("{:?}", z_t.dims()), format!("{:?}", eps.dims())));
    }
    let coef = noise_coefficient(schedule, t, variant);
    Ok(((z_t - (eps * coef)?)? / schedule.alpha(t).sqrt())?)
}

/// Folds [`reverse_step`] from `t = T` down to `1`.
pub fn run_reverse_chain(
    predictor: &dyn NoisePredictor,
    z_big_t: &Tensor,
    cond: &Tensor,
    schedule: &BetaSchedule,
    variant: ReverseVariant,
) -> Result<Tensor> {
    let mut z = z_big_t.clone();
    for t in (1..=schedule.steps()).rev() {
        z = reverse_step(predictor, &z, t, cond, schedule, variant)?;
    }
    Ok(z)
}

fn check_finite(x: &Tensor, what: &str) -> Result<()> {
    let v = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite values")))
    }
}

/// `Σ_i p_i ln(p_i / q_i)` with `p = softmax(z)`, `q = softmax(z_hat)` along the
/// last axis. Batched inputs are combined according to `reduction`.
pub fn kl_loss(z: &Tensor, z_hat: &Tensor, reduction: Reduction) -> Result<Tensor> {
    if z.dims() != z_hat.dims() || z.rank() == 0 {
        return Err(Error::shape("kl_loss", format!("{:?}", z.dims()), format!("{:?}", z_hat.dims())));
    }
    check_finite(z, "kl_loss reference")?;
    check_finite(z_hat, "kl_loss estimate")?;
    let p = softmax_last(z)?;
    let q = softmax_last(z_hat)?;
    let lp = (&p + KL_EPS)?.log()?;
    let lq = (&q + KL_EPS)?.log()?;
    let per_row = (p * (lp - lq)?)?.sum(D::Minus1)?;
    let rows = per_row.elem_count();
    let total = per_row.sum_all()?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => (total / rows as f64)?,
    })
}

/// `L_total = L_ce + L_kl`.
pub fn total_loss(ce: &Tensor, kl: &Tensor) -> Result<Tensor> {
    Ok((ce + kl)?)
}

/// Standard-normal draw from a seeded generator, shaped `(b, c)`.
pub fn gaussian(b: usize, c: usize, rng: &mut impl rand::Rng, dtype: DType, device: &Device) -> Result<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    let v: Vec<f64> = (0..b * c).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, (b, c), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn t2(v: &[f64], b: usize) -> Tensor {
        Tensor::from_slice(v, (b, v.len() / b), &Device::Cpu).unwrap()
    }

    fn vals(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.99, 0.99).unwrap();
        assert!((s.alpha_bar(1) - 0.01).abs() < 1e-15);
        let s = make_schedule(4, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25, 0.125, 0.0625]);
        let s = make_schedule(4, 0.3, 0.9).unwrap();
        let betas = [0.3, 0.5, 0.7, 0.9];
        let mut prod = 1.0;
        for (i, b) in betas.iter().enumerate() {
            prod *= 1.0 - b;
            assert!((s.alpha_bar(i + 1) - prod).abs() < 1e-12);
        }
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(4, 0.0, 0.2).is_err());
        assert!(make_schedule(4, 0.3, 0.2).is_err());
        assert!(make_schedule(4, 0.3, 1.0).is_err());
        assert!(BetaSchedule::from_betas(vec![0.2, f64::NAN]).is_err());
    }

    #[test]
    fn default_schedule_reaches_target() {
        for t in [1, 2, 3, 4, 6, 8, 16, 64] {
            let s = default_schedule(t).unwrap();
            assert_eq!(s.steps(), t);
            assert!(s.alpha_bar(t) < ALPHA_BAR_TARGET, "T={t}: {}", s.alpha_bar(t));
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        }
    }

    proptest! {
        #[test]
        fn schedules_are_strictly_decreasing(t in 1usize..40, a in 0.001f64..0.9, span in 0.0f64..0.09) {
            let s = make_schedule(t, a, a + span).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(s.alpha_bars().iter().all(|v| *v > 0.0 && *v < 1.0));
        }

        #[test]
        fn kl_is_nonnegative_and_shift_invariant(
            z in proptest::collection::vec(-5.0f64..5.0, 6),
            zh in proptest::collection::vec(-5.0f64..5.0, 6),
            c in -10.0f64..10.0,
        ) {
            let a = t2(&z, 1);
            let b = t2(&zh, 1);
            let kl = kl_loss(&a, &b, Reduction::Sum).unwrap().to_scalar::<f64>().unwrap();
            prop_assert!(kl >= -1e-12);
            let shifted = (&a + c).unwrap();
            let k0 = kl_loss(&a, &shifted, Reduction::Sum).unwrap().to_scalar::<f64>().unwrap();
            prop_assert!(k0.abs() < 1e-9);
        }
    }

    #[test]
    fn q_sample_limits() {
        let z = t2(&[0.3, -1.2, 2.0], 1);
        let noise = t2(&[1.0, -0.5, 0.25], 1);
        let id = BetaSchedule::from_betas_unchecked(vec![0.0, 0.0]);
        assert_eq!(vals(&q_sample(&z, &id, &noise).unwrap()), vals(&z));
        let s = default_schedule(4).unwrap();
        let zero = z.zeros_like().unwrap();
        let expect: Vec<f64> = vals(&z).iter().map(|v| v * s.alpha_bar(4).sqrt()).collect();
        assert_eq!(vals(&q_sample(&z, &s, &zero).unwrap()), expect);
        assert!(q_sample(&z, &s, &t2(&[1.0, 2.0], 1)).is_err());
    }

    #[test]
    fn reverse_step_arithmetic() {
        let z = t2(&[0.9, -0.4], 1);
        let cond = z.zeros_like().unwrap();
        // β = 0.36 so α = 0.64.
        let s = BetaSchedule::from_betas(vec![0.36]).unwrap();
        let out = vals(&reverse_step(&ConstantPredictor(0.5), &z, 1, &cond, &s, ReverseVariant::Paper).unwrap());
        for (o, zi) in out.iter().zip([0.9, -0.4]) {
            assert!((o - (zi - 0.5 * 0.36 / 0.6) / 0.8).abs() < 1e-12);
        }
        let zero = ConstantPredictor(0.0);
        let out = vals(&reverse_step(&zero, &z, 1, &cond, &s, ReverseVariant::DdpmBar).unwrap());
        assert!((out[0] - 0.9 / 0.8).abs() < 1e-12);

        let id = BetaSchedule::from_betas_unchecked(vec![0.0]);
        for v in [ReverseVariant::Paper, ReverseVariant::DdpmBar] {
            assert_eq!(vals(&reverse_step(&ConstantPredictor(3.0), &z, 1, &cond, &id, v).unwrap()), vals(&z));
        }
        assert!(reverse_step(&zero, &z, 0, &cond, &s, ReverseVariant::Paper).is_err());
        assert!(reverse_step(&zero, &z, 2, &cond, &s, ReverseVariant::Paper).is_err());
    }

    #[test]
    fn chain_composition() {
        let z = t2(&[0.9, -0.4, 1.5], 1);
        let cond = z.zeros_like().unwrap();
        let s1 = make_schedule(1, 0.3, 0.3).unwrap();
        let p = ConstantPredictor(0.2);
        assert_eq!(
            vals(&run_reverse_chain(&p, &z, &cond, &s1, ReverseVariant::Paper).unwrap()),
            vals(&reverse_step(&p, &z, 1, &cond, &s1, ReverseVariant::Paper).unwrap())
        );
        let s2 = make_schedule(2, 0.2, 0.5).unwrap();
        let out = vals(&run_reverse_chain(&ConstantPredictor(0.0), &z, &cond, &s2, ReverseVariant::Paper).unwrap());
        let denom = (s2.alpha(1) * s2.alpha(2)).sqrt();
        for (o, zi) in out.iter().zip(vals(&z)) {
            assert!((o - zi / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn denoiser_contract() {
        let mut store = ParamStore::new(DType::F64, 31);
        let d = Denoiser::new(&mut store.root().pp("denoiser"), &DenoiserConfig::new(6)).unwrap();
        let z = Tensor::randn(0f64, 1.0, (3, 6), &Device::Cpu).unwrap();
        let c = Tensor::randn(0f64, 1.0, (3, 6), &Device::Cpu).unwrap();
        let a = d.predict(&z, 2, &c).unwrap();
        assert_eq!(a.dims(), &[3, 6]);
        assert!(vals(&a).iter().all(|v| v.is_finite()));
        assert_eq!(vals(&a), vals(&d.predict(&z, 2, &c).unwrap()));
        assert_ne!(vals(&a), vals(&d.predict(&z, 3, &c).unwrap()));
        assert!(d.predict(&z, 1, &c.narrow(1, 0, 5).unwrap()).is_err());

        let mut cfg = DenoiserConfig::new(6);
        cfg.zero_init_output = true;
        let mut store = ParamStore::new(DType::F64, 32);
        let d = Denoiser::new(&mut store.root().pp("denoiser"), &cfg).unwrap();
        assert!(vals(&d.predict(&z, 1, &c).unwrap()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kl_examples() {
        let z = t2(&[1.0, 0.0, 0.0], 1);
        assert_eq!(kl_loss(&z, &z, Reduction::Sum).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let zh = t2(&[0.0, 0.0, 0.0], 1);
        let e = std::f64::consts::E;
        let p = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        let expect: f64 = p.iter().map(|pi| pi * (pi / (1.0 / 3.0)).ln()).sum();
        let got = kl_loss(&z, &zh, Reduction::Sum).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - expect).abs() < 1e-9);
        let bad = t2(&[f64::NAN, 0.0, 0.0], 1);
        assert!(kl_loss(&bad, &zh, Reduction::Sum).is_err());
        assert!(kl_loss(&z, &t2(&[0.0, 0.0], 1), Reduction::Sum).is_err());
    }

    #[test]
    fn total_loss_adds() {
        let a = Tensor::new(1.5f64, &Device::Cpu).unwrap();
        let b = Tensor::new(0.25f64, &Device::Cpu).unwrap();
        assert_eq!(total_loss(&a, &b).unwrap().to_scalar::<f64>().unwrap(), 1.75);
        let z = Tensor::new(0f64, &Device::Cpu).unwrap();
        assert_eq!(total_loss(&z, &z).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn seeded_gaussian_is_reproducible() {
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(2, 3, &mut a, DType::F64, &Device::Cpu).unwrap();
        let y = gaussian(2, 3, &mut b, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(vals(&x), vals(&y));
    }
}
