//! Adam with L2 weight decay folded into the gradient, and learning-rate schedules.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => {
                let frac = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    slots: Vec<Slot>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: usize,
}

impl Adam {
    pub fn new(vars: Vec<Var>, weight_decay: f64) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|var| {
                let z = var.as_tensor().zeros_like()?;
                Ok(Slot { m: z.clone(), v: z, var })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { slots, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update. Variables without a gradient keep their value and moments.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let theta = slot.var.as_tensor().detach();
            let g = if self.weight_decay != 0.0 { (g.detach() + (&theta * self.weight_decay)?)? } else { g.detach() };
            slot.m = ((&slot.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            slot.v = ((&slot.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&slot.v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&slot.m / bc1)? / denom)?;
            slot.var.set(&(theta - (update * lr)?)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let x = Var::from_slice(&[1.0f64, -2.0], 2, &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![x.clone()], 0.0).unwrap();
        let loss = (x.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        // m̂/√v̂ = g/|g| on the first step.
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 2.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::from_slice(&[3.0f64, -4.0], 2, &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![x.clone()], 0.0).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.05).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn cosine_ends_at_zero() {
        assert_eq!(LrSchedule::Cosine.lr_at(1.0, 0, 10), 1.0);
        assert!(LrSchedule::Cosine.lr_at(1.0, 10, 10).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.lr_at(0.3, 7, 10), 0.3);
    }
}
