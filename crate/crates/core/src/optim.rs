//! Adam and the step-halving learning-rate schedule.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::nn::{Module, Slot};
use crate::tensor::{Real, Tensor};

/// `lr0 * 0.5^floor(episode / half_period)`.
pub fn lr_schedule(episode: u64, lr0: f64, half_period: u64) -> f64 {
    let halvings = episode / half_period.max(1);
    if halvings >= 1100 {
        return 0.0;
    }
    lr0 * num_traits::Float::powi(0.5f64, halvings as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken.
    pub t: u64,
    /// First and second moments, one pair per parameter in visit order.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Real> Adam<T> {
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = 1.0 - num_traits::Float::powi(self.beta1, self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - num_traits::Float::powi(self.beta2, self.t.min(i32::MAX as u64) as i32);
        let step = T::of(lr / bc1);
        let sqrt_bc2 = T::of(num_traits::Float::sqrt(bc2));
        let eps = T::of(self.eps);
        let mut idx = 0;
        let mut bad = false;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        module.visit_mut("", &mut |_, slot| {
            let Slot::Param(p) = slot else { return };
            if m_all.len() == idx {
                m_all.push(Tensor::zeros(p.value.shape()));
                v_all.push(Tensor::zeros(p.value.shape()));
            }
            let (m, v) = (&mut m_all[idx], &mut v_all[idx]);
            if m.shape() != p.value.shape() {
                bad = true;
                return;
            }
            let it = p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &g), (mm, vv)) in it {
                *mm = b1 * *mm + (T::one() - b1) * g;
                *vv = b2 * *vv + (T::one() - b2) * g * g;
                *w -= step * *mm / ((*vv).sqrt() / sqrt_bc2 + eps);
            }
            idx += 1;
        });
        if bad {
            return Err(invalid("optimizer state does not match the model layout"));
        }
        Ok(())
    }
}
