#![allow(dead_code)]

use mlsm_core::nn::{Module, Slot};
use mlsm_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    t
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn with_param<M: Module<f64>>(m: &mut M, target: usize, f: &mut dyn FnMut(&mut Tensor<f64>, &Tensor<f64>)) {
    let mut idx = 0;
    m.visit_mut("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            if idx == target {
                f(&mut p.value, &p.grad);
            }
            idx += 1;
        }
    });
}

pub fn param_count<M: Module<f64>>(m: &mut M) -> usize {
    let mut n = 0;
    m.visit_mut("", &mut |_, slot| {
        if matches!(slot, Slot::Param(_)) {
            n += 1
        }
    });
    n
}

fn central<M: Module<f64> + Clone>(model: &M, p: usize, j: usize, step: f64, loss: &impl Fn(&mut M) -> f64) -> f64 {
    let mut probe = model.clone();
    with_param(&mut probe, p, &mut |v, _| v.data_mut()[j] += step);
    let up = loss(&mut probe);
    let mut probe = model.clone();
    with_param(&mut probe, p, &mut |v, _| v.data_mut()[j] -= step);
    let down = loss(&mut probe);
    (up - down) / (2.0 * step)
}

/// Compares accumulated parameter gradients against central differences of
/// `loss` on up to `per_tensor` randomly chosen entries of every parameter.
/// Entries whose error exceeds 1e-2 are re-measured with a stencil 1000x
/// narrower. Returns `(max relative error, entries checked)`.
pub fn check_param_grads<M: Module<f64> + Clone>(
    model: &mut M,
    backprop: impl Fn(&mut M),
    loss: impl Fn(&mut M) -> f64,
    step: f64,
    per_tensor: usize,
    seed: u64,
) -> (f64, usize) {
    model.zero_grad();
    backprop(model);
    let mut pick = rng(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for p in 0..param_count(model) {
        let mut len = 0;
        let mut grads = Vec::new();
        with_param(model, p, &mut |v, g| {
            len = v.len();
            grads = g.data().to_vec();
        });
        let entries: Vec<usize> = (0..per_tensor.min(len)).map(|_| pick.gen_range(0..len)).collect();
        for j in entries {
            let mut e = rel_err(grads[j], central(model, p, j, step, &loss));
            if e > 1e-2 {
                // a ReLU or max-pool switch inside the stencil; retry with a stencil too small to cross it
                e = e.min(rel_err(grads[j], central(model, p, j, step * 1e-3, &loss)));
            }
            if std::env::var_os("GRAD_DEBUG").is_some() && e > 1e-2 {
                eprintln!("param {p} entry {j}: analytic {} rel err {e}", grads[j]);
            }
            worst = worst.max(e);
            checked += 1;
        }
    }
    (worst, checked)
}
