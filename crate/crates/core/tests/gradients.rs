//! Finite-difference checks of every backward pass, in f64.

#![allow(clippy::needless_range_loop)]

mod common;

use common::{check_param_grads, random, rel_err, rng};
use mlsm_core::encoder::{gap, Encoder, Levels, MapAdjuster};
use mlsm_core::localizer::{weighted_map_sum, BaseClassifier};
use mlsm_core::nn::{Linear, Module};
use mlsm_core::relation::{episode_loss, episode_loss_grad, pair_rows, LossKind, SimilarityHead};
use mlsm_core::{EpisodeBatch, MlsmModel, ModelConfig, Tensor};

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-2;

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn map_adjuster_parameter_gradients() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let mut adj = MapAdjuster::<f64>::new(64, 5, 16, &mut r);
        let x = random(&[3, 64, 5, 5], &mut r);
        let weights = random(&[3, 16], &mut r);
        let (worst, n) = check_param_grads(
            &mut adj,
            |m| {
                let (y, cache) = m.forward(&x, true).unwrap();
                let _ = y;
                m.backward(&cache, &weights);
            },
            |m| dot(&m.forward(&x, true).unwrap().0, &weights),
            STEP,
            6,
            seed,
        );
        assert!(n > 30);
        assert!(worst <= REL_TOL, "seed {seed}: max rel err {worst}");
    }
}

#[test]
fn map_adjuster_input_gradient() {
    let mut r = rng(11);
    let mut adj = MapAdjuster::<f64>::new(64, 4, 8, &mut r);
    let x = random(&[2, 64, 4, 4], &mut r);
    let weights = random(&[2, 8], &mut r);
    let (_, cache) = adj.forward(&x, true).unwrap();
    let dx = adj.backward(&cache, &weights);
    let objective = |x: &Tensor<f64>| dot(&adj.clone().forward(x, true).unwrap().0, &weights);
    for j in (0..x.len()).step_by(37) {
        let numeric = |step: f64| {
            let (mut up, mut down) = (x.clone(), x.clone());
            up.data_mut()[j] += step;
            down.data_mut()[j] -= step;
            (objective(&up) - objective(&down)) / (2.0 * step)
        };
        let mut e = rel_err(dx.data()[j], numeric(STEP));
        if e > REL_TOL {
            // pooling switch inside the stencil
            e = e.min(rel_err(dx.data()[j], numeric(STEP * 1e-3)));
        }
        assert!(e <= REL_TOL, "entry {j}: {e}");
    }
}

#[test]
fn global_adjuster_parameter_gradients() {
    let mut r = rng(5);
    let mut fc = Linear::<f64>::new(64, 16, &mut r);
    let x = random(&[4, 64], &mut r);
    let weights = random(&[4, 16], &mut r);
    let (worst, _) = check_param_grads(
        &mut fc,
        |m| {
            m.backward(&x, &weights);
        },
        |m| dot(&m.forward(&x).unwrap(), &weights),
        STEP,
        20,
        5,
    );
    assert!(worst <= REL_TOL, "max rel err {worst}");
}

#[test]
fn similarity_head_parameter_gradients() {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let mut head = SimilarityHead::<f64>::new(32, 8, &mut r);
        let reps = random(&[5, 16], &mut r);
        let queries = random(&[10, 16], &mut r);
        let labels: Vec<usize> = (0..10).map(|q| q % 5).collect();
        let pairs = pair_rows(&reps, &queries);
        let (worst, _) = check_param_grads(
            &mut head,
            |h| {
                let (s, cache) = h.forward(&pairs).unwrap();
                let (_, ds) = episode_loss_grad(&s.reshape(&[10, 5]).unwrap(), &labels, LossKind::Mse).unwrap();
                h.backward(&cache, &ds.reshape(&[50, 1]).unwrap());
            },
            |h| {
                let s = h.forward(&pairs).unwrap().0.reshape(&[10, 5]).unwrap();
                episode_loss(&s, &labels, LossKind::Mse).unwrap()
            },
            STEP,
            40,
            seed,
        );
        assert!(worst <= REL_TOL, "seed {seed}: max rel err {worst}");
    }
}

#[test]
fn bce_loss_gradient_matches_differences() {
    let mut r = rng(8);
    let mut s = random(&[3, 4], &mut r);
    s.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.4 * *v);
    let labels = [0, 3, 1];
    let (_, g) = episode_loss_grad(&s, &labels, LossKind::Bce).unwrap();
    for j in 0..s.len() {
        let (mut up, mut down) = (s.clone(), s.clone());
        up.data_mut()[j] += 1e-6;
        down.data_mut()[j] -= 1e-6;
        let numeric = (episode_loss(&up, &labels, LossKind::Bce).unwrap()
            - episode_loss(&down, &labels, LossKind::Bce).unwrap())
            / 2e-6;
        assert!(rel_err(g.data()[j], numeric) < 1e-5);
    }
}

#[test]
fn encoder_parameter_gradients() {
    let mut r = rng(21);
    let mut enc = Encoder::<f64>::new(3, &mut r);
    let x = random(&[2, 3, 8, 8], &mut r);
    let weights = random(&[2, 64, 2, 2], &mut r);
    let (worst, _) = check_param_grads(
        &mut enc,
        |m| {
            let (_, cache) = m.forward(&x, true).unwrap();
            m.backward(&cache, &weights);
        },
        |m| dot(&m.forward(&x, true).unwrap().0, &weights),
        STEP,
        4,
        21,
    );
    assert!(worst <= REL_TOL, "max rel err {worst}");
}

fn tiny_batch(r: &mut rand_chacha::ChaCha8Rng, size: usize, k: usize) -> EpisodeBatch<f64> {
    let c_way = 3;
    let support_labels: Vec<usize> = (0..c_way).flat_map(|c| std::iter::repeat_n(c, k)).collect();
    let query_labels = vec![0, 1, 2, 1];
    let ns = support_labels.len();
    EpisodeBatch {
        c_way,
        support: random(&[ns, 3, size, size], r),
        support_crops: Some(random(&[ns, 3, size, size], r)),
        support_labels,
        query: random(&[4, 3, size, size], r),
        query_crops: Some(random(&[4, 3, size, size], r)),
        query_labels,
    }
}

#[test]
fn full_model_parameter_gradients_every_level_mode() {
    for (i, levels) in [Levels::IGO, Levels::IG, Levels::I].into_iter().enumerate() {
        let mut r = rng(40 + i as u64);
        let config = ModelConfig { image_size: 8, fused_dim: 8, hidden: 4, levels, loss: LossKind::Mse };
        let mut model = MlsmModel::<f64>::new(config, &mut r).unwrap();
        let batch = tiny_batch(&mut r, 8, 2);
        let (worst, _) = check_param_grads(
            &mut model,
            |m| {
                m.accumulate_gradients(&batch).unwrap();
            },
            |m| m.clone().accumulate_gradients(&batch).unwrap(),
            STEP,
            3,
            i as u64,
        );
        assert!(worst <= REL_TOL, "{levels:?}: max rel err {worst}");
    }
}

#[test]
fn cam_weights_match_finite_differences_on_twenty_classifiers() {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut r = rng(1000 + seed);
        let clf = BaseClassifier::<f64>::new(4, &mut r);
        let image = random(&[3, 16, 16], &mut r);
        let maps = clf.features(&image.clone().reshape(&[1, 3, 16, 16]).unwrap()).unwrap();
        let c = (seed % 4) as usize;
        let alpha = clf.cam_weights(&image, c).unwrap().alpha;
        let (k_maps, h, w) = (maps.shape()[1], maps.shape()[2], maps.shape()[3]);
        assert_eq!(alpha.len(), k_maps);
        for k in 0..k_maps {
            let mut sum = 0.0;
            for p in 0..h * w {
                let j = k * h * w + p;
                let (mut up, mut down) = (maps.clone(), maps.clone());
                up.data_mut()[j] += STEP;
                down.data_mut()[j] -= STEP;
                let yu = clf.logits_from_features(&up).unwrap().data()[c];
                let yd = clf.logits_from_features(&down).unwrap().data()[c];
                sum += (yu - yd) / (2.0 * STEP);
            }
            worst = worst.max(rel_err(alpha[k], sum / (h * w) as f64));
        }
    }
    assert!(worst <= 1e-3, "max rel err {worst}");
}

#[test]
fn logit_gradient_ignores_other_classes() {
    let mut r = rng(3);
    let mut clf = BaseClassifier::<f64>::new(5, &mut r);
    let maps = random(&[1, 64, 3, 3], &mut r);
    let before = clf.logit_gradient(&maps, 2).unwrap();
    // scramble every row except class 2
    for (i, w) in clf.fc.weight.value.data_mut().iter_mut().enumerate() {
        if i / 64 != 2 {
            *w = 7.0 * (i as f64).sin();
        }
    }
    assert_eq!(clf.logit_gradient(&maps, 2).unwrap(), before);
}

#[test]
fn heatmap_matches_naive_weighted_sum() {
    for seed in 0..10 {
        let mut r = rng(500 + seed);
        let maps = random(&[4, 6, 5], &mut r);
        let alpha: Vec<f64> = random(&[4], &mut r).into_data();
        let got = weighted_map_sum(&alpha, &maps).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                let mut acc = 0.0;
                for (k, a) in alpha.iter().enumerate() {
                    acc += a * maps.data()[(k * 6 + i) * 5 + j];
                }
                let want = if acc > 0.0 { acc } else { 0.0 };
                assert!((got.data()[i * 5 + j] - want).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn gradcam_of_gap_linear_classifier_uses_weight_over_area() {
    // y^c = w_c . gap(A) + b, so alpha_k = w_ck / Z
    let mut r = rng(77);
    let clf = BaseClassifier::<f64>::new(3, &mut r);
    let image = random(&[3, 12, 12], &mut r);
    let alpha = clf.cam_weights(&image, 1).unwrap().alpha;
    let z = 9.0; // 12 -> 3 x 3 map
    for (k, a) in alpha.iter().enumerate() {
        assert!((a - clf.fc.weight.value.data()[64 + k] / z).abs() < 1e-12);
    }
    let _ = gap(&Tensor::<f64>::zeros(&[1, 1, 1, 1])).unwrap();
}

#[test]
fn module_parameter_counts() {
    let mut r = rng(0);
    let model = MlsmModel::<f32>::new(ModelConfig::default(), &mut r).unwrap();
    // encoder 4 blocks x 6 tensors, two map adjusters x (2 x 6 + 2), global 2, head 4
    assert_eq!(model.num_params(), 24 + 28 + 2 + 4);
}
