//! Forward computations checked against independent naive implementations.

#![allow(clippy::needless_range_loop)]

mod common;

use common::{random, rng};
use mlsm_core::encoder::{encode_all_levels, fuse, fuse_batch, gap, Adjusters, Encoder, Level, LevelInput, Levels};
use mlsm_core::imageops::resize_bilinear;
use mlsm_core::localizer::{extract_region, region_box, Heatmap};
use mlsm_core::relation::{average_support, class_means, episode_loss, relation_score, LossKind};
use mlsm_core::{EpisodeBatch, MlsmModel, ModelConfig, Tensor};
use rand::Rng;

#[test]
fn gap_matches_triple_loop_on_random_maps() {
    let mut r = rng(1);
    for _ in 0..100 {
        let (n, c, h, w) = (r.gen_range(1..4), r.gen_range(1..9), r.gen_range(1..12), r.gen_range(1..12));
        let x = random(&[n, c, h, w], &mut r);
        let g = gap(&x).unwrap();
        assert_eq!(g.shape(), &[n, c]);
        for b in 0..n {
            for k in 0..c {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += x.data()[((b * c + k) * h + i) * w + j];
                    }
                }
                assert!((g.data()[b * c + k] - acc / (h * w) as f64).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn fusion_identities() {
    let mut r = rng(2);
    let (i, o, g) = (random(&[64], &mut r), random(&[64], &mut r), random(&[64], &mut r));
    let z = vec![0.0; 64];
    let (i, o, g) = (i.data(), o.data(), g.data());
    assert_eq!(fuse(i, &z, &z).unwrap(), i);
    assert_eq!(fuse(&z, o, &z).unwrap(), o);
    assert_eq!(fuse(&z, &z, g).unwrap(), g);
    let a = fuse(i, o, g).unwrap();
    for perm in [fuse(o, i, g), fuse(g, o, i), fuse(i, g, o)] {
        for (x, y) in a.iter().zip(perm.unwrap()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
    assert!(fuse(i, &o[..63], g).is_err());
}

#[test]
fn fuse_batch_with_missing_levels() {
    let mut r = rng(3);
    let i = random(&[3, 8], &mut r);
    let g = random(&[3, 8], &mut r);
    assert_eq!(fuse_batch(&i, None, None).unwrap(), i);
    let ig = fuse_batch(&i, None, Some(&g)).unwrap();
    for k in 0..24 {
        assert_eq!(ig.data()[k], i.data()[k] + g.data()[k]);
    }
}

#[test]
fn single_shot_average_is_identity_and_k_shot_is_the_mean() {
    let mut r = rng(4);
    let v = random(&[64], &mut r);
    assert_eq!(average_support(&[v.data()], 1).unwrap(), v.data());
    for k in [2, 3, 5, 10] {
        let vs = random(&[k, 64], &mut r);
        let rows: Vec<&[f64]> = (0..k).map(|i| vs.item(i)).collect();
        let got = average_support(&rows, k).unwrap();
        for d in 0..64 {
            let mut acc = 0.0;
            for i in 0..k {
                acc += vs.data()[i * 64 + d];
            }
            assert!((got[d] - acc / k as f64).abs() <= 1e-6);
        }
    }
}

#[test]
fn mse_loss_matches_double_loop() {
    let mut r = rng(5);
    for _ in 0..20 {
        let (n, c) = (r.gen_range(1..30), r.gen_range(2..8));
        let mut s = random(&[n, c], &mut r);
        s.data_mut().iter_mut().for_each(|v| *v = 0.5 * (*v + 1.0));
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let mut acc = 0.0;
        for q in 0..n {
            for k in 0..c {
                let t = if labels[q] == k { 1.0 } else { 0.0 };
                acc += (s.data()[q * c + k] - t) * (s.data()[q * c + k] - t);
            }
        }
        let want = acc / (n * c) as f64;
        assert!((episode_loss(&s, &labels, LossKind::Mse).unwrap() - want).abs() <= 1e-7);
    }
}

/// Bilinear with half-pixel centres, written from the textbook definition.
fn naive_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    let at = |y: i64, x: i64| {
        let y = y.clamp(0, h as i64 - 1) as usize;
        let x = x.clamp(0, w as i64 - 1) as usize;
        src[y * w + x]
    };
    for oy in 0..oh {
        for ox in 0..ow {
            let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0);
            let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0);
            let (y0, x0) = (sy.floor() as i64, sx.floor() as i64);
            let (dy, dx) = (sy - y0 as f64, sx - x0 as f64);
            out[oy * ow + ox] = at(y0, x0) * (1.0 - dy) * (1.0 - dx)
                + at(y0, x0 + 1) * (1.0 - dy) * dx
                + at(y0 + 1, x0) * dy * (1.0 - dx)
                + at(y0 + 1, x0 + 1) * dy * dx;
        }
    }
    out
}

#[test]
fn bilinear_resize_of_checkerboard_matches_oracle() {
    let n = 168;
    let board: Vec<f64> = (0..n * n).map(|p| (((p / n) / 21 + (p % n) / 21) % 2) as f64).collect();
    let src = Tensor::from_vec(&[1, n, n], board.clone()).unwrap();
    for (oh, ow) in [(84, 84), (50, 70), (200, 168), (21, 21)] {
        let got = resize_bilinear(&src, oh, ow).unwrap();
        let want = naive_bilinear(&board, n, n, oh, ow);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-5, "{oh}x{ow}");
        }
    }
}

#[test]
fn bilinear_resize_to_same_size_is_identity() {
    let mut r = rng(6);
    let x = random(&[3, 9, 13], &mut r);
    assert_eq!(resize_bilinear(&x, 9, 13).unwrap(), x);
}

#[test]
fn top_left_quadrant_heatmap_crops_top_left_quadrant() {
    let mut hm = Tensor::<f64>::zeros(&[4, 4]);
    for i in 0..2 {
        for j in 0..2 {
            hm.data_mut()[i * 4 + j] = 1.0;
        }
    }
    // oracle: scan the upsampled map for pixels above the cut, take the extent
    let up = naive_bilinear(hm.data(), 4, 4, 84, 84);
    let max = up.iter().cloned().fold(0.0, f64::max);
    let (mut top, mut left, mut bottom, mut right) = (84, 84, 0, 0);
    for p in 0..84 * 84 {
        if up[p] >= 0.2 * max {
            top = top.min(p / 84);
            left = left.min(p % 84);
            bottom = bottom.max(p / 84 + 1);
            right = right.max(p % 84 + 1);
        }
    }
    assert_eq!((top, left), (0, 0));
    assert!(bottom < 84 && right < 84);
    let b = region_box(&hm, 84, 84, 0.2).unwrap().unwrap();
    assert_eq!((b.top, b.left, b.bottom, b.right), (top, left, bottom, right));

    let mut r = rng(7);
    let image = random(&[3, 84, 84], &mut r);
    let crop = extract_region(&image, &Heatmap { values: hm, source_class: 0 }, 0.2).unwrap();
    assert_eq!(crop.shape(), &[3, 84, 84]);
    // the crop's top-left pixel samples the image's top-left pixel
    for ch in 0..3 {
        assert!((crop.data()[ch * 84 * 84] - image.data()[ch * 84 * 84]).abs() < 1e-12);
    }
}

#[test]
fn flat_or_empty_heatmaps_return_the_image() {
    let mut r = rng(8);
    let image = random(&[3, 20, 20], &mut r);
    for v in [0.0, 3.0] {
        let hm = Heatmap { values: Tensor::full(&[5, 5], v), source_class: 0 };
        assert_eq!(extract_region(&image, &hm, 0.2).unwrap(), image);
    }
}

#[test]
fn image_only_encoding_is_the_image_adjuster_output() {
    let mut r = rng(9);
    let enc = Encoder::<f64>::new(3, &mut r);
    let adj = Adjusters::<f64>::new(enc.map_size(16), 16, &mut r);
    let images = random(&[3, 3, 16, 16], &mut r);
    let maps = enc.encode(&images).unwrap();
    let want = adj.adjust(Level::Image, LevelInput::Map(&maps)).unwrap();
    let i_only = encode_all_levels(&enc, &adj, &images, None, Levels::I).unwrap();
    assert_eq!(i_only, want);
    let ig = encode_all_levels(&enc, &adj, &images, None, Levels::IG).unwrap();
    let g = adj.adjust(Level::Global, LevelInput::Vector(&gap(&maps).unwrap())).unwrap();
    for k in 0..want.len() {
        assert!((ig.data()[k] - want.data()[k] - g.data()[k]).abs() < 1e-12);
    }
    assert!(encode_all_levels(&enc, &adj, &images, None, Levels::IGO).is_err());
    assert!(adj.adjust(Level::Global, LevelInput::Map(&maps)).is_err());
}

#[test]
fn episode_scores_compose_from_the_parts() {
    for (seed, k) in [(10u64, 1usize), (11, 3)] {
        let mut r = rng(seed);
        let config = ModelConfig { image_size: 16, fused_dim: 8, hidden: 4, levels: Levels::IGO, loss: LossKind::Mse };
        let model = MlsmModel::<f64>::new(config, &mut r).unwrap();
        let c_way = 4;
        let support_labels: Vec<usize> = (0..c_way * k).map(|i| i % c_way).collect();
        let query_labels = vec![0, 1, 2, 3, 3];
        let ns = support_labels.len();
        let batch = EpisodeBatch {
            c_way,
            support: random(&[ns, 3, 16, 16], &mut r),
            support_crops: Some(random(&[ns, 3, 16, 16], &mut r)),
            support_labels: support_labels.clone(),
            query: random(&[5, 3, 16, 16], &mut r),
            query_crops: Some(random(&[5, 3, 16, 16], &mut r)),
            query_labels,
        };
        let scores = model.episode_scores(&batch).unwrap();
        assert_eq!(scores.shape(), &[5, c_way]);

        // manual composition: encode each level, fuse, average per class, score each pair
        let level_vec = |images: &Tensor<f64>, crops: &Tensor<f64>| {
            let i_map = model.encoder.encode(images).unwrap();
            let o_map = model.encoder.encode(crops).unwrap();
            let i = model.adjusters.adjust(Level::Image, LevelInput::Map(&i_map)).unwrap();
            let o = model.adjusters.adjust(Level::Object, LevelInput::Map(&o_map)).unwrap();
            let g = model.adjusters.adjust(Level::Global, LevelInput::Vector(&gap(&i_map).unwrap())).unwrap();
            let rows: Vec<Vec<f64>> =
                (0..images.batch()).map(|n| fuse(i.item(n), o.item(n), g.item(n)).unwrap()).collect();
            rows
        };
        let s = level_vec(&batch.support, batch.support_crops.as_ref().unwrap());
        let q = level_vec(&batch.query, batch.query_crops.as_ref().unwrap());
        let reps = class_means(&Tensor::from_vec(&[ns, 8], s.concat()).unwrap(), &support_labels, c_way).unwrap();
        for (qi, qv) in q.iter().enumerate() {
            for c in 0..c_way {
                let want = relation_score(&model.head, reps.item(c), qv).unwrap();
                assert!((scores.data()[qi * c_way + c] - want).abs() <= 1e-12);
            }
        }
    }
}
