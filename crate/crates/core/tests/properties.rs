//! Property tests for the invariants each module promises.

use masm_core::data::{build_splits, check_family_leakage, robustness_cell, Dims};
use masm_core::harness::tiny_grad_problem;
use masm_core::losses::{orth_loss, spec_loss};
use masm_core::metrics::{auc, average_precision, eer};
use masm_core::network::{backward, forward, GradScope};
use masm_core::slm::{apply_update, build_mask, update_stats, GradientStats, MaskPolicy, OptimizerState};
use masm_core::subspace::{decompose, partition_tail};
use masm_core::{
    frobenius_sq, svd, ArtifactFamily, DataConfig, DecompositionConfig, LayerMask, LossWeights, Matrix,
    OptimizerMode, RankPolicy, Rng, ScoredSet, StatsConfig,
};
use proptest::prelude::*;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn max_dev_from_identity(q: &Matrix) -> f64 {
    let g = q.t_matmul(q);
    let mut worst: f64 = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - want).abs());
        }
    }
    worst
}

fn frob(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn small_data() -> DataConfig {
    DataConfig {
        pretrain_clips: 4,
        pretrain_test_clips: 2,
        finetune_train_clips: 6,
        test_clips: 4,
        heldout_clips: 4,
        clip_size: 3,
        ..DataConfig::default()
    }
}

const DIMS: Dims = Dims { n_tokens: 8, d_model: 16 };

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn svd_is_orthonormal_and_reconstructs(rows in 1usize..=128, cols in 1usize..=128, seed in any::<u64>()) {
        let w = gaussian(rows, cols, seed);
        let f = svd(&w).unwrap();
        prop_assert!(max_dev_from_identity(&f.u) <= 1e-10);
        prop_assert!(max_dev_from_identity(&f.v) <= 1e-10);
        let back = f.reconstruct();
        prop_assert!(frob(&back.sub(&w)) / frob(&w) <= 1e-8);
        prop_assert!(f.singular_values.windows(2).all(|p| p[0] >= p[1]));
        let energy: f64 = f.singular_values.iter().map(|s| s * s).sum();
        let fsq = frobenius_sq(&w).unwrap();
        prop_assert!((energy - fsq).abs() <= 1e-8 * fsq);
    }

    #[test]
    fn svd_handles_rank_deficient_inputs(n in 2usize..=40, rank in 1usize..=4, seed in any::<u64>()) {
        let w = gaussian(n, rank, seed).matmul_t(&gaussian(n, rank, seed ^ 1));
        let f = svd(&w).unwrap();
        prop_assert!(frob(&f.reconstruct().sub(&w)) / frob(&w) <= 1e-8);
        prop_assert!(max_dev_from_identity(&f.u) <= 1e-10);
        prop_assert!(max_dev_from_identity(&f.v) <= 1e-10);
        prop_assert_eq!(f.rank(), n);
        let top = f.singular_values[0];
        prop_assert!(f.singular_values[rank.min(n)..].iter().all(|s| *s <= 1e-10 * top));
    }

    #[test]
    fn tail_partition_is_exact(rank in 1usize..=128, r_frac in 0.0f64..1.0, k in 1usize..=9) {
        let r = ((rank as f64) * r_frac) as usize;
        match partition_tail(rank, r, k) {
            Ok(blocks) => {
                prop_assert_eq!(blocks.len(), k);
                prop_assert_eq!(blocks[0].start, r);
                prop_assert_eq!(blocks[k - 1].end, rank);
                for pair in blocks.windows(2) {
                    prop_assert_eq!(pair[0].end, pair[1].start);
                    prop_assert!(pair[0].len() >= pair[1].len());
                }
                prop_assert!(blocks.iter().all(|b| !b.is_empty()));
            }
            Err(_) => prop_assert!(rank - r < k),
        }
    }

    #[test]
    fn decomposition_at_init_is_faithful(n in 6usize..=64, m in 6usize..=64, k in 1usize..=5, seed in any::<u64>()) {
        let w = gaussian(n, m, seed);
        let cfg = DecompositionConfig { rank_policy: RankPolicy::Fixed(1), k };
        let layer = decompose(&w, &cfg, 0).unwrap();
        prop_assert!(frob(&layer.recompose().unwrap().sub(&w)) / frob(&w) <= 1e-8);
        let ranks: usize = layer.artifacts.iter().map(|a| a.rank()).sum();
        prop_assert_eq!(layer.semantic().rank() + ranks, n.min(m));
        for i in 0..k {
            for j in i + 1..k {
                let (a, b) = (&layer.artifacts[i], &layer.artifacts[j]);
                prop_assert!(frobenius_sq(&a.u.t_matmul(&b.u)).unwrap() <= 1e-18);
                prop_assert!(frobenius_sq(&a.v.t_matmul(&b.v)).unwrap() <= 1e-18);
            }
        }
        prop_assert!(orth_loss(&layer) <= 1e-9);
        prop_assert!(spec_loss(&layer).unwrap() <= 1e-9);
    }

    #[test]
    fn orth_loss_ignores_subspace_order(seed in any::<u64>(), shuffle in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let cfg = DecompositionConfig { rank_policy: RankPolicy::Fixed(2), k: 4 };
        let mut layer = decompose(&gaussian(12, 12, seed), &cfg, 0).unwrap();
        let p: Vec<f64> = layer.flat_params().iter().map(|v| v + 0.1 * rng.normal()).collect();
        layer.set_flat_params(&p).unwrap();
        let before = orth_loss(&layer);
        let mut order = Rng::new(shuffle);
        order.shuffle(&mut layer.artifacts);
        prop_assert!((orth_loss(&layer) - before).abs() <= 1e-12 * before.max(1.0));
    }

    #[test]
    fn spec_loss_ignores_factor_symmetries(seed in any::<u64>(), flips in prop::collection::vec(any::<bool>(), 12)) {
        let mut rng = Rng::new(seed);
        let cfg = DecompositionConfig { rank_policy: RankPolicy::Fixed(3), k: 3 };
        let mut layer = decompose(&gaussian(12, 12, seed), &cfg, 0).unwrap();
        let p: Vec<f64> = layer.flat_params().iter().map(|v| v + 0.1 * rng.normal()).collect();
        layer.set_flat_params(&p).unwrap();
        let before = spec_loss(&layer).unwrap();
        let w_before = layer.recompose().unwrap();
        // Flip paired columns of U and V, and reverse each block's component order.
        let mut c = 0;
        for a in &mut layer.artifacts {
            for j in 0..a.rank() {
                if flips[c % flips.len()] {
                    let (u, v) = (a.u.column(j), a.v.column(j));
                    a.u.set_column(j, &u.iter().map(|x| -x).collect::<Vec<_>>());
                    a.v.set_column(j, &v.iter().map(|x| -x).collect::<Vec<_>>());
                }
                c += 1;
            }
            let r = a.rank();
            let (u, v, s) = (a.u.clone(), a.v.clone(), a.s.clone());
            for j in 0..r {
                a.u.set_column(j, &u.column(r - 1 - j));
                a.v.set_column(j, &v.column(r - 1 - j));
                a.s[j] = s[r - 1 - j];
            }
        }
        let w_after = layer.recompose().unwrap();
        prop_assert!(w_after.sub(&w_before).max_abs() <= 1e-12);
        prop_assert!((spec_loss(&layer).unwrap() - before).abs() <= 1e-9 * before.max(1.0));
    }

    #[test]
    fn ema_update_touches_every_layer(sizes in prop::collection::vec(1usize..6, 1..8), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let grads: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| rng.normal() + 0.5).collect()).collect();
        let cfg = StatsConfig::default();
        let next = update_stats(&GradientStats::new(&sizes), &grads, &cfg).unwrap();
        for (l, g) in grads.iter().enumerate() {
            for (i, &gi) in g.iter().enumerate() {
                prop_assert_eq!(next.first[l][i], (1.0 - cfg.alpha) * gi);
            }
        }
    }

    #[test]
    fn mask_has_exact_cardinality(
        bvg in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..10.0], 1..40),
        m in 1usize..50,
        t in 0usize..20,
        warmup in 0usize..10,
        off_seed in any::<u64>(),
    ) {
        let n = bvg.len();
        let mut rng = Rng::new(off_seed);
        let forced_off: Vec<usize> = (0..n).filter(|_| rng.uniform() < 0.2).collect();
        let policy = MaskPolicy { m, warmup_steps: warmup, forced_off: forced_off.clone() };
        let mask = build_mask(&bvg, t, &policy);
        let eligible = n - forced_off.len();
        prop_assert!(forced_off.iter().all(|&l| !mask.bits[l]));
        if t <= warmup {
            prop_assert_eq!(mask.popcount(), eligible);
        } else {
            prop_assert_eq!(mask.popcount(), m.min(eligible));
            // Every selected layer scores at least as high as every skipped eligible layer,
            // and among equal scores the lower index wins.
            for a in (0..n).filter(|&l| mask.bits[l]) {
                for b in (0..n).filter(|&l| !mask.bits[l] && !forced_off.contains(&l)) {
                    prop_assert!(bvg[a] > bvg[b] || (bvg[a] == bvg[b] && a < b));
                }
            }
        }
    }

    #[test]
    fn masked_layers_are_untouched_by_updates(seed in any::<u64>(), bits in prop::collection::vec(any::<bool>(), 8)) {
        let (mut model, batch) = tiny_grad_problem(seed).unwrap();
        let (_, grads) = backward(&model, &batch, &LossWeights::default(), GradScope::Trainable).unwrap();
        let mut opt = OptimizerState::new(OptimizerMode::Adam, 1e-2, &model);
        let before = model.clone();
        let moments = opt.layer_moments.clone();
        let mask = LayerMask { m: bits.iter().filter(|b| **b).count(), bits: bits.clone() };
        apply_update(&mut model, &grads, &mask, &mut opt).unwrap();
        for (l, &on) in bits.iter().enumerate() {
            if !on {
                prop_assert_eq!(model.layer(l), before.layer(l));
                prop_assert_eq!(&opt.layer_moments[l], &moments[l]);
            }
        }
        prop_assert_ne!(&model.head, &before.head);
        prop_assert_eq!(model.frozen_groups(), before.frozen_groups());
    }

    #[test]
    fn forward_and_gradients_are_deterministic(seed in any::<u64>()) {
        let (a, batch) = tiny_grad_problem(seed).unwrap();
        let (b, _) = tiny_grad_problem(seed).unwrap();
        prop_assert_eq!(&a, &b);
        let fa = forward(&a, &batch.inputs).unwrap().fake_probs();
        let fb = forward(&b, &batch.inputs).unwrap().fake_probs();
        prop_assert_eq!(fa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), fb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let w = LossWeights::default();
        let (ra, ga) = backward(&a, &batch, &w, GradScope::Trainable).unwrap();
        let (rb, gb) = backward(&b, &batch, &w, GradScope::Trainable).unwrap();
        prop_assert_eq!(ra, rb);
        prop_assert_eq!(ga, gb);
    }

    #[test]
    fn auc_complement_is_exact(
        pairs in prop::collection::vec((0u8..2, 0u8..6), 2..60),
    ) {
        let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.1) * 0.25).collect();
        let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        let a = auc(&ScoredSet::new(scores.clone(), labels)).unwrap();
        let b = auc(&ScoredSet::new(scores, flipped)).unwrap();
        prop_assert_eq!(a + b, 1.0);
    }

    #[test]
    fn metrics_ignore_monotone_transforms(
        pairs in prop::collection::vec((0u8..2, -20i32..20), 2..80),
        scale in 1u32..9,
        shift in -5i32..5,
    ) {
        let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let raw: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
        let base = ScoredSet::new(raw.clone(), labels.clone());
        let transforms: [Box<dyn Fn(f64) -> f64>; 3] = [
            Box::new(|x| f64::from(scale) * x + f64::from(shift)),
            Box::new(|x| (x / 7.0).exp()),
            Box::new(|x| x * x * x),
        ];
        for f in transforms {
            let moved = ScoredSet::new(raw.iter().map(|&x| f(x)).collect(), labels.clone());
            prop_assert_eq!(auc(&base).unwrap(), auc(&moved).unwrap());
            prop_assert_eq!(average_precision(&base).unwrap(), average_precision(&moved).unwrap());
            prop_assert_eq!(eer(&base).unwrap(), eer(&moved).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn splits_are_deterministic_and_leak_free(seed in any::<u64>(), clip_size in 1usize..5, rotate in 0usize..5) {
        let mut cfg = DataConfig { clip_size, ..small_data() };
        let mut all = ArtifactFamily::ALL.to_vec();
        all.rotate_left(rotate);
        cfg.families_train = all[..3].to_vec();
        cfg.families_heldout = all[3..].to_vec();
        let a = build_splits(&cfg, DIMS, seed).unwrap();
        let b = build_splits(&cfg, DIMS, seed).unwrap();
        prop_assert_eq!(&a, &b);
        check_family_leakage(&cfg, &a).unwrap();
        for (_, split) in a.named() {
            for s in split {
                prop_assert!(s.tokens.is_finite());
            }
        }
    }

    #[test]
    fn robustness_cells_keep_metadata(seed in any::<u64>(), level in 1u8..=5, fam in 0usize..5) {
        let cfg = small_data();
        let sp = build_splits(&cfg, DIMS, seed).unwrap();
        let family = ArtifactFamily::ALL[fam];
        let cell = robustness_cell(&sp.test_in_domain, family, level, seed).unwrap();
        prop_assert_eq!(cell.len(), sp.test_in_domain.len());
        prop_assert_eq!(&cell, &robustness_cell(&sp.test_in_domain, family, level, seed).unwrap());
        for (d, s) in cell.iter().zip(&sp.test_in_domain) {
            prop_assert_eq!((d.label, d.family, d.intensity, d.clip_id), (s.label, s.family, s.intensity, s.clip_id));
        }
    }
}

#[test]
fn rng_streams_repeat_for_ten_thousand_draws() {
    for seed in [0, 1, u64::MAX] {
        let (mut a, mut b) = (Rng::new(seed), Rng::new(seed));
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let (mut a, mut b) = (Rng::new(seed), Rng::new(seed));
        for _ in 0..10_000 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }
}
