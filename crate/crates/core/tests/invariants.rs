mod common;

use std::collections::BTreeSet;

use archleak_core::arch::{
    build, count_by_tag, documented_changes, param_layout, spec_for_step, tiny_vit, ModuleTag, Selection, VitSpec,
};
use archleak_core::defense::{dp_step, DpConfig};
use archleak_core::eval::{mse, psnr_from_mse, roc, ssim, Images};
use archleak_core::mia::{lira_decision, lira_mask};
use archleak_core::train::{default_recipe, make_split, synthetic, train, RecipeOverrides, SyntheticConfig, VictimKind};
use archleak_grad::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn split_partitions_every_pool_size() {
    for n in 8..=100 {
        for seed in 0..3 {
            let plan = make_split(n, seed).unwrap();
            let mut all: Vec<usize> = plan.subsets().iter().flat_map(|s| s.iter().copied()).collect();
            let sizes: Vec<usize> = plan.subsets().iter().map(|s| s.len()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>(), "pool {n} seed {seed}");
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}

#[test]
fn tags_partition_every_ladder_step_and_the_vit() {
    let mut specs: Vec<_> = (1..=14).map(|k| spec_for_step(k, 10, [3, 32, 32]).unwrap()).collect();
    specs.push(tiny_vit(VitSpec { patch: 4, dim: 64, depth: 4, heads: 4, mlp_ratio: 4.0 }, 10, [3, 32, 32]));
    for spec in specs {
        let layout = param_layout(&spec).unwrap();
        let by_tag: usize = count_by_tag(&layout).values().sum();
        let model = build(&spec.clone().desk(16), 0).unwrap();
        let built: usize = model.params.iter().map(Tensor::numel).sum();
        let desk: usize = count_by_tag(&param_layout(&spec.clone().desk(16)).unwrap()).values().sum();
        assert_eq!(by_tag, layout.iter().map(|p| p.numel()).sum::<usize>());
        assert_eq!(desk, built, "{:?}", spec.morph_step);
    }
}

#[test]
fn ladder_steps_change_only_documented_fields() {
    for k in 2..=14 {
        let prev = spec_for_step(k - 1, 10, [3, 32, 32]).unwrap();
        let next = spec_for_step(k, 10, [3, 32, 32]).unwrap();
        let changed = prev.diff(&next);
        assert!(!changed.is_empty(), "step {k} changes nothing");
        for field in &changed {
            assert!(documented_changes(k).contains(&field.as_str()), "step {k} changed {field}");
        }
    }
}

#[test]
fn building_twice_is_bit_identical() {
    for k in [1, 8, 12] {
        let spec = spec_for_step(k, 10, [3, 16, 16]).unwrap().desk(16);
        assert_eq!(build(&spec, 5).unwrap().flat_params(), build(&spec, 5).unwrap().flat_params());
    }
}

#[test]
fn training_twice_is_bit_identical() {
    let spec = spec_for_step(12, 4, [3, 16, 16]).unwrap().desk(16);
    let data = synthetic(&SyntheticConfig::new(48, 4, [3, 16, 16], 2)).unwrap();
    let recipe = default_recipe(VictimKind::MembershipVictim)
        .with(&RecipeOverrides { epochs: Some(2), batch_size: Some(16), ..Default::default() });
    let a = train(build(&spec, 1).unwrap(), &data, &recipe, 1).unwrap();
    let b = train(build(&spec, 1).unwrap(), &data, &recipe, 1).unwrap();
    assert_eq!(a.model.flat_params(), b.model.flat_params());
    assert_eq!(a.train_acc, b.train_acc);
}

fn dp(clip: f32, sigma: f32, target: Selection) -> DpConfig {
    DpConfig { clip_norm: clip, noise_multiplier: sigma, target_tags: target, seed: 0 }
}

fn norm(v: &[Tensor]) -> f64 {
    v.iter().flat_map(|t| t.data()).map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn plain_average(per_example: &[Vec<Tensor>], p: usize) -> Vec<f32> {
    let mut sum = vec![0.0f32; per_example[0][p].numel()];
    for ex in per_example {
        for (s, &v) in sum.iter_mut().zip(ex[p].data()) {
            *s += v;
        }
    }
    sum.into_iter().map(|s| s / per_example.len() as f32).collect()
}

/// Gradients whose entries span 60 orders of magnitude.
fn adversarial() -> impl Strategy<Value = Vec<Vec<Tensor>>> {
    let entry = (any::<bool>(), -30i32..30, 0.1f32..1.0).prop_map(|(neg, e, m)| if neg { -m } else { m } * 10f32.powi(e));
    prop::collection::vec(prop::collection::vec(prop::collection::vec(entry, 3), 3), 1..5)
        .prop_map(|ex| ex.into_iter().map(|ps| ps.into_iter().map(|v| Tensor::new(vec![3], v)).collect()).collect())
}

const TAGS: [ModuleTag; 3] = [ModuleTag::Stem, ModuleTag::MLP, ModuleTag::Head];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_is_the_pairwise_probability(
        pairs in prop::collection::vec((0u8..5, any::<bool>()), 2..30)
            .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let auc = roc(&scores, &labels).unwrap().auc;
        prop_assert!((auc - common::pairwise_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auc_survives_monotone_maps(
        pairs in prop::collection::vec((0u8..20, any::<bool>()), 2..40)
            .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1)),
        a in 0.01f64..10.0, b in 0.0f64..5.0, c in -100.0f64..100.0,
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let mapped: Vec<f64> = scores.iter().map(|x| a * x.powi(3) + b * x + c).collect();
        prop_assert_eq!(roc(&scores, &labels).unwrap().auc, roc(&mapped, &labels).unwrap().auc);
    }

    #[test]
    fn roc_is_monotone_with_fixed_endpoints(
        pairs in prop::collection::vec((-1.0f64..1.0, any::<bool>()), 2..50)
            .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let c = roc(&scores, &labels).unwrap();
        prop_assert_eq!((c.fpr[0], c.tpr[0]), (0.0, 0.0));
        prop_assert_eq!((*c.fpr.last().unwrap(), *c.tpr.last().unwrap()), (1.0, 1.0));
        prop_assert!(c.fpr.windows(2).all(|w| w[0] <= w[1]) && c.tpr.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((0.0..=1.0).contains(&c.auc));
    }

    #[test]
    fn psnr_and_ssim_identities(a in prop::collection::vec(0.0f32..1.0, 2 * 3 * 12 * 12), b in prop::collection::vec(0.0f32..1.0, 2 * 3 * 12 * 12)) {
        let (x, y) = (Images::new(&a, [2, 3, 12, 12]).unwrap(), Images::new(&b, [2, 3, 12, 12]).unwrap());
        let m = mse(&x, &y).unwrap();
        prop_assert!(m >= 1e-10);
        prop_assert!((psnr_from_mse(m) - 10.0 * (1.0 / m).log10()).abs() < 1e-12);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn every_example_is_in_half_the_shadows(half in 1usize..10, m in 1usize..60, seed in any::<u64>()) {
        let mask = lira_mask(2 * half, m, seed).unwrap();
        for j in 0..m {
            prop_assert_eq!((0..2 * half).filter(|&i| mask[i][j]).count(), half);
        }
    }

    #[test]
    fn lira_score_is_monotone_in_the_statistic(
        mu_out in -5.0f64..5.0, gap in 0.01f64..5.0, s_in in 0.05f64..3.0, s_out in 0.05f64..3.0,
        t1 in 0.0f64..1.0, t2 in 0.0f64..1.0, shift in -10.0f64..10.0,
    ) {
        let mu_in = mu_out + gap;
        // Equal variances: monotone everywhere.
        let (lo, hi) = (shift.min(shift + t1 - t2), shift.max(shift + t1 - t2));
        prop_assert!(lira_decision(lo, mu_in, s_in, mu_out, s_in).0 <= lira_decision(hi, mu_in, s_in, mu_out, s_in).0);
        // Unequal variances: monotone between the two means.
        let (lo, hi) = (mu_out + gap * t1.min(t2), mu_out + gap * t1.max(t2));
        let (l_lo, d_lo) = lira_decision(lo, mu_in, s_in, mu_out, s_out);
        let (l_hi, d_hi) = lira_decision(hi, mu_in, s_in, mu_out, s_out);
        prop_assert!(l_lo <= l_hi && d_lo <= d_hi);
    }

    #[test]
    fn dp_contributions_respect_the_clip_bound(per_example in adversarial(), clip in 0.01f32..10.0) {
        let out = dp_step(&per_example, &TAGS, &dp(clip, 0.0, Selection::All), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert!(out.clipped_norms.iter().all(|&n| n <= f64::from(clip)));
        // One example without noise: the output is its clipped gradient.
        let single = dp_step(&per_example[..1], &TAGS, &dp(clip, 0.0, Selection::All), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert!(norm(&single.gradient) <= f64::from(clip));
    }

    #[test]
    fn dp_without_noise_or_clipping_is_the_average(per_example in adversarial()) {
        let clip = per_example.iter().map(|ex| norm(ex)).fold(0.0, f64::max) as f32 * 2.0 + 1.0;
        prop_assume!(clip.is_finite());
        let out = dp_step(&per_example, &TAGS, &dp(clip, 0.0, Selection::All), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for p in 0..TAGS.len() {
            let want = plain_average(&per_example, p);
            prop_assert_eq!(out.gradient[p].data(), want.as_slice());
        }
    }

    #[test]
    fn dp_passes_untargeted_gradients_through(per_example in adversarial(), sigma in 0.0f32..4.0, seed in any::<u64>()) {
        let cfg = dp(0.5, sigma, Selection::only(ModuleTag::Stem));
        let out = dp_step(&per_example, &TAGS, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for p in 1..TAGS.len() {
            let want = plain_average(&per_example, p);
            prop_assert_eq!(out.gradient[p].data(), want.as_slice());
        }
    }

    #[test]
    fn vit_tags_partition(patch in prop::sample::select(vec![2usize, 4, 8]), heads in 1usize..4, per_head in 2usize..8, depth in 1usize..3) {
        let spec = tiny_vit(VitSpec { patch, dim: heads * per_head, depth, heads, mlp_ratio: 2.0 }, 10, [3, 16, 16]);
        let model = build(&spec, 0).unwrap();
        let tags: BTreeSet<ModuleTag> = model.tags().into_values().collect();
        prop_assert!(tags.contains(&ModuleTag::Attention) && tags.contains(&ModuleTag::Stem));
        let counted: usize = model.param_counts().values().sum();
        prop_assert_eq!(counted, model.params.iter().map(Tensor::numel).sum::<usize>());
    }
}
