use std::collections::BTreeSet;

use disrom_core::analysis::{
    generate_modes, identify_active, latent_stats, mode_base, post_hoc_deactivate, prune, prune_hook, rank_active,
    reconstruct_with, AnalysisError, Criterion, LatentStats, ModeBase, PruneSchedule,
};
use disrom_core::models::{Model, ModelSpec, Preset, Variant};
use disrom_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(variant: Variant, m: usize, seed: u64) -> Model<f32> {
    Model::build(&ModelSpec::preset(Preset::Toy, variant, m), seed).unwrap()
}

fn inputs(seed: u64, n: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[n, 2, 8, 8], (0..n * 128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn stats_from_std(std: &[f64]) -> LatentStats {
    // Codes ±s per column give population std s.
    let m = std.len();
    let z: Vec<f64> = [1.0, -1.0].iter().flat_map(|sign| std.iter().map(move |s| sign * s)).collect();
    LatentStats::from_codes(&z, m, None).unwrap()
}

#[test]
fn stats_examples() {
    let model = toy(Variant::Plain, 3, 0);
    let s = latent_stats(&model, &Tensor::full(&[5, 2, 8, 8], 0.3)).unwrap();
    assert!(s.std.iter().all(|&v| v == 0.0));

    let s = LatentStats::from_codes(&[1.0, 0.0, -1.0, 0.0], 2, None).unwrap();
    assert_eq!(s.std, [1.0, 0.0]);
    assert_eq!(s.normalized_std, [1.0, 0.0]);
    assert!(s.kl_per_variable.is_none());

    let vae = toy(Variant::BetaVae, 3, 0);
    let s = latent_stats(&vae, &inputs(1, 6)).unwrap();
    assert_eq!(s.kl_per_variable.as_ref().map(Vec::len), Some(3));
    assert!(latent_stats(&vae, &Tensor::zeros(&[0, 2, 8, 8])).is_err());
}

#[test]
fn ranking_examples() {
    assert_eq!(rank_active(&stats_from_std(&[0.1, 0.9, 0.5]), Criterion::Std).unwrap(), [1, 2, 0]);
    assert_eq!(rank_active(&stats_from_std(&[0.4; 4]), Criterion::Std).unwrap(), [0, 1, 2, 3]);
    assert!(matches!(rank_active(&stats_from_std(&[0.1, 0.2]), Criterion::Kl), Err(AnalysisError::MissingKl)));
}

#[test]
fn active_set_examples() {
    let s = stats_from_std(&[1.0, 0.06, 0.01]);
    assert_eq!(identify_active(&s, 0.05).unwrap(), [0, 1]);
    assert_eq!(identify_active(&s, 0.07).unwrap(), [0]);
    assert!(identify_active(&stats_from_std(&[0.0, 0.0]), 0.05).unwrap().is_empty());
    assert!(identify_active(&s, 1.0).is_err());
    assert!(identify_active(&s, 0.0).is_err());
}

#[test]
fn mode_examples() {
    let model = toy(Variant::Uae, 3, 2);
    let base = vec![0.1, -0.2, 0.3];
    let sweep = generate_modes(&model, &base, 1, 2, (-1.0, 1.0)).unwrap();
    assert_eq!(sweep.values, [-1.0, 1.0]);
    assert_eq!(sweep.fields.len(), 2);
    let sweep = generate_modes(&model, &base, 1, 5, (-1.0, 1.0)).unwrap();
    assert!(sweep.values.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(sweep.base, base);
    let direct = model.decode(&Tensor::from_f64(&[1, 3], &[0.1, 0.0, 0.3]).unwrap()).unwrap();
    assert_eq!(sweep.fields[2].data(), direct.data());

    assert!(matches!(generate_modes(&model, &base, 0, 3, (0.5, 0.5)), Err(AnalysisError::Range { .. })));
    assert!(matches!(generate_modes(&model, &base, 0, 1, (0.0, 1.0)), Err(AnalysisError::Steps(1))));
    assert!(generate_modes(&model, &base, 3, 3, (0.0, 1.0)).is_err());

    assert_eq!(mode_base(ModeBase::Zeros, None, 10).unwrap(), vec![0.0; 10]);
    assert_eq!(mode_base(ModeBase::Snapshot, Some(&base), 3).unwrap(), base);
    assert!(mode_base(ModeBase::Snapshot, None, 3).is_err());
}

#[test]
fn dead_input_gives_a_constant_sweep() {
    let mut model = toy(Variant::Plain, 3, 4);
    // Sever every path out of variable 1: the first decoder layer's column.
    let w = &mut model.decoder_dense[0].weight;
    let m = w.shape()[1];
    for row in w.data_mut().chunks_mut(m) {
        row[1] = 0.0;
    }
    let sweep = generate_modes(&model, &[0.3, 0.0, -0.4], 1, 7, (-5.0, 5.0)).unwrap();
    assert!(sweep.variation() <= 1e-6);
    assert!(generate_modes(&model, &[0.3, 0.0, -0.4], 0, 7, (-5.0, 5.0)).unwrap().variation() > 1e-3);
}

#[test]
fn prune_examples() {
    let x = inputs(7, 6);
    let original = toy(Variant::Uae, 4, 5);

    let mut model = original.clone();
    prune(&mut model, &[]).unwrap();
    assert_eq!(model, original);

    prune(&mut model, &[2]).unwrap();
    let s = latent_stats(&model, &x).unwrap();
    assert_eq!(s.std[2], 0.0);
    assert!(model.encode(&x).unwrap().mean().data().chunks(4).all(|r| r[2] == 0.0));

    prune(&mut model, &[0, 1, 2, 3]).unwrap();
    assert!(model.encode(&x).unwrap().mean().data().iter().all(|&v| v == 0.0));
    assert!(prune(&mut model, &[4]).is_err());

    let mut vae = toy(Variant::BetaVae, 3, 5);
    prune(&mut vae, &[1]).unwrap();
    match vae.encode(&x).unwrap() {
        disrom_core::models::LatentOut::Gaussian { mu, log_var } => {
            assert!(mu.data().chunks(3).all(|r| r[1] == 0.0));
            assert!(log_var.data().chunks(3).all(|r| r[1] == 0.0));
        }
        _ => unreachable!(),
    }
}

#[test]
fn prune_hook_examples() {
    let schedule = PruneSchedule { start_epoch: 10, threshold: 0.07 };
    let none = BTreeSet::new();
    let called = std::cell::Cell::new(false);
    let early = prune_hook::<AnalysisError>(3, &schedule, &none, || {
        called.set(true);
        Ok(stats_from_std(&[1.0, 0.0]))
    })
    .unwrap();
    assert!(early.is_empty());
    assert!(!called.get());
    let all_active = prune_hook::<AnalysisError>(10, &schedule, &none, || Ok(stats_from_std(&[1.0, 0.5, 0.2]))).unwrap();
    assert!(all_active.is_empty());
    let already: BTreeSet<usize> = [2].into();
    let late =
        prune_hook::<AnalysisError>(12, &schedule, &already, || Ok(stats_from_std(&[0.01, 1.0, 0.0, 0.05]))).unwrap();
    assert_eq!(late, [0, 3]);
}

#[test]
fn post_hoc_transform_examples() {
    let model = toy(Variant::Plain, 3, 6);
    let x = inputs(8, 5);
    let s = latent_stats(&model, &x).unwrap();
    let all = post_hoc_deactivate(&[0, 1, 2], &s).unwrap();
    assert!(all.is_identity());
    assert_eq!(reconstruct_with(&model, &x, &all).unwrap(), model.reconstruct(&x).unwrap());

    let zero_mean = LatentStats::from_codes(&[1.0, 2.0, 0.5, -1.0, -2.0, -0.5], 3, None).unwrap();
    let t = post_hoc_deactivate(&[0], &zero_mean).unwrap();
    let mut z = Tensor::<f32>::from_f64(&[2, 3], &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
    t.apply(&mut z);
    assert_eq!(z.data(), &[4.0, 0.0, 0.0, 7.0, 0.0, 0.0]);
    assert!(post_hoc_deactivate(&[3], &zero_mean).is_err());
}

proptest! {
    #[test]
    fn ranking_follows_column_permutations(std in prop::collection::vec(0.0f64..5.0, 1..8), seed in any::<u64>()) {
        let m = std.len();
        let mut perm: Vec<usize> = (0..m).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..m).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // Column j of the permuted stats is column perm[j] of the original.
        let permuted: Vec<f64> = perm.iter().map(|&p| std[p]).collect();
        let r = rank_active(&stats_from_std(&std), Criterion::Std).unwrap();
        let rp = rank_active(&stats_from_std(&permuted), Criterion::Std).unwrap();
        let mapped: Vec<usize> = rp.iter().map(|&j| perm[j]).collect();
        let key = |v: &[usize]| v.iter().map(|&i| std[i]).collect::<Vec<_>>();
        prop_assert_eq!(key(&mapped), key(&r));
        let mut sorted = std.clone();
        sorted.sort_by(f64::total_cmp);
        let distinct = sorted.windows(2).all(|w| w[0] != w[1]);
        if distinct {
            prop_assert_eq!(mapped, r);
        }
    }

    #[test]
    fn pruning_is_idempotent(indices in prop::collection::btree_set(0usize..5, 0..5), seed in 0u64..50) {
        let idx: Vec<usize> = indices.into_iter().collect();
        let mut once = toy(Variant::Oae, 5, seed);
        prune(&mut once, &idx).unwrap();
        let mut twice = once.clone();
        prune(&mut twice, &idx).unwrap();
        prop_assert_eq!(once, twice);
    }
}
