//! Associative-memory lab: pattern sets, energies, flip dynamics and the theorem checks.

use std::time::Instant;

use mnemosyne::memlab::{
    compact_model, corrupt, energy_regular, flip_dynamics, hamming, log_neg_energy_regular,
    retrieval_experiment, theorem1_sign_check, CompactMemory, EnergyModel, PatternSet,
    RetrievalParams, SignCheckParams,
};
use mnemosyne::rf::{sample_projections, Mechanism, RfSpec};
use mnemosyne::tensor::log_sum_exp;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn projection(dim: usize, features: usize, rho: f64, seed: u64) -> mnemosyne::rf::RfProjection {
    let spec = RfSpec::new(Mechanism::FavorPlusPlus, features, dim, seed).with_rho(rho);
    sample_projections(&spec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_sets_respect_separation(dim in 4usize..24, m in 1usize..6, frac in 0.0f64..0.4, seed in any::<u64>()) {
        let sep = (frac * dim as f64) as usize;
        let set = PatternSet::random(dim, m, sep, &mut rng(seed)).unwrap();
        prop_assert_eq!(set.len(), m);
        let mut min = usize::MAX;
        for a in 0..m {
            prop_assert!(set.patterns()[a].iter().all(|x| *x == 1.0 || *x == -1.0));
            for b in a + 1..m {
                min = min.min(hamming(&set.patterns()[a], &set.patterns()[b]));
            }
        }
        prop_assert!(min >= sep);
        prop_assert_eq!(set.min_hamming(), min.min(dim));
    }

    #[test]
    fn corruption_flips_exactly_the_reported_bits(dim in 1usize..40, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let xi: Vec<f64> = (0..dim).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let bits = (frac * dim as f64) as usize;
        let (out, flipped) = corrupt(&xi, bits, &mut r);
        prop_assert_eq!(hamming(&xi, &out), bits);
        prop_assert_eq!(flipped.len(), bits);
        for j in flipped {
            prop_assert_eq!(out[j], -xi[j]);
        }
    }

    #[test]
    fn regular_energy_is_negative_sum_of_exponentials(dim in 2usize..12, m in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let set = PatternSet::random(dim, m, 0, &mut r).unwrap();
        let xi: Vec<f64> = (0..dim).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let naive: f64 = -set.patterns().iter().map(|p| p.iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>().exp()).sum::<f64>();
        let e = energy_regular(&xi, &set);
        prop_assert!(e < 0.0);
        prop_assert!((e - naive).abs() <= 1e-12 * naive.abs());
    }

    #[test]
    fn insertion_order_commutes(seed in any::<u64>(), m in 2usize..8) {
        let mut r = rng(seed);
        let set = PatternSet::random(10, m, 0, &mut r).unwrap();
        let proj = projection(10, 64, 0.5, seed);
        let mut fwd = CompactMemory::new(proj.clone(), 0.5).unwrap();
        let mut rev = CompactMemory::new(proj, 0.5).unwrap();
        for p in set.patterns() {
            fwd.insert(p).unwrap();
        }
        for p in set.patterns().iter().rev() {
            rev.insert(p).unwrap();
        }
        for (a, b) in fwd.log_memory().iter().zip(rev.log_memory()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn streaming_memory_equals_batch_sum() {
    let mut r = rng(3);
    let set = PatternSet::random(12, 6, 3, &mut r).unwrap();
    let proj = projection(12, 128, 0.5, 4);
    let mem = CompactMemory::from_patterns(proj.clone(), 0.5, &set).unwrap();
    assert_eq!(mem.len(), 6);
    let logs: Vec<Vec<f64>> = set
        .patterns()
        .iter()
        .map(|p| proj.log_phi_favor_pp(p, 0.5).unwrap())
        .collect();
    for (i, got) in mem.log_memory().iter().enumerate() {
        let col: Vec<f64> = logs.iter().map(|l| l[i]).collect();
        let want = log_sum_exp(&col);
        assert!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "feature {i}: {got} vs {want}"
        );
    }
}

#[test]
fn empty_compact_memory_has_zero_energy() {
    let mem = CompactMemory::new(projection(6, 32, 0.5, 1), 0.5).unwrap();
    assert!(mem.is_empty());
    assert_eq!(mem.energy(&[1.0; 6]), 0.0);
}

#[test]
fn compact_energy_is_unbiased_in_small_dimension() {
    let mut r = rng(17);
    let set = PatternSet::random(4, 3, 1, &mut r).unwrap();
    let xi = vec![1.0, -1.0, 1.0, 1.0];
    let exact = energy_regular(&xi, &set);
    let model = compact_model(&set, 400_000, 0.5, false, 5).unwrap();
    let est = model.energy(&xi);
    assert!(((est - exact) / exact).abs() < 0.05, "{est} vs {exact}");
}

#[test]
fn stored_patterns_are_fixed_points() {
    let set = PatternSet::random(10, 3, 5, &mut rng(2)).unwrap();
    let model = EnergyModel::Regular(set.clone());
    for p in set.patterns() {
        let t = flip_dynamics(p, &model, 1000, &mut rng(9));
        assert!(t.converged);
        assert!(t.flips.is_empty());
        assert_eq!(&t.state, p);
    }
}

#[test]
fn flips_strictly_lower_the_energy_from_every_start() {
    let dim = 8;
    let set = PatternSet::random(dim, 3, 2, &mut rng(12)).unwrap();
    let model = EnergyModel::Regular(set.clone());
    for code in 0..(1u32 << dim) {
        let start: Vec<f64> = (0..dim)
            .map(|j| if code >> j & 1 == 1 { 1.0 } else { -1.0 })
            .collect();
        let t = flip_dynamics(&start, &model, 100 * dim, &mut rng(code as u64));
        assert!(t.converged);
        assert!(t.energy_monotone());
        // replay the trajectory with energies recomputed from scratch
        let mut xi = start.clone();
        let mut e = energy_regular(&xi, &set);
        for f in &t.flips {
            xi[f.coordinate] = -xi[f.coordinate];
            let next = energy_regular(&xi, &set);
            assert!(next < e);
            assert!((log_neg_energy_regular(&xi, &set) - f.log_neg_after).abs() < 1e-9);
            e = next;
        }
        assert_eq!(xi, t.state);
    }
}

#[test]
fn single_pattern_attracts_its_ball() {
    let set = PatternSet::random(12, 1, 0, &mut rng(6)).unwrap();
    let model = EnergyModel::Regular(set.clone());
    let mut r = rng(7);
    for bits in 0..6 {
        let (start, _) = corrupt(&set.patterns()[0], bits, &mut r);
        let t = flip_dynamics(&start, &model, 1000, &mut r);
        assert_eq!(t.state, set.patterns()[0]);
    }
}

#[test]
fn no_corruption_retrieves_always() {
    let params = RetrievalParams {
        dim: 32,
        patterns: 4,
        rho: 0.0,
        tau_sep: 0.25,
        features: 256,
        trials: 20,
        seed: 1,
        rf_rho: Some(0.5),
    };
    let rows = retrieval_experiment(&params, 2).unwrap();
    let regular = rows.iter().find(|r| r.mechanism == "regular").unwrap();
    assert_eq!(regular.success_rate, 1.0);
}

#[test]
fn retrieval_is_thread_count_independent() {
    let params = RetrievalParams {
        dim: 24,
        patterns: 3,
        rho: 0.1,
        tau_sep: 0.25,
        features: 64,
        trials: 12,
        seed: 5,
        rf_rho: None,
    };
    let strip = |rows: Vec<mnemosyne::memlab::RetrievalRow>| -> Vec<(String, f64)> {
        rows.into_iter()
            .map(|r| (r.mechanism.to_string(), r.success_rate))
            .collect()
    };
    assert_eq!(
        strip(retrieval_experiment(&params, 1).unwrap()),
        strip(retrieval_experiment(&params, 3).unwrap())
    );
}

#[test]
fn corruption_beyond_half_separation_is_rejected() {
    let params = RetrievalParams {
        dim: 16,
        patterns: 2,
        rho: 0.2,
        tau_sep: 0.25,
        features: 16,
        trials: 1,
        seed: 0,
        rf_rho: None,
    };
    assert!(retrieval_experiment(&params, 1).is_err());
}

fn median_query_micros(mem: &CompactMemory, dim: usize, queries: usize) -> f64 {
    let mut r = rng(99);
    let mut times: Vec<f64> = (0..queries)
        .map(|_| {
            let xi: Vec<f64> = (0..dim)
                .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let t = Instant::now();
            std::hint::black_box(mem.log_neg_energy(&xi));
            t.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

#[test]
fn compact_query_time_does_not_grow_with_pattern_count() {
    let dim = 16;
    let mut r = rng(4);
    let few = PatternSet::random(dim, 10, 0, &mut r).unwrap();
    let many = PatternSet::random(dim, 10_000, 0, &mut r).unwrap();
    let a = compact_model(&few, 256, 0.5, true, 1).unwrap();
    let b = compact_model(&many, 256, 0.5, true, 1).unwrap();
    median_query_micros(&a, dim, 200);
    let ta = median_query_micros(&a, dim, 400);
    let tb = median_query_micros(&b, dim, 400);
    assert!(tb <= ta * 1.2 + 0.5, "M=10: {ta}us, M=10000: {tb}us");
}

#[test]
fn sign_check_runs_both_cases() {
    let p = SignCheckParams {
        dim: 16,
        patterns: 2,
        tau_sep: 1.0,
        rho: 0.125,
        draws: 20,
        features: 256,
        configurations: 4,
        rf_rho: Some(0.5),
        seed: 3,
    };
    let row = theorem1_sign_check(&p, 2).unwrap();
    assert_eq!(row.case1, 2);
    assert_eq!(row.case2, 2);
    assert_eq!(row.agree + row.disagree + row.inconclusive, 4);
    let again = theorem1_sign_check(&p, 1).unwrap();
    assert_eq!(
        (row.agree, row.disagree, row.inconclusive),
        (again.agree, again.disagree, again.inconclusive)
    );
}

#[test]
fn sign_check_rejects_violated_hypotheses() {
    let p = SignCheckParams {
        dim: 16,
        patterns: 2,
        tau_sep: 0.25,
        rho: 0.2,
        draws: 4,
        features: 8,
        configurations: 1,
        rf_rho: None,
        seed: 0,
    };
    let err = theorem1_sign_check(&p, 1).unwrap_err().to_string();
    assert!(err.contains("radius"), "{err}");
}
