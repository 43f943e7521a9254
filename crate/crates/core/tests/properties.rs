//! Randomised checks of the library's invariants.

use std::collections::BTreeSet;

use fabk::controller::{ExtendedSignDescent, SearchInterval, SignDescent, SignFeedback};
use fabk::data::{partition_one_class_per_client, SynthSpec};
use fabk::probe::build_alt_weights;
use fabk::rng;
use fabk::sparsify::{apply_and_reset, client_report, fab_select, fub_select, unidirectional_select, ClientState};
use fabk::timing::stochastic_round;
use fabk::vector::{top_k_indices, DenseVector, SparseGradient};
use proptest::prelude::*;
use rand::Rng;

fn reports_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (1usize..8, 2usize..60).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-4i32..=4, d), n)
                .prop_map(|v| v.into_iter().map(|c| c.into_iter().map(f64::from).collect()).collect()),
            1..=d,
        )
    })
}

fn union_size(reports: &[SparseGradient], depth: usize) -> usize {
    reports
        .iter()
        .flat_map(|r| r.ranked().into_iter().take(depth).map(|(j, _)| j))
        .collect::<BTreeSet<_>>()
        .len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn top_k_is_permutation_equivariant(v in prop::collection::vec(-1000i32..1000, 1..40), seed in any::<u64>()) {
        // distinct magnitudes, so the tie rule plays no part
        let v: Vec<f64> = v.iter().enumerate().map(|(i, x)| f64::from(*x) + i as f64 * 1e-3).collect();
        let mut perm: Vec<usize> = (0..v.len()).collect();
        let mut r = rng::seeded(seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permuted: Vec<f64> = perm.iter().map(|&p| v[p]).collect();
        let k = 1 + (seed as usize) % v.len();
        let a: BTreeSet<usize> = top_k_indices(&v, k).unwrap().into_iter().collect();
        let b: BTreeSet<usize> = top_k_indices(&permuted, k).unwrap().into_iter().map(|i| perm[i]).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fab_selection_invariants((accs, k) in reports_strategy()) {
        let n = accs.len();
        let reports: Vec<SparseGradient> = accs.iter().map(|a| client_report(a, k).unwrap()).collect();
        let counts: Vec<usize> = (1..=n).collect();
        let sel = fab_select(&reports, k, &counts).unwrap();

        let distinct = union_size(&reports, k);
        prop_assert_eq!(sel.len(), k.min(distinct));
        prop_assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));

        // κ bracketing
        prop_assert!(union_size(&reports, sel.kappa) <= k);
        prop_assert!(sel.kappa == k || union_size(&reports, sel.kappa + 1) > k);

        // fairness and contribution bookkeeping
        for (i, r) in reports.iter().enumerate() {
            let own: BTreeSet<usize> = r.indices().collect();
            let expect: Vec<usize> = sel.indices.iter().copied().filter(|j| own.contains(j)).collect();
            prop_assert_eq!(&sel.contributed[i], &expect);
            prop_assert!(expect.len() >= (k / n).min(r.len()));
        }

        // aggregate = (1/C) Σ C_i a_ij 1[j ∈ J_i]
        let total: usize = counts.iter().sum();
        for &(j, b) in sel.aggregate.entries() {
            let mut s = 0.0;
            for (i, r) in reports.iter().enumerate() {
                if let Some(a) = r.get(j) {
                    s += counts[i] as f64 * a;
                }
            }
            prop_assert!((b - s / total as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn single_client_fab_is_plain_top_k(acc in prop::collection::vec(-50i32..50, 1..80), k0 in 1usize..80) {
        let acc: Vec<f64> = acc.into_iter().map(f64::from).collect();
        let k = 1 + (k0 - 1) % acc.len();
        let r = client_report(&acc, k).unwrap();
        let sel = fab_select(&[r], k, &[5]).unwrap();
        let mut expect = top_k_indices(&acc, k).unwrap();
        expect.sort_unstable();
        prop_assert_eq!(sel.indices, expect);
    }

    #[test]
    fn downlink_sizes((accs, k) in reports_strategy()) {
        let reports: Vec<SparseGradient> = accs.iter().map(|a| client_report(a, k).unwrap()).collect();
        let counts = vec![1; reports.len()];
        let distinct = union_size(&reports, k);
        prop_assert_eq!(fub_select(&reports, k, &counts).unwrap().len(), k.min(distinct));
        let uni = unidirectional_select(&reports, &counts).unwrap();
        prop_assert_eq!(uni.len(), distinct);
        prop_assert!(uni.len() <= k * reports.len());
    }

    #[test]
    fn residual_is_conserved((accs, k) in reports_strategy(), eta in 0.01f64..1.0) {
        let dim = accs[0].len();
        let w = DenseVector::new((0..dim).map(|j| j as f64 * 0.1).collect()).unwrap();
        let mut clients: Vec<ClientState> = accs
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut c = ClientState::new(i, w.clone(), vec![fabk::Sample::new(vec![0.0], 0); i + 1]);
                c.accumulate(a).unwrap();
                c
            })
            .collect();
        let before: Vec<Vec<f64>> = clients.iter().map(|c| c.accumulator.clone()).collect();
        let reports: Vec<SparseGradient> = clients.iter().map(|c| c.report(k).unwrap()).collect();
        let counts: Vec<usize> = clients.iter().map(ClientState::count).collect();
        let sel = fab_select(&reports, k, &counts).unwrap();
        let new_w = apply_and_reset(&mut clients, &sel, eta).unwrap();

        for (i, c) in clients.iter().enumerate() {
            prop_assert!(c.weights.bit_eq(&new_w));
            for j in 0..dim {
                let consumed = if sel.contributed[i].contains(&j) { before[i][j] } else { 0.0 };
                prop_assert_eq!(c.accumulator[j], before[i][j] - consumed);
            }
        }
        for j in 0..dim {
            let b = sel.aggregate.get(j).unwrap_or(0.0);
            prop_assert_eq!(new_w[j], w[j] - eta * b);
        }
    }

    #[test]
    fn alt_weights_leave_clients_alone((accs, k) in reports_strategy(), k_alt in 0usize..10) {
        let dim = accs[0].len();
        let w = DenseVector::zeros(dim);
        let reports: Vec<SparseGradient> = accs.iter().map(|a| client_report(a, k).unwrap()).collect();
        let snapshot = accs.clone();
        let counts = vec![2; reports.len()];
        let (alt, sel) = build_alt_weights(&w, &reports, k_alt.min(k), 0.5, &counts).unwrap();
        prop_assert!(sel.len() <= k_alt.min(k).max(1));
        let changed = alt.iter().filter(|x| **x != 0.0).count();
        prop_assert!(changed <= sel.len());
        prop_assert_eq!(accs, snapshot);
    }

    #[test]
    fn stochastic_round_hits_neighbours(k in 1.0f64..500.0, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        for _ in 0..20 {
            let x = stochastic_round(k, 500, &mut r).unwrap();
            prop_assert!(x as f64 == k.floor() || x as f64 == k.ceil());
        }
    }

    #[test]
    fn controllers_stay_in_interval(
        lo in 1.0f64..100.0,
        width in 1.0f64..1000.0,
        k1 in 0.0f64..2000.0,
        signs in prop::collection::vec(-1i8..=2, 1..300),
    ) {
        let iv = SearchInterval::new(lo, lo + width).unwrap();
        let mut a2 = SignDescent::new(iv, k1);
        let mut a3 = ExtendedSignDescent::new(iv, k1, 1.5, 5).unwrap();
        let mut last_delta = a3.delta();
        let mut restarts = 0;
        for s in signs {
            let s = match s {
                -1 => SignFeedback::Negative,
                0 => SignFeedback::Zero,
                1 => SignFeedback::Positive,
                _ => SignFeedback::Unavailable,
            };
            let before = a3.k();
            let window_width = a3.interval().width();
            let info = a3.step(s);
            if s == SignFeedback::Unavailable && !info.restarted {
                prop_assert_eq!(a3.k(), before);
            }
            a2.step(s);
            prop_assert!(iv.contains(a2.k()));
            prop_assert!(iv.contains(a3.k()));
            prop_assert!(a3.interval().min() >= iv.min() && a3.interval().max() <= iv.max());
            if info.restarted {
                restarts += 1;
                prop_assert!(a3.interval().width() < (2f64.sqrt() - 1.0) * window_width);
            } else {
                prop_assert!(a3.delta() <= last_delta + 1e-12);
            }
            last_delta = a3.delta();
        }
        prop_assert_eq!(restarts, a3.restarts());
    }

    #[test]
    fn exact_sign_descent_does_not_overshoot(
        k_star in 5.0f64..995.0,
        k1 in 1.0f64..1000.0,
        steps in 1usize..400,
    ) {
        let iv = SearchInterval::new(1.0, 1000.0).unwrap();
        let mut c = SignDescent::new(iv, k1);
        let mut dist = (c.k() - k_star).abs();
        for _ in 0..steps {
            let delta = c.delta();
            c.step(SignFeedback::of(c.k() - k_star));
            let next = (c.k() - k_star).abs();
            prop_assert!(next <= delta + dist + 1e-9);
            prop_assert!(next <= dist.max(delta) + 1e-9);
            dist = next;
        }
    }

    #[test]
    fn partition_preserves_samples(classes in 2usize..6, per_client in 1usize..4, spc in 8usize..20, seed in any::<u64>()) {
        let samples = SynthSpec::new(classes, 3, spc).generate(seed, 0).unwrap();
        let clients = classes * per_client;
        prop_assume!(spc >= per_client);
        let fed = partition_one_class_per_client(samples.clone(), clients, seed).unwrap();
        prop_assert_eq!(fed.total(), samples.len());
        prop_assert_eq!(fed.label_skew(), 0.0);
        let key = |s: &fabk::Sample| (s.label, s.features.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let mut a: Vec<_> = samples.iter().map(key).collect();
        let mut b: Vec<_> = fed.shards().iter().flatten().map(key).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }
}
