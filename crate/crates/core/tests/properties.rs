use bilevel_core::bilevel::{quad_bilevel_reference, run_bilevel, BilevelConfig, QuadraticProblem};
use bilevel_core::eval::energy_distance;
use bilevel_core::optim::{Optimizer, OptimizerKind};
use bilevel_core::params::{ParamKind, ParamStore};
use bilevel_core::pruning::{apply_mask, magnitude_prune, PruneScope};
use bilevel_core::rng::RngStream;
use bilevel_core::tape::Tape;
use bilevel_core::tensor::Tensor;
use proptest::prelude::*;

fn points(max_rows: usize) -> impl Strategy<Value = Tensor<f64>> {
    (2..max_rows).prop_flat_map(|n| {
        prop::collection::vec(-10.0..10.0f64, n * 2)
            .prop_map(move |d| Tensor::new(vec![n, 2], d).unwrap())
    })
}

fn permute_rows(t: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut idx: Vec<usize> = (0..t.rows()).collect();
    let mut rng = RngStream::root(seed);
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.index(i + 1));
    }
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Two weight tensors with distinct magnitudes, so the kept set is unique.
fn weights() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..20, 1usize..20).prop_flat_map(|(n1, n2)| {
        prop::collection::hash_set(1u32..100_000, n1 + n2).prop_flat_map(move |set| {
            let mags: Vec<f64> = set.into_iter().map(|m| m as f64 / 1000.0).collect();
            prop::collection::vec(any::<bool>(), n1 + n2).prop_map(move |signs| {
                let v: Vec<f64> = mags
                    .iter()
                    .zip(&signs)
                    .map(|(&m, &s)| if s { m } else { -m })
                    .collect();
                (v[..n1].to_vec(), v[n1..].to_vec())
            })
        })
    })
}

fn store_of(w1: &[f64], w2: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("a", Tensor::vector(w1.to_vec()), ParamKind::Weight);
    s.insert("b", Tensor::vector(w2.to_vec()), ParamKind::Weight);
    s
}

fn scope() -> impl Strategy<Value = PruneScope> {
    prop_oneof![Just(PruneScope::Global), Just(PruneScope::PerTensor)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_distance_is_symmetric_and_non_negative(a in points(12), b in points(12)) {
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
    }

    #[test]
    fn energy_distance_vanishes_under_permutation(a in points(16), seed in any::<u64>()) {
        let p = permute_rows(&a, seed);
        prop_assert!(energy_distance(&a, &p).unwrap() < 1e-12);
    }

    #[test]
    fn pruning_commutes_with_permutation((w1, w2) in weights(), keep in 0.0..=1.0f64, scope in scope(), seed in any::<u64>()) {
        let (mask, _) = magnitude_prune(&store_of(&w1, &w2), keep, scope).unwrap();
        let perm = |v: &[f64], s: u64| {
            let t = permute_rows(&Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap(), s);
            t.data().to_vec()
        };
        // Permuting within each tensor permutes the mask the same way.
        let (p1, p2) = (perm(&w1, seed), perm(&w2, seed ^ 1));
        let (pmask, _) = magnitude_prune(&store_of(&p1, &p2), keep, scope).unwrap();
        for (orig, permuted, name) in [(&w1, &p1, "a"), (&w2, &p2, "b")] {
            let m = mask.get(name).unwrap();
            let pm = pmask.get(name).unwrap();
            for (j, x) in permuted.iter().enumerate() {
                let i = orig.iter().position(|y| y == x).unwrap();
                prop_assert_eq!(pm[j], m[i]);
            }
        }
    }

    #[test]
    fn kept_fraction_respects_budget((w1, w2) in weights(), keep in 0.0..=1.0f64, scope in scope()) {
        let (mask, report) = magnitude_prune(&store_of(&w1, &w2), keep, scope).unwrap();
        let total = (w1.len() + w2.len()) as f64;
        let slack = match scope {
            PruneScope::Global => 1.0 / total,
            PruneScope::PerTensor => 2.0 / total,
        };
        prop_assert!(report.kept_fraction >= keep - 1e-12);
        prop_assert!(report.kept_fraction <= keep + slack + 1e-12);
        prop_assert_eq!(mask.kept() as f64 / total, report.kept_fraction);
    }

    #[test]
    fn optimizers_keep_pruned_entries_at_zero(
        (w1, w2) in weights(),
        keep in 0.0..=1.0f64,
        adam in any::<bool>(),
        steps in 1usize..8,
    ) {
        let mut s = store_of(&w1, &w2);
        let (mask, _) = magnitude_prune(&s, keep, PruneScope::Global).unwrap();
        apply_mask(&mut s, &mask).unwrap();
        let nnz = s.nnz();
        let kind = if adam { OptimizerKind::adam() } else { OptimizerKind::Sgd };
        let mut opt = Optimizer::new(kind);
        for _ in 0..steps {
            s.zero_grad();
            let mut tape = Tape::new();
            let a = tape.param(&s, "a").unwrap();
            let b = tape.param(&s, "b").unwrap();
            let la = tape.sq_l2(a).unwrap();
            let lb = tape.sum(b).unwrap();
            let loss = tape.add(la, lb).unwrap();
            tape.backward(loss, &mut s).unwrap();
            opt.step(&mut s, 0.01);
        }
        for (name, p) in s.iter() {
            let m = mask.get(name).unwrap();
            for (x, &k) in p.value().data().iter().zip(m) {
                if !k {
                    prop_assert_eq!(*x, 0.0);
                }
            }
        }
        prop_assert!(s.nnz() <= nnz);
    }

    #[test]
    fn penalized_distance_shrinks_with_lambda(
        q in prop::collection::vec(prop_oneof![Just(0.0), 0.1..5.0f64], 1..5),
        a_seed in any::<u64>(),
    ) {
        let n = q.len();
        let mut rng = RngStream::root(a_seed);
        let a: Vec<f64> = (0..n).map(|_| rng.normal::<f64>() * 3.0).collect();
        let mut qm = vec![0.0; n * n];
        for (i, &d) in q.iter().enumerate() {
            qm[i * n + i] = d;
        }
        let b = vec![0.0; n];
        let lambdas = [0.0, 0.1, 1.0, 10.0, 100.0, 1e4];
        let r = quad_bilevel_reference(&a, &qm, &b, &lambdas).unwrap();
        for w in r.rows.windows(2) {
            prop_assert!(w[1].distance <= w[0].distance + 1e-12);
        }
    }

    #[test]
    fn derive_is_deterministic_and_path_sensitive(seed in any::<u64>(), name in "[a-z]{1,8}") {
        let root = RngStream::root(seed);
        let mut x = root.derive(&name);
        let mut y = RngStream::root(seed).derive(&name);
        let mut z = root.derive(&format!("{name}-other"));
        let xs: Vec<f64> = (0..4).map(|_| x.uniform()).collect();
        let ys: Vec<f64> = (0..4).map(|_| y.uniform()).collect();
        let zs: Vec<f64> = (0..4).map(|_| z.uniform()).collect();
        prop_assert_eq!(&xs, &ys);
        prop_assert_ne!(&xs, &zs);
    }

    #[test]
    fn slicing_rows_inverts_concat(a in points(8), b in points(8)) {
        let joined = Tensor::concat_rows(&[&a, &b]).unwrap();
        prop_assert_eq!(joined.slice_rows(0, a.rows()).unwrap(), a.clone());
        prop_assert_eq!(joined.slice_rows(a.rows(), b.rows()).unwrap(), b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn bilevel_iterates_keep_sparsity(
        theta0 in prop::collection::vec(-3.0..3.0f64, 6),
        keep in 0.2..0.9f64,
        adam in any::<bool>(),
    ) {
        let n = theta0.len();
        let q = Tensor::identity(n);
        let problem_a: Vec<f64> = (0..n).map(|i| i as f64 - 2.5).collect();
        let mut problem = QuadraticProblem::new(problem_a, q, vec![0.5; n]).unwrap();
        let mut init = problem.store(theta0);
        let (mask, _) = magnitude_prune(&init, keep, PruneScope::Global).unwrap();
        apply_mask(&mut init, &mask).unwrap();
        let nnz = init.nnz();
        let cfg = BilevelConfig {
            e: 5,
            k: 3,
            lambda: 2.0,
            eta: 0.05,
            zeta: 0.01,
            optimizer: if adam { OptimizerKind::adam() } else { OptimizerKind::Sgd },
            ..BilevelConfig::default()
        };
        let state = run_bilevel(&init, &mut problem, &cfg, &RngStream::root(0)).unwrap();
        prop_assert!(state.theta.nnz() <= nnz);
        prop_assert!(state.vartheta.nnz() <= nnz);
        for (name, p) in state.theta.iter().chain(state.vartheta.iter()) {
            let m = mask.get(name).unwrap();
            prop_assert!(p.value().data().iter().zip(m).all(|(x, &k)| k || *x == 0.0));
        }
    }
}
