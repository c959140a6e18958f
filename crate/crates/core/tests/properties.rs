use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::FileFailurePersistence;
use rand::SeedableRng;

use magcl::augment::{drop_edges, feature_mask, mask_features, ArchSampler, ArchSamplerConfig, Strategies};
use magcl::checkpoint::{load_checkpoint, load_embeddings, save_checkpoint, save_embeddings};
use magcl::encoder::{Activation, Model, PRELU_INIT};
use magcl::eval::nmi;
use magcl::gradcheck::{check_full_model, InstanceSpec};
use magcl::graph::{build_filter, GraphFilter, SparseGraph};
use magcl::loss::{alignment_metric, info_nce_value};
use magcl::optim::Adam;
use magcl::rng::Rng;
use magcl::tape::Tape;
use magcl::Matrix;

fn graph_strategy(max_nodes: usize) -> impl Strategy<Value = SparseGraph> {
    (1..=max_nodes).prop_flat_map(|n| {
        proptest::collection::vec((0..n, 0..n), 0..3 * n)
            .prop_map(move |edges| SparseGraph::from_undirected_edges(n, &edges).unwrap())
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    proptest::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn dense_filter(g: &SparseGraph, pi: f64) -> Matrix<f64> {
    let n = g.num_nodes();
    let a = Matrix::from_fn(n, n, |i, j| if i == j || g.contains(i, j) { 1.0 } else { 0.0 });
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    Matrix::from_fn(n, n, |i, j| {
        let eye = if i == j { 1.0 - pi } else { 0.0 };
        eye + pi * a[(i, j)] / (deg[i] * deg[j]).sqrt()
    })
}

fn unit_rows(m: &Matrix<f64>) -> Matrix<f64> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let norm = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        out.row_mut(r).iter_mut().for_each(|v| *v /= norm);
    }
    out
}

fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Regressions are kept next to this file; the default lookup wants a lib.rs.
fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        failure_persistence: Some(Box::new(FileFailurePersistence::WithSource("regressions"))),
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn filter_matches_dense_definition(g in graph_strategy(12), pi in 0.05..0.95f64) {
        let f = build_filter(&g, pi).unwrap();
        let dense = dense_filter(&g, pi);
        prop_assert!(f.to_dense().max_abs_diff(&dense) < 1e-14);
        let n = g.num_nodes();
        for i in 0..n {
            prop_assert!(f.get(i, i) > 0.0);
            for j in 0..n {
                prop_assert_eq!(f.get(i, j), f.get(j, i));
            }
        }
    }

    #[test]
    fn filter_fixes_sqrt_degree_vector(g in graph_strategy(12), pi in 0.05..0.95f64) {
        let f = build_filter(&g, pi).unwrap();
        let n = g.num_nodes();
        let v = Matrix::from_fn(n, 1, |i, _| ((g.neighbors(i).len() + 1) as f64).sqrt());
        prop_assert!(f.spmm(&v).unwrap().max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn spmm_equals_dense_product(g in graph_strategy(10), cols in 1..5usize, seed in any::<u64>()) {
        let f = build_filter(&g, 0.5).unwrap();
        let n = g.num_nodes();
        let z = Matrix::from_fn(n, cols, |i, j| ((seed.wrapping_add((i * 31 + j * 7) as u64) % 97) as f64) / 48.0 - 1.0);
        let dense = f.to_dense().matmul(&z).unwrap();
        prop_assert!(f.spmm(&z).unwrap().max_abs_diff(&dense) < 1e-13);
        let z32: Matrix<f32> = z.cast();
        let d32: Matrix<f64> = f.spmm(&z32).unwrap().cast();
        prop_assert!(d32.max_abs_diff(&dense) < 1e-5);
    }

    #[test]
    fn propagate_is_repeated_spmm(g in graph_strategy(10), k in 0..6usize) {
        let f = build_filter(&g, 0.5).unwrap();
        let z = Matrix::from_fn(g.num_nodes(), 3, |i, j| (i as f64 - j as f64).sin());
        let mut expect = z.clone();
        for _ in 0..k {
            expect = f.spmm(&expect).unwrap();
        }
        prop_assert!(f.propagate(&z, k).unwrap().max_abs_diff(&expect) < 1e-13);
    }

    #[test]
    fn dropped_graph_is_symmetric_loop_free_subgraph(g in graph_strategy(15), rate in 0.0..1.0f64, seed in any::<u64>()) {
        let d = drop_edges(&g, rate, &mut rng(seed)).unwrap();
        prop_assert!(d.is_symmetric());
        prop_assert!(!d.has_self_loops());
        prop_assert_eq!(d.num_nodes(), g.num_nodes());
        for (u, v) in d.undirected_edges() {
            prop_assert!(g.contains(u, v));
        }
        let f = build_filter(&d, 0.5).unwrap();
        for i in 0..g.num_nodes() {
            prop_assert!(f.get(i, i) > 0.0);
        }
    }

    #[test]
    fn drop_rate_extremes(g in graph_strategy(15), seed in any::<u64>()) {
        prop_assert_eq!(drop_edges(&g, 0.0, &mut rng(seed)).unwrap(), g.clone());
        prop_assert!(drop_edges(&g, 1.0, &mut rng(seed)).is_err());
        prop_assert!(drop_edges(&g, 0.999_999_999, &mut rng(seed)).unwrap().nnz() <= g.nnz());
    }

    #[test]
    fn feature_masking_zeroes_whole_columns(x in matrix(6, 9), rate in 0.0..1.0f64, seed in any::<u64>()) {
        let masked = mask_features(&x, rate, &mut rng(seed)).unwrap();
        let keep = feature_mask(9, rate, &mut rng(seed)).unwrap();
        for c in 0..9 {
            for r in 0..6 {
                let expect = if keep[c] { x[(r, c)] } else { 0.0 };
                prop_assert_eq!(masked[(r, c)], expect);
            }
        }
    }

    #[test]
    fn sampler_draws_satisfy_constraints(
        n in 1..4usize,
        lo in 0..3usize,
        span in 0..3usize,
        lo2 in 0..3usize,
        span2 in 0..3usize,
        mask in 0..8u8,
        fixed_k in 0..4usize,
        seed in any::<u64>(),
    ) {
        let strategies = Strategies { asymmetric: mask & 1 != 0, random: mask & 2 != 0, shuffling: mask & 4 != 0 };
        let cfg = ArchSamplerConfig { n_transforms: n, low: lo, high: lo + span, low2: lo2, high2: lo2 + span2, strategies, fixed_k };
        let sampler = match ArchSampler::new(cfg) {
            Ok(s) => s,
            Err(e) => {
                prop_assert!(e.to_string().contains("unsatisfiable architecture constraints"), "{}", e);
                return Ok(());
            }
        };
        let support = sampler.support();
        let mut r = rng(seed);
        for _ in 0..20 {
            let (a, b) = sampler.sample(&mut r).unwrap();
            prop_assert_eq!(a.len(), n);
            prop_assert_eq!(b.len(), n);
            if strategies == Strategies::NONE {
                prop_assert!(a.k.iter().all(|&k| k == fixed_k));
            } else {
                prop_assert!(a.k.iter().all(|&k| (lo..=lo + span).contains(&k)));
            }
            let r_only = strategies == Strategies { asymmetric: false, random: true, shuffling: false };
            if r_only {
                prop_assert_eq!(&a, &b);
                prop_assert!(a.k.iter().all(|&k| k == a.k[0]));
            } else if strategies != Strategies::NONE {
                prop_assert!(b.k.iter().all(|&k| (lo2..=lo2 + span2).contains(&k)));
            }
            if strategies.asymmetric {
                prop_assert_ne!(a.total(), b.total());
            } else {
                prop_assert_eq!(a.total(), b.total());
            }
            if strategies.shuffling {
                prop_assert!(a.k.iter().zip(&b.k).all(|(x, y)| x != y));
            }
            if !strategies.asymmetric && !strategies.shuffling && !strategies.random {
                prop_assert_eq!(&a, &b);
            }
            if strategies.random {
                prop_assert!(support.contains(&(a.clone(), b.clone())));
            }
        }
    }

    #[test]
    fn info_nce_is_positive_and_rotation_invariant(z1 in matrix(5, 3), z2 in matrix(5, 3), angle in 0.0..6.3f64) {
        let (z1, z2) = (unit_rows(&z1), unit_rows(&z2));
        let loss = info_nce_value(&z1, &z2).unwrap();
        prop_assert!(loss > 0.0);
        let (c, s) = (angle.cos(), angle.sin());
        let rot = Matrix::from_vec(3, 3, vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let rotated = info_nce_value(&z1.matmul(&rot).unwrap(), &z2.matmul(&rot).unwrap()).unwrap();
        prop_assert!((loss - rotated).abs() < 1e-10 * loss.max(1.0));
    }

    #[test]
    fn info_nce_lower_bound_is_reached_only_asymptotically(z in matrix(4, 4)) {
        let z = unit_rows(&z);
        let n = z.rows() as f64;
        let loss = info_nce_value(&z, &z).unwrap();
        // Identical views: each anchor has a_i = 0 and n-1 negatives with b_ij <= 0.
        prop_assert!(loss > 0.0);
        prop_assert!(loss <= n * n.ln() + 1e-12);
        prop_assert!(alignment_metric(&z, &z).unwrap() < 1e-15);
    }

    #[test]
    fn tape_loss_gradient_matches_fd(z1 in matrix(4, 3), z2 in matrix(4, 3)) {
        let (z1, z2) = (unit_rows(&z1), unit_rows(&z2));
        let mut tape = Tape::<f64>::new();
        let (a, b) = (tape.param(z1.clone()), tape.param(z2.clone()));
        let loss = tape.info_nce(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        let h = 1e-6;
        for (which, base) in [(0, &z1), (1, &z2)] {
            let g = grads.get(if which == 0 { a } else { b }).unwrap();
            for e in 0..base.len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus.as_mut_slice()[e] += h;
                minus.as_mut_slice()[e] -= h;
                let f = |m: &Matrix<f64>| if which == 0 { info_nce_value(m, &z2).unwrap() } else { info_nce_value(&z1, m).unwrap() };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                prop_assert!((g.as_slice()[e] - fd).abs() < 1e-6, "entry {}: {} vs {}", e, g.as_slice()[e], fd);
            }
        }
    }

    #[test]
    fn nmi_is_bounded_symmetric_and_label_invariant(a in proptest::collection::vec(0..4usize, 2..40), perm in Just([2usize, 0, 3, 1])) {
        let b: Vec<usize> = a.iter().map(|&x| perm[x]).collect();
        let v = nmi(&a, &b);
        let distinct = a.iter().collect::<std::collections::HashSet<_>>().len();
        if distinct > 1 {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
        let c: Vec<usize> = a.iter().enumerate().map(|(i, &x)| (x + i) % 3).collect();
        let u = nmi(&a, &c);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&u));
        prop_assert!((u - nmi(&c, &a)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn full_model_gradients_match_fd(
        nodes in 3..=8usize,
        features in 2..=6usize,
        hidden in 2..=8usize,
        proj in 2..=6usize,
        act in 0..3usize,
        seed in any::<u64>(),
    ) {
        let activation = [Activation::Relu, Activation::Prelu, Activation::Identity][act];
        let spec = InstanceSpec { nodes, features, hidden, proj, activation, edge_prob: 0.4, drop_rate: 0.2 };
        let r = check_full_model(spec, seed, 1e-4).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn adam_moves_each_entry_by_at_most_lr_on_first_step(p in matrix(3, 3), g in matrix(3, 3), lr in 1e-4..1e-1f64) {
        let mut w = p.clone();
        let mut adam = Adam::new(lr, 0.0);
        adam.step(&mut [&mut w], &[&g]).unwrap();
        for e in 0..p.len() {
            let delta = w.as_slice()[e] - p.as_slice()[e];
            prop_assert!(delta.abs() <= lr * (1.0 + 1e-9));
            if g.as_slice()[e].abs() > 1e-3 {
                prop_assert!(delta * g.as_slice()[e] < 0.0);
                prop_assert!((delta.abs() - lr).abs() < lr * 1e-4);
            }
        }
    }
}

#[test]
fn checkpoint_and_embeddings_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(5);
    let model = Model::<f32>::init(7, 5, 4, 3, Activation::Prelu, PRELU_INIT, &mut r).unwrap();
    let path = dir.path().join("m.mawt");
    save_checkpoint(&model, &path).unwrap();
    let mut other = Model::<f32>::init(7, 5, 4, 3, Activation::Prelu, PRELU_INIT, &mut rng(6)).unwrap();
    assert_ne!(model, other);
    load_checkpoint(&mut other, &path).unwrap();
    assert_eq!(model, other);

    let mut wrong = Model::<f32>::init(7, 6, 4, 3, Activation::Prelu, PRELU_INIT, &mut rng(6)).unwrap();
    let err = load_checkpoint(&mut wrong, &path).unwrap_err().to_string();
    assert!(err.contains("expected shape"), "{err}");

    let emb = Matrix::<f32>::from_fn(9, 4, |i, j| i as f32 * 0.5 - j as f32);
    let epath = dir.path().join("e.maeb");
    save_embeddings(&emb, &epath).unwrap();
    assert_eq!(load_embeddings(&epath).unwrap(), emb);
}

#[test]
fn filter_cache_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let g = SparseGraph::from_undirected_edges(5, &[(0, 1), (1, 2), (3, 4)]).unwrap();
    let f = build_filter(&g, 0.3).unwrap();
    let path = dir.path().join("f.mafl");
    f.save(&path).unwrap();
    let back = GraphFilter::load(&path).unwrap();
    assert_eq!(back.to_dense(), f.to_dense());
    assert_eq!(back.pi(), 0.3);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(GraphFilter::load(&path).is_err());
}

#[test]
fn embedding_of_arc_filter_is_deterministic() {
    let g = SparseGraph::from_undirected_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
    let f = Arc::new(build_filter(&g, 0.5).unwrap());
    let x = Matrix::from_fn(6, 3, |i, j| (i * j) as f64 * 0.1);
    let model = Model::<f64>::init(3, 4, 4, 2, Activation::Relu, PRELU_INIT, &mut rng(1)).unwrap();
    let arch = magcl::augment::EncoderArch::new(vec![1, 2]);
    assert_eq!(model.embed(&f, &x, &arch).unwrap(), model.embed(&f, &x, &arch).unwrap());
}
