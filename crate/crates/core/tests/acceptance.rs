//! Acceptance suite. Each test prints one `criterion N [...]: PASS|FAIL` line
//! straight to stdout (bypassing the test harness capture) and then asserts.
//!
//! Criteria 7, 8 and 9 train full models on Cora / CiteSeer for hours on one
//! core and are `#[ignore]`d; run them with
//! `cargo test -p magcl --test acceptance -- --ignored --nocapture`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use magcl::augment::{ArchSampler, ArchSamplerConfig, EncoderArch, Strategies};
use magcl::config::TrainConfig;
use magcl::dataset::{default_data_root, load_dataset, Dataset, LoadOptions};
use magcl::encoder::{forward_pair, Activation, Model, PRELU_INIT};
use magcl::eval::{kmeans_nmi, linear_probe, mean_std, ProbeConfig};
use magcl::gradcheck::{check_full_model, random_graph, InstanceSpec};
use magcl::graph::build_filter;
use magcl::loss::info_nce_value;
use magcl::rng::{substream, Rng, Stream};
use magcl::spectral::{self, BruteForceOracle};
use magcl::tape::Tape;
use magcl::trainer::{embed, no_observer, train};
use magcl::Matrix;

/// Feature preprocessing used by the end-to-end criteria.
const ROW_NORMALIZE: bool = false;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "\ncriterion {n} [{name}]: {}  {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn dataset(name: &str) -> Result<Dataset, String> {
    let dir = default_data_root().join(name);
    load_dataset(
        &dir,
        LoadOptions {
            row_normalize: ROW_NORMALIZE,
        },
    )
    .map_err(|e| format!("cannot load {} ({e}); run scripts/prepare_datasets.py", dir.display()))
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let activations = [Activation::Relu, Activation::Prelu, Activation::Identity];
    let mut r = rng(101);
    let trials = 24;
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let spec = InstanceSpec {
            nodes: r.gen_range(3..=8),
            features: r.gen_range(2..=8),
            hidden: r.gen_range(2..=8),
            proj: r.gen_range(2..=8),
            activation: activations[t % 3],
            edge_prob: 0.4,
            drop_rate: 0.2,
        };
        let rep = check_full_model(spec, 1000 + t as u64, 1e-4).unwrap();
        worst = worst.max(rep.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "gradient FD",
        worst < 1e-4 && secs < 10.0,
        &format!("{trials} trials, max rel err {worst:.2e} (< 1e-4), {secs:.2}s (< 10s)"),
    );
}

#[test]
fn criterion_2_closed_form_selection_matches_oracle() {
    let start = Instant::now();
    let mut r = rng(202);
    let mut cases = 0;
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for g in 0..50 {
        let n = r.gen_range(4..=10);
        let graph = random_graph(n, 0.4, &mut r);
        let filter = build_filter(&graph, 0.5).unwrap();
        let dec = spectral::eig_sym(&filter).unwrap();
        for (l, l2) in [(1, 2), (1, 3), (2, 4)] {
            let oracle = BruteForceOracle::new(&filter, &dec, l, l2).unwrap();
            for d_out in 1..=3 {
                cases += 1;
                let sel = spectral::theorem1_select(&dec.eigenvalues, l, l2, d_out).unwrap();
                let best = oracle.best(d_out).unwrap();
                let gap = (oracle.objective(&sel.indices) - best.objective).abs();
                worst = worst.max(gap);
                let score = |s: &[usize]| {
                    let mut v: Vec<f64> =
                        s.iter().map(|&k| spectral::selection_score(dec.eigenvalues[k], l, l2)).collect();
                    v.sort_by(f64::total_cmp);
                    v
                };
                let same_set = sel.indices == best.subset
                    || score(&sel.indices)
                        .iter()
                        .zip(score(&best.subset))
                        .all(|(a, b)| (a - b).abs() <= 1e-10);
                if gap > 1e-10 || !same_set {
                    failures.push(format!("graph {g} n={n} L={l} L2={l2} d={d_out}: gap {gap:e}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "selection vs oracle",
        failures.is_empty() && secs < 30.0,
        &format!(
            "{cases} cases, {} mismatches, max objective gap {worst:.1e}, {secs:.2}s{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    );
}

#[test]
fn criterion_3_cora_spectrum() {
    let ds = match dataset("cora") {
        Ok(ds) => ds,
        Err(e) => return report(3, "Cora spectrum", false, &e),
    };
    let start = Instant::now();
    let filter = build_filter(&ds.graph, 0.5).unwrap();
    let values = spectral::eigenvalues(&filter).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let l1 = values[0];
    let l100 = values[99];
    let min = *values.last().unwrap();
    let max = values[0];
    // 1e-12 above one covers rounding in the symmetric solver.
    let in_range = min > 0.0 && max <= 1.0 + 1e-12;
    let above = values.iter().filter(|&&v| v > 0.998).count();
    let pass = (l1 - 1.0).abs() <= 1e-8 && l100 > 0.998 && in_range && secs < 120.0;
    report(
        3,
        "Cora spectrum",
        pass,
        &format!(
            "lambda_1 = {l1:.15} (1 +- 1e-8), lambda_100 = {l100:.6} (need > 0.998; {above} eigenvalues exceed 0.998), \
             range [{min:.6}, {max:.15}], {secs:.1}s (< 120s)"
        ),
    );
}

#[test]
fn criterion_4_linear_shuffling_invariance() {
    let mut r = rng(404);
    let n = 80;
    let graph = random_graph(n, 0.06, &mut r);
    let filter = Arc::new(build_filter(&graph, 0.5).unwrap());
    let x = Matrix::from_fn(n, 10, |_, _| r.gen_range(-1.0..1.0));
    let blocks = 3;
    let total = 6;
    let model = Model::<f64>::init(10, 7, 5, blocks, Activation::Identity, PRELU_INIT, &mut r).unwrap();
    let reference = model.embed(&filter, &x, &EncoderArch::uniform(blocks, 2)).unwrap();
    let mut worst: f64 = 0.0;
    let mut partitions = Vec::new();
    while partitions.len() < 10 {
        let a = r.gen_range(0..=total);
        let b = r.gen_range(0..=total - a);
        let k = vec![a, b, total - a - b];
        if k == [2, 2, 2] || partitions.contains(&k) {
            continue;
        }
        let out = model.embed(&filter, &x, &EncoderArch::new(k.clone())).unwrap();
        worst = worst.max(out.max_abs_diff(&reference));
        partitions.push(k);
    }
    report(
        4,
        "linear shuffling invariance",
        worst <= 1e-6,
        &format!("|V| = {n}, L = {total}, 10 partitions vs (2,2,2), max diff {worst:.2e} (<= 1e-6)"),
    );
}

fn cosine_form(z1: &Matrix<f64>, z2: &Matrix<f64>) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n = z1.rows();
    (0..n)
        .map(|i| {
            let pos = cos(z1.row(i), z2.row(i)).exp();
            let neg: f64 = (0..n).filter(|&j| j != i).map(|j| cos(z1.row(i), z1.row(j)).exp()).sum();
            -(pos / (pos + neg)).ln()
        })
        .sum()
}

#[test]
fn criterion_5_loss_form_equivalence() {
    let mut r = rng(505);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.gen_range(2..=6);
        let d = r.gen_range(2..=8);
        let unit = |r: &mut Rng| {
            let mut m = Matrix::from_fn(n, d, |_, _| r.gen_range(-1.0..1.0));
            for i in 0..n {
                let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                m.row_mut(i).iter_mut().for_each(|v| *v /= norm);
            }
            m
        };
        let (z1, z2) = (unit(&mut r), unit(&mut r));
        worst = worst.max((info_nce_value(&z1, &z2).unwrap() - cosine_form(&z1, &z2)).abs());
    }
    report(
        5,
        "loss form equivalence",
        worst <= 1e-10,
        &format!("100 trials, max |squared-distance - cosine| = {worst:.2e} (<= 1e-10)"),
    );
}

#[test]
fn criterion_6_sampler_constraints_and_uniformity() {
    let sampler = ArchSampler::new(ArchSamplerConfig {
        n_transforms: 2,
        low: 0,
        high: 2,
        low2: 0,
        high2: 2,
        strategies: Strategies::ALL,
        fixed_k: 1,
    })
    .unwrap();
    let support = sampler.support();
    let mut counts: BTreeMap<(Vec<usize>, Vec<usize>), u64> =
        support.iter().map(|(a, b)| ((a.k.clone(), b.k.clone()), 0)).collect();
    let mut r = substream(606, Stream::Sampler);
    let draws = 10_000;
    let mut violations = 0;
    for _ in 0..draws {
        let (a, b) = sampler.sample(&mut r).unwrap();
        let ok = a.total() != b.total() && a.k.iter().zip(&b.k).all(|(x, y)| x != y);
        if !ok {
            violations += 1;
        }
        match counts.get_mut(&(a.k, b.k)) {
            Some(c) => *c += 1,
            None => violations += 1,
        }
    }
    let expected = draws as f64 / support.len() as f64;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let df = (support.len() - 1) as f64;
    let p = ChiSquared::new(df).unwrap().sf(chi2);
    report(
        6,
        "sampler constraints",
        violations == 0 && p > 0.01,
        &format!(
            "{draws} draws, {violations} violations, support {} pairs, chi2 = {chi2:.2} (df {df}), p = {p:.3} (> 0.01)",
            support.len()
        ),
    );
}

fn cora_config(strategies: Strategies, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::preset("cora").unwrap();
    cfg.strategies = strategies;
    cfg.seed = seed;
    cfg
}

/// Public-split probe accuracy of one training run, cached under the cargo
/// target directory keyed by the full config.
fn cora_accuracy(ds: &Dataset, cfg: &TrainConfig) -> f64 {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cora");
    fs::create_dir_all(&dir).unwrap();
    let key = format!("{}\nrow_normalize={ROW_NORMALIZE}", cfg.to_json());
    let path = dir.join(format!("{}-seed{}.json", cfg.strategies.label(), cfg.seed));
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            if v["key"] == key.as_str() {
                return v["accuracy"].as_f64().unwrap();
            }
        }
    }
    let out = train::<f32>(ds, cfg, no_observer).unwrap();
    let emb = embed(&out.model, ds, cfg).unwrap();
    let acc = linear_probe(&emb, &ds.labels, &ds.splits, &ProbeConfig::default())
        .unwrap()
        .test_accuracy;
    fs::write(&path, serde_json::json!({ "key": key, "accuracy": acc }).to_string()).unwrap();
    let mut out = std::io::stdout().lock();
    writeln!(out, "  trained {} seed {}: {acc:.1}", cfg.strategies.label(), cfg.seed).unwrap();
    acc
}

fn cora_mean(ds: &Dataset, strategies: Strategies) -> (f64, f64, Vec<f64>) {
    let acc: Vec<f64> = (0..5).map(|s| cora_accuracy(ds, &cora_config(strategies, s))).collect();
    let (m, s) = mean_std(&acc);
    (m, s, acc)
}

#[test]
#[ignore = "trains 10 Cora models (about 1.5 h on one core)"]
fn criterion_7_end_to_end_cora() {
    let ds = match dataset("cora") {
        Ok(ds) => ds,
        Err(e) => return report(7, "Cora end-to-end", false, &e),
    };
    let (full, full_sd, _) = cora_mean(&ds, Strategies::ALL);
    let (base, base_sd, _) = cora_mean(&ds, Strategies::NONE);
    let pass = full >= 81.8 && (base - 81.1).abs() <= 1.5 && full - base >= 1.0;
    report(
        7,
        "Cora end-to-end",
        pass,
        &format!(
            "MA-GCL {full:.2} +- {full_sd:.2} (>= 81.8), base {base:.2} +- {base_sd:.2} (81.1 +- 1.5), gain {:.2} (>= 1.0)",
            full - base
        ),
    );
}

#[test]
#[ignore = "trains 40 Cora models (about 6 h on one core)"]
fn criterion_8_ablation_direction() {
    let ds = match dataset("cora") {
        Ok(ds) => ds,
        Err(e) => return report(8, "ablation direction", false, &e),
    };
    let rows: Vec<(Strategies, f64)> = Strategies::all_combinations()
        .into_iter()
        .map(|st| (st, cora_mean(&ds, st).0))
        .collect();
    let table = rows.iter().map(|(st, m)| format!("{}={m:.2}", st.label())).collect::<Vec<_>>().join(" ");
    let base = rows[0].1;
    let singles_ok = rows
        .iter()
        .filter(|(st, _)| [st.asymmetric, st.random, st.shuffling].iter().filter(|&&b| b).count() == 1)
        .all(|(_, m)| *m >= base - 0.3);
    let best = rows.iter().map(|r| r.1).fold(f64::MIN, f64::max);
    let full = rows[7].1;
    report(
        8,
        "ablation direction",
        singles_ok && full >= best - 0.3,
        &format!("{table}; singles >= base - 0.3: {singles_ok}; full within 0.3 of best {best:.2}: {}", full >= best - 0.3),
    );
}

#[test]
#[ignore = "trains a CiteSeer model (about 15 min on one core)"]
fn criterion_9_citeseer_clustering() {
    let ds = match dataset("citeseer") {
        Ok(ds) => ds,
        Err(e) => return report(9, "CiteSeer NMI", false, &e),
    };
    let cfg = TrainConfig::preset("citeseer").unwrap();
    let out = train::<f32>(&ds, &cfg, no_observer).unwrap();
    let emb = embed(&out.model, &ds, &cfg).unwrap();
    let nmi = kmeans_nmi(&emb, &ds.labels, ds.num_classes, 20, cfg.seed).unwrap();
    report(
        9,
        "CiteSeer NMI",
        (nmi - 0.494).abs() <= 0.05,
        &format!("median NMI over 20 k-means runs {nmi:.4} (0.494 +- 0.05)"),
    );
}

fn cora_epoch_seconds(ds: &Dataset, fixed_k: usize) -> f64 {
    let mut cfg = cora_config(Strategies::NONE, 0);
    cfg.fixed_k = fixed_k;
    cfg.epochs = 4;
    let out = train::<f32>(ds, &cfg, no_observer).unwrap();
    let mut secs: Vec<f64> = out.log[1..].iter().map(|e| e.seconds).collect();
    secs.sort_by(f64::total_cmp);
    secs[secs.len() / 2]
}

fn cora_tape_bytes(ds: &Dataset, fixed_k: usize) -> usize {
    let cfg = cora_config(Strategies::NONE, 0);
    let features: Matrix<f32> = ds.features.cast();
    let model = Model::<f32>::init(
        ds.num_features(),
        cfg.hidden_size,
        cfg.proj_size,
        2,
        Activation::Relu,
        PRELU_INIT,
        &mut substream(0, Stream::Init),
    )
    .unwrap();
    let arch = EncoderArch::uniform(2, fixed_k);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (z1, z2) = forward_pair(
        ds,
        &features,
        &cfg.gda,
        cfg.pi,
        (&arch, &arch),
        &bound,
        (&mut substream(0, Stream::GdaView1), &mut substream(0, Stream::GdaView2)),
        &mut tape,
    )
    .unwrap();
    tape.info_nce(z1, z2).unwrap();
    tape.stored_bytes()
}

#[test]
fn criterion_10_depth_scaling() {
    let ds = match dataset("cora") {
        Ok(ds) => ds,
        Err(e) => return report(10, "depth scaling", false, &e),
    };
    let t2 = cora_epoch_seconds(&ds, 1);
    let t10 = cora_epoch_seconds(&ds, 5);
    let (m2, m10) = (cora_tape_bytes(&ds, 1), cora_tape_bytes(&ds, 5));
    let ratio = t10 / t2;
    report(
        10,
        "depth scaling",
        ratio < 5.0 && m2 == m10,
        &format!("epoch L=2 {t2:.3}s, L=10 {t10:.3}s, ratio {ratio:.2} (< 5); tape bytes {m2} vs {m10} (equal)"),
    );
}
