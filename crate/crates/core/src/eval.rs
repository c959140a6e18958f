//! Downstream protocols on frozen embeddings: a logistic-regression probe
//! and k-means clustering scored by NMI.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Splits;
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};
use crate::optim::Adam;
use crate::rng::{indexed_substream, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    pub num_runs: usize,
    /// Standardize each embedding column with train-split statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 0.0,
            max_steps: 1000,
            num_runs: 5,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeResult {
    /// Percent.
    pub test_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub per_seed: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
}

impl EvalReport {
    pub fn from_accuracies(per_seed: Vec<f64>) -> Self {
        let (accuracy_mean, accuracy_std) = mean_std(&per_seed);
        Self {
            accuracy_mean,
            accuracy_std,
            per_seed,
            nmi: None,
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn labelled(ids: &[usize], labels: &[Option<usize>]) -> Vec<(usize, usize)> {
    ids.iter()
        .filter_map(|&i| labels.get(i).copied().flatten().map(|y| (i, y)))
        .collect()
}

struct Softmax {
    w: Matrix<f64>,
    b: Matrix<f64>,
}

impl Softmax {
    fn logits(&self, x: &Matrix<f64>) -> Matrix<f64> {
        let mut z = x.matmul(&self.w).expect("probe shapes");
        for r in 0..z.rows() {
            for (v, &b) in z.row_mut(r).iter_mut().zip(self.b.as_slice()) {
                *v += b;
            }
        }
        z
    }

    fn accuracy(&self, x: &Matrix<f64>, y: &[usize]) -> f64 {
        let z = self.logits(x);
        let hits = y
            .iter()
            .enumerate()
            .filter(|&(r, &label)| argmax(z.row(r)) == label)
            .count();
        100.0 * hits as f64 / y.len() as f64
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Multinomial logistic regression on the train split, full-batch Adam,
/// zero initialization; the weights from the step with the best validation
/// accuracy (earliest on ties) are scored on test.
pub fn linear_probe<T: Real>(
    embeddings: &Matrix<T>,
    labels: &[Option<usize>],
    splits: &Splits,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if embeddings.rows() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} embedding rows but {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    let train = labelled(&splits.train, labels);
    let val = labelled(&splits.val, labels);
    let test = labelled(&splits.test, labels);
    for (name, s) in [("train", &train), ("val", &val), ("test", &test)] {
        if s.is_empty() {
            return Err(Error::InvalidArgument(format!("{name} split has no labelled nodes")));
        }
    }
    let classes: HashSet<usize> = train.iter().map(|&(_, y)| y).collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("train split contains a single class".into()));
    }
    let num_classes = labels.iter().flatten().max().map_or(0, |&m| m + 1);

    let emb: Matrix<f64> = embeddings.cast();
    let gather = |s: &[(usize, usize)]| {
        let ids: Vec<usize> = s.iter().map(|&(i, _)| i).collect();
        (emb.select_rows(&ids), s.iter().map(|&(_, y)| y).collect::<Vec<_>>())
    };
    let (mut xtr, ytr) = gather(&train);
    let (mut xva, yva) = gather(&val);
    let (mut xte, yte) = gather(&test);
    if cfg.standardize {
        standardize(&mut xtr, &mut [&mut xva, &mut xte]);
    }

    let d = emb.cols();
    let mut model = Softmax {
        w: Matrix::zeros(d, num_classes),
        b: Matrix::zeros(1, num_classes),
    };
    let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
    let n = ytr.len() as f64;
    let mut best = (model.accuracy(&xva, &yva), 0usize, model.w.clone(), model.b.clone());
    for step in 1..=cfg.max_steps {
        let mut g = model.logits(&xtr);
        for (r, &y) in ytr.iter().enumerate() {
            let row = g.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s * n;
            }
            row[y] -= 1.0 / n;
        }
        let gw = xtr.t_matmul(&g)?;
        let gb = Matrix::from_fn(1, num_classes, |_, c| (0..g.rows()).map(|r| g[(r, c)]).sum());
        adam.step(&mut [&mut model.w, &mut model.b], &[&gw, &gb])?;
        let acc = model.accuracy(&xva, &yva);
        if acc > best.0 {
            best = (acc, step, model.w.clone(), model.b.clone());
        }
    }
    let chosen = Softmax {
        w: best.2,
        b: best.3,
    };
    Ok(ProbeResult {
        test_accuracy: chosen.accuracy(&xte, &yte),
        best_val_accuracy: best.0,
        best_step: best.1,
    })
}

fn standardize(train: &mut Matrix<f64>, others: &mut [&mut Matrix<f64>]) {
    let n = train.rows() as f64;
    for c in 0..train.cols() {
        let mean = (0..train.rows()).map(|r| train[(r, c)]).sum::<f64>() / n;
        let var = (0..train.rows()).map(|r| (train[(r, c)] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for m in std::iter::once(&mut *train).chain(others.iter_mut().map(|m| &mut **m)) {
            for r in 0..m.rows() {
                m[(r, c)] = (m[(r, c)] - mean) / sd;
            }
        }
    }
}

/// 10% train, 10% validation (both rounded down), remainder test.
pub fn random_split(num_nodes: usize, rng: &mut Rng) -> Result<Splits> {
    if num_nodes < 10 {
        return Err(Error::InvalidArgument(format!(
            "random split needs at least 10 nodes, got {num_nodes}"
        )));
    }
    let mut perm: Vec<usize> = (0..num_nodes).collect();
    perm.shuffle(rng);
    let k = num_nodes / 10;
    let mut train = perm[..k].to_vec();
    let mut val = perm[k..2 * k].to_vec();
    let mut test = perm[2 * k..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, val, test })
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization
/// `2 I(a; b) / (H(a) + H(b))`; zero when both entropies vanish.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "nmi inputs differ in length");
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    let denom = ha + hb;
    if denom <= 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[&x] as f64 / n;
        let py = cb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    (2.0 * mi / denom).clamp(0.0, 1.0)
}

pub const KMEANS_MAX_ITERS: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from a k-means++ seeding. Returns cluster ids.
pub fn kmeans(x: &Matrix<f64>, k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = x.rows();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(x.row(rng.gen_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centers.push(x.row(next).to_vec());
        let c = centers.last().unwrap();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), c));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            let row = x.row(i);
            let mut best = (f64::INFINITY, 0);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(row, center);
                if d < best.0 {
                    best = (d, c);
                }
            }
            *a = best.1;
        }
        let mut sums = vec![vec![0.0; x.cols()]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    assign
}

/// Median NMI over `runs` independently seeded k-means runs, computed on
/// labelled nodes only.
pub fn kmeans_nmi<T: Real>(
    embeddings: &Matrix<T>,
    labels: &[Option<usize>],
    k: usize,
    runs: usize,
    seed: u64,
) -> Result<f64> {
    if embeddings.rows() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} embedding rows but {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    if k < 2 {
        return Err(Error::InvalidArgument("k-means needs k >= 2".into()));
    }
    if runs == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one run".into()));
    }
    let ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let truth: Vec<usize> = ids.iter().map(|&i| labels[i].unwrap()).collect();
    let x: Matrix<f64> = embeddings.cast::<f64>().select_rows(&ids);
    let distinct: HashSet<Vec<u64>> = (0..x.rows())
        .map(|r| x.row(r).iter().map(|v| v.to_bits()).collect())
        .collect();
    if k > distinct.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} distinct points",
            distinct.len()
        )));
    }
    let mut scores: Vec<f64> = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = indexed_substream(seed, Stream::KMeans, r);
            nmi(&kmeans(&x, k, &mut rng), &truth)
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    let mid = scores.len() / 2;
    Ok(if scores.len() % 2 == 1 {
        scores[mid]
    } else {
        0.5 * (scores[mid - 1] + scores[mid])
    })
}
