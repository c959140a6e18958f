//! Dense spectral analysis of the graph filter: eigendecomposition, the
//! closed-form optimal component selection for asymmetric depths, its
//! brute-force check, and first-order perturbation of eigenvalue powers.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::GraphFilter;
use crate::matrix::Matrix;

pub const MAX_DENSE_NODES: usize = 20_000;
pub const WARN_DENSE_NODES: usize = 5_000;
pub const MAX_ORACLE_NODES: usize = 12;

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Column `k` pairs with `eigenvalues[k]`.
    pub eigenvectors: Matrix<f64>,
}

fn dense_filter(filter: &GraphFilter) -> Result<DMatrix<f64>> {
    let n = filter.num_nodes();
    if n > MAX_DENSE_NODES {
        return Err(Error::InvalidArgument(format!(
            "{n} nodes exceeds the dense eigensolver limit of {MAX_DENSE_NODES}"
        )));
    }
    if n > WARN_DENSE_NODES {
        log::warn!("dense eigendecomposition of {n} nodes will be slow");
    }
    let f = filter.to_dense();
    Ok(DMatrix::from_row_slice(n, n, f.as_slice()))
}

fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Eigenpairs of `F`, sorted by descending eigenvalue.
pub fn eig_sym(filter: &GraphFilter) -> Result<SpectralDecomposition> {
    let n = filter.num_nodes();
    let eig = SymmetricEigen::try_new(dense_filter(filter)?, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let order = descending_order(&values);
    let eigenvalues: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);

    let residual = max_residual(filter, &eigenvalues, &eigenvectors)?;
    let norm = filter.to_dense().frobenius_sq().sqrt();
    if residual > 1e-8 * norm.max(1.0) {
        return Err(Error::Numeric(format!(
            "eigendecomposition residual {residual:e} exceeds tolerance"
        )));
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// `max_k |F u_k - lambda_k u_k|`.
pub fn max_residual(filter: &GraphFilter, values: &[f64], vectors: &Matrix<f64>) -> Result<f64> {
    let fu = filter.spmm(vectors)?;
    let mut worst: f64 = 0.0;
    for (k, &lambda) in values.iter().enumerate() {
        let r: f64 = (0..vectors.rows())
            .map(|i| (fu[(i, k)] - lambda * vectors[(i, k)]).powi(2))
            .sum();
        worst = worst.max(r.sqrt());
    }
    Ok(worst)
}

/// Eigenvalues only, descending. Much cheaper than [`eig_sym`] on large graphs.
pub fn eigenvalues(filter: &GraphFilter) -> Result<Vec<f64>> {
    let values = dense_filter(filter)?.symmetric_eigenvalues();
    let mut v: Vec<f64> = values.iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    /// Ascending, 0-based positions in the descending spectrum.
    pub indices: Vec<usize>,
    /// `(lambda^L - lambda^L2)^2` for each selected index.
    pub scores: Vec<f64>,
}

pub fn selection_score(lambda: f64, l: u32, l2: u32) -> f64 {
    (lambda.powi(l as i32) - lambda.powi(l2 as i32)).powi(2)
}

/// The `d_out` eigen-components minimizing `(lambda^L - lambda^L2)^2`. Equal
/// scores prefer the larger eigenvalue (lower index).
pub fn theorem1_select(eigenvalues: &[f64], l: u32, l2: u32, d_out: usize) -> Result<SelectionResult> {
    if l == l2 {
        return Err(Error::InvalidArgument(
            "L equals L2: every score is zero and the selection is vacuous".into(),
        ));
    }
    if d_out > eigenvalues.len() {
        return Err(Error::InvalidArgument(format!(
            "d_out {d_out} exceeds the {} available components",
            eigenvalues.len()
        )));
    }
    let scores: Vec<f64> = eigenvalues.iter().map(|&x| selection_score(x, l, l2)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut indices: Vec<usize> = order[..d_out].to_vec();
    indices.sort_unstable();
    let scores = indices.iter().map(|&i| scores[i]).collect();
    Ok(SelectionResult { indices, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub subset: Vec<usize>,
    pub objective: f64,
}

fn dense_power(f: &DMatrix<f64>, k: u32) -> DMatrix<f64> {
    let mut out = DMatrix::identity(f.nrows(), f.ncols());
    for _ in 0..k {
        out = &out * f;
    }
    out
}

/// Objective `|(F^L - F^L2) U[S]|_F^2` for every column subset `S` of size
/// `d_out`, evaluated from matrix powers of `F` rather than eigenvalues.
pub struct BruteForceOracle {
    diff_u: DMatrix<f64>,
}

impl BruteForceOracle {
    pub fn new(filter: &GraphFilter, decomposition: &SpectralDecomposition, l: u32, l2: u32) -> Result<Self> {
        let n = filter.num_nodes();
        if n > MAX_ORACLE_NODES {
            return Err(Error::InvalidArgument(format!(
                "brute-force oracle supports at most {MAX_ORACLE_NODES} nodes, got {n}"
            )));
        }
        let f = dense_filter(filter)?;
        let diff = dense_power(&f, l) - dense_power(&f, l2);
        let u = DMatrix::from_row_slice(n, n, decomposition.eigenvectors.as_slice());
        Ok(Self { diff_u: diff * u })
    }

    pub fn objective(&self, subset: &[usize]) -> f64 {
        subset
            .iter()
            .map(|&k| self.diff_u.column(k).norm_squared())
            .sum()
    }

    /// Minimizing subset; the lexicographically smallest one on exact ties.
    pub fn best(&self, d_out: usize) -> Result<OracleResult> {
        let n = self.diff_u.ncols();
        if d_out > n {
            return Err(Error::InvalidArgument(format!("d_out {d_out} exceeds {n} columns")));
        }
        let mut best: Option<OracleResult> = None;
        let mut subset: Vec<usize> = (0..d_out).collect();
        loop {
            let obj = self.objective(&subset);
            if best.as_ref().map_or(true, |b| obj < b.objective) {
                best = Some(OracleResult {
                    subset: subset.clone(),
                    objective: obj,
                });
            }
            if !next_combination(&mut subset, n) {
                break;
            }
        }
        Ok(best.expect("at least one subset"))
    }
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Brute-force minimizer over all column subsets of `U`.
pub fn theorem1_bruteforce_oracle(filter: &GraphFilter, l: u32, l2: u32, d_out: usize) -> Result<OracleResult> {
    let dec = eig_sym(filter)?;
    BruteForceOracle::new(filter, &dec, l, l2)?.best(d_out)
}

/// `((lambda + eps)^L - lambda^L, L eps lambda^(L-1))`.
pub fn perturbation_sensitivity(lambda: f64, l: u32, eps: f64) -> (f64, f64) {
    let exact = (lambda + eps).powi(l as i32) - lambda.powi(l as i32);
    let first = if l == 0 {
        0.0
    } else {
        l as f64 * eps * lambda.powi(l as i32 - 1)
    };
    (exact, first)
}

#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    pub num_nodes: usize,
    pub pi: f64,
    pub lambda_1: f64,
    pub lambda_100: Option<f64>,
    pub lambda_min: f64,
    pub fraction_above_0_99: f64,
    pub histogram: Histogram,
}

pub const HISTOGRAM_BINS: usize = 20;

pub fn spectrum_report(filter: &GraphFilter) -> Result<SpectrumReport> {
    let values = eigenvalues(filter)?;
    Ok(report_from_eigenvalues(&values, filter.pi()))
}

pub fn report_from_eigenvalues(values: &[f64], pi: f64) -> SpectrumReport {
    let lo = 1.0 - 2.0 * pi;
    let hi = 1.0;
    let mut counts = vec![0; HISTOGRAM_BINS];
    for &v in values {
        let t = ((v - lo) / (hi - lo) * HISTOGRAM_BINS as f64).floor();
        let bin = t.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize;
        counts[bin] += 1;
    }
    let above = values.iter().filter(|&&v| v > 0.99).count();
    SpectrumReport {
        num_nodes: values.len(),
        pi,
        lambda_1: values.first().copied().unwrap_or(f64::NAN),
        lambda_100: values.get(99).copied(),
        lambda_min: values.last().copied().unwrap_or(f64::NAN),
        fraction_above_0_99: above as f64 / values.len().max(1) as f64,
        histogram: Histogram { lo, hi, counts },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_filter, SparseGraph};

    fn filter(n: usize, edges: &[(usize, usize)], pi: f64) -> GraphFilter {
        build_filter(&SparseGraph::from_undirected_edges(n, edges).unwrap(), pi).unwrap()
    }

    #[test]
    fn two_node_path_by_hand() {
        let d = eig_sym(&filter(2, &[(0, 1)], 0.5)).unwrap();
        assert!((d.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!((d.eigenvalues[1] - 0.5).abs() < 1e-12);
        let u = (d.eigenvectors[(0, 0)], d.eigenvectors[(1, 0)]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((u.0.abs() - s).abs() < 1e-12 && (u.0 - u.1).abs() < 1e-12);
    }

    #[test]
    fn selection_examples() {
        let r = theorem1_select(&[1.0, 0.9, 0.5, 0.1], 2, 4, 2).unwrap();
        assert_eq!(r.indices, vec![0, 3]);
        assert_eq!(r.scores[0], 0.0);
        assert!((r.scores[1] - (0.01f64 - 0.0001).powi(2)).abs() < 1e-18);

        let tie = theorem1_select(&[0.7; 5], 1, 2, 3).unwrap();
        assert_eq!(tie.indices, vec![0, 1, 2]);
        assert!(theorem1_select(&[0.5], 2, 2, 1).is_err());
        assert!(theorem1_select(&[0.5], 1, 2, 2).is_err());
    }

    #[test]
    fn perturbation_examples() {
        let (e, f) = perturbation_sensitivity(0.5, 2, 0.01);
        assert!((e - 0.0101).abs() < 1e-15 && (f - 0.01).abs() < 1e-15);
        assert_eq!(perturbation_sensitivity(0.3, 4, 0.0), (0.0, 0.0));
    }

    #[test]
    fn complete_graph_spectrum() {
        let n = 6;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
        let v = eigenvalues(&filter(n, &edges, 0.5)).unwrap();
        // With self-loops A = J, so D^-1/2 A D^-1/2 = J/n with spectrum {1, 0}.
        assert!((v[0] - 1.0).abs() < 1e-12);
        for &x in &v[1..] {
            assert!((x - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn edgeless_graph_has_zero_objective_everywhere() {
        let f = filter(4, &[], 0.5);
        let r = theorem1_bruteforce_oracle(&f, 1, 3, 2).unwrap();
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.subset, vec![0, 1]);
    }

    #[test]
    fn report_on_single_node() {
        let r = spectrum_report(&filter(1, &[], 0.5)).unwrap();
        assert_eq!(r.lambda_1, 1.0);
        assert_eq!(r.lambda_100, None);
        assert_eq!(r.histogram.counts.iter().sum::<usize>(), 1);
    }

    #[test]
    fn combinations_enumerate_all() {
        let mut c = vec![0, 1];
        let mut count = 1;
        while next_combination(&mut c, 5) {
            count += 1;
        }
        assert_eq!(count, 10);
    }
}
