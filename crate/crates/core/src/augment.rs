//! Graph data augmentation and the architecture sampler behind the
//! asymmetric (A), random (R) and shuffling (S) strategies.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::matrix::{Matrix, Real};
use crate::rng::Rng;

/// Rejection sampling gives up after this many draws.
pub const MAX_REJECTIONS: usize = 10_000;

/// Largest lattice the satisfiability precheck will enumerate.
const MAX_LATTICE: usize = 10_000_000;

/// Edge-drop and feature-mask rates for the two views.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdaConfig {
    pub edr1: f64,
    pub edr2: f64,
    pub fdr1: f64,
    pub fdr2: f64,
}

impl GdaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("edr1", self.edr1),
            ("edr2", self.edr2),
            ("fdr1", self.fdr1),
            ("fdr2", self.fdr2),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("gda.{name} must lie in [0, 1), got {r}")));
            }
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Keeps each undirected edge with probability `1 - rate`. Both directions
/// of an edge share a single coin flip.
pub fn drop_edges(graph: &SparseGraph, rate: f64, rng: &mut Rng) -> Result<SparseGraph> {
    check_rate(rate)?;
    if !graph.is_symmetric() || graph.has_self_loops() {
        return Err(Error::InvalidArgument(
            "drop_edges requires a symmetric, loop-free graph".into(),
        ));
    }
    if rate == 0.0 {
        return Ok(graph.clone());
    }
    let kept: Vec<(usize, usize)> = graph
        .undirected_edges()
        .into_iter()
        .filter(|_| rng.gen::<f64>() >= rate)
        .collect();
    SparseGraph::from_undirected_edges(graph.num_nodes(), &kept)
}

/// One Bernoulli(`1 - rate`) keep flag per feature column.
pub fn feature_mask(dim: usize, rate: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    check_rate(rate)?;
    Ok((0..dim).map(|_| rng.gen::<f64>() >= rate).collect())
}

/// Zeroes a random set of columns, the same set for every row.
pub fn mask_features<T: Real>(x: &Matrix<T>, rate: f64, rng: &mut Rng) -> Result<Matrix<T>> {
    let keep = feature_mask(x.cols(), rate, rng)?;
    let mut out = x.clone();
    if keep.iter().all(|&k| k) {
        return Ok(out);
    }
    for r in 0..out.rows() {
        for (v, &k) in out.row_mut(r).iter_mut().zip(&keep) {
            if !k {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

/// Propagation counts `(K_1, ..., K_N)` of one view encoder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EncoderArch {
    pub k: Vec<usize>,
}

impl EncoderArch {
    pub fn new(k: Vec<usize>) -> Self {
        Self { k }
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        Self { k: vec![k; n] }
    }

    /// Total propagation depth `L`.
    pub fn total(&self) -> usize {
        self.k.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }
}

/// Architecture used for downstream embeddings.
pub fn fixed_eval_arch(n: usize, k_eval: usize) -> EncoderArch {
    EncoderArch::uniform(n, k_eval)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategies {
    pub asymmetric: bool,
    pub random: bool,
    pub shuffling: bool,
}

impl Strategies {
    pub const ALL: Strategies = Strategies {
        asymmetric: true,
        random: true,
        shuffling: true,
    };
    pub const NONE: Strategies = Strategies {
        asymmetric: false,
        random: false,
        shuffling: false,
    };

    /// The eight combinations, base model first and full model last.
    pub fn all_combinations() -> Vec<Strategies> {
        (0..8u8)
            .map(|m| Strategies {
                asymmetric: m & 1 != 0,
                random: m & 2 != 0,
                shuffling: m & 4 != 0,
            })
            .collect()
    }

    /// Short label such as `A+R`, or `base`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.asymmetric, "A"),
            (self.random, "R"),
            (self.shuffling, "S"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, s)| *s)
        .collect();
        if parts.is_empty() {
            "base".to_string()
        } else {
            parts.join("+")
        }
    }

    /// Parses labels like `A+S`, `ARS`, `base` or `none`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("base") || s.eq_ignore_ascii_case("none") {
            return Some(Self::NONE);
        }
        let mut out = Self::NONE;
        for c in s.chars().filter(|c| *c != '+') {
            match c.to_ascii_uppercase() {
                'A' => out.asymmetric = true,
                'R' => out.random = true,
                'S' => out.shuffling = true,
                _ => return None,
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSamplerConfig {
    pub n_transforms: usize,
    pub low: usize,
    pub high: usize,
    pub low2: usize,
    pub high2: usize,
    pub strategies: Strategies,
    pub fixed_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Constraint {
    /// `sum k != sum k'`, and `k_i == k'_i` for `i < N` when `prefix_equal`.
    Asymmetric { prefix_equal: bool },
    /// `sum k == sum k'` and `k_i != k'_i` for all `i`.
    Shuffled,
    /// `sum k != sum k'` and `k_i != k'_i` for all `i`.
    Both,
}

impl Constraint {
    fn holds(self, a: &[usize], b: &[usize]) -> bool {
        let (sa, sb): (usize, usize) = (a.iter().sum(), b.iter().sum());
        let all_differ = a.iter().zip(b).all(|(x, y)| x != y);
        match self {
            Constraint::Asymmetric { prefix_equal } => {
                sa != sb && (!prefix_equal || a[..a.len() - 1] == b[..b.len() - 1])
            }
            Constraint::Shuffled => sa == sb && all_differ,
            Constraint::Both => sa != sb && all_differ,
        }
    }
}

#[derive(Debug, Clone)]
enum Mode {
    Fixed(EncoderArch, EncoderArch),
    SharedUniform,
    Rejection(Constraint),
}

/// Draws the per-epoch architecture pair for the configured strategies.
#[derive(Debug, Clone)]
pub struct ArchSampler {
    cfg: ArchSamplerConfig,
    mode: Mode,
}

impl ArchSampler {
    /// Validates bounds and checks that the strategy constraints can be met.
    pub fn new(cfg: ArchSamplerConfig) -> Result<Self> {
        let n = cfg.n_transforms;
        if n == 0 {
            return Err(Error::Config("n_transforms must be at least 1".into()));
        }
        if cfg.low > cfg.high || cfg.low2 > cfg.high2 {
            return Err(Error::Config(format!(
                "invalid K ranges [{}, {}] / [{}, {}]",
                cfg.low, cfg.high, cfg.low2, cfg.high2
            )));
        }
        let st = cfg.strategies;
        let mode = match (st.asymmetric, st.random, st.shuffling) {
            (false, false, false) => {
                let a = EncoderArch::uniform(n, cfg.fixed_k);
                Mode::Fixed(a.clone(), a)
            }
            (false, true, false) => Mode::SharedUniform,
            (true, false, false) => {
                let c = Constraint::Asymmetric { prefix_equal: true };
                let (a, b) = smallest_pair(&cfg, |a, b| c.holds(a, b))?;
                Mode::Fixed(a, b)
            }
            (false, false, true) => {
                let total = cfg.fixed_k * n;
                let (a, b) = smallest_pair(&cfg, |a, b| {
                    a.iter().sum::<usize>() == total && Constraint::Shuffled.holds(a, b)
                })?;
                Mode::Fixed(a, b)
            }
            (true, false, true) => {
                let (a, b) = smallest_pair(&cfg, |a, b| Constraint::Both.holds(a, b))?;
                Mode::Fixed(a, b)
            }
            (true, true, false) => {
                Mode::Rejection(Constraint::Asymmetric { prefix_equal: false })
            }
            (false, true, true) => Mode::Rejection(Constraint::Shuffled),
            (true, true, true) => Mode::Rejection(Constraint::Both),
        };
        if let Mode::Rejection(c) = mode {
            smallest_pair(&cfg, |a, b| c.holds(a, b))?;
        }
        Ok(Self { cfg, mode })
    }

    pub fn config(&self) -> &ArchSamplerConfig {
        &self.cfg
    }

    /// Whether `sample` consumes randomness.
    pub fn is_random(&self) -> bool {
        !matches!(self.mode, Mode::Fixed(..))
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<(EncoderArch, EncoderArch)> {
        let n = self.cfg.n_transforms;
        match &self.mode {
            Mode::Fixed(a, b) => Ok((a.clone(), b.clone())),
            Mode::SharedUniform => {
                let k = rng.gen_range(self.cfg.low..=self.cfg.high);
                let a = EncoderArch::uniform(n, k);
                Ok((a.clone(), a))
            }
            Mode::Rejection(c) => {
                for _ in 0..MAX_REJECTIONS {
                    let a: Vec<usize> = (0..n)
                        .map(|_| rng.gen_range(self.cfg.low..=self.cfg.high))
                        .collect();
                    let b: Vec<usize> = (0..n)
                        .map(|_| rng.gen_range(self.cfg.low2..=self.cfg.high2))
                        .collect();
                    if c.holds(&a, &b) {
                        return Ok((EncoderArch::new(a), EncoderArch::new(b)));
                    }
                }
                Err(Error::Internal(format!(
                    "architecture rejection sampling exceeded {MAX_REJECTIONS} attempts"
                )))
            }
        }
    }

    /// Every pair `sample` can emit, in lexicographic order.
    pub fn support(&self) -> Vec<(EncoderArch, EncoderArch)> {
        match &self.mode {
            Mode::Fixed(a, b) => vec![(a.clone(), b.clone())],
            Mode::SharedUniform => (self.cfg.low..=self.cfg.high)
                .map(|k| {
                    let a = EncoderArch::uniform(self.cfg.n_transforms, k);
                    (a.clone(), a)
                })
                .collect(),
            Mode::Rejection(c) => {
                let mut out = Vec::new();
                for_each_pair(&self.cfg, |a, b| {
                    if c.holds(a, b) {
                        out.push((EncoderArch::new(a.to_vec()), EncoderArch::new(b.to_vec())));
                    }
                    false
                });
                out
            }
        }
    }
}

/// Visits `[low,high]^N x [low2,high2]^N` in lexicographic order until `f`
/// returns true.
fn for_each_pair(cfg: &ArchSamplerConfig, mut f: impl FnMut(&[usize], &[usize]) -> bool) {
    let n = cfg.n_transforms;
    let mut a = vec![cfg.low; n];
    loop {
        let mut b = vec![cfg.low2; n];
        loop {
            if f(&a, &b) {
                return;
            }
            if !odometer(&mut b, cfg.low2, cfg.high2) {
                break;
            }
        }
        if !odometer(&mut a, cfg.low, cfg.high) {
            return;
        }
    }
}

fn odometer(v: &mut [usize], low: usize, high: usize) -> bool {
    for i in (0..v.len()).rev() {
        if v[i] < high {
            v[i] += 1;
            return true;
        }
        v[i] = low;
    }
    false
}

fn smallest_pair(
    cfg: &ArchSamplerConfig,
    pred: impl Fn(&[usize], &[usize]) -> bool,
) -> Result<(EncoderArch, EncoderArch)> {
    let side = |lo: usize, hi: usize| (hi - lo + 1).checked_pow(cfg.n_transforms as u32);
    let size = side(cfg.low, cfg.high)
        .zip(side(cfg.low2, cfg.high2))
        .and_then(|(x, y)| x.checked_mul(y));
    if size.map_or(true, |s| s > MAX_LATTICE) {
        return Err(Error::Config(
            "architecture lattice too large to check constraints".into(),
        ));
    }
    let mut found = None;
    for_each_pair(cfg, |a, b| {
        if pred(a, b) {
            found = Some((EncoderArch::new(a.to_vec()), EncoderArch::new(b.to_vec())));
            true
        } else {
            false
        }
    });
    found.ok_or_else(|| {
        Error::Config(format!(
            "unsatisfiable architecture constraints for strategies {} with K range [{}, {}], K' range [{}, {}], fixed_k {}",
            cfg.strategies.label(),
            cfg.low,
            cfg.high,
            cfg.low2,
            cfg.high2,
            cfg.fixed_k
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn cfg(st: Strategies) -> ArchSamplerConfig {
        ArchSamplerConfig {
            n_transforms: 2,
            low: 0,
            high: 4,
            low2: 1,
            high2: 4,
            strategies: st,
            fixed_k: 2,
        }
    }

    fn st(label: &str) -> Strategies {
        Strategies::parse(label).unwrap()
    }

    fn arch(k: &[usize]) -> EncoderArch {
        EncoderArch::new(k.to_vec())
    }

    #[test]
    fn full_mode_constraint_examples() {
        let c = Constraint::Both;
        assert!(c.holds(&[1, 2], &[0, 1]));
        assert!(!c.holds(&[1, 1], &[2, 0]));
    }

    #[test]
    fn fixed_pairs_are_lexicographically_smallest() {
        let rng = &mut substream(0, Stream::Sampler);
        let base = ArchSampler::new(cfg(st("base"))).unwrap().sample(rng).unwrap();
        assert_eq!(base, (arch(&[2, 2]), arch(&[2, 2])));
        let a = ArchSampler::new(cfg(st("A"))).unwrap().sample(rng).unwrap();
        assert_eq!(a, (arch(&[1, 0]), arch(&[1, 1])));
        let s = ArchSampler::new(cfg(st("S"))).unwrap().sample(rng).unwrap();
        assert_eq!(s, (arch(&[0, 4]), arch(&[1, 3])));
        let as_ = ArchSampler::new(cfg(st("A+S"))).unwrap().sample(rng).unwrap();
        assert_eq!(as_, (arch(&[0, 0]), arch(&[1, 1])));
    }

    #[test]
    fn random_only_shares_one_uniform_arch() {
        let sampler = ArchSampler::new(cfg(st("R"))).unwrap();
        let rng = &mut substream(3, Stream::Sampler);
        for _ in 0..100 {
            let (a, b) = sampler.sample(rng).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.k[0], a.k[1]);
            assert!(a.k[0] <= 4);
        }
    }

    #[test]
    fn unsatisfiable_is_a_config_error() {
        let mut c = cfg(Strategies::ALL);
        (c.low, c.high, c.low2, c.high2) = (2, 2, 2, 2);
        let err = ArchSampler::new(c.clone()).unwrap_err();
        assert!(err.to_string().contains("unsatisfiable architecture constraints"));
        c.strategies = st("A");
        assert!(ArchSampler::new(c).is_err());
    }

    #[test]
    fn strategy_labels_round_trip() {
        for s in Strategies::all_combinations() {
            assert_eq!(Strategies::parse(&s.label()), Some(s));
        }
        assert_eq!(Strategies::parse("ARS"), Some(Strategies::ALL));
        assert_eq!(Strategies::parse("X"), None);
    }

    #[test]
    fn drop_edges_rate_zero_is_identity_and_keeps_symmetry() {
        let g = SparseGraph::from_undirected_edges(5, &[(0, 1), (1, 2), (3, 4), (0, 4)]).unwrap();
        let rng = &mut substream(1, Stream::GdaView1);
        assert_eq!(drop_edges(&g, 0.0, rng).unwrap(), g);
        let d = drop_edges(&g, 0.5, rng).unwrap();
        assert!(d.is_symmetric() && !d.has_self_loops());
        assert!(drop_edges(&g, 1.0, rng).is_err());
    }

    #[test]
    fn drop_edges_is_reproducible() {
        let g = SparseGraph::from_undirected_edges(2, &[(0, 1)]).unwrap();
        let a = drop_edges(&g, 0.99, &mut substream(9, Stream::GdaView1)).unwrap();
        let b = drop_edges(&g, 0.99, &mut substream(9, Stream::GdaView1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_features_is_columnwise() {
        let x = Matrix::from_fn(6, 40, |r, c| (r * 40 + c + 1) as f64);
        let y = mask_features(&x, 0.5, &mut substream(2, Stream::GdaView1)).unwrap();
        for c in 0..40 {
            let zeroed: Vec<bool> = (0..6).map(|r| y[(r, c)] == 0.0).collect();
            assert!(zeroed.iter().all(|&z| z == zeroed[0]));
        }
        assert_eq!(mask_features(&x, 0.0, &mut substream(2, Stream::GdaView1)).unwrap(), x);
    }
}
