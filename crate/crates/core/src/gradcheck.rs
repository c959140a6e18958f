//! Central finite-difference verification of tape gradients.

use std::sync::Arc;

use rand::Rng as _;
use serde::Serialize;

use crate::augment::{ArchSampler, ArchSamplerConfig, Strategies};
use crate::encoder::{encode_view, Activation, Model, ViewInput, PRELU_INIT};
use crate::error::{Error, Result};
use crate::graph::{build_filter, SparseGraph};
use crate::loss;
use crate::matrix::Matrix;
use crate::rng::{substream, Rng, Stream};
use crate::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Draws tried before a degenerate instance is reported.
pub const MAX_INIT_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose perturbation crossed a rectifier kink.
    pub excluded: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_error: f64,
    /// A rectifier input was exactly zero at the base point.
    pub nondifferentiable_point: bool,
    pub tol: f64,
    pub passed: bool,
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences with step `step`. Entries whose perturbation changes any
/// rectifier sign are excluded. The error of a parameter is
/// `max|a - b| / max(|a|_inf, |b|_inf, 1e4 noise)` over its checked entries.
/// `noise = 4 eps max(1, |f|) / step` is the rounding residue of the
/// difference quotient; without the floor a flat direction (dead
/// rectifiers, zero rows) reads as a relative error near 1.
pub fn grad_check<F>(f: F, params: &[Matrix<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Matrix<f64>]| -> Result<(f64, Vec<i8>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out)[(0, 0)], tape.kink_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let noise = 4.0 * f64::EPSILON * tape.value(out)[(0, 0)].abs().max(1.0) / step;
    let base_sig = tape.kink_signature();
    let nondifferentiable_point = base_sig.contains(&0);
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Matrix<f64>> = vars.iter().map(|v| grads.take(*v).expect("param grad")).collect();

    let mut work: Vec<Matrix<f64>> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, a) in analytic.iter().enumerate() {
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        let (mut checked, mut excluded) = (0, 0);
        for e in 0..a.len() {
            let orig = work[pi].as_slice()[e];
            work[pi].as_mut_slice()[e] = orig + step;
            let (fp, sp) = eval(&work)?;
            work[pi].as_mut_slice()[e] = orig - step;
            let (fm, sm) = eval(&work)?;
            work[pi].as_mut_slice()[e] = orig;
            if sp != base_sig || sm != base_sig {
                excluded += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * step);
            let an = a.as_slice()[e];
            diff = diff.max((an - fd).abs());
            scale = scale.max(an.abs()).max(fd.abs());
            checked += 1;
        }
        reports.push(ParamReport {
            index: pi,
            max_rel_error: if checked == 0 { 0.0 } else { diff / scale.max(1e4 * noise) },
            checked,
            excluded,
        });
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: reports,
        max_rel_error,
        nondifferentiable_point,
        tol,
        passed: max_rel_error < tol,
    })
}

/// Shape of a random full-model instance.
#[derive(Debug, Clone, Copy)]
pub struct InstanceSpec {
    pub nodes: usize,
    pub features: usize,
    pub hidden: usize,
    pub proj: usize,
    pub activation: Activation,
    pub edge_prob: f64,
    pub drop_rate: f64,
}

/// Random graph on `n` nodes with independent edges of probability `p`.
pub fn random_graph(n: usize, p: f64, rng: &mut Rng) -> SparseGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    SparseGraph::from_undirected_edges(n, &edges).expect("in-range edges")
}

/// Full contrastive loss (two augmented views, shared encoder, projector,
/// InfoNCE) on a random instance, checked against finite differences.
pub fn check_full_model(spec: InstanceSpec, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = substream(seed, Stream::Init);
    let graph = random_graph(spec.nodes, spec.edge_prob, &mut rng);
    let x = Matrix::from_fn(spec.nodes, spec.features, |_, _| rng.gen_range(-1.0..1.0));
    let sampler = ArchSampler::new(ArchSamplerConfig {
        n_transforms: 2,
        low: 0,
        high: 2,
        low2: 0,
        high2: 2,
        strategies: Strategies::ALL,
        fixed_k: 1,
    })?;
    let (a1, a2) = sampler.sample(&mut substream(seed, Stream::Sampler))?;
    let (mut rng1, mut rng2) = (substream(seed, Stream::GdaView1), substream(seed, Stream::GdaView2));
    let objective = |v1: &ViewInput<f64>, v2: &ViewInput<f64>, tape: &mut Tape<f64>, vars: &[Var]| {
        let bound = crate::encoder::BoundModel::from_vars(spec.activation, 2, vars);
        let (_, z1) = encode_view(tape, &bound, v1, &a1)?;
        let (_, z2) = encode_view(tape, &bound, v2, &a2)?;
        loss::info_nce(tape, z1, z2, false)
    };

    // Tiny instances can encode to all-zero rows (every rectifier dead, or
    // every feature column masked), leaving the loss undefined. Such draws
    // are replaced by fresh views and weights.
    let mut attempt = 0;
    let (v1, v2, params) = loop {
        let v1 = ViewInput::augment(&graph, &x, spec.drop_rate, spec.drop_rate, 0.5, &mut rng1)?;
        let v2 = ViewInput::augment(&graph, &x, spec.drop_rate, spec.drop_rate, 0.5, &mut rng2)?;
        let mut model = Model::<f64>::init(spec.features, spec.hidden, spec.proj, 2, spec.activation, PRELU_INIT, &mut rng)?;
        for s in &mut model.slopes {
            s[(0, 0)] = rng.gen_range(0.05..0.5);
        }
        let params: Vec<Matrix<f64>> = model.params().into_iter().cloned().collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        match objective(&v1, &v2, &mut tape, &vars) {
            Err(Error::Numeric(_)) if attempt + 1 < MAX_INIT_ATTEMPTS => attempt += 1,
            Err(e) => return Err(e),
            Ok(_) => break (v1, v2, params),
        }
    };
    grad_check(|tape, vars| objective(&v1, &v2, tape, vars), &params, DEFAULT_STEP, tol)
}

/// Linear functional `sum((F X W)^2)` used as the simplest sanity check.
pub fn check_propagated_quadratic(n: usize, d: usize, k: usize, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = substream(seed, Stream::Init);
    let filter = Arc::new(build_filter(&random_graph(n, 0.5, &mut rng), 0.5)?);
    let x = Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
    let w = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    grad_check(
        |tape, vars| {
            let xv = tape.constant(x.clone());
            let p = tape.propagate(&filter, xv, k)?;
            let z = tape.matmul(p, vars[0])?;
            tape.sum_squares(z)
        },
        &[w],
        DEFAULT_STEP,
        tol,
    )
}
