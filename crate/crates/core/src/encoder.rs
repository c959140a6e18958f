//! View encoder `h_N . g^K_N . ... . h_1 . g^K_1` with tied weights, and
//! the two-layer projector used only during contrastive training.

use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::augment::{drop_edges, mask_features, EncoderArch, GdaConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{build_filter, GraphFilter, SparseGraph};
use crate::matrix::{Matrix, Real};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Prelu,
}

/// Encoder and projector weights. Both views read the same storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub activation: Activation,
    /// `W_1 .. W_N`, no biases.
    pub w: Vec<Matrix<T>>,
    pub p1: Matrix<T>,
    pub p2: Matrix<T>,
    /// One `1x1` slope per transformation block when `activation` is PReLU.
    pub slopes: Vec<Matrix<T>>,
}

fn glorot<T: Real>(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(dist.sample(rng)))
}

impl<T: Real> Model<T> {
    /// Glorot-uniform weights drawn from `rng` in order `W_1..W_N, p1, p2`.
    pub fn init(
        in_dim: usize,
        hidden: usize,
        proj: usize,
        n_transforms: usize,
        activation: Activation,
        prelu_init: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_transforms == 0 || in_dim == 0 || hidden == 0 || proj == 0 {
            return Err(Error::Config(
                "dimensions and n_transforms must be positive".into(),
            ));
        }
        let mut w = Vec::with_capacity(n_transforms);
        for i in 0..n_transforms {
            let fan_in = if i == 0 { in_dim } else { hidden };
            w.push(glorot(fan_in, hidden, rng));
        }
        let p1 = glorot(hidden, proj, rng);
        let p2 = glorot(proj, proj, rng);
        let slopes = match activation {
            Activation::Prelu => (0..n_transforms)
                .map(|_| Matrix::filled(1, 1, T::from_f64_lossy(prelu_init)))
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            activation,
            w,
            p1,
            p2,
            slopes,
        })
    }

    pub fn n_transforms(&self) -> usize {
        self.w.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.w.last().map_or(0, |w| w.cols())
    }

    /// Parameters in checkpoint order: `W_1..W_N, p1, p2, slopes`.
    pub fn params(&self) -> Vec<&Matrix<T>> {
        let mut out: Vec<&Matrix<T>> = self.w.iter().collect();
        out.push(&self.p1);
        out.push(&self.p2);
        out.extend(self.slopes.iter());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out: Vec<&mut Matrix<T>> = self.w.iter_mut().collect();
        out.push(&mut self.p1);
        out.push(&mut self.p2);
        out.extend(self.slopes.iter_mut());
        out
    }

    /// Replaces every parameter, checking shapes against the current ones.
    pub fn set_params(&mut self, values: Vec<Matrix<T>>) -> Result<()> {
        let current = self.params();
        if values.len() != current.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter matrices, got {}",
                current.len(),
                values.len()
            )));
        }
        for (i, (have, new)) in current.iter().zip(&values).enumerate() {
            if have.shape() != new.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {i}: expected shape {}x{}, found {}x{}",
                    have.rows(),
                    have.cols(),
                    new.rows(),
                    new.cols()
                )));
            }
        }
        for (slot, v) in self.params_mut().into_iter().zip(values) {
            *slot = v;
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        let vars: Vec<Var> = self.params().into_iter().map(|p| tape.param(p.clone())).collect();
        BoundModel::from_vars(self.activation, self.n_transforms(), &vars)
    }

    /// Frozen embeddings for downstream tasks: the encoder under `arch`,
    /// without the projector.
    pub fn embed(&self, filter: &Arc<GraphFilter>, x: &Matrix<T>, arch: &EncoderArch) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params().into_iter().map(|p| tape.constant(p.clone())).collect();
        let bound = BoundModel::from_vars(self.activation, self.n_transforms(), &vars);
        let xv = tape.constant(x.clone());
        let z = bound.encode(&mut tape, filter, xv, arch)?;
        Ok(tape.value(z).clone())
    }
}

/// Tape handles for a [`Model`]'s parameters.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub activation: Activation,
    pub w: Vec<Var>,
    pub p1: Var,
    pub p2: Var,
    pub slopes: Vec<Var>,
}

impl BoundModel {
    /// `vars` in checkpoint order, as produced by [`Model::params`].
    pub fn from_vars(activation: Activation, n_transforms: usize, vars: &[Var]) -> Self {
        Self {
            activation,
            w: vars[..n_transforms].to_vec(),
            p1: vars[n_transforms],
            p2: vars[n_transforms + 1],
            slopes: vars[n_transforms + 2..].to_vec(),
        }
    }

    /// All handles in checkpoint order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.w.clone();
        out.push(self.p1);
        out.push(self.p2);
        out.extend(&self.slopes);
        out
    }

    fn activate<T: Real>(&self, tape: &mut Tape<T>, z: Var, block: usize) -> Result<Var> {
        match self.activation {
            Activation::Identity => Ok(z),
            Activation::Relu => tape.relu(z),
            Activation::Prelu => tape.prelu(z, self.slopes[block]),
        }
    }

    /// Applies `K_i` propagations then `h_i` for each block. When a block
    /// shrinks the width, the weight is applied first; `F^K (Z W)` and
    /// `(F^K Z) W` are the same matrix.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        filter: &Arc<GraphFilter>,
        x: Var,
        arch: &EncoderArch,
    ) -> Result<Var> {
        if arch.len() != self.w.len() {
            return Err(Error::InvalidArgument(format!(
                "architecture has {} blocks but the encoder has {}",
                arch.len(),
                self.w.len()
            )));
        }
        let mut z = x;
        for (i, (&k, &w)) in arch.k.iter().zip(&self.w).enumerate() {
            let shrinks = tape.value(w).rows() > tape.value(w).cols();
            let lin = if k > 0 && shrinks {
                let zw = tape.matmul(z, w)?;
                tape.propagate(filter, zw, k)?
            } else {
                let p = if k > 0 { tape.propagate(filter, z, k)? } else { z };
                tape.matmul(p, w)?
            };
            z = self.activate(tape, lin, i)?;
        }
        Ok(z)
    }

    /// `normalize(p2(relu(p1(z))))`.
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let h = tape.matmul(z, self.p1)?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, self.p2)?;
        tape.l2_normalize_rows(h)
    }
}

/// One augmented view: its graph filter and masked features.
#[derive(Debug, Clone)]
pub struct ViewInput<T> {
    pub filter: Arc<GraphFilter>,
    pub features: Matrix<T>,
}

impl<T: Real> ViewInput<T> {
    pub fn augment(
        graph: &SparseGraph,
        features: &Matrix<T>,
        edge_rate: f64,
        feature_rate: f64,
        pi: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let g = drop_edges(graph, edge_rate, rng)?;
        let filter = Arc::new(build_filter(&g, pi)?);
        let features = mask_features(features, feature_rate, rng)?;
        Ok(Self { filter, features })
    }
}

/// Encodes and projects one view; returns `(encoder output, projection)`.
pub fn encode_view<T: Real>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    view: &ViewInput<T>,
    arch: &EncoderArch,
) -> Result<(Var, Var)> {
    let x = tape.constant(view.features.clone());
    let h = model.encode(tape, &view.filter, x, arch)?;
    let z = model.project(tape, h)?;
    Ok((h, z))
}

/// Both augmented views through the shared encoder and projector.
#[allow(clippy::too_many_arguments)]
pub fn forward_pair<T: Real>(
    dataset: &Dataset,
    features: &Matrix<T>,
    gda: &GdaConfig,
    pi: f64,
    archs: (&EncoderArch, &EncoderArch),
    model: &BoundModel,
    rngs: (&mut Rng, &mut Rng),
    tape: &mut Tape<T>,
) -> Result<(Var, Var)> {
    let v1 = ViewInput::augment(&dataset.graph, features, gda.edr1, gda.fdr1, pi, rngs.0)?;
    let v2 = ViewInput::augment(&dataset.graph, features, gda.edr2, gda.fdr2, pi, rngs.1)?;
    let (_, z1) = encode_view(tape, model, &v1, archs.0)?;
    let (_, z2) = encode_view(tape, model, &v2, archs.1)?;
    Ok((z1, z2))
}
