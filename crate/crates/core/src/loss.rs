//! Contrastive objective and alignment diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::matrix::{Matrix, Real, ShapeMismatch};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub mean_positive_distance: f64,
    pub num_anchors: usize,
}

/// Records the loss on `tape`. With `symmetric`, the mean of both anchor
/// directions is used instead.
pub fn info_nce<T: Real>(tape: &mut Tape<T>, z1: Var, z2: Var, symmetric: bool) -> Result<Var> {
    let l = tape.info_nce(z1, z2)?;
    if !symmetric {
        return Ok(l);
    }
    let r = tape.info_nce(z2, z1)?;
    let s = tape.add(l, r)?;
    tape.scale(s, T::from_f64_lossy(0.5))
}

/// Loss value without gradients.
pub fn info_nce_value<T: Real>(z1: &Matrix<T>, z2: &Matrix<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(z1.clone());
    let b = tape.constant(z2.clone());
    let l = tape.info_nce(a, b)?;
    Ok(tape.value(l)[(0, 0)].as_f64())
}

/// Mean Euclidean distance between paired rows.
pub fn alignment_metric<T: Real>(z1: &Matrix<T>, z2: &Matrix<T>) -> Result<f64> {
    if z1.shape() != z2.shape() {
        return Err(ShapeMismatch {
            op: "alignment_metric",
            lhs: z1.shape(),
            rhs: z2.shape(),
        }
        .into());
    }
    if z1.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..z1.rows())
        .map(|i| {
            z1.row(i)
                .iter()
                .zip(z2.row(i))
                .map(|(&a, &b)| (a - b).as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / z1.rows() as f64)
}

pub fn report<T: Real>(z1: &Matrix<T>, z2: &Matrix<T>, total: f64) -> Result<LossReport> {
    Ok(LossReport {
        total,
        mean_positive_distance: alignment_metric(z1, z2)?,
        num_anchors: z1.rows(),
    })
}
