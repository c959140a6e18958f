//! Adam with bias correction and coupled L2 weight decay.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub weight_decay: f64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` belongs to `params[i]`; moments are created
    /// on the first call and must keep their shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[&Matrix<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::InvalidArgument(format!(
                    "gradient {i} has shape {}x{}, parameter is {}x{}",
                    g.rows(),
                    g.cols(),
                    p.rows(),
                    p.cols()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::InvalidArgument("parameter set changed between steps".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = |x: f64| T::from_f64_lossy(x);
        let (b1, b2) = (c(BETA1), c(BETA2));
        let bc1 = c(1.0 - BETA1.powi(t));
        let bc2 = c(1.0 - BETA2.powi(t));
        let (lr, wd, eps) = (c(self.lr), c(self.weight_decay), c(EPS));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((theta, &grad), (mi, vi)) in it {
                let gi = grad + wd * *theta;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
