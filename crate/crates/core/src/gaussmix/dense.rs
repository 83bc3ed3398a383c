use super::WeightedGaussian;
use crate::error::{Error, Result};

/// Allocation-free evaluator for a fixed set of weighted Gaussians.
#[derive(Debug, Clone)]
pub struct DenseEval {
    dim: usize,
    comps: Vec<DenseComp>,
}

#[derive(Debug, Clone)]
struct DenseComp {
    weight: f64,
    mean: Vec<f64>,
    // Row-major inverse of the lower Cholesky factor.
    linv: Vec<f64>,
    // |2 pi S|^(1/2)
    norm: f64,
}

impl DenseEval {
    pub fn new(components: &[WeightedGaussian]) -> Result<Self> {
        let dim = components.first().map_or(0, |c| c.gaussian.dim());
        let comps = components
            .iter()
            .map(|c| {
                let chol = c.gaussian.cov().clone().cholesky().ok_or_else(|| {
                    Error::Numerical("component covariance is not positive definite".into())
                })?;
                let l = chol.l();
                let linv = l
                    .solve_lower_triangular(&nalgebra::DMatrix::identity(dim, dim))
                    .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
                let det: f64 = l.diagonal().iter().map(|d| d * d).product();
                let norm = ((2.0 * std::f64::consts::PI).powi(dim as i32) * det).sqrt();
                Ok(DenseComp {
                    weight: c.weight,
                    mean: c.gaussian.mean().iter().cloned().collect(),
                    linv: (0..dim * dim).map(|k| linv[(k / dim, k % dim)]).collect(),
                    norm,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, comps })
    }

    pub fn len(&self) -> usize {
        self.comps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }

    fn quad(&self, c: &DenseComp, x: &[f64]) -> f64 {
        let n = self.dim;
        let mut q = 0.0;
        for i in 0..n {
            let mut y = 0.0;
            for j in 0..=i {
                y += c.linv[i * n + j] * (x[j] - c.mean[j]);
            }
            q += y * y;
        }
        q
    }

    /// Weighted un-normalized density at `x`.
    pub fn density(&self, x: &[f64]) -> f64 {
        self.comps
            .iter()
            .map(|c| c.weight * (-0.5 * self.quad(c, x)).exp())
            .sum()
    }

    /// Normalized pdf of component `k` at `x`, without its weight.
    pub fn component_pdf(&self, k: usize, x: &[f64]) -> f64 {
        let c = &self.comps[k];
        (-0.5 * self.quad(c, x)).exp() / c.norm
    }
}
