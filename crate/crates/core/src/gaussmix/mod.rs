//! Gaussian and Gaussian-mixture algebra.
//!
//! Mixture weights follow the un-normalized convention: a component with
//! weight `w`, mean `m` and covariance `S` contributes
//! `w * exp(-0.5 (p - m)' S^-1 (p - m))` to the density. Its integral
//! (its "mass") is therefore `w * |2 pi S|^(1/2)`. The same form is used for
//! beliefs over undiscovered objects and for detection kernels.

mod dense;
mod refit;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, mat_from_rows, mat_to_rows, spd_inverse_det};

pub use dense::DenseEval;
pub use refit::{refit_mixture, refit_mixture_with, RefitOptions};

const SYMMETRY_TOL: f64 = 1e-10;
const NEG_EIGEN_TOL: f64 = 1e-12;

/// A multivariate Gaussian over position space.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    /// Builds a Gaussian, symmetrizing the covariance and clamping tiny
    /// negative eigenvalues to zero.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::InvalidArgument("zero-dimensional Gaussian".into()));
        }
        check_dim(n, cov.nrows())?;
        check_dim(n, cov.ncols())?;
        if !linalg::is_symmetric(&cov, SYMMETRY_TOL * (1.0 + cov.amax())) {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let sym = linalg::symmetrize(&cov);
        let eig = sym.clone().symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -NEG_EIGEN_TOL * (1.0 + cov.amax()) {
            return Err(Error::InvalidArgument(format!(
                "covariance has negative eigenvalue {min:e}"
            )));
        }
        let cov = if min < 0.0 {
            linalg::clamp_eigenvalues(&sym, 0.0)
        } else {
            sym
        };
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite Gaussian parameters".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn from_slices(mean: &[f64], cov_rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(DVector::from_column_slice(mean), mat_from_rows(cov_rows)?)
    }

    /// Isotropic Gaussian `N(mean, var * I)`.
    pub fn isotropic(mean: &[f64], var: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::identity(n, n) * var,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// `|2 pi S|^(1/2)`: the integral of `exp(-0.5 d' S^-1 d)`.
    pub fn peak_to_mass(&self) -> f64 {
        let n = self.dim() as f64;
        let det = self.cov.determinant().max(0.0);
        ((2.0 * std::f64::consts::PI).powf(n) * det).sqrt()
    }

    /// Normalized probability density.
    pub fn pdf(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let (inv, det) = spd_inverse_det(&self.cov)?;
        let d = x - &self.mean;
        let n = self.dim() as f64;
        let norm = ((2.0 * std::f64::consts::PI).powf(n) * det).sqrt();
        Ok((-0.5 * linalg::quad_form(&inv, &d)).exp() / norm)
    }

    /// Squared Mahalanobis distance of `x` from the mean.
    pub fn mahalanobis_sq(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let (inv, _) = spd_inverse_det(&self.cov)?;
        Ok(linalg::quad_form(&inv, &(x - &self.mean)))
    }
}

/// Product of two Gaussian densities: `N(x; a) N(x; b) = scale * N(x; c)`.
///
/// `scale = N(mu_a; mu_b, S_a + S_b)`.
pub fn gaussian_product(a: &Gaussian, b: &Gaussian) -> Result<(f64, Gaussian)> {
    check_dim(a.dim(), b.dim())?;
    let sum = &a.cov + &b.cov;
    let (sum_inv, det) = spd_inverse_det(&sum)
        .map_err(|_| Error::Numerical("singular covariance sum in Gaussian product".into()))?;
    let n = a.dim() as f64;
    let diff = &a.mean - &b.mean;
    let scale = (-0.5 * linalg::quad_form(&sum_inv, &diff)).exp()
        / ((2.0 * std::f64::consts::PI).powf(n) * det).sqrt();
    let cov = linalg::symmetrize(&(&a.cov * &sum_inv * &b.cov));
    let mean = &b.cov * &sum_inv * &a.mean + &a.cov * &sum_inv * &b.mean;
    let cov = linalg::clamp_eigenvalues(&cov, 0.0);
    Ok((scale, Gaussian { mean, cov }))
}

/// A Gaussian with a real (possibly negative) peak weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGaussian {
    pub weight: f64,
    pub gaussian: Gaussian,
}

impl WeightedGaussian {
    pub fn new(weight: f64, gaussian: Gaussian) -> Self {
        Self { weight, gaussian }
    }

    pub fn mass(&self) -> f64 {
        self.weight * self.gaussian.peak_to_mass()
    }

    /// Builds a component from its integral rather than its peak weight.
    pub fn from_mass(mass: f64, gaussian: Gaussian) -> Self {
        let k = gaussian.peak_to_mass();
        Self {
            weight: mass / k,
            gaussian,
        }
    }
}

fn component_density(components: &[WeightedGaussian], point: &DVector<f64>) -> Result<f64> {
    let mut total = 0.0;
    for c in components {
        check_dim(c.gaussian.dim(), point.len())?;
        let q = c.gaussian.mahalanobis_sq(point)?;
        total += c.weight * (-0.5 * q).exp();
    }
    Ok(total)
}

fn common_dim(components: &[WeightedGaussian]) -> Result<Option<usize>> {
    let Some(first) = components.first() else {
        return Ok(None);
    };
    let n = first.gaussian.dim();
    for c in components {
        check_dim(n, c.gaussian.dim())?;
    }
    Ok(Some(n))
}

/// A Gaussian mixture with nonnegative weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct GaussianMixture {
    components: Vec<WeightedGaussian>,
    normalized: bool,
}

impl GaussianMixture {
    pub fn new(components: Vec<WeightedGaussian>) -> Result<Self> {
        common_dim(&components)?;
        if let Some(c) = components
            .iter()
            .find(|c| !(c.weight >= 0.0) || !c.weight.is_finite())
        {
            return Err(Error::InvalidBelief(format!(
                "mixture weight {} is not a finite nonnegative number",
                c.weight
            )));
        }
        Ok(Self {
            components,
            normalized: false,
        })
    }

    /// A mixture with no components: the zero function.
    pub fn empty() -> Self {
        Self {
            components: Vec::new(),
            normalized: false,
        }
    }

    pub fn single(weight: f64, gaussian: Gaussian) -> Result<Self> {
        Self::new(vec![WeightedGaussian::new(weight, gaussian)])
    }

    pub fn components(&self) -> &[WeightedGaussian] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> Option<usize> {
        self.components.first().map(|c| c.gaussian.dim())
    }

    /// Analytic integral of the mixture.
    pub fn mass(&self) -> f64 {
        self.components.iter().map(WeightedGaussian::mass).sum()
    }

    /// Un-normalized density `sum_l w_l exp(-0.5 (p - mu_l)' S_l^-1 (p - mu_l))`.
    pub fn density_at(&self, point: &DVector<f64>) -> Result<f64> {
        component_density(&self.components, point)
    }

    /// Rescales the weights so the mixture integrates to one.
    pub fn normalized(&self) -> Result<Self> {
        let mass = self.mass();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::InvalidBelief(format!(
                "cannot normalize a mixture with mass {mass}"
            )));
        }
        Ok(Self {
            components: self
                .components
                .iter()
                .map(|c| WeightedGaussian::new(c.weight / mass, c.gaussian.clone()))
                .collect(),
            normalized: true,
        })
    }

    /// Mixture masses normalized to probabilities.
    pub fn mass_fractions(&self) -> Vec<f64> {
        let masses: Vec<f64> = self.components.iter().map(WeightedGaussian::mass).collect();
        let total: f64 = masses.iter().sum();
        if total > 0.0 {
            masses.iter().map(|m| m / total).collect()
        } else {
            vec![0.0; masses.len()]
        }
    }

    /// Mean and covariance of the normalized density.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self
            .dim()
            .ok_or_else(|| Error::InvalidBelief("empty mixture has no moments".into()))?;
        let fr = self.mass_fractions();
        let mut mean = DVector::zeros(n);
        for (c, f) in self.components.iter().zip(&fr) {
            mean += c.gaussian.mean() * *f;
        }
        let mut cov = DMatrix::zeros(n, n);
        for (c, f) in self.components.iter().zip(&fr) {
            let d = c.gaussian.mean() - &mean;
            cov += (c.gaussian.cov() + &d * d.transpose()) * *f;
        }
        Ok((mean, cov))
    }

    /// Draws `n` i.i.d. samples from the normalized mixture.
    pub fn sample(&self, n: usize, rng_seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
        if self.components.is_empty() || n == 0 {
            return Vec::new();
        }
        let fr = self.mass_fractions();
        let factors: Vec<DMatrix<f64>> = self
            .components
            .iter()
            .map(|c| sqrt_factor(c.gaussian.cov()))
            .collect();
        let dim = self.components[0].gaussian.dim();
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let idx = pick_index(&fr, u);
                let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                self.components[idx].gaussian.mean() + &factors[idx] * z
            })
            .collect()
    }
}

/// Index of the categorical outcome for a uniform draw `u` in [0, 1).
pub(crate) fn pick_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// A matrix `L` with `L L' = cov`, valid for semidefinite covariances.
pub(crate) fn sqrt_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = cov.clone().cholesky() {
        return ch.l();
    }
    let eig = cov.clone().symmetric_eigen();
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root)
}

/// A mixture whose weights may be negative: the exact expansion of a prior
/// multiplied by miss probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedMixture {
    components: Vec<WeightedGaussian>,
}

impl SignedMixture {
    pub fn new(components: Vec<WeightedGaussian>) -> Result<Self> {
        common_dim(&components)?;
        Ok(Self { components })
    }

    pub fn components(&self) -> &[WeightedGaussian] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn total_integral(&self) -> f64 {
        self.components.iter().map(WeightedGaussian::mass).sum()
    }

    pub fn density_at(&self, point: &DVector<f64>) -> Result<f64> {
        component_density(&self.components, point)
    }

    pub fn all_positive(&self) -> bool {
        self.components.iter().all(|c| c.weight > 0.0)
    }

    /// Exact expansion of `self(a) * (1 - kernel(a))`.
    pub fn multiply_complement(&self, kernel: &GaussianMixture) -> Result<Self> {
        if let (Some(a), Some(b)) = (common_dim(&self.components)?, kernel.dim()) {
            check_dim(a, b)?;
        }
        let mut out = self.components.clone();
        for c in &self.components {
            let mass_c = c.mass();
            for k in kernel.components() {
                let (scale, g) = gaussian_product(&c.gaussian, &k.gaussian)?;
                let mass = mass_c * k.mass() * scale;
                out.push(WeightedGaussian::from_mass(-mass, g));
            }
        }
        Ok(Self { components: out })
    }

    /// Drops components whose absolute mass is below `rel_tol` times the
    /// total absolute mass.
    pub fn prune(&self, rel_tol: f64) -> Self {
        let abs_total: f64 = self.components.iter().map(|c| c.mass().abs()).sum();
        let cut = rel_tol * abs_total;
        Self {
            components: self
                .components
                .iter()
                .filter(|c| c.mass().abs() >= cut && c.weight != 0.0)
                .cloned()
                .collect(),
        }
    }
}

impl From<GaussianMixture> for SignedMixture {
    fn from(m: GaussianMixture) -> Self {
        Self {
            components: m.components,
        }
    }
}

impl From<&GaussianMixture> for SignedMixture {
    fn from(m: &GaussianMixture) -> Self {
        Self {
            components: m.components.clone(),
        }
    }
}

/// Un-normalized posterior after a missed detection:
/// `prior(a) * (1 - miss_kernel(a))`, expanded exactly.
///
/// `miss_kernel` is the detection probability as a function of object
/// position; its values must not exceed one.
pub fn negative_update(prior: &GaussianMixture, miss_kernel: &GaussianMixture) -> Result<SignedMixture> {
    SignedMixture::from(prior).multiply_complement(miss_kernel)
}

#[derive(Serialize, Deserialize)]
struct ComponentRepr {
    w: f64,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    components: Vec<ComponentRepr>,
    #[serde(default)]
    normalized: bool,
}

impl TryFrom<MixtureRepr> for GaussianMixture {
    type Error = Error;

    fn try_from(r: MixtureRepr) -> Result<Self> {
        let comps = r
            .components
            .into_iter()
            .map(|c| Ok(WeightedGaussian::new(c.w, Gaussian::from_slices(&c.mean, &c.cov)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut mix = GaussianMixture::new(comps)?;
        if r.normalized {
            let mass = mix.mass();
            if (mass - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidBelief(format!(
                    "mixture flagged normalized but integrates to {mass}"
                )));
            }
            mix.normalized = true;
        }
        Ok(mix)
    }
}

impl From<GaussianMixture> for MixtureRepr {
    fn from(m: GaussianMixture) -> Self {
        Self {
            components: m
                .components
                .iter()
                .map(|c| ComponentRepr {
                    w: c.weight,
                    mean: c.gaussian.mean().iter().cloned().collect(),
                    cov: mat_to_rows(c.gaussian.cov()),
                })
                .collect(),
            normalized: m.normalized,
        }
    }
}
