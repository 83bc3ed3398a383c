//! Sample-based re-approximation of a signed mixture as a positive mixture.
//!
//! Components of the positive part that no negative component overlaps are
//! carried over exactly. The remaining, touched part is importance-sampled
//! from its positive components, weighted by the signed density clamped at
//! zero, clustered with weighted K-means and moment-matched per cluster.
//! A few weighted EM sweeps then polish the cluster Gaussians before the
//! masses are rescaled to the analytic integral of the touched part.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{pick_index, DenseEval, Gaussian, GaussianMixture, SignedMixture, WeightedGaussian};
use crate::error::{Error, Result};
use crate::linalg::{self, COV_FLOOR};

/// A negative component whose mean lies within this squared Mahalanobis
/// radius of a positive component marks that component as touched.
const TOUCH_RADIUS_SQ: f64 = 25.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RefitOptions {
    pub max_components: usize,
    pub sample_budget: usize,
    pub rng_seed: u64,
    pub kmeans_iterations: usize,
    pub em_iterations: usize,
}

impl RefitOptions {
    pub fn new(max_components: usize, sample_budget: usize, rng_seed: u64) -> Self {
        Self {
            max_components,
            sample_budget,
            rng_seed,
            kmeans_iterations: 30,
            em_iterations: 25,
        }
    }
}

/// Re-approximates `signed` by a positive mixture of at most
/// `max_components` components.
pub fn refit_mixture(
    signed: &SignedMixture,
    max_components: usize,
    sample_budget: usize,
    rng_seed: u64,
) -> Result<GaussianMixture> {
    refit_mixture_with(signed, &RefitOptions::new(max_components, sample_budget, rng_seed))
}

pub fn refit_mixture_with(signed: &SignedMixture, opts: &RefitOptions) -> Result<GaussianMixture> {
    if opts.max_components == 0 {
        return Err(Error::InvalidArgument("max_components must be at least 1".into()));
    }
    if opts.sample_budget == 0 {
        return Err(Error::InvalidArgument("sample_budget must be at least 1".into()));
    }
    let total = signed.total_integral();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidBelief(format!(
            "signed mixture has non-positive integral {total:e}"
        )));
    }
    let comps: Vec<WeightedGaussian> = signed
        .components()
        .iter()
        .filter(|c| c.weight != 0.0)
        .cloned()
        .collect();
    if comps.iter().all(|c| c.weight > 0.0) && comps.len() <= opts.max_components {
        return GaussianMixture::new(comps);
    }

    let (positives, negatives): (Vec<_>, Vec<_>) = comps.into_iter().partition(|c| c.weight > 0.0);
    let mut touched = Vec::new();
    let mut untouched = Vec::new();
    for p in positives {
        let hit = negatives.iter().any(|n| {
            p.gaussian
                .mahalanobis_sq(n.gaussian.mean())
                .map_or(true, |q| q <= TOUCH_RADIUS_SQ)
        });
        if hit {
            touched.push(p);
        } else {
            untouched.push(p);
        }
    }
    // Reduction without negatives, or too many bystanders: refit everything.
    if touched.is_empty() || untouched.len() >= opts.max_components {
        touched.append(&mut untouched);
    }
    let untouched_mass: f64 = untouched.iter().map(WeightedGaussian::mass).sum();
    let target_mass = total - untouched_mass;
    if !(target_mass > 0.0) {
        if untouched.is_empty() {
            return Err(Error::InvalidBelief("refit removed all belief mass".into()));
        }
        return GaussianMixture::new(untouched);
    }

    let k = (opts.max_components - untouched.len()).min(opts.sample_budget);
    let fitted = fit_touched(&touched, &negatives, target_mass, k, opts)?;
    untouched.extend(fitted);
    GaussianMixture::new(untouched)
}

struct WeightedSamples {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedSamples {
    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn len(&self) -> usize {
        self.weights.len()
    }
}

fn fit_touched(
    positives: &[WeightedGaussian],
    negatives: &[WeightedGaussian],
    target_mass: f64,
    k: usize,
    opts: &RefitOptions,
) -> Result<Vec<WeightedGaussian>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let samples = importance_sample(positives, negatives, opts.sample_budget, &mut rng)?;
    let labels = weighted_kmeans(&samples, k, opts.kmeans_iterations, &mut rng);
    let mut clusters = moment_match(&samples, &labels, k);
    for _ in 0..opts.em_iterations {
        match em_sweep(&samples, &clusters) {
            Some(next) => clusters = next,
            None => break,
        }
    }
    let fitted_mass: f64 = clusters.iter().map(|(m, _)| m).sum();
    if !(fitted_mass > 0.0) {
        return Err(Error::InvalidBelief("importance weights vanished during refit".into()));
    }
    Ok(clusters
        .into_iter()
        .map(|(m, g)| WeightedGaussian::from_mass(m * target_mass / fitted_mass, g))
        .collect())
}

fn importance_sample<R: Rng>(
    positives: &[WeightedGaussian],
    negatives: &[WeightedGaussian],
    n: usize,
    rng: &mut R,
) -> Result<WeightedSamples> {
    let proposal = GaussianMixture::new(positives.to_vec())?;
    let dim = proposal
        .dim()
        .ok_or_else(|| Error::InvalidBelief("no positive components to sample".into()))?;
    let pos_eval = DenseEval::new(positives)?;
    let neg_eval = DenseEval::new(negatives)?;
    let pos_mass = proposal.mass();
    let fr = proposal.mass_fractions();
    let factors: Vec<DMatrix<f64>> = positives
        .iter()
        .map(|c| super::sqrt_factor(c.gaussian.cov()))
        .collect();
    let mut points = Vec::with_capacity(n * dim);
    let mut weights = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = pick_index(&fr, rng.random());
        let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let x = positives[idx].gaussian.mean() + &factors[idx] * z;
        let xs = x.as_slice();
        let pos = pos_eval.density(xs);
        // Negative weights already carry their sign.
        let signed = pos + neg_eval.density(xs);
        let w = if pos > 0.0 { pos_mass * signed.max(0.0) / pos } else { 0.0 };
        points.extend_from_slice(xs);
        weights.push(w);
    }
    Ok(WeightedSamples { dim, points, weights })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn weighted_kmeans<R: Rng>(s: &WeightedSamples, k: usize, iters: usize, rng: &mut R) -> Vec<usize> {
    let n = s.len();
    let d = s.dim;
    let total: f64 = s.weights.iter().sum();
    if n == 0 || total <= 0.0 {
        return vec![0; n];
    }
    // k-means++ seeding on weighted squared distances.
    let mut centers: Vec<f64> = Vec::with_capacity(k * d);
    let first = pick_index(
        &s.weights.iter().map(|w| w / total).collect::<Vec<_>>(),
        rng.random(),
    );
    centers.extend_from_slice(s.point(first));
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(s.point(i), &centers[0..d])).collect();
    while centers.len() < k * d {
        let scores: Vec<f64> = (0..n).map(|i| best[i] * s.weights[i]).collect();
        let sum: f64 = scores.iter().sum();
        if sum <= 0.0 {
            break;
        }
        let probs: Vec<f64> = scores.iter().map(|x| x / sum).collect();
        let idx = pick_index(&probs, rng.random());
        let start = centers.len();
        centers.extend_from_slice(s.point(idx));
        for i in 0..n {
            best[i] = best[i].min(sq_dist(s.point(i), &centers[start..start + d]));
        }
    }
    let kk = centers.len() / d;
    let mut labels = vec![0usize; n];
    for it in 0..iters.max(1) {
        let mut changed = false;
        for i in 0..n {
            let p = s.point(i);
            let mut arg = 0;
            let mut dmin = f64::INFINITY;
            for c in 0..kk {
                let dist = sq_dist(p, &centers[c * d..(c + 1) * d]);
                if dist < dmin {
                    dmin = dist;
                    arg = c;
                }
            }
            if labels[i] != arg {
                labels[i] = arg;
                changed = true;
            }
        }
        if !changed && it > 0 {
            break;
        }
        let mut sums = vec![0.0; kk * d];
        let mut wsum = vec![0.0; kk];
        for i in 0..n {
            let c = labels[i];
            let w = s.weights[i];
            wsum[c] += w;
            for j in 0..d {
                sums[c * d + j] += w * s.point(i)[j];
            }
        }
        for c in 0..kk {
            if wsum[c] > 0.0 {
                for j in 0..d {
                    centers[c * d + j] = sums[c * d + j] / wsum[c];
                }
            }
        }
    }
    labels
}

/// Weighted mass, mean and covariance of each labelled cluster.
fn moment_match(s: &WeightedSamples, labels: &[usize], k: usize) -> Vec<(f64, Gaussian)> {
    let n = s.len() as f64;
    let mut out = Vec::new();
    for c in 0..k {
        let members: Vec<usize> = (0..s.len()).filter(|&i| labels[i] == c).collect();
        let resp: Vec<f64> = members.iter().map(|&i| s.weights[i]).collect();
        if let Some(g) = weighted_gaussian(s, &members, &resp) {
            out.push((resp.iter().sum::<f64>() / n, g));
        }
    }
    out
}

fn weighted_gaussian(s: &WeightedSamples, idx: &[usize], w: &[f64]) -> Option<Gaussian> {
    let d = s.dim;
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) {
        return None;
    }
    let mut mean = DVector::zeros(d);
    for (&i, &wi) in idx.iter().zip(w) {
        for j in 0..d {
            mean[j] += wi * s.point(i)[j];
        }
    }
    mean /= wsum;
    let mut cov = DMatrix::zeros(d, d);
    for (&i, &wi) in idx.iter().zip(w) {
        let p = s.point(i);
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += wi * (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    cov /= wsum;
    let cov = linalg::clamp_eigenvalues(&cov, COV_FLOOR);
    Gaussian::new(mean, cov).ok()
}

/// One weighted EM sweep. Returns `None` if the current fit cannot be
/// evaluated.
fn em_sweep(s: &WeightedSamples, clusters: &[(f64, Gaussian)]) -> Option<Vec<(f64, Gaussian)>> {
    let comps: Vec<WeightedGaussian> = clusters
        .iter()
        .map(|(m, g)| WeightedGaussian::new(*m, g.clone()))
        .collect();
    let eval = DenseEval::new(&comps).ok()?;
    let k = clusters.len();
    let n = s.len();
    let mut resp = vec![vec![0.0; n]; k];
    for i in 0..n {
        if s.weights[i] == 0.0 {
            continue;
        }
        let p = s.point(i);
        let mut denom = 0.0;
        for c in 0..k {
            let r = clusters[c].0 * eval.component_pdf(c, p);
            resp[c][i] = r;
            denom += r;
        }
        if denom > 0.0 {
            for c in 0..k {
                resp[c][i] *= s.weights[i] / denom;
            }
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(k);
    for r in &resp {
        let mass = r.iter().sum::<f64>() / n as f64;
        if mass > 0.0 {
            if let Some(g) = weighted_gaussian(s, &all, r) {
                out.push((mass, g));
            }
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}
