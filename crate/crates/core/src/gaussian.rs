//! Closed-form Gaussian computations: KL and symmetrized divergences, child
//! aggregation, the distributional coherency loss, and the calibration
//! metrics CRPS and interval score.
//!
//! Everything here is pure and reentrant. Standard deviations are floored at
//! [`SIGMA_FLOOR`] inside loss and metric evaluation so collapsing variances
//! cannot blow up divisions.

use crate::error::GaussianError;
use crate::hierarchy::Hierarchy;
use statrs::function::erf::erf;

/// Lower bound on standard deviations inside loss/metric evaluation.
pub const SIGMA_FLOOR: f64 = 1e-6;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_PI: f64 = 1.772_453_850_905_516;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// A univariate Gaussian, parameterized by mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianDist {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianDist {
    /// Constructs a Gaussian, validating that sigma is finite and positive.
    pub fn new(mu: f64, sigma: f64) -> Result<Self, GaussianError> {
        if !(sigma.is_finite() && sigma > 0.0) || !mu.is_finite() {
            return Err(GaussianError::InvalidSigma(sigma));
        }
        Ok(Self { mu, sigma })
    }

    /// Density at `y`.
    pub fn pdf(&self, y: f64) -> f64 {
        let z = (y - self.mu) / self.sigma;
        (-0.5 * z * z).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Cumulative distribution function at `y`.
    pub fn cdf(&self, y: f64) -> f64 {
        0.5 * (1.0 + erf((y - self.mu) / (self.sigma * SQRT_2)))
    }
}

/// One Gaussian per hierarchy node, indexed by node id - 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianForecastSet {
    dists: Vec<GaussianDist>,
}

impl GaussianForecastSet {
    /// Wraps per-node distributions; `dists[i]` belongs to node id `i + 1`.
    pub fn new(dists: Vec<GaussianDist>) -> Self {
        Self { dists }
    }

    pub fn node_count(&self) -> usize {
        self.dists.len()
    }

    /// Distribution for 1-based node id.
    pub fn get(&self, node_id: usize) -> GaussianDist {
        self.dists[node_id - 1]
    }

    pub fn dists(&self) -> &[GaussianDist] {
        &self.dists
    }

    fn check_complete(&self, h: &Hierarchy) -> Result<(), GaussianError> {
        if self.dists.len() != h.node_count() {
            return Err(GaussianError::IncompleteForecasts(self.dists.len() + 1));
        }
        Ok(())
    }
}

fn floored(sigma: f64) -> f64 {
    sigma.max(SIGMA_FLOOR)
}

/// KL divergence `D_KL(p || q)` between two univariate Gaussians.
///
/// `0.5 * [2 ln(s2/s1) + (s1^2 + (m1 - m2)^2) / s2^2 - 1]`; nonnegative, zero
/// iff the distributions coincide.
pub fn kl_gaussian(p: GaussianDist, q: GaussianDist) -> f64 {
    let (s1, s2) = (floored(p.sigma), floored(q.sigma));
    let dm = p.mu - q.mu;
    0.5 * (2.0 * (s2 / s1).ln() + (s1 * s1 + dm * dm) / (s2 * s2) - 1.0)
}

/// Symmetrized Gaussian divergence `0.5 * (KL(p||q) + KL(q||p))` in closed form.
///
/// `0.5 * [(s1^2 + d^2) / (2 s2^2) + (s2^2 + d^2) / (2 s1^2) - 1]` with
/// `d = m1 - m2`. Symmetric in its arguments, nonnegative, zero iff `p = q`.
pub fn jsd_gaussian(p: GaussianDist, q: GaussianDist) -> f64 {
    let (s1, s2) = (floored(p.sigma), floored(q.sigma));
    let d = p.mu - q.mu;
    let (v1, v2) = (s1 * s1, s2 * s2);
    0.5 * ((v1 + d * d) / (2.0 * v2) + (v2 + d * d) / (2.0 * v1) - 1.0)
}

/// Distribution of the weighted sum of independent child Gaussians.
///
/// Returns `N(sum_j w_j mu_j, sqrt(sum_j w_j^2 sigma_j^2))`.
pub fn aggregate_children(
    dists: &[GaussianDist],
    weights: &[f64],
) -> Result<GaussianDist, GaussianError> {
    if dists.is_empty() || dists.len() != weights.len() {
        return Err(GaussianError::EmptyChildren);
    }
    let mut mu = 0.0;
    let mut var = 0.0;
    for (d, w) in dists.iter().zip(weights) {
        mu += w * d.mu;
        var += w * w * d.sigma * d.sigma;
    }
    GaussianDist::new(mu, var.sqrt().max(SIGMA_FLOOR))
}

/// Distributional coherency loss over all internal nodes.
///
/// For each internal node i with children C_i and weights w_ij:
/// `(s_i^2 + d_i^2) / (2 S_i) + (S_i + d_i^2) / (2 s_i^2)` where
/// `S_i = sum_j w_ij^2 s_j^2` and `d_i = mu_i - sum_j w_ij mu_j`.
/// The minimum value is the number of internal nodes, attained exactly when
/// every internal node matches the aggregate of its children.
pub fn coherency_loss(h: &Hierarchy, forecasts: &GaussianForecastSet) -> Result<f64, GaussianError> {
    forecasts.check_complete(h)?;
    let internal = h.internal_nodes();
    if internal.is_empty() {
        return Err(GaussianError::NoInternalNode);
    }
    let mut total = 0.0;
    for &i in &internal {
        let parent = forecasts.get(i);
        let (d, s_agg) = node_terms(h, forecasts, i);
        let var_i = floored(parent.sigma).powi(2);
        total += (var_i + d * d) / (2.0 * s_agg) + (s_agg + d * d) / (2.0 * var_i);
    }
    Ok(total)
}

/// Mean gap `d_i` and child variance aggregate `S_i` for internal node `i`.
fn node_terms(h: &Hierarchy, forecasts: &GaussianForecastSet, i: usize) -> (f64, f64) {
    let parent = forecasts.get(i);
    let mut agg_mu = 0.0;
    let mut agg_var = 0.0;
    for &(child, w) in h.children(i) {
        let c = forecasts.get(child);
        agg_mu += w * c.mu;
        agg_var += w * w * floored(c.sigma).powi(2);
    }
    (parent.mu - agg_mu, agg_var.max(SIGMA_FLOOR * SIGMA_FLOOR))
}

/// Analytic gradient of [`coherency_loss`] with respect to every node's mean
/// and standard deviation. Returns `(d_mu, d_sigma)`, each indexed by
/// node id - 1.
pub fn coherency_loss_grad(
    h: &Hierarchy,
    forecasts: &GaussianForecastSet,
) -> Result<(Vec<f64>, Vec<f64>), GaussianError> {
    forecasts.check_complete(h)?;
    let internal = h.internal_nodes();
    if internal.is_empty() {
        return Err(GaussianError::NoInternalNode);
    }
    let n = h.node_count();
    let mut d_mu = vec![0.0; n];
    let mut d_sigma = vec![0.0; n];
    for &i in &internal {
        let parent = forecasts.get(i);
        let (d, s_agg) = node_terms(h, forecasts, i);
        let sig_i = floored(parent.sigma);
        let var_i = sig_i * sig_i;

        // d L_i / d d_i, then route through d_i = mu_i - sum w_j mu_j
        let dl_dd = d / s_agg + d / var_i;
        d_mu[i - 1] += dl_dd;
        // d L_i / d sigma_i
        d_sigma[i - 1] += sig_i / s_agg - (s_agg + d * d) / (var_i * sig_i);
        // d L_i / d S_i, then route through S_i = sum w_j^2 sigma_j^2
        let dl_ds = -(var_i + d * d) / (2.0 * s_agg * s_agg) + 1.0 / (2.0 * var_i);
        for &(child, w) in h.children(i) {
            let c = forecasts.get(child);
            d_mu[child - 1] += -w * dl_dd;
            d_sigma[child - 1] += dl_ds * 2.0 * w * w * floored(c.sigma);
        }
    }
    Ok((d_mu, d_sigma))
}

/// Continuous ranked probability score of a Gaussian forecast at truth `y`.
///
/// Closed form `sigma * [z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)]` with
/// `z = (y - mu) / sigma`.
pub fn crps_gaussian(dist: GaussianDist, y: f64) -> f64 {
    let sigma = floored(dist.sigma);
    let z = (y - dist.mu) / sigma;
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * (1.0 + erf(z / SQRT_2));
    sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / SQRT_PI)
}

/// Fits a Gaussian to samples (mean, sample std) and scores it with
/// [`crps_gaussian`].
pub fn crps_from_samples(samples: &[f64], y: f64) -> Result<f64, GaussianError> {
    let fit = fit_gaussian(samples)?;
    Ok(crps_gaussian(fit, y))
}

/// Gaussian fitted to samples by mean and sample standard deviation
/// (denominator n - 1).
pub fn fit_gaussian(samples: &[f64]) -> Result<GaussianDist, GaussianError> {
    if samples.len() < 2 {
        return Err(GaussianError::DegenerateSamples);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(GaussianError::DegenerateSamples);
    }
    GaussianDist::new(mean, var.sqrt())
}

/// Negative Gaussian log likelihood `ln sigma + ln sqrt(2 pi) + (y - mu)^2 / (2 sigma^2)`.
pub fn gaussian_nll(dist: GaussianDist, y: f64) -> f64 {
    let sigma = floored(dist.sigma);
    let z = (y - dist.mu) / sigma;
    sigma.ln() + LN_SQRT_2PI + 0.5 * z * z
}

/// Negative log likelihood of the interval `[y - half_width, y + half_width]`
/// under the Gaussian density, in closed form:
/// `2L ln(sigma sqrt(2 pi)) + [(x - mu)^3 / (6 sigma^2)]` evaluated between
/// the interval endpoints.
pub fn interval_score(dist: GaussianDist, y: f64, half_width: f64) -> f64 {
    let sigma = floored(dist.sigma);
    let cube = |x: f64| (x - dist.mu).powi(3);
    let lo = y - half_width;
    let hi = y + half_width;
    2.0 * half_width * (sigma.ln() + LN_SQRT_2PI) + (cube(hi) - cube(lo)) / (6.0 * sigma * sigma)
}
