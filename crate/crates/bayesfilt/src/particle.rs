//! Bootstrap particle filter: sequential importance sampling with
//! resampling.
//!
//! Particles are propagated through the transition density (`G` plus process
//! noise), reweighted by the measurement likelihood
//! `w_k ∝ w_{k-1} · p(y_k | x_k)`, and resampled whenever the effective
//! sample size `1/Σw²` drops below a threshold fraction of `N`. All weight
//! arithmetic runs in log space with max-subtraction: the benchmark scenarios
//! use noise covariances small enough (entries down to 1e-14) that linear
//! likelihoods underflow immediately.

use nalgebra::DVector;
use rand::Rng;

use crate::error::FilterError;
use crate::gaussian::{kahan_sum, matrix_sqrt, DensityFactor, GaussianBelief};
use crate::model::StateSpaceModel;
use crate::rng::{substream, Lane};
use crate::Result;

/// Squared-Mahalanobis-per-channel threshold above which a measurement is
/// declared irreconcilable with the whole ensemble (50σ on every channel).
pub const DEFAULT_DIVERGENCE_MAHALANOBIS_PER_CHANNEL: f64 = 2500.0;

/// A weighted particle ensemble.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl ParticleSet {
    /// Ensemble with uniform weights.
    pub fn uniform(particles: Vec<DVector<f64>>) -> Result<Self> {
        if particles.is_empty() {
            return Err(FilterError::Config("empty particle set".into()));
        }
        let n = particles.len();
        Ok(Self {
            particles,
            weights: vec![1.0 / n as f64; n],
        })
    }

    /// Ensemble with explicit (already normalized) weights.
    pub fn new(particles: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if particles.is_empty() {
            return Err(FilterError::Config("empty particle set".into()));
        }
        if particles.len() != weights.len() {
            return Err(FilterError::dims(
                "ParticleSet weights",
                particles.len(),
                weights.len(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FilterError::Numerical(
                "particle weights must be finite and nonnegative".into(),
            ));
        }
        let sum = kahan_sum(weights.iter().copied());
        if (sum - 1.0).abs() > 1e-10 {
            return Err(FilterError::Config(format!(
                "particle weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self { particles, weights })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    /// Posterior mean (estimate with the identity transform).
    pub fn mean(&self) -> DVector<f64> {
        estimate(self, |x| x.clone())
    }

    /// Weighted mean and covariance of the ensemble.
    pub fn moments(&self) -> Result<GaussianBelief> {
        crate::gaussian::weighted_moments(&self.particles, &self.weights)
    }
}

/// Resampling scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleScheme {
    /// Stratified inverse-CDF mapping of `u_i = (i - 1 + u)/N`; per-particle
    /// counts are within ±1 of `N·w` by construction.
    Systematic,
    /// `N` independent categorical draws.
    Multinomial,
}

/// When and how to resample.
#[derive(Debug, Clone, Copy)]
pub struct ResamplingPolicy {
    pub scheme: ResampleScheme,
    /// Resample when `N_eff < threshold_fraction · N`; 1.0 means every step.
    pub threshold_fraction: f64,
}

impl Default for ResamplingPolicy {
    fn default() -> Self {
        Self {
            scheme: ResampleScheme::Systematic,
            threshold_fraction: 0.2,
        }
    }
}

impl ResamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) {
            return Err(FilterError::Config(format!(
                "resample threshold_fraction {} outside (0, 1]",
                self.threshold_fraction
            )));
        }
        Ok(())
    }
}

/// Propagate every particle through `G` and add process noise.
pub fn bootstrap_propagate<R: Rng + ?Sized>(
    ps: &ParticleSet,
    model: &StateSpaceModel,
    p: &DVector<f64>,
    rng: &mut R,
) -> Result<ParticleSet> {
    let noise_sqrt = matrix_sqrt(model.process_cov())?;
    let dim = model.state_dim();
    let mut particles = Vec::with_capacity(ps.len());
    for (j, x) in ps.particles.iter().enumerate() {
        let mut next = model.transition(x, p)?;
        let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        next += &noise_sqrt * z;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::Numerical(format!(
                "particle {j} non-finite after propagation"
            )));
        }
        particles.push(next);
    }
    Ok(ParticleSet {
        particles,
        weights: ps.weights.clone(),
    })
}

pub(crate) fn normalize_log_weights(mut log_w: Vec<f64>, context: &str) -> Result<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(FilterError::DegenerateLikelihood(format!(
            "{context}: every particle weight underflowed to zero"
        )));
    }
    for w in log_w.iter_mut() {
        *w = (*w - max).exp();
    }
    let sum = kahan_sum(log_w.iter().copied());
    if !(sum.is_finite() && sum > 0.0) {
        return Err(FilterError::DegenerateLikelihood(format!(
            "{context}: weight normalization failed (sum {sum})"
        )));
    }
    for w in log_w.iter_mut() {
        *w /= sum;
    }
    Ok(log_w)
}

/// Multiply weights by the measurement likelihood `N(y; H(x), R)` and
/// normalize, using the crate-default divergence threshold.
pub fn likelihood_reweight(
    ps: &ParticleSet,
    model: &StateSpaceModel,
    p: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<ParticleSet> {
    likelihood_reweight_with_floor(
        ps,
        model,
        p,
        y,
        DEFAULT_DIVERGENCE_MAHALANOBIS_PER_CHANNEL * model.obs_dim() as f64,
    )
}

/// [`likelihood_reweight`] with an explicit squared-Mahalanobis divergence
/// threshold: if even the best particle sits beyond it, the filter has lost
/// the measurement and a degenerate-likelihood error is raised. Pass
/// `f64::INFINITY` to disable (useful when `R` is a deliberately mis-scaled
/// tuning device rather than the physical noise level).
pub fn likelihood_reweight_with_floor(
    ps: &ParticleSet,
    model: &StateSpaceModel,
    p: &DVector<f64>,
    y: &DVector<f64>,
    divergence_mahalanobis_sq: f64,
) -> Result<ParticleSet> {
    if y.len() != model.obs_dim() {
        return Err(FilterError::dims("likelihood_reweight: y", model.obs_dim(), y.len()));
    }
    let factor = DensityFactor::new(model.meas_cov())?;
    let mut log_w = Vec::with_capacity(ps.len());
    let mut best_mahal = f64::INFINITY;
    for (j, x) in ps.particles.iter().enumerate() {
        let predicted = model.observe(x, p)?;
        if predicted.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::Numerical(format!(
                "particle {j}: non-finite predicted measurement"
            )));
        }
        let residual = y - predicted;
        let m = factor.mahalanobis_sq(&residual);
        best_mahal = best_mahal.min(m);
        log_w.push(ps.weights[j].ln() + factor.log_density(&residual));
    }
    if best_mahal >= divergence_mahalanobis_sq {
        return Err(FilterError::DegenerateLikelihood(format!(
            "best particle sits {:.1}σ-equivalent from the measurement \
             (squared Mahalanobis {best_mahal:.3e} ≥ threshold {divergence_mahalanobis_sq:.3e})",
            (best_mahal / model.obs_dim() as f64).sqrt()
        )));
    }
    let weights = normalize_log_weights(log_w, "likelihood_reweight")?;
    Ok(ParticleSet {
        particles: ps.particles.clone(),
        weights,
    })
}

/// Full importance-ratio reweighting for particles drawn from an arbitrary
/// proposal: `w ∝ w_prev · p(y|x) · p(x|x_prev) / q(x)`.
///
/// `transition_logpdf(j)` and `proposal_logpdf(j)` evaluate the respective
/// log-densities at particle `j`; with proposal equal to the transition the
/// ratio cancels and this reduces to [`likelihood_reweight`].
pub fn general_reweight(
    ps: &ParticleSet,
    model: &StateSpaceModel,
    p: &DVector<f64>,
    y: &DVector<f64>,
    proposal_logpdf: impl Fn(usize) -> f64,
    transition_logpdf: impl Fn(usize) -> f64,
) -> Result<ParticleSet> {
    if y.len() != model.obs_dim() {
        return Err(FilterError::dims("general_reweight: y", model.obs_dim(), y.len()));
    }
    let factor = DensityFactor::new(model.meas_cov())?;
    let mut log_w = Vec::with_capacity(ps.len());
    for (j, x) in ps.particles.iter().enumerate() {
        let q = proposal_logpdf(j);
        if q == f64::NEG_INFINITY {
            return Err(FilterError::Contract(format!(
                "proposal density is zero at particle {j} it claims to have produced"
            )));
        }
        let predicted = model.observe(x, p)?;
        let loglik = factor.log_density(&(y - predicted));
        log_w.push(ps.weights[j].ln() + loglik + transition_logpdf(j) - q);
    }
    let weights = normalize_log_weights(log_w, "general_reweight")?;
    Ok(ParticleSet {
        particles: ps.particles.clone(),
        weights,
    })
}

/// Effective sample size `1/Σw²` of a normalized weight vector.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s = kahan_sum(weights.iter().map(|w| w * w));
    if s <= 0.0 {
        return 0.0;
    }
    1.0 / s
}

/// Draw `n_out` parent indices according to `weights`.
pub fn resample_indices<R: Rng + ?Sized>(
    weights: &[f64],
    n_out: usize,
    scheme: ResampleScheme,
    rng: &mut R,
) -> Vec<usize> {
    let n = weights.len();
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cumulative.push(acc);
    }
    // guard the tail against rounding
    if let Some(last) = cumulative.last_mut() {
        *last = f64::MAX;
    }
    match scheme {
        ResampleScheme::Systematic => {
            let u: f64 = rng.gen::<f64>();
            let mut indices = Vec::with_capacity(n_out);
            let mut j = 0;
            for i in 0..n_out {
                let target = (i as f64 + u) / n_out as f64;
                while cumulative[j] < target {
                    j += 1;
                }
                indices.push(j);
            }
            indices
        }
        ResampleScheme::Multinomial => (0..n_out)
            .map(|_| {
                let target: f64 = rng.gen::<f64>();
                cumulative.partition_point(|c| *c < target).min(n - 1)
            })
            .collect(),
    }
}

/// Resample to uniform weights.
pub fn resample<R: Rng + ?Sized>(
    ps: &ParticleSet,
    scheme: ResampleScheme,
    rng: &mut R,
) -> ParticleSet {
    let idx = resample_indices(&ps.weights, ps.len(), scheme, rng);
    let particles = idx.iter().map(|&j| ps.particles[j].clone()).collect();
    ParticleSet {
        particles,
        weights: vec![1.0 / ps.len() as f64; ps.len()],
    }
}

/// MMSE estimate `Σ w_j · g(x_j)`.
pub fn estimate(ps: &ParticleSet, g: impl Fn(&DVector<f64>) -> DVector<f64>) -> DVector<f64> {
    let mut acc: Option<DVector<f64>> = None;
    for (x, &w) in ps.particles.iter().zip(&ps.weights) {
        let gx = g(x);
        match acc.as_mut() {
            Some(a) => a.axpy(w, &gx, 1.0),
            None => acc = Some(gx * w),
        }
    }
    acc.expect("nonempty particle set")
}

/// Configuration of the bootstrap filter.
#[derive(Debug, Clone)]
pub struct PfConfig {
    pub particles: usize,
    pub policy: ResamplingPolicy,
    /// Squared-Mahalanobis divergence threshold (see
    /// [`likelihood_reweight_with_floor`]); `f64::INFINITY` disables.
    pub divergence_mahalanobis_sq: f64,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            particles: 1000,
            policy: ResamplingPolicy::default(),
            divergence_mahalanobis_sq: f64::NAN, // resolved per model dimension
        }
    }
}

impl PfConfig {
    fn resolve_floor(&self, obs_dim: usize) -> f64 {
        if self.divergence_mahalanobis_sq.is_nan() {
            DEFAULT_DIVERGENCE_MAHALANOBIS_PER_CHANNEL * obs_dim as f64
        } else {
            self.divergence_mahalanobis_sq
        }
    }
}

/// Bootstrap particle filter over one model.
#[derive(Debug, Clone)]
pub struct BootstrapPf {
    model: StateSpaceModel,
    cfg: PfConfig,
    set: ParticleSet,
    seed: u64,
    step_index: u64,
}

impl BootstrapPf {
    /// Initialize by drawing `cfg.particles` samples from the prior belief.
    pub fn init(
        model: StateSpaceModel,
        prior: &GaussianBelief,
        cfg: PfConfig,
        seed: u64,
    ) -> Result<Self> {
        if prior.dim() != model.state_dim() {
            return Err(FilterError::dims("BootstrapPf prior", model.state_dim(), prior.dim()));
        }
        if cfg.particles == 0 {
            return Err(FilterError::Config("particle count must be positive".into()));
        }
        cfg.policy.validate()?;
        let mut rng = substream(seed, 0, Lane::Init);
        let particles = prior.sample_n(cfg.particles, &mut rng)?;
        let set = ParticleSet::uniform(particles)?;
        Ok(Self {
            model,
            cfg,
            set,
            seed,
            step_index: 0,
        })
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.set
    }

    pub fn model(&self) -> &StateSpaceModel {
        &self.model
    }

    /// One propagate / reweight / (conditionally) resample cycle.
    pub fn step(
        &mut self,
        p_prev: &DVector<f64>,
        p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<()> {
        self.step_index += 1;
        let k = self.step_index;
        let mut prop_rng = substream(self.seed, k, Lane::Propagate);
        let propagated = bootstrap_propagate(&self.set, &self.model, p_prev, &mut prop_rng)
            .map_err(|e| e.at_step(k as usize))?;
        let floor = self.cfg.resolve_floor(self.model.obs_dim());
        let weighted =
            likelihood_reweight_with_floor(&propagated, &self.model, p_curr, y, floor)
                .map_err(|e| e.at_step(k as usize))?;
        let n_t = self.cfg.policy.threshold_fraction * weighted.len() as f64;
        self.set = if effective_sample_size(&weighted.weights) < n_t {
            let mut res_rng = substream(self.seed, k, Lane::Resample);
            resample(&weighted, self.cfg.policy.scheme, &mut res_rng)
        } else {
            weighted
        };
        Ok(())
    }
}
