//! Gaussian-mixture sigma-point particle filter.
//!
//! The posterior is carried as a `G_s`-component Gaussian mixture instead of
//! a particle cloud. Each step expands the mixture component-wise — a UKF
//! time update per (state, process-noise) component pair, a UKF measurement
//! update per (prior, measurement-noise) pair — then draws `N` importance
//! samples from the expanded posterior mixture, reweights them with the
//! exact ratio `p(y|x)·p(x|Y_{k-1})/p(x|Y_k)`, and refits a `G_s`-component
//! mixture by weighted expectation-maximization so the component count stays
//! bounded.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::FilterError;
use crate::gaussian::{kahan_sum, weighted_moments, DensityFactor, GaussianBelief};
use crate::model::StateSpaceModel;
use crate::particle::{normalize_log_weights, ParticleSet};
use crate::rng::{substream, Lane};
use crate::ukf::{generate_sigma_points, measurement_update_with, UtConfig};
use crate::Result;

/// A finite Gaussian mixture: weights `α_s ≥ 0` summing to one over PSD
/// components of equal dimension.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<GaussianBelief>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianBelief>) -> Result<Self> {
        if components.is_empty() {
            return Err(FilterError::Config("mixture needs at least one component".into()));
        }
        if weights.len() != components.len() {
            return Err(FilterError::dims(
                "mixture weights",
                components.len(),
                weights.len(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FilterError::Config(
                "mixture weights must be finite and nonnegative".into(),
            ));
        }
        let sum = kahan_sum(weights.iter().copied());
        if (sum - 1.0).abs() > 1e-10 {
            return Err(FilterError::Config(format!(
                "mixture weights sum to {sum}, expected 1"
            )));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(FilterError::Config(
                "mixture components have inconsistent dimensions".into(),
            ));
        }
        Ok(Self {
            weights,
            components,
        })
    }

    /// One-component mixture.
    pub fn single(component: GaussianBelief) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires ≥ 1 component
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianBelief] {
        &self.components
    }

    /// Mixture mean `Σ α_s m_s`.
    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        for (c, &a) in self.components.iter().zip(&self.weights) {
            acc.axpy(a, c.mean(), 1.0);
        }
        acc
    }

    /// Exact first two moments of the mixture:
    /// `P = Σ α_s (P_s + (m_s − m)(m_s − m)ᵀ)`.
    pub fn moments(&self) -> Result<GaussianBelief> {
        let mean = self.mean();
        let mut cov = DMatrix::zeros(self.dim(), self.dim());
        for (c, &a) in self.components.iter().zip(&self.weights) {
            cov += c.cov() * a;
            let d = c.mean() - &mean;
            cov.ger(a, &d, &d, 1.0);
        }
        GaussianBelief::new(mean, cov)
    }

    /// Log mixture density `log Σ_s α_s N(x; m_s, P_s)` via log-sum-exp.
    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.density()?.logpdf(x))
    }

    /// Precompute the per-component factorizations for repeated evaluation.
    pub fn density(&self) -> Result<MixtureDensity> {
        let factors = self
            .components
            .iter()
            .map(|c| DensityFactor::new(c.cov()))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureDensity {
            log_weights: self.weights.iter().map(|&a| a.ln()).collect(),
            means: self.components.iter().map(|c| c.mean().clone()).collect(),
            factors,
        })
    }

    /// Draw one sample: a component by weight, then a Gaussian draw from it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let s = categorical(&self.weights, rng);
        self.components[s].sample(rng)
    }
}

/// Reusable factorized form of a [`GaussianMixture`] density.
#[derive(Debug)]
pub struct MixtureDensity {
    log_weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    factors: Vec<DensityFactor>,
}

impl MixtureDensity {
    pub fn logpdf(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .log_weights
            .iter()
            .zip(&self.means)
            .zip(&self.factors)
            .map(|((&lw, m), f)| lw + f.log_density(&(x - m)))
            .collect();
        log_sum_exp(&terms)
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + kahan_sum(terms.iter().map(|t| (t - max).exp())).ln()
}

/// Single categorical draw through the cumulative weights.
fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return j;
        }
    }
    weights.len() - 1
}

/// EM refit controls.
#[derive(Debug, Clone)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop when the relative weighted log-likelihood change drops below this.
    pub tol: f64,
    /// Relative covariance floor: every fitted component covariance gets
    /// `+ cov_floor · (global trace / d) · I`, which keeps near-converged
    /// parameter clouds from collapsing to singular components.
    pub cov_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            cov_floor: 1e-10,
        }
    }
}

/// Configuration of the mixture filter.
#[derive(Debug, Clone)]
pub struct GmsppfConfig {
    /// State mixture size (the count the posterior is refit to).
    pub g_s: usize,
    /// Process-noise mixture size.
    pub g_p: usize,
    /// Measurement-noise mixture size.
    pub g_m: usize,
    /// Importance-sample count per step.
    pub particles: usize,
    pub em: EmConfig,
    pub ut: UtConfig,
}

impl Default for GmsppfConfig {
    fn default() -> Self {
        Self {
            g_s: 2,
            g_p: 1,
            g_m: 1,
            particles: 1000,
            em: EmConfig::default(),
            ut: UtConfig::default(),
        }
    }
}

impl GmsppfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g_s < 1 || self.g_p < 1 || self.g_m < 1 {
            return Err(FilterError::Config(
                "mixture sizes G_s, G_p, G_m must all be ≥ 1".into(),
            ));
        }
        if self.particles < self.g_s {
            return Err(FilterError::Config(format!(
                "particle count {} below mixture size {}",
                self.particles, self.g_s
            )));
        }
        if !(self.em.tol > 0.0) || self.em.max_iters == 0 || !(self.em.cov_floor >= 0.0) {
            return Err(FilterError::Config("invalid EM settings".into()));
        }
        Ok(())
    }
}

/// Mixture time update: every (state s, process-noise q) pair becomes one
/// prior component via an unscented transform of component `s` with the
/// `q`-th noise mean and covariance added; coefficients are the normalized
/// products `α_s · β_q`.
pub fn gmm_time_update(
    mix: &GaussianMixture,
    noise_mix: &GaussianMixture,
    model: &StateSpaceModel,
    p: &DVector<f64>,
    ut_cfg: &UtConfig,
) -> Result<GaussianMixture> {
    let mut weights = Vec::with_capacity(mix.len() * noise_mix.len());
    let mut components = Vec::with_capacity(mix.len() * noise_mix.len());
    for (s, (comp, &alpha)) in mix.components().iter().zip(mix.weights()).enumerate() {
        let tag = |e: FilterError, q: usize| e.tagged(&format!("time-update component ({s},{q})"));
        let points = generate_sigma_points(comp, ut_cfg).map_err(|e| tag(e, 0))?;
        let propagated = points
            .propagate(|x| model.transition(x, p))
            .map_err(|e| tag(e, 0))?;
        for (q, (noise, &beta)) in noise_mix
            .components()
            .iter()
            .zip(noise_mix.weights())
            .enumerate()
        {
            let prior = propagated
                .moments(Some(noise.mean()), noise.cov())
                .map_err(|e| tag(e, q))?;
            weights.push(alpha * beta);
            components.push(prior);
        }
    }
    let sum = kahan_sum(weights.iter().copied());
    for w in weights.iter_mut() {
        *w /= sum;
    }
    GaussianMixture::new(weights, components)
}

/// Mixture measurement update: every (prior s⁻, measurement-noise r) pair
/// becomes one posterior component via an unscented measurement update, with
/// coefficients `α_{s⁻} · γ_r · s_r` where the likelihood `s_r` is the
/// innovation density evaluated at the prior component mean.
pub fn gmm_measurement_update(
    prior_mix: &GaussianMixture,
    meas_noise_mix: &GaussianMixture,
    model: &StateSpaceModel,
    p: &DVector<f64>,
    y: &DVector<f64>,
    ut_cfg: &UtConfig,
) -> Result<GaussianMixture> {
    let mut log_weights = Vec::with_capacity(prior_mix.len() * meas_noise_mix.len());
    let mut components = Vec::with_capacity(prior_mix.len() * meas_noise_mix.len());
    for (s, (comp, &alpha)) in prior_mix
        .components()
        .iter()
        .zip(prior_mix.weights())
        .enumerate()
    {
        let tag =
            |e: FilterError, r: usize| e.tagged(&format!("measurement-update component ({s},{r})"));
        let points = generate_sigma_points(comp, ut_cfg).map_err(|e| tag(e, 0))?;
        let predicted_at_mean = model.observe(comp.mean(), p).map_err(|e| tag(e, 0))?;
        for (r, (noise, &gamma)) in meas_noise_mix
            .components()
            .iter()
            .zip(meas_noise_mix.weights())
            .enumerate()
        {
            let update = measurement_update_with(
                comp,
                &points,
                y,
                noise.cov(),
                Some(noise.mean()),
                |x| model.observe(x, p),
            )
            .map_err(|e| tag(e, r))?;
            // likelihood of y with the state pinned at the prior mean
            let factor = DensityFactor::new(noise.cov()).map_err(|e| tag(e, r))?;
            let residual = y - (&predicted_at_mean + noise.mean());
            let loglik = factor.log_density(&residual);
            log_weights.push(alpha.ln() + gamma.ln() + loglik);
            components.push(update.posterior);
        }
    }
    let weights = normalize_log_weights(log_weights, "gmm_measurement_update")?;
    GaussianMixture::new(weights, components)
}

/// Draw `n` particles from the posterior mixture and weight them with the
/// exact importance ratio `p(y|x)·p(x|Y_{k-1})/p(x|Y_k)`.
#[allow(clippy::too_many_arguments)]
pub fn gmm_importance_sample<R: Rng + ?Sized>(
    posterior_mix: &GaussianMixture,
    prior_mix: &GaussianMixture,
    meas_noise_mix: &GaussianMixture,
    model: &StateSpaceModel,
    p: &DVector<f64>,
    y: &DVector<f64>,
    n: usize,
    rng: &mut R,
) -> Result<ParticleSet> {
    let prior_density = prior_mix.density()?;
    let posterior_density = posterior_mix.density()?;
    let noise_factors = meas_noise_mix
        .components()
        .iter()
        .map(|c| DensityFactor::new(c.cov()))
        .collect::<Result<Vec<_>>>()?;

    let mut particles = Vec::with_capacity(n);
    let mut log_w = Vec::with_capacity(n);
    for j in 0..n {
        let x = posterior_mix.sample(rng)?;
        let predicted = model.observe(&x, p).map_err(|e| e.tagged(&format!("particle {j}")))?;
        // measurement likelihood, itself a mixture over the noise components
        let lik_terms: Vec<f64> = meas_noise_mix
            .weights()
            .iter()
            .zip(meas_noise_mix.components())
            .zip(&noise_factors)
            .map(|((&gamma, noise), factor)| {
                gamma.ln() + factor.log_density(&(y - (&predicted + noise.mean())))
            })
            .collect();
        let loglik = log_sum_exp(&lik_terms);
        let log_post = posterior_density.logpdf(&x);
        if log_post == f64::NEG_INFINITY {
            return Err(FilterError::Contract(format!(
                "posterior mixture density underflowed to zero at its own draw (particle {j})"
            )));
        }
        log_w.push(loglik + prior_density.logpdf(&x) - log_post);
        particles.push(x);
    }
    let weights = normalize_log_weights(log_w, "gmm_importance_sample")?;
    Ok(ParticleSet { particles, weights })
}

/// Weighted EM fit of a `g_s`-component mixture to a weighted particle
/// cloud. Returns the fitted mixture and the accepted (monotone) weighted
/// log-likelihood trace, one entry per iteration.
pub fn em_fit_with_trace<R: Rng + ?Sized>(
    particles: &[DVector<f64>],
    weights: &[f64],
    g_s: usize,
    em_cfg: &EmConfig,
    rng: &mut R,
) -> Result<(GaussianMixture, Vec<f64>)> {
    let n = particles.len();
    if n < g_s || g_s == 0 {
        return Err(FilterError::Config(format!(
            "EM needs at least {g_s} particles, got {n}"
        )));
    }
    let global = weighted_moments(particles, weights)?;
    let d = global.dim();
    let scale = global.cov().trace() / d as f64;
    let floor = em_cfg.cov_floor * if scale > 0.0 { scale } else { 1.0 };
    let floor_mat = DMatrix::identity(d, d) * floor;

    // Single component: the weighted-moment closed form (floored).
    if g_s == 1 {
        let fitted = GaussianBelief::new(global.mean().clone(), global.cov() + &floor_mat)?;
        return Ok((GaussianMixture::single(fitted), Vec::new()));
    }

    // k-means++-style seeding from the weighted cloud.
    let mut centers: Vec<DVector<f64>> = vec![particles[categorical(weights, rng)].clone()];
    while centers.len() < g_s {
        let d2: Vec<f64> = particles
            .iter()
            .map(|x| {
                centers
                    .iter()
                    .map(|c| (x - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let mut probs: Vec<f64> = weights.iter().zip(&d2).map(|(&w, &dd)| w * dd).collect();
        let total = kahan_sum(probs.iter().copied());
        if total > 0.0 {
            for p in probs.iter_mut() {
                *p /= total;
            }
            centers.push(particles[categorical(&probs, rng)].clone());
        } else {
            // fewer distinct particles than components: duplicate the
            // heaviest particle, the floor keeps the component usable
            let best = argmax(weights);
            centers.push(particles[best].clone());
        }
    }
    let init_cov = global.cov() + &floor_mat;
    let mut alphas = vec![1.0 / g_s as f64; g_s];
    let mut means = centers;
    let mut covs = vec![init_cov.clone(); g_s];

    let mut lls: Vec<f64> = Vec::new();
    let mut responsibilities = vec![vec![0.0; g_s]; n];
    for _ in 0..em_cfg.max_iters {
        // E-step at the current parameters, and the weighted log-likelihood
        // of exactly those parameters.
        let factors = covs
            .iter()
            .map(|c| DensityFactor::new(c))
            .collect::<Result<Vec<_>>>()?;
        let mut ll = 0.0;
        for (j, x) in particles.iter().enumerate() {
            let terms: Vec<f64> = (0..g_s)
                .map(|s| alphas[s].ln() + factors[s].log_density(&(x - &means[s])))
                .collect();
            let lse = log_sum_exp(&terms);
            if lse.is_finite() {
                for s in 0..g_s {
                    responsibilities[j][s] = (terms[s] - lse).exp();
                }
            } else {
                // infinitely unlikely under every component: spread evenly
                for s in 0..g_s {
                    responsibilities[j][s] = 1.0 / g_s as f64;
                }
            }
            ll += weights[j] * lse;
        }

        if let Some(&prev) = lls.last() {
            if ll < prev - 1e-9 * (1.0 + prev.abs()) {
                // the covariance floor can nudge the likelihood downhill at
                // convergence; keep the previous (better) parameters
                break;
            }
            lls.push(ll);
            if (ll - prev).abs() < em_cfg.tol * (1.0 + prev.abs()) {
                break;
            }
        } else {
            lls.push(ll);
        }

        // M-step with particle weights folded into the responsibilities.
        for s in 0..g_s {
            let mass = kahan_sum((0..n).map(|j| weights[j] * responsibilities[j][s]));
            if mass <= 0.0 {
                // dead component: re-seed at the heaviest particle
                let best = argmax(weights);
                means[s] = particles[best].clone();
                covs[s] = init_cov.clone();
                alphas[s] = 1.0 / n as f64;
                continue;
            }
            let mut mean = DVector::zeros(d);
            for (j, x) in particles.iter().enumerate() {
                mean.axpy(weights[j] * responsibilities[j][s] / mass, x, 1.0);
            }
            let mut cov = floor_mat.clone();
            for (j, x) in particles.iter().enumerate() {
                let dx = x - &mean;
                cov.ger(weights[j] * responsibilities[j][s] / mass, &dx, &dx, 1.0);
            }
            alphas[s] = mass;
            means[s] = mean;
            covs[s] = cov;
        }
        let total = kahan_sum(alphas.iter().copied());
        for a in alphas.iter_mut() {
            *a /= total;
        }
    }

    let components = means
        .into_iter()
        .zip(covs)
        .map(|(m, c)| GaussianBelief::new(m, c))
        .collect::<Result<Vec<_>>>()?;
    Ok((GaussianMixture::new(alphas, components)?, lls))
}

/// [`em_fit_with_trace`] without the likelihood trace.
pub fn em_fit<R: Rng + ?Sized>(
    particles: &[DVector<f64>],
    weights: &[f64],
    g_s: usize,
    em_cfg: &EmConfig,
    rng: &mut R,
) -> Result<GaussianMixture> {
    em_fit_with_trace(particles, weights, g_s, em_cfg, rng).map(|(mix, _)| mix)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = j;
        }
    }
    best
}

/// Mixture inference `E[g(x)] = Σ_s α_s E[g(x_s)]`, the inner expectation
/// taken by an unscented transform under each component.
pub fn gmsppf_estimate(
    mix: &GaussianMixture,
    g: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
    ut_cfg: &UtConfig,
) -> Result<DVector<f64>> {
    let mut acc: Option<DVector<f64>> = None;
    for (comp, &alpha) in mix.components().iter().zip(mix.weights()) {
        let points = generate_sigma_points(comp, ut_cfg)?;
        let mapped = points.propagate(|x| g(x))?;
        let inner = mapped.mean();
        match acc.as_mut() {
            Some(a) => a.axpy(alpha, &inner, 1.0),
            None => acc = Some(inner * alpha),
        }
    }
    Ok(acc.expect("mixture has at least one component"))
}

/// Gaussian-mixture sigma-point particle filter over one model.
#[derive(Debug, Clone)]
pub struct Gmsppf {
    model: StateSpaceModel,
    cfg: GmsppfConfig,
    posterior: GaussianMixture,
    process_noise: GaussianMixture,
    meas_noise: GaussianMixture,
    seed: u64,
    step_index: u64,
}

impl Gmsppf {
    /// Initialize by drawing `cfg.particles` prior samples and fitting the
    /// starting `G_s`-component mixture to them. Noise mixtures default to
    /// the model's (zero-mean) covariances, replicated across `G_p`/`G_m`
    /// slots; distinct noise components enter via
    /// [`with_noise_mixtures`](Self::with_noise_mixtures).
    pub fn init(
        model: StateSpaceModel,
        prior: &GaussianBelief,
        cfg: GmsppfConfig,
        seed: u64,
    ) -> Result<Self> {
        if prior.dim() != model.state_dim() {
            return Err(FilterError::dims("Gmsppf prior", model.state_dim(), prior.dim()));
        }
        cfg.validate()?;
        cfg.ut.validate(model.state_dim())?;

        let replicate = |dim: usize, cov: &DMatrix<f64>, count: usize| -> Result<GaussianMixture> {
            let comp = GaussianBelief::new(DVector::zeros(dim), cov.clone())?;
            GaussianMixture::new(vec![1.0 / count as f64; count], vec![comp; count])
        };
        let process_noise = replicate(model.state_dim(), model.process_cov(), cfg.g_p)?;
        let meas_noise = replicate(model.obs_dim(), model.meas_cov(), cfg.g_m)?;

        let mut rng = substream(seed, 0, Lane::Init);
        let samples = prior.sample_n(cfg.particles, &mut rng)?;
        let uniform = vec![1.0 / cfg.particles as f64; cfg.particles];
        let posterior = em_fit(&samples, &uniform, cfg.g_s, &cfg.em, &mut rng)?;

        Ok(Self {
            model,
            cfg,
            posterior,
            process_noise,
            meas_noise,
            seed,
            step_index: 0,
        })
    }

    /// Replace the noise mixtures (sizes must match `G_p`/`G_m`).
    pub fn with_noise_mixtures(
        mut self,
        process: GaussianMixture,
        measurement: GaussianMixture,
    ) -> Result<Self> {
        if process.len() != self.cfg.g_p || process.dim() != self.model.state_dim() {
            return Err(FilterError::Config(
                "process-noise mixture size or dimension mismatch".into(),
            ));
        }
        if measurement.len() != self.cfg.g_m || measurement.dim() != self.model.obs_dim() {
            return Err(FilterError::Config(
                "measurement-noise mixture size or dimension mismatch".into(),
            ));
        }
        self.process_noise = process;
        self.meas_noise = measurement;
        Ok(self)
    }

    pub fn posterior(&self) -> &GaussianMixture {
        &self.posterior
    }

    pub fn model(&self) -> &StateSpaceModel {
        &self.model
    }

    pub fn mean(&self) -> DVector<f64> {
        self.posterior.mean()
    }

    /// One expand / sample / reweight / refit cycle.
    pub fn step(
        &mut self,
        p_prev: &DVector<f64>,
        p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<()> {
        self.step_index += 1;
        let k = self.step_index;
        let prior_mix = gmm_time_update(
            &self.posterior,
            &self.process_noise,
            &self.model,
            p_prev,
            &self.cfg.ut,
        )
        .map_err(|e| e.at_step(k as usize))?;
        let posterior_mix = gmm_measurement_update(
            &prior_mix,
            &self.meas_noise,
            &self.model,
            p_curr,
            y,
            &self.cfg.ut,
        )
        .map_err(|e| e.at_step(k as usize))?;

        let mut draw_rng = substream(self.seed, k, Lane::Proposal);
        let samples = gmm_importance_sample(
            &posterior_mix,
            &prior_mix,
            &self.meas_noise,
            &self.model,
            p_curr,
            y,
            self.cfg.particles,
            &mut draw_rng,
        )
        .map_err(|e| e.at_step(k as usize))?;

        // the refit is the mixture analog of resampling, so it shares that lane
        let mut em_rng = substream(self.seed, k, Lane::Resample);
        self.posterior = em_fit(
            &samples.particles,
            &samples.weights,
            self.cfg.g_s,
            &self.cfg.em,
            &mut em_rng,
        )
        .map_err(|e| e.at_step(k as usize))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn belief_1d(mean: f64, var: f64) -> GaussianBelief {
        GaussianBelief::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, var),
        )
        .unwrap()
    }

    fn linear_model(a: f64, q: f64, r: f64) -> StateSpaceModel {
        StateSpaceModel::new(
            1,
            0,
            1,
            1.0,
            move |x, _| Ok(x * a),
            |x, _| Ok(x.clone()),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )
        .unwrap()
    }

    #[test]
    fn construction_validates_weights_and_dims() {
        let c = belief_1d(0.0, 1.0);
        assert!(GaussianMixture::new(vec![], vec![]).is_err());
        assert!(GaussianMixture::new(vec![0.6, 0.6], vec![c.clone(), c.clone()]).is_err());
        assert!(GaussianMixture::new(vec![-0.5, 1.5], vec![c.clone(), c.clone()]).is_err());
        let two_d = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(GaussianMixture::new(vec![0.5, 0.5], vec![c.clone(), two_d]).is_err());
        assert!(GaussianMixture::new(vec![0.5, 0.5], vec![c.clone(), c]).is_ok());
    }

    #[test]
    fn single_component_logpdf_equals_gaussian() {
        let c = belief_1d(1.5, 0.7);
        let mix = GaussianMixture::single(c.clone());
        let x = DVector::from_element(1, 0.3);
        assert_relative_eq!(
            mix.logpdf(&x).unwrap(),
            c.log_density(&x).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn identical_components_collapse() {
        let c = belief_1d(-0.4, 2.0);
        let mix = GaussianMixture::new(vec![0.5, 0.5], vec![c.clone(), c.clone()]).unwrap();
        let x = DVector::from_element(1, 1.1);
        assert_relative_eq!(
            mix.logpdf(&x).unwrap(),
            c.log_density(&x).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn symmetric_two_component_hand_value() {
        // {½ N(−2,1), ½ N(2,1)} at x = 0: log density is −2 − ½ ln 2π
        let mix = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![belief_1d(-2.0, 1.0), belief_1d(2.0, 1.0)],
        )
        .unwrap();
        let expected = -2.0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(
            mix.logpdf(&DVector::zeros(1)).unwrap(),
            expected,
            epsilon = 1e-12
        );
        assert_relative_eq!(expected, -2.918_938_533_204_672_7, epsilon = 1e-12);
    }

    #[test]
    fn mixture_moments_are_exact() {
        // {0.3 at N(0,1), 0.7 at N(10,4)}: mean 7, var = 0.3·1+0.7·4+0.3·49+0.7·9
        let mix = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![belief_1d(0.0, 1.0), belief_1d(10.0, 4.0)],
        )
        .unwrap();
        let m = mix.moments().unwrap();
        assert_relative_eq!(m.mean()[0], 7.0, epsilon = 1e-12);
        let expected_var = 0.3 * 1.0 + 0.7 * 4.0 + 0.3 * 49.0 + 0.7 * 9.0;
        assert_relative_eq!(m.cov()[(0, 0)], expected_var, epsilon = 1e-12);
    }

    #[test]
    fn time_update_single_noise_matches_kf_prediction() {
        let (a, q) = (0.85, 0.3);
        let model = linear_model(a, q, 1.0);
        let mix = GaussianMixture::new(
            vec![0.4, 0.6],
            vec![belief_1d(1.0, 0.5), belief_1d(-2.0, 0.2)],
        )
        .unwrap();
        let noise = GaussianMixture::single(belief_1d(0.0, q));
        let out = gmm_time_update(&mix, &noise, &model, &DVector::zeros(0), &UtConfig::default())
            .unwrap();
        assert_eq!(out.len(), 2);
        assert_relative_eq!(out.weights()[0], 0.4, epsilon = 1e-12);
        assert_relative_eq!(out.weights()[1], 0.6, epsilon = 1e-12);
        for (c, (m0, v0)) in out.components().iter().zip([(1.0, 0.5), (-2.0, 0.2)]) {
            assert_relative_eq!(c.mean()[0], a * m0, max_relative = 1e-10);
            assert_relative_eq!(c.cov()[(0, 0)], a * a * v0 + q, max_relative = 1e-10);
        }
    }

    #[test]
    fn time_update_weight_products_normalize() {
        let model = linear_model(1.0, 0.1, 1.0);
        let mix = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![belief_1d(0.0, 1.0), belief_1d(1.0, 1.0)],
        )
        .unwrap();
        let noise = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![belief_1d(-0.1, 0.1), belief_1d(0.1, 0.2)],
        )
        .unwrap();
        let out = gmm_time_update(&mix, &noise, &model, &DVector::zeros(0), &UtConfig::default())
            .unwrap();
        assert_eq!(out.len(), 4);
        for w in out.weights() {
            assert_relative_eq!(*w, 0.25, epsilon = 1e-12);
        }
        // noise means shift the component means
        assert_relative_eq!(out.components()[0].mean()[0], -0.1, max_relative = 1e-9);
        assert_relative_eq!(out.components()[1].mean()[0], 0.1, max_relative = 1e-9);
    }

    #[test]
    fn measurement_update_single_pair_matches_kf() {
        let (mp, vp, r, y) = (1.0, 0.5, 0.3, 1.6);
        let model = linear_model(1.0, 0.0, r);
        let prior = GaussianMixture::single(belief_1d(mp, vp));
        let noise = GaussianMixture::single(belief_1d(0.0, r));
        let out = gmm_measurement_update(
            &prior,
            &noise,
            &model,
            &DVector::zeros(0),
            &DVector::from_element(1, y),
            &UtConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out.weights()[0], 1.0, epsilon = 1e-12);
        let gain = vp / (vp + r);
        assert_relative_eq!(
            out.components()[0].mean()[0],
            mp + gain * (y - mp),
            max_relative = 1e-10
        );
        assert_relative_eq!(
            out.components()[0].cov()[(0, 0)],
            (1.0 - gain) * vp,
            max_relative = 1e-10
        );
    }

    #[test]
    fn uninformative_measurement_keeps_prior_weights() {
        let model = linear_model(1.0, 0.0, 1e12);
        let prior = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![belief_1d(0.0, 1.0), belief_1d(5.0, 1.0)],
        )
        .unwrap();
        let noise = GaussianMixture::single(belief_1d(0.0, 1e12));
        let out = gmm_measurement_update(
            &prior,
            &noise,
            &model,
            &DVector::zeros(0),
            &DVector::from_element(1, 2.0),
            &UtConfig::default(),
        )
        .unwrap();
        assert_relative_eq!(out.weights()[0], 0.3, epsilon = 1e-6);
        assert_relative_eq!(out.weights()[1], 0.7, epsilon = 1e-6);
    }

    #[test]
    fn far_component_weight_collapses() {
        // one prior component sits on the measurement, the other 10σ away
        let r = 1.0;
        let model = linear_model(1.0, 0.0, r);
        let prior = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![belief_1d(0.0, 1e-12), belief_1d(10.0, 1e-12)],
        )
        .unwrap();
        let noise = GaussianMixture::single(belief_1d(0.0, r));
        let out = gmm_measurement_update(
            &prior,
            &noise,
            &model,
            &DVector::zeros(0),
            &DVector::zeros(1),
            &UtConfig::default(),
        )
        .unwrap();
        assert!(out.weights()[1] < 1e-20, "far weight {}", out.weights()[1]);
        assert_relative_eq!(out.weights()[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn conjugate_posterior_draws_have_uniform_weights() {
        let (mp, vp, r, y) = (0.4, 0.6, 0.5, 1.2);
        let model = linear_model(1.0, 0.0, r);
        let gain = vp / (vp + r);
        let posterior = GaussianMixture::single(belief_1d(mp + gain * (y - mp), (1.0 - gain) * vp));
        let prior = GaussianMixture::single(belief_1d(mp, vp));
        let noise = GaussianMixture::single(belief_1d(0.0, r));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let out = gmm_importance_sample(
            &posterior,
            &prior,
            &noise,
            &model,
            &DVector::zeros(0),
            &DVector::from_element(1, y),
            256,
            &mut rng,
        )
        .unwrap();
        for w in &out.weights {
            assert!((w - 1.0 / 256.0).abs() < 1e-8, "weight {w}");
        }
    }

    #[test]
    fn posterior_equal_prior_reduces_to_likelihood_weights() {
        let model = linear_model(1.0, 0.0, 0.8);
        let shared = GaussianMixture::single(belief_1d(0.0, 2.0));
        let noise = GaussianMixture::single(belief_1d(0.0, 0.8));
        let y = DVector::from_element(1, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = gmm_importance_sample(
            &shared,
            &shared,
            &noise,
            &model,
            &DVector::zeros(0),
            &y,
            64,
            &mut rng,
        )
        .unwrap();
        // weights must be proportional to the plain likelihood at each draw
        let factor = DensityFactor::new(model.meas_cov()).unwrap();
        let logliks: Vec<f64> = out
            .particles
            .iter()
            .map(|x| factor.log_density(&(&y - x)))
            .collect();
        let norm = normalize_log_weights(logliks, "test").unwrap();
        for (a, b) in out.weights.iter().zip(&norm) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn em_single_component_is_weighted_moments_with_floor() {
        let particles: Vec<DVector<f64>> = [0.0, 1.0, 2.0, 5.0]
            .iter()
            .map(|&v| DVector::from_element(1, v))
            .collect();
        let weights = vec![0.1, 0.2, 0.3, 0.4];
        let em = EmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mix = em_fit(&particles, &weights, 1, &em, &mut rng).unwrap();
        let oracle = weighted_moments(&particles, &weights).unwrap();
        assert_eq!(mix.len(), 1);
        assert_eq!(mix.components()[0].mean(), oracle.mean());
        let floor = em.cov_floor * oracle.cov().trace();
        assert_relative_eq!(
            mix.components()[0].cov()[(0, 0)],
            oracle.cov()[(0, 0)] + floor,
            epsilon = 1e-15
        );
    }

    #[test]
    fn em_recovers_two_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 2000;
        let mut particles = Vec::with_capacity(n);
        for j in 0..n {
            let center = if j % 2 == 0 { -10.0 } else { 10.0 };
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            particles.push(DVector::from_element(1, center + z));
        }
        let weights = vec![1.0 / n as f64; n];
        let (mix, lls) =
            em_fit_with_trace(&particles, &weights, 2, &EmConfig::default(), &mut rng).unwrap();
        let mut means: Vec<f64> = mix.components().iter().map(|c| c.mean()[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 10.0).abs() < 0.2, "mean {}", means[0]);
        assert!((means[1] - 10.0).abs() < 0.2, "mean {}", means[1]);
        for w in mix.weights() {
            assert!((w - 0.5).abs() < 0.05, "weight {w}");
        }
        // monotone non-decreasing accepted log-likelihood trace
        for pair in lls.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-9 * (1.0 + pair[0].abs()),
                "log-likelihood decreased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn em_identical_particles_sit_at_the_floor() {
        let particles = vec![DVector::from_element(1, 3.0); 10];
        let weights = vec![0.1; 10];
        let em = EmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mix = em_fit(&particles, &weights, 2, &em, &mut rng).unwrap();
        for c in mix.components() {
            assert_eq!(c.mean()[0], 3.0);
            // zero spread: the yardstick falls back to 1, cov = cov_floor
            assert_relative_eq!(c.cov()[(0, 0)], em.cov_floor, max_relative = 1e-9);
        }
    }

    #[test]
    fn estimate_examples() {
        let ut = UtConfig::default();
        let single = GaussianMixture::single(belief_1d(4.2, 1.0));
        let id = gmsppf_estimate(&single, |x| Ok(x.clone()), &ut).unwrap();
        assert_relative_eq!(id[0], 4.2, epsilon = 1e-12);

        let two = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![belief_1d(0.0, 1.0), belief_1d(10.0, 1.0)],
        )
        .unwrap();
        let id2 = gmsppf_estimate(&two, |x| Ok(x.clone()), &ut).unwrap();
        assert_relative_eq!(id2[0], 7.0, epsilon = 1e-10);

        // E[x²] under N(μ, σ²) is exactly μ² + σ² for the unscented transform
        let (mu, var) = (1.3, 0.49);
        let sq = gmsppf_estimate(
            &GaussianMixture::single(belief_1d(mu, var)),
            |x| Ok(DVector::from_element(1, x[0] * x[0])),
            &ut,
        )
        .unwrap();
        assert_relative_eq!(sq[0], mu * mu + var, max_relative = 1e-10);
    }

    #[test]
    fn component_counts_track_the_configured_sizes() {
        let model = linear_model(0.9, 0.2, 0.4);
        let state = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![belief_1d(0.0, 1.0), belief_1d(1.0, 0.5)],
        )
        .unwrap();
        let pnoise = GaussianMixture::new(
            vec![0.6, 0.4],
            vec![belief_1d(0.0, 0.2), belief_1d(0.0, 0.3)],
        )
        .unwrap();
        let mnoise = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![belief_1d(0.0, 0.4), belief_1d(0.1, 0.5)],
        )
        .unwrap();
        let ut = UtConfig::default();
        let empty = DVector::zeros(0);
        let prior = gmm_time_update(&state, &pnoise, &model, &empty, &ut).unwrap();
        assert_eq!(prior.len(), 4); // G_s · G_p
        let post = gmm_measurement_update(
            &prior,
            &mnoise,
            &model,
            &empty,
            &DVector::from_element(1, 0.5),
            &ut,
        )
        .unwrap();
        assert_eq!(post.len(), 8); // G_s · G_p · G_m
    }

    #[test]
    fn degenerate_mixture_filter_tracks_kf() {
        // G_s = G_p = G_m = 1 on a linear model: every stage is exact, so
        // the refit mean stays within Monte Carlo distance of the KF.
        let (a, q, r) = (0.9, 0.2, 0.3);
        let model = linear_model(a, q, r);
        let prior = belief_1d(1.0, 0.5);
        let n = 2000;
        let mut filter = Gmsppf::init(
            model,
            &prior,
            GmsppfConfig {
                g_s: 1,
                g_p: 1,
                g_m: 1,
                particles: n,
                ..Default::default()
            },
            23,
        )
        .unwrap();
        let (mut m, mut v) = (1.0, 0.5);
        let empty = DVector::zeros(0);
        for k in 1..=5u64 {
            let y = 0.6 * (k as f64 * 0.9).sin() + 0.2;
            filter.step(&empty, &empty, &DVector::from_element(1, y)).unwrap();
            let (mp, vp) = (a * m, a * a * v + q);
            let gain = vp / (vp + r);
            m = mp + gain * (y - mp);
            v = (1.0 - gain) * vp;
            assert_eq!(filter.posterior().len(), 1);
        }
        let tol = 4.0 * v.sqrt() / (n as f64).sqrt();
        assert!(
            (filter.mean()[0] - m).abs() < tol,
            "mixture {} vs kf {m} (tol {tol})",
            filter.mean()[0]
        );
    }

    #[test]
    fn filter_is_deterministic_per_seed() {
        let model = linear_model(0.9, 0.1, 0.2);
        let prior = belief_1d(0.0, 1.0);
        let cfg = GmsppfConfig {
            g_s: 2,
            particles: 100,
            ..Default::default()
        };
        let mut a = Gmsppf::init(model.clone(), &prior, cfg.clone(), 31).unwrap();
        let mut b = Gmsppf::init(model, &prior, cfg, 31).unwrap();
        let empty = DVector::zeros(0);
        for k in 0..6 {
            let y = DVector::from_element(1, (k as f64 * 0.7).cos());
            a.step(&empty, &empty, &y).unwrap();
            b.step(&empty, &empty, &y).unwrap();
        }
        assert_eq!(a.mean(), b.mean());
        assert_eq!(a.posterior().weights(), b.posterior().weights());
    }

    #[test]
    fn config_validation() {
        let model = linear_model(1.0, 0.1, 0.1);
        let prior = belief_1d(0.0, 1.0);
        let bad_sizes = GmsppfConfig {
            g_s: 0,
            ..Default::default()
        };
        assert!(Gmsppf::init(model.clone(), &prior, bad_sizes, 0).is_err());
        let too_few = GmsppfConfig {
            g_s: 5,
            particles: 3,
            ..Default::default()
        };
        assert!(Gmsppf::init(model, &prior, too_few, 0).is_err());
    }
}
