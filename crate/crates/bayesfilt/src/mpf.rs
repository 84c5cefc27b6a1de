//! Particle filter with mutation: a bootstrap filter whose resampling stage
//! fights parameter-sample impoverishment.
//!
//! Time-invariant state components (augmented parameters) receive no process
//! noise worth mentioning, so ordinary resampling collapses their support to
//! a handful of survivors. Two genetic-algorithm-flavoured counters are
//! applied during resampling: unfit particles are probabilistically replaced
//! by the propagated previous posterior estimate, and parameter components
//! get a multiplicative creep mutation `x ← x·(1 + d·(m − 0.5))`, `m ~
//! U(0,1)`. Mutated particles are penalized in proportion to how far they
//! moved: `w = (1/N)·1/(‖Δx‖/‖x‖ + 1)`.

use nalgebra::DVector;
use rand::Rng;

use crate::error::FilterError;
use crate::gaussian::GaussianBelief;
use crate::model::StateSpaceModel;
use crate::particle::{
    bootstrap_propagate, effective_sample_size, likelihood_reweight_with_floor, resample_indices,
    ParticleSet, ResamplingPolicy, DEFAULT_DIVERGENCE_MAHALANOBIS_PER_CHANNEL,
};
use crate::rng::{substream, Lane};
use crate::Result;

/// Mutation-stage configuration.
#[derive(Debug, Clone)]
pub struct MutationConfig {
    /// Probability that an unfit particle is replaced by the prior estimate.
    pub p_r: f64,
    /// Per-component mutation probability.
    pub p_m: f64,
    /// Perturbation radius `d_i`, aligned with `invariant_indices`.
    pub radius: Vec<f64>,
    /// State components that are time-invariant parameters.
    pub invariant_indices: Vec<usize>,
    /// Restrict the penalty norm ratio to the invariant components instead
    /// of the full state vector.
    pub invariant_norm: bool,
}

impl Default for MutationConfig {
    fn default() -> Self {
        Self {
            p_r: 0.05,
            p_m: 0.25,
            radius: vec![0.2],
            invariant_indices: vec![0],
            invariant_norm: false,
        }
    }
}

impl MutationConfig {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        for (name, p) in [("p_r", self.p_r), ("p_m", self.p_m)] {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(FilterError::Config(format!(
                    "mutation probability {name} = {p} outside [0, 1]"
                )));
            }
        }
        if self.invariant_indices.is_empty() {
            return Err(FilterError::Config(
                "invariant_indices is empty: with nothing to mutate this filter degenerates \
                 to the bootstrap PF"
                    .into(),
            ));
        }
        if self.radius.len() != self.invariant_indices.len() {
            return Err(FilterError::dims(
                "mutation radius list",
                self.invariant_indices.len(),
                self.radius.len(),
            ));
        }
        if self.radius.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(FilterError::Config("mutation radius must be > 0".into()));
        }
        if let Some(&bad) = self.invariant_indices.iter().find(|&&i| i >= state_dim) {
            return Err(FilterError::Config(format!(
                "invariant index {bad} outside state dimension {state_dim}"
            )));
        }
        Ok(())
    }
}

/// Overwrite each listed particle by `prior_mean`, independently with
/// probability `p_r`.
pub fn replace_unfit_with_prior<R: Rng + ?Sized>(
    ps: &ParticleSet,
    unfit_indices: &[usize],
    prior_mean: &DVector<f64>,
    cfg: &MutationConfig,
    rng: &mut R,
) -> ParticleSet {
    let mut out = ps.clone();
    for &j in unfit_indices {
        if rng.gen_bool(cfg.p_r) {
            out.particles[j] = prior_mean.clone();
        }
    }
    out
}

/// The creep-mutation map: multiplicative perturbation of radius `d` at
/// uniform draw `m` (`m = 0.5` is the fixed point).
fn creep(x: f64, d: f64, m: f64) -> f64 {
    x * (1.0 + d * (m - 0.5))
}

/// Apply creep mutation to the invariant components of every particle.
///
/// Each invariant component is independently perturbed with probability
/// `p_m`; the returned flags mark particles with at least one mutated
/// component.
pub fn mutate<R: Rng + ?Sized>(
    ps: &ParticleSet,
    cfg: &MutationConfig,
    rng: &mut R,
) -> (ParticleSet, Vec<bool>) {
    let mut out = ps.clone();
    let mut flags = vec![false; ps.len()];
    for (j, x) in out.particles.iter_mut().enumerate() {
        for (&i, &d) in cfg.invariant_indices.iter().zip(&cfg.radius) {
            if rng.gen_bool(cfg.p_m) {
                let m: f64 = rng.gen();
                x[i] = creep(x[i], d, m);
                flags[j] = true;
            }
        }
    }
    (out, flags)
}

fn penalty_norm(v: &DVector<f64>, cfg: &MutationConfig) -> f64 {
    if cfg.invariant_norm {
        cfg.invariant_indices
            .iter()
            .map(|&i| v[i] * v[i])
            .sum::<f64>()
            .sqrt()
    } else {
        v.norm()
    }
}

/// Reassign weights after mutation: mutated particle `j` gets
/// `w = (1/N)·1/(‖Δx‖/‖x‖ + 1)` against its pre-mutation parent, non-mutated
/// particles keep `1/N`, and the set is normalized.
pub fn mutation_weights(
    ps: &ParticleSet,
    parent_particles: &[DVector<f64>],
    mutated_flags: &[bool],
    n: usize,
    cfg: &MutationConfig,
) -> Result<ParticleSet> {
    if parent_particles.len() != ps.len() || mutated_flags.len() != ps.len() {
        return Err(FilterError::dims(
            "mutation_weights parents/flags",
            ps.len(),
            parent_particles.len().min(mutated_flags.len()),
        ));
    }
    let base = 1.0 / n as f64;
    let mut weights = Vec::with_capacity(ps.len());
    for (j, flag) in mutated_flags.iter().enumerate() {
        if !flag {
            weights.push(base);
            continue;
        }
        let delta = &ps.particles[j] - &parent_particles[j];
        let parent_norm = penalty_norm(&parent_particles[j], cfg);
        if parent_norm == 0.0 {
            weights.push(base);
        } else {
            weights.push(base / (penalty_norm(&delta, cfg) / parent_norm + 1.0));
        }
    }
    let sum: f64 = crate::gaussian::kahan_sum(weights.iter().copied());
    for w in weights.iter_mut() {
        *w /= sum;
    }
    Ok(ParticleSet {
        particles: ps.particles.clone(),
        weights,
    })
}

/// Configuration of the mutation particle filter.
#[derive(Debug, Clone)]
pub struct MpfConfig {
    pub particles: usize,
    pub policy: ResamplingPolicy,
    /// See [`crate::particle::likelihood_reweight_with_floor`]; `NAN` means
    /// the per-dimension crate default, `INFINITY` disables.
    pub divergence_mahalanobis_sq: f64,
    pub mutation: MutationConfig,
}

impl Default for MpfConfig {
    fn default() -> Self {
        Self {
            particles: 400,
            policy: ResamplingPolicy::default(),
            divergence_mahalanobis_sq: f64::NAN,
            mutation: MutationConfig::default(),
        }
    }
}

/// Mutation particle filter over one model.
#[derive(Debug, Clone)]
pub struct Mpf {
    model: StateSpaceModel,
    cfg: MpfConfig,
    set: ParticleSet,
    seed: u64,
    step_index: u64,
}

impl Mpf {
    pub fn init(
        model: StateSpaceModel,
        prior: &GaussianBelief,
        cfg: MpfConfig,
        seed: u64,
    ) -> Result<Self> {
        if prior.dim() != model.state_dim() {
            return Err(FilterError::dims("Mpf prior", model.state_dim(), prior.dim()));
        }
        if cfg.particles == 0 {
            return Err(FilterError::Config("particle count must be positive".into()));
        }
        cfg.policy.validate()?;
        cfg.mutation.validate(model.state_dim())?;
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

    /// One propagate / reweight / (conditional) mutate-resample cycle.
    pub fn step(
        &mut self,
        p_prev: &DVector<f64>,
        p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<()> {
        self.step_index += 1;
        let k = self.step_index;
        // previous posterior point estimate, needed for prior replacement
        let prev_estimate = self.set.mean();

        let mut prop_rng = substream(self.seed, k, Lane::Propagate);
        let propagated = bootstrap_propagate(&self.set, &self.model, p_prev, &mut prop_rng)
            .map_err(|e| e.at_step(k as usize))?;
        let floor = if self.cfg.divergence_mahalanobis_sq.is_nan() {
            DEFAULT_DIVERGENCE_MAHALANOBIS_PER_CHANNEL * self.model.obs_dim() as f64
        } else {
            self.cfg.divergence_mahalanobis_sq
        };
        let weighted =
            likelihood_reweight_with_floor(&propagated, &self.model, p_curr, y, floor)
                .map_err(|e| e.at_step(k as usize))?;

        let n = weighted.len();
        let n_t = self.cfg.policy.threshold_fraction * n as f64;
        if effective_sample_size(&weighted.weights) >= n_t {
            self.set = weighted;
            return Ok(());
        }

        // Unfit particles: pre-resampling weight below uniform.
        let unfit: Vec<bool> = weighted.weights.iter().map(|&w| w < 1.0 / n as f64).collect();
        let mut res_rng = substream(self.seed, k, Lane::Resample);
        let parents_idx =
            resample_indices(&weighted.weights, n, self.cfg.policy.scheme, &mut res_rng);
        let resampled = ParticleSet {
            particles: parents_idx
                .iter()
                .map(|&j| weighted.particles[j].clone())
                .collect(),
            weights: vec![1.0 / n as f64; n],
        };

        // Slots that duplicated an unfit parent are replacement candidates.
        let unfit_slots: Vec<usize> = parents_idx
            .iter()
            .enumerate()
            .filter_map(|(slot, &parent)| unfit[parent].then_some(slot))
            .collect();
        let prior_mean = self
            .model
            .transition(&prev_estimate, p_prev)
            .map_err(|e| e.at_step(k as usize))?;
        let mut rep_rng = substream(self.seed, k, Lane::Replace);
        let replaced = replace_unfit_with_prior(
            &resampled,
            &unfit_slots,
            &prior_mean,
            &self.cfg.mutation,
            &mut rep_rng,
        );

        let mut mut_rng = substream(self.seed, k, Lane::Mutate);
        let (mutated, flags) = mutate(&replaced, &self.cfg.mutation, &mut mut_rng);
        self.set = mutation_weights(&mutated, &replaced.particles, &flags, n, &self.cfg.mutation)
            .map_err(|e| e.at_step(k as usize))?;
        Ok(())
    }
}
