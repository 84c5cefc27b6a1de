//! Rao-Blackwellised particle filter: sample only a sub-vector of the state
//! with particles and integrate the rest analytically.
//!
//! The state is split as `x = [x^a; x^b]` (in arbitrary index order). Each
//! particle carries a value of `x^a` plus a Gaussian belief over `x^b`
//! maintained by a per-particle conditional filter — an exact Kalman filter
//! when the model declares linear conditional structure, an unscented filter
//! otherwise. Particle weights multiply the marginal innovation likelihood
//! `N(y; ŷ^j, S^j)` of each conditional filter, which is what removes the
//! `x^b` sampling noise and buys the Rao-Blackwell variance reduction.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::FilterError;
use crate::gaussian::{matrix_sqrt, DensityFactor, GaussianBelief};
use crate::model::StateSpaceModel;
use crate::particle::{
    effective_sample_size, normalize_log_weights, resample_indices, ResamplingPolicy,
    DEFAULT_DIVERGENCE_MAHALANOBIS_PER_CHANNEL,
};
use crate::rng::{substream, Lane};
use crate::ukf::{generate_sigma_points, measurement_update_with, UtConfig};
use crate::Result;

/// Matrix-valued function of `(x^a, p)`.
pub type CondMatFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// Vector-valued function of `(x^a, p)`.
pub type CondVecFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Declaration that, conditional on `x^a`, the model is linear in `x^b`:
/// `x^b_k = A·x^b_{k-1} + c + v_b` and `y_k = H·x^b_k + d + w`, with all
/// four pieces functions of `(x^a, p)`. When present, the per-particle
/// conditional filter is the exact Kalman filter.
#[derive(Clone)]
pub struct LinearConditionalModel {
    pub transition_matrix: CondMatFn,
    pub transition_offset: CondVecFn,
    pub observation_matrix: CondMatFn,
    pub observation_offset: CondVecFn,
}

impl std::fmt::Debug for LinearConditionalModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearConditionalModel").finish_non_exhaustive()
    }
}

/// State split: `a_indices` are sampled with particles, the complement is
/// marginalized.
#[derive(Debug, Clone)]
pub struct Partition {
    a_indices: Vec<usize>,
    b_indices: Vec<usize>,
}

impl Partition {
    /// Build a partition of `0..state_dim` from the sampled indices.
    pub fn new(mut a_indices: Vec<usize>, state_dim: usize) -> Result<Self> {
        a_indices.sort_unstable();
        a_indices.dedup();
        if a_indices.is_empty() {
            return Err(FilterError::Config(
                "partition needs at least one sampled index (marginalizing everything \
                 leaves nothing to weight particles with)"
                    .into(),
            ));
        }
        if let Some(&bad) = a_indices.iter().find(|&&i| i >= state_dim) {
            return Err(FilterError::Config(format!(
                "partition index {bad} outside state dimension {state_dim}"
            )));
        }
        let b_indices = (0..state_dim).filter(|i| !a_indices.contains(i)).collect();
        Ok(Self {
            a_indices,
            b_indices,
        })
    }

    pub fn a_indices(&self) -> &[usize] {
        &self.a_indices
    }

    pub fn b_indices(&self) -> &[usize] {
        &self.b_indices
    }

    pub fn n_a(&self) -> usize {
        self.a_indices.len()
    }

    pub fn n_b(&self) -> usize {
        self.b_indices.len()
    }

    /// Split a full state vector into its `(a, b)` parts.
    pub fn split(&self, full: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_fn(self.n_a(), |i, _| full[self.a_indices[i]]),
            DVector::from_fn(self.n_b(), |i, _| full[self.b_indices[i]]),
        )
    }

    /// Reassemble a full state vector from its `(a, b)` parts.
    pub fn combine(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(self.n_a() + self.n_b());
        for (i, &idx) in self.a_indices.iter().enumerate() {
            full[idx] = a[i];
        }
        for (i, &idx) in self.b_indices.iter().enumerate() {
            full[idx] = b[i];
        }
        full
    }

    fn block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
    }
}

/// Weighted particle representation of `x^a` with one conditional Gaussian
/// belief over `x^b` per particle.
#[derive(Debug, Clone)]
pub struct PartitionedBelief {
    pub a_particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub b_beliefs: Vec<GaussianBelief>,
}

impl PartitionedBelief {
    pub fn len(&self) -> usize {
        self.a_particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_particles.is_empty()
    }
}

/// Configuration of the Rao-Blackwellised filter.
#[derive(Debug, Clone)]
pub struct RbpfConfig {
    pub particles: usize,
    pub policy: ResamplingPolicy,
    /// State indices carried by particles; the complement is marginalized.
    pub a_indices: Vec<usize>,
    /// Linear conditional structure, if the model has one (enables the exact
    /// KF path for the marginalized sub-state).
    pub linear: Option<LinearConditionalModel>,
    pub ut: UtConfig,
    /// Divergence threshold on the innovation Mahalanobis distance; `NAN`
    /// means the per-dimension crate default, `INFINITY` disables.
    pub divergence_mahalanobis_sq: f64,
}

impl Default for RbpfConfig {
    fn default() -> Self {
        Self {
            particles: 70,
            policy: ResamplingPolicy::default(),
            a_indices: vec![0],
            linear: None,
            ut: UtConfig::default(),
            divergence_mahalanobis_sq: f64::NAN,
        }
    }
}

/// Rao-Blackwellised particle filter over one model.
#[derive(Debug, Clone)]
pub struct Rbpf {
    model: StateSpaceModel,
    cfg: RbpfConfig,
    partition: Partition,
    belief: PartitionedBelief,
    q_aa_sqrt: DMatrix<f64>,
    q_bb: DMatrix<f64>,
    seed: u64,
    step_index: u64,
}

impl Rbpf {
    /// Initialize from a full-state prior: `x^a` particles are drawn from
    /// the prior's `a`-marginal, every conditional belief starts at the
    /// prior's `b`-marginal. Cross-covariance between the blocks must be
    /// zero — the factorization assumes independent priors and
    /// block-diagonal process noise.
    pub fn init(
        model: StateSpaceModel,
        prior: &GaussianBelief,
        cfg: RbpfConfig,
        seed: u64,
    ) -> Result<Self> {
        if prior.dim() != model.state_dim() {
            return Err(FilterError::dims("Rbpf prior", model.state_dim(), prior.dim()));
        }
        if cfg.particles == 0 {
            return Err(FilterError::Config("particle count must be positive".into()));
        }
        cfg.policy.validate()?;
        let partition = Partition::new(cfg.a_indices.clone(), model.state_dim())?;
        cfg.ut.validate(partition.n_b())?;

        let q = model.process_cov();
        let q_ab = Partition::block(q, partition.a_indices(), partition.b_indices());
        if q_ab.iter().any(|v| *v != 0.0) {
            return Err(FilterError::Config(
                "process noise couples the sampled and marginalized blocks; the \
                 Rao-Blackwell factorization needs a block-diagonal Q over the partition"
                    .into(),
            ));
        }
        let p_ab = Partition::block(prior.cov(), partition.a_indices(), partition.b_indices());
        if p_ab.iter().any(|v| *v != 0.0) {
            return Err(FilterError::Config(
                "prior covariance couples the sampled and marginalized blocks".into(),
            ));
        }
        let q_aa = Partition::block(q, partition.a_indices(), partition.a_indices());
        let q_bb = Partition::block(q, partition.b_indices(), partition.b_indices());
        let q_aa_sqrt = matrix_sqrt(&q_aa)?;

        let (mean_a, mean_b) = partition.split(prior.mean());
        let p_aa = Partition::block(prior.cov(), partition.a_indices(), partition.a_indices());
        let p_bb = Partition::block(prior.cov(), partition.b_indices(), partition.b_indices());
        let a_prior = GaussianBelief::new(mean_a, p_aa)?;
        let b_prior = GaussianBelief::new(mean_b, p_bb)?;

        let mut rng = substream(seed, 0, Lane::Init);
        let a_particles = a_prior.sample_n(cfg.particles, &mut rng)?;
        let belief = PartitionedBelief {
            weights: vec![1.0 / cfg.particles as f64; cfg.particles],
            b_beliefs: vec![b_prior; cfg.particles],
            a_particles,
        };
        Ok(Self {
            model,
            cfg,
            partition,
            belief,
            q_aa_sqrt,
            q_bb,
            seed,
            step_index: 0,
        })
    }

    pub fn belief(&self) -> &PartitionedBelief {
        &self.belief
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn model(&self) -> &StateSpaceModel {
        &self.model
    }

    /// MMSE estimate of the full state:
    /// `Σ w^j · combine(x^{a,j}, mean(b_belief^j))`.
    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.model.state_dim());
        for ((a, b), &w) in self
            .belief
            .a_particles
            .iter()
            .zip(&self.belief.b_beliefs)
            .zip(&self.belief.weights)
        {
            acc.axpy(w, &self.partition.combine(a, b.mean()), 1.0);
        }
        acc
    }

    /// Full-state mean and covariance, the conditional covariances embedded
    /// in the marginalized block.
    pub fn moments(&self) -> Result<GaussianBelief> {
        let mean = self.mean();
        let n = self.model.state_dim();
        let mut cov = DMatrix::zeros(n, n);
        for ((a, b), &w) in self
            .belief
            .a_particles
            .iter()
            .zip(&self.belief.b_beliefs)
            .zip(&self.belief.weights)
        {
            for (i, &bi) in self.partition.b_indices().iter().enumerate() {
                for (j, &bj) in self.partition.b_indices().iter().enumerate() {
                    cov[(bi, bj)] += w * b.cov()[(i, j)];
                }
            }
            let d = self.partition.combine(a, b.mean()) - &mean;
            cov.ger(w, &d, &d, 1.0);
        }
        GaussianBelief::new(mean, cov)
    }

    /// `E[g(x)] = Σ w^j ∫ g(x^a, x^b) p(x^b | x^a, Y) dx^b`, the inner
    /// integral taken by an unscented transform under each conditional
    /// belief.
    pub fn estimate(
        &self,
        g: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let mut acc: Option<DVector<f64>> = None;
        for ((a, b), &w) in self
            .belief
            .a_particles
            .iter()
            .zip(&self.belief.b_beliefs)
            .zip(&self.belief.weights)
        {
            let inner = if self.partition.n_b() == 0 {
                g(&self.partition.combine(a, b.mean()))?
            } else {
                let points = generate_sigma_points(b, &self.cfg.ut)?;
                points
                    .propagate(|xb| g(&self.partition.combine(a, xb)))?
                    .mean()
            };
            match acc.as_mut() {
                Some(v) => v.axpy(w, &inner, 1.0),
                None => acc = Some(inner * w),
            }
        }
        Ok(acc.expect("nonempty particle set"))
    }

    /// Deterministic `a`-rows of the transition, evaluated at the particle's
    /// `x^a` with the conditional mean standing in for `x^b` (exact whenever
    /// the `a`-dynamics are autonomous, as in a parameter random walk).
    fn a_transition(
        &self,
        a: &DVector<f64>,
        b_mean: &DVector<f64>,
        p: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let full = self.partition.combine(a, b_mean);
        let next = self.model.transition(&full, p)?;
        Ok(self.partition.split(&next).0)
    }

    /// One time-update / reweight / measurement-update / resample cycle.
    pub fn step(
        &mut self,
        p_prev: &DVector<f64>,
        p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<()> {
        self.step_index += 1;
        let k = self.step_index;
        let n = self.belief.len();
        let n_a = self.partition.n_a();

        let mut prop_rng = substream(self.seed, k, Lane::Propagate);
        let mut log_w = Vec::with_capacity(n);
        let mut best_mahal = f64::INFINITY;
        for j in 0..n {
            let tag = |e: FilterError| e.at_step(k as usize).tagged(&format!("particle {j}"));

            // draw x^a_k from its transition proposal, then condition the
            // marginal filter's time update on the fresh draw
            let base = self
                .a_transition(
                    &self.belief.a_particles[j],
                    self.belief.b_beliefs[j].mean(),
                    p_prev,
                )
                .map_err(tag)?;
            let z = DVector::from_fn(n_a, |_, _| {
                prop_rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let a_new = base + &self.q_aa_sqrt * z;
            if a_new.iter().any(|v| !v.is_finite()) {
                return Err(FilterError::Numerical(format!(
                    "step {k}: particle {j} non-finite after propagation"
                )));
            }

            let (predicted, innovation_cov, posterior) = self
                .conditional_step(&a_new, &self.belief.b_beliefs[j], p_prev, p_curr, y)
                .map_err(tag)?;

            let factor = DensityFactor::new(&innovation_cov).map_err(tag)?;
            let residual = y - &predicted;
            best_mahal = best_mahal.min(factor.mahalanobis_sq(&residual));
            log_w.push(self.belief.weights[j].ln() + factor.log_density(&residual));

            self.belief.a_particles[j] = a_new;
            self.belief.b_beliefs[j] = posterior;
        }

        let floor = if self.cfg.divergence_mahalanobis_sq.is_nan() {
            DEFAULT_DIVERGENCE_MAHALANOBIS_PER_CHANNEL * self.model.obs_dim() as f64
        } else {
            self.cfg.divergence_mahalanobis_sq
        };
        if best_mahal >= floor {
            return Err(FilterError::DegenerateLikelihood(format!(
                "step {k}: best particle innovation squared Mahalanobis {best_mahal:.3e} \
                 ≥ threshold {floor:.3e}"
            )));
        }
        let weights =
            normalize_log_weights(log_w, "rbpf reweight").map_err(|e| e.at_step(k as usize))?;
        self.belief.weights = weights;

        if effective_sample_size(&self.belief.weights)
            < self.cfg.policy.threshold_fraction * n as f64
        {
            let mut res_rng = substream(self.seed, k, Lane::Resample);
            let idx =
                resample_indices(&self.belief.weights, n, self.cfg.policy.scheme, &mut res_rng);
            // particle and conditional belief travel together
            self.belief.a_particles = idx
                .iter()
                .map(|&j| self.belief.a_particles[j].clone())
                .collect();
            self.belief.b_beliefs = idx
                .iter()
                .map(|&j| self.belief.b_beliefs[j].clone())
                .collect();
            self.belief.weights = vec![1.0 / n as f64; n];
        }
        Ok(())
    }

    /// Conditional filter pass for one particle: time update of the
    /// `b`-belief given the new `x^a`, predicted output statistics from the
    /// prior belief, then the measurement update. Returns
    /// `(ŷ, S, posterior)`.
    fn conditional_step(
        &self,
        a_new: &DVector<f64>,
        b_prev: &GaussianBelief,
        p_prev: &DVector<f64>,
        p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, GaussianBelief)> {
        let r = self.model.meas_cov();
        if let Some(lin) = &self.cfg.linear {
            // exact Kalman filter
            let a_mat = (lin.transition_matrix)(a_new, p_prev);
            let c = (lin.transition_offset)(a_new, p_prev);
            let m_prior = &a_mat * b_prev.mean() + c;
            let p_prior = &a_mat * b_prev.cov() * a_mat.transpose() + &self.q_bb;

            let h = (lin.observation_matrix)(a_new, p_curr);
            let d = (lin.observation_offset)(a_new, p_curr);
            let predicted = &h * &m_prior + d;
            let s = &h * &p_prior * h.transpose() + r;
            let chol = s.clone().cholesky().ok_or_else(|| {
                FilterError::Numerical("innovation covariance is not positive definite".into())
            })?;
            let gain = chol.solve(&(&h * &p_prior)).transpose();
            let mean = &m_prior + &gain * (y - &predicted);
            let cov = &p_prior - &gain * &s * gain.transpose();
            return Ok((predicted, s, GaussianBelief::new(mean, cov)?));
        }

        // unscented conditional filter
        let points = generate_sigma_points(b_prev, &self.cfg.ut)?;
        let propagated = points.propagate(|xb| {
            let next = self
                .model
                .transition(&self.partition.combine(a_new, xb), p_prev)?;
            Ok(self.partition.split(&next).1)
        })?;
        let prior = propagated.moments(None, &self.q_bb)?;
        let prior_points = generate_sigma_points(&prior, &self.cfg.ut)?;
        let update = measurement_update_with(&prior, &prior_points, y, r, None, |xb| {
            self.model.observe(&self.partition.combine(a_new, xb), p_curr)
        })?;
        Ok((update.predicted, update.innovation_cov, update.posterior))
    }
}
