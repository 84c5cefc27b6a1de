//! Dual estimation of an unmeasured input alongside the (augmented) state:
//! a linear Kalman filter tracks the input random walk `p_k = p_{k-1} + w^p`
//! while an unscented filter tracks the state, each treating the other's
//! current point estimate as known.
//!
//! The two error covariances never mix — input corrections are driven only
//! by the input-side innovation with the state held constant, which is the
//! defining difference from a twice-augmented joint filter.

use nalgebra::{DMatrix, DVector};

use crate::error::FilterError;
use crate::gaussian::GaussianBelief;
use crate::model::StateSpaceModel;
use crate::ukf::{
    generate_sigma_points, measurement_update, measurement_update_with, time_update, UtConfig,
};
use crate::Result;

/// Joint posterior of the dual scheme: one Gaussian over the input vector,
/// one over the (augmented) state.
#[derive(Debug, Clone)]
pub struct DualBelief {
    pub input: GaussianBelief,
    pub state: GaussianBelief,
}

/// KF time update of the input random walk: the mean is carried over, the
/// covariance inflates by the walk covariance.
pub fn input_time_update(
    input: &GaussianBelief,
    input_process_cov: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    if input_process_cov.nrows() != input.dim() || input_process_cov.ncols() != input.dim() {
        return Err(FilterError::dims(
            "input_time_update: walk covariance",
            input.dim(),
            input_process_cov.nrows(),
        ));
    }
    GaussianBelief::new(input.mean().clone(), input.cov() + input_process_cov)
}

/// KF measurement update of the input belief: the observation map is
/// `p ↦ H(x_const, p)` with the state frozen at its current point estimate.
/// Implemented as an unscented pass over the input belief, which reduces to
/// the exact Kalman update whenever the output is linear in `p` (the force
/// inputs of the structural benchmark are).
pub fn input_measurement_update(
    input: &GaussianBelief,
    model: &StateSpaceModel,
    x_const: &DVector<f64>,
    y: &DVector<f64>,
    cfg: &UtConfig,
) -> Result<GaussianBelief> {
    if y.len() != model.obs_dim() {
        return Err(FilterError::dims(
            "input_measurement_update: y",
            model.obs_dim(),
            y.len(),
        ));
    }
    let points = generate_sigma_points(input, cfg)?;
    let update = measurement_update_with(input, &points, y, model.meas_cov(), None, |p| {
        model.observe(x_const, p)
    })?;
    Ok(update.posterior)
}

/// One full dual cycle:
/// input time update → state time update with the prior input mean →
/// input measurement update with the state frozen at the propagated previous
/// posterior mean → state measurement update with the posterior input mean.
pub fn dual_step(
    db: &DualBelief,
    model: &StateSpaceModel,
    input_process_cov: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &UtConfig,
) -> Result<DualBelief> {
    let input_prior = input_time_update(&db.input, input_process_cov)?;
    let p_prior = input_prior.mean().clone();
    let (state_prior, points) = time_update(&db.state, model, &p_prior, cfg)?;
    let x_const = model.transition(db.state.mean(), &p_prior)?;
    let input_post = input_measurement_update(&input_prior, model, &x_const, y, cfg)?;
    let update = measurement_update(&state_prior, &points, model, input_post.mean(), y, cfg)?;
    Ok(DualBelief {
        input: input_post,
        state: update.posterior,
    })
}

/// Configuration of the dual filter.
#[derive(Debug, Clone)]
pub struct DkfConfig {
    pub ut: UtConfig,
    /// Covariance of the input random walk, `n_p × n_p`.
    pub input_cov: DMatrix<f64>,
}

/// Dual Kalman / unscented filter over one model.
#[derive(Debug, Clone)]
pub struct Dkf {
    model: StateSpaceModel,
    cfg: DkfConfig,
    belief: DualBelief,
    step_index: u64,
}

impl Dkf {
    pub fn new(
        model: StateSpaceModel,
        state_prior: GaussianBelief,
        input_prior: GaussianBelief,
        cfg: DkfConfig,
    ) -> Result<Self> {
        let n_p = model.input_dim();
        if n_p == 0 {
            return Err(FilterError::Config(
                "dual filter needs an input to estimate (input dimension is zero)".into(),
            ));
        }
        if state_prior.dim() != model.state_dim() {
            return Err(FilterError::dims(
                "Dkf state prior",
                model.state_dim(),
                state_prior.dim(),
            ));
        }
        if input_prior.dim() != n_p {
            return Err(FilterError::dims("Dkf input prior", n_p, input_prior.dim()));
        }
        if cfg.input_cov.nrows() != n_p || cfg.input_cov.ncols() != n_p {
            return Err(FilterError::dims(
                "Dkf input walk covariance",
                n_p,
                cfg.input_cov.nrows(),
            ));
        }
        cfg.ut.validate(model.state_dim())?;
        cfg.ut.validate(n_p)?;
        Ok(Self {
            model,
            cfg,
            belief: DualBelief {
                input: input_prior,
                state: state_prior,
            },
            step_index: 0,
        })
    }

    pub fn belief(&self) -> &DualBelief {
        &self.belief
    }

    pub fn model(&self) -> &StateSpaceModel {
        &self.model
    }

    pub fn cfg(&self) -> &DkfConfig {
        &self.cfg
    }

    /// Assimilate one measurement; the input is estimated, not supplied.
    pub fn step(&mut self, y: &DVector<f64>) -> Result<()> {
        self.step_index += 1;
        self.belief = dual_step(&self.belief, &self.model, &self.cfg.input_cov, y, &self.cfg.ut)
            .map_err(|e| e.at_step(self.step_index as usize))?;
        Ok(())
    }
}
