//! State-space model abstraction.
//!
//! A [`StateSpaceModel`] is a discrete-time pair `x_{k+1} = G(x_k, p_k) + v`,
//! `y_k = H(x_k, p_k) + w` with additive Gaussian noise covariances `Q` and
//! `R`. Continuous mechanical models enter through [`ParametricModel`], which
//! carries named physical coefficients and is discretized with a fixed-step
//! fourth-order Runge-Kutta integrator; parameter estimation augments the
//! state with normalized coordinates that override chosen coefficients.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::FilterError;
use crate::Result;

/// Discrete transition or observation map `(x, p) -> vector`.
pub type MapFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>> + Send + Sync>;

type CoeffFn =
    Arc<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
type CoeffObsFn =
    Arc<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// One fixed-step classical Runge-Kutta update of `x' = f(x, p, t)` over
/// `[0, dt]`, holding `p` constant.
///
/// Errors if any stage produces a non-finite derivative, naming the stage.
pub fn rk4_step<F>(f: &F, x: &DVector<f64>, p: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + ?Sized,
{
    let check = |k: &DVector<f64>, stage: &str| -> Result<()> {
        if k.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::Numerical(format!(
                "rk4 stage {stage} produced a non-finite derivative"
            )));
        }
        Ok(())
    };
    let half = 0.5 * dt;
    let k1 = f(x, p, 0.0);
    check(&k1, "k1")?;
    let k2 = f(&(x + &k1 * half), p, half);
    check(&k2, "k2")?;
    let k3 = f(&(x + &k2 * half), p, half);
    check(&k3, "k3")?;
    let k4 = f(&(x + &k3 * dt), p, dt);
    check(&k4, "k4")?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Discrete-time state-space model with additive Gaussian noise.
#[derive(Clone)]
pub struct StateSpaceModel {
    state_dim: usize,
    input_dim: usize,
    obs_dim: usize,
    dt: f64,
    transition: MapFn,
    observation: MapFn,
    process_cov: DMatrix<f64>,
    meas_cov: DMatrix<f64>,
}

impl std::fmt::Debug for StateSpaceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateSpaceModel")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("obs_dim", &self.obs_dim)
            .field("dt", &self.dt)
            .finish()
    }
}

impl StateSpaceModel {
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        obs_dim: usize,
        dt: f64,
        transition: impl Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>
            + Send
            + Sync
            + 'static,
        observation: impl Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>
            + Send
            + Sync
            + 'static,
        process_cov: DMatrix<f64>,
        meas_cov: DMatrix<f64>,
    ) -> Result<Self> {
        if process_cov.nrows() != state_dim || process_cov.ncols() != state_dim {
            return Err(FilterError::dims(
                "StateSpaceModel process covariance",
                state_dim,
                process_cov.nrows(),
            ));
        }
        if meas_cov.nrows() != obs_dim || meas_cov.ncols() != obs_dim {
            return Err(FilterError::dims(
                "StateSpaceModel measurement covariance",
                obs_dim,
                meas_cov.nrows(),
            ));
        }
        if !dt.is_finite() || dt <= 0.0 {
            return Err(FilterError::Config(format!("non-positive dt {dt}")));
        }
        Ok(Self {
            state_dim,
            input_dim,
            obs_dim,
            dt,
            transition: Arc::new(transition),
            observation: Arc::new(observation),
            process_cov,
            meas_cov,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn process_cov(&self) -> &DMatrix<f64> {
        &self.process_cov
    }

    pub fn meas_cov(&self) -> &DMatrix<f64> {
        &self.meas_cov
    }

    /// Replace the measurement covariance (filters are often run with
    /// per-filter tunings of `R` on the same plant).
    pub fn with_meas_cov(mut self, r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != self.obs_dim || r.ncols() != self.obs_dim {
            return Err(FilterError::dims("with_meas_cov", self.obs_dim, r.nrows()));
        }
        self.meas_cov = r;
        Ok(self)
    }

    /// Replace the process covariance.
    pub fn with_process_cov(mut self, q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != self.state_dim || q.ncols() != self.state_dim {
            return Err(FilterError::dims(
                "with_process_cov",
                self.state_dim,
                q.nrows(),
            ));
        }
        self.process_cov = q;
        Ok(self)
    }

    /// Evaluate the deterministic transition `G(x, p)`.
    pub fn transition(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim {
            return Err(FilterError::dims("transition state", self.state_dim, x.len()));
        }
        if p.len() != self.input_dim {
            return Err(FilterError::dims("transition input", self.input_dim, p.len()));
        }
        let out = (self.transition)(x, p)?;
        if out.len() != self.state_dim {
            return Err(FilterError::dims(
                "transition output",
                self.state_dim,
                out.len(),
            ));
        }
        Ok(out)
    }

    /// Evaluate the noiseless observation `H(x, p)`.
    pub fn observe(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim {
            return Err(FilterError::dims("observe state", self.state_dim, x.len()));
        }
        if p.len() != self.input_dim {
            return Err(FilterError::dims("observe input", self.input_dim, p.len()));
        }
        let out = (self.observation)(x, p)?;
        if out.len() != self.obs_dim {
            return Err(FilterError::dims("observation output", self.obs_dim, out.len()));
        }
        Ok(out)
    }
}

/// A continuous-time model with named physical coefficients.
///
/// `f(x, p, coeffs, t)` is the state derivative and `h(x, p, coeffs)` the
/// observation map; `coeffs` carries the physical constants in declaration
/// order so that parameter estimation can override any subset.
#[derive(Clone)]
pub struct ParametricModel {
    state_dim: usize,
    input_dim: usize,
    obs_dim: usize,
    names: Vec<String>,
    defaults: DVector<f64>,
    f: CoeffFn,
    h: CoeffObsFn,
}

/// One estimated coefficient: the augmented state stores the dimensionless
/// coordinate `theta` and the model sees `theta * scale`.
#[derive(Debug, Clone)]
pub struct ParameterSpec {
    pub name: String,
    pub scale: f64,
}

/// An augmented model plus the bookkeeping needed to interpret its state.
#[derive(Debug, Clone)]
pub struct AugmentedModel {
    pub model: StateSpaceModel,
    /// Index of the first parameter coordinate (= base state dimension).
    pub theta_start: usize,
    pub specs: Vec<ParameterSpec>,
}

impl ParametricModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        obs_dim: usize,
        names: Vec<String>,
        defaults: Vec<f64>,
        f: impl Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>, f64) -> DVector<f64>
            + Send
            + Sync
            + 'static,
        h: impl Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64>
            + Send
            + Sync
            + 'static,
    ) -> Result<Self> {
        if names.len() != defaults.len() {
            return Err(FilterError::dims(
                "ParametricModel coefficients",
                names.len(),
                defaults.len(),
            ));
        }
        Ok(Self {
            state_dim,
            input_dim,
            obs_dim,
            names,
            defaults: DVector::from_vec(defaults),
            f: Arc::new(f),
            h: Arc::new(h),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn coefficient_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                FilterError::Config(format!(
                    "unknown coefficient {name:?}; declared: {:?}",
                    self.names
                ))
            })
    }

    pub fn coefficient_default(&self, name: &str) -> Result<f64> {
        Ok(self.defaults[self.coefficient_index(name)?])
    }

    /// Continuous derivative with default coefficients.
    pub fn derivative(&self, x: &DVector<f64>, p: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.f)(x, p, &self.defaults, t)
    }

    /// Observation with default coefficients.
    pub fn observation(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        (self.h)(x, p, &self.defaults)
    }

    /// RK4-discretized model with the declared default coefficients.
    pub fn discretize(&self, dt: f64, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<StateSpaceModel> {
        let f = Arc::clone(&self.f);
        let h = Arc::clone(&self.h);
        let cf = self.defaults.clone();
        let ch = self.defaults.clone();
        StateSpaceModel::new(
            self.state_dim,
            self.input_dim,
            self.obs_dim,
            dt,
            move |x: &DVector<f64>, p: &DVector<f64>| {
                let g = |x: &DVector<f64>, p: &DVector<f64>, t: f64| f(x, p, &cf, t);
                rk4_step(&g, x, p, dt)
            },
            move |x, p| Ok(h(x, p, &ch)),
            q,
            r,
        )
    }

    /// Discretize with the state augmented by the listed coefficients.
    ///
    /// The augmented state is `[x; theta]`; `theta_i * scale_i` replaces the
    /// named coefficient inside both the transition and the observation. The
    /// parameter coordinates follow a random walk whose variance is whatever
    /// the caller puts in the corresponding block of `q` (zero keeps them
    /// constant). `q` must already have augmented dimension.
    pub fn augment(
        &self,
        dt: f64,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        specs: Vec<ParameterSpec>,
    ) -> Result<AugmentedModel> {
        if specs.is_empty() {
            return Err(FilterError::Config(
                "augment: empty parameter list".into(),
            ));
        }
        let mut indices = Vec::with_capacity(specs.len());
        for s in &specs {
            if !s.scale.is_finite() || s.scale == 0.0 {
                return Err(FilterError::Config(format!(
                    "augment: parameter {:?} has invalid scale {}",
                    s.name, s.scale
                )));
            }
            indices.push(self.coefficient_index(&s.name)?);
        }
        let n = self.state_dim;
        let n_theta = specs.len();
        let n_aug = n + n_theta;

        let scales: Vec<f64> = specs.iter().map(|s| s.scale).collect();
        let with_theta = {
            let defaults = self.defaults.clone();
            let indices = indices.clone();
            let scales = scales.clone();
            move |xt: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
                let x = xt.rows(0, n).into_owned();
                let mut coeffs = defaults.clone();
                for (k, &ci) in indices.iter().enumerate() {
                    coeffs[ci] = xt[n + k] * scales[k];
                }
                (x, coeffs)
            }
        };

        let f = Arc::clone(&self.f);
        let split_f = with_theta.clone();
        let transition = move |xt: &DVector<f64>, p: &DVector<f64>| -> Result<DVector<f64>> {
            let (x, coeffs) = split_f(xt);
            let g = |x: &DVector<f64>, p: &DVector<f64>, t: f64| f(x, p, &coeffs, t);
            let x_next = rk4_step(&g, &x, p, dt)?;
            let mut out = DVector::zeros(n_aug);
            out.rows_mut(0, n).copy_from(&x_next);
            out.rows_mut(n, n_theta).copy_from(&xt.rows(n, n_theta));
            Ok(out)
        };

        let h = Arc::clone(&self.h);
        let split_h = with_theta;
        let observation = move |xt: &DVector<f64>, p: &DVector<f64>| -> Result<DVector<f64>> {
            let (x, coeffs) = split_h(xt);
            Ok(h(&x, p, &coeffs))
        };

        let model = StateSpaceModel::new(
            n_aug,
            self.input_dim,
            self.obs_dim,
            dt,
            transition,
            observation,
            q,
            r,
        )?;
        Ok(AugmentedModel {
            model,
            theta_start: n,
            specs,
        })
    }
}

impl AugmentedModel {
    /// Physical value of parameter `k` given an augmented state vector.
    pub fn physical_value(&self, state: &DVector<f64>, k: usize) -> f64 {
        state[self.theta_start + k] * self.specs[k].scale
    }
}
