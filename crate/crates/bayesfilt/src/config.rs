//! Experiment configuration: a single TOML schema tying the benchmark
//! simulation, the estimation problem and the per-filter settings together.
//!
//! The file format is deliberately flat and versionable — covariances are
//! scientific-notation diagonal lists, every key can be overridden from the
//! command line with `--override key.path=value`, and three canned scenarios
//! (`state`, `state_parameter`, `input_state_parameter`) materialize the
//! benchmark settings for pure state estimation, joint state-parameter
//! estimation, and input-state-parameter estimation with the dual filter.
//!
//! Unknown keys are rejected, all defaults survive a round-trip through
//! [`ExperimentConfig::resolved_toml`], and a parsed configuration plus a
//! seed determines every output byte of a run.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::benchmark::{
    augmented_model, simulate, state_model, white_noise_force, MeasurementSetup, SimulationRecord,
    ThreeDofParams,
};
use crate::dual::{Dkf, DkfConfig};
use crate::error::FilterError;
use crate::gaussian::GaussianBelief;
use crate::gmsppf::{EmConfig, Gmsppf, GmsppfConfig};
use crate::mpf::{Mpf, MpfConfig, MutationConfig};
use crate::particle::{BootstrapPf, PfConfig, ResampleScheme, ResamplingPolicy};
use crate::rbpf::{Rbpf, RbpfConfig};
use crate::runner::{ScoreSpec, SequentialFilter};
use crate::sppf::{Sppf, SppfConfig};
use crate::ukf::{Ukf, UtConfig};
use crate::Result;

/// Environment variable naming the default output root for the CLI.
pub const OUT_DIR_ENV: &str = "BAYESFILT_OUT";

/// Canonical filter section names, in reporting order.
pub const FILTER_IDS: [&str; 7] = ["ukf", "pf", "mpf", "sppf", "gmsppf", "rbpf", "dkf"];

fn field_err(field: &str, msg: impl std::fmt::Display) -> FilterError {
    FilterError::Config(format!("{field}: {msg}"))
}

/// Benchmark structure, integration grid and excitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub masses: [f64; 3],
    pub dampers: [f64; 3],
    pub stiffnesses: [f64; 3],
    pub cubic_coefficient: f64,
    pub dt: f64,
    /// Simulated duration in seconds; the record has `horizon/dt + 1` rows.
    pub horizon: f64,
    /// Standard deviation of the white-noise excitation force in newtons.
    pub force_std: f64,
    /// The force is redrawn every this many samples and held in between.
    pub force_hold_steps: usize,
    /// Zero-based index of the driven mass.
    pub input_dof: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            masses: [1000.0; 3],
            dampers: [250.0; 3],
            stiffnesses: [10_000.0; 3],
            cubic_coefficient: 1e12,
            dt: 0.01,
            horizon: 60.0,
            force_std: 100.0,
            force_hold_steps: 1,
            input_dof: 1,
        }
    }
}

/// Observed channels and the noise injected into them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementSection {
    /// Zero-based DOFs whose displacements are measured.
    pub displacement_dofs: Vec<usize>,
    /// Zero-based DOFs whose accelerations are measured.
    pub accel_dofs: Vec<usize>,
    /// Per-channel noise std as a fraction of the clean channel RMS.
    pub noise_fraction: f64,
}

impl Default for MeasurementSection {
    fn default() -> Self {
        Self {
            displacement_dofs: vec![1],
            accel_dofs: vec![0, 1, 2],
            noise_fraction: 0.03,
        }
    }
}

/// What is being estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMode {
    /// The six mechanical states, with the input known.
    State,
    /// States plus the cubic coefficient, input known.
    StateParameter,
    /// States, cubic coefficient and the unknown input force.
    InputStateParameter,
}

/// Shared estimation problem: mode, priors and default covariances.
///
/// Covariance keys are diagonals; lengths must match the (possibly
/// augmented) state dimension and the measurement dimension. `meas_cov` may
/// be omitted when every filter section carries its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSection {
    pub mode: EstimationMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_cov: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub process_cov: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meas_cov: Option<Vec<f64>>,
    /// The filter state carries the dimensionless coefficient
    /// `theta = k_c / parameter_scale`.
    pub parameter_scale: f64,
    /// Initial mean of the dimensionless coefficient.
    pub parameter_init: f64,
    /// Fraction of the horizon excluded from parameter and input metrics.
    pub burn_in_fraction: f64,
}

impl Default for EstimationSection {
    fn default() -> Self {
        Self {
            mode: EstimationMode::State,
            init_cov: None,
            process_cov: None,
            meas_cov: None,
            parameter_scale: 1e12,
            parameter_init: 0.8,
            burn_in_fraction: 0.2,
        }
    }
}

/// Resampling scheme key shared by the particle-based sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleSchemeKey {
    Systematic,
    Multinomial,
}

impl ResampleSchemeKey {
    fn scheme(self) -> ResampleScheme {
        match self {
            Self::Systematic => ResampleScheme::Systematic,
            Self::Multinomial => ResampleScheme::Multinomial,
        }
    }
}

/// A scalar replicated across parameters, or one value per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrList {
    Scalar(f64),
    List(Vec<f64>),
}

impl ScalarOrList {
    fn resolve(&self, len: usize) -> Vec<f64> {
        match self {
            Self::Scalar(v) => vec![*v; len],
            Self::List(vs) => vs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UkfSection {
    pub alpha: f64,
    pub beta: f64,
    /// `None` selects the dimension-dependent default `3 - n`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    pub redraw_measurement_points: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meas_cov: Option<Vec<f64>>,
}

impl Default for UkfSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            kappa: None,
            redraw_measurement_points: false,
            meas_cov: None,
        }
    }
}

impl UkfSection {
    fn ut(&self) -> UtConfig {
        UtConfig {
            alpha: self.alpha,
            beta: self.beta,
            kappa: self.kappa,
            redraw_measurement_points: self.redraw_measurement_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfSection {
    pub particles: usize,
    pub resample_threshold: f64,
    pub resample_scheme: ResampleSchemeKey,
    /// Innovation Mahalanobis-squared divergence floor; `nan` selects the
    /// per-dimension library default, `inf` disables the check.
    pub divergence_mahalanobis_sq: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meas_cov: Option<Vec<f64>>,
}

impl Default for PfSection {
    fn default() -> Self {
        Self {
            particles: 1000,
            resample_threshold: 0.2,
            resample_scheme: ResampleSchemeKey::Systematic,
            divergence_mahalanobis_sq: f64::NAN,
            meas_cov: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpfSection {
    pub particles: usize,
    pub resample_threshold: f64,
    pub resample_scheme: ResampleSchemeKey,
    /// Probability of replacing an unfit particle by the prior estimate.
    pub p_r: f64,
    /// Per-component creep-mutation probability.
    pub p_m: f64,
    /// Mutation radius: scalar or one entry per invariant component.
    pub radius: ScalarOrList,
    /// Time-invariant state components (defaults to the parameter block).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invariant_indices: Option<Vec<usize>>,
    /// Restrict the replacement fitness norm to the invariant components.
    pub invariant_norm: bool,
    pub divergence_mahalanobis_sq: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meas_cov: Option<Vec<f64>>,
}

impl Default for MpfSection {
    fn default() -> Self {
        Self {
            particles: 400,
            resample_threshold: 0.3,
            resample_scheme: ResampleSchemeKey::Systematic,
            p_r: 0.05,
            p_m: 0.25,
            radius: ScalarOrList::Scalar(0.2),
            invariant_indices: None,
            invariant_norm: false,
            divergence_mahalanobis_sq: f64::NAN,
            meas_cov: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SppfSection {
    pub particles: usize,
    pub resample_threshold: f64,
    pub resample_scheme: ResampleSchemeKey,
    /// Use the plain likelihood weight recursion instead of the full
    /// importance ratio.
    pub simplified_weights: bool,
    pub divergence_mahalanobis_sq: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meas_cov: Option<Vec<f64>>,
}

impl Default for SppfSection {
    fn default() -> Self {
        Self {
            particles: 25,
            resample_threshold: 0.2,
            resample_scheme: ResampleSchemeKey::Systematic,
            simplified_weights: false,
            divergence_mahalanobis_sq: f64::NAN,
            meas_cov: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmSection {
    pub max_iters: usize,
    pub tol: f64,
    pub cov_floor: f64,
}

impl Default for EmSection {
    fn default() -> Self {
        let d = EmConfig::default();
        Self {
            max_iters: d.max_iters,
            tol: d.tol,
            cov_floor: d.cov_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmsppfSection {
    #[serde(rename = "G_s")]
    pub g_s: usize,
    #[serde(rename = "G_p")]
    pub g_p: usize,
    #[serde(rename = "G_m")]
    pub g_m: usize,
    pub particles: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meas_cov: Option<Vec<f64>>,
    pub em: EmSection,
}

impl Default for GmsppfSection {
    fn default() -> Self {
        Self {
            g_s: 3,
            g_p: 1,
            g_m: 1,
            particles: 1000,
            meas_cov: None,
            em: EmSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    /// Zero-based state indices carried by particles; the complement is
    /// marginalized analytically.
    pub a_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RbpfSection {
    pub particles: usize,
    pub resample_threshold: f64,
    pub resample_scheme: ResampleSchemeKey,
    pub divergence_mahalanobis_sq: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meas_cov: Option<Vec<f64>>,
    /// Defaults to sampling the parameter block in the augmented modes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSection>,
}

impl Default for RbpfSection {
    fn default() -> Self {
        Self {
            particles: 70,
            resample_threshold: 0.2,
            resample_scheme: ResampleSchemeKey::Systematic,
            divergence_mahalanobis_sq: f64::NAN,
            meas_cov: None,
            partition: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DkfSection {
    /// Random-walk variance of the unknown input per step.
    pub input_cov: f64,
    /// Initial variance of the input estimate.
    pub input_init_cov: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meas_cov: Option<Vec<f64>>,
}

impl Default for DkfSection {
    fn default() -> Self {
        Self {
            input_cov: 2e2,
            input_init_cov: 1e10,
            meas_cov: None,
        }
    }
}

/// The complete experiment: simulation, estimation problem, one section per
/// configured filter, seeds and output location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    pub model: ModelSection,
    pub measurement: MeasurementSection,
    pub estimation: EstimationSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ukf: Option<UkfSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pf: Option<PfSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpf: Option<MpfSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sppf: Option<SppfSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gmsppf: Option<GmsppfSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rbpf: Option<RbpfSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dkf: Option<DkfSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1],
            out_dir: None,
            model: ModelSection::default(),
            measurement: MeasurementSection::default(),
            estimation: EstimationSection::default(),
            ukf: None,
            pf: None,
            mpf: None,
            sppf: None,
            gmsppf: None,
            rbpf: None,
            dkf: None,
        }
    }
}

/// The three canned benchmark scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioCase {
    State,
    StateParameter,
    InputStateParameter,
}

impl std::str::FromStr for ScenarioCase {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "state" => Ok(Self::State),
            "state_parameter" => Ok(Self::StateParameter),
            "input_state_parameter" => Ok(Self::InputStateParameter),
            other => Err(field_err(
                "scenario",
                format!(
                    "unknown case \"{other}\" (expected state, state_parameter \
                     or input_state_parameter)"
                ),
            )),
        }
    }
}

/// Fully-populated configuration for one of the benchmark scenarios.
pub fn scenario(case: ScenarioCase) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    match case {
        ScenarioCase::State => {
            cfg.estimation.mode = EstimationMode::State;
            cfg.estimation.init_cov = Some(vec![1e-20; 6]);
            cfg.estimation.process_cov =
                Some(vec![1e-9, 1e-9, 1e-9, 1e-14, 1e-14, 1e-14]);
            cfg.estimation.meas_cov = Some(vec![1e-5, 1e-8, 1e-8, 1e-8]);
            cfg.ukf = Some(UkfSection::default());
            cfg.pf = Some(PfSection {
                particles: 30,
                divergence_mahalanobis_sq: f64::INFINITY,
                ..PfSection::default()
            });
            cfg.sppf = Some(SppfSection {
                particles: 25,
                divergence_mahalanobis_sq: f64::INFINITY,
                ..SppfSection::default()
            });
        }
        ScenarioCase::StateParameter => {
            cfg.seeds = (1..=10).collect();
            // Displacement is read at the mass carrying the cubic spring:
            // that channel is what makes the stiffness coefficient
            // identifiable under the tight displacement noise used here.
            cfg.measurement.displacement_dofs = vec![0];
            // Strong enough to exercise the cubic term, gentle enough that
            // the 400-particle mutation filter keeps pace with the
            // 1000-particle bootstrap filter on state tracking.
            cfg.model.force_std = 65.0;
            cfg.estimation.mode = EstimationMode::StateParameter;
            cfg.estimation.init_cov =
                Some(vec![1e-11, 1e-11, 1e-11, 1e-11, 1e-11, 1e-11, 1e-2]);
            cfg.estimation.process_cov =
                Some(vec![1e-11, 1e-9, 1e-9, 1e-11, 1e-9, 1e-9, 1e-25]);
            cfg.ukf = Some(UkfSection {
                meas_cov: Some(vec![1e-9, 1e2, 1e-3, 1e-3]),
                ..UkfSection::default()
            });
            cfg.pf = Some(PfSection {
                particles: 1000,
                divergence_mahalanobis_sq: f64::INFINITY,
                meas_cov: Some(vec![1e-9, 1e1, 1e-3, 1e-3]),
                ..PfSection::default()
            });
            cfg.mpf = Some(MpfSection {
                particles: 400,
                resample_threshold: 0.3,
                p_r: 0.05,
                p_m: 0.25,
                divergence_mahalanobis_sq: f64::INFINITY,
                meas_cov: Some(vec![1e-9, 1e2, 1e-2, 1e-2]),
                ..MpfSection::default()
            });
            cfg.rbpf = Some(RbpfSection {
                particles: 70,
                divergence_mahalanobis_sq: f64::INFINITY,
                meas_cov: Some(vec![1e-14, 1e-4, 1e-6, 1e-4]),
                ..RbpfSection::default()
            });
            cfg.gmsppf = Some(GmsppfSection {
                g_s: 2,
                particles: 1000,
                meas_cov: Some(vec![1e-9, 1e1, 1e-3, 1e-2]),
                em: EmSection {
                    max_iters: 5,
                    ..EmSection::default()
                },
                ..GmsppfSection::default()
            });
        }
        ScenarioCase::InputStateParameter => {
            cfg.model.force_hold_steps = 10;
            cfg.measurement.displacement_dofs = vec![0];
            cfg.estimation.mode = EstimationMode::InputStateParameter;
            cfg.estimation.init_cov =
                Some(vec![1e-5, 1e-5, 1e-5, 1e-5, 1e-5, 1e-5, 1e-2]);
            cfg.estimation.process_cov =
                Some(vec![1e-10, 1e-9, 1e-9, 1e-8, 1e-8, 1e-8, 1e-25]);
            cfg.estimation.meas_cov = Some(vec![1e-11, 1e-9, 1e-3, 1e-10]);
            cfg.dkf = Some(DkfSection::default());
        }
    }
    cfg
}

impl ExperimentConfig {
    /// Parse a configuration from TOML text without overrides.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        load_config(text, &[])
    }

    /// Serialize with every default materialized — the reproducibility
    /// manifest written next to run outputs.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| FilterError::Io(e.to_string()))
    }

    /// Dimension of the filter state (mechanical states plus parameter
    /// block, depending on mode).
    pub fn state_dim(&self) -> usize {
        match self.estimation.mode {
            EstimationMode::State => 6,
            EstimationMode::StateParameter | EstimationMode::InputStateParameter => 7,
        }
    }

    /// Number of measured channels.
    pub fn obs_dim(&self) -> usize {
        self.measurement.displacement_dofs.len() + self.measurement.accel_dofs.len()
    }

    /// Number of integration steps (the record has one more row).
    pub fn steps(&self) -> usize {
        (self.model.horizon / self.model.dt).round() as usize
    }

    pub fn params(&self) -> ThreeDofParams {
        let m = &self.model;
        ThreeDofParams {
            m1: m.masses[0],
            m2: m.masses[1],
            m3: m.masses[2],
            c1: m.dampers[0],
            c2: m.dampers[1],
            c3: m.dampers[2],
            k1: m.stiffnesses[0],
            k2: m.stiffnesses[1],
            k3: m.stiffnesses[2],
            k_c: m.cubic_coefficient,
        }
    }

    pub fn setup(&self) -> MeasurementSetup {
        MeasurementSetup {
            displacement_dofs: self.measurement.displacement_dofs.clone(),
            accel_dofs: self.measurement.accel_dofs.clone(),
            noise_fraction: self.measurement.noise_fraction,
        }
    }

    /// Filter sections present, in canonical order.
    pub fn filter_ids(&self) -> Vec<&'static str> {
        let mut ids = Vec::new();
        if self.ukf.is_some() {
            ids.push("ukf");
        }
        if self.pf.is_some() {
            ids.push("pf");
        }
        if self.mpf.is_some() {
            ids.push("mpf");
        }
        if self.sppf.is_some() {
            ids.push("sppf");
        }
        if self.gmsppf.is_some() {
            ids.push("gmsppf");
        }
        if self.rbpf.is_some() {
            ids.push("rbpf");
        }
        if self.dkf.is_some() {
            ids.push("dkf");
        }
        ids
    }

    fn ut(&self) -> UtConfig {
        self.ukf.as_ref().map(UkfSection::ut).unwrap_or_default()
    }

    fn diag(&self, field: &str, values: &Option<Vec<f64>>, dim: usize) -> Result<DVector<f64>> {
        let values = values.as_ref().ok_or_else(|| {
            field_err(field, format!("required (diagonal list of length {dim})"))
        })?;
        if values.len() != dim {
            return Err(field_err(
                field,
                format!("expected {dim} diagonal entries, got {}", values.len()),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(field_err(field, format!("entry {bad} is not a finite ≥ 0 value")));
        }
        Ok(DVector::from_row_slice(values))
    }

    /// Measurement covariance effective for one filter: the filter section's
    /// own `meas_cov` if present, the shared `estimation.meas_cov` otherwise.
    pub fn effective_meas_cov(&self, id: &str) -> Result<DVector<f64>> {
        let own = match id {
            "ukf" => self.ukf.as_ref().and_then(|s| s.meas_cov.clone()),
            "pf" => self.pf.as_ref().and_then(|s| s.meas_cov.clone()),
            "mpf" => self.mpf.as_ref().and_then(|s| s.meas_cov.clone()),
            "sppf" => self.sppf.as_ref().and_then(|s| s.meas_cov.clone()),
            "gmsppf" => self.gmsppf.as_ref().and_then(|s| s.meas_cov.clone()),
            "rbpf" => self.rbpf.as_ref().and_then(|s| s.meas_cov.clone()),
            "dkf" => self.dkf.as_ref().and_then(|s| s.meas_cov.clone()),
            other => return Err(field_err(other, "unknown filter id")),
        };
        let ny = self.obs_dim();
        if let Some(values) = own {
            let field = format!("{id}.meas_cov");
            let r = self.diag(&field, &Some(values), ny)?;
            if r.iter().any(|v| *v <= 0.0) {
                return Err(field_err(&field, "measurement variances must be > 0"));
            }
            return Ok(r);
        }
        let r = self.diag("estimation.meas_cov", &self.estimation.meas_cov, ny)?;
        if r.iter().any(|v| *v <= 0.0) {
            return Err(field_err("estimation.meas_cov", "measurement variances must be > 0"));
        }
        Ok(r)
    }

    /// Validate every field, naming the offending key in each diagnostic.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !(m.dt.is_finite() && m.dt > 0.0) {
            return Err(field_err("model.dt", "must be > 0"));
        }
        if !(m.horizon.is_finite() && m.horizon >= m.dt) {
            return Err(field_err("model.horizon", "must cover at least one step"));
        }
        if !(m.force_std.is_finite() && m.force_std >= 0.0) {
            return Err(field_err("model.force_std", "must be ≥ 0"));
        }
        if m.force_hold_steps == 0 {
            return Err(field_err("model.force_hold_steps", "must be ≥ 1"));
        }
        if m.input_dof >= 3 {
            return Err(field_err("model.input_dof", "zero-based DOF index must be < 3"));
        }
        self.params().validate().map_err(|e| match e {
            FilterError::Config(msg) => field_err("model", msg),
            other => other,
        })?;
        self.setup().validate().map_err(|e| match e {
            FilterError::Config(msg) => field_err("measurement", msg),
            other => other,
        })?;

        let est = &self.estimation;
        if !(est.burn_in_fraction >= 0.0 && est.burn_in_fraction < 1.0) {
            return Err(field_err("estimation.burn_in_fraction", "must be in [0, 1)"));
        }
        if !(est.parameter_scale.is_finite() && est.parameter_scale > 0.0) {
            return Err(field_err("estimation.parameter_scale", "must be > 0"));
        }
        if !est.parameter_init.is_finite() {
            return Err(field_err("estimation.parameter_init", "must be finite"));
        }
        let n = self.state_dim();
        self.diag("estimation.init_cov", &est.init_cov, n)?;
        self.diag("estimation.process_cov", &est.process_cov, n)?;
        if est.meas_cov.is_some() {
            self.diag("estimation.meas_cov", &est.meas_cov, self.obs_dim())?;
        }

        if self.seeds.is_empty() {
            return Err(field_err("seeds", "at least one seed is required"));
        }
        if self.filter_ids().is_empty() {
            return Err(FilterError::Config(
                "no filter sections configured (expected at least one of \
                 [ukf], [pf], [mpf], [sppf], [gmsppf], [rbpf], [dkf])"
                    .into(),
            ));
        }

        for id in self.filter_ids() {
            self.effective_meas_cov(id)?;
        }
        if let Some(s) = &self.ukf {
            s.ut().validate(n).map_err(|e| field_err("ukf", e))?;
        }
        if let Some(s) = &self.pf {
            validate_particles("pf", s.particles, s.resample_threshold)?;
        }
        if let Some(s) = &self.mpf {
            validate_particles("mpf", s.particles, s.resample_threshold)?;
            self.mutation_config(s)?
                .validate(n)
                .map_err(|e| field_err("mpf", e))?;
        }
        if let Some(s) = &self.sppf {
            validate_particles("sppf", s.particles, s.resample_threshold)?;
        }
        if let Some(s) = &self.gmsppf {
            if s.particles == 0 {
                return Err(field_err("gmsppf.particles", "must be ≥ 1"));
            }
            if s.g_s == 0 || s.g_p == 0 || s.g_m == 0 {
                return Err(field_err("gmsppf", "G_s, G_p and G_m must all be ≥ 1"));
            }
            if s.em.max_iters == 0 {
                return Err(field_err("gmsppf.em.max_iters", "must be ≥ 1"));
            }
            if !(s.em.tol.is_finite() && s.em.tol > 0.0) {
                return Err(field_err("gmsppf.em.tol", "must be > 0"));
            }
        }
        if let Some(s) = &self.rbpf {
            validate_particles("rbpf", s.particles, s.resample_threshold)?;
            let a = self.rbpf_a_indices(s)?;
            if let Some(&bad) = a.iter().find(|&&i| i >= n) {
                return Err(field_err(
                    "rbpf.partition.a_indices",
                    format!("index {bad} outside state dimension {n}"),
                ));
            }
        }
        if let Some(s) = &self.dkf {
            if est.mode != EstimationMode::InputStateParameter {
                return Err(field_err(
                    "dkf",
                    "requires estimation.mode = \"input_state_parameter\"",
                ));
            }
            if !(s.input_cov.is_finite() && s.input_cov > 0.0) {
                return Err(field_err("dkf.input_cov", "must be > 0"));
            }
            if !(s.input_init_cov.is_finite() && s.input_init_cov > 0.0) {
                return Err(field_err("dkf.input_init_cov", "must be > 0"));
            }
        }
        Ok(())
    }

    fn mutation_config(&self, s: &MpfSection) -> Result<MutationConfig> {
        let invariants = match (&s.invariant_indices, self.estimation.mode) {
            (Some(list), _) => list.clone(),
            (None, EstimationMode::State) => {
                return Err(field_err(
                    "mpf.invariant_indices",
                    "required in state mode (no parameter block to default to)",
                ));
            }
            (None, _) => vec![6],
        };
        let radius = s.radius.resolve(invariants.len());
        if radius.len() != invariants.len() {
            return Err(field_err(
                "mpf.radius",
                format!(
                    "expected {} entries to match invariant_indices, got {}",
                    invariants.len(),
                    radius.len()
                ),
            ));
        }
        Ok(MutationConfig {
            p_r: s.p_r,
            p_m: s.p_m,
            radius,
            invariant_indices: invariants,
            invariant_norm: s.invariant_norm,
        })
    }

    fn rbpf_a_indices(&self, s: &RbpfSection) -> Result<Vec<usize>> {
        match (&s.partition, self.estimation.mode) {
            (Some(p), _) => Ok(p.a_indices.clone()),
            (None, EstimationMode::State) => Err(field_err(
                "rbpf.partition.a_indices",
                "required in state mode (no parameter block to default to)",
            )),
            (None, _) => Ok(vec![6]),
        }
    }

    /// Simulate a ground-truth record for one seed.
    pub fn simulate_record(&self, seed: u64) -> Result<SimulationRecord> {
        let force = white_noise_force(
            self.model.force_std,
            self.steps(),
            self.model.force_hold_steps,
            seed,
        );
        simulate(
            &self.params(),
            &self.setup(),
            self.model.input_dof,
            &force,
            self.model.dt,
            &DVector::zeros(6),
            seed,
        )
    }

    /// Metric settings matching this configuration.
    pub fn score_spec(&self) -> ScoreSpec {
        let parameter_index = match self.estimation.mode {
            EstimationMode::State => None,
            _ => Some(6),
        };
        ScoreSpec {
            burn_in_fraction: self.estimation.burn_in_fraction,
            parameter_index,
            parameter_truth: self.params().k_c / self.estimation.parameter_scale,
            ..ScoreSpec::default()
        }
    }

    fn prior(&self) -> Result<GaussianBelief> {
        let n = self.state_dim();
        let mut mean = DVector::zeros(n);
        if n == 7 {
            mean[6] = self.estimation.parameter_init;
        }
        let diag = self.diag("estimation.init_cov", &self.estimation.init_cov, n)?;
        GaussianBelief::from_diag(mean, &diag)
    }

    fn build_model(&self, id: &str) -> Result<crate::model::StateSpaceModel> {
        let q = DMatrix::from_diagonal(&self.diag(
            "estimation.process_cov",
            &self.estimation.process_cov,
            self.state_dim(),
        )?);
        let r = DMatrix::from_diagonal(&self.effective_meas_cov(id)?);
        let params = self.params();
        let setup = self.setup();
        let input = [self.model.input_dof];
        match self.estimation.mode {
            EstimationMode::State => {
                state_model(&params, &setup, &input, self.model.dt, q, r)
            }
            _ => Ok(augmented_model(
                &params,
                &setup,
                &input,
                self.model.dt,
                self.estimation.parameter_scale,
                q,
                r,
            )?
            .model),
        }
    }

    /// Construct the configured filter `id`, seeded for one run.
    pub fn build_filter(&self, id: &str, seed: u64) -> Result<Box<dyn SequentialFilter>> {
        let model = self.build_model(id)?;
        let prior = self.prior()?;
        match id {
            "ukf" => {
                let s = self.ukf.as_ref().ok_or_else(|| field_err("ukf", "section missing"))?;
                Ok(Box::new(Ukf::new(model, prior, s.ut())?))
            }
            "pf" => {
                let s = self.pf.as_ref().ok_or_else(|| field_err("pf", "section missing"))?;
                let cfg = PfConfig {
                    particles: s.particles,
                    policy: ResamplingPolicy {
                        scheme: s.resample_scheme.scheme(),
                        threshold_fraction: s.resample_threshold,
                    },
                    divergence_mahalanobis_sq: s.divergence_mahalanobis_sq,
                };
                Ok(Box::new(BootstrapPf::init(model, &prior, cfg, seed)?))
            }
            "mpf" => {
                let s = self.mpf.as_ref().ok_or_else(|| field_err("mpf", "section missing"))?;
                let cfg = MpfConfig {
                    particles: s.particles,
                    policy: ResamplingPolicy {
                        scheme: s.resample_scheme.scheme(),
                        threshold_fraction: s.resample_threshold,
                    },
                    divergence_mahalanobis_sq: s.divergence_mahalanobis_sq,
                    mutation: self.mutation_config(s)?,
                };
                Ok(Box::new(Mpf::init(model, &prior, cfg, seed)?))
            }
            "sppf" => {
                let s = self.sppf.as_ref().ok_or_else(|| field_err("sppf", "section missing"))?;
                let cfg = SppfConfig {
                    particles: s.particles,
                    policy: ResamplingPolicy {
                        scheme: s.resample_scheme.scheme(),
                        threshold_fraction: s.resample_threshold,
                    },
                    simplified_weights: s.simplified_weights,
                    ut: self.ut(),
                    divergence_mahalanobis_sq: s.divergence_mahalanobis_sq,
                };
                Ok(Box::new(Sppf::init(model, &prior, cfg, seed)?))
            }
            "gmsppf" => {
                let s = self
                    .gmsppf
                    .as_ref()
                    .ok_or_else(|| field_err("gmsppf", "section missing"))?;
                let cfg = GmsppfConfig {
                    g_s: s.g_s,
                    g_p: s.g_p,
                    g_m: s.g_m,
                    particles: s.particles,
                    em: EmConfig {
                        max_iters: s.em.max_iters,
                        tol: s.em.tol,
                        cov_floor: s.em.cov_floor,
                    },
                    ut: self.ut(),
                };
                Ok(Box::new(Gmsppf::init(model, &prior, cfg, seed)?))
            }
            "rbpf" => {
                let s = self.rbpf.as_ref().ok_or_else(|| field_err("rbpf", "section missing"))?;
                let cfg = RbpfConfig {
                    particles: s.particles,
                    policy: ResamplingPolicy {
                        scheme: s.resample_scheme.scheme(),
                        threshold_fraction: s.resample_threshold,
                    },
                    a_indices: self.rbpf_a_indices(s)?,
                    linear: None,
                    ut: self.ut(),
                    divergence_mahalanobis_sq: s.divergence_mahalanobis_sq,
                };
                Ok(Box::new(Rbpf::init(model, &prior, cfg, seed)?))
            }
            "dkf" => {
                let s = self.dkf.as_ref().ok_or_else(|| field_err("dkf", "section missing"))?;
                let input_prior = GaussianBelief::from_diag(
                    DVector::zeros(1),
                    &DVector::from_element(1, s.input_init_cov),
                )?;
                let cfg = DkfConfig {
                    ut: self.ut(),
                    input_cov: DMatrix::from_element(1, 1, s.input_cov),
                };
                Ok(Box::new(Dkf::new(model, prior, input_prior, cfg)?))
            }
            other => Err(field_err(other, "unknown filter id")),
        }
    }
}

fn validate_particles(id: &str, particles: usize, threshold: f64) -> Result<()> {
    if particles == 0 {
        return Err(field_err(&format!("{id}.particles"), "must be ≥ 1"));
    }
    if !(0.0..=1.0).contains(&threshold) || !threshold.is_finite() {
        return Err(field_err(
            &format!("{id}.resample_threshold"),
            "must be in [0, 1]",
        ));
    }
    Ok(())
}

/// Parse TOML text with `--override key.path=value` entries applied.
///
/// The raw document is parsed untyped first; an optional top-level
/// `scenario = "..."` key selects a preset that the rest of the document is
/// merged onto; overrides are applied to the merged document; only then is
/// the result deserialized into the typed schema (so overrides may create
/// sections that the file never mentions) and validated.
pub fn load_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc: toml::Value = toml::from_str(text)
        .map_err(|e| FilterError::Config(format!("config parse error: {e}")))?;
    if !doc.is_table() {
        return Err(FilterError::Config("config root must be a table".into()));
    }
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    let doc = apply_scenario_base(doc)?;
    let text = render_canonical(&doc)?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| FilterError::Config(format!("config schema error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// If the document names a scenario, merge it onto that preset.
fn apply_scenario_base(mut doc: toml::Value) -> Result<toml::Value> {
    let table = doc.as_table_mut().expect("checked at parse");
    let Some(which) = table.remove("scenario") else {
        return Ok(doc);
    };
    let name = which
        .as_str()
        .ok_or_else(|| field_err("scenario", "must be a string"))?;
    let case: ScenarioCase = name.parse()?;
    let base_text = scenario(case).resolved_toml()?;
    let mut base: toml::Value = toml::from_str(&base_text)
        .map_err(|e| FilterError::Config(format!("scenario preset: {e}")))?;
    deep_merge(&mut base, doc);
    Ok(base)
}

/// Overlay `patch` onto `base`: tables merge key-by-key, everything else
/// (scalars and arrays) replaces wholesale.
fn deep_merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => deep_merge(slot, v),
                    Some(slot) => *slot = v,
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Apply one `key.path=value` override; the value is parsed as a TOML
/// literal when possible and kept as a string otherwise.
fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| field_err("--override", format!("\"{spec}\" is not key.path=value")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(field_err("--override", "empty key path"));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));

    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            field_err(
                path,
                format!("\"{}\" is not a table", segments[..i].join(".")),
            )
        })?;
        if i + 1 == segments.len() {
            table.insert(seg.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("split('.') yields at least one segment");
}

/// Serialize an untyped document with values ordered before sub-tables, the
/// layout TOML serialization requires.
fn render_canonical(doc: &toml::Value) -> Result<String> {
    fn canonicalize(v: toml::Value) -> toml::Value {
        match v {
            toml::Value::Table(t) => {
                let (mut values, mut tables): (Vec<_>, Vec<_>) =
                    t.into_iter().partition(|(_, v)| !v.is_table());
                values.extend(tables.drain(..));
                toml::Value::Table(
                    values
                        .into_iter()
                        .map(|(k, v)| (k, canonicalize(v)))
                        .collect(),
                )
            }
            other => other,
        }
    }
    toml::to_string(&canonicalize(doc.clone()))
        .map_err(|e| FilterError::Config(format!("config render error: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_fails_validation_naming_the_missing_field() {
        let err = load_config("", &[]).unwrap_err().to_string();
        assert!(err.contains("estimation.init_cov"), "{err}");
        // Missing filter sections are also a validation failure, but the
        // covariance requirement is reported first.
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_offending_name() {
        let err = load_config("[model]\nmass = 3.0\n", &[]).unwrap_err().to_string();
        assert!(err.contains("mass"), "{err}");
    }

    #[test]
    fn state_scenario_matches_the_published_settings() {
        let cfg = scenario(ScenarioCase::State);
        cfg.validate().unwrap();
        assert_eq!(cfg.estimation.init_cov.as_deref().unwrap(), &[1e-20; 6][..]);
        assert_eq!(
            cfg.estimation.process_cov.as_deref().unwrap(),
            &[1e-9, 1e-9, 1e-9, 1e-14, 1e-14, 1e-14][..]
        );
        assert_eq!(
            cfg.estimation.meas_cov.as_deref().unwrap(),
            &[1e-5, 1e-8, 1e-8, 1e-8][..]
        );
        assert_eq!(cfg.pf.as_ref().unwrap().particles, 30);
        assert_eq!(cfg.sppf.as_ref().unwrap().particles, 25);
        assert_eq!(cfg.filter_ids(), vec!["ukf", "pf", "sppf"]);
        assert_eq!(cfg.steps(), 6000);
    }

    #[test]
    fn state_parameter_scenario_carries_per_filter_measurement_covariances() {
        let cfg = scenario(ScenarioCase::StateParameter);
        cfg.validate().unwrap();
        assert_eq!(cfg.filter_ids(), vec!["ukf", "pf", "mpf", "gmsppf", "rbpf"]);
        assert_eq!(cfg.seeds, (1..=10).collect::<Vec<_>>());
        assert_eq!(
            cfg.effective_meas_cov("rbpf").unwrap().as_slice(),
            &[1e-14, 1e-4, 1e-6, 1e-4]
        );
        assert_eq!(
            cfg.effective_meas_cov("pf").unwrap().as_slice(),
            &[1e-9, 1e1, 1e-3, 1e-3]
        );
        assert_eq!(cfg.mpf.as_ref().unwrap().particles, 400);
        assert_eq!(cfg.mpf.as_ref().unwrap().p_r, 0.05);
        assert_eq!(cfg.rbpf.as_ref().unwrap().particles, 70);
        assert_eq!(cfg.gmsppf.as_ref().unwrap().g_s, 2);
        assert_eq!(cfg.measurement.displacement_dofs, vec![0]);
        assert_eq!(cfg.state_dim(), 7);
        assert_eq!(cfg.score_spec().parameter_index, Some(6));
        assert_eq!(cfg.score_spec().parameter_truth, 1.0);
    }

    #[test]
    fn input_scenario_wires_the_dual_filter() {
        let cfg = scenario(ScenarioCase::InputStateParameter);
        cfg.validate().unwrap();
        assert_eq!(cfg.filter_ids(), vec!["dkf"]);
        let dkf = cfg.dkf.as_ref().unwrap();
        assert_eq!(dkf.input_cov, 2e2);
        assert_eq!(dkf.input_init_cov, 1e10);
        assert_eq!(
            cfg.estimation.meas_cov.as_deref().unwrap(),
            &[1e-11, 1e-9, 1e-3, 1e-10][..]
        );
        assert_eq!(cfg.model.force_hold_steps, 10);
        assert_eq!(cfg.measurement.displacement_dofs, vec![0]);
    }

    #[test]
    fn scenario_key_in_the_file_selects_the_preset_and_merges_the_rest() {
        let cfg = load_config(
            "scenario = \"state\"\n[pf]\nparticles = 99\n",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.pf.as_ref().unwrap().particles, 99);
        // untouched preset values survive the merge
        assert_eq!(cfg.sppf.as_ref().unwrap().particles, 25);
        assert!(cfg
            .pf
            .as_ref()
            .unwrap()
            .divergence_mahalanobis_sq
            .is_infinite());
    }

    #[test]
    fn overrides_reach_nested_and_fresh_keys() {
        let cfg = load_config(
            "scenario = \"state\"\n",
            &[
                "pf.particles=5".to_string(),
                "model.force_std=20.0".to_string(),
                "pf.resample_scheme=multinomial".to_string(),
                "estimation.meas_cov=[1e-5, 1e-8, 1e-8, 1e-8]".to_string(),
                "seeds=[4, 5]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pf.as_ref().unwrap().particles, 5);
        assert_eq!(cfg.model.force_std, 20.0);
        assert_eq!(
            cfg.pf.as_ref().unwrap().resample_scheme,
            ResampleSchemeKey::Multinomial
        );
        assert_eq!(cfg.seeds, vec![4, 5]);
    }

    #[test]
    fn override_can_select_the_scenario_without_a_file() {
        let cfg = load_config("", &["scenario=state_parameter".to_string()]).unwrap();
        assert_eq!(cfg.estimation.mode, EstimationMode::StateParameter);
        assert_eq!(cfg.filter_ids().len(), 5);
    }

    #[test]
    fn bad_override_value_is_reported_with_a_schema_error() {
        let err = load_config("scenario = \"state\"\n", &["pf.particles=thirty".to_string()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("particles"), "{err}");
    }

    #[test]
    fn divergence_floor_accepts_inf_and_nan_spellings() {
        let cfg = load_config(
            "scenario = \"state\"\n",
            &["pf.divergence_mahalanobis_sq=nan".to_string()],
        )
        .unwrap();
        assert!(cfg.pf.as_ref().unwrap().divergence_mahalanobis_sq.is_nan());
        let cfg = load_config("[pf]\ndivergence_mahalanobis_sq = inf\n", &[]);
        // validation fails for other reasons (no covariances), but the key
        // itself must parse; check via the raw schema instead.
        assert!(cfg.is_err());
        let parsed: ExperimentConfig =
            toml::from_str("[pf]\ndivergence_mahalanobis_sq = inf\n").unwrap();
        assert!(parsed.pf.unwrap().divergence_mahalanobis_sq.is_infinite());
    }

    #[test]
    fn resolved_manifest_round_trips_every_scenario() {
        for case in [
            ScenarioCase::State,
            ScenarioCase::StateParameter,
            ScenarioCase::InputStateParameter,
        ] {
            let cfg = scenario(case);
            let text = cfg.resolved_toml().unwrap();
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn wrong_covariance_length_names_the_field_and_the_expected_dim() {
        let err = load_config(
            "scenario = \"state\"\n",
            &["estimation.process_cov=[1e-9, 1e-9]".to_string()],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("estimation.process_cov"), "{err}");
        assert!(err.contains('6'), "{err}");
    }

    #[test]
    fn dkf_outside_input_mode_is_rejected() {
        let err = load_config(
            "scenario = \"state\"\n[dkf]\n",
            &[],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("input_state_parameter"), "{err}");
    }

    #[test]
    fn every_scenario_filter_constructs_and_steps_once() {
        for case in [
            ScenarioCase::State,
            ScenarioCase::StateParameter,
            ScenarioCase::InputStateParameter,
        ] {
            let mut cfg = scenario(case);
            cfg.model.horizon = 0.05;
            let record = cfg.simulate_record(3).unwrap();
            for id in cfg.filter_ids() {
                let mut filter = cfg.build_filter(id, 3).unwrap();
                let traj = crate::runner::run(filter.as_mut(), id, &record)
                    .unwrap_or_else(|e| panic!("{id}: {e}"));
                assert_eq!(traj.means.len(), record.len());
            }
        }
    }

    #[test]
    fn simulated_record_length_follows_dt_and_horizon() {
        let cfg = scenario(ScenarioCase::State);
        let record = cfg.simulate_record(7).unwrap();
        assert_eq!(record.len(), 6001);
        assert_eq!(record.obs_dim(), 4);
    }

    #[test]
    fn mpf_in_state_mode_requires_explicit_invariants() {
        let err = load_config(
            "scenario = \"state\"\n[mpf]\n",
            &[],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("mpf.invariant_indices"), "{err}");
    }
}
