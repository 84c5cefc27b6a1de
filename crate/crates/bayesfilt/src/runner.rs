//! Uniform filter driver: steps any filter over a [`SimulationRecord`],
//! collects the estimate trajectory with per-step uncertainty, and scores
//! trajectories against the ground truth.
//!
//! The driver is strictly causal by construction — measurement `k` is read
//! only when step `k` is assimilated — and deterministic per seed because
//! every filter draws from seeded substreams.

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::benchmark::SimulationRecord;
use crate::dual::Dkf;
use crate::error::FilterError;
use crate::gaussian::{weighted_moments, GaussianBelief};
use crate::gmsppf::Gmsppf;
use crate::mpf::Mpf;
use crate::particle::BootstrapPf;
use crate::rbpf::Rbpf;
use crate::sppf::Sppf;
use crate::ukf::Ukf;
use crate::Result;

/// Common stepping interface over every filter in the crate.
///
/// `p_prev` is the input held over the interval ending at the new
/// measurement, `p_curr` the input at the measurement instant; filters that
/// estimate the input themselves ignore both.
pub trait SequentialFilter {
    fn step(
        &mut self,
        p_prev: &DVector<f64>,
        p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<()>;

    /// Posterior mean and covariance of the state. Particle filters report
    /// weighted sample moments, mixture filters the mixture moments.
    fn state_moments(&self) -> Result<GaussianBelief>;

    /// Posterior over the estimated input, for filters that carry one.
    fn input_moments(&self) -> Option<GaussianBelief> {
        None
    }
}

impl SequentialFilter for Ukf {
    fn step(
        &mut self,
        p_prev: &DVector<f64>,
        p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<()> {
        Ukf::step(self, p_prev, p_curr, y)
    }

    fn state_moments(&self) -> Result<GaussianBelief> {
        Ok(self.belief().clone())
    }
}

impl SequentialFilter for BootstrapPf {
    fn step(
        &mut self,
        p_prev: &DVector<f64>,
        p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<()> {
        BootstrapPf::step(self, p_prev, p_curr, y)
    }

    fn state_moments(&self) -> Result<GaussianBelief> {
        self.particles().moments()
    }
}

impl SequentialFilter for Mpf {
    fn step(
        &mut self,
        p_prev: &DVector<f64>,
        p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<()> {
        Mpf::step(self, p_prev, p_curr, y)
    }

    fn state_moments(&self) -> Result<GaussianBelief> {
        self.particles().moments()
    }
}

impl SequentialFilter for Sppf {
    fn step(
        &mut self,
        p_prev: &DVector<f64>,
        p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<()> {
        Sppf::step(self, p_prev, p_curr, y)
    }

    fn state_moments(&self) -> Result<GaussianBelief> {
        let states: Vec<DVector<f64>> =
            self.particles().iter().map(|p| p.state.clone()).collect();
        let weights: Vec<f64> = self.particles().iter().map(|p| p.weight).collect();
        weighted_moments(&states, &weights)
    }
}

impl SequentialFilter for Gmsppf {
    fn step(
        &mut self,
        p_prev: &DVector<f64>,
        p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<()> {
        Gmsppf::step(self, p_prev, p_curr, y)
    }

    fn state_moments(&self) -> Result<GaussianBelief> {
        self.posterior().moments()
    }
}

impl SequentialFilter for Rbpf {
    fn step(
        &mut self,
        p_prev: &DVector<f64>,
        p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<()> {
        Rbpf::step(self, p_prev, p_curr, y)
    }

    fn state_moments(&self) -> Result<GaussianBelief> {
        self.moments()
    }
}

impl SequentialFilter for Dkf {
    fn step(
        &mut self,
        _p_prev: &DVector<f64>,
        _p_curr: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<()> {
        Dkf::step(self, y)
    }

    fn state_moments(&self) -> Result<GaussianBelief> {
        Ok(self.belief().state.clone())
    }

    fn input_moments(&self) -> Option<GaussianBelief> {
        Some(self.belief().input.clone())
    }
}

/// Per-step estimates of one filter over one record. Row 0 is the prior,
/// row `k` the posterior after assimilating measurement `k`.
#[derive(Debug, Clone)]
pub struct EstimateTrajectory {
    pub filter_id: String,
    pub times: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    /// Marginal std per state component (covariance diagonal).
    pub stds: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub input_means: Option<Vec<DVector<f64>>>,
    pub input_stds: Option<Vec<DVector<f64>>>,
    /// Wall-clock time of the step loop. Never serialized: output files must
    /// be byte-reproducible.
    pub runtime: Duration,
}

impl EstimateTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate_against(&self, record: &SimulationRecord) -> Result<()> {
        if self.len() != record.len() {
            return Err(FilterError::dims(
                "trajectory length",
                record.len(),
                self.len(),
            ));
        }
        if self.means.len() != self.len() || self.stds.len() != self.len() {
            return Err(FilterError::Contract(
                "trajectory column lengths disagree".into(),
            ));
        }
        if self.stds.iter().flatten().any(|s| !(*s >= 0.0)) {
            return Err(FilterError::Contract("negative std in trajectory".into()));
        }
        Ok(())
    }

    /// CSV columns: `t, mean_x*, std_x*` plus `mean_p*, std_p*` when the
    /// filter estimates the input.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| FilterError::Config(format!("cannot write {}: {e}", path.display())))?;
        let io_err =
            |e: csv::Error| FilterError::Config(format!("csv write {}: {e}", path.display()));
        let n = self.means.first().map_or(0, |m| m.len());
        let n_p = self
            .input_means
            .as_ref()
            .and_then(|ms| ms.first())
            .map_or(0, |m| m.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("mean_x{i}")));
        header.extend((1..=n).map(|i| format!("std_x{i}")));
        header.extend((1..=n_p).map(|i| format!("mean_p{i}")));
        header.extend((1..=n_p).map(|i| format!("std_p{i}")));
        w.write_record(&header).map_err(io_err)?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.means[k].iter().map(|v| v.to_string()));
            row.extend(self.stds[k].iter().map(|v| v.to_string()));
            if let (Some(ims), Some(iss)) = (&self.input_means, &self.input_stds) {
                row.extend(ims[k].iter().map(|v| v.to_string()));
                row.extend(iss[k].iter().map(|v| v.to_string()));
            }
            w.write_record(&row).map_err(io_err)?;
        }
        w.flush()
            .map_err(|e| FilterError::Config(format!("csv flush {}: {e}", path.display())))?;
        Ok(())
    }
}

fn std_from(belief: &GaussianBelief) -> DVector<f64> {
    belief.cov().diagonal().map(|v| v.max(0.0).sqrt())
}

/// Drive `filter` over the noisy outputs of `record`, one measurement per
/// step in order. The known-force lanes feed `record.force`; filters that
/// estimate the input ignore them.
pub fn run<F: SequentialFilter + ?Sized>(
    filter: &mut F,
    filter_id: &str,
    record: &SimulationRecord,
) -> Result<EstimateTrajectory> {
    if record.is_empty() {
        return Err(FilterError::Config("empty record".into()));
    }
    let start = Instant::now();
    let mut means = Vec::with_capacity(record.len());
    let mut stds = Vec::with_capacity(record.len());
    let mut covs = Vec::with_capacity(record.len());
    let mut input_means: Option<Vec<DVector<f64>>> = None;
    let mut input_stds: Option<Vec<DVector<f64>>> = None;

    let mut collect = |filter: &F| -> Result<()> {
        let state = filter.state_moments()?;
        means.push(state.mean().clone());
        stds.push(std_from(&state));
        covs.push(state.cov().clone());
        if let Some(input) = filter.input_moments() {
            input_means
                .get_or_insert_with(Vec::new)
                .push(input.mean().clone());
            input_stds.get_or_insert_with(Vec::new).push(std_from(&input));
        }
        Ok(())
    };

    collect(filter)?;
    for k in 1..record.len() {
        let p_prev = DVector::from_element(1, record.force[k - 1]);
        let p_curr = DVector::from_element(1, record.force[k]);
        filter.step(&p_prev, &p_curr, &record.noisy[k])?;
        collect(filter)?;
    }

    let traj = EstimateTrajectory {
        filter_id: filter_id.to_string(),
        times: record.times.clone(),
        means,
        stds,
        covs,
        input_means,
        input_stds,
        runtime: start.elapsed(),
    };
    traj.validate_against(record)?;
    Ok(traj)
}

/// What [`score`] compares against, beyond the structural truth inside the
/// record.
#[derive(Debug, Clone)]
pub struct ScoreSpec {
    /// Leading fraction of the horizon excluded from parameter/input
    /// metrics (transient window).
    pub burn_in_fraction: f64,
    /// State index of the normalized parameter, if the state is augmented.
    pub parameter_index: Option<usize>,
    /// True normalized parameter value.
    pub parameter_truth: f64,
    /// Confidence level of the chi-square NEES bound.
    pub nees_confidence: f64,
}

impl Default for ScoreSpec {
    fn default() -> Self {
        Self {
            burn_in_fraction: 0.2,
            parameter_index: None,
            parameter_truth: 1.0,
            nees_confidence: 0.99,
        }
    }
}

/// Error metrics of one trajectory against the record truth. Relative
/// quantities are dimensionless; where the truth channel has zero RMS the
/// relative entry holds the absolute RMSE and the flag is set.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub channel_rmse: Vec<f64>,
    pub channel_rel_rmse: Vec<f64>,
    pub channel_rel_is_absolute: Vec<bool>,
    pub terminal_parameter_rel_error: Option<f64>,
    /// Pearson correlation between estimated and true input over the
    /// post-burn-in window.
    pub input_pearson: Option<f64>,
    /// Fraction of steps whose NEES stays within the chi-square bound.
    pub nees_fraction: Option<f64>,
    pub nees_bound: Option<f64>,
}

impl Metrics {
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        for (i, v) in self.channel_rmse.iter().enumerate() {
            kv.push((format!("channel_rmse_{}", i + 1), v.to_string()));
        }
        for (i, v) in self.channel_rel_rmse.iter().enumerate() {
            kv.push((format!("channel_rel_rmse_{}", i + 1), v.to_string()));
        }
        for (i, v) in self.channel_rel_is_absolute.iter().enumerate() {
            kv.push((format!("channel_rel_is_absolute_{}", i + 1), v.to_string()));
        }
        if let Some(v) = self.terminal_parameter_rel_error {
            kv.push(("terminal_parameter_rel_error".into(), v.to_string()));
        }
        if let Some(v) = self.input_pearson {
            kv.push(("input_pearson".into(), v.to_string()));
        }
        if let Some(v) = self.nees_fraction {
            kv.push(("nees_fraction".into(), v.to_string()));
        }
        if let Some(v) = self.nees_bound {
            kv.push(("nees_bound".into(), v.to_string()));
        }
        kv
    }

    /// Flat `key = value` report, one line per metric.
    pub fn write_report(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in self.to_key_values() {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        let mut f = std::fs::File::create(path)
            .map_err(|e| FilterError::Config(format!("cannot write {}: {e}", path.display())))?;
        f.write_all(out.as_bytes())
            .map_err(|e| FilterError::Config(format!("write {}: {e}", path.display())))?;
        Ok(())
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || n != b.len() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..n {
        let da = a[i] - ma;
        let db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// First index of the post-burn-in window.
pub fn burn_in_start(len: usize, fraction: f64) -> usize {
    ((len as f64) * fraction).floor() as usize
}

/// Score a trajectory against the record it was produced from.
pub fn score(
    traj: &EstimateTrajectory,
    record: &SimulationRecord,
    spec: &ScoreSpec,
) -> Result<Metrics> {
    traj.validate_against(record)?;
    if !(0.0..1.0).contains(&spec.burn_in_fraction) {
        return Err(FilterError::Config(format!(
            "burn-in fraction {} outside [0, 1)",
            spec.burn_in_fraction
        )));
    }
    if !(0.0..1.0).contains(&spec.nees_confidence) || spec.nees_confidence <= 0.0 {
        return Err(FilterError::Config(format!(
            "NEES confidence {} outside (0, 1)",
            spec.nees_confidence
        )));
    }
    let n = traj.means[0].len();
    let n_truth = record.states[0].len();
    // truth per channel: structural states from the record, then the
    // constant normalized parameter for augmented channels
    let truth_at = |k: usize, c: usize| -> Result<f64> {
        if c < n_truth {
            Ok(record.states[k][c])
        } else if spec.parameter_index == Some(c) {
            Ok(spec.parameter_truth)
        } else {
            Err(FilterError::Config(format!(
                "no truth for estimated channel {c}"
            )))
        }
    };

    let steps = traj.len();
    let mut channel_rmse = Vec::with_capacity(n);
    let mut channel_rel_rmse = Vec::with_capacity(n);
    let mut channel_rel_is_absolute = Vec::with_capacity(n);
    for c in 0..n {
        let mut se = 0.0;
        let mut st = 0.0;
        for k in 0..steps {
            let t = truth_at(k, c)?;
            let e = traj.means[k][c] - t;
            se += e * e;
            st += t * t;
        }
        let rmse = (se / steps as f64).sqrt();
        let truth_rms = (st / steps as f64).sqrt();
        channel_rmse.push(rmse);
        if truth_rms == 0.0 {
            channel_rel_rmse.push(rmse);
            channel_rel_is_absolute.push(true);
        } else {
            channel_rel_rmse.push(rmse / truth_rms);
            channel_rel_is_absolute.push(false);
        }
    }

    let terminal_parameter_rel_error = match spec.parameter_index {
        Some(c) => {
            if c >= n {
                return Err(FilterError::dims("parameter index", n, c));
            }
            if spec.parameter_truth == 0.0 {
                return Err(FilterError::Config(
                    "parameter truth of zero has no relative error".into(),
                ));
            }
            let last = traj.means[steps - 1][c];
            Some((last - spec.parameter_truth).abs() / spec.parameter_truth.abs())
        }
        None => None,
    };

    let input_pearson = match &traj.input_means {
        Some(ims) => {
            let start = burn_in_start(steps, spec.burn_in_fraction);
            let est: Vec<f64> = ims[start..].iter().map(|m| m[0]).collect();
            let truth: Vec<f64> = record.force[start..].to_vec();
            pearson(&est, &truth)
        }
        None => None,
    };

    // NEES over steps with an invertible covariance
    let bound = ChiSquared::new(n as f64)
        .map_err(|e| FilterError::Config(format!("chi-square dof {n}: {e}")))?
        .inverse_cdf(spec.nees_confidence);
    let mut inside = 0usize;
    let mut counted = 0usize;
    for k in 0..steps {
        let e = DVector::from_fn(n, |c, _| {
            truth_at(k, c).map(|t| traj.means[k][c] - t).unwrap_or(0.0)
        });
        if let Some(chol) = traj.covs[k].clone().cholesky() {
            let nees = e.dot(&chol.solve(&e));
            counted += 1;
            if nees <= bound {
                inside += 1;
            }
        }
    }
    let nees_fraction = (counted > 0).then(|| inside as f64 / counted as f64);

    Ok(Metrics {
        channel_rmse,
        channel_rel_rmse,
        channel_rel_is_absolute,
        terminal_parameter_rel_error,
        input_pearson,
        nees_fraction,
        nees_bound: nees_fraction.is_some().then_some(bound),
    })
}
