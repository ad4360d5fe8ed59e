//! The operational cycle: forecast `k` steps, assimilate AOD observations,
//! restart from the analysis, repeat. Also the uninterrupted PredNet-only
//! baseline it is compared against.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assimilator::{analysis_update, preprocess_observations, AssimError, ErrorEstimator, OutlierPolicy};
use crate::evalkit::{EvalError, MetricSeries};
use crate::forecaster::{forecast_step, ForecastError, ForecastModel};
use crate::synthworld::{Channel, Dataset, GridField, StateSnapshot, WorldError};

#[derive(Debug, Error)]
pub enum OpsError {
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Assim(#[from] AssimError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid cycle config: {0}")]
    InvalidConfig(String),
    #[error("run [{start}, {end}] is not covered by the dataset (frames up to {stop})")]
    SegmentTooShort { start: usize, end: usize, stop: usize },
}

pub type Result<T> = std::result::Result<T, OpsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleConfig {
    /// DA interval in steps.
    pub k: usize,
    /// Total steps forecast.
    pub horizon: usize,
    /// Initial condition time; `None` uses the dataset's operational start.
    pub start: Option<usize>,
    /// Keep every n-th state in the trajectory (metrics cover every step).
    pub emit_cadence: usize,
    pub outliers: OutlierPolicy,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            k: 4,
            horizon: 960,
            start: None,
            emit_cadence: 1,
            outliers: OutlierPolicy::default(),
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(OpsError::InvalidConfig("k must be >= 1".into()));
        }
        if self.horizon < self.k {
            return Err(OpsError::InvalidConfig(format!(
                "horizon {} must be >= k {}",
                self.horizon, self.k
            )));
        }
        if self.emit_cadence == 0 {
            return Err(OpsError::InvalidConfig("emit_cadence must be >= 1".into()));
        }
        Ok(())
    }

    fn start_in(&self, ds: &Dataset) -> Result<usize> {
        let start = self.start.unwrap_or(ds.grid().t2);
        let end = start + self.horizon;
        if !ds.contains(start) || !ds.contains(end) {
            return Err(OpsError::SegmentTooShort {
                start,
                end,
                stop: ds.t_stop(),
            });
        }
        Ok(start)
    }
}

/// Wall-clock cost of one forecast/assimilation cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleTiming {
    /// Step (from the start) at which the cycle ended.
    pub step: usize,
    pub forecast_seconds: f64,
    pub assimilation_seconds: f64,
}

/// One analysis produced by the cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub time_index: usize,
    pub forecast_aod: GridField,
    pub analysis_aod: GridField,
    pub observed_cells: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub experiment: String,
    /// State after each emitted step (analysis AOD where DA fired).
    pub trajectory: Vec<StateSnapshot>,
    pub analyses: Vec<Analysis>,
    /// Per-step scores of the state against truth.
    pub aod: MetricSeries,
    pub pm25: MetricSeries,
    pub timings: Vec<CycleTiming>,
}

impl RunResult {
    fn new(experiment: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            trajectory: Vec::new(),
            analyses: Vec::new(),
            aod: MetricSeries::new(experiment, "aod550"),
            pm25: MetricSeries::new(experiment, "pm25"),
            timings: Vec::new(),
        }
    }

    fn record(&mut self, ds: &Dataset, step: usize, state: &StateSnapshot, cadence: usize) -> Result<()> {
        let t = state.time_index;
        self.aod.push(t, &ds.field(t, Channel::Aod550)?, &state.aod550)?;
        self.pm25.push(t, &ds.field(t, Channel::Pm25)?, &state.pm25)?;
        if step % cadence == 0 {
            self.trajectory.push(state.clone());
        }
        Ok(())
    }
}

fn run(
    name: &str,
    model: &(impl ForecastModel + ?Sized),
    estimator: Option<&dyn ErrorEstimator>,
    ds: &Dataset,
    cfg: &CycleConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    let start = cfg.start_in(ds)?;
    let mut result = RunResult::new(name);
    let initial = ds.snapshot(start)?;
    let mut aod = initial.aod550;
    let mut clock = Instant::now();
    let mut forecast_seconds = 0.0;
    for s in 1..=cfg.horizon {
        let t = start + s;
        let mut state = forecast_step(model, &aod, &ds.aux(t)?)?;
        let da_due = s % cfg.k == 0 && s < cfg.horizon;
        if let (true, Some(est)) = (da_due, estimator) {
            forecast_seconds += clock.elapsed().as_secs_f64();
            clock = Instant::now();
            if let Some(raw) = ds.observation(t) {
                let obs = preprocess_observations(&raw, &cfg.outliers);
                if !obs.is_empty() {
                    let err = est.estimate(&state.aod550, &obs)?;
                    let analysis = analysis_update(&state.aod550, &err)?;
                    result.analyses.push(Analysis {
                        time_index: t,
                        forecast_aod: std::mem::replace(&mut state.aod550, analysis.clone()),
                        analysis_aod: analysis,
                        observed_cells: obs.observed_count(),
                    });
                }
            }
            result.timings.push(CycleTiming {
                step: s,
                forecast_seconds,
                assimilation_seconds: clock.elapsed().as_secs_f64(),
            });
            forecast_seconds = 0.0;
            clock = Instant::now();
        }
        result.record(ds, s, &state, cfg.emit_cadence)?;
        aod = state.aod550;
    }
    Ok(result)
}

/// Forecast/assimilate cycle from truth at the start time. DA fires at steps
/// `k, 2k, …` strictly before the horizon, when observations survive
/// preprocessing; only the AOD channel is replaced.
pub fn run_operational(
    model: &(impl ForecastModel + ?Sized),
    estimator: &dyn ErrorEstimator,
    ds: &Dataset,
    cfg: &CycleConfig,
) -> Result<RunResult> {
    run("d-dnet", model, Some(estimator), ds, cfg)
}

/// One uninterrupted rollout over the horizon from the same initial state.
pub fn run_prednet_only(model: &(impl ForecastModel + ?Sized), ds: &Dataset, cfg: &CycleConfig) -> Result<RunResult> {
    run("prednet", model, None, ds, cfg)
}
