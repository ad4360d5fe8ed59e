//! DANet: learned correction of AOD550 forecasts from sparse observations.
//!
//! The network sees the forecast and the observation-minus-forecast
//! discrepancy (zero where nothing was observed) and predicts the forecast
//! error over the whole grid. The analysis is forecast plus that estimate.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecaster::{
    rollout_from_dataset, train_model, ChannelStats, ErrorField, ForecastError, ForecastModel, SampleSource, Split,
    TrainConfig, TrainLog,
};
use crate::netblocks::{ModelWeights, NetError, NetworkSpec};
use crate::synthworld::{Channel, Dataset, GridField, ObservationSet, Units, OBS_SENTINEL};

#[derive(Debug, Error)]
pub enum AssimError {
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    World(#[from] crate::synthworld::WorldError),
    #[error("no DA training pairs")]
    NoPairs,
    #[error("grid mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("DA interval k must be >= 1")]
    ZeroInterval,
}

pub type Result<T> = std::result::Result<T, AssimError>;

fn check_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(AssimError::Shape { expected, actual })
    }
}

/// Outlier rejection for observed AOD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutlierPolicy {
    /// Reject values more than this many standard deviations from the mean
    /// of the observed values.
    pub z_threshold: f64,
    /// Reject values above this physical cap.
    pub max_value: f64,
}

impl Default for OutlierPolicy {
    fn default() -> Self {
        Self {
            z_threshold: 4.0,
            max_value: 5.0,
        }
    }
}

/// Masks outliers and clips the rest at 0. The result may be empty.
pub fn preprocess_observations(raw: &ObservationSet, policy: &OutlierPolicy) -> ObservationSet {
    let observed: Vec<f64> = raw.observed().map(|(_, v)| v).collect();
    let n = observed.len().max(1) as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let std = (observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut out = raw.clone();
    for (i, keep) in out.mask.iter_mut().enumerate() {
        if !*keep {
            continue;
        }
        let v = raw.values.values()[i];
        let outlier = !v.is_finite() || v > policy.max_value || (v - mean).abs() > policy.z_threshold * std;
        if outlier {
            *keep = false;
            out.values.values_mut()[i] = OBS_SENTINEL;
        } else {
            out.values.values_mut()[i] = v.max(0.0);
        }
    }
    out
}

/// One DANet training example, in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct DAPair {
    pub time_index: usize,
    pub aod_forecast: GridField,
    /// `obs − forecast` at observed cells, exactly 0 elsewhere.
    pub discrepancy: GridField,
    /// `truth − forecast` everywhere.
    pub label: GridField,
}

/// Zero-filled `obs − forecast`.
pub fn discrepancy(aod_forecast: &GridField, obs: &ObservationSet) -> Result<GridField> {
    check_dims(aod_forecast.dims(), obs.values.dims())?;
    let (h, w) = aod_forecast.dims();
    let mut d = GridField::zeros(h, w, Units::Dimensionless);
    for (i, v) in obs.observed() {
        d.values_mut()[i] = v - aod_forecast.values()[i];
    }
    Ok(d)
}

impl DAPair {
    pub fn new(aod_forecast: GridField, obs: &ObservationSet, truth_aod: &GridField) -> Result<Self> {
        check_dims(aod_forecast.dims(), truth_aod.dims())?;
        let (h, w) = aod_forecast.dims();
        let label = truth_aod.values().iter().zip(aod_forecast.values()).map(|(t, f)| t - f).collect();
        Ok(Self {
            time_index: obs.time_index,
            discrepancy: discrepancy(&aod_forecast, obs)?,
            label: GridField::new(h, w, label, Units::Dimensionless)?,
            aod_forecast,
        })
    }
}

/// Pairs for every DA time in `segment` (multiples of `k`) that has
/// non-empty preprocessed observations. Each forecast is a `k`-step rollout
/// started from truth at `t − k`.
pub fn build_da_training_set<M: ForecastModel + ?Sized>(
    model: &M,
    ds: &Dataset,
    segment: Range<usize>,
    k: usize,
    policy: &OutlierPolicy,
) -> Result<Vec<DAPair>> {
    if k == 0 {
        return Err(AssimError::ZeroInterval);
    }
    let first = segment.start.max(ds.t_start() + k);
    let times: Vec<usize> = (first.div_ceil(k) * k..segment.end.min(ds.t_stop())).step_by(k).collect();
    let mut pairs = Vec::with_capacity(times.len());
    for t in times {
        let Some(raw) = ds.observation(t) else { continue };
        let obs = preprocess_observations(&raw, policy);
        if obs.is_empty() {
            continue;
        }
        let init = ds.field(t - k, Channel::Aod550)?;
        let traj = rollout_from_dataset(model, ds, t - k, &init, k)?;
        let forecast = traj.into_iter().last().expect("k >= 1").aod550;
        pairs.push(DAPair::new(forecast, &obs, &ds.field(t, Channel::Aod550)?)?);
    }
    Ok(pairs)
}

/// DANet scaling: forecast AOD is z-scored with PredNet's AOD statistics,
/// the discrepancy is divided by the same standard deviation, and the error
/// label is z-scored with its own statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaNorm {
    pub aod: ChannelStats,
    pub error: ChannelStats,
}

impl DaNorm {
    fn fill_input(&self, aod_forecast: &GridField, discrepancy: &GridField, input: &mut [f32]) {
        let hw = aod_forecast.len();
        for (o, &v) in input[..hw].iter_mut().zip(aod_forecast.values()) {
            *o = self.aod.normalize(v);
        }
        for (o, &d) in input[hw..2 * hw].iter_mut().zip(discrepancy.values()) {
            *o = (d / self.aod.std) as f32;
        }
    }
}

/// Anything that estimates the AOD forecast error from a forecast and
/// preprocessed observations.
pub trait ErrorEstimator: Sync {
    fn estimate(&self, aod_forecast: &GridField, obs: &ObservationSet) -> Result<ErrorField>;
}

/// A trained DANet with its scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct DaNet {
    pub spec: NetworkSpec,
    pub weights: ModelWeights,
    pub norm: DaNorm,
}

impl DaNet {
    pub fn new(spec: NetworkSpec, weights: ModelWeights, norm: DaNorm) -> Result<Self> {
        weights.check(&spec)?;
        if spec.in_channels != 2 || spec.out_channels != 1 {
            return Err(NetError::ChannelMismatch {
                expected: 2,
                actual: spec.in_channels,
            }
            .into());
        }
        Ok(Self { spec, weights, norm })
    }
}

impl ErrorEstimator for DaNet {
    fn estimate(&self, aod_forecast: &GridField, obs: &ObservationSet) -> Result<ErrorField> {
        estimate_error(self, aod_forecast, obs)
    }
}

/// DANet's estimate of `truth − forecast` over the full grid, rounded to `f32`.
pub fn estimate_error(net: &DaNet, aod_forecast: &GridField, obs: &ObservationSet) -> Result<ErrorField> {
    let (h, w) = aod_forecast.dims();
    let d = discrepancy(aod_forecast, obs)?;
    let mut input = vec![0.0f32; 2 * h * w];
    net.norm.fill_input(aod_forecast, &d, &mut input);
    let out = net
        .weights
        .infer(&net.spec, &input, h, w)
        .map_err(ForecastError::from)?;
    let values = out.iter().map(|&z| net.norm.error.denormalize(z)).collect();
    Ok(ErrorField {
        time_index: obs.time_index,
        values: GridField::new(h, w, values, Units::Dimensionless)?,
    })
}

/// Upper-bound stub: returns the exact forecast error by reading truth.
pub struct TruthOracle<'a> {
    pub dataset: &'a Dataset,
}

impl ErrorEstimator for TruthOracle<'_> {
    fn estimate(&self, aod_forecast: &GridField, obs: &ObservationSet) -> Result<ErrorField> {
        let truth = self.dataset.field(obs.time_index, Channel::Aod550)?;
        check_dims(truth.dims(), aod_forecast.dims())?;
        let (h, w) = truth.dims();
        let values = truth.values().iter().zip(aod_forecast.values()).map(|(t, f)| t - f).collect();
        Ok(ErrorField {
            time_index: obs.time_index,
            values: GridField::new(h, w, values, Units::Dimensionless)?,
        })
    }
}

/// `forecast + ε̃`, clipped at 0.
pub fn analysis_update(aod_forecast: &GridField, error: &ErrorField) -> Result<GridField> {
    check_dims(aod_forecast.dims(), error.values.dims())?;
    let (h, w) = aod_forecast.dims();
    let values = aod_forecast
        .values()
        .iter()
        .zip(error.values.values())
        .map(|(f, e)| (f + e).max(0.0))
        .collect();
    Ok(GridField::new(h, w, values, Units::Dimensionless)?)
}

struct PairSamples<'a> {
    pairs: &'a [DAPair],
    norm: DaNorm,
}

impl SampleSource for PairSamples<'_> {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn dims(&self) -> (usize, usize) {
        self.pairs[0].aod_forecast.dims()
    }

    fn in_channels(&self) -> usize {
        2
    }

    fn out_channels(&self) -> usize {
        1
    }

    fn fill(&self, idx: usize, input: &mut [f32], label: &mut [f32]) -> crate::forecaster::Result<()> {
        let p = &self.pairs[idx];
        self.norm.fill_input(&p.aod_forecast, &p.discrepancy, input);
        for (o, &e) in label.iter_mut().zip(p.label.values()) {
            *o = self.norm.error.normalize(e);
        }
        Ok(())
    }
}

/// Trains DANet on `pairs`; the trailing `validation_fraction` is held out
/// and the error scaling is fitted on the rest.
pub fn train_danet(
    pairs: &[DAPair],
    aod_stats: ChannelStats,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(DaNet, TrainLog)> {
    spec.validate()?;
    if pairs.is_empty() {
        return Err(AssimError::NoPairs);
    }
    let dims = pairs[0].aod_forecast.dims();
    for p in pairs {
        check_dims(dims, p.aod_forecast.dims())?;
        check_dims(dims, p.discrepancy.dims())?;
        check_dims(dims, p.label.dims())?;
    }
    let split = Split::trailing(pairs.len(), cfg.validation_fraction);
    let labels: Vec<Vec<f32>> = split.train.iter().map(|&i| pairs[i].label.to_f32()).collect();
    let norm = DaNorm {
        aod: aod_stats,
        error: ChannelStats::from_slices(labels.iter().map(|v| v.as_slice())),
    };
    let source = PairSamples { pairs, norm };
    let (weights, log) = train_model(spec, &source, &split, cfg)?;
    Ok((DaNet::new(spec.clone(), weights, norm)?, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(values: &[f64]) -> ObservationSet {
        ObservationSet {
            time_index: 8,
            values: GridField::new(1, values.len(), values.to_vec(), Units::Dimensionless).unwrap(),
            mask: vec![true; values.len()],
        }
    }

    #[test]
    fn clean_observations_pass_through() {
        let o = obs(&[0.1, 0.2, 0.15, 0.3]);
        assert_eq!(preprocess_observations(&o, &OutlierPolicy::default()), o);
    }

    #[test]
    fn cap_catches_what_the_z_rule_misses() {
        let policy = OutlierPolicy::default();
        let p = preprocess_observations(&obs(&[1.0, 1.0, 1.0, 1.0, 100.0]), &policy);
        assert_eq!(p.mask, vec![true, true, true, true, false]);
        assert_eq!(p.values.values()[4], OBS_SENTINEL);
        let mut v = vec![1.0; 9];
        v.push(50.0);
        let p = preprocess_observations(&obs(&v), &policy);
        assert_eq!(p.observed_count(), 9);
        assert!(!p.mask[9]);

        // The z-rule alone keeps both.
        let z_only = OutlierPolicy {
            max_value: f64::INFINITY,
            ..policy
        };
        assert!(preprocess_observations(&obs(&[1.0, 1.0, 1.0, 1.0, 100.0]), &z_only).mask[4]);
        assert!(preprocess_observations(&obs(&v), &z_only).mask[9]);
    }

    #[test]
    fn z_rule_rejects_far_values() {
        let mut v = vec![0.2; 40];
        v.push(3.0);
        let p = preprocess_observations(&obs(&v), &OutlierPolicy::default());
        assert_eq!(p.observed_count(), 40);
    }

    #[test]
    fn all_masked_stays_empty() {
        let mut o = obs(&[OBS_SENTINEL; 3]);
        o.mask = vec![false; 3];
        let p = preprocess_observations(&o, &OutlierPolicy::default());
        assert!(p.is_empty());
    }

    #[test]
    fn analysis_adds_error() {
        let f = GridField::filled(2, 2, 1.0, Units::Dimensionless);
        let e = ErrorField {
            time_index: 0,
            values: GridField::filled(2, 2, 0.5, Units::Dimensionless),
        };
        assert!(analysis_update(&f, &e).unwrap().values().iter().all(|&v| v == 1.5));
        let zero = ErrorField::zeros(0, 2, 2, Units::Dimensionless);
        assert_eq!(analysis_update(&f, &zero).unwrap(), f);
        let neg = ErrorField {
            time_index: 0,
            values: GridField::filled(2, 2, -3.0, Units::Dimensionless),
        };
        assert!(analysis_update(&f, &neg).unwrap().values().iter().all(|&v| v == 0.0));
        let bad = ErrorField::zeros(0, 1, 4, Units::Dimensionless);
        assert!(analysis_update(&f, &bad).is_err());
    }

    #[test]
    fn discrepancy_is_zero_off_mask() {
        let f = GridField::new(1, 4, vec![0.1, 0.2, 0.3, 0.4], Units::Dimensionless).unwrap();
        let mut o = obs(&[0.5, OBS_SENTINEL, 0.25, OBS_SENTINEL]);
        o.mask = vec![true, false, true, false];
        let d = discrepancy(&f, &o).unwrap();
        assert_eq!(d.values(), &[0.5 - 0.1, 0.0, 0.25 - 0.3, 0.0]);
    }
}
