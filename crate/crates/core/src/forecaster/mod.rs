//! PredNet: one-step forecasting of PM2.5 and AOD550, autoregressive
//! rollouts, and forecast-error bookkeeping.
//!
//! The network sees `[aod_t, aux_{t+1}]` (eight z-scored channels) and
//! predicts `[pm25_{t+1}, aod_{t+1}]`. Only AOD is fed back during a rollout.
//! Forecast fields are rounded to `f32`, the dataset's storage precision.

mod training;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit;
use crate::netblocks::{ModelWeights, NetError, NetworkSpec};
use crate::synthworld::{AuxiliaryFrame, Channel, Dataset, GridField, StateSnapshot, Units, WorldError};
use crate::tensor::TensorError;

pub use training::{train_model, train_network, EpochLog, SampleSource, Split, TrainConfig, TrainLog};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Eval(#[from] evalkit::EvalError),
    #[error("segment [{start}, {stop}) is too short: need at least {need} steps")]
    SegmentTooShort { start: usize, stop: usize, need: usize },
    #[error("no training samples")]
    EmptyTrainingSet,
    #[error("non-finite loss {loss} at epoch {epoch} (sample {sample})")]
    NanLoss { epoch: usize, sample: usize, loss: f64 },
    #[error("rollout of {needed} steps needs {needed} auxiliary frames, got {available}")]
    InsufficientAux { needed: usize, available: usize },
    #[error("grid mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ForecastError>;

/// PredNet input channels, in order.
pub const PREDNET_INPUTS: [Channel; 8] = [
    Channel::Aod550,
    Channel::T2m,
    Channel::U10,
    Channel::V10,
    Channel::Humidity,
    Channel::Geopotential,
    Channel::BcEmis,
    Channel::OcEmis,
];

/// PredNet output channels, in order.
pub const PREDNET_OUTPUTS: [Channel; 2] = [Channel::Pm25, Channel::Aod550];

/// Mean and standard deviation of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    /// Population statistics; a constant channel gets `std = 1`.
    pub fn from_slices<'a>(slices: impl Iterator<Item = &'a [f32]> + Clone) -> Self {
        let (mut n, mut sum) = (0usize, 0.0);
        for s in slices.clone() {
            n += s.len();
            sum += s.iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / n.max(1) as f64;
        let ss: f64 = slices
            .map(|s| s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>())
            .sum();
        let std = (ss / n.max(1) as f64).sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn normalize(&self, v: f64) -> f32 {
        ((v - self.mean) / self.std) as f32
    }

    /// Inverse of [`Self::normalize`], rounded to `f32`.
    pub fn denormalize(&self, z: f32) -> f64 {
        (z as f64 * self.std + self.mean) as f32 as f64
    }
}

/// Per-channel z-score statistics of a network's inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub inputs: Vec<ChannelStats>,
    pub outputs: Vec<ChannelStats>,
}

/// PredNet normalization from the frames in `segment` only.
pub fn prednet_norm_stats(ds: &Dataset, segment: Range<usize>) -> Result<NormStats> {
    check_segment(ds, &segment, 1)?;
    let stats = |ch: Channel| -> Result<ChannelStats> {
        let slices = segment
            .clone()
            .map(|t| ds.channel(t, ch))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(ChannelStats::from_slices(slices.into_iter()))
    };
    Ok(NormStats {
        inputs: PREDNET_INPUTS.iter().map(|&c| stats(c)).collect::<Result<_>>()?,
        outputs: PREDNET_OUTPUTS.iter().map(|&c| stats(c)).collect::<Result<_>>()?,
    })
}

fn check_segment(ds: &Dataset, segment: &Range<usize>, need: usize) -> Result<()> {
    let ok = segment.end >= segment.start + need && ds.contains(segment.start) && ds.contains(segment.end - 1);
    if ok {
        Ok(())
    } else {
        Err(ForecastError::SegmentTooShort {
            start: segment.start,
            stop: segment.end,
            need,
        })
    }
}

/// Anything that maps `(aod_t, aux_{t+1})` to `(pm25_{t+1}, aod_{t+1})`.
pub trait ForecastModel: Sync {
    fn predict(&self, aod: &GridField, aux_next: &AuxiliaryFrame) -> Result<(GridField, GridField)>;
}

/// A trained PredNet with its normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PredNet {
    pub spec: NetworkSpec,
    pub weights: ModelWeights,
    pub norm: NormStats,
}

impl PredNet {
    pub fn new(spec: NetworkSpec, weights: ModelWeights, norm: NormStats) -> Result<Self> {
        weights.check(&spec)?;
        if spec.in_channels != PREDNET_INPUTS.len() || spec.out_channels != PREDNET_OUTPUTS.len() {
            return Err(NetError::ChannelMismatch {
                expected: PREDNET_INPUTS.len(),
                actual: spec.in_channels,
            }
            .into());
        }
        if norm.inputs.len() != spec.in_channels || norm.outputs.len() != spec.out_channels {
            return Err(ForecastError::InvalidConfig("normalization does not match the network channels".into()));
        }
        Ok(Self { spec, weights, norm })
    }
}

impl ForecastModel for PredNet {
    fn predict(&self, aod: &GridField, aux_next: &AuxiliaryFrame) -> Result<(GridField, GridField)> {
        let (h, w) = aod.dims();
        check_dims((h, w), aux_next.dims())?;
        let hw = h * w;
        let mut input = vec![0.0f32; PREDNET_INPUTS.len() * hw];
        let fields = std::iter::once(aod).chain(aux_next.channels());
        for ((chunk, field), stats) in input.chunks_mut(hw).zip(fields).zip(&self.norm.inputs) {
            check_dims((h, w), field.dims())?;
            for (o, &v) in chunk.iter_mut().zip(field.values()) {
                *o = stats.normalize(v);
            }
        }
        let out = self.weights.infer(&self.spec, &input, h, w)?;
        let mut fields = out.chunks(hw).zip(&self.norm.outputs).map(|(z, s)| {
            z.iter().map(|&v| s.denormalize(v).max(0.0)).collect::<Vec<f64>>()
        });
        let pm = GridField::new(h, w, fields.next().expect("two outputs"), Units::Concentration)?;
        let aod = GridField::new(h, w, fields.next().expect("two outputs"), Units::Dimensionless)?;
        Ok((pm, aod))
    }
}

fn check_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(ForecastError::Shape { expected, actual })
    }
}

/// One forecast step; both outputs are clipped at 0.
pub fn forecast_step<M: ForecastModel + ?Sized>(
    model: &M,
    state_aod: &GridField,
    aux_next: &AuxiliaryFrame,
) -> Result<StateSnapshot> {
    let (mut pm25, mut aod550) = model.predict(state_aod, aux_next)?;
    check_dims(state_aod.dims(), pm25.dims())?;
    check_dims(state_aod.dims(), aod550.dims())?;
    pm25.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    aod550.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(StateSnapshot {
        time_index: aux_next.time_index,
        pm25,
        aod550,
    })
}

/// Iterates [`forecast_step`], feeding each forecast AOD into the next step.
pub fn forecast_rollout<M: ForecastModel + ?Sized>(
    model: &M,
    initial_aod: &GridField,
    aux_series: &[AuxiliaryFrame],
    n_steps: usize,
) -> Result<Vec<StateSnapshot>> {
    if aux_series.len() < n_steps {
        return Err(ForecastError::InsufficientAux {
            needed: n_steps,
            available: aux_series.len(),
        });
    }
    rollout_with(model, initial_aod, n_steps, |j| Ok(aux_series[j].clone()))
}

/// Rollout from `initial_aod` valid at `start`, with aux frames read from
/// the dataset at `start + 1 ..= start + n_steps`.
pub fn rollout_from_dataset<M: ForecastModel + ?Sized>(
    model: &M,
    ds: &Dataset,
    start: usize,
    initial_aod: &GridField,
    n_steps: usize,
) -> Result<Vec<StateSnapshot>> {
    if n_steps > 0 && !ds.contains(start + n_steps) {
        return Err(ForecastError::InsufficientAux {
            needed: n_steps,
            available: ds.t_stop().saturating_sub(start + 1),
        });
    }
    rollout_with(model, initial_aod, n_steps, |j| Ok(ds.aux(start + 1 + j)?))
}

fn rollout_with<M: ForecastModel + ?Sized>(
    model: &M,
    initial_aod: &GridField,
    n_steps: usize,
    mut aux: impl FnMut(usize) -> Result<AuxiliaryFrame>,
) -> Result<Vec<StateSnapshot>> {
    let mut out: Vec<StateSnapshot> = Vec::with_capacity(n_steps);
    for j in 0..n_steps {
        let aod = out.last().map_or(initial_aod, |s| &s.aod550);
        let next = forecast_step(model, aod, &aux(j)?)?;
        out.push(next);
    }
    Ok(out)
}

/// Per-cell `truth − forecast` of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorField {
    pub time_index: usize,
    pub values: GridField,
}

impl ErrorField {
    pub fn zeros(time_index: usize, height: usize, width: usize, units: Units) -> Self {
        Self {
            time_index,
            values: GridField::zeros(height, width, units),
        }
    }
}

fn difference(time_index: usize, truth: &GridField, forecast: &GridField) -> Result<ErrorField> {
    check_dims(truth.dims(), forecast.dims())?;
    let (h, w) = truth.dims();
    let values = truth.values().iter().zip(forecast.values()).map(|(t, f)| t - f).collect();
    Ok(ErrorField {
        time_index,
        values: GridField::new(h, w, values, truth.units)?,
    })
}

/// `(pm25, aod550)` forecast errors, `truth − forecast`.
pub fn forecast_error(truth: &StateSnapshot, forecast: &StateSnapshot) -> Result<(ErrorField, ErrorField)> {
    Ok((
        difference(truth.time_index, &truth.pm25, &forecast.pm25)?,
        difference(truth.time_index, &truth.aod550, &forecast.aod550)?,
    ))
}

/// Uniformly drawn rollout start times in `[from, to − max_lead)`.
pub fn sample_start_times(from: usize, to: usize, max_lead: usize, count: usize, seed: u64) -> Vec<usize> {
    let hi = to.saturating_sub(max_lead);
    if hi <= from {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random_range(from..hi)).collect()
}

/// Mean AOD RMSE at each lead `1..=max_lead` over rollouts started from
/// truth at `starts`. Rollouts run in parallel.
pub fn lead_time_curve<M: ForecastModel + ?Sized>(
    model: &M,
    ds: &Dataset,
    starts: &[usize],
    max_lead: usize,
) -> Result<Vec<f64>> {
    if starts.is_empty() {
        return Err(ForecastError::EmptyTrainingSet);
    }
    let per_start = starts
        .par_iter()
        .map(|&s| -> Result<Vec<f64>> {
            let init = ds.field(s, Channel::Aod550)?;
            let traj = rollout_from_dataset(model, ds, s, &init, max_lead)?;
            traj.iter()
                .map(|st| Ok(evalkit::rmse(&ds.field(st.time_index, Channel::Aod550)?, &st.aod550)?))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..max_lead)
        .map(|l| per_start.iter().map(|v| v[l]).sum::<f64>() / per_start.len() as f64)
        .collect())
}

/// Supervised pairs `t → t + 1` for `t` in a dataset range.
pub struct PrednetSamples<'a> {
    ds: &'a Dataset,
    norm: &'a NormStats,
    start: usize,
    len: usize,
}

impl<'a> PrednetSamples<'a> {
    /// Pairs whose input and label both lie in `segment`.
    pub fn new(ds: &'a Dataset, norm: &'a NormStats, segment: Range<usize>) -> Result<Self> {
        check_segment(ds, &segment, 2)?;
        Ok(Self {
            ds,
            norm,
            start: segment.start,
            len: segment.len() - 1,
        })
    }
}

fn normalize_into(out: &mut [f32], values: &[f32], stats: &ChannelStats) {
    for (o, &v) in out.iter_mut().zip(values) {
        *o = stats.normalize(v as f64);
    }
}

impl SampleSource for PrednetSamples<'_> {
    fn len(&self) -> usize {
        self.len
    }

    fn dims(&self) -> (usize, usize) {
        self.ds.dims()
    }

    fn in_channels(&self) -> usize {
        PREDNET_INPUTS.len()
    }

    fn out_channels(&self) -> usize {
        PREDNET_OUTPUTS.len()
    }

    fn fill(&self, idx: usize, input: &mut [f32], label: &mut [f32]) -> Result<()> {
        let t = self.start + idx;
        let (h, w) = self.ds.dims();
        let hw = h * w;
        for (c, (&ch, stats)) in PREDNET_INPUTS.iter().zip(&self.norm.inputs).enumerate() {
            let src_t = if ch == Channel::Aod550 { t } else { t + 1 };
            normalize_into(&mut input[c * hw..(c + 1) * hw], self.ds.channel(src_t, ch)?, stats);
        }
        for (c, (&ch, stats)) in PREDNET_OUTPUTS.iter().zip(&self.norm.outputs).enumerate() {
            normalize_into(&mut label[c * hw..(c + 1) * hw], self.ds.channel(t + 1, ch)?, stats);
        }
        Ok(())
    }
}

/// Trains PredNet on the pairs inside `segment` (normally `[t0, t1)`).
/// The trailing `validation_fraction` of pairs is held out.
pub fn train_prednet(
    ds: &Dataset,
    segment: Range<usize>,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(PredNet, TrainLog)> {
    spec.validate()?;
    if spec.in_channels != PREDNET_INPUTS.len() || spec.out_channels != PREDNET_OUTPUTS.len() {
        return Err(NetError::ChannelMismatch {
            expected: PREDNET_INPUTS.len(),
            actual: spec.in_channels,
        }
        .into());
    }
    let norm = prednet_norm_stats(ds, segment.clone())?;
    let samples = PrednetSamples::new(ds, &norm, segment)?;
    let split = Split::trailing(samples.len(), cfg.validation_fraction);
    let (weights, log) = train_model(spec, &samples, &split, cfg)?;
    let model = PredNet::new(spec.clone(), weights, norm)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns its AOD input unchanged and zero PM2.5.
    struct Persistence;

    impl ForecastModel for Persistence {
        fn predict(&self, aod: &GridField, _: &AuxiliaryFrame) -> Result<(GridField, GridField)> {
            let (h, w) = aod.dims();
            Ok((GridField::zeros(h, w, Units::Concentration), aod.clone()))
        }
    }

    fn field(h: usize, w: usize, f: impl Fn(usize) -> f64) -> GridField {
        GridField::new(h, w, (0..h * w).map(f).collect(), Units::Dimensionless).unwrap()
    }

    #[test]
    fn persistence_is_a_fixed_point() {
        let aod = field(3, 5, |i| 0.1 * i as f64);
        let aux: Vec<_> = (1..=6).map(|t| AuxiliaryFrame::quiescent(t, 3, 5, 60.0)).collect();
        let traj = forecast_rollout(&Persistence, &aod, &aux, 6).unwrap();
        assert_eq!(traj.len(), 6);
        for (j, s) in traj.iter().enumerate() {
            assert_eq!(s.time_index, j + 1);
            assert_eq!(s.aod550, aod);
        }
    }

    #[test]
    fn rollout_needs_enough_aux() {
        let aod = field(2, 2, |_| 0.0);
        let aux = vec![AuxiliaryFrame::quiescent(1, 2, 2, 60.0)];
        assert!(matches!(
            forecast_rollout(&Persistence, &aod, &aux, 2),
            Err(ForecastError::InsufficientAux { needed: 2, available: 1 })
        ));
    }

    #[test]
    fn error_is_truth_minus_forecast() {
        let snap = |v: f64| StateSnapshot {
            time_index: 4,
            pm25: GridField::filled(2, 3, v, Units::Concentration),
            aod550: GridField::filled(2, 3, v, Units::Dimensionless),
        };
        let (pm, aod) = forecast_error(&snap(3.0), &snap(1.0)).unwrap();
        assert!(pm.values.values().iter().chain(aod.values.values()).all(|&e| e == 2.0));
        let (pm, aod) = forecast_error(&snap(3.0), &snap(3.0)).unwrap();
        assert!(pm.values.values().iter().chain(aod.values.values()).all(|&e| e == 0.0));
        let bad = StateSnapshot {
            pm25: GridField::zeros(3, 2, Units::Concentration),
            ..snap(1.0)
        };
        assert!(matches!(forecast_error(&snap(1.0), &bad), Err(ForecastError::Shape { .. })));
    }

    #[test]
    fn channel_stats_roundtrip() {
        let data = [1.0f32, 2.0, 3.0, 4.0];
        let s = ChannelStats::from_slices([&data[..2], &data[2..]].into_iter());
        assert_eq!(s.mean, 2.5);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.denormalize(s.normalize(4.0)), 4.0);
        let flat = ChannelStats::from_slices(std::iter::once(&[3.0f32; 5][..]));
        assert_eq!((flat.mean, flat.std), (3.0, 1.0));
    }

    #[test]
    fn start_times_in_range() {
        let s = sample_start_times(100, 200, 40, 50, 1);
        assert_eq!(s.len(), 50);
        assert!(s.iter().all(|&t| (100..160).contains(&t)));
        assert_eq!(s, sample_start_times(100, 200, 40, 50, 1));
        assert!(sample_start_times(100, 120, 40, 5, 1).is_empty());
    }
}
