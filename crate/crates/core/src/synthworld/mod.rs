//! Synthetic truth world.
//!
//! A 2-D advection–diffusion tracer (PM2.5) driven by analytic winds and
//! time-profiled emissions, a humidity-modulated AOD550 diagnostic, and
//! swath-masked noisy AOD observations. [`generate_dataset`] runs the whole
//! timeline and returns an in-memory [`Dataset`].
//!
//! Rows index latitude from south (row 0) to north; columns index
//! longitude eastward and wrap around.

mod coupling;
mod dataset;
mod dynamics;
mod emissions;
mod meteo;
mod noise;
mod observe;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use coupling::{aod_from_pm, CouplingNoise};
pub use dataset::{generate_dataset, world_hash, Channel, Dataset, DatasetInfo};
pub use dynamics::{courant_number, step_dynamics, step_pm};
pub use emissions::{disaggregate_emissions, Calendar, EmissionSchedule, EmissionSource};
pub use meteo::Meteorology;
pub use noise::SmoothNoise;
pub use observe::{simulate_observations, OBS_SENTINEL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("invalid time grid: {0}")]
    InvalidTimeGrid(String),
    #[error("CFL violation: Courant number {courant:.4} exceeds 1")]
    Cfl { courant: f64 },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("emission profile weights must be non-negative and not all zero")]
    BadProfile,
    #[error("profile has {weights} weights for {slots} slots")]
    SlotMismatch { weights: usize, slots: usize },
    #[error("PM2.5 spatial variance {variance:.3e} below floor {floor:.3e} after burn-in")]
    Degenerate { variance: f64, floor: f64 },
    #[error("time index {0} outside dataset")]
    OutOfRange(usize),
}

pub type Result<T> = std::result::Result<T, WorldError>;

/// Independent RNG seed for sub-stream `stream` of a world seed.
pub(crate) fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Physical units of a [`GridField`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    /// µg/m³
    Concentration,
    Dimensionless,
    Kelvin,
    MetersPerSecond,
    Percent,
    /// m²/s²
    Geopotential,
    /// µg/m³ per hour
    EmissionRate,
}

impl Units {
    pub fn as_str(self) -> &'static str {
        match self {
            Units::Concentration => "ug/m3",
            Units::Dimensionless => "1",
            Units::Kelvin => "K",
            Units::MetersPerSecond => "m/s",
            Units::Percent => "%",
            Units::Geopotential => "m2/s2",
            Units::EmissionRate => "ug/m3/h",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Units::Concentration,
            Units::Dimensionless,
            Units::Kelvin,
            Units::MetersPerSecond,
            Units::Percent,
            Units::Geopotential,
            Units::EmissionRate,
        ]
        .into_iter()
        .find(|u| u.as_str() == s)
    }
}

/// One scalar field on the H×W grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub units: Units,
}

impl GridField {
    pub fn new(height: usize, width: usize, values: Vec<f64>, units: Units) -> Result<Self> {
        if values.len() != height * width {
            return Err(WorldError::Shape {
                expected: (height, width),
                actual: (values.len(), 1),
            });
        }
        Ok(Self {
            height,
            width,
            values,
            units,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, units: Units) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
            units,
        }
    }

    pub fn zeros(height: usize, width: usize, units: Units) -> Self {
        Self::filled(height, width, 0.0, units)
    }

    pub fn from_f32(height: usize, width: usize, values: &[f32], units: Units) -> Result<Self> {
        Self::new(height, width, values.iter().map(|&v| v as f64).collect(), units)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len().max(1) as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn check_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() == dims {
            Ok(())
        } else {
            Err(WorldError::Shape {
                expected: dims,
                actual: self.dims(),
            })
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

/// Model state at one time: PM2.5 and AOD550.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub time_index: usize,
    pub pm25: GridField,
    pub aod550: GridField,
}

/// Exogenous inputs at one time: five meteorological and two emission channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryFrame {
    pub time_index: usize,
    pub t2m: GridField,
    pub u10: GridField,
    pub v10: GridField,
    pub humidity: GridField,
    pub geopotential: GridField,
    pub bc_emis: GridField,
    pub oc_emis: GridField,
}

impl AuxiliaryFrame {
    pub const CHANNELS: usize = 7;
    pub const NAMES: [&'static str; 7] = ["t2m", "u10", "v10", "humidity", "geopotential", "bc_emis", "oc_emis"];

    /// Channels in the fixed order of [`Self::NAMES`].
    pub fn channels(&self) -> [&GridField; 7] {
        [
            &self.t2m,
            &self.u10,
            &self.v10,
            &self.humidity,
            &self.geopotential,
            &self.bc_emis,
            &self.oc_emis,
        ]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.t2m.dims()
    }

    /// Calm, clean frame: zero wind and emissions, neutral humidity.
    pub fn quiescent(time_index: usize, height: usize, width: usize, humidity: f64) -> Self {
        Self {
            time_index,
            t2m: GridField::filled(height, width, 288.0, Units::Kelvin),
            u10: GridField::zeros(height, width, Units::MetersPerSecond),
            v10: GridField::zeros(height, width, Units::MetersPerSecond),
            humidity: GridField::filled(height, width, humidity, Units::Percent),
            geopotential: GridField::zeros(height, width, Units::Geopotential),
            bc_emis: GridField::zeros(height, width, Units::EmissionRate),
            oc_emis: GridField::zeros(height, width, Units::EmissionRate),
        }
    }
}

/// Masked, noisy AOD550 observations. Unobserved cells hold [`OBS_SENTINEL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub time_index: usize,
    pub values: GridField,
    pub mask: Vec<bool>,
}

impl ObservationSet {
    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.observed_count() == 0
    }

    pub fn fraction(&self) -> f64 {
        self.observed_count() as f64 / self.mask.len().max(1) as f64
    }

    /// `(flat index, value)` of observed cells only.
    pub fn observed(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i, self.values.values()[i]))
    }
}

/// Dataset timeline: training `[t0, t1)`, DA training `[t1, t2)`,
/// operational `[t2, t_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeGrid {
    pub dt_hours: u32,
    pub t0: usize,
    pub t1: usize,
    pub t2: usize,
    pub t_end: usize,
    /// DA interval in steps.
    pub k: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        // Two 365-day years, then two 120-day segments plus a day of slack.
        Self {
            dt_hours: 3,
            t0: 0,
            t1: 5840,
            t2: 6800,
            t_end: 7768,
            k: 4,
        }
    }
}

impl TimeGrid {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(WorldError::InvalidTimeGrid(m.to_string()));
        if !(self.t0 < self.t1 && self.t1 < self.t2 && self.t2 < self.t_end) {
            return bad("require t0 < t1 < t2 < t_end");
        }
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if self.dt_hours == 0 || 24 % self.dt_hours != 0 {
            return bad("dt_hours must divide 24");
        }
        Ok(())
    }

    pub fn steps_per_day(&self) -> usize {
        (24 / self.dt_hours) as usize
    }

    /// DA times (multiples of k) in `[from, to)`.
    pub fn da_times(&self, from: usize, to: usize) -> Vec<usize> {
        let first = from.div_ceil(self.k) * self.k;
        (first..to).step_by(self.k).collect()
    }
}

/// Wind field layout: a zonal jet plus travelling non-divergent eddies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindConfig {
    /// Peak zonal wind (m/s), eastward at mid-domain.
    pub zonal_amplitude: f64,
    /// Peak meridional speed of each eddy mode (m/s).
    pub eddy_amplitude: f64,
    pub eddy_wavenumbers: Vec<u32>,
    /// Time for an eddy pattern to travel once around the domain.
    pub rotation_period_days: f64,
}

impl Default for WindConfig {
    fn default() -> Self {
        Self {
            zonal_amplitude: 8.0,
            eddy_amplitude: 6.0,
            eddy_wavenumbers: vec![2, 3],
            rotation_period_days: 9.0,
        }
    }
}

/// Generating process of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    /// Cell size (km), same in both directions.
    pub dx_km: f64,
    pub dt_hours: f64,
    /// Periodic north/south boundaries instead of reflective ones.
    pub periodic_rows: bool,
    pub wind: WindConfig,
    /// Eddy diffusivity (m²/s).
    pub diffusion: f64,
    /// Linear deposition rate (1/h).
    pub deposition_rate: f64,
    pub sources: Vec<EmissionSource>,
    /// Uniform BC and OC emission floor (µg/m³/h).
    pub background_bc: f64,
    pub background_oc: f64,
    pub bc_weight: f64,
    pub oc_weight: f64,
    /// Relative emission weight per 3-hourly slot of the day (UTC, shifted by longitude).
    pub diurnal_profile: Vec<f64>,
    /// Relative emission weight per weekday.
    pub weekly_profile: Vec<f64>,
    pub aod_alpha: f64,
    pub humidity_weight: f64,
    pub humidity_reference: f64,
    pub humidity_scale: f64,
    pub coupling_noise: f64,
    /// E-folding time of the coupling error: a slowly varying background
    /// that only the initial condition and observations reveal.
    pub coupling_noise_hours: f64,
    pub seed: u64,
    pub swath_fraction: f64,
    /// Fraction of the domain the swath band advances per step.
    pub swath_speed: f64,
    pub cloud_dropout: f64,
    pub obs_noise: f64,
    pub burn_in_steps: usize,
    /// Minimum spatial PM2.5 variance after burn-in.
    pub variance_floor: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 64,
            dx_km: 625.0,
            dt_hours: 3.0,
            periodic_rows: false,
            wind: WindConfig::default(),
            diffusion: 1.5e6,
            deposition_rate: 1.0 / 168.0,
            sources: EmissionSource::default_set(),
            background_bc: 0.004,
            background_oc: 0.01,
            bc_weight: 1.0,
            oc_weight: 1.4,
            diurnal_profile: vec![0.6, 0.5, 0.8, 1.3, 1.4, 1.2, 1.3, 0.9],
            weekly_profile: vec![1.05, 1.05, 1.05, 1.05, 1.05, 0.9, 0.85],
            aod_alpha: 0.012,
            humidity_weight: 0.9,
            humidity_reference: 60.0,
            humidity_scale: 20.0,
            coupling_noise: 0.06,
            coupling_noise_hours: 720.0,
            seed: 20190101,
            swath_fraction: 0.35,
            swath_speed: 0.0875,
            cloud_dropout: 0.2,
            obs_noise: 0.02,
            burn_in_steps: 480,
            variance_floor: 1.0,
        }
    }
}

impl WorldConfig {
    /// Small periodic, source-free world for transport tests.
    pub fn closed_box(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            periodic_rows: true,
            sources: Vec::new(),
            background_bc: 0.0,
            background_oc: 0.0,
            deposition_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dt_seconds(&self) -> f64 {
        self.dt_hours * 3600.0
    }

    pub fn dx_m(&self) -> f64 {
        self.dx_km * 1000.0
    }

    /// Upper bound on any cell-centred wind component (m/s).
    pub fn max_wind_bound(&self) -> f64 {
        let w = &self.wind;
        let ratio = self.width as f64 / self.height as f64;
        let u_eddy: f64 = w
            .eddy_wavenumbers
            .iter()
            .map(|&m| w.eddy_amplitude * ratio / (2.0 * m as f64))
            .sum();
        let v_eddy = w.eddy_amplitude * w.eddy_wavenumbers.len() as f64;
        (w.zonal_amplitude.abs() + u_eddy).max(v_eddy)
    }

    pub fn diffusion_number(&self) -> f64 {
        self.diffusion * self.dt_seconds() / (self.dx_m() * self.dx_m())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WorldError::InvalidConfig(m));
        if self.height < 2 || self.width < 2 {
            return bad(format!("grid {}x{} too small", self.height, self.width));
        }
        if !(self.dx_km > 0.0 && self.dt_hours > 0.0) {
            return bad("dx_km and dt_hours must be positive".into());
        }
        let courant = self.max_wind_bound() * self.dt_seconds() / self.dx_m();
        if courant > 0.9 {
            return bad(format!("CFL bound {courant:.3} exceeds 0.9"));
        }
        if self.diffusion < 0.0 || self.diffusion_number() > 0.125 {
            return bad(format!("diffusion number {:.3} outside [0, 0.125]", self.diffusion_number()));
        }
        if !(0.0..1.0).contains(&(self.deposition_rate * self.dt_hours)) {
            return bad("deposition_rate * dt_hours must lie in [0, 1)".into());
        }
        if self.wind.eddy_wavenumbers.contains(&0) || self.wind.rotation_period_days <= 0.0 {
            return bad("eddy wavenumbers and rotation period must be positive".into());
        }
        let steps_per_day = 24.0 / self.dt_hours;
        if self.diurnal_profile.len() as f64 != steps_per_day || self.weekly_profile.len() != 7 {
            return bad("diurnal profile needs one weight per step of the day, weekly profile seven".into());
        }
        for p in [&self.diurnal_profile, &self.weekly_profile] {
            if p.iter().any(|&v| v < 0.0) || p.iter().all(|&v| v == 0.0) {
                return bad("profiles must be non-negative and not all zero".into());
            }
        }
        for (i, s) in self.sources.iter().enumerate() {
            if s.monthly_totals.len() != 12 || s.monthly_totals.iter().any(|&v| v < 0.0) {
                return bad(format!("source {i}: need 12 non-negative monthly totals"));
            }
            if !(0.0..=1.0).contains(&s.bc_fraction) || s.radius_cells <= 0.0 {
                return bad(format!("source {i}: bc_fraction in [0,1] and positive radius required"));
            }
        }
        for (name, v) in [
            ("swath_fraction", self.swath_fraction),
            ("cloud_dropout", self.cloud_dropout),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.obs_noise < 0.0 || self.coupling_noise < 0.0 || self.aod_alpha < 0.0 {
            return bad("noise levels and aod_alpha must be non-negative".into());
        }
        if self.humidity_scale <= 0.0 || self.coupling_noise_hours <= 0.0 {
            return bad("humidity_scale and coupling_noise_hours must be positive".into());
        }
        Ok(())
    }
}
