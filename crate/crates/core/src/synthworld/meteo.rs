//! Analytic meteorology with a little stochastic weather on top.

use std::f64::consts::{PI, TAU};

use super::noise::SmoothNoise;
use super::{stream_seed, AuxiliaryFrame, EmissionSchedule, GridField, Result, Units, WorldConfig};

const GRAVITY: f64 = 9.80665;

/// Sequential generator of [`AuxiliaryFrame`]s. Frames must be requested
/// for consecutive steps since the weather noise is stateful.
#[derive(Debug, Clone)]
pub struct Meteorology {
    cfg: WorldConfig,
    elevation_km: Vec<f64>,
    geopotential: GridField,
    eddy_phase: Vec<f64>,
    humidity_noise: SmoothNoise,
    temperature_noise: SmoothNoise,
    emissions: EmissionSchedule,
}

impl Meteorology {
    pub fn new(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = cfg.dims();
        let elevation_km = topography(h, w);
        let geopotential = GridField::new(
            h,
            w,
            elevation_km.iter().map(|z| z * 1000.0 * GRAVITY).collect(),
            Units::Geopotential,
        )?;
        let eddy_phase = (0..cfg.wind.eddy_wavenumbers.len())
            .map(|m| (stream_seed(cfg.seed, 40 + m as u64) % 6283) as f64 / 1000.0)
            .collect();
        let per_day = 24.0 / cfg.dt_hours;
        Ok(Self {
            cfg: cfg.clone(),
            elevation_km,
            geopotential,
            eddy_phase,
            humidity_noise: SmoothNoise::new(stream_seed(cfg.seed, 1), h, w, 10, 2.0 * per_day),
            temperature_noise: SmoothNoise::new(stream_seed(cfg.seed, 2), h, w, 6, 3.0 * per_day),
            emissions: EmissionSchedule::new(cfg)?,
        })
    }

    pub fn geopotential(&self) -> &GridField {
        &self.geopotential
    }

    /// Frame for calendar step `step` (0 = 1 January, 00 UTC of year 0).
    pub fn frame(&mut self, step: i64) -> Result<AuxiliaryFrame> {
        let cfg = &self.cfg;
        let (h, w) = cfg.dims();
        let days = step as f64 * cfg.dt_hours / 24.0;
        let year_frac = self.emissions.calendar().year_fraction(step);
        let utc_hour = (step.rem_euclid((24.0 / cfg.dt_hours) as i64) as f64) * cfg.dt_hours;

        let hum_noise = self.humidity_noise.next_field();
        let t_noise = self.temperature_noise.next_field();
        let ratio = w as f64 / h as f64;

        let mut u = vec![0.0; h * w];
        let mut v = vec![0.0; h * w];
        let mut t2m = vec![0.0; h * w];
        let mut hum = vec![0.0; h * w];
        for i in 0..h {
            let y = (i as f64 + 0.5) / h as f64;
            let lat = 2.0 * y - 1.0;
            let jet = cfg.wind.zonal_amplitude * (TAU * (y - 0.5)).cos();
            for j in 0..w {
                let x = (j as f64 + 0.5) / w as f64;
                let idx = i * w + j;
                let mut uu = jet;
                let mut vv = 0.0;
                for (m_idx, &m) in cfg.wind.eddy_wavenumbers.iter().enumerate() {
                    let m = m as f64;
                    let ph = self.eddy_phase[m_idx];
                    let amp = cfg.wind.eddy_amplitude
                        * (0.75 + 0.25 * (TAU * days / (2.7 * cfg.wind.rotation_period_days) + ph).sin());
                    let theta = TAU * m * (x - days / cfg.wind.rotation_period_days) + ph;
                    vv += amp * (PI * y).sin() * theta.cos();
                    uu -= amp * ratio / (2.0 * m) * (PI * y).cos() * theta.sin();
                }
                u[idx] = uu;
                v[idx] = vv;

                let local_hour = (utc_hour + 24.0 * x).rem_euclid(24.0);
                t2m[idx] = 300.0 - 35.0 * lat * lat
                    + 9.0 * lat * (TAU * (year_frac - 0.29)).sin()
                    + 4.0 * (TAU * (local_hour - 15.0) / 24.0).cos()
                    - 6.5 * self.elevation_km[idx]
                    + 1.5 * t_noise[idx];

                let wave = (TAU * (x + 0.5 * y) - TAU * days / 6.0).sin();
                let seasonal = 6.0 * (TAU * (year_frac - 0.45)).sin() * (1.0 - lat.abs());
                hum[idx] = (62.0 + 14.0 * wave + seasonal + 12.0 * hum_noise[idx] - 8.0 * self.elevation_km[idx])
                    .clamp(5.0, 100.0);
            }
        }
        let (bc, oc) = self.emissions.fields(step)?;
        let time_index = step.max(0) as usize;
        Ok(AuxiliaryFrame {
            time_index,
            t2m: GridField::new(h, w, t2m, Units::Kelvin)?,
            u10: GridField::new(h, w, u, Units::MetersPerSecond)?,
            v10: GridField::new(h, w, v, Units::MetersPerSecond)?,
            humidity: GridField::new(h, w, hum, Units::Percent)?,
            geopotential: self.geopotential.clone(),
            bc_emis: GridField::new(h, w, bc, Units::EmissionRate)?,
            oc_emis: GridField::new(h, w, oc, Units::EmissionRate)?,
        })
    }
}

/// Smooth static terrain (km): two ridges and a plateau.
fn topography(h: usize, w: usize) -> Vec<f64> {
    let mut z = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let bump = |cx: f64, cy: f64, sx: f64, sy: f64, top: f64| {
                let mut dx = (x - cx).abs();
                dx = dx.min(1.0 - dx);
                top * (-(dx * dx) / (2.0 * sx * sx) - (y - cy) * (y - cy) / (2.0 * sy * sy)).exp()
            };
            z.push(
                bump(0.72, 0.62, 0.05, 0.08, 3.5) + bump(0.2, 0.55, 0.02, 0.2, 2.2) + bump(0.45, 0.4, 0.08, 0.06, 1.2),
            );
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::courant_number;

    #[test]
    fn winds_respect_the_configured_bound() {
        let cfg = WorldConfig::default();
        let mut met = Meteorology::new(&cfg).unwrap();
        let bound = cfg.max_wind_bound();
        for step in (0..400).map(|s| s * 7) {
            let f = met.frame(step).unwrap();
            let peak = f.u10.values().iter().chain(f.v10.values()).fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(peak <= bound + 1e-9);
            assert!(courant_number(&f, &cfg) <= 0.9);
        }
    }

    #[test]
    fn humidity_and_geopotential_ranges() {
        let cfg = WorldConfig::default();
        let mut met = Meteorology::new(&cfg).unwrap();
        let a = met.frame(0).unwrap();
        let b = met.frame(1).unwrap();
        assert_eq!(a.geopotential, b.geopotential);
        assert!(a.humidity.min() >= 5.0 && a.humidity.max() <= 100.0);
        assert!(a.t2m.min() > 230.0 && a.t2m.max() < 320.0);
        assert!(a.bc_emis.min() > 0.0);
    }
}
