//! Point-ish emission sources with monthly totals and sub-daily profiles.

use serde::{Deserialize, Serialize};

use super::{Result, WorldConfig, WorldError};

/// Splits `monthly_total` over `slots` in proportion to `profile_weights`.
pub fn disaggregate_emissions(monthly_total: f64, profile_weights: &[f64], slots: usize) -> Result<Vec<f64>> {
    if profile_weights.len() != slots {
        return Err(WorldError::SlotMismatch {
            weights: profile_weights.len(),
            slots,
        });
    }
    if profile_weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(WorldError::BadProfile);
    }
    let total: f64 = profile_weights.iter().sum();
    if total <= 0.0 {
        return Err(WorldError::BadProfile);
    }
    Ok(profile_weights.iter().map(|w| monthly_total * w / total).collect())
}

/// A Gaussian-footprint emitter. Position is fractional: `lat` from the
/// southern edge, `lon` from the western edge, both in `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionSource {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub radius_cells: f64,
    /// Cell-summed emission per calendar month, January first.
    pub monthly_totals: Vec<f64>,
    pub bc_fraction: f64,
}

impl EmissionSource {
    fn seasonal(name: &str, lat: f64, lon: f64, radius: f64, annual_mean: f64, peak_month: f64, swing: f64, bc: f64) -> Self {
        let monthly_totals = (0..12)
            .map(|m| {
                let phase = std::f64::consts::TAU * (m as f64 - peak_month) / 12.0;
                annual_mean * (1.0 + swing * phase.cos())
            })
            .collect();
        Self {
            name: name.to_string(),
            lat,
            lon,
            radius_cells: radius,
            monthly_totals,
            bc_fraction: bc,
        }
    }

    /// Industrial, urban and biomass-burning regions of varied size and season.
    pub fn default_set() -> Vec<Self> {
        vec![
            Self::seasonal("east-industrial", 0.68, 0.78, 2.5, 20000.0, 0.0, 0.2, 0.3),
            Self::seasonal("south-urban", 0.60, 0.66, 1.8, 12000.0, 1.0, 0.15, 0.35),
            Self::seasonal("west-industrial", 0.72, 0.28, 2.2, 11000.0, 11.0, 0.2, 0.3),
            Self::seasonal("continental", 0.64, 0.06, 2.0, 7000.0, 0.5, 0.15, 0.3),
            Self::seasonal("savanna-fires", 0.38, 0.33, 3.5, 14000.0, 7.5, 0.35, 0.12),
            Self::seasonal("forest-fires", 0.30, 0.88, 3.0, 9000.0, 8.5, 0.35, 0.1),
            Self::seasonal("desert-edge", 0.52, 0.45, 3.0, 6000.0, 5.0, 0.2, 0.15),
            Self::seasonal("coastal-city", 0.24, 0.55, 1.5, 5000.0, 6.0, 0.1, 0.4),
        ]
    }

    /// Normalised footprint on an `h×w` grid, periodic in longitude.
    fn footprint(&self, h: usize, w: usize) -> Vec<f64> {
        let ci = self.lat * h as f64 - 0.5;
        let cj = self.lon * w as f64 - 0.5;
        let s2 = 2.0 * self.radius_cells * self.radius_cells;
        let mut fp = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let dy = i as f64 - ci;
                let mut dx = (j as f64 - cj).rem_euclid(w as f64);
                if dx > w as f64 / 2.0 {
                    dx -= w as f64;
                }
                fp.push((-(dx * dx + dy * dy) / s2).exp());
            }
        }
        let total: f64 = fp.iter().sum();
        fp.iter_mut().for_each(|v| *v /= total);
        fp
    }
}

const MONTH_DAYS: [usize; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

/// Position of a step in a 365-day calendar starting 1 January, 00 UTC, on
/// a Monday (weekday 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Calendar {
    pub steps_per_day: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalendarSlot {
    pub year: i64,
    pub month: usize,
    pub day_of_year: usize,
    /// Slot within the month.
    pub slot: usize,
    pub slots_in_month: usize,
    pub slot_of_day: usize,
    /// Absolute step of the first slot of the month.
    pub month_start: i64,
}

impl Calendar {
    pub fn locate(&self, step: i64) -> CalendarSlot {
        let spd = self.steps_per_day as i64;
        let per_year = 365 * spd;
        let year = step.div_euclid(per_year);
        let in_year = step.rem_euclid(per_year) as usize;
        let day_of_year = in_year / self.steps_per_day;
        let mut first_day = 0;
        let mut month = 0;
        while first_day + MONTH_DAYS[month] <= day_of_year {
            first_day += MONTH_DAYS[month];
            month += 1;
        }
        let slot = in_year - first_day * self.steps_per_day;
        CalendarSlot {
            year,
            month,
            day_of_year,
            slot,
            slots_in_month: MONTH_DAYS[month] * self.steps_per_day,
            slot_of_day: in_year % self.steps_per_day,
            month_start: year * per_year + (first_day * self.steps_per_day) as i64,
        }
    }

    pub fn weekday(&self, step: i64) -> usize {
        step.div_euclid(self.steps_per_day as i64).rem_euclid(7) as usize
    }

    pub fn year_fraction(&self, step: i64) -> f64 {
        let per_year = (365 * self.steps_per_day) as f64;
        step.rem_euclid(per_year as i64) as f64 / per_year
    }
}

/// Produces per-step BC/OC emission-rate fields.
#[derive(Debug, Clone)]
pub struct EmissionSchedule {
    cfg: WorldConfig,
    calendar: Calendar,
    footprints: Vec<Vec<f64>>,
    /// Longitude offset of each source in steps of local time.
    local_shift: Vec<usize>,
    /// (year, month) and per-source per-slot amounts.
    cache: Option<((i64, usize), Vec<Vec<f64>>)>,
}

impl EmissionSchedule {
    pub fn new(cfg: &WorldConfig) -> Result<Self> {
        let spd = (24.0 / cfg.dt_hours).round() as usize;
        let footprints = cfg.sources.iter().map(|s| s.footprint(cfg.height, cfg.width)).collect();
        let local_shift = cfg
            .sources
            .iter()
            .map(|s| (s.lon * spd as f64).round() as usize % spd)
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            calendar: Calendar { steps_per_day: spd },
            footprints,
            local_shift,
            cache: None,
        })
    }

    pub fn calendar(&self) -> Calendar {
        self.calendar
    }

    fn month_amounts(&mut self, at: &CalendarSlot) -> Result<&Vec<Vec<f64>>> {
        let key = (at.year, at.month);
        if self.cache.as_ref().map(|(k, _)| *k) != Some(key) {
            let spd = self.calendar.steps_per_day;
            let mut per_source = Vec::with_capacity(self.cfg.sources.len());
            for (s, src) in self.cfg.sources.iter().enumerate() {
                let weights: Vec<f64> = (0..at.slots_in_month)
                    .map(|k| {
                        let step = at.month_start + k as i64;
                        let local = (k + self.local_shift[s]) % spd;
                        self.cfg.diurnal_profile[local] * self.cfg.weekly_profile[self.calendar.weekday(step)]
                    })
                    .collect();
                per_source.push(disaggregate_emissions(src.monthly_totals[at.month], &weights, at.slots_in_month)?);
            }
            self.cache = Some((key, per_source));
        }
        Ok(&self.cache.as_ref().expect("filled above").1)
    }

    /// `(bc, oc)` emission rates (µg/m³/h) for `step`.
    pub fn fields(&mut self, step: i64) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.cfg.height * self.cfg.width;
        let mut bc = vec![self.cfg.background_bc; n];
        let mut oc = vec![self.cfg.background_oc; n];
        let at = self.calendar.locate(step);
        let dt = self.cfg.dt_hours;
        let fracs: Vec<f64> = self.cfg.sources.iter().map(|s| s.bc_fraction).collect();
        let amounts: Vec<f64> = self.month_amounts(&at)?.iter().map(|a| a[at.slot]).collect();
        for ((fp, amount), frac) in self.footprints.iter().zip(amounts).zip(fracs) {
            let rate = amount / dt;
            for ((b, o), f) in bc.iter_mut().zip(oc.iter_mut()).zip(fp) {
                *b += frac * rate * f;
                *o += (1.0 - frac) * rate * f;
            }
        }
        Ok((bc, oc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disaggregation_examples() {
        let out = disaggregate_emissions(720.0, &vec![1.0; 720], 720).unwrap();
        assert!(out.iter().all(|&v| v == 1.0));
        assert_eq!(disaggregate_emissions(12.0, &[2.0, 1.0, 1.0], 3).unwrap(), vec![6.0, 3.0, 3.0]);
        assert_eq!(disaggregate_emissions(1.0, &[0.0, 0.0], 2), Err(WorldError::BadProfile));
        assert!(matches!(disaggregate_emissions(1.0, &[1.0], 2), Err(WorldError::SlotMismatch { .. })));
        assert_eq!(disaggregate_emissions(1.0, &[1.0, -1.0, 2.0], 3), Err(WorldError::BadProfile));
    }

    #[test]
    fn calendar_months_and_wraparound() {
        let cal = Calendar { steps_per_day: 8 };
        let jan = cal.locate(0);
        assert_eq!((jan.year, jan.month, jan.slot, jan.slots_in_month), (0, 0, 0, 248));
        let feb = cal.locate(31 * 8 + 3);
        assert_eq!((feb.month, feb.slot, feb.slots_in_month, feb.slot_of_day), (1, 3, 224, 3));
        let dec_prev = cal.locate(-1);
        assert_eq!((dec_prev.year, dec_prev.month, dec_prev.slot), (-1, 11, 31 * 8 - 1));
        assert_eq!(cal.weekday(0), 0);
        assert_eq!(cal.weekday(-1), 6);
    }

    #[test]
    fn schedule_conserves_monthly_totals() {
        let cfg = WorldConfig::default();
        let mut sched = EmissionSchedule::new(&cfg).unwrap();
        // March of year 1: sum of every step's emitted mass.
        let cal = sched.calendar();
        let start = cal.locate(365 * 8 + 59 * 8);
        assert_eq!(start.month, 2);
        let mut mass = 0.0;
        for k in 0..start.slots_in_month as i64 {
            let (bc, oc) = sched.fields(start.month_start + k).unwrap();
            mass += bc.iter().chain(&oc).sum::<f64>() * cfg.dt_hours;
        }
        let background = (cfg.background_bc + cfg.background_oc) * (cfg.height * cfg.width) as f64 * cfg.dt_hours * start.slots_in_month as f64;
        let expected: f64 = cfg.sources.iter().map(|s| s.monthly_totals[2]).sum::<f64>() + background;
        assert!(((mass - expected) / expected).abs() < 1e-10, "{mass} vs {expected}");
    }
}
