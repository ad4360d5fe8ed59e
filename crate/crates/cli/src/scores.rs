//! Comparison of an operational run against the forecast-only baseline.

use serde::{Deserialize, Serialize};

use ddnet_core::evalkit::{
    cap_profile, dense_thresholds, mean, regional_eval, win_rate, CapCurve, CapDirection, MetricSeries, RegionRow,
    RegionSet,
};
use ddnet_core::synthworld::{Channel, Dataset, StateSnapshot};

use crate::CliError;

/// Headline numbers of one operational/baseline pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadlineScores {
    pub aod_rmse_operational: f64,
    pub aod_rmse_baseline: f64,
    /// Operational over baseline mean AOD RMSE.
    pub aod_ratio: f64,
    pub pm25_rmse_operational: f64,
    pub pm25_rmse_baseline: f64,
    /// Fraction of steps where the operational AOD RMSE is strictly lower.
    pub aod_win_rate: f64,
    pub pm25_win_rate: f64,
    pub operational_final_month_max: f64,
    pub operational_first_month_median: f64,
    pub baseline_first_quarter_mean: f64,
    pub baseline_final_quarter_mean: f64,
}

impl HeadlineScores {
    /// Operational AOD error bounded: final-month max within twice the
    /// first-month median.
    pub fn operational_bounded(&self) -> bool {
        self.operational_final_month_max <= 2.0 * self.operational_first_month_median
    }

    pub fn baseline_degrades(&self) -> bool {
        self.baseline_final_quarter_mean > self.baseline_first_quarter_mean
    }

    /// All clauses of the stability comparison.
    pub fn stable(&self) -> bool {
        self.aod_rmse_operational <= 0.8 * self.aod_rmse_baseline
            && self.pm25_rmse_operational < self.pm25_rmse_baseline
            && self.operational_bounded()
            && self.baseline_degrades()
    }

    pub fn summary_lines(&self) -> Vec<(String, String)> {
        let v = toml::Value::try_from(self).expect("scores serialise");
        let mut out: Vec<(String, String)> = v
            .as_table()
            .expect("struct is a table")
            .iter()
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect();
        out.push(("operational_bounded".into(), self.operational_bounded().to_string()));
        out.push(("baseline_degrades".into(), self.baseline_degrades().to_string()));
        out.push(("stable".into(), self.stable().to_string()));
        out
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Scores a run pair. `month` is the number of steps in a month.
pub fn headline(
    op_aod: &MetricSeries,
    op_pm: &MetricSeries,
    base_aod: &MetricSeries,
    base_pm: &MetricSeries,
    month: usize,
) -> Result<HeadlineScores, CliError> {
    let oa = op_aod.rmse_values();
    let ba = base_aod.rmse_values();
    if oa.len() < month || ba.len() < 4 || month == 0 {
        return Err(CliError::Validation(format!(
            "runs of {} and {} steps are too short to score against a {month}-step month",
            oa.len(),
            ba.len()
        )));
    }
    let q = ba.len() / 4;
    let empty = || CliError::Validation("runs share no time steps".into());
    Ok(HeadlineScores {
        aod_rmse_operational: op_aod.mean_rmse().ok_or_else(empty)?,
        aod_rmse_baseline: base_aod.mean_rmse().ok_or_else(empty)?,
        aod_ratio: op_aod.mean_rmse().ok_or_else(empty)? / base_aod.mean_rmse().ok_or_else(empty)?,
        pm25_rmse_operational: op_pm.mean_rmse().ok_or_else(empty)?,
        pm25_rmse_baseline: base_pm.mean_rmse().ok_or_else(empty)?,
        aod_win_rate: win_rate(op_aod, base_aod).ok_or_else(empty)?,
        pm25_win_rate: win_rate(op_pm, base_pm).ok_or_else(empty)?,
        operational_final_month_max: oa[oa.len() - month..].iter().copied().fold(f64::MIN, f64::max),
        operational_first_month_median: median(&oa[..month]),
        baseline_first_quarter_mean: mean(&ba[..q]).ok_or_else(empty)?,
        baseline_final_quarter_mean: mean(&ba[ba.len() - q..]).ok_or_else(empty)?,
    })
}

/// RMSE (below) and R (above) profiles on a 200-point threshold grid.
pub fn cap_curves(series: &MetricSeries) -> Result<Vec<CapCurve>, CliError> {
    let mut out = Vec::new();
    for (metric, values, dir) in [
        ("rmse", series.rmse_values(), CapDirection::Below),
        ("r", series.r_values(), CapDirection::Above),
    ] {
        if values.is_empty() {
            continue;
        }
        let thresholds = dense_thresholds(&values, 200);
        out.push(CapCurve {
            experiment: series.experiment.clone(),
            variable: series.variable.clone(),
            metric: metric.into(),
            percents: cap_profile(&values, &thresholds, dir)?,
            thresholds,
        });
    }
    Ok(out)
}

/// Per-region RMSE and R averaged over a trajectory, one row per region
/// and variable, region names prefixed with the experiment.
pub fn region_rows(
    experiment: &str,
    ds: &Dataset,
    trajectory: &[StateSnapshot],
    regions: &RegionSet,
) -> Result<Vec<RegionRow>, CliError> {
    let mut rows = Vec::new();
    for (var, ch) in [("aod550", Channel::Aod550), ("pm25", Channel::Pm25)] {
        let mut rmse = vec![Vec::new(); regions.regions.len()];
        let mut r = vec![Vec::new(); regions.regions.len()];
        for s in trajectory {
            let pred = if ch == Channel::Aod550 { &s.aod550 } else { &s.pm25 };
            let truth = ds.field(s.time_index, ch)?;
            for (i, m) in regional_eval(&truth, pred, regions)?.into_iter().enumerate() {
                rmse[i].push(m.rmse);
                r[i].extend(m.r);
            }
        }
        for (i, reg) in regions.regions.iter().enumerate() {
            if let Some(mr) = mean(&rmse[i]) {
                rows.push(RegionRow {
                    region: format!("{experiment}:{}", reg.name),
                    variable: var.into(),
                    rmse: mr,
                    r: mean(&r[i]),
                });
            }
        }
    }
    Ok(rows)
}
