use super::noise::SmoothNoise;
use super::{stream_seed, GridField, Result, Units, WorldConfig};

/// Smooth AR(1) error field of the PM2.5 → AOD550 relation.
#[derive(Debug, Clone)]
pub struct CouplingNoise(SmoothNoise);

impl CouplingNoise {
    pub fn new(cfg: &WorldConfig, stream: u64) -> Self {
        let corr_steps = cfg.coupling_noise_hours / cfg.dt_hours;
        Self(SmoothNoise::new(
            stream_seed(cfg.seed, 100 + stream),
            cfg.height,
            cfg.width,
            12,
            corr_steps,
        ))
    }
}

/// `aod = α·pm·max(0, 1 + w_h·(hum − ref)/scale) + σ_c·noise`, clipped at 0.
/// Advances `noise` by one step.
pub fn aod_from_pm(
    pm25: &GridField,
    humidity: &GridField,
    cfg: &WorldConfig,
    noise: &mut CouplingNoise,
) -> Result<GridField> {
    humidity.check_dims(pm25.dims())?;
    let n = noise.0.next_field();
    let values = pm25
        .values()
        .iter()
        .zip(humidity.values())
        .zip(&n)
        .map(|((&p, &h), &z)| {
            let hn = (h - cfg.humidity_reference) / cfg.humidity_scale;
            let factor = (1.0 + cfg.humidity_weight * hn).max(0.0);
            (cfg.aod_alpha * p * factor + cfg.coupling_noise * z).max(0.0)
        })
        .collect();
    GridField::new(pm25.height(), pm25.width(), values, Units::Dimensionless)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_scaling_without_noise_or_humidity() {
        let cfg = WorldConfig {
            coupling_noise: 0.0,
            humidity_weight: 0.0,
            ..WorldConfig::closed_box(3, 4)
        };
        let mut noise = CouplingNoise::new(&cfg, 0);
        let pm = GridField::new(3, 4, (0..12).map(|i| i as f64 * 1.7).collect(), Units::Concentration).unwrap();
        let hum = GridField::filled(3, 4, 85.0, Units::Percent);
        let aod = aod_from_pm(&pm, &hum, &cfg, &mut noise).unwrap();
        for (a, p) in aod.values().iter().zip(pm.values()) {
            assert_eq!(*a, cfg.aod_alpha * p);
        }
        let zero = aod_from_pm(&GridField::zeros(3, 4, Units::Concentration), &hum, &cfg, &mut noise).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn humidity_raises_aod_and_noise_stays_nonnegative() {
        let cfg = WorldConfig {
            coupling_noise: 0.0,
            ..WorldConfig::closed_box(2, 2)
        };
        let mut noise = CouplingNoise::new(&cfg, 0);
        let pm = GridField::filled(2, 2, 10.0, Units::Concentration);
        let dry = aod_from_pm(&pm, &GridField::filled(2, 2, 30.0, Units::Percent), &cfg, &mut noise).unwrap();
        let wet = aod_from_pm(&pm, &GridField::filled(2, 2, 90.0, Units::Percent), &cfg, &mut noise).unwrap();
        assert!(wet.mean() > dry.mean());

        let noisy = WorldConfig {
            coupling_noise: 1.0,
            ..cfg
        };
        let mut noise = CouplingNoise::new(&noisy, 1);
        for _ in 0..20 {
            let a = aod_from_pm(&GridField::zeros(2, 2, Units::Concentration), &GridField::filled(2, 2, 60.0, Units::Percent), &noisy, &mut noise).unwrap();
            assert!(a.min() >= 0.0);
        }
    }
}
