use rand::Rng;
use rand_distr::StandardNormal;

use super::{GridField, ObservationSet, Units, WorldConfig};

/// Value stored in unobserved cells.
pub const OBS_SENTINEL: f64 = -999.0;

/// Band tilt: the swath crosses the domain diagonally.
const SWATH_TILT: f64 = 0.5;

/// Swath-masked, cloud-thinned, noisy AOD550 observations of `aod550`.
pub fn simulate_observations<R: Rng>(aod550: &GridField, time_index: usize, cfg: &WorldConfig, rng: &mut R) -> ObservationSet {
    let (h, w) = aod550.dims();
    let offset = (time_index as f64 * cfg.swath_speed).fract();
    let mut values = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let band = (x + SWATH_TILT * y - offset).rem_euclid(1.0);
            let clear = rng.random::<f64>() >= cfg.cloud_dropout;
            let z: f64 = rng.sample(StandardNormal);
            let observed = band < cfg.swath_fraction && clear;
            mask.push(observed);
            values.push(if observed {
                (aod550.get(i, j) + cfg.obs_noise * z).max(0.0)
            } else {
                OBS_SENTINEL
            });
        }
    }
    ObservationSet {
        time_index,
        values: GridField::new(h, w, values, Units::Dimensionless).expect("dims from input"),
        mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn truth() -> GridField {
        GridField::new(32, 64, (0..2048).map(|i| ((i * 7) % 13) as f64 * 0.05).collect(), Units::Dimensionless).unwrap()
    }

    #[test]
    fn perfect_observing_system() {
        let cfg = WorldConfig {
            obs_noise: 0.0,
            swath_fraction: 1.0,
            cloud_dropout: 0.0,
            ..WorldConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = simulate_observations(&truth(), 12, &cfg, &mut rng);
        assert!(obs.mask.iter().all(|&m| m));
        assert_eq!(obs.values.values(), truth().values());
    }

    #[test]
    fn coverage_matches_swath_and_dropout() {
        let cfg = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let expected = cfg.swath_fraction * (1.0 - cfg.cloud_dropout);
        let mut total = 0.0;
        for t in 0..100 {
            let obs = simulate_observations(&truth(), 4 * t, &cfg, &mut rng);
            assert!((obs.fraction() - expected).abs() < 0.05, "t={t}: {}", obs.fraction());
            total += obs.fraction();
            assert!(obs.observed().all(|(_, v)| v >= 0.0));
            assert!(obs.mask.iter().zip(obs.values.values()).all(|(&m, &v)| m || v == OBS_SENTINEL));
        }
        assert!((total / 100.0 - expected).abs() < 0.01);
    }

    #[test]
    fn swath_moves_between_cycles() {
        let cfg = WorldConfig {
            cloud_dropout: 0.0,
            ..WorldConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = simulate_observations(&truth(), 0, &cfg, &mut rng);
        let b = simulate_observations(&truth(), 4, &cfg, &mut rng);
        let overlap = a.mask.iter().zip(&b.mask).filter(|(x, y)| **x && **y).count();
        assert!(overlap < a.observed_count() / 4);
    }
}
