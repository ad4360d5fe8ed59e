use ddnet_core::assimilator::TruthOracle;
use ddnet_core::forecaster::{forecast_step, prednet_norm_stats, PredNet};
use ddnet_core::netblocks::{build_prednet, ModelWeights, NetworkSpec};
use ddnet_core::opsloop::{run_operational, run_prednet_only, CycleConfig};
use ddnet_core::synthworld::{generate_dataset, Dataset, TimeGrid, WorldConfig};

fn setup() -> (Dataset, PredNet) {
    let world = WorldConfig {
        height: 8,
        width: 16,
        burn_in_steps: 40,
        swath_fraction: 1.0,
        cloud_dropout: 0.0,
        ..WorldConfig::default()
    };
    let grid = TimeGrid {
        t0: 0,
        t1: 40,
        t2: 60,
        t_end: 100,
        k: 4,
        ..TimeGrid::default()
    };
    let ds = generate_dataset(&world, &grid).unwrap();
    let spec = NetworkSpec::prednet_desk(4);
    let w = build_prednet::<f32>(&spec, 9).unwrap();
    let model = PredNet::new(spec, ModelWeights::F32(w), prednet_norm_stats(&ds, 0..40).unwrap()).unwrap();
    (ds, model)
}

fn cfg(k: usize, horizon: usize) -> CycleConfig {
    CycleConfig {
        k,
        horizon,
        ..CycleConfig::default()
    }
}

#[test]
fn no_da_when_k_reaches_horizon() {
    let (ds, model) = setup();
    let oracle = TruthOracle { dataset: &ds };
    let op = run_operational(&model, &oracle, &ds, &cfg(12, 12)).unwrap();
    let base = run_prednet_only(&model, &ds, &cfg(12, 12)).unwrap();
    assert!(op.analyses.is_empty());
    assert_eq!(op.trajectory, base.trajectory);
    assert_eq!(op.aod.records, base.aod.records);
}

#[test]
fn oracle_analyses_are_exact() {
    let (ds, model) = setup();
    let oracle = TruthOracle { dataset: &ds };
    let op = run_operational(&model, &oracle, &ds, &cfg(4, 32)).unwrap();
    let times: Vec<usize> = op.analyses.iter().map(|a| a.time_index).collect();
    assert_eq!(times, (1..8).map(|m| 60 + 4 * m).collect::<Vec<_>>());
    for r in &op.aod.records {
        if times.contains(&r.time_index) {
            assert_eq!(r.rmse, 0.0);
        } else {
            assert!(r.rmse > 0.0);
        }
    }
    assert_eq!(op.timings.len(), 7);
}

#[test]
fn cycle_follows_the_forecast_recurrence() {
    let (ds, model) = setup();
    let oracle = TruthOracle { dataset: &ds };
    let op = run_operational(&model, &oracle, &ds, &cfg(4, 24)).unwrap();
    let base = run_prednet_only(&model, &ds, &cfg(4, 24)).unwrap();
    // The first k forecasts match; the state at step k is the analysis.
    assert_eq!(op.trajectory[..3], base.trajectory[..3]);
    assert_eq!(op.analyses[0].forecast_aod, base.trajectory[3].aod550);
    assert_eq!(op.trajectory[3].pm25, base.trajectory[3].pm25);
    assert_ne!(op.trajectory[3].aod550, base.trajectory[3].aod550);
    for s in 1..24 {
        let prev = &op.trajectory[s - 1];
        let next = forecast_step(&model, &prev.aod550, &ds.aux(prev.time_index + 1).unwrap()).unwrap();
        let state = &op.trajectory[s];
        assert_eq!(state.pm25, next.pm25);
        if (s + 1) % 4 != 0 {
            assert_eq!(state.aod550, next.aod550);
        }
    }
}

#[test]
fn runs_are_deterministic_and_validated() {
    let (ds, model) = setup();
    let a = run_prednet_only(&model, &ds, &cfg(4, 16)).unwrap();
    let b = run_prednet_only(&model, &ds, &cfg(4, 16)).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.pm25.records, b.pm25.records);
    assert!(run_prednet_only(&model, &ds, &cfg(0, 16)).is_err());
    assert!(run_prednet_only(&model, &ds, &cfg(8, 4)).is_err());
    assert!(run_prednet_only(&model, &ds, &cfg(4, 80)).is_err());
    let sparse = CycleConfig {
        emit_cadence: 4,
        ..cfg(4, 16)
    };
    let c = run_prednet_only(&model, &ds, &sparse).unwrap();
    assert_eq!(c.trajectory.len(), 4);
    assert_eq!(c.aod.len(), 16);
}
