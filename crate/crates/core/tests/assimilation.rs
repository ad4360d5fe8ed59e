use ddnet_core::assimilator::{
    analysis_update, build_da_training_set, estimate_error, preprocess_observations, train_danet, DAPair, DaNet,
    DaNorm, ErrorEstimator, OutlierPolicy, TruthOracle,
};
use ddnet_core::forecaster::{ChannelStats, ErrorField, ForecastModel, Result as FcResult, TrainConfig};
use ddnet_core::netblocks::{build_danet, ModelWeights, NetworkSpec};
use ddnet_core::synthworld::{
    generate_dataset, AuxiliaryFrame, Channel, Dataset, GridField, ObservationSet, TimeGrid, Units, WorldConfig,
};
use ddnet_core::tensor::Precision;
use proptest::prelude::*;

fn dataset(world: WorldConfig, t_end: usize) -> Dataset {
    let grid = TimeGrid {
        t0: 0,
        t1: t_end / 2,
        t2: 3 * t_end / 4,
        t_end,
        k: 4,
        ..TimeGrid::default()
    };
    generate_dataset(&world, &grid).unwrap()
}

fn small_world() -> WorldConfig {
    WorldConfig {
        height: 8,
        width: 16,
        burn_in_steps: 40,
        ..WorldConfig::default()
    }
}

/// Forecasts the dataset's truth exactly.
struct Perfect<'a>(&'a Dataset);

impl ForecastModel for Perfect<'_> {
    fn predict(&self, _: &GridField, aux: &AuxiliaryFrame) -> FcResult<(GridField, GridField)> {
        let s = self.0.snapshot(aux.time_index)?;
        Ok((s.pm25, s.aod550))
    }
}

struct Persistence;

impl ForecastModel for Persistence {
    fn predict(&self, aod: &GridField, _: &AuxiliaryFrame) -> FcResult<(GridField, GridField)> {
        let (h, w) = aod.dims();
        Ok((GridField::zeros(h, w, Units::Concentration), aod.clone()))
    }
}

#[test]
fn perfect_forecasts_and_clean_observations_give_zero_pairs() {
    let ds = dataset(
        WorldConfig {
            obs_noise: 0.0,
            ..small_world()
        },
        64,
    );
    let pairs = build_da_training_set(&Perfect(&ds), &ds, 32..48, 4, &OutlierPolicy::default()).unwrap();
    assert_eq!(pairs.len(), 4);
    for p in &pairs {
        assert!(p.label.values().iter().all(|&v| v == 0.0));
        assert!(p.discrepancy.values().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn one_pair_per_observed_da_time() {
    let ds = dataset(small_world(), 64);
    let policy = OutlierPolicy::default();
    let pairs = build_da_training_set(&Persistence, &ds, 32..48, 4, &policy).unwrap();
    let expected = (32..48)
        .step_by(4)
        .filter(|&t| {
            ds.observation(t)
                .is_some_and(|o| !preprocess_observations(&o, &policy).is_empty())
        })
        .count();
    assert_eq!(pairs.len(), expected);
    assert_eq!(pairs.iter().map(|p| p.time_index).collect::<Vec<_>>(), vec![32, 36, 40, 44]);
    for p in &pairs {
        let init = ds.field(p.time_index - 4, Channel::Aod550).unwrap();
        assert_eq!(p.aod_forecast, init);
    }
}

#[test]
fn discrepancy_coverage_tracks_observation_coverage() {
    let world = small_world();
    let f = world.swath_fraction * (1.0 - world.cloud_dropout);
    let ds = dataset(world, 408);
    let pairs = build_da_training_set(&Persistence, &ds, 4..404, 4, &OutlierPolicy::default()).unwrap();
    assert_eq!(pairs.len(), 100);
    let cells = pairs[0].discrepancy.len() as f64;
    let nonzero: f64 = pairs
        .iter()
        .map(|p| p.discrepancy.values().iter().filter(|&&v| v != 0.0).count() as f64 / cells)
        .sum::<f64>()
        / 100.0;
    assert!((nonzero - f).abs() < 0.03, "nonzero fraction {nonzero}, coverage {f}");
}

fn obs_for(ds: &Dataset, t: usize) -> ObservationSet {
    preprocess_observations(&ds.observation(t).unwrap(), &OutlierPolicy::default())
}

#[test]
fn zero_weight_danet_returns_error_mean() {
    let ds = dataset(small_world(), 32);
    let spec = NetworkSpec::danet_desk(4);
    let mut w = build_danet::<f32>(&spec, 2).unwrap();
    w.fill_zero();
    let norm = DaNorm {
        aod: ChannelStats { mean: 0.2, std: 0.1 },
        error: ChannelStats { mean: -0.013, std: 0.05 },
    };
    let net = DaNet::new(spec, ModelWeights::F32(w), norm).unwrap();
    let f = ds.field(7, Channel::Aod550).unwrap();
    let e = estimate_error(&net, &f, &obs_for(&ds, 8)).unwrap();
    assert_eq!(e.time_index, 8);
    assert_eq!(e.values.dims(), (8, 16));
    assert!(e.values.values().iter().all(|&v| v == -0.013f32 as f64));
}

#[test]
fn danet_output_covers_every_cell() {
    let ds = dataset(small_world(), 32);
    let spec = NetworkSpec::danet_desk(4);
    let w = build_danet::<f32>(&spec, 2).unwrap();
    let norm = DaNorm {
        aod: ChannelStats { mean: 0.2, std: 0.1 },
        error: ChannelStats { mean: 0.0, std: 0.05 },
    };
    let net = DaNet::new(spec, ModelWeights::F32(w), norm).unwrap();
    let f = ds.field(7, Channel::Aod550).unwrap();
    let mut sparse = obs_for(&ds, 8);
    sparse.mask.iter_mut().skip(3).for_each(|m| *m = false);
    let e = net.estimate(&f, &sparse).unwrap();
    assert_eq!(e.values.len(), 128);
    assert!(e.values.values().iter().filter(|v| **v != 0.0).count() > 100);
}

#[test]
fn truth_oracle_analysis_is_truth() {
    let ds = dataset(small_world(), 32);
    let f = ds.field(3, Channel::Aod550).unwrap();
    let o = obs_for(&ds, 4);
    let e = TruthOracle { dataset: &ds }.estimate(&f, &o).unwrap();
    assert_eq!(analysis_update(&f, &e).unwrap(), ds.field(4, Channel::Aod550).unwrap());
}

fn zero_label_pairs(ds: &Dataset) -> Vec<DAPair> {
    (1..20)
        .map(|j| {
            let t = 4 * j;
            let f = ds.field(t, Channel::Aod550).unwrap();
            DAPair::new(f.clone(), &obs_for(ds, t), &f).unwrap()
        })
        .collect()
}

#[test]
fn learns_the_zero_map() {
    let ds = dataset(small_world(), 84);
    let pairs = zero_label_pairs(&ds);
    assert!(pairs.iter().all(|p| p.label.values().iter().all(|&v| v == 0.0)));
    let cfg = TrainConfig {
        epochs: 60,
        learning_rate: 5e-3,
        batch_size: 2,
        samples_per_epoch: 0,
        ..TrainConfig::default()
    };
    let stats = ChannelStats { mean: 0.2, std: 0.1 };
    let (net, log) = train_danet(&pairs, stats, &NetworkSpec::danet_desk(4), &cfg).unwrap();
    assert!(log.final_loss < 1e-4, "final MSE {}", log.final_loss);
    let e = net.estimate(&pairs[0].aod_forecast, &obs_for(&ds, 4)).unwrap();
    assert!(e.values.values().iter().all(|v| v.abs() < 0.05));

    let (again, log2) = train_danet(&pairs, stats, &NetworkSpec::danet_desk(4), &cfg).unwrap();
    assert_eq!(net, again);
    assert_eq!(log, log2);
    assert!(train_danet(&[], stats, &NetworkSpec::danet_desk(4), &cfg).is_err());
}

#[test]
fn training_reduces_loss_on_real_pairs() {
    let ds = dataset(small_world(), 400);
    let pairs = build_da_training_set(&Persistence, &ds, 8..400, 4, &OutlierPolicy::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        precision: Precision::F32,
        ..TrainConfig::default()
    };
    let aod = ChannelStats::from_slices((0..200).map(|t| ds.channel(t, Channel::Aod550).unwrap()));
    let (_, log) = train_danet(&pairs, aod, &NetworkSpec::danet_desk(8), &cfg).unwrap();
    assert!(log.final_loss < log.initial_loss, "{} vs {}", log.final_loss, log.initial_loss);
}

fn f32_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f32..50.0, n).prop_map(|v| v.into_iter().map(f64::from).collect())
}

proptest! {
    #[test]
    fn analysis_minus_forecast_is_error_off_clipping(f in f32_values(12), e in f32_values(12)) {
        let forecast = GridField::new(3, 4, f.iter().map(|v| v.abs()).collect(), Units::Dimensionless).unwrap();
        let err = ErrorField { time_index: 0, values: GridField::new(3, 4, e, Units::Dimensionless).unwrap() };
        let a = analysis_update(&forecast, &err).unwrap();
        for i in 0..12 {
            let sum = forecast.values()[i] + err.values.values()[i];
            if sum >= 0.0 {
                prop_assert_eq!(a.values()[i] - forecast.values()[i], err.values.values()[i]);
            } else {
                prop_assert_eq!(a.values()[i], 0.0);
            }
        }
    }
}
