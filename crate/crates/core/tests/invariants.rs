use ddnet_core::evalkit::{
    cap_profile, corrcoef_values, dense_thresholds, regional_eval, rmse_values, CapDirection, RegionSet,
};
use ddnet_core::synthworld::{disaggregate_emissions, step_pm, GridField, Meteorology, Units, WorldConfig};
use proptest::prelude::*;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cap_is_monotone_in_threshold(series in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let th = dense_thresholds(&series, 50);
        let below = cap_profile(&series, &th, CapDirection::Below).unwrap();
        let above = cap_profile(&series, &th, CapDirection::Above).unwrap();
        prop_assert!(below.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(above.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(*below.last().unwrap(), 100.0);
        prop_assert!(below.iter().chain(&above).all(|p| (0.0..=100.0).contains(p)));
    }

    #[test]
    fn rmse_triangle_inequality(a in values(16), b in values(16), c in values(16)) {
        let ab = rmse_values(&a, &b).unwrap();
        let bc = rmse_values(&b, &c).unwrap();
        let ac = rmse_values(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert_eq!(rmse_values(&a, &a).unwrap(), 0.0);
        prop_assert!((ab - rmse_values(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn corrcoef_is_affine_invariant(a in values(12), b in values(12), s in 0.1f64..10.0, o in -5.0f64..5.0) {
        let Some(r) = corrcoef_values(&a, &b).unwrap() else { return Ok(()) };
        let scaled: Vec<f64> = b.iter().map(|x| s * x + o).collect();
        let r2 = corrcoef_values(&a, &scaled).unwrap().unwrap();
        prop_assert!((r - r2).abs() < 1e-9);
        let flipped: Vec<f64> = b.iter().map(|x| -s * x + o).collect();
        prop_assert!((r + corrcoef_values(&a, &flipped).unwrap().unwrap()).abs() < 1e-9);
        prop_assert!(r.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn regional_mse_decomposes(t in values(8 * 16), p in values(8 * 16)) {
        let tf = GridField::new(8, 16, t, Units::Dimensionless).unwrap();
        let pf = GridField::new(8, 16, p, Units::Dimensionless).unwrap();
        let whole = regional_eval(&tf, &pf, &RegionSet::whole(8, 16)).unwrap()[0].rmse;
        let parts = regional_eval(&tf, &pf, &RegionSet::default_boxes(8, 16)).unwrap();
        let n: usize = parts.iter().map(|m| m.cells).sum();
        prop_assert_eq!(n, 8 * 16);
        let mse: f64 = parts.iter().map(|m| m.cells as f64 * m.rmse * m.rmse).sum::<f64>() / n as f64;
        prop_assert!((mse - whole * whole).abs() <= 1e-12 * whole * whole.max(1.0));
    }

    #[test]
    fn disaggregation_conserves_totals(total in 0.0f64..1e6, w in prop::collection::vec(0.0f64..5.0, 1..300)) {
        prop_assume!(w.iter().sum::<f64>() > 0.0);
        let slots = disaggregate_emissions(total, &w, w.len()).unwrap();
        let sum: f64 = slots.iter().sum();
        prop_assert!((sum - total).abs() <= 1e-12 * total.max(1e-300));
        prop_assert!(slots.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn transport_keeps_pm_nonnegative(seed in 0u64..1000) {
        let cfg = WorldConfig { seed, ..WorldConfig::closed_box(8, 16) };
        let mut met = Meteorology::new(&cfg).unwrap();
        let vals = (0..128).map(|i| if (i as u64 * 7 + seed) % 5 == 0 { 40.0 } else { 0.0 }).collect();
        let mut pm = GridField::new(8, 16, vals, Units::Concentration).unwrap();
        for t in 0..20 {
            pm = step_pm(&pm, &met.frame(t as i64).unwrap(), &cfg).unwrap();
            prop_assert!(pm.values().iter().all(|&v| v >= 0.0));
        }
    }
}
