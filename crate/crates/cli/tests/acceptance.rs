//! End-to-end acceptance suite. Runs every headline criterion in order at
//! the default desk-scale configuration and prints one line per criterion.
//!
//! Run with `cargo test -p ddnet-cli --test acceptance -- --nocapture`.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ddnet_cli::checkpoint::{decode, encode, Checkpoint, CheckpointError, OptimizerState};
use ddnet_cli::config::ExperimentConfig;
use ddnet_cli::scores::{cap_curves, headline, HeadlineScores};
use ddnet_cli::verify::{architecture_checks, gradient_checks, grouped, GRAD_TOLERANCE};
use ddnet_core::assimilator::{
    analysis_update, build_da_training_set, estimate_error, preprocess_observations, train_danet, DaNet,
};
use ddnet_core::evalkit::{
    cap_profile, corrcoef_values, regional_eval, rmse, rmse_values, CapDirection, RegionSet,
};
use ddnet_core::forecaster::{lead_time_curve, sample_start_times, train_prednet, PredNet};
use ddnet_core::netblocks::{build_prednet, ModelWeights, NetworkSpec};
use ddnet_core::opsloop::{run_operational, run_prednet_only, RunResult};
use ddnet_core::synthworld::{
    disaggregate_emissions, generate_dataset, step_pm, Channel, Dataset, GridField, Meteorology, Units, WorldConfig,
};
use ddnet_core::tensor::{AdamConfig, AdamState};

/// State shared by the criteria that need the default dataset and models.
#[derive(Default)]
struct Shared {
    cfg: ExperimentConfig,
    ds: Option<Dataset>,
    prednet: Option<PredNet>,
    danet: Option<DaNet>,
    runs: Option<(RunResult, RunResult)>,
}

impl Shared {
    fn ds(&self) -> &Dataset {
        self.ds.as_ref().expect("dataset from criterion 4")
    }

    fn prednet(&self) -> &PredNet {
        self.prednet.as_ref().expect("prediction network from criterion 5")
    }
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn architecture() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for c in architecture_checks() {
        ok &= c.passed();
        parts.push(format!(
            "{} total={} trainable={} non-trainable={} layers={}",
            c.name,
            grouped(c.totals.0),
            grouped(c.totals.1),
            grouped(c.totals.2),
            if c.layers.iter().map(|l| l.1).eq(c.expected_layers.iter().copied()) { "match" } else { "MISMATCH" }
        ));
    }
    check(ok, parts.join("; "))
}

fn gradients() -> Outcome {
    let reports = gradient_checks().map_err(|e| e.to_string())?;
    let worst = reports.iter().map(|(_, r)| r.max_relative_error).fold(0.0, f64::max);
    let names: Vec<&str> = reports.iter().map(|(n, _)| *n).collect();
    check(
        worst <= GRAD_TOLERANCE && reports.len() == 4,
        format!("{} max relative error {worst:.2e}", names.join(", ")),
    )
}

fn conservation() -> Outcome {
    let cfg = WorldConfig::closed_box(32, 64);
    let mut met = Meteorology::new(&cfg).map_err(|e| e.to_string())?;
    let n = 32 * 64;
    let vals = (0..n).map(|i| ((i * 37 % 23) as f64) + 0.5).collect();
    let mut pm = GridField::new(32, 64, vals, Units::Concentration).map_err(|e| e.to_string())?;
    let mut worst_step: f64 = 0.0;
    for t in 0..1000 {
        let aux = met.frame(t).map_err(|e| e.to_string())?;
        let before = pm.sum();
        pm = step_pm(&pm, &aux, &cfg).map_err(|e| e.to_string())?;
        worst_step = worst_step.max(((pm.sum() - before) / before).abs());
    }
    let mut worst_split: f64 = 0.0;
    for (total, slots) in [(1234.5, 248usize), (7.25e5, 224), (3.0e-3, 240), (1.0, 1)] {
        let w: Vec<f64> = (0..slots).map(|i| 1.0 + ((i * 13 % 7) as f64) * 0.3).collect();
        let s: f64 = disaggregate_emissions(total, &w, slots).map_err(|e| e.to_string())?.iter().sum();
        worst_split = worst_split.max(((s - total) / total).abs());
    }
    check(
        worst_step <= 1e-9 && worst_split <= 1e-12,
        format!("max per-step mass drift {worst_step:.1e} over 1000 steps, disaggregation drift {worst_split:.1e}"),
    )
}

fn coupling(shared: &mut Shared) -> Outcome {
    let ds = generate_dataset(&shared.cfg.world, &shared.cfg.grid).map_err(|e| e.to_string())?;
    let mut pm = Vec::new();
    let mut aod = Vec::new();
    for t in 0..ds.t_stop() {
        pm.extend(ds.channel(t, Channel::Pm25).map_err(|e| e.to_string())?.iter().map(|&v| v as f64));
        aod.extend(ds.channel(t, Channel::Aod550).map_err(|e| e.to_string())?.iter().map(|&v| v as f64));
    }
    let r = corrcoef_values(&pm, &aod).map_err(|e| e.to_string())?.unwrap_or(f64::NAN);
    shared.ds = Some(ds);
    check((0.5..=0.7).contains(&r), format!("Pearson(pm25, aod550) = {r:.4}, want [0.5, 0.7]"))
}

fn lead_time(shared: &mut Shared) -> Outcome {
    let g = shared.cfg.grid;
    let (model, log) = train_prednet(
        shared.ds(),
        g.t0..g.t1,
        &shared.cfg.network.prednet(),
        &shared.cfg.prednet_training,
    )
    .map_err(|e| e.to_string())?;
    let lt = shared.cfg.lead_time.clone();
    let day = g.steps_per_day();
    let five_days = 5 * day;
    let starts = sample_start_times(g.t2, g.t_end, five_days.max(lt.max_lead), lt.starts, lt.seed);
    let curve = lead_time_curve(&model, shared.ds(), &starts, five_days).map_err(|e| e.to_string())?;
    let (one, five) = (curve[day - 1], curve[five_days - 1]);
    shared.prednet = Some(model);
    check(
        starts.len() == 100 && five >= one,
        format!(
            "{} starts, training loss {:.4}, mean AOD RMSE 1 day {one:.4}, 5 days {five:.4}",
            starts.len(),
            log.final_loss
        ),
    )
}

fn da_improvement(shared: &mut Shared) -> Outcome {
    let g = shared.cfg.grid;
    let policy = shared.cfg.cycle.outliers.clone();
    let m = shared.prednet();
    let ds = shared.ds();
    let pairs = build_da_training_set(m, ds, g.t1..g.t2, g.k, &policy).map_err(|e| e.to_string())?;
    let held = build_da_training_set(m, ds, g.t2 + 1..g.t_end, g.k, &policy).map_err(|e| e.to_string())?;
    let (dn, _) = train_danet(&pairs, m.norm.inputs[0], &shared.cfg.network.danet(), &shared.cfg.danet_training)
        .map_err(|e| e.to_string())?;
    let mut wins = 0;
    for p in &held {
        let raw = ds.observation(p.time_index).ok_or("held-out pair without observations")?;
        let obs = preprocess_observations(&raw, &policy);
        let e = estimate_error(&dn, &p.aod_forecast, &obs).map_err(|e| e.to_string())?;
        let a = analysis_update(&p.aod_forecast, &e).map_err(|e| e.to_string())?;
        let truth = ds.field(p.time_index, Channel::Aod550).map_err(|e| e.to_string())?;
        if rmse(&truth, &a).map_err(|e| e.to_string())? < rmse(&truth, &p.aod_forecast).map_err(|e| e.to_string())? {
            wins += 1;
        }
    }
    let rate = wins as f64 / held.len().max(1) as f64;
    shared.danet = Some(dn);
    check(
        !held.is_empty() && rate >= 0.7,
        format!("{} training pairs, analysis beats forecast on {wins}/{} held-out times ({rate:.3})", pairs.len(), held.len()),
    )
}

fn stability(shared: &mut Shared) -> Outcome {
    let dn = shared.danet.as_ref().expect("assimilation network from criterion 6");
    let c = &shared.cfg.cycle;
    let op = run_operational(shared.prednet(), dn, shared.ds(), c).map_err(|e| e.to_string())?;
    let base = run_prednet_only(shared.prednet(), shared.ds(), c).map_err(|e| e.to_string())?;
    let month = 30 * shared.cfg.grid.steps_per_day();
    let h: HeadlineScores =
        headline(&op.aod, &op.pm25, &base.aod, &base.pm25, month).map_err(|e| e.to_string())?;
    shared.runs = Some((op, base));
    check(
        h.stable(),
        format!(
            "AOD {:.4} vs {:.4} (ratio {:.3}), PM2.5 {:.3} vs {:.3}, final-month max {:.4} vs first-month median {:.4}, baseline quarters {:.4} -> {:.4}",
            h.aod_rmse_operational,
            h.aod_rmse_baseline,
            h.aod_ratio,
            h.pm25_rmse_operational,
            h.pm25_rmse_baseline,
            h.operational_final_month_max,
            h.operational_first_month_median,
            h.baseline_first_quarter_mean,
            h.baseline_final_quarter_mean
        ),
    )
}

fn metric_oracles(shared: &Shared) -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    expect(rmse_values(&[0.0; 4], &[2.0; 4]).ok() == Some(2.0), "rmse zeros vs twos");
    expect(rmse_values(&[1.0, 2.0], &[3.0, 0.0]).ok() == Some(2.0), "rmse [1,2] vs [3,0]");
    let r = corrcoef_values(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).ok().flatten().unwrap_or(f64::NAN);
    let hand = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
    expect((r - hand).abs() <= 4.0 * f64::EPSILON * hand, "corrcoef [1,2,3] vs [1,2,4]");
    let cap = cap_profile(&[1.0, 2.0, 3.0], &[2.5], CapDirection::Below).map_err(|e| e.to_string())?;
    expect(cap[0] == 200.0 / 3.0, "CAP at 2.5");

    // Every profile the report would emit for the default runs.
    let (op, base) = shared.runs.as_ref().expect("runs from criterion 7");
    let mut profiles = 0;
    for series in [&op.aod, &op.pm25, &base.aod, &base.pm25] {
        for curve in cap_curves(series).map_err(|e| e.to_string())? {
            profiles += 1;
            let monotone = match curve.metric.as_str() {
                "rmse" => curve.percents.windows(2).all(|w| w[0] <= w[1]),
                _ => curve.percents.windows(2).all(|w| w[0] >= w[1]),
            };
            expect(monotone, &format!("CAP monotonicity {} {} {}", curve.experiment, curve.variable, curve.metric));
        }
    }

    let ds = shared.ds();
    let (h, w) = (shared.cfg.world.height, shared.cfg.world.width);
    let boxes = RegionSet::default_boxes(h, w);
    let whole = RegionSet::whole(h, w);
    let mut worst: f64 = 0.0;
    for s in op.trajectory.iter().step_by(40) {
        let truth = ds.field(s.time_index, Channel::Aod550).map_err(|e| e.to_string())?;
        let all = regional_eval(&truth, &s.aod550, &whole).map_err(|e| e.to_string())?[0].rmse;
        let parts = regional_eval(&truth, &s.aod550, &boxes).map_err(|e| e.to_string())?;
        let mse = parts.iter().map(|m| m.cells as f64 * m.rmse * m.rmse).sum::<f64>() / (h * w) as f64;
        worst = worst.max(((mse - all * all) / (all * all)).abs());
    }
    expect(worst <= 1e-12, "regional MSE decomposition");
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("hand-computed examples exact, {profiles} CAP profiles monotone, decomposition error {worst:.1e}")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

const TINY: &str = r#"
[world]
height = 8
width = 16
burn_in_steps = 40

[grid]
t0 = 0
t1 = 160
t2 = 240
t_end = 320
k = 4

[network]
prednet_hidden = 4
danet_hidden = 4

[prednet_training]
epochs = 2
samples_per_epoch = 40

[danet_training]
epochs = 2

[cycle]
horizon = 64

[lead_time]
starts = 10
max_lead = 16
"#;

fn tiny_pipeline(dir: &Path) -> Result<(), String> {
    let cfg = dir.join("exp.toml");
    fs::write(&cfg, TINY).map_err(|e| e.to_string())?;
    for cmd in [
        "gen-data",
        "train-prednet",
        "eval-rollout",
        "build-da-set",
        "train-danet",
        "run-operational",
        "run-baseline",
        "evaluate",
        "report",
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_ddnet"))
            .args([cmd, "--config"])
            .arg(&cfg)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{cmd}: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(())
}

/// Every regular file under `dir` keyed by relative path, skipping the
/// timestamped run directory names.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()) {
            if e.is_dir() {
                stack.push(e);
            } else {
                let rel = e.strip_prefix(dir).unwrap();
                let mut parts: Vec<String> = rel.iter().map(|p| p.to_string_lossy().into_owned()).collect();
                if parts.first().map(String::as_str) == Some("runs") && parts.len() > 2 {
                    // "<stamp>-<command>" keeps only the command.
                    parts[1] = parts[1].split_once('-').map(|(_, c)| c.to_string()).unwrap_or_default();
                }
                // Timing tables measure wall clock.
                if parts.last().map(String::as_str) == Some("timings.csv") {
                    continue;
                }
                let mut bytes = fs::read(&e).unwrap();
                // The evaluation records which timestamped runs it scored.
                if parts.last().map(String::as_str) == Some("evaluation.toml") {
                    let text = String::from_utf8(bytes).unwrap();
                    bytes = text.lines().filter(|l| !l.contains("_run = ")).collect::<Vec<_>>().join("\n").into_bytes();
                }
                out.push((parts.join("/"), bytes));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    tiny_pipeline(a.path())?;
    tiny_pipeline(b.path())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<&str> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same = ta.len() == tb.len() && differing.is_empty();

    let spec = NetworkSpec::prednet_desk(3);
    let w = build_prednet::<f32>(&spec, 11).map_err(|e| e.to_string())?;
    let mut opt = AdamState::new(AdamConfig::default(), &w);
    opt.step_count = 5;
    let ckpt = Checkpoint {
        descriptor: "kind = \"prednet\"".into(),
        weights: ModelWeights::F32(w),
        optimizer: Some(OptimizerState::F32(opt)),
    };
    let bytes = encode(&ckpt).map_err(|e| e.to_string())?;
    let back = decode(&bytes).map_err(|e| e.to_string())?;
    let bit_exact = back == ckpt && encode(&back).ok() == Some(bytes.clone());
    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x01;
    let crc = matches!(decode(&corrupt), Err(CheckpointError::Crc { .. }));
    check(
        same && bit_exact && crc,
        format!(
            "{} files identical across two runs{}, checkpoint round trip {}, corruption {}",
            ta.len(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {})", differing.join(", ")) },
            if bit_exact { "bit-exact" } else { "NOT exact" },
            if crc { "detected" } else { "MISSED" }
        ),
    )
}

fn report(line: &str) {
    // Written straight to the process stream so it shows without --nocapture.
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

#[test]
fn primary_criteria() {
    let mut shared = Shared::default();
    type Step<'a> = Box<dyn FnMut(&mut Shared) -> Outcome + 'a>;
    let steps: Vec<(&str, u64, Step)> = vec![
        ("architecture oracle", 1, Box::new(|_| architecture())),
        ("gradient oracle", 120, Box::new(|_| gradients())),
        ("world conservation", 60, Box::new(|_| conservation())),
        ("coupling calibration", 120, Box::new(coupling)),
        ("lead-time degradation", 900, Box::new(lead_time)),
        ("assimilation improvement", 600, Box::new(da_improvement)),
        ("headline stability", 600, Box::new(stability)),
        ("metric and CAP oracles", 5, Box::new(|s| metric_oracles(s))),
        ("determinism and formats", 60, Box::new(|_| determinism())),
    ];
    let mut failed = Vec::new();
    for (i, (name, budget, mut step)) in steps.into_iter().enumerate() {
        let n = i + 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| step(&mut shared)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
        let elapsed = t.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let (ok, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        report(&format!(
            "criterion {n} {name}: {} ({detail}; {:.1}s of {budget}s{})",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        ));
        if !ok {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown".into())
}
