//! One function per subcommand. Each returns the one-line summary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ddnet_core::assimilator::{build_da_training_set, train_danet};
use ddnet_core::evalkit::{correlation_matrix, emit_report, MetricRecord, MetricSeries, RegionSet, Report};
use ddnet_core::forecaster::{lead_time_curve, sample_start_times, train_prednet, PREDNET_INPUTS};
use ddnet_core::opsloop::{run_operational, run_prednet_only, RunResult};
use ddnet_core::synthworld::{generate_dataset, world_hash, Channel, Dataset, GridField, StateSnapshot};

use crate::config::ExperimentConfig;
use crate::fieldio::{read_dataset, read_frame, read_pairs, write_dataset, write_frame, write_pairs, FieldFrame, PairIndex};
use crate::models::{load_danet, load_prednet, save_danet, save_prednet};
use crate::rundir::{latest_run, DirLock, RunDir};
use crate::scores::{cap_curves, headline, region_rows, HeadlineScores};
use crate::verify::{architecture_checks, gradient_checks, grouped, GRAD_TOLERANCE};
use crate::CliError;

/// Resolved configuration plus the directory its relative paths hang off.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub base: PathBuf,
}

impl Context {
    pub fn path(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn run_dir(&self, command: &str) -> Result<RunDir, CliError> {
        RunDir::create(&self.path(&self.cfg.paths.runs), command, &self.cfg.to_toml())
    }

    /// Opens the dataset and checks it was generated from this config.
    fn dataset(&self) -> Result<Dataset, CliError> {
        let dir = self.path(&self.cfg.paths.data);
        if !dir.join("manifest.toml").exists() {
            return Err(CliError::Runtime(format!("no dataset at {} (run gen-data first)", dir.display())));
        }
        let (ds, m) = read_dataset(&dir)?;
        if m.world_hash != world_hash(&self.cfg.world) || m.grid() != self.cfg.grid {
            return Err(CliError::Validation(format!(
                "dataset at {} was generated from a different world or grid; rerun gen-data",
                dir.display()
            )));
        }
        Ok(ds)
    }
}

fn locked_parent(path: &Path) -> Result<DirLock, CliError> {
    DirLock::acquire(path.parent().unwrap_or(Path::new(".")))
}

pub fn gen_data(ctx: &Context) -> Result<String, CliError> {
    let run = ctx.run_dir("gen-data")?;
    let ds = generate_dataset(&ctx.cfg.world, &ctx.cfg.grid)?;
    let dir = ctx.path(&ctx.cfg.paths.data);
    let m = {
        let _lock = DirLock::acquire(&dir)?;
        write_dataset(&ds, &ctx.cfg.world, &dir)?
    };
    run.write("manifest.toml", &toml::to_string(&m).expect("manifest serialises"))?;
    Ok(format!(
        "{} frames of {}x{}, {} observation times, digest {} -> {}",
        m.frames,
        m.height,
        m.width,
        m.observation_times.len(),
        m.digest,
        dir.display()
    ))
}

pub fn train_prednet_cmd(ctx: &Context) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let run = ctx.run_dir("train-prednet")?;
    let g = ctx.cfg.grid;
    let spec = ctx.cfg.network.prednet();
    let (model, log) = train_prednet(&ds, g.t0..g.t1, &spec, &ctx.cfg.prednet_training)?;
    let path = ctx.path(&ctx.cfg.paths.prednet);
    {
        let _lock = locked_parent(&path)?;
        save_prednet(&model, &ds.digest(), &path)?;
    }
    run.write("train_log.csv", &log.to_csv())?;
    Ok(format!(
        "{} epochs (best {}), probe MSE {:.4e} -> {:.4e}, {} parameters -> {}",
        log.epochs.len(),
        log.best_epoch,
        log.initial_loss,
        log.final_loss,
        grouped(model.weights.count_params().0),
        path.display()
    ))
}

pub fn eval_rollout(ctx: &Context) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let (model, _) = load_prednet(&ctx.path(&ctx.cfg.paths.prednet))?;
    let run = ctx.run_dir("eval-rollout")?;
    let g = ctx.cfg.grid;
    let lt = &ctx.cfg.lead_time;
    let starts = sample_start_times(g.t2, g.t_end, lt.max_lead, lt.starts, lt.seed);
    if starts.is_empty() {
        return Err(CliError::Validation(format!(
            "lead_time.max_lead {} leaves no start times in [{}, {})",
            lt.max_lead, g.t2, g.t_end
        )));
    }
    let curve = lead_time_curve(&model, &ds, &starts, lt.max_lead)?;
    let mut csv = String::from("lead,hours,aod_rmse\n");
    for (i, v) in curve.iter().enumerate() {
        csv.push_str(&format!("{},{},{}\n", i + 1, (i + 1) as u32 * g.dt_hours, v));
    }
    run.write("lead_time.csv", &csv)?;
    run.write(
        "starts.txt",
        &starts.iter().map(|s| format!("{s}\n")).collect::<String>(),
    )?;
    let day = g.steps_per_day();
    let at = |l: usize| curve.get(l - 1).map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
    Ok(format!(
        "{} starts, mean AOD RMSE lead 1 = {}, 1 day = {}, {} steps = {} -> {}",
        starts.len(),
        at(1),
        at(day),
        lt.max_lead,
        at(lt.max_lead),
        run.path.display()
    ))
}

pub fn build_da_set(ctx: &Context) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let (model, _) = load_prednet(&ctx.path(&ctx.cfg.paths.prednet))?;
    let run = ctx.run_dir("build-da-set")?;
    let g = ctx.cfg.grid;
    let pairs = build_da_training_set(&model, &ds, g.t1..g.t2, g.k, &ctx.cfg.cycle.outliers)?;
    let (h, w) = ds.dims();
    let index = PairIndex {
        format_version: crate::fieldio::VERSION,
        height: h,
        width: w,
        k: g.k,
        segment_start: g.t1,
        segment_end: g.t2,
        times: pairs.iter().map(|p| p.time_index).collect(),
    };
    let dir = ctx.path(&ctx.cfg.paths.da_pairs);
    {
        let _lock = DirLock::acquire(&dir)?;
        write_pairs(&pairs, &index, &ds, &ctx.cfg.cycle.outliers, &dir)?;
    }
    run.write("pairs.toml", &toml::to_string(&index).expect("index serialises"))?;
    Ok(format!(
        "{} DA pairs from [{}, {}) every {} steps -> {}",
        pairs.len(),
        g.t1,
        g.t2,
        g.k,
        dir.display()
    ))
}

pub fn train_danet_cmd(ctx: &Context) -> Result<String, CliError> {
    let (pairs, index) = read_pairs(&ctx.path(&ctx.cfg.paths.da_pairs))?;
    if index.k != ctx.cfg.grid.k {
        return Err(CliError::Validation(format!(
            "DA pairs were built with k = {}, config has k = {}",
            index.k, ctx.cfg.grid.k
        )));
    }
    let (prednet, card) = load_prednet(&ctx.path(&ctx.cfg.paths.prednet))?;
    let run = ctx.run_dir("train-danet")?;
    let aod_slot = PREDNET_INPUTS
        .iter()
        .position(|&c| c == Channel::Aod550)
        .expect("AOD is a PredNet input");
    let aod_stats = prednet.norm.inputs[aod_slot];
    let (net, log) = train_danet(&pairs, aod_stats, &ctx.cfg.network.danet(), &ctx.cfg.danet_training)?;
    let path = ctx.path(&ctx.cfg.paths.danet);
    {
        let _lock = locked_parent(&path)?;
        save_danet(&net, &card.dataset_digest, &path)?;
    }
    run.write("train_log.csv", &log.to_csv())?;
    Ok(format!(
        "{} pairs, {} epochs (best {}), probe MSE {:.4e} -> {:.4e} -> {}",
        pairs.len(),
        log.epochs.len(),
        log.best_epoch,
        log.initial_loss,
        log.final_loss,
        path.display()
    ))
}

/// `run.toml` of a cycle run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub start: usize,
    pub horizon: usize,
    pub k: usize,
    pub analyses: usize,
    pub emitted_states: usize,
    pub mean_aod_rmse: f64,
    pub mean_pm25_rmse: f64,
}

fn metrics_csv(series: &[&MetricSeries]) -> String {
    let mut s = String::from("experiment,variable,time_index,rmse,r\n");
    for m in series {
        for r in &m.records {
            let rr = r.r.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", m.experiment, m.variable, r.time_index, r.rmse, rr));
        }
    }
    s
}

fn parse_metrics(path: &Path) -> Result<Vec<MetricSeries>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let bad = |line: usize| CliError::Runtime(format!("{}: malformed line {line}", path.display()));
    let mut out: Vec<MetricSeries> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 1));
        }
        let rec = MetricRecord {
            time_index: f[2].parse().map_err(|_| bad(i + 1))?,
            rmse: f[3].parse().map_err(|_| bad(i + 1))?,
            r: if f[4].is_empty() {
                None
            } else {
                Some(f[4].parse().map_err(|_| bad(i + 1))?)
            },
        };
        match out.iter_mut().find(|s| s.experiment == f[0] && s.variable == f[1]) {
            Some(s) => s.records.push(rec),
            None => {
                let mut s = MetricSeries::new(f[0], f[1]);
                s.records.push(rec);
                out.push(s);
            }
        }
    }
    Ok(out)
}

fn write_run(ctx: &Context, run: &RunDir, result: &RunResult) -> Result<RunRecord, CliError> {
    let traj = run.file("trajectory");
    fs::create_dir_all(&traj).map_err(|e| CliError::Runtime(format!("{}: {e}", traj.display())))?;
    for s in &result.trajectory {
        let (h, w) = s.pm25.dims();
        let mut values = s.pm25.to_f32();
        values.extend(s.aod550.to_f32());
        let f = FieldFrame {
            time_index: s.time_index as u32,
            height: h as u32,
            width: w as u32,
            names: vec!["pm25".into(), "aod550".into()],
            values,
            mask: None,
        };
        write_frame(&traj.join(format!("{:06}.ddnf", s.time_index)), &f)?;
    }
    run.write("metrics.csv", &metrics_csv(&[&result.aod, &result.pm25]))?;
    if !result.timings.is_empty() {
        let mut csv = String::from("step,forecast_seconds,assimilation_seconds\n");
        for t in &result.timings {
            csv.push_str(&format!("{},{},{}\n", t.step, t.forecast_seconds, t.assimilation_seconds));
        }
        run.write("timings.csv", &csv)?;
    }
    let record = RunRecord {
        experiment: result.experiment.clone(),
        start: ctx.cfg.cycle.start.unwrap_or(ctx.cfg.grid.t2),
        horizon: ctx.cfg.cycle.horizon,
        k: ctx.cfg.cycle.k,
        analyses: result.analyses.len(),
        emitted_states: result.trajectory.len(),
        mean_aod_rmse: result.aod.mean_rmse().unwrap_or(f64::NAN),
        mean_pm25_rmse: result.pm25.mean_rmse().unwrap_or(f64::NAN),
    };
    run.write("run.toml", &toml::to_string(&record).expect("record serialises"))?;
    Ok(record)
}

fn run_summary(r: &RunRecord, dir: &Path) -> String {
    format!(
        "{} steps from t = {}, {} analyses, mean RMSE AOD {:.4} PM2.5 {:.4} -> {}",
        r.horizon,
        r.start,
        r.analyses,
        r.mean_aod_rmse,
        r.mean_pm25_rmse,
        dir.display()
    )
}

pub fn run_operational_cmd(ctx: &Context) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let (prednet, _) = load_prednet(&ctx.path(&ctx.cfg.paths.prednet))?;
    let (danet, _) = load_danet(&ctx.path(&ctx.cfg.paths.danet))?;
    let run = ctx.run_dir("run-operational")?;
    let result = run_operational(&prednet, &danet, &ds, &ctx.cfg.cycle)?;
    let record = write_run(ctx, &run, &result)?;
    Ok(run_summary(&record, &run.path))
}

pub fn run_baseline_cmd(ctx: &Context) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let (prednet, _) = load_prednet(&ctx.path(&ctx.cfg.paths.prednet))?;
    let run = ctx.run_dir("run-baseline")?;
    let result = run_prednet_only(&prednet, &ds, &ctx.cfg.cycle)?;
    let record = write_run(ctx, &run, &result)?;
    Ok(run_summary(&record, &run.path))
}

struct StoredRun {
    dir: PathBuf,
    aod: MetricSeries,
    pm25: MetricSeries,
}

fn stored_run(ctx: &Context, command: &str) -> Result<StoredRun, CliError> {
    let dir = latest_run(&ctx.path(&ctx.cfg.paths.runs), command)?;
    let series = parse_metrics(&dir.join("metrics.csv"))?;
    let pick = |var: &str| {
        series
            .iter()
            .find(|s| s.variable == var)
            .cloned()
            .ok_or_else(|| CliError::Runtime(format!("{}: no {var} metrics", dir.display())))
    };
    Ok(StoredRun {
        aod: pick("aod550")?,
        pm25: pick("pm25")?,
        dir,
    })
}

fn read_trajectory(dir: &Path) -> Result<Vec<StateSnapshot>, CliError> {
    let tdir = dir.join("trajectory");
    let mut files: Vec<PathBuf> = fs::read_dir(&tdir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", tdir.display())))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "ddnf"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let f = read_frame(p)?;
            let (h, w) = (f.height as usize, f.width as usize);
            Ok(StateSnapshot {
                time_index: f.time_index as usize,
                pm25: GridField::from_f32(h, w, f.channel(0), Channel::Pm25.units())?,
                aod550: GridField::from_f32(h, w, f.channel(1), Channel::Aod550.units())?,
            })
        })
        .collect()
}

fn scores(ctx: &Context, op: &StoredRun, base: &StoredRun) -> Result<HeadlineScores, CliError> {
    // Short runs are scored with the whole run as the "month".
    let month = (30 * ctx.cfg.grid.steps_per_day()).min(op.aod.len());
    headline(&op.aod, &op.pm25, &base.aod, &base.pm25, month)
}

pub fn evaluate(ctx: &Context) -> Result<String, CliError> {
    let op = stored_run(ctx, "run-operational")?;
    let base = stored_run(ctx, "run-baseline")?;
    let run = ctx.run_dir("evaluate")?;
    let s = scores(ctx, &op, &base)?;
    let mut text = format!(
        "operational_run = {:?}\nbaseline_run = {:?}\n",
        op.dir.display().to_string(),
        base.dir.display().to_string()
    );
    text.push_str(&toml::to_string(&s).expect("scores serialise"));
    text.push_str(&format!(
        "operational_bounded = {}\nbaseline_degrades = {}\nstable = {}\n",
        s.operational_bounded(),
        s.baseline_degrades(),
        s.stable()
    ));
    run.write("evaluation.toml", &text)?;
    Ok(format!(
        "AOD RMSE {:.4} vs {:.4} (ratio {:.3}), PM2.5 {:.4} vs {:.4}, AOD win rate {:.3}, stable = {} -> {}",
        s.aod_rmse_operational,
        s.aod_rmse_baseline,
        s.aod_ratio,
        s.pm25_rmse_operational,
        s.pm25_rmse_baseline,
        s.aod_win_rate,
        s.stable(),
        run.path.display()
    ))
}

pub fn report(ctx: &Context) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let op = stored_run(ctx, "run-operational")?;
    let base = stored_run(ctx, "run-baseline")?;
    let run = ctx.run_dir("report")?;
    let s = scores(ctx, &op, &base)?;
    let (h, w) = ds.dims();
    let regions = RegionSet::default_boxes(h, w);

    let mut rep = Report {
        summary: s.summary_lines(),
        ..Report::default()
    };
    for r in [&op, &base] {
        for series in [&r.aod, &r.pm25] {
            rep.caps.extend(cap_curves(series)?);
        }
        let traj = read_trajectory(&r.dir)?;
        rep.regions.extend(region_rows(&r.aod.experiment, &ds, &traj, &regions)?);
    }
    rep.series = vec![op.aod, op.pm25, base.aod, base.pm25];

    // Variable correlations over the training segment, one frame per day.
    let g = ctx.cfg.grid;
    let times: Vec<usize> = (g.t0..g.t1).step_by(g.steps_per_day()).collect();
    let mut stacks = Vec::new();
    for ch in Channel::DYNAMIC.iter().copied().chain([Channel::Geopotential]) {
        let fields = times.iter().map(|&t| ds.field(t, ch)).collect::<Result<Vec<_>, _>>()?;
        stacks.push((ch.name().to_string(), fields));
    }
    rep.correlation = Some(correlation_matrix(&stacks)?);
    if let Ok(dir) = latest_run(&ctx.path(&ctx.cfg.paths.runs), "eval-rollout") {
        if let Ok(text) = fs::read_to_string(dir.join("lead_time.csv")) {
            for line in text.lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() == 3 {
                    rep.summary.push((format!("lead_{}_aod_rmse", f[0]), f[2].to_string()));
                }
            }
        }
    }
    let files = emit_report(&rep, &run.path)?;
    let pm_aod = rep
        .correlation
        .as_ref()
        .and_then(|c| c.get(Channel::Pm25.name(), Channel::Aod550.name()));
    Ok(format!(
        "{} files, AOD ratio {:.3}, win rate {:.3}, R(pm25, aod550) = {} -> {}",
        files.len(),
        s.aod_ratio,
        s.aod_win_rate,
        pm_aod.map(|v| format!("{v:.3}")).unwrap_or_else(|| "undefined".into()),
        run.path.display()
    ))
}

pub fn verify(ctx: &Context) -> Result<String, CliError> {
    let run = ctx.run_dir("verify")?;
    let mut lines = String::new();
    let mut parts = Vec::new();
    let mut ok = true;
    for a in architecture_checks() {
        let (t, tr, nt) = a.totals;
        lines.push_str(&format!(
            "{} total={} trainable={} non_trainable={} layers={:?} match={}\n",
            a.name,
            t,
            tr,
            nt,
            a.layers.iter().map(|(_, c)| *c).collect::<Vec<_>>(),
            a.passed()
        ));
        parts.push(format!(
            "reference {} total={} trainable={} non-trainable={}",
            a.name,
            grouped(t),
            grouped(tr),
            grouped(nt)
        ));
        ok &= a.passed();
    }
    for (name, spec) in [("prednet", ctx.cfg.network.prednet()), ("danet", ctx.cfg.network.danet())] {
        let total: usize = spec.layer_param_counts().iter().map(|(_, c)| c).sum();
        lines.push_str(&format!("configured {name} total={total}\n"));
    }
    let checks = gradient_checks()?;
    let worst = checks.iter().map(|(_, r)| r.max_relative_error).fold(0.0, f64::max);
    for (name, r) in &checks {
        lines.push_str(&format!(
            "gradcheck {name} entries={} max_relative_error={:e}\n",
            r.checked, r.max_relative_error
        ));
    }
    ok &= worst <= GRAD_TOLERANCE;
    run.write("verify.txt", &lines)?;
    let summary = format!(
        "{}; gradient checks {} (max relative error {worst:.1e})",
        parts.join("; "),
        checks.len()
    );
    if ok {
        Ok(summary)
    } else {
        Err(CliError::Runtime(format!("verification failed: {summary}")))
    }
}
