use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::bucketizer::{fit_edges, fit_table, AdjustmentTable, BucketizerConfig};
use crate::data::{compute_popularity, load_log, write_log, FeatureKind, FeatureSchema, Interaction};
use crate::debias::{residual_correlation, Debiaser, Mode};
use crate::error::{Error, Result};
use crate::estimator::{gradient_check_settings, train, Batch, RegressorModel};
use crate::metrics::{
    aggregate_users, bootstrap_deltas, calibration_ratio, emerging_creators, label_prediction_shift,
    score_distribution_by_bucket, ArmMetrics, Metric, UserAggregate,
};
use crate::policies::{build_policy, ArmSpec, Artifacts, PolicyEnv, PolicySpec};
use crate::simulator::{
    oracle_dataset, run_sessions, simulator_schema, ControlPolicy, InflationSpec, SessionState, Universe,
    UniverseManifest,
};
use crate::stats::{mean, variance};

use super::config::ExperimentConfig;
use super::report::{
    ArmRow, Check, DeltaRow, Diagnostics, ModeCalibration, ModeLevels, ModeShift, Report,
};

pub const WARMUP_LOG: &str = "warmup.jsonl";
pub const UNIVERSE_FILE: &str = "universe.json";
pub const SCHEMA_FILE: &str = "schema.json";
pub const ARMS_DIR: &str = "arms";
pub const TABLE_FILE: &str = "table.json";
pub const MODEL_FILE: &str = "model.json";

/// Universe plus the state and log after the control warm-up.
pub struct Simulation {
    pub universe: Universe,
    pub state: SessionState,
    pub warmup: Vec<Interaction>,
}

pub fn simulate_warmup(config: &ExperimentConfig) -> Result<Simulation> {
    let universe = Universe::generate(&config.universe)?;
    let mut state = SessionState::new(universe.users());
    let kinds = simulator_schema().kinds;
    log::info!("warm-up: {} sessions", config.warmup_sessions);
    let warmup = run_sessions(
        &universe,
        &mut state,
        &mut ControlPolicy,
        &config.simulator,
        &kinds,
        config.warmup_sessions,
        config.seed,
    )?;
    Ok(Simulation {
        universe,
        state,
        warmup,
    })
}

/// The discrete table and continuous regressor fit on one log.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub table: AdjustmentTable,
    pub model: RegressorModel,
}

impl Fitted {
    pub fn artifacts(&self) -> Artifacts {
        Artifacts {
            discrete: Arc::new(Debiaser::Discrete(self.table.clone())),
            continuous: Arc::new(Debiaser::Continuous(self.model.clone())),
            edges: self.table.edges.clone(),
        }
    }

    pub fn load(dir: &Path, schema: &FeatureSchema) -> Result<Self> {
        let table = AdjustmentTable::from_json(&std::fs::read_to_string(dir.join(TABLE_FILE))?)?;
        let model = RegressorModel::from_json(&std::fs::read_to_string(dir.join(MODEL_FILE))?)?;
        let hash = schema.hash();
        if table.schema_hash != hash || model.schema_hash != hash {
            return Err(Error::Schema("fitted artifacts were built for a different schema".into()));
        }
        Ok(Self { table, model })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(TABLE_FILE), self.table.to_json()? + "\n")?;
        std::fs::write(dir.join(MODEL_FILE), self.model.to_json()? + "\n")?;
        Ok(())
    }
}

pub fn fit(log: &[Interaction], schema: &FeatureSchema, config: &ExperimentConfig) -> Result<Fitted> {
    let edges = fit_edges(log, schema, config.bucketizer.buckets)?;
    let table = fit_table(log, schema, &edges, &config.bucketizer)?;
    log::info!("fitted table with {} populated cells", table.cells().count());
    let model = train(log, schema, &config.train)?;
    Ok(Fitted { table, model })
}

pub fn run_arm(
    config: &ExperimentConfig,
    sim: &Simulation,
    arm: &ArmSpec,
    artifacts: Option<&Artifacts>,
) -> Result<Vec<Interaction>> {
    let schema = simulator_schema();
    let env = PolicyEnv {
        schema: &schema,
        items: sim.universe.items(),
        debias: &config.debias,
        combiner: &config.combiner,
        level_feature: &config.metrics.level_feature,
        artifacts,
    };
    let mut policy = build_policy(arm, &env)?;
    let mut state = sim.state.clone();
    log::info!("arm {}: {} sessions", arm.name, config.sessions);
    run_sessions(
        &sim.universe,
        &mut state,
        policy.as_mut(),
        &config.simulator,
        &schema.kinds,
        config.sessions,
        config.seed,
    )
}

/// What evaluation needs from an arm once its log is reduced.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub arm: ArmSpec,
    pub interactions: usize,
    pub aggregates: Vec<UserAggregate>,
}

/// Novelty history and emerging-creator flags shared by every arm.
pub struct EvalContext<'a> {
    pub warmup: &'a [Interaction],
    pub users: usize,
    pub emerging: Vec<bool>,
}

impl<'a> EvalContext<'a> {
    pub fn new(warmup: &'a [Interaction], manifest: &UniverseManifest, config: &ExperimentConfig) -> Self {
        let popularity = compute_popularity(warmup);
        Self {
            warmup,
            users: manifest.config.users,
            emerging: emerging_creators(&popularity, &manifest.recent_flags(), config.metrics.emerging_percentile),
        }
    }

    pub fn summarize(&self, arm: &ArmSpec, log: &[Interaction], config: &ExperimentConfig) -> Result<ArmOutcome> {
        Ok(ArmOutcome {
            arm: arm.clone(),
            interactions: log.len(),
            aggregates: aggregate_users(self.warmup, log, self.users, &self.emerging, &config.metrics)?,
        })
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Metrics, deltas, diagnostics and acceptance checks for a finished experiment.
pub fn evaluate(
    config: &ExperimentConfig,
    universe: &Universe,
    ctx: &EvalContext<'_>,
    fitted: &Fitted,
    outcomes: &[ArmOutcome],
) -> Result<Report> {
    let schema = simulator_schema();
    let manifest = universe.manifest();
    let control_idx = outcomes
        .iter()
        .position(|o| o.arm.policy == PolicySpec::Control)
        .ok_or_else(|| Error::Config("no control arm among outcomes".into()))?;
    let control = &outcomes[control_idx];

    let arms: Vec<ArmRow> = outcomes
        .iter()
        .map(|o| ArmRow {
            arm: o.arm.name.clone(),
            kind: o.arm.policy.kind().to_string(),
            interactions: o.interactions,
            metrics: ArmMetrics::from_aggregates(&o.aggregates),
        })
        .collect();
    let mut table1 = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let estimates = bootstrap_deltas(
            &control.aggregates,
            &o.aggregates,
            &Metric::ALL,
            config.metrics.bootstrap_replicates,
            config.metrics.bootstrap_seed,
        )?;
        table1.push(DeltaRow::from_estimates(&o.arm.name, &estimates));
    }

    let log = ctx.warmup;
    let artifacts = fitted.artifacts();
    let debiasers = [(Mode::Discrete, &artifacts.discrete), (Mode::Continuous, &artifacts.continuous)];
    let feature = schema
        .position(&config.metrics.level_feature)
        .ok_or_else(|| Error::Config(format!("unknown level feature {}", config.metrics.level_feature)))?;
    let k = config.metrics.calibration_buckets;

    let mut correlation = Vec::new();
    let mut score_distribution = Vec::new();
    let mut shift = Vec::new();
    let mut calibration = Vec::new();
    for (mode, d) in debiasers {
        let params = d.params(&config.debias);
        correlation.push(residual_correlation(log, &schema, d, &config.debias)?);
        score_distribution.push(ModeLevels {
            mode,
            levels: score_distribution_by_bucket(log, &artifacts.edges, feature, d, params)?,
        });
        shift.push(ModeShift {
            mode,
            buckets: label_prediction_shift(log, d, params, feature, k)?,
        });
        calibration.push(ModeCalibration {
            mode,
            buckets: calibration_ratio(d, log, feature, k)?,
        });
    }

    let batch_rows = &log[..log.len().min(256)];
    let gradient_check = gradient_check_settings(
        &fitted.model,
        &Batch::from_log(&fitted.model, batch_rows)?,
        5,
        8,
        0.1,
        1e-5,
        1e-4,
        config.train.seed,
    )?;

    let diagnostics = Diagnostics {
        fit_interactions: log.len(),
        emerging_creators: ctx.emerging.iter().filter(|&&e| e).count(),
        table_cells: fitted.table.cells().count(),
        training: fitted.model.metadata.clone(),
        correlation,
        level_feature: config.metrics.level_feature.clone(),
        score_distribution,
        label_prediction_shift: shift,
        calibration,
        gradient_check,
    };

    let mut report = Report {
        config_sha256: config.sha256(),
        universe: manifest,
        schema_hash: schema.hash(),
        control: control.arm.name.clone(),
        arms,
        table1,
        diagnostics,
        checks: Vec::new(),
    };
    report.checks = run_checks(config, universe, &schema, log, fitted, &report)?;
    Ok(report)
}

fn check(criterion: u8, name: &str, passed: Option<bool>, detail: String) -> Check {
    Check {
        criterion,
        name: name.into(),
        passed,
        detail,
    }
}

/// Largest relative deviation from 1 of the per-cell mean of `s / Adj_b` under
/// an unsmoothed, unclipped table fit on `log` with `edges`.
pub fn mean_one_deviation(log: &[Interaction], schema: &FeatureSchema, table: &AdjustmentTable) -> Result<(f64, usize)> {
    let edges = &table.edges;
    let k = table.config.buckets;
    let exact = fit_table(log, schema, edges, &BucketizerConfig::exact(k))?;
    let mut cells: BTreeMap<Vec<usize>, (f64, usize)> = BTreeMap::new();
    for r in log {
        let key = edges.assign_cell(&r.familiarity)?;
        let adj = exact.lookup_with(&r.familiarity, 1)?;
        let e = cells.entry(key).or_insert((0.0, 0));
        e.0 += r.urps / adj;
        e.1 += 1;
    }
    let worst = cells
        .values()
        .map(|(sum, n)| (sum / *n as f64 - 1.0).abs())
        .fold(0.0, f64::max);
    Ok((worst, cells.len()))
}

fn sci(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.3e}"))
}

fn inflated(schema: &FeatureSchema, config: &ExperimentConfig) -> Vec<bool> {
    schema
        .kinds
        .iter()
        .map(|&k: &FeatureKind| config.simulator.inflation.alpha(k) != 0.0)
        .collect()
}

/// Spread of the per-level means, each normalized by the mean over all levels.
pub fn normalized_level_variance(means: &[f64]) -> Option<f64> {
    if means.len() < 2 {
        return None;
    }
    let m = mean(means);
    let scaled: Vec<f64> = means.iter().map(|x| x / m).collect();
    Some(variance(&scaled))
}

fn run_checks(
    config: &ExperimentConfig,
    universe: &Universe,
    schema: &FeatureSchema,
    log: &[Interaction],
    fitted: &Fitted,
    report: &Report,
) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let diag = &report.diagnostics;

    let (worst, cells) = mean_one_deviation(log, schema, &fitted.table)?;
    checks.push(check(
        1,
        "mean-one exactness",
        Some(worst <= 1e-9),
        format!("max |cell mean - 1| = {worst:.3e} over {cells} cells"),
    ));
    checks.push(discrete_oracle_check(universe, config)?);
    checks.push(continuous_oracle_check(universe, config)?);

    let g_worst = diag.gradient_check.iter().map(|g| g.max_relative_error).fold(0.0, f64::max);
    let g_ok = diag.gradient_check.len() >= 5
        && diag.gradient_check.iter().all(|g| g.passed && g.entries.len() >= 8);
    checks.push(check(
        4,
        "gradient correctness",
        Some(g_ok),
        format!("{} settings, max relative error {g_worst:.3e}", diag.gradient_check.len()),
    ));

    let infl = inflated(schema, config);
    let mut ok = true;
    let mut parts = Vec::new();
    for c in &diag.correlation {
        for (f, fc) in c.features.iter().enumerate() {
            if !infl[f] {
                continue;
            }
            match (fc.before, fc.after) {
                (Some(b), Some(a)) => {
                    let pass = a.abs() < 0.25 * b.abs();
                    ok &= pass;
                    parts.push(format!("{}/{}: {:.4} -> {:.4}", c.mode, fc.feature, b, a));
                }
                _ => parts.push(format!("{}/{}: undefined", c.mode, fc.feature)),
            }
        }
    }
    checks.push(check(5, "decorrelation attenuation", Some(ok), parts.join("; ")));

    let (reordered, pairs) = within_cell_reorderings(log, &fitted.table, &config.debias)?;
    checks.push(check(
        6,
        "within-cell order preservation",
        Some(reordered == 0),
        format!("{reordered} of {pairs} adjacent same-cell pairs reordered"),
    ));

    checks.push(directional_check(report));

    let cal = diag
        .calibration
        .iter()
        .find(|c| c.mode == Mode::Continuous)
        .map(|c| c.buckets.iter().filter_map(|b| b.ratio).collect::<Vec<_>>())
        .unwrap_or_default();
    let within = cal.iter().filter(|r| (0.9..=1.1).contains(*r)).count();
    checks.push(check(
        8,
        "calibration",
        Some(within >= 3),
        format!("{within} of {} buckets within [0.9, 1.1]: {cal:.4?}", cal.len()),
    ));

    let levels = diag
        .score_distribution
        .iter()
        .find(|m| m.mode == Mode::Discrete)
        .map(|m| m.levels.as_slice())
        .unwrap_or_default();
    let raw: Vec<f64> = levels.iter().filter_map(|l| l.raw.as_ref().map(|s| s.mean)).collect();
    let deb: Vec<f64> = levels.iter().filter_map(|l| l.debiased.as_ref().map(|s| s.mean)).collect();
    let (vr, vd) = (normalized_level_variance(&raw), normalized_level_variance(&deb));
    checks.push(check(
        9,
        "level flattening",
        vr.zip(vd).map(|(r, d)| d < 0.25 * r),
        format!(
            "normalized variance of level means: raw {}, debiased {}",
            sci(vr),
            sci(vd)
        ),
    ));

    let duplicates: Vec<&DeltaRow> = report
        .table1
        .iter()
        .zip(&report.arms)
        .filter(|(_, a)| a.kind == "control" && a.arm != report.control)
        .map(|(r, _)| r)
        .collect();
    checks.push(check(
        10,
        "determinism",
        None,
        "needs a second execution; compare two bundles byte for byte".into(),
    ));
    checks.push(if duplicates.is_empty() {
        check(11, "A/A nullity", None, "no duplicate control arm in this run".into())
    } else {
        let ok = duplicates
            .iter()
            .all(|r| Metric::ALL.iter().all(|&m| r.get(m).contains_zero()));
        check(11, "A/A nullity", Some(ok), format!("{} duplicate control arm(s)", duplicates.len()))
    });
    checks.sort_by_key(|c| c.criterion);
    Ok(checks)
}

const ORACLE_SAMPLES: usize = 100_000;
const ORACLE_MIN_CELL: usize = 200;

/// Noise-free oracle log: each exact cell factor against the cell mean of `q * g`.
fn discrete_oracle_check(universe: &Universe, config: &ExperimentConfig) -> Result<Check> {
    let schema = simulator_schema();
    let spec = InflationSpec {
        noise_sigma: 0.0,
        ..config.simulator.inflation
    };
    let data = oracle_dataset(universe, &spec, ORACLE_SAMPLES, config.seed);
    let log: Vec<Interaction> = data.iter().map(|o| o.interaction.clone()).collect();
    let k = config.bucketizer.buckets;
    let edges = fit_edges(&log, &schema, k)?;
    let table = fit_table(&log, &schema, &edges, &BucketizerConfig::exact(k))?;
    let mut cells: BTreeMap<Vec<usize>, (f64, usize)> = BTreeMap::new();
    for o in &data {
        let e = cells.entry(edges.assign_cell(&o.interaction.familiarity)?).or_insert((0.0, 0));
        e.0 += o.quality * o.inflation;
        e.1 += 1;
    }
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (cell, (sum, n)) in &cells {
        if *n < ORACLE_MIN_CELL {
            continue;
        }
        let expected = sum / *n as f64;
        let factor = table.cell_factor(cell).unwrap_or(f64::NAN);
        worst = worst.max((factor - expected).abs() / expected);
        checked += 1;
    }
    Ok(check(
        2,
        "discrete oracle recovery",
        Some(checked > 0 && worst < 0.01),
        format!("{checked} cells with >= {ORACLE_MIN_CELL} samples, max relative error {worst:.3e}"),
    ))
}

/// Regressor trained on an oracle log where `b` is independent of quality, probed
/// on the central 90% of `g`.
fn continuous_oracle_check(universe: &Universe, config: &ExperimentConfig) -> Result<Check> {
    let schema = simulator_schema();
    let spec = &config.simulator.inflation;
    let log: Vec<Interaction> = oracle_dataset(universe, spec, ORACLE_SAMPLES, config.seed)
        .into_iter()
        .map(|o| o.interaction)
        .collect();
    let model = train(&log, &schema, &config.train)?;
    let target = universe.mean_quality() * spec.noise_mean();
    let probes = oracle_dataset(universe, spec, 5_000, config.seed.wrapping_add(1));
    let mut gs: Vec<f64> = probes.iter().map(|o| o.inflation).collect();
    gs.sort_by(f64::total_cmp);
    let (lo, hi) = (gs[gs.len() / 20], gs[gs.len() - 1 - gs.len() / 20]);
    let mut errors = Vec::new();
    for o in probes.iter().filter(|o| (lo..=hi).contains(&o.inflation)) {
        let expected = target * o.inflation;
        errors.push((model.forward(&o.interaction.familiarity)? - expected).abs() / expected);
    }
    errors.sort_by(f64::total_cmp);
    let worst = errors.last().copied().unwrap_or(f64::NAN);
    let median = errors.get(errors.len() / 2).copied().unwrap_or(f64::NAN);
    Ok(check(
        3,
        "continuous oracle recovery",
        Some(worst < 0.05),
        format!(
            "{} probes, relative error median {median:.4}, max {worst:.4}",
            errors.len()
        ),
    ))
}

/// Within each discrete cell, sorts the log by URPS and counts adjacent pairs whose
/// debiased scores come out in the opposite order.
pub fn within_cell_reorderings(
    log: &[Interaction],
    table: &AdjustmentTable,
    debias: &crate::debias::DebiasConfig,
) -> Result<(usize, usize)> {
    let d = Debiaser::Discrete(table.clone());
    let params = d.params(debias);
    let mut cells: BTreeMap<Vec<usize>, Vec<(f64, f64)>> = BTreeMap::new();
    for r in log {
        cells
            .entry(table.edges.assign_cell(&r.familiarity)?)
            .or_default()
            .push((r.urps, d.debias(r.urps, &r.familiarity, params)?));
    }
    let (mut reordered, mut pairs) = (0, 0);
    for rows in cells.values_mut() {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in rows.windows(2) {
            pairs += 1;
            if w[0].0 < w[1].0 && w[0].1 > w[1].1 {
                reordered += 1;
            }
        }
    }
    Ok((reordered, pairs))
}

fn directional_check(report: &Report) -> Check {
    let kind_of = |arm: &str| report.arms.iter().find(|a| a.arm == arm).map(|a| a.kind.as_str());
    let lafb: Vec<&DeltaRow> = report.table1.iter().filter(|r| kind_of(&r.arm) == Some("lafb")).collect();
    let log_pop: Vec<&DeltaRow> = report.table1.iter().filter(|r| kind_of(&r.arm) == Some("log_pop")).collect();
    if lafb.is_empty() {
        return check(7, "directional reproduction", None, "no LAFB arm in this run".into());
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &lafb {
        let f = &r.familiar_wt_share;
        let n = &r.novel_wt_share;
        let w = &r.overall_wt;
        let fam_ok = f.point.is_some_and(|p| p < 0.0) && f.excludes_zero();
        let nov_ok = n.point.is_some_and(|p| p > 0.0) && n.excludes_zero();
        let wt_ok = w.high.is_some_and(|h| h >= 0.0);
        let vs_pop = log_pop
            .iter()
            .all(|lp| matches!((f.point, lp.familiar_wt_share.point), (Some(a), Some(b)) if a <= b));
        ok &= fam_ok && nov_ok && wt_ok && vs_pop;
        parts.push(format!(
            "{}: familiar {:+.3}pp [{:+.3}, {:+.3}], novel {:+.3}pp [{:+.3}, {:+.3}], overall wt {:+.2}% [{:+.2}, {:+.2}], beats log-pop {vs_pop}",
            r.arm,
            100.0 * f.point.unwrap_or(f64::NAN),
            100.0 * f.low.unwrap_or(f64::NAN),
            100.0 * f.high.unwrap_or(f64::NAN),
            100.0 * n.point.unwrap_or(f64::NAN),
            100.0 * n.low.unwrap_or(f64::NAN),
            100.0 * n.high.unwrap_or(f64::NAN),
            100.0 * w.point.unwrap_or(f64::NAN),
            100.0 * w.low.unwrap_or(f64::NAN),
            100.0 * w.high.unwrap_or(f64::NAN),
        ));
    }
    check(7, "directional reproduction", Some(ok), parts.join("; "))
}

/// Writes a JSON Lines log.
pub fn save_log(path: &Path, log: &[Interaction], schema: &FeatureSchema) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    write_log(&mut out, log, schema)?;
    out.flush()?;
    Ok(())
}

pub fn read_log_file(path: &Path, schema: &FeatureSchema) -> Result<Vec<Interaction>> {
    let file = File::open(path).map_err(|e| Error::InvalidArgument(format!("cannot open {}: {e}", path.display())))?;
    load_log(BufReader::new(file), schema)
}

/// Writes the universe manifest, schema and warm-up log into `dir`.
pub fn save_simulation(dir: &Path, sim: &Simulation) -> Result<()> {
    let schema = simulator_schema();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(UNIVERSE_FILE), serde_json::to_string_pretty(&sim.universe.manifest())? + "\n")?;
    std::fs::write(dir.join(SCHEMA_FILE), serde_json::to_string_pretty(&schema)? + "\n")?;
    save_log(&dir.join(WARMUP_LOG), &sim.warmup, &schema)
}

pub fn arm_log_path(dir: &Path, arm: &str) -> PathBuf {
    dir.join(ARMS_DIR).join(format!("{arm}.jsonl"))
}

/// Runs the whole experiment in memory. Arm logs are reduced as soon as each arm
/// finishes; `on_arm_log` sees every log (warm-up first, named `None`) before it is dropped.
pub fn run_pipeline_with(
    config: &ExperimentConfig,
    mut on_log: impl FnMut(Option<&str>, &Simulation, &[Interaction]) -> Result<()>,
    mut on_fitted: impl FnMut(&Fitted) -> Result<()>,
) -> Result<Report> {
    config.check()?;
    let schema = simulator_schema();
    let sim = stage("simulate", simulate_warmup(config))?;
    stage("simulate", on_log(None, &sim, &sim.warmup))?;
    let fitted = stage("fit", fit(&sim.warmup, &schema, config))?;
    stage("fit", on_fitted(&fitted))?;
    let artifacts = fitted.artifacts();
    let manifest = sim.universe.manifest();
    let ctx = EvalContext::new(&sim.warmup, &manifest, config);
    let mut outcomes = Vec::with_capacity(config.arms.len());
    for arm in &config.arms {
        let log = stage("simulate", run_arm(config, &sim, arm, Some(&artifacts)))?;
        stage("simulate", on_log(Some(&arm.name), &sim, &log))?;
        outcomes.push(stage("evaluate", ctx.summarize(arm, &log, config))?);
    }
    stage("evaluate", evaluate(config, &sim.universe, &ctx, &fitted, &outcomes))
}

pub fn run_pipeline(config: &ExperimentConfig) -> Result<Report> {
    run_pipeline_with(config, |_, _, _| Ok(()), |_| Ok(()))
}

/// Runs the pipeline writing the bundle into `out`. On failure every entry written
/// so far moves to `out/failed/`, next to an `error.txt` naming the stage.
pub fn run_to_dir(config: &ExperimentConfig, out: &Path) -> Result<Report> {
    std::fs::create_dir_all(out)?;
    let written: RefCell<Vec<PathBuf>> = RefCell::new(Vec::new());
    let result = (|| {
        std::fs::write(out.join("config.json"), config.to_json()? + "\n")?;
        written.borrow_mut().push(out.join("config.json"));
        let logs_dir = out.join("logs");
        let schema = simulator_schema();
        let report = run_pipeline_with(
            config,
            |name, sim, log| {
                if !config.write_logs {
                    return Ok(());
                }
                let mut w = written.borrow_mut();
                if !w.contains(&logs_dir) {
                    w.push(logs_dir.clone());
                }
                match name {
                    None => save_simulation(&logs_dir, sim),
                    Some(arm) => save_log(&arm_log_path(&logs_dir, arm), log, &schema),
                }
            },
            |fitted| {
                written.borrow_mut().push(out.join("artifacts"));
                fitted.save(&out.join("artifacts"))
            },
        )?;
        for name in report.write(out)? {
            written.borrow_mut().push(out.join(name));
        }
        Ok(report)
    })();
    if let Err(e) = &result {
        let failed = out.join("failed");
        std::fs::create_dir_all(&failed)?;
        for path in written.borrow().iter() {
            if let Some(name) = path.file_name() {
                if path.exists() {
                    std::fs::rename(path, failed.join(name))?;
                }
            }
        }
        std::fs::write(failed.join("error.txt"), format!("{e}\n"))?;
    }
    result
}
