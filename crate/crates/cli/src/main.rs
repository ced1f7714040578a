use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lafb_core::data::{FeatureSchema, Interaction};
use lafb_core::bucketizer::{fit_edges, fit_table, AdjustmentTable};
use lafb_core::debias::{debias_slate, read_slates, write_slate, CombinerWeights, DebiasConfig, Debiaser, Mode};
use lafb_core::estimator::{gradient_check_settings, train, Batch, RegressorModel, TrainConfig};
use lafb_core::harness::{
    arm_log_path, evaluate, read_log_file, run_arm, run_to_dir, save_log, save_simulation,
    simulate_warmup, EvalContext, ExperimentConfig, Fitted, MODEL_FILE, SCHEMA_FILE, TABLE_FILE, UNIVERSE_FILE,
    WARMUP_LOG,
};
use lafb_core::simulator::{simulator_schema, Universe, UniverseManifest};
use lafb_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lafb", version, about = "Familiarity debiasing for recommendation scores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the session seed of the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.check()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Discrete,
    Continuous,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Discrete => Mode::Discrete,
            ModeArg::Continuous => Mode::Continuous,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Runs the warm-up and writes universe, schema and warm-up log. With
    /// `--artifacts`, also runs every arm and writes their logs.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Fits the adjustment table and the regressor on a warm-up log.
    Fit {
        #[command(flatten)]
        config: ConfigArgs,
        /// Fits only this estimator; both when omitted.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Directory holding `schema.json` and `warmup.jsonl`.
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Debiases and re-ranks slates, one JSON array of candidates per line.
    Debias {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Adjustment table (`table.json`), required in discrete mode.
        #[arg(long, required_if_eq("mode", "discrete"))]
        table: Option<PathBuf>,
        /// Regressor (`model.json`), required in continuous mode.
        #[arg(long, required_if_eq("mode", "continuous"))]
        model: Option<PathBuf>,
        /// Feature schema of the slates; the simulator schema when omitted.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Correction strength in [0, 1].
        #[arg(long, default_value_t = 1.0)]
        strength: f64,
    },
    /// Computes metrics, deltas and diagnostics from logs and fitted artifacts.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the delta table and the acceptance checks of a report.
    Report {
        /// `report.json` or the bundle directory holding it.
        #[arg(long = "in")]
        input: PathBuf,
        /// Writes the text to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the whole pipeline and writes the report bundle.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compares analytic gradients with central differences.
    Gradcheck {
        /// A trained `model.json`; a freshly initialized network when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        settings: usize,
        #[arg(long, default_value_t = 8)]
        per_setting: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            config,
            out,
            artifacts,
        } => simulate(&config.load()?, &out, artifacts.as_deref()),
        Command::Fit {
            config,
            mode,
            logs,
            out,
        } => fit_stage(&config.load()?, mode.map(Mode::from), &logs, &out),
        Command::Debias {
            mode,
            table,
            model,
            schema,
            input,
            out,
            strength,
        } => {
            let artifact = match mode {
                ModeArg::Discrete => table,
                ModeArg::Continuous => model,
            };
            let artifact = artifact.ok_or_else(|| Error::InvalidArgument("missing fitted artifact".into()))?;
            debias(mode.into(), &artifact, schema.as_deref(), &input, &out, strength)
        }
        Command::Evaluate {
            config,
            logs,
            artifacts,
            out,
        } => evaluate_stage(&config.load()?, &logs, &artifacts, &out),
        Command::Report { input, out } => report(&input, out.as_deref()),
        Command::Run { config, out } => {
            let report = run_to_dir(&config.load()?, &out)?;
            print_checks(&serde_json::to_value(&report.checks)?, &mut std::io::stdout().lock())?;
            Ok(())
        }
        Command::Gradcheck {
            model,
            settings,
            per_setting,
            step,
            tolerance,
            seed,
        } => gradcheck(model.as_deref(), settings, per_setting, step, tolerance, seed),
    }
}

fn read_schema(path: &Path) -> Result<FeatureSchema> {
    FeatureSchema::from_json(&read_text(path)?)
}

fn simulate(config: &ExperimentConfig, out: &Path, artifacts: Option<&Path>) -> Result<()> {
    let sim = simulate_warmup(config)?;
    save_simulation(out, &sim)?;
    if let Some(dir) = artifacts {
        let fitted = Fitted::load(dir, &simulator_schema())?;
        let artifacts = fitted.artifacts();
        for arm in &config.arms {
            let log = run_arm(config, &sim, arm, Some(&artifacts))?;
            save_log(&arm_log_path(out, &arm.name), &log, &simulator_schema())?;
        }
    }
    Ok(())
}

fn fit_stage(config: &ExperimentConfig, mode: Option<Mode>, logs: &Path, out: &Path) -> Result<()> {
    let schema = read_schema(&logs.join(SCHEMA_FILE))?;
    let log = read_log_file(&logs.join(WARMUP_LOG), &schema)?;
    std::fs::create_dir_all(out)?;
    if mode != Some(Mode::Continuous) {
        let edges = fit_edges(&log, &schema, config.bucketizer.buckets)?;
        let table = fit_table(&log, &schema, &edges, &config.bucketizer)?;
        std::fs::write(out.join(TABLE_FILE), table.to_json()? + "\n")?;
    }
    if mode != Some(Mode::Discrete) {
        let model = train(&log, &schema, &config.train)?;
        std::fs::write(out.join(MODEL_FILE), model.to_json()? + "\n")?;
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))
}

fn debias(mode: Mode, artifact: &Path, schema: Option<&Path>, input: &Path, out: &Path, strength: f64) -> Result<()> {
    let schema = match schema {
        Some(path) => read_schema(path)?,
        None => simulator_schema(),
    };
    let text = read_text(artifact)?;
    let (debiaser, hash) = match mode {
        Mode::Discrete => {
            let table = AdjustmentTable::from_json(&text)?;
            let hash = table.schema_hash.clone();
            (Debiaser::Discrete(table), hash)
        }
        Mode::Continuous => {
            let model = RegressorModel::from_json(&text)?;
            let hash = model.schema_hash.clone();
            (Debiaser::Continuous(model), hash)
        }
    };
    if hash != schema.hash() {
        return Err(Error::Schema(format!("{} was fit on a different schema", artifact.display())));
    }
    let config = DebiasConfig {
        strength,
        ..Default::default()
    };
    config.check()?;
    let file = std::fs::File::open(input)
        .map_err(|e| Error::InvalidArgument(format!("cannot open {}: {e}", input.display())))?;
    let slates = read_slates(BufReader::new(file), &schema)?;
    let mut w = BufWriter::new(std::fs::File::create(out)?);
    for slate in slates {
        let ranked = debias_slate(slate, &debiaser, &config, &CombinerWeights::default())?;
        write_slate(&mut w, &ranked, &schema)?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate_stage(config: &ExperimentConfig, logs: &Path, artifacts: &Path, out: &Path) -> Result<()> {
    let schema = simulator_schema();
    let logged_schema = read_schema(&logs.join(SCHEMA_FILE))?;
    if logged_schema != schema {
        return Err(Error::Schema("logs were not written by the simulator schema".into()));
    }
    let universe = Universe::generate(&config.universe)?;
    let manifest: UniverseManifest = serde_json::from_str(
        &std::fs::read_to_string(logs.join(UNIVERSE_FILE))
            .map_err(|e| Error::InvalidArgument(format!("cannot read universe manifest: {e}")))?,
    )?;
    if manifest != universe.manifest() {
        return Err(Error::Config("logs come from a different universe than the config".into()));
    }
    let fitted = Fitted::load(artifacts, &schema)?;
    let warmup = read_log_file(&logs.join(WARMUP_LOG), &schema)?;
    let ctx = EvalContext::new(&warmup, &manifest, config);
    let mut outcomes = Vec::with_capacity(config.arms.len());
    for arm in &config.arms {
        let log: Vec<Interaction> = read_log_file(&arm_log_path(logs, &arm.name), &schema)?;
        outcomes.push(ctx.summarize(arm, &log, config)?);
    }
    let report = evaluate(config, &universe, &ctx, &fitted, &outcomes)?;
    report.write(out)?;
    Ok(())
}

fn report(input: &Path, out: Option<&Path>) -> Result<()> {
    let path = if input.is_dir() {
        input.join("report.json")
    } else {
        input.to_path_buf()
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    let report: serde_json::Value = serde_json::from_str(&text)?;
    let mut buf = Vec::new();
    print_table(&report, &mut buf)?;
    writeln!(buf)?;
    print_checks(&report["checks"], &mut buf)?;
    match out {
        Some(p) => std::fs::write(p, buf)?,
        None => std::io::stdout().lock().write_all(&buf)?,
    }
    Ok(())
}

fn fmt_delta(d: &serde_json::Value) -> String {
    let scale = 100.0;
    let unit = if d["relative"].as_bool().unwrap_or(false) { "%" } else { "pp" };
    match (d["point"].as_f64(), d["low"].as_f64(), d["high"].as_f64()) {
        (Some(p), Some(l), Some(h)) => format!(
            "{:+.2}{unit} [{:+.2}, {:+.2}]",
            scale * p,
            scale * l,
            scale * h
        ),
        _ => "undefined".into(),
    }
}

fn print_table(report: &serde_json::Value, out: &mut impl Write) -> Result<()> {
    let columns = ["emerging_creator_exposure", "novel_wt_share", "familiar_wt_share", "overall_wt"];
    write!(out, "{:<18}", "arm")?;
    for c in columns {
        write!(out, " {c:>28}")?;
    }
    writeln!(out)?;
    for row in report["table1"].as_array().into_iter().flatten() {
        write!(out, "{:<18}", row["arm"].as_str().unwrap_or("?"))?;
        for c in columns {
            write!(out, " {:>28}", fmt_delta(&row[c]))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn print_checks(checks: &serde_json::Value, out: &mut impl Write) -> Result<()> {
    for c in checks.as_array().into_iter().flatten() {
        let verdict = match c["passed"].as_bool() {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "----",
        };
        writeln!(
            out,
            "criterion {:>2} {verdict} {}: {}",
            c["criterion"].as_u64().unwrap_or(0),
            c["name"].as_str().unwrap_or("?"),
            c["detail"].as_str().unwrap_or("")
        )?;
    }
    Ok(())
}

fn gradcheck(model: Option<&Path>, settings: usize, per_setting: usize, step: f64, tolerance: f64, seed: u64) -> Result<()> {
    let model = match model {
        Some(path) => RegressorModel::from_json(&read_text(path)?)?,
        None => fresh_model(seed)?,
    };
    let batch = probe_batch(&model, seed)?;
    let reports = gradient_check_settings(&model, &batch, settings, per_setting, 0.1, step, tolerance, seed)?;
    let mut failed = false;
    for (i, r) in reports.iter().enumerate() {
        println!(
            "setting {i}: {} parameters, max relative error {:.3e} {}",
            r.entries.len(),
            r.max_relative_error,
            if r.passed { "ok" } else { "FAILED" }
        );
        failed |= !r.passed;
    }
    if failed {
        return Err(Error::CheckFailed(format!("gradient check exceeded tolerance {tolerance}")));
    }
    Ok(())
}

/// A one-epoch regressor on a small oracle log, used when no model file is given.
fn fresh_model(seed: u64) -> Result<RegressorModel> {
    let log = oracle_log(2_000, seed)?;
    let config = TrainConfig {
        max_epochs: 1,
        seed,
        ..Default::default()
    };
    train(&log, &simulator_schema(), &config)
}

fn oracle_log(n: usize, seed: u64) -> Result<Vec<Interaction>> {
    let universe = Universe::generate(&lafb_core::simulator::UniverseConfig {
        users: 50,
        items: 500,
        creators: 50,
        seed,
        ..Default::default()
    })?;
    Ok(
        lafb_core::simulator::oracle_dataset(&universe, &Default::default(), n, seed)
            .into_iter()
            .map(|o| o.interaction)
            .collect(),
    )
}

fn probe_batch(model: &RegressorModel, seed: u64) -> Result<Batch> {
    let log = oracle_log(64, seed.wrapping_add(1))?;
    if model.input_dim() != simulator_schema().arity() {
        return Err(Error::Arity {
            expected: simulator_schema().arity(),
            found: model.input_dim(),
        });
    }
    Batch::from_log(model, &log)
}
