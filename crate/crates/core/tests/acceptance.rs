//! Acceptance criteria. Each test writes one `criterion N PASS|FAIL` line to stderr
//! (bypassing the test harness capture) and then asserts.
//!
//! The closed-loop criteria share one run of `configs/repro.json`: the default
//! experiment plus a duplicate control arm.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use lafb_core::bucketizer::{fit_edges, fit_table, BucketizerConfig};
use lafb_core::data::{FamiliarityVector, Interaction};
use lafb_core::debias::{
    debias_slate, CombinerWeights, DebiasConfig, DebiasParams, Debiaser, SlateCandidate,
};
use lafb_core::estimator::{train, TrainConfig};
use lafb_core::harness::{
    run_arm, run_to_dir, simulate_warmup, EvalContext, ExperimentConfig, Fitted, Report,
    Simulation,
};
use lafb_core::metrics::{bootstrap_deltas, Metric};
use lafb_core::policies::{ArmSpec, PolicySpec};
use lafb_core::simulator::{
    oracle_dataset, simulator_schema, InflationSpec, Universe, UniverseConfig,
};
use proptest::prelude::*;

fn emit(criterion: u8, name: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {criterion:>2} {verdict} {name}: {detail}");
}

fn repro_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/repro.json");
    ExperimentConfig::load(&path).expect("repro config loads")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

// The heavy fixtures run one at a time; on a single core interleaving only adds latency.
static HEAVY: Mutex<()> = Mutex::new(());

struct Bundle {
    dir: PathBuf,
    report: Report,
}

fn bundle() -> &'static Bundle {
    static RUN: OnceLock<Bundle> = OnceLock::new();
    RUN.get_or_init(|| {
        let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
        let dir = scratch("run_a");
        let report = run_to_dir(&repro_config(), &dir).expect("repro run succeeds");
        Bundle { dir, report }
    })
}

/// The warm-up log and fitted artifacts of the shared run, rebuilt from the same seed.
struct Warm {
    config: ExperimentConfig,
    sim: Simulation,
    fitted: Fitted,
}

fn warm() -> &'static Warm {
    static WARM: OnceLock<Warm> = OnceLock::new();
    WARM.get_or_init(|| {
        let b = bundle();
        let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
        let config = repro_config();
        let sim = simulate_warmup(&config).expect("warm-up");
        let fitted = Fitted::load(&b.dir.join("artifacts"), &simulator_schema()).expect("artifacts");
        Warm { config, sim, fitted }
    })
}

fn cell_of(cuts: &[Vec<f64>], b: &FamiliarityVector) -> Vec<usize> {
    b.0.iter()
        .zip(cuts)
        .map(|(&v, c)| c.iter().filter(|&&cut| cut <= v).count())
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[test]
fn criterion_01_mean_one_exactness() {
    let w = warm();
    let schema = simulator_schema();
    let log = &w.sim.warmup;
    let edges = fit_edges(log, &schema, w.config.bucketizer.buckets).unwrap();
    let table = fit_table(log, &schema, &edges, &BucketizerConfig::exact(w.config.bucketizer.buckets)).unwrap();
    let d = Debiaser::Discrete(table);
    let params = DebiasParams {
        floor: f64::MIN_POSITIVE,
        strength: 1.0,
    };
    let mut cells: BTreeMap<Vec<usize>, (f64, usize)> = BTreeMap::new();
    for r in log {
        let e = cells.entry(cell_of(&edges.cuts, &r.familiarity)).or_default();
        e.0 += d.debias(r.urps, &r.familiarity, params).unwrap();
        e.1 += 1;
    }
    let worst = cells
        .values()
        .map(|(s, n)| (s / *n as f64 - 1.0).abs())
        .fold(0.0, f64::max);
    let in_run = bundle().report.check(1).and_then(|c| c.passed) == Some(true);
    let passed = worst <= 1e-9 && in_run;
    emit(
        1,
        "mean-one exactness",
        passed,
        &format!("{} cells, max |mean - 1| = {worst:.2e}, report agrees: {in_run}", cells.len()),
    );
    assert!(passed);
}

#[test]
fn criterion_02_discrete_oracle_recovery() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let mut config = repro_config();
    config.simulator.inflation.noise_sigma = 0.0;
    let sim = simulate_warmup(&config).unwrap();
    let schema = simulator_schema();
    let log = &sim.warmup;
    let k = config.bucketizer.buckets;
    let edges = fit_edges(log, &schema, k).unwrap();
    let table = fit_table(log, &schema, &edges, &BucketizerConfig::exact(k)).unwrap();

    let spec = &config.simulator.inflation;
    let mut oracle: BTreeMap<Vec<usize>, (f64, usize)> = BTreeMap::new();
    for r in log {
        let q = sim.universe.quality(r.user_id, r.item_id);
        let g = spec.inflation(&r.familiarity.0, &schema.kinds);
        let e = oracle.entry(cell_of(&edges.cuts, &r.familiarity)).or_default();
        e.0 += q * g;
        e.1 += 1;
    }
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (cell, (sum, n)) in &oracle {
        if *n < 200 {
            continue;
        }
        let expected = sum / *n as f64;
        let factor = table.cell_factor(cell).expect("populated cell");
        worst = worst.max((factor - expected).abs() / expected);
        checked += 1;
    }
    let passed = checked > 0 && worst < 0.01;
    emit(
        2,
        "discrete oracle recovery",
        passed,
        &format!("{checked} cells with >= 200 samples, max relative error {worst:.2e}"),
    );
    assert!(passed);
}

#[test]
fn criterion_03_continuous_oracle_recovery() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let universe = Universe::generate(&UniverseConfig::default()).unwrap();
    let spec = InflationSpec::default();
    let schema = simulator_schema();
    let train_set = oracle_dataset(&universe, &spec, 100_000, 41);
    let log: Vec<Interaction> = train_set.iter().map(|o| o.interaction.clone()).collect();
    let model = train(&log, &schema, &TrainConfig::default()).unwrap();

    let eq = universe.mean_quality() * (spec.noise_sigma * spec.noise_sigma / 2.0).exp();
    let probe = oracle_dataset(&universe, &spec, 5_000, 43);
    let mut gs: Vec<f64> = probe.iter().map(|o| o.inflation).collect();
    gs.sort_by(f64::total_cmp);
    let (lo, hi) = (gs[gs.len() / 20], gs[gs.len() - 1 - gs.len() / 20]);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for o in probe.iter().filter(|o| (lo..=hi).contains(&o.inflation)) {
        let expected = eq * o.inflation;
        let f = model.forward(&o.interaction.familiarity).unwrap();
        worst = worst.max((f - expected).abs() / expected);
        checked += 1;
    }
    let passed = worst < 0.05;
    emit(
        3,
        "continuous oracle recovery",
        passed,
        &format!("{checked} probes on the central 90% of g, max relative error {worst:.4}"),
    );
    assert!(passed);
}

#[test]
fn criterion_04_gradient_correctness() {
    let r = &bundle().report;
    let g = &r.diagnostics.gradient_check;
    let worst = g.iter().map(|x| x.max_relative_error).fold(0.0, f64::max);
    let sampled = g.iter().map(|x| x.entries.len()).min().unwrap_or(0);
    let passed = g.len() >= 5 && sampled >= 8 && worst < 1e-4;
    emit(
        4,
        "gradient correctness",
        passed,
        &format!("{} settings, >= {sampled} parameters each, max relative error {worst:.2e}", g.len()),
    );
    assert!(passed);
}

#[test]
fn criterion_05_decorrelation_attenuation() {
    let w = warm();
    let schema = simulator_schema();
    let log = &w.sim.warmup;
    let artifacts = w.fitted.artifacts();
    let s: Vec<f64> = log.iter().map(|r| r.urps).collect();
    let mut passed = true;
    let mut parts = Vec::new();
    for d in [&artifacts.discrete, &artifacts.continuous] {
        let params = d.params(&w.config.debias);
        let deb: Vec<f64> = log
            .iter()
            .map(|r| d.debias(r.urps, &r.familiarity, params).unwrap())
            .collect();
        for (f, name) in schema.names.iter().enumerate() {
            if w.config.simulator.inflation.alpha(schema.kinds[f]) == 0.0 {
                continue;
            }
            let b: Vec<f64> = log.iter().map(|r| r.familiarity.0[f]).collect();
            let (before, after) = (pearson(&b, &s), pearson(&b, &deb));
            let ok = after.abs() < 0.25 * before.abs();
            passed &= ok;
            parts.push(format!(
                "{}/{name} {before:+.4} -> {after:+.4}{}",
                d.mode(),
                if ok { "" } else { " (not attenuated)" }
            ));
        }
    }
    emit(5, "decorrelation attenuation", passed, &parts.join(", "));
    assert!(passed);
}

fn candidate(item: u32, urps: f64, b: Vec<f64>) -> SlateCandidate {
    SlateCandidate::new(
        lafb_core::data::ItemId(item),
        lafb_core::data::CreatorId(0),
        urps,
        FamiliarityVector(b),
    )
}

fn order_table() -> &'static Debiaser {
    static TABLE: OnceLock<Debiaser> = OnceLock::new();
    TABLE.get_or_init(|| {
        let universe = Universe::generate(&UniverseConfig {
            users: 50,
            items: 500,
            creators: 50,
            ..UniverseConfig::default()
        })
        .unwrap();
        let log: Vec<Interaction> = oracle_dataset(&universe, &InflationSpec::default(), 20_000, 5)
            .into_iter()
            .map(|o| o.interaction)
            .collect();
        let schema = simulator_schema();
        let edges = fit_edges(&log, &schema, 5).unwrap();
        Debiaser::Discrete(fit_table(&log, &schema, &edges, &BucketizerConfig::default()).unwrap())
    })
}

#[test]
fn criterion_06_within_cell_order_preservation() {
    let Debiaser::Discrete(table) = order_table() else {
        unreachable!()
    };
    let cuts = table.edges.cuts.clone();
    let d = order_table();
    let b_value = (0.0f64..40.0, 0.0f64..8.0, 0.0f64..40.0, 0.0f64..1.0)
        .prop_map(|(a, b, c, e)| vec![a.floor(), b.floor(), c, e]);
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(256));
    let result = runner.run(
        &(
            prop::collection::vec((0.01f64..100.0, b_value), 2..60),
            0.0f64..=1.0,
        ),
        |(rows, strength)| {
            let slate: Vec<SlateCandidate> = rows
                .iter()
                .enumerate()
                .map(|(i, (s, b))| candidate(i as u32, *s, b.clone()))
                .collect();
            let config = DebiasConfig {
                strength,
                ..DebiasConfig::default()
            };
            let ranked = debias_slate(slate, d, &config, &CombinerWeights::default()).unwrap();
            for i in 0..ranked.len() {
                for j in i + 1..ranked.len() {
                    let (a, b) = (&ranked[i], &ranked[j]);
                    if cell_of(&cuts, &a.familiarity) != cell_of(&cuts, &b.familiarity) {
                        continue;
                    }
                    // a precedes b, so raw order must agree (ties fall to item id)
                    prop_assert!(a.urps > b.urps || (a.urps == b.urps && a.item_id < b.item_id));
                }
            }
            Ok(())
        },
    );
    let passed = result.is_ok();
    let detail = match &result {
        Ok(()) => "256 random slates, no same-cell pair reordered".to_string(),
        Err(e) => format!("{e}"),
    };
    emit(6, "within-cell order preservation", passed, &detail);
    assert!(passed);
}

#[test]
fn criterion_07_directional_reproduction() {
    let r = &bundle().report;
    let kind = |arm: &str| r.arms.iter().find(|a| a.arm == arm).map(|a| a.kind.clone());
    let log_pop: Vec<f64> = r
        .table1
        .iter()
        .filter(|row| kind(&row.arm).as_deref() == Some("log_pop"))
        .filter_map(|row| row.familiar_wt_share.point)
        .collect();
    let mut passed = !log_pop.is_empty();
    let mut parts = Vec::new();
    let mut lafb_arms = 0;
    for row in r.table1.iter().filter(|row| kind(&row.arm).as_deref() == Some("lafb")) {
        lafb_arms += 1;
        let f = row.familiar_wt_share;
        let n = row.novel_wt_share;
        let w = row.overall_wt;
        let (fp, fl, fh) = (f.point.unwrap(), f.low.unwrap(), f.high.unwrap());
        let (np, nl, nh) = (n.point.unwrap(), n.low.unwrap(), n.high.unwrap());
        let (wl, wh) = (w.low.unwrap(), w.high.unwrap());
        let ok = fp < 0.0
            && fh < 0.0
            && np > 0.0
            && nl > 0.0
            && (wl <= 0.0 && wh >= 0.0 || wl > 0.0)
            && log_pop.iter().all(|&lp| fp <= lp);
        passed &= ok;
        parts.push(format!(
            "{} familiar {:+.2}pp [{:+.2}, {:+.2}] novel {:+.2}pp [{:+.2}, {:+.2}] overall wt [{:+.2}%, {:+.2}%]",
            row.arm,
            100.0 * fp,
            100.0 * fl,
            100.0 * fh,
            100.0 * np,
            100.0 * nl,
            100.0 * nh,
            100.0 * wl,
            100.0 * wh
        ));
    }
    parts.push(format!(
        "log-pop familiar {:+.2}pp",
        100.0 * log_pop.first().copied().unwrap_or(f64::NAN)
    ));
    passed &= lafb_arms == 2;
    emit(7, "directional reproduction", passed, &parts.join("; "));
    assert!(passed);
}

#[test]
fn criterion_08_calibration() {
    let r = &bundle().report;
    let cal = r
        .diagnostics
        .calibration
        .iter()
        .find(|c| c.mode == lafb_core::debias::Mode::Continuous)
        .expect("continuous calibration");
    let ratios: Vec<f64> = cal
        .buckets
        .iter()
        .map(|b| b.mean_prediction.unwrap() / b.mean_label.unwrap())
        .collect();
    let within = ratios.iter().filter(|r| (0.9..=1.1).contains(*r)).count();
    let passed = ratios.len() == 5 && within >= 3;
    emit(
        8,
        "calibration",
        passed,
        &format!("{within} of {} buckets in [0.9, 1.1], ratios {ratios:.3?}", ratios.len()),
    );
    assert!(passed);
}

fn var(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_09_level_flattening() {
    let r = &bundle().report;
    let mut passed = true;
    let mut parts = Vec::new();
    for ml in &r.diagnostics.score_distribution {
        let raw: Vec<f64> = ml.levels.iter().filter_map(|l| l.raw.as_ref().map(|s| s.mean)).collect();
        let deb: Vec<f64> = ml
            .levels
            .iter()
            .filter_map(|l| l.debiased.as_ref().map(|s| s.mean))
            .collect();
        let (vr, vd) = (var(&raw), var(&deb));
        // the same comparison after dividing each series by its own mean
        let norm = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            var(&xs.iter().map(|x| x / m).collect::<Vec<_>>())
        };
        let (nr, nd) = (norm(&raw), norm(&deb));
        let ok = raw.len() == 3 && vd < 0.25 * vr && nd < 0.25 * nr;
        passed &= ok;
        parts.push(format!(
            "{}: var {vr:.3e} -> {vd:.3e}, mean-normalized {nr:.3e} -> {nd:.3e}",
            ml.mode
        ));
    }
    emit(9, "level flattening", passed, &parts.join("; "));
    assert!(passed);
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_10_determinism() {
    let first = bundle();
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let dir = scratch("run_b");
    run_to_dir(&repro_config(), &dir).expect("second run succeeds");
    let (a, b) = (files(&first.dir), files(&dir));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let passed = !a.is_empty() && differing.is_empty();
    emit(
        10,
        "determinism",
        passed,
        &format!("{} files compared, differing: {differing:?}", a.len()),
    );
    assert!(passed);
}

#[test]
fn criterion_11_aa_nullity() {
    let r = &bundle().report;
    let duplicates: Vec<_> = r
        .table1
        .iter()
        .filter(|row| row.arm != r.control && r.arms.iter().any(|a| a.arm == row.arm && a.kind == "control"))
        .collect();
    let paired_ok = !duplicates.is_empty()
        && duplicates
            .iter()
            .all(|row| Metric::ALL.iter().all(|&m| row.get(m).contains_zero()));

    // Unpaired replicate: the same universe and warm-up state, independent session streams.
    let w = warm();
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let control = ArmSpec {
        name: "control".into(),
        policy: PolicySpec::Control,
    };
    let manifest = w.sim.universe.manifest();
    let ctx = EvalContext::new(&w.sim.warmup, &manifest, &w.config);
    let log_a = run_arm(&w.config, &w.sim, &control, None).unwrap();
    let mut replica = w.config.clone();
    replica.seed += 1_000;
    let log_b = run_arm(&replica, &w.sim, &control, None).unwrap();
    let agg_a = ctx.summarize(&control, &log_a, &w.config).unwrap().aggregates;
    let agg_b = ctx.summarize(&control, &log_b, &w.config).unwrap().aggregates;
    drop((log_a, log_b));
    let m = &w.config.metrics;
    let deltas = bootstrap_deltas(&agg_a, &agg_b, &Metric::ALL, m.bootstrap_replicates, m.bootstrap_seed).unwrap();
    let unpaired_ok = deltas.iter().all(|d| d.contains_zero());
    let unpaired: Vec<String> = deltas
        .iter()
        .map(|d| format!("{} [{:+.4}, {:+.4}]", d.metric.name(), d.low.unwrap_or(f64::NAN), d.high.unwrap_or(f64::NAN)))
        .collect();

    let passed = paired_ok && unpaired_ok;
    emit(
        11,
        "A/A nullity",
        passed,
        &format!(
            "paired duplicate arm: all CIs contain 0 = {paired_ok}; independent-stream replicate: {}",
            unpaired.join(", ")
        ),
    );
    assert!(passed);
}
