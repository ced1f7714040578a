//! Watch-time share metrics, exposure metrics, bootstrap deltas and the
//! score-distribution and calibration diagnostics.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bucketizer::BucketEdges;
use crate::data::{CreatorId, Interaction, PopularityTable};
use crate::debias::{DebiasParams, Debiaser};
use crate::error::{Error, Result};
use crate::simulator::DAY;
use crate::stats::{mean, quantile_sorted, sorted_copy, variance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoveltyKey {
    #[default]
    Item,
    Creator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub window_days: f64,
    pub novelty_key: NoveltyKey,
    /// Exposure percentile at or below which a recent creator counts as emerging.
    pub emerging_percentile: f64,
    pub bootstrap_replicates: usize,
    pub bootstrap_seed: u64,
    pub calibration_buckets: usize,
    /// Feature used for the level and calibration views.
    pub level_feature: String,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            window_days: 14.0,
            novelty_key: NoveltyKey::Item,
            emerging_percentile: 10.0,
            bootstrap_replicates: 1000,
            bootstrap_seed: 29,
            calibration_buckets: 5,
            level_feature: "channel_watch_count".into(),
        }
    }
}

impl MetricConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.window_days >= 0.0) {
            return Err(Error::Config("metrics: window_days must be non-negative".into()));
        }
        if !(0.0..=100.0).contains(&self.emerging_percentile) {
            return Err(Error::Config("metrics: emerging_percentile must lie in [0, 100]".into()));
        }
        if self.calibration_buckets == 0 {
            return Err(Error::Config("metrics: calibration_buckets must be positive".into()));
        }
        Ok(())
    }
}

/// Decides per interaction whether the user touched the same item (or creator)
/// within the preceding window. Feed records in per-user time order.
#[derive(Debug, Clone)]
pub struct NoveltyTracker {
    window_seconds: f64,
    key: NoveltyKey,
    last_seen: HashMap<(u32, u32), i64>,
    last_user_ts: HashMap<u32, i64>,
}

impl NoveltyTracker {
    pub fn new(window_days: f64, key: NoveltyKey) -> Self {
        Self {
            window_seconds: window_days * DAY as f64,
            key,
            last_seen: HashMap::new(),
            last_user_ts: HashMap::new(),
        }
    }

    /// True when the interaction is novel for its user.
    pub fn observe(&mut self, rec: &Interaction) -> Result<bool> {
        let user = rec.user_id.0;
        let ts = rec.timestamp;
        if let Some(&prev) = self.last_user_ts.get(&user) {
            if ts < prev {
                return Err(Error::InvalidArgument(format!(
                    "log not time-ordered for user {user}: {ts} after {prev}"
                )));
            }
        }
        self.last_user_ts.insert(user, ts);
        let key = match self.key {
            NoveltyKey::Item => rec.item_id.0,
            NoveltyKey::Creator => rec.creator_id.0,
        };
        let familiar = match self.last_seen.get(&(user, key)) {
            Some(&last) => last < ts && (ts - last) as f64 <= self.window_seconds,
            None => false,
        };
        let entry = self.last_seen.entry((user, key)).or_insert(ts);
        if ts > *entry {
            *entry = ts;
        }
        Ok(!familiar)
    }
}

pub fn novelty_flags(log: &[Interaction], window_days: f64, key: NoveltyKey) -> Result<Vec<bool>> {
    let mut tracker = NoveltyTracker::new(window_days, key);
    log.iter().map(|r| tracker.observe(r)).collect()
}

/// Share of watch time on content new to the user within `window_days`.
pub fn novel_wt_share(log: &[Interaction], window_days: f64) -> Result<f64> {
    let novel = novelty_flags(log, window_days, NoveltyKey::Item)?;
    let total: f64 = log.iter().map(|r| r.watch_time).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("novel share undefined: zero total watch time".into()));
    }
    let novel_wt: f64 = log.iter().zip(&novel).filter(|(_, &n)| n).map(|(r, _)| r.watch_time).sum();
    Ok(novel_wt / total)
}

pub fn familiar_wt_share(log: &[Interaction], window_days: f64) -> Result<f64> {
    Ok(1.0 - novel_wt_share(log, window_days)?)
}

/// Recent creators whose cumulative exposure is at or below the given percentile
/// of exposure over all `creators` creators.
pub fn emerging_creators(popularity: &PopularityTable, recent: &[bool], percentile: f64) -> Vec<bool> {
    if recent.is_empty() {
        return Vec::new();
    }
    let exposure: Vec<f64> = (0..recent.len())
        .map(|c| popularity.creator(CreatorId(c as u32)) as f64)
        .collect();
    let threshold = quantile_sorted(&sorted_copy(&exposure), percentile / 100.0);
    exposure
        .iter()
        .zip(recent)
        .map(|(&e, &r)| r && e <= threshold)
        .collect()
}

/// Fraction of impressions that went to creators flagged in `emerging`.
pub fn emerging_share(log: &[Interaction], emerging: &[bool]) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::Empty("emerging exposure needs a non-empty log"));
    }
    let hits = log
        .iter()
        .filter(|r| emerging.get(r.creator_id.index()).copied().unwrap_or(false))
        .count();
    Ok(hits as f64 / log.len() as f64)
}

pub fn emerging_creator_exposure(
    log: &[Interaction],
    popularity: &PopularityTable,
    percentile: f64,
    recent: &[bool],
) -> Result<f64> {
    emerging_share(log, &emerging_creators(popularity, recent, percentile))
}

/// Per-user sums every arm-level metric is a ratio of.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UserAggregate {
    pub watch_time: f64,
    pub novel_watch_time: f64,
    pub impressions: u64,
    pub emerging_impressions: u64,
}

impl std::ops::AddAssign for UserAggregate {
    fn add_assign(&mut self, o: Self) {
        self.watch_time += o.watch_time;
        self.novel_watch_time += o.novel_watch_time;
        self.impressions += o.impressions;
        self.emerging_impressions += o.emerging_impressions;
    }
}

/// Aggregates `log` per user; novelty is judged against `history` first.
pub fn aggregate_users(
    history: &[Interaction],
    log: &[Interaction],
    users: usize,
    emerging: &[bool],
    config: &MetricConfig,
) -> Result<Vec<UserAggregate>> {
    let mut tracker = NoveltyTracker::new(config.window_days, config.novelty_key);
    for r in history {
        tracker.observe(r)?;
    }
    let mut out = vec![UserAggregate::default(); users];
    for r in log {
        let novel = tracker.observe(r)?;
        let agg = out.get_mut(r.user_id.index()).ok_or_else(|| {
            Error::InvalidArgument(format!("user {} outside 0..{users}", r.user_id.0))
        })?;
        agg.watch_time += r.watch_time;
        if novel {
            agg.novel_watch_time += r.watch_time;
        }
        agg.impressions += 1;
        if emerging.get(r.creator_id.index()).copied().unwrap_or(false) {
            agg.emerging_impressions += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    OverallWt,
    NovelWtShare,
    FamiliarWtShare,
    EmergingCreatorExposure,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::EmergingCreatorExposure,
        Metric::NovelWtShare,
        Metric::FamiliarWtShare,
        Metric::OverallWt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::OverallWt => "overall_wt",
            Metric::NovelWtShare => "novel_wt_share",
            Metric::FamiliarWtShare => "familiar_wt_share",
            Metric::EmergingCreatorExposure => "emerging_creator_exposure",
        }
    }

    /// Shares change in absolute terms; watch time and exposure relatively.
    pub fn relative(self) -> bool {
        matches!(self, Metric::OverallWt | Metric::EmergingCreatorExposure)
    }

    /// Arm-level value from summed aggregates over `users` users.
    pub fn value(self, total: &UserAggregate, users: usize) -> Option<f64> {
        let ratio = |a: f64, b: f64| (b > 0.0).then(|| a / b);
        match self {
            Metric::OverallWt => (users > 0).then(|| total.watch_time / users as f64),
            Metric::NovelWtShare => ratio(total.novel_watch_time, total.watch_time),
            Metric::FamiliarWtShare => ratio(total.novel_watch_time, total.watch_time).map(|n| 1.0 - n),
            Metric::EmergingCreatorExposure => {
                ratio(total.emerging_impressions as f64, total.impressions as f64)
            }
        }
    }

    pub fn delta(self, control: f64, treatment: f64) -> Option<f64> {
        if self.relative() {
            (control > 0.0).then(|| treatment / control - 1.0)
        } else {
            Some(treatment - control)
        }
    }
}

fn total(aggs: &[UserAggregate]) -> UserAggregate {
    let mut t = UserAggregate::default();
    for a in aggs {
        t += *a;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub overall_wt: Option<f64>,
    pub novel_wt_share: Option<f64>,
    pub familiar_wt_share: Option<f64>,
    pub emerging_creator_exposure_share: Option<f64>,
}

impl ArmMetrics {
    pub fn from_aggregates(aggs: &[UserAggregate]) -> Self {
        let t = total(aggs);
        let n = aggs.len();
        Self {
            overall_wt: Metric::OverallWt.value(&t, n),
            novel_wt_share: Metric::NovelWtShare.value(&t, n),
            familiar_wt_share: Metric::FamiliarWtShare.value(&t, n),
            emerging_creator_exposure_share: Metric::EmergingCreatorExposure.value(&t, n),
        }
    }
}

/// Point estimate with a percentile bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    pub metric: Metric,
    pub relative: bool,
    pub point: Option<f64>,
    pub low: Option<f64>,
    pub high: Option<f64>,
    pub replicates: usize,
}

impl DeltaEstimate {
    pub fn contains_zero(&self) -> bool {
        match (self.low, self.high) {
            (Some(l), Some(h)) => l <= 0.0 && 0.0 <= h,
            _ => true,
        }
    }

    pub fn excludes_zero(&self) -> bool {
        !self.contains_zero()
    }
}

/// Paired user-level bootstrap of `treatment - control` for each metric.
/// Both slices are indexed by user; each replicate resamples users once and
/// evaluates every metric on the same draw.
pub fn bootstrap_deltas(
    control: &[UserAggregate],
    treatment: &[UserAggregate],
    metrics: &[Metric],
    replicates: usize,
    seed: u64,
) -> Result<Vec<DeltaEstimate>> {
    if control.len() != treatment.len() {
        return Err(Error::Arity {
            expected: control.len(),
            found: treatment.len(),
        });
    }
    let n = control.len();
    let points: Vec<Option<f64>> = metrics
        .iter()
        .map(|m| {
            let (c, t) = (total(control), total(treatment));
            m.delta(m.value(&c, n)?, m.value(&t, n)?)
        })
        .collect();
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(replicates); metrics.len()];
    if replicates > 1 && n > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..replicates {
            let mut c = UserAggregate::default();
            let mut t = UserAggregate::default();
            for _ in 0..n {
                let i = rng.random_range(0..n);
                c += control[i];
                t += treatment[i];
            }
            for (k, m) in metrics.iter().enumerate() {
                if let (Some(cv), Some(tv)) = (m.value(&c, n), m.value(&t, n)) {
                    if let Some(d) = m.delta(cv, tv) {
                        samples[k].push(d);
                    }
                }
            }
        }
    }
    Ok(metrics
        .iter()
        .zip(points)
        .zip(samples)
        .map(|((&metric, point), draws)| {
            let (low, high) = match point {
                None => (None, None),
                Some(p) if draws.len() < 2 => (Some(p), Some(p)),
                Some(p) => {
                    let sorted = sorted_copy(&draws);
                    let lo = quantile_sorted(&sorted, 0.025).min(p);
                    let hi = quantile_sorted(&sorted, 0.975).max(p);
                    (Some(lo), Some(hi))
                }
            };
            DeltaEstimate {
                metric,
                relative: metric.relative(),
                point,
                low,
                high,
                replicates: draws.len(),
            }
        })
        .collect())
}

pub fn bootstrap_delta(
    control: &[UserAggregate],
    treatment: &[UserAggregate],
    metric: Metric,
    replicates: usize,
    seed: u64,
) -> Result<DeltaEstimate> {
    Ok(bootstrap_deltas(control, treatment, &[metric], replicates, seed)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    Medium,
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Medium, Level::High];

    /// Bottom, middle and top thirds of `buckets` buckets.
    pub fn of_bucket(bucket: usize, buckets: usize) -> Level {
        let idx = match buckets {
            0 | 1 => 0,
            2 => bucket.min(1) * 2,
            _ => (bucket * 3 / buckets).min(2),
        };
        Level::ALL[idx]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    /// 10th through 90th percentiles.
    pub deciles: Vec<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let sorted = sorted_copy(values);
        Some(Self {
            count: values.len(),
            mean: mean(values),
            variance: variance(values),
            deciles: (1..10).map(|i| quantile_sorted(&sorted, i as f64 / 10.0)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: Level,
    pub raw: Option<Summary>,
    pub debiased: Option<Summary>,
}

/// Raw and debiased score summaries per coarse familiarity level of `feature`.
pub fn score_distribution_by_bucket(
    log: &[Interaction],
    edges: &BucketEdges,
    feature: usize,
    debiaser: &Debiaser,
    params: DebiasParams,
) -> Result<Vec<LevelSummary>> {
    if feature >= edges.arity() {
        return Err(Error::InvalidArgument(format!("feature {feature} outside edges")));
    }
    let buckets = edges.buckets(feature);
    let mut raw: [Vec<f64>; 3] = Default::default();
    let mut debiased: [Vec<f64>; 3] = Default::default();
    for r in log {
        let level = Level::of_bucket(edges.bucket(feature, r.familiarity.values()[feature]), buckets);
        raw[level.index()].push(r.urps);
        debiased[level.index()].push(debiaser.debias(r.urps, &r.familiarity, params)?);
    }
    Ok(Level::ALL
        .iter()
        .map(|&level| LevelSummary {
            level,
            raw: Summary::of(&raw[level.index()]),
            debiased: Summary::of(&debiased[level.index()]),
        })
        .collect())
}

/// Splits record indices into `k` equal-mass groups by ascending feature value;
/// ties keep log order.
pub fn equal_mass_groups(log: &[Interaction], feature: usize, k: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..log.len()).collect();
    order.sort_by(|&a, &b| log[a].familiarity.values()[feature].total_cmp(&log[b].familiarity.values()[feature]));
    let n = order.len();
    (0..k).map(|g| order[g * n / k..(g + 1) * n / k].to_vec()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBucket {
    pub bucket: usize,
    pub count: usize,
    pub feature_low: Option<f64>,
    pub feature_high: Option<f64>,
    pub mean_prediction: Option<f64>,
    pub mean_label: Option<f64>,
    /// `None` flags an empty bucket.
    pub ratio: Option<f64>,
}

/// Mean `Adj_b` over mean `s` per equal-mass bucket of `feature`; ideal value 1.
pub fn calibration_ratio(
    debiaser: &Debiaser,
    log: &[Interaction],
    feature: usize,
    k: usize,
) -> Result<Vec<CalibrationBucket>> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one bucket".into()));
    }
    equal_mass_groups(log, feature, k)
        .into_iter()
        .enumerate()
        .map(|(bucket, idx)| {
            let feature_values: Vec<f64> = idx.iter().map(|&i| log[i].familiarity.values()[feature]).collect();
            let preds: Vec<f64> = idx
                .iter()
                .map(|&i| debiaser.factor(&log[i].familiarity))
                .collect::<Result<_>>()?;
            let labels: Vec<f64> = idx.iter().map(|&i| log[i].urps).collect();
            let (mp, ml) = if idx.is_empty() {
                (None, None)
            } else {
                (Some(mean(&preds)), Some(mean(&labels)))
            };
            Ok(CalibrationBucket {
                bucket,
                count: idx.len(),
                feature_low: feature_values.first().copied(),
                feature_high: feature_values.last().copied(),
                mean_prediction: mp,
                mean_label: ml,
                ratio: mp.zip(ml).map(|(p, l)| p / l),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftBucket {
    pub bucket: usize,
    pub count: usize,
    /// Mean watch time.
    pub mean_label: f64,
    pub mean_debiased_label: f64,
    /// Mean URPS.
    pub mean_prediction: f64,
    pub mean_debiased_prediction: f64,
}

/// Watch-time labels and URPS predictions per equal-mass bucket, before and after
/// dividing by the relative factor `(max(Adj_b, floor) / global_mean)^strength`.
pub fn label_prediction_shift(
    log: &[Interaction],
    debiaser: &Debiaser,
    params: DebiasParams,
    feature: usize,
    k: usize,
) -> Result<Vec<ShiftBucket>> {
    if log.is_empty() {
        return Err(Error::Empty("label/prediction shift needs a non-empty log"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one bucket".into()));
    }
    let gm = debiaser.global_mean();
    let mut out = Vec::with_capacity(k);
    for (bucket, idx) in equal_mass_groups(log, feature, k).into_iter().enumerate() {
        let mut sums = [0.0; 4];
        for &i in &idx {
            let r = &log[i];
            let rel = (debiaser.factor(&r.familiarity)?.max(params.floor) / gm).powf(params.strength);
            sums[0] += r.watch_time;
            sums[1] += r.watch_time / rel;
            sums[2] += r.urps;
            sums[3] += r.urps / rel;
        }
        let n = idx.len().max(1) as f64;
        out.push(ShiftBucket {
            bucket,
            count: idx.len(),
            mean_label: sums[0] / n,
            mean_debiased_label: sums[1] / n,
            mean_prediction: sums[2] / n,
            mean_debiased_prediction: sums[3] / n,
        });
    }
    Ok(out)
}
