//! Divisive score correction and final-score recombination.
//!
//! The debiased score is `s / max(adj, floor)^strength`, where `adj` estimates
//! `E[s | b]` from either the bucket table or the regressor. The final ranking
//! score is a weighted geometric combination of the debiased score and any
//! other positive quality signals.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::bucketizer::AdjustmentTable;
use crate::data::{familiarity_from_map, CreatorId, FamiliarityVector, FeatureSchema, Interaction, ItemId};
use crate::error::{Error, Result};
use crate::estimator::RegressorModel;
use crate::stats::pearson;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Discrete,
    Continuous,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Discrete => "discrete",
            Mode::Continuous => "continuous",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebiasConfig {
    /// Divisor floor as a fraction of the estimator's global mean.
    pub floor_fraction: f64,
    /// Exponent on the divisor; 0 disables debiasing.
    pub strength: f64,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self {
            floor_fraction: 0.05,
            strength: 1.0,
        }
    }
}

impl DebiasConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.floor_fraction > 0.0) {
            return Err(Error::Config("debias.floor_fraction must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Config("debias.strength must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, global_mean: f64) -> DebiasParams {
        DebiasParams {
            floor: self.floor_fraction * global_mean,
            strength: self.strength,
        }
    }
}

/// Floor and strength with the floor in absolute score units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebiasParams {
    pub floor: f64,
    pub strength: f64,
}

impl DebiasParams {
    pub fn identity() -> Self {
        Self {
            floor: f64::MIN_POSITIVE,
            strength: 0.0,
        }
    }
}

/// `s / max(adj, floor)^strength`.
pub fn debias_score(s: f64, adj: f64, params: DebiasParams) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::NonPositive { what: "URPS", value: s });
    }
    if !(adj > 0.0) {
        return Err(Error::NonPositive {
            what: "debiasing factor",
            value: adj,
        });
    }
    Ok(s / adj.max(params.floor).powf(params.strength))
}

/// Source of the debiasing factor `Adj_b`.
#[derive(Debug, Clone)]
pub enum Debiaser {
    Discrete(AdjustmentTable),
    Continuous(RegressorModel),
}

impl Debiaser {
    pub fn mode(&self) -> Mode {
        match self {
            Debiaser::Discrete(_) => Mode::Discrete,
            Debiaser::Continuous(_) => Mode::Continuous,
        }
    }

    pub fn factor(&self, b: &FamiliarityVector) -> Result<f64> {
        match self {
            Debiaser::Discrete(table) => table.lookup(b),
            Debiaser::Continuous(model) => model.forward(b),
        }
    }

    /// Mean URPS of the data the estimator was fit on.
    pub fn global_mean(&self) -> f64 {
        match self {
            Debiaser::Discrete(table) => table.global_mean,
            Debiaser::Continuous(model) => model.output_scale,
        }
    }

    pub fn params(&self, config: &DebiasConfig) -> DebiasParams {
        config.resolve(self.global_mean())
    }

    pub fn debias(&self, s: f64, b: &FamiliarityVector, params: DebiasParams) -> Result<f64> {
        debias_score(s, self.factor(b)?, params)
    }
}

/// A scored item entering final ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct SlateCandidate {
    pub item_id: ItemId,
    pub creator_id: CreatorId,
    pub urps: f64,
    pub familiarity: FamiliarityVector,
    /// Other ranking signals, all strictly positive.
    pub quality: Vec<(String, f64)>,
    pub debiased: Option<f64>,
    pub final_score: Option<f64>,
}

impl SlateCandidate {
    pub fn new(item_id: ItemId, creator_id: CreatorId, urps: f64, familiarity: FamiliarityVector) -> Self {
        Self {
            item_id,
            creator_id,
            urps,
            familiarity,
            quality: Vec::new(),
            debiased: None,
            final_score: None,
        }
    }
}

/// Exponents of the geometric combiner. Signals without a weight are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombinerWeights {
    pub urps: f64,
    pub quality: BTreeMap<String, f64>,
}

impl Default for CombinerWeights {
    fn default() -> Self {
        Self {
            urps: 1.0,
            quality: BTreeMap::new(),
        }
    }
}

/// `exp(w0 ln s_debias + sum_j w_j ln X_j)`.
pub fn rank_score(candidate: &SlateCandidate, weights: &CombinerWeights) -> Result<f64> {
    let debiased = candidate
        .debiased
        .ok_or_else(|| Error::InvalidArgument("debiased score not populated".into()))?;
    let mut log_score = weights.urps * debiased.ln();
    for (name, value) in &candidate.quality {
        if !(*value > 0.0 && value.is_finite()) {
            return Err(Error::NonPositive {
                what: "quality signal",
                value: *value,
            });
        }
        if let Some(w) = weights.quality.get(name) {
            log_score += w * value.ln();
        }
    }
    Ok(log_score.exp())
}

/// Descending score, ties by ascending item id.
pub fn by_score_desc(a: f64, a_item: ItemId, b: f64, b_item: ItemId) -> Ordering {
    b.total_cmp(&a).then(a_item.cmp(&b_item))
}

/// Debiases every candidate, combines, and sorts by the final score.
pub fn debias_slate(
    mut candidates: Vec<SlateCandidate>,
    debiaser: &Debiaser,
    config: &DebiasConfig,
    weights: &CombinerWeights,
) -> Result<Vec<SlateCandidate>> {
    let params = debiaser.params(config);
    for c in &mut candidates {
        c.debiased = Some(debiaser.debias(c.urps, &c.familiarity, params)?);
        c.final_score = Some(rank_score(c, weights)?);
    }
    candidates.sort_by(|a, b| {
        by_score_desc(
            a.final_score.unwrap_or(0.0),
            a.item_id,
            b.final_score.unwrap_or(0.0),
            b.item_id,
        )
    });
    Ok(candidates)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateIn {
    item_id: ItemId,
    creator_id: CreatorId,
    urps: f64,
    familiarity: BTreeMap<String, f64>,
    #[serde(default)]
    quality: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct CandidateOut<'a> {
    item_id: ItemId,
    creator_id: CreatorId,
    urps: f64,
    familiarity: BTreeMap<&'a str, f64>,
    quality: BTreeMap<&'a str, f64>,
    debiased_urps: Option<f64>,
    final_score: Option<f64>,
}

/// Parses JSON Lines where each line is one slate: an array of candidates with
/// `item_id`, `creator_id`, `urps`, keyed `familiarity` and optional `quality`.
pub fn read_slates<R: BufRead>(input: R, schema: &FeatureSchema) -> Result<Vec<Vec<SlateCandidate>>> {
    let mut slates = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse { line: i + 1, message };
        let raw: Vec<CandidateIn> = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let mut slate = Vec::with_capacity(raw.len());
        for c in raw {
            if !(c.urps > 0.0 && c.urps.is_finite()) {
                return Err(parse(format!("item {}: URPS must be positive, got {}", c.item_id.0, c.urps)));
            }
            let b = familiarity_from_map(&c.familiarity, schema).map_err(parse)?;
            let mut cand = SlateCandidate::new(c.item_id, c.creator_id, c.urps, b);
            cand.quality = c.quality.into_iter().collect();
            slate.push(cand);
        }
        slates.push(slate);
    }
    Ok(slates)
}

/// Writes one slate as a JSON array on a single line.
pub fn write_slate<W: Write>(mut out: W, slate: &[SlateCandidate], schema: &FeatureSchema) -> Result<()> {
    let rows: Vec<CandidateOut<'_>> = slate
        .iter()
        .map(|c| CandidateOut {
            item_id: c.item_id,
            creator_id: c.creator_id,
            urps: c.urps,
            familiarity: schema.names.iter().map(String::as_str).zip(c.familiarity.values().iter().copied()).collect(),
            quality: c.quality.iter().map(|(k, v)| (k.as_str(), *v)).collect(),
            debiased_urps: c.debiased,
            final_score: c.final_score,
        })
        .collect();
    serde_json::to_writer(&mut out, &rows)?;
    out.write_all(b"\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureCorrelation {
    pub feature: String,
    /// `None` when the feature (or score) is constant.
    pub before: Option<f64>,
    pub after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub mode: Mode,
    pub samples: usize,
    pub low_sample: bool,
    pub features: Vec<FeatureCorrelation>,
}

/// Below this many records correlations are reported but flagged.
pub const LOW_SAMPLE: usize = 30;

/// Pearson correlation of each feature with `s` and with the debiased score.
pub fn residual_correlation(
    log: &[Interaction],
    schema: &FeatureSchema,
    debiaser: &Debiaser,
    config: &DebiasConfig,
) -> Result<CorrelationReport> {
    if log.len() < 2 {
        return Err(Error::InvalidArgument(
            "residual correlation needs at least two records".into(),
        ));
    }
    let params = debiaser.params(config);
    let raw: Vec<f64> = log.iter().map(|r| r.urps).collect();
    let debiased: Vec<f64> = log
        .iter()
        .map(|r| debiaser.debias(r.urps, &r.familiarity, params))
        .collect::<Result<_>>()?;
    let features = schema
        .names
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let column: Vec<f64> = log.iter().map(|r| r.familiarity.values()[f]).collect();
            FeatureCorrelation {
                feature: name.clone(),
                before: pearson(&column, &raw),
                after: pearson(&column, &debiased),
            }
        })
        .collect();
    Ok(CorrelationReport {
        mode: debiaser.mode(),
        samples: log.len(),
        low_sample: log.len() < LOW_SAMPLE,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucketizer::{fit_edges, fit_table, BucketEdges, BucketizerConfig, CellStat};
    use crate::data::{FeatureKind, Monotonicity, UserId};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> DebiasParams {
        DebiasParams {
            floor: 1e-9,
            strength: 1.0,
        }
    }

    #[test]
    fn slates_round_trip_through_json_lines() {
        let schema = FeatureSchema::new(
            vec!["watch_count".into(), "affinity".into()],
            vec![FeatureKind::Count, FeatureKind::Affinity],
            vec![Monotonicity::Increasing; 2],
        )
        .unwrap();
        let text = concat!(
            r#"[{"item_id":1,"creator_id":2,"urps":3.0,"familiarity":{"affinity":0.5,"watch_count":4},"quality":{"fresh":2.0}}]"#,
            "\n\n",
            r#"[]"#,
            "\n"
        );
        let slates = read_slates(text.as_bytes(), &schema).unwrap();
        assert_eq!(slates.len(), 2);
        assert_eq!(slates[0][0].familiarity.0, vec![4.0, 0.5]);
        assert_eq!(slates[0][0].quality, vec![("fresh".to_string(), 2.0)]);
        assert!(slates[1].is_empty());

        let mut out = Vec::new();
        write_slate(&mut out, &slates[0], &schema).unwrap();
        let back = read_slates(
            String::from_utf8(out).unwrap().replace(",\"debiased_urps\":null,\"final_score\":null", "").as_bytes(),
            &schema,
        )
        .unwrap();
        assert_eq!(back[0], slates[0]);

        let bad = r#"[{"item_id":1,"creator_id":2,"urps":3.0,"familiarity":{"watch_count":4}}]"#;
        assert!(matches!(read_slates(bad.as_bytes(), &schema), Err(Error::Parse { line: 1, .. })));
        let negative = r#"[{"item_id":1,"creator_id":2,"urps":-3.0,"familiarity":{"watch_count":4,"affinity":0}}]"#;
        assert!(read_slates(negative.as_bytes(), &schema).is_err());
    }

    #[test]
    fn divides_by_factor() {
        assert_eq!(debias_score(3.0, 1.5, unit()).unwrap(), 2.0);
        assert!(debias_score(0.0, 1.5, unit()).is_err());
        assert!(debias_score(1.0, -1.0, unit()).is_err());
    }

    #[test]
    fn zero_strength_is_identity() {
        let p = DebiasParams {
            floor: 3.0,
            strength: 0.0,
        };
        assert_eq!(debias_score(4.2, 0.1, p).unwrap(), 4.2);
    }

    #[test]
    fn floor_bounds_the_divisor() {
        let p = DebiasParams {
            floor: 0.5,
            strength: 1.0,
        };
        assert_eq!(debias_score(1.0, 0.01, p).unwrap(), 2.0);
    }

    #[test]
    fn common_factor_keeps_ranking() {
        let scores = [3.0, 1.0, 2.5, 7.0];
        let debiased: Vec<f64> = scores
            .iter()
            .map(|&s| debias_score(s, 2.2, unit()).unwrap())
            .collect();
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
            idx
        };
        assert_eq!(order(&scores), order(&debiased));
    }

    fn cand(item: u32, urps: f64, fam: Vec<f64>) -> SlateCandidate {
        SlateCandidate::new(ItemId(item), CreatorId(0), urps, FamiliarityVector(fam))
    }

    #[test]
    fn combiner_examples() {
        let mut c = cand(1, 2.0, vec![0.0]);
        c.debiased = Some(2.0);
        assert_eq!(rank_score(&c, &CombinerWeights::default()).unwrap(), 2.0);

        c.quality.push(("q".into(), 4.0));
        let w = CombinerWeights {
            urps: 1.0,
            quality: [("q".to_string(), 0.5)].into(),
        };
        assert!((rank_score(&c, &w).unwrap() - 4.0).abs() < 1e-12);

        c.quality[0].1 = 0.0;
        assert!(rank_score(&c, &w).is_err());
        assert!(rank_score(&cand(1, 1.0, vec![]), &w).is_err());
    }

    #[test]
    fn scaling_a_quality_signal_keeps_argmax() {
        let w = CombinerWeights {
            urps: 1.0,
            quality: [("q".to_string(), 0.7)].into(),
        };
        let base = [(2.0, 1.5), (1.2, 4.0), (3.0, 0.5)];
        let argmax = |k: f64| {
            base.iter()
                .enumerate()
                .map(|(i, &(d, q))| {
                    let mut c = cand(i as u32, d, vec![]);
                    c.debiased = Some(d);
                    c.quality.push(("q".into(), q * k));
                    (i, rank_score(&c, &w).unwrap())
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0
        };
        assert_eq!(argmax(1.0), argmax(37.0));
    }

    fn two_cell_table() -> Debiaser {
        let edges = BucketEdges::from_cuts(vec![vec![1.0]]).unwrap();
        Debiaser::Discrete(
            AdjustmentTable::from_parts(
                String::new(),
                edges,
                BucketizerConfig::exact(2),
                1.5,
                vec![
                    (vec![0], CellStat { factor: 1.0, count: 100 }),
                    (vec![1], CellStat { factor: 2.0, count: 100 }),
                ],
                vec![vec![
                    CellStat { factor: 1.0, count: 100 },
                    CellStat { factor: 2.0, count: 100 },
                ]],
            )
            .unwrap(),
        )
    }

    #[test]
    fn slate_order_flips_across_cells() {
        let d = two_cell_table();
        let out = debias_slate(
            vec![cand(1, 4.0, vec![5.0]), cand(2, 2.5, vec![0.0])],
            &d,
            &DebiasConfig::default(),
            &CombinerWeights::default(),
        )
        .unwrap();
        assert_eq!(out[0].item_id, ItemId(2));
        assert_eq!(out[0].debiased, Some(2.5));
        assert_eq!(out[1].debiased, Some(2.0));
    }

    #[test]
    fn slate_order_kept_within_cell_and_empty_slate() {
        let d = two_cell_table();
        let cfg = DebiasConfig::default();
        let w = CombinerWeights::default();
        let out = debias_slate(vec![cand(1, 2.0, vec![5.0]), cand(2, 4.0, vec![6.0])], &d, &cfg, &w).unwrap();
        assert_eq!(out[0].item_id, ItemId(2));
        assert!(debias_slate(vec![], &d, &cfg, &w).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_item_id() {
        let d = two_cell_table();
        let out = debias_slate(
            vec![cand(9, 2.0, vec![0.0]), cand(3, 2.0, vec![0.0]), cand(5, 2.0, vec![0.0])],
            &d,
            &DebiasConfig::default(),
            &CombinerWeights::default(),
        )
        .unwrap();
        let ids: Vec<u32> = out.iter().map(|c| c.item_id.0).collect();
        assert_eq!(ids, vec![3, 5, 9]);
    }

    fn schema1() -> FeatureSchema {
        FeatureSchema::new(vec!["b".into()], vec![FeatureKind::Count], vec![Monotonicity::Increasing]).unwrap()
    }

    fn rec(urps: f64, b: f64) -> Interaction {
        Interaction {
            user_id: UserId(0),
            item_id: ItemId(0),
            creator_id: CreatorId(0),
            timestamp: 1,
            watch_time: 1.0,
            urps,
            familiarity: FamiliarityVector(vec![b]),
        }
    }

    #[test]
    fn independent_scores_stay_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 20_000;
        let log: Vec<Interaction> = (0..n)
            .map(|_| rec(rng.random_range(0.5..2.0), rng.random_range(0.0..10.0)))
            .collect();
        let edges = fit_edges(&log, &schema1(), 5).unwrap();
        let table = fit_table(&log, &schema1(), &edges, &BucketizerConfig::default()).unwrap();
        let report =
            residual_correlation(&log, &schema1(), &Debiaser::Discrete(table), &DebiasConfig::default()).unwrap();
        let bound = 3.0 / (n as f64).sqrt();
        let f = &report.features[0];
        assert!(f.before.unwrap().abs() < bound && f.after.unwrap().abs() < bound, "{f:?}");
    }

    #[test]
    fn two_point_log_is_flagged() {
        let log = vec![rec(1.0, 0.0), rec(2.0, 3.0)];
        let report =
            residual_correlation(&log, &schema1(), &two_cell_table(), &DebiasConfig::default()).unwrap();
        assert!(report.low_sample);
        assert!((report.features[0].before.unwrap() - 1.0).abs() < 1e-12);
        assert!(residual_correlation(&log[..1], &schema1(), &two_cell_table(), &DebiasConfig::default()).is_err());
    }

    #[test]
    fn constant_feature_reports_undefined() {
        let log = vec![rec(1.0, 2.0), rec(2.0, 2.0), rec(3.0, 2.0)];
        let report =
            residual_correlation(&log, &schema1(), &two_cell_table(), &DebiasConfig::default()).unwrap();
        assert_eq!(report.features[0].before, None);
    }

    proptest! {
        #[test]
        fn order_preserved_within_cell(
            rows in prop::collection::vec((0u8..4, 0.01f64..50.0), 2..200),
            strength in 0.0f64..=1.0,
        ) {
            let log: Vec<Interaction> = rows.iter().map(|&(b, s)| rec(s, b as f64)).collect();
            let edges = fit_edges(&log, &schema1(), 4).unwrap();
            let table = fit_table(&log, &schema1(), &edges, &BucketizerConfig::default()).unwrap();
            let d = Debiaser::Discrete(table);
            let params = d.params(&DebiasConfig { strength, ..DebiasConfig::default() });
            let debiased: Vec<f64> = log.iter().map(|r| d.debias(r.urps, &r.familiarity, params).unwrap()).collect();
            for i in 0..log.len() {
                for j in 0..log.len() {
                    if edges.bucket(0, log[i].familiarity.0[0]) == edges.bucket(0, log[j].familiarity.0[0]) {
                        let raw = log[i].urps.partial_cmp(&log[j].urps).unwrap();
                        let deb = debiased[i].partial_cmp(&debiased[j]).unwrap();
                        prop_assert_eq!(raw, deb);
                    }
                }
            }
        }

        #[test]
        fn strength_is_continuous_and_zero_is_raw(s in 0.01f64..100.0, adj in 0.01f64..100.0, lam in 0.0f64..1.0) {
            let p = |strength| DebiasParams { floor: 1e-6, strength };
            prop_assert_eq!(debias_score(s, adj, p(0.0)).unwrap(), s);
            let a = debias_score(s, adj, p(lam)).unwrap();
            let b = debias_score(s, adj, p((lam + 1e-9).min(1.0))).unwrap();
            prop_assert!((a - b).abs() <= 1e-6 * a.max(1.0));
        }
    }
}
