//! Experiment arms: ranking policies built from a declarative spec.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{log_pop_penalize, quota_rerank, static_boost, BoostRule, Quotas};
use crate::bucketizer::BucketEdges;
use crate::data::{FeatureSchema, PopularityTable};
use crate::debias::{by_score_desc, debias_slate, CombinerWeights, DebiasConfig, Debiaser, Mode, SlateCandidate};
use crate::error::{Error, Result};
use crate::metrics::Level;
use crate::simulator::{ControlPolicy, Policy, RankContext};
use crate::stats::{quantile_sorted, sorted_copy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Control,
    Lafb {
        mode: Mode,
        /// Overrides the experiment-wide debias settings for this arm.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        debias: Option<DebiasConfig>,
    },
    LogPop {
        lambda: f64,
    },
    UserCentric {
        #[serde(default)]
        quotas: Quotas,
    },
    ItemCentric {
        #[serde(default)]
        quotas: Quotas,
    },
    StaticBoost {
        #[serde(default)]
        rule: BoostRule,
    },
}

impl PolicySpec {
    pub fn kind(&self) -> &'static str {
        match self {
            PolicySpec::Control => "control",
            PolicySpec::Lafb { .. } => "lafb",
            PolicySpec::LogPop { .. } => "log_pop",
            PolicySpec::UserCentric { .. } => "user_centric",
            PolicySpec::ItemCentric { .. } => "item_centric",
            PolicySpec::StaticBoost { .. } => "static_boost",
        }
    }

    pub fn needs_artifacts(&self) -> bool {
        matches!(self, PolicySpec::Lafb { .. } | PolicySpec::UserCentric { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub policy: PolicySpec,
}

/// Fitted estimators a policy may draw on.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub discrete: Arc<Debiaser>,
    pub continuous: Arc<Debiaser>,
    pub edges: BucketEdges,
}

pub struct PolicyEnv<'a> {
    pub schema: &'a FeatureSchema,
    pub items: usize,
    pub debias: &'a DebiasConfig,
    pub combiner: &'a CombinerWeights,
    /// Feature whose bucket level drives user-centric strata.
    pub level_feature: &'a str,
    pub artifacts: Option<&'a Artifacts>,
}

pub fn build_policy(arm: &ArmSpec, env: &PolicyEnv<'_>) -> Result<Box<dyn Policy>> {
    let need = |what: &str| {
        env.artifacts
            .ok_or_else(|| Error::Config(format!("arm {} needs fitted {what}", arm.name)))
    };
    let name = arm.name.clone();
    Ok(match &arm.policy {
        PolicySpec::Control => Box::new(Named(name, ControlPolicy)),
        PolicySpec::Lafb { mode, debias } => {
            let a = need("estimators")?;
            let debiaser = match mode {
                Mode::Discrete => a.discrete.clone(),
                Mode::Continuous => a.continuous.clone(),
            };
            let config = debias.unwrap_or(*env.debias);
            config.check()?;
            Box::new(LafbPolicy {
                name,
                debiaser,
                config,
                weights: env.combiner.clone(),
            })
        }
        PolicySpec::LogPop { lambda } => {
            log_pop_penalize(1.0, 0.0, *lambda)?;
            Box::new(LogPopPolicy { name, lambda: *lambda })
        }
        PolicySpec::UserCentric { quotas } => {
            quotas.check()?;
            let feature = feature_index(env.schema, env.level_feature)?;
            Box::new(UserCentricPolicy {
                name,
                edges: need("bucket edges")?.edges.clone(),
                feature,
                quotas: quotas.clone(),
            })
        }
        PolicySpec::ItemCentric { quotas } => {
            quotas.check()?;
            Box::new(ItemCentricPolicy {
                name,
                items: env.items,
                quotas: quotas.clone(),
                terciles: (0.0, 0.0),
            })
        }
        PolicySpec::StaticBoost { rule } => Box::new(StaticBoostPolicy {
            name,
            feature: feature_index(env.schema, &rule.feature)?,
            rule: rule.clone(),
        }),
    })
}

fn feature_index(schema: &FeatureSchema, name: &str) -> Result<usize> {
    schema
        .position(name)
        .ok_or_else(|| Error::Config(format!("unknown feature {name}")))
}

fn sort_by_final(candidates: &mut [SlateCandidate]) {
    candidates.sort_by(|a, b| {
        by_score_desc(
            a.final_score.unwrap_or(0.0),
            a.item_id,
            b.final_score.unwrap_or(0.0),
            b.item_id,
        )
    });
}

fn rescore(mut candidates: Vec<SlateCandidate>, score: impl Fn(&SlateCandidate) -> Result<f64>) -> Result<Vec<SlateCandidate>> {
    for c in &mut candidates {
        let s = score(c)?;
        c.debiased = Some(s);
        c.final_score = Some(s);
    }
    sort_by_final(&mut candidates);
    Ok(candidates)
}

struct Named<P>(String, P);

impl<P: Policy> Policy for Named<P> {
    fn name(&self) -> &str {
        &self.0
    }

    fn rank(&self, candidates: Vec<SlateCandidate>, ctx: &RankContext<'_>) -> Result<Vec<SlateCandidate>> {
        self.1.rank(candidates, ctx)
    }
}

pub struct LafbPolicy {
    name: String,
    debiaser: Arc<Debiaser>,
    config: DebiasConfig,
    weights: CombinerWeights,
}

impl Policy for LafbPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn rank(&self, candidates: Vec<SlateCandidate>, _ctx: &RankContext<'_>) -> Result<Vec<SlateCandidate>> {
        debias_slate(candidates, &self.debiaser, &self.config, &self.weights)
    }
}

pub struct LogPopPolicy {
    name: String,
    lambda: f64,
}

impl Policy for LogPopPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn rank(&self, candidates: Vec<SlateCandidate>, ctx: &RankContext<'_>) -> Result<Vec<SlateCandidate>> {
        rescore(candidates, |c| {
            log_pop_penalize(c.urps, ctx.popularity.item(c.item_id) as f64, self.lambda)
        })
    }
}

pub struct UserCentricPolicy {
    name: String,
    edges: BucketEdges,
    feature: usize,
    quotas: Quotas,
}

impl Policy for UserCentricPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn rank(&self, candidates: Vec<SlateCandidate>, ctx: &RankContext<'_>) -> Result<Vec<SlateCandidate>> {
        let ranked = rescore(candidates, |c| Ok(c.urps))?;
        let buckets = self.edges.buckets(self.feature);
        let strata: Vec<usize> = ranked
            .iter()
            .map(|c| Level::of_bucket(self.edges.bucket(self.feature, c.familiarity.values()[self.feature]), buckets).index())
            .collect();
        quota_rerank(ranked, &strata, &self.quotas, ctx.slate_size)
    }
}

pub struct ItemCentricPolicy {
    name: String,
    items: usize,
    quotas: Quotas,
    terciles: (f64, f64),
}

/// Tercile cut points of item exposure over the whole catalog.
pub fn popularity_terciles(popularity: &PopularityTable, items: usize) -> (f64, f64) {
    if items == 0 {
        return (0.0, 0.0);
    }
    let counts: Vec<f64> = (0..items)
        .map(|i| popularity.item(crate::data::ItemId(i as u32)) as f64)
        .collect();
    let sorted = sorted_copy(&counts);
    (quantile_sorted(&sorted, 1.0 / 3.0), quantile_sorted(&sorted, 2.0 / 3.0))
}

impl Policy for ItemCentricPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn begin_session(&mut self, popularity: &PopularityTable) -> Result<()> {
        self.terciles = popularity_terciles(popularity, self.items);
        Ok(())
    }

    fn rank(&self, candidates: Vec<SlateCandidate>, ctx: &RankContext<'_>) -> Result<Vec<SlateCandidate>> {
        let ranked = rescore(candidates, |c| Ok(c.urps))?;
        let strata: Vec<usize> = ranked
            .iter()
            .map(|c| crate::baselines::popularity_stratum(ctx.popularity.item(c.item_id) as f64, self.terciles))
            .collect();
        quota_rerank(ranked, &strata, &self.quotas, ctx.slate_size)
    }
}

pub struct StaticBoostPolicy {
    name: String,
    feature: usize,
    rule: BoostRule,
}

impl Policy for StaticBoostPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn rank(&self, candidates: Vec<SlateCandidate>, _ctx: &RankContext<'_>) -> Result<Vec<SlateCandidate>> {
        rescore(candidates, |c| Ok(static_boost(c.urps, c.familiarity.values()[self.feature], &self.rule)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucketizer::{AdjustmentTable, BucketizerConfig, CellStat};
    use crate::data::{CreatorId, FamiliarityVector, ItemId, UserId};
    use crate::simulator::simulator_schema;

    fn cand(item: u32, urps: f64, b: [f64; 4]) -> SlateCandidate {
        SlateCandidate::new(ItemId(item), CreatorId(item), urps, FamiliarityVector(b.to_vec()))
    }

    fn env<'a>(schema: &'a FeatureSchema, debias: &'a DebiasConfig, combiner: &'a CombinerWeights) -> PolicyEnv<'a> {
        PolicyEnv {
            schema,
            items: 10,
            debias,
            combiner,
            level_feature: "channel_watch_count",
            artifacts: None,
        }
    }

    fn ctx(pop: &PopularityTable) -> RankContext<'_> {
        RankContext {
            user: UserId(0),
            popularity: pop,
            slate_size: 2,
        }
    }

    #[test]
    fn specs_round_trip_through_json() {
        let arm = ArmSpec {
            name: "lafb".into(),
            policy: PolicySpec::Lafb {
                mode: Mode::Continuous,
                debias: None,
            },
        };
        let text = serde_json::to_string(&arm).unwrap();
        assert_eq!(text, r#"{"name":"lafb","policy":{"kind":"lafb","mode":"continuous"}}"#);
        assert_eq!(serde_json::from_str::<ArmSpec>(&text).unwrap(), arm);
    }

    #[test]
    fn lafb_without_estimators_is_a_config_error() {
        let (s, d, c) = (simulator_schema(), DebiasConfig::default(), CombinerWeights::default());
        let arm = ArmSpec {
            name: "x".into(),
            policy: PolicySpec::Lafb {
                mode: Mode::Discrete,
                debias: None,
            },
        };
        assert!(matches!(build_policy(&arm, &env(&s, &d, &c)), Err(Error::Config(_))));
    }

    #[test]
    fn boost_promotes_unwatched() {
        let (s, d, c) = (simulator_schema(), DebiasConfig::default(), CombinerWeights::default());
        let arm = ArmSpec {
            name: "boost".into(),
            policy: PolicySpec::StaticBoost { rule: BoostRule::default() },
        };
        let p = build_policy(&arm, &env(&s, &d, &c)).unwrap();
        let pop = PopularityTable::new();
        let out = p
            .rank(vec![cand(1, 2.5, [0.0, 2.0, 1.0, 0.0]), cand(2, 2.0, [0.0, 0.0, 365.0, 0.0])], &ctx(&pop))
            .unwrap();
        assert_eq!(out[0].item_id, ItemId(2));
        assert!((out[0].final_score.unwrap() - 2.6).abs() < 1e-12);
    }

    #[test]
    fn log_pop_demotes_popular() {
        let (s, d, c) = (simulator_schema(), DebiasConfig::default(), CombinerWeights::default());
        let arm = ArmSpec {
            name: "lp".into(),
            policy: PolicySpec::LogPop { lambda: 1.0 },
        };
        let p = build_policy(&arm, &env(&s, &d, &c)).unwrap();
        let mut pop = PopularityTable::new();
        for _ in 0..3 {
            pop.record(ItemId(1), CreatorId(1));
        }
        let out = p
            .rank(vec![cand(1, 4.0, [0.0; 4]), cand(2, 1.5, [0.0; 4])], &ctx(&pop))
            .unwrap();
        assert_eq!(out[0].item_id, ItemId(2));
        assert_eq!(out[1].final_score, Some(1.0));
    }

    #[test]
    fn item_centric_caps_popular_items() {
        let (s, d, c) = (simulator_schema(), DebiasConfig::default(), CombinerWeights::default());
        let arm = ArmSpec {
            name: "ic".into(),
            policy: PolicySpec::ItemCentric {
                quotas: Quotas(vec![0.5, 0.0, 0.5]),
            },
        };
        let mut e = env(&s, &d, &c);
        e.items = 20;
        let mut p = build_policy(&arm, &e).unwrap();
        let mut pop = PopularityTable::new();
        for i in 0..4u32 {
            for _ in 0..10 {
                pop.record(ItemId(i), CreatorId(i));
            }
        }
        p.begin_session(&pop).unwrap();
        // items 0..3 are in the top tercile; only one fits in a two-slot slate
        let out = p
            .rank(vec![cand(0, 9.0, [0.0; 4]), cand(1, 8.0, [0.0; 4]), cand(7, 1.0, [0.0; 4])], &ctx(&pop))
            .unwrap();
        let ids: Vec<u32> = out.iter().map(|c| c.item_id.0).collect();
        assert_eq!(ids, vec![0, 7, 1]);
    }

    #[test]
    fn user_centric_uses_level_of_channel_bucket() {
        let (s, d, c) = (simulator_schema(), DebiasConfig::default(), CombinerWeights::default());
        let edges = BucketEdges::from_cuts(vec![vec![1.0, 5.0], vec![1.0], vec![10.0], vec![0.5]]).unwrap();
        let table = AdjustmentTable::from_parts(
            String::new(),
            edges.clone(),
            BucketizerConfig::default(),
            1.0,
            vec![],
            vec![
                vec![CellStat { factor: 1.0, count: 0 }; 3],
                vec![CellStat { factor: 1.0, count: 0 }; 2],
                vec![CellStat { factor: 1.0, count: 0 }; 2],
                vec![CellStat { factor: 1.0, count: 0 }; 2],
            ],
        )
        .unwrap();
        let debiaser = Arc::new(Debiaser::Discrete(table));
        let artifacts = Artifacts {
            discrete: debiaser.clone(),
            continuous: debiaser,
            edges,
        };
        let mut e = env(&s, &d, &c);
        e.artifacts = Some(&artifacts);
        let arm = ArmSpec {
            name: "uc".into(),
            policy: PolicySpec::UserCentric {
                quotas: Quotas(vec![0.5, 0.0, 0.5]),
            },
        };
        let p = build_policy(&arm, &e).unwrap();
        let pop = PopularityTable::new();
        let out = p
            .rank(
                vec![cand(0, 9.0, [9.0, 0.0, 0.0, 0.0]), cand(1, 8.0, [7.0, 0.0, 0.0, 0.0]), cand(2, 1.0, [0.0, 0.0, 0.0, 0.0])],
                &ctx(&pop),
            )
            .unwrap();
        let ids: Vec<u32> = out.iter().map(|c| c.item_id.0).collect();
        assert_eq!(ids, vec![0, 2, 1]);
    }
}
