//! Popularity- and rule-based remedies used as comparison arms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `s / (1 + popularity)^lambda`.
pub fn log_pop_penalize(s: f64, popularity: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("log-pop exponent must be non-negative, got {lambda}")));
    }
    if !(popularity >= 0.0) {
        return Err(Error::InvalidArgument(format!("popularity must be non-negative, got {popularity}")));
    }
    Ok(s / (1.0 + popularity).powf(lambda))
}

/// Per-stratum share of the slate, indexed by stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Quotas(pub Vec<f64>);

impl Default for Quotas {
    /// Low, medium, high.
    fn default() -> Self {
        Self(vec![0.5, 0.3, 0.2])
    }
}

impl Quotas {
    pub fn check(&self) -> Result<()> {
        if self.0.iter().any(|q| !(*q >= 0.0)) {
            return Err(Error::InvalidArgument("quotas must be non-negative".into()));
        }
        if self.0.iter().sum::<f64>() < 1.0 - 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "quotas sum to {}, below 1",
                self.0.iter().sum::<f64>()
            )));
        }
        Ok(())
    }
}

/// Greedy quota admission over a slate already sorted by descending score.
///
/// A candidate is admitted while its stratum holds fewer than `quota * positions`
/// admitted items and fewer than `positions` items are admitted overall. Deferred
/// candidates follow in their original order, so the output is a permutation.
pub fn quota_rerank<T>(slate: Vec<T>, strata: &[usize], quotas: &Quotas, positions: usize) -> Result<Vec<T>> {
    quotas.check()?;
    if strata.len() != slate.len() {
        return Err(Error::Arity {
            expected: slate.len(),
            found: strata.len(),
        });
    }
    if let Some(&s) = strata.iter().find(|&&s| s >= quotas.0.len()) {
        return Err(Error::InvalidArgument(format!("stratum {s} has no quota")));
    }
    let budget: Vec<f64> = quotas.0.iter().map(|q| q * positions as f64).collect();
    let mut admitted_per = vec![0usize; quotas.0.len()];
    let mut admitted = Vec::with_capacity(slate.len());
    let mut deferred = Vec::new();
    for (item, &s) in slate.into_iter().zip(strata) {
        if admitted.len() < positions && (admitted_per[s] as f64) < budget[s] {
            admitted_per[s] += 1;
            admitted.push(item);
        } else {
            deferred.push(item);
        }
    }
    admitted.extend(deferred);
    Ok(admitted)
}

/// Re-ranks by the user's own familiarity level of each candidate (0 low, 1 medium, 2 high).
pub fn user_centric_rerank<T>(slate: Vec<T>, familiarity_levels: &[usize], quotas: &Quotas, positions: usize) -> Result<Vec<T>> {
    quota_rerank(slate, familiarity_levels, quotas, positions)
}

/// Tercile of an item's global popularity: 0 below the first cut, 2 above the second.
pub fn popularity_stratum(popularity: f64, terciles: (f64, f64)) -> usize {
    if popularity <= terciles.0 {
        0
    } else if popularity <= terciles.1 {
        1
    } else {
        2
    }
}

/// Re-ranks by global popularity tercile of each candidate.
pub fn item_centric_rerank<T>(
    slate: Vec<T>,
    popularity: &[f64],
    terciles: (f64, f64),
    quotas: &Quotas,
    positions: usize,
) -> Result<Vec<T>> {
    let strata: Vec<usize> = popularity.iter().map(|&p| popularity_stratum(p, terciles)).collect();
    quota_rerank(slate, &strata, quotas, positions)
}

/// Multiplies the score when a single feature is below a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostRule {
    pub feature: String,
    pub threshold: f64,
    pub multiplier: f64,
}

impl Default for BoostRule {
    fn default() -> Self {
        Self {
            feature: "item_watch_count".into(),
            threshold: 1.0,
            multiplier: 1.3,
        }
    }
}

pub fn static_boost(s: f64, value: f64, rule: &BoostRule) -> f64 {
    if value < rule.threshold {
        s * rule.multiplier
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_pop_examples() {
        assert_eq!(log_pop_penalize(4.0, 0.0, 0.7).unwrap(), 4.0);
        assert_eq!(log_pop_penalize(4.0, 9.0, 0.0).unwrap(), 4.0);
        assert_eq!(log_pop_penalize(4.0, 3.0, 1.0).unwrap(), 1.0);
        assert!(log_pop_penalize(4.0, 3.0, -0.1).is_err());
    }

    #[test]
    fn log_pop_ignores_the_user() {
        let pops = [0.0, 4.0, 12.0];
        let scores = [1.5, 2.0, 0.7];
        let penalize = || -> Vec<f64> {
            scores.iter().zip(&pops).map(|(&s, &p)| log_pop_penalize(s, p, 0.5).unwrap()).collect()
        };
        assert_eq!(penalize(), penalize());
    }

    #[test]
    fn permissive_quota_is_identity() {
        let slate = vec!["a", "b", "c", "d"];
        let out = quota_rerank(slate.clone(), &[2, 0, 2, 1], &Quotas(vec![1.0, 1.0, 1.0]), 4).unwrap();
        assert_eq!(out, slate);
    }

    #[test]
    fn greedy_trace_all_high() {
        // budget for "high" is 0.5 * 4 = 2: a and b admitted, c and d deferred
        let out = user_centric_rerank(vec!["a", "b", "c", "d"], &[2, 2, 2, 2], &Quotas(vec![0.3, 0.2, 0.5]), 4).unwrap();
        assert_eq!(out, vec!["a", "b", "c", "d"]);
        // a lower-scored low item jumps the deferred high ones
        let out = user_centric_rerank(vec!["a", "b", "c", "d"], &[2, 2, 2, 0], &Quotas(vec![0.3, 0.2, 0.5]), 4).unwrap();
        assert_eq!(out, vec!["a", "b", "d", "c"]);
    }

    #[test]
    fn item_centric_mirrors() {
        let t = (1.0, 5.0);
        let slate = vec![1, 2, 3, 4];
        assert_eq!(
            item_centric_rerank(slate.clone(), &[9.0, 0.0, 3.0, 9.0], t, &Quotas(vec![1.0, 1.0, 1.0]), 4).unwrap(),
            slate
        );
        assert_eq!(
            item_centric_rerank(slate, &[9.0, 9.0, 9.0, 0.0], t, &Quotas(vec![0.3, 0.2, 0.5]), 4).unwrap(),
            vec![1, 2, 4, 3]
        );
        let empty: Vec<u8> = vec![];
        assert!(item_centric_rerank(empty, &[], t, &Quotas::default(), 4).unwrap().is_empty());
    }

    #[test]
    fn quotas_below_one_rejected() {
        assert!(quota_rerank(vec![1], &[0], &Quotas(vec![0.2, 0.2, 0.2]), 1).is_err());
        let empty: Vec<u8> = vec![];
        assert!(user_centric_rerank(empty, &[], &Quotas::default(), 3).unwrap().is_empty());
    }

    #[test]
    fn static_boost_examples() {
        let rule = BoostRule::default();
        assert_eq!(static_boost(2.0, 0.0, &BoostRule { multiplier: 1.0, ..rule.clone() }), 2.0);
        assert!((static_boost(2.0, 0.0, &rule) - 2.6).abs() < 1e-12);
        assert_eq!(static_boost(2.0, 3.0, &rule), 2.0);
    }

    proptest! {
        #[test]
        fn rerank_is_a_permutation(
            strata in prop::collection::vec(0usize..3, 0..40),
            q in prop::collection::vec(0.0f64..1.0, 3),
            positions in 0usize..20,
        ) {
            let total: f64 = q.iter().sum();
            let quotas = Quotas(q.iter().map(|x| x / total.max(1e-9) + 0.01).collect());
            let slate: Vec<usize> = (0..strata.len()).collect();
            let mut out = quota_rerank(slate.clone(), &strata, &quotas, positions).unwrap();
            out.sort();
            prop_assert_eq!(out, slate);
        }

        #[test]
        fn scores_stay_positive(s in 1e-6f64..1e6, pop in 0.0f64..1e7, lambda in 0.0f64..3.0) {
            prop_assert!(log_pop_penalize(s, pop, lambda).unwrap() > 0.0);
            prop_assert!(static_boost(s, pop, &BoostRule::default()) > 0.0);
        }
    }
}
