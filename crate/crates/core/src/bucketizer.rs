//! Discrete familiarity modeling: equal-mass bucket edges per feature, bucket
//! cells across features, and the empirical-mean adjustment table.
//!
//! A cell's factor is the mean URPS of the records that fall in it, shrunk
//! toward the global mean with `m` pseudo-counts and clipped to a band around
//! the global mean. Sparse cells back off to the per-feature marginals and
//! finally to the global mean, so [`AdjustmentTable::lookup`] is total.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{FamiliarityVector, FeatureSchema, Interaction};
use crate::error::{Error, Result};
use crate::stats::{quantile_sorted, sorted_copy};

/// Interior cut points per feature. A value equal to a cut point belongs to the
/// bucket above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketEdges {
    /// Buckets requested per feature.
    pub requested: usize,
    pub cuts: Vec<Vec<f64>>,
    /// Set for features whose distribution collapsed to a single bucket.
    pub degenerate: Vec<bool>,
}

impl BucketEdges {
    /// Builds edges from explicit cut points (must be strictly increasing per feature).
    pub fn from_cuts(cuts: Vec<Vec<f64>>) -> Result<Self> {
        for (f, c) in cuts.iter().enumerate() {
            if c.windows(2).any(|w| w[0] >= w[1]) || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "cut points of feature {f} are not strictly increasing"
                )));
            }
        }
        let requested = cuts.iter().map(|c| c.len() + 1).max().unwrap_or(1);
        let degenerate = cuts.iter().map(|c| c.is_empty()).collect();
        Ok(Self {
            requested,
            cuts,
            degenerate,
        })
    }

    pub fn arity(&self) -> usize {
        self.cuts.len()
    }

    /// Effective bucket count of a feature after tie collapse.
    pub fn buckets(&self, feature: usize) -> usize {
        self.cuts[feature].len() + 1
    }

    #[inline]
    pub fn bucket(&self, feature: usize, value: f64) -> usize {
        self.cuts[feature].partition_point(|&c| c <= value)
    }

    pub fn assign_cell(&self, b: &FamiliarityVector) -> Result<Vec<usize>> {
        self.check_arity(b)?;
        Ok(b
            .values()
            .iter()
            .enumerate()
            .map(|(f, &v)| self.bucket(f, v))
            .collect())
    }

    /// Mixed-radix code of the cell of `b`; arity must already be checked.
    #[inline]
    fn cell_code(&self, values: &[f64]) -> u64 {
        let mut code = 0u64;
        for (f, &v) in values.iter().enumerate() {
            code = code * self.buckets(f) as u64 + self.bucket(f, v) as u64;
        }
        code
    }

    fn decode(&self, mut code: u64) -> Vec<usize> {
        let mut cell = vec![0; self.arity()];
        for f in (0..self.arity()).rev() {
            let radix = self.buckets(f) as u64;
            cell[f] = (code % radix) as usize;
            code /= radix;
        }
        cell
    }

    fn encode(&self, cell: &[usize]) -> u64 {
        cell.iter()
            .enumerate()
            .fold(0u64, |acc, (f, &i)| acc * self.buckets(f) as u64 + i as u64)
    }

    fn check_arity(&self, b: &FamiliarityVector) -> Result<()> {
        if b.len() != self.arity() {
            return Err(Error::Arity {
                expected: self.arity(),
                found: b.len(),
            });
        }
        Ok(())
    }
}

/// Equal-mass cut points at the empirical `i/K` quantiles of each feature.
///
/// Cut points that coincide, or that sit at the feature minimum, are dropped, so
/// heavily tied features end up with fewer than `K` buckets.
pub fn fit_edges(log: &[Interaction], schema: &FeatureSchema, k: usize) -> Result<BucketEdges> {
    if log.is_empty() {
        return Err(Error::Empty("cannot fit bucket edges on an empty log"));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need K >= 2 buckets, got {k}")));
    }
    let n = schema.arity();
    let mut cuts = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    for f in 0..n {
        let column: Vec<f64> = log
            .iter()
            .map(|r| {
                r.familiarity.values().get(f).copied().ok_or(Error::Arity {
                    expected: n,
                    found: r.familiarity.len(),
                })
            })
            .collect::<Result<_>>()?;
        let feature_cuts = quantile_cuts(&column, k);
        if feature_cuts.is_empty() {
            log::warn!("feature `{}` is constant; using a single bucket", schema.names[f]);
        }
        degenerate.push(feature_cuts.is_empty());
        cuts.push(feature_cuts);
    }
    Ok(BucketEdges {
        requested: k,
        cuts,
        degenerate,
    })
}

/// Tie-collapsed interior quantile cuts of one column.
pub fn quantile_cuts(column: &[f64], k: usize) -> Vec<f64> {
    let sorted = sorted_copy(column);
    let min = sorted[0];
    let mut cuts: Vec<f64> = Vec::with_capacity(k - 1);
    for i in 1..k {
        let c = quantile_sorted(&sorted, i as f64 / k as f64);
        if c > min && cuts.last().is_none_or(|&last| c > last) {
            cuts.push(c);
        }
    }
    // a point mass covering every quantile still leaves the tail separable
    if cuts.is_empty() {
        if let Some(&next) = sorted.iter().find(|&&v| v > min) {
            cuts.push(next);
        }
    }
    cuts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub low: f64,
    pub high: f64,
}

impl Default for ClipBounds {
    fn default() -> Self {
        Self {
            low: 0.5,
            high: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BucketizerConfig {
    pub buckets: usize,
    pub smoothing: f64,
    /// `None` disables clipping.
    pub clip: Option<ClipBounds>,
    pub min_cell_count: u64,
}

impl Default for BucketizerConfig {
    fn default() -> Self {
        Self {
            buckets: 5,
            smoothing: 10.0,
            clip: Some(ClipBounds::default()),
            min_cell_count: 50,
        }
    }
}

impl BucketizerConfig {
    /// Plain empirical means: no smoothing, no clipping, every populated cell used.
    pub fn exact(buckets: usize) -> Self {
        Self {
            buckets,
            smoothing: 0.0,
            clip: None,
            min_cell_count: 1,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.buckets < 2 {
            return Err(Error::Config("bucketizer.buckets must be >= 2".into()));
        }
        if !(self.smoothing >= 0.0) {
            return Err(Error::Config("bucketizer.smoothing must be >= 0".into()));
        }
        if let Some(c) = self.clip {
            if !(c.low > 0.0 && c.low <= 1.0 && c.high >= 1.0) {
                return Err(Error::Config(
                    "bucketizer.clip needs 0 < low <= 1 <= high".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub factor: f64,
    pub count: u64,
}

/// How a factor was obtained by [`AdjustmentTable::lookup_traced`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupSource {
    Cell,
    Marginals,
    Global,
}

/// Per-cell debiasing factors estimated as smoothed, clipped empirical means.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentTable {
    pub schema_hash: String,
    pub edges: BucketEdges,
    pub config: BucketizerConfig,
    pub global_mean: f64,
    cells: BTreeMap<u64, CellStat>,
    /// `marginals[f][bucket]`
    marginals: Vec<Vec<CellStat>>,
}

impl AdjustmentTable {
    fn smoothed(&self, sum: f64, count: u64) -> Option<f64> {
        shrink(sum, count, self.config.smoothing, self.global_mean, self.config.clip)
    }

    /// Factor stored for a cell, or what an unseen cell would get under the smoothing prior.
    pub fn cell_factor(&self, cell: &[usize]) -> Option<f64> {
        let code = self.edges.encode(cell);
        match self.cells.get(&code) {
            Some(stat) => Some(stat.factor),
            None => self.smoothed(0.0, 0),
        }
    }

    pub fn cell_count(&self, cell: &[usize]) -> u64 {
        self.cells
            .get(&self.edges.encode(cell))
            .map_or(0, |s| s.count)
    }

    pub fn marginal(&self, feature: usize, bucket: usize) -> CellStat {
        self.marginals[feature][bucket]
    }

    /// Populated cells in code order.
    pub fn cells(&self) -> impl Iterator<Item = (Vec<usize>, CellStat)> + '_ {
        self.cells
            .iter()
            .map(|(&code, &stat)| (self.edges.decode(code), stat))
    }

    pub fn lookup(&self, b: &FamiliarityVector) -> Result<f64> {
        self.lookup_with(b, self.config.min_cell_count)
    }

    pub fn lookup_with(&self, b: &FamiliarityVector, min_cell_count: u64) -> Result<f64> {
        Ok(self.lookup_traced(b, min_cell_count)?.0)
    }

    /// Cell factor when the cell holds at least `min_cell_count` records, else the
    /// geometric mean of the marginal factors that do, else the global mean.
    pub fn lookup_traced(
        &self,
        b: &FamiliarityVector,
        min_cell_count: u64,
    ) -> Result<(f64, LookupSource)> {
        self.edges.check_arity(b)?;
        let values = b.values();
        let min_count = min_cell_count.max(1);
        if let Some(stat) = self.cells.get(&self.edges.cell_code(values)) {
            if stat.count >= min_count {
                return Ok((stat.factor, LookupSource::Cell));
            }
        }
        let mut log_sum = 0.0;
        let mut used = 0usize;
        for (f, &v) in values.iter().enumerate() {
            let stat = self.marginals[f][self.edges.bucket(f, v)];
            if stat.count >= min_count {
                log_sum += stat.factor.ln();
                used += 1;
            }
        }
        if used > 0 {
            return Ok(((log_sum / used as f64).exp(), LookupSource::Marginals));
        }
        Ok((self.global_mean, LookupSource::Global))
    }

    /// Builds a table from already-computed statistics; used by tests and deserialization.
    pub fn from_parts(
        schema_hash: String,
        edges: BucketEdges,
        config: BucketizerConfig,
        global_mean: f64,
        cells: Vec<(Vec<usize>, CellStat)>,
        marginals: Vec<Vec<CellStat>>,
    ) -> Result<Self> {
        if !(global_mean > 0.0 && global_mean.is_finite()) {
            return Err(Error::NonPositive {
                what: "global mean",
                value: global_mean,
            });
        }
        if marginals.len() != edges.arity()
            || marginals
                .iter()
                .enumerate()
                .any(|(f, m)| m.len() != edges.buckets(f))
        {
            return Err(Error::InvalidArgument(
                "marginal tables do not match bucket edges".into(),
            ));
        }
        let mut map = BTreeMap::new();
        for (cell, stat) in cells {
            if cell.len() != edges.arity()
                || cell.iter().enumerate().any(|(f, &i)| i >= edges.buckets(f))
            {
                return Err(Error::InvalidArgument(format!(
                    "cell {cell:?} is outside the bucket grid"
                )));
            }
            if !(stat.factor > 0.0 && stat.factor.is_finite()) {
                return Err(Error::NonPositive {
                    what: "cell factor",
                    value: stat.factor,
                });
            }
            map.insert(edges.encode(&cell), stat);
        }
        Ok(Self {
            schema_hash,
            edges,
            config,
            global_mean,
            cells: map,
            marginals,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TableDoc {
            schema_hash: self.schema_hash.clone(),
            edges: self.edges.clone(),
            config: self.config.clone(),
            global_mean: self.global_mean,
            cells: self
                .cells()
                .map(|(cell, stat)| CellDoc {
                    cell,
                    factor: stat.factor,
                    count: stat.count,
                })
                .collect(),
            marginals: self.marginals.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TableDoc = serde_json::from_str(text)?;
        Self::from_parts(
            doc.schema_hash,
            doc.edges,
            doc.config,
            doc.global_mean,
            doc.cells
                .into_iter()
                .map(|c| {
                    (
                        c.cell,
                        CellStat {
                            factor: c.factor,
                            count: c.count,
                        },
                    )
                })
                .collect(),
            doc.marginals,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct CellDoc {
    cell: Vec<usize>,
    factor: f64,
    count: u64,
}

#[derive(Serialize, Deserialize)]
struct TableDoc {
    schema_hash: String,
    edges: BucketEdges,
    config: BucketizerConfig,
    global_mean: f64,
    cells: Vec<CellDoc>,
    marginals: Vec<Vec<CellStat>>,
}

/// `(sum + m * prior) / (count + m)`, clipped into `clip * prior`. `None` for an
/// empty bucket without a prior.
fn shrink(sum: f64, count: u64, m: f64, prior: f64, clip: Option<ClipBounds>) -> Option<f64> {
    let denom = count as f64 + m;
    if denom <= 0.0 {
        return None;
    }
    let raw = (sum + m * prior) / denom;
    Some(match clip {
        Some(c) => raw.clamp(c.low * prior, c.high * prior),
        None => raw,
    })
}

/// Fits the adjustment table on a validated log.
pub fn fit_table(
    log: &[Interaction],
    schema: &FeatureSchema,
    edges: &BucketEdges,
    config: &BucketizerConfig,
) -> Result<AdjustmentTable> {
    if log.is_empty() {
        return Err(Error::Empty("cannot fit an adjustment table on an empty log"));
    }
    config.check()?;
    if edges.arity() != schema.arity() {
        return Err(Error::Arity {
            expected: schema.arity(),
            found: edges.arity(),
        });
    }
    let global_mean = log.iter().map(|r| r.urps).sum::<f64>() / log.len() as f64;

    let mut cell_sums: BTreeMap<u64, (f64, u64)> = BTreeMap::new();
    let mut marginal_sums: Vec<Vec<(f64, u64)>> = (0..edges.arity())
        .map(|f| vec![(0.0, 0); edges.buckets(f)])
        .collect();
    for rec in log {
        edges.check_arity(&rec.familiarity)?;
        let values = rec.familiarity.values();
        let entry = cell_sums.entry(edges.cell_code(values)).or_insert((0.0, 0));
        entry.0 += rec.urps;
        entry.1 += 1;
        for (f, &v) in values.iter().enumerate() {
            let m = &mut marginal_sums[f][edges.bucket(f, v)];
            m.0 += rec.urps;
            m.1 += 1;
        }
    }

    let stat = |(sum, count): (f64, u64)| CellStat {
        factor: shrink(sum, count, config.smoothing, global_mean, config.clip)
            .unwrap_or(global_mean),
        count,
    };
    let cells = cell_sums
        .into_iter()
        .map(|(code, acc)| (code, stat(acc)))
        .collect();
    let marginals = marginal_sums
        .into_iter()
        .map(|row| row.into_iter().map(stat).collect())
        .collect();

    Ok(AdjustmentTable {
        schema_hash: schema.hash(),
        edges: edges.clone(),
        config: config.clone(),
        global_mean,
        cells,
        marginals,
    })
}
