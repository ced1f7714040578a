//! Interaction log model, schema handling and JSON Lines persistence.
//!
//! Every record carries the URPS `s` for a (user, item) pair together with the
//! familiarity features `b` the debiaser conditions on. Feature order is owned by
//! [`FeatureSchema`]; a record's familiarity vector is positional.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, RecordError, Result, Violation};

macro_rules! id_type {
    ($name:ident) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }
    };
}

id_type!(UserId);
id_type!(ItemId);
id_type!(CreatorId);

/// The familiarity features `b = (b1, ..., bn)` of one (user, item) pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FamiliarityVector(pub Vec<f64>);

impl FamiliarityVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Count,
    Recency,
    Affinity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monotonicity {
    Increasing,
    Decreasing,
}

/// Names, kinds and monotonicity hints of the familiarity features in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub names: Vec<String>,
    pub kinds: Vec<FeatureKind>,
    pub monotonicity: Vec<Monotonicity>,
}

impl FeatureSchema {
    pub fn new(
        names: Vec<String>,
        kinds: Vec<FeatureKind>,
        monotonicity: Vec<Monotonicity>,
    ) -> Result<Self> {
        let schema = Self {
            names,
            kinds,
            monotonicity,
        };
        schema.check()?;
        Ok(schema)
    }

    /// Checks the schema invariants. Deserialized schemas should go through this.
    pub fn check(&self) -> Result<()> {
        if self.names.is_empty() {
            return Err(Error::Schema("schema needs at least one feature".into()));
        }
        if self.kinds.len() != self.names.len() || self.monotonicity.len() != self.names.len() {
            return Err(Error::Schema(format!(
                "names/kinds/monotonicity lengths differ ({}/{}/{})",
                self.names.len(),
                self.kinds.len(),
                self.monotonicity.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &self.names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name `{name}`")));
            }
        }
        Ok(())
    }

    pub fn arity(&self) -> usize {
        self.names.len()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Stable content hash used to tie fitted artifacts to the schema they were fit on.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: FeatureSchema = serde_json::from_str(text)?;
        schema.check()?;
        Ok(schema)
    }
}

/// One logged user-item event.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub creator_id: CreatorId,
    /// Seconds since epoch.
    pub timestamp: i64,
    /// Seconds watched.
    pub watch_time: f64,
    pub urps: f64,
    pub familiarity: FamiliarityVector,
}

fn check_record(rec: &Interaction, arity: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    if rec.familiarity.len() != arity {
        out.push(Violation::ArityMismatch {
            expected: arity,
            found: rec.familiarity.len(),
        });
    }
    if let Some((feature, &value)) = rec
        .familiarity
        .values()
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
    {
        out.push(Violation::NonFiniteFeature { feature, value });
    }
    if !rec.urps.is_finite() {
        out.push(Violation::NonFiniteField("urps"));
    } else if rec.urps <= 0.0 {
        out.push(Violation::NonPositiveUrps(rec.urps));
    }
    if !rec.watch_time.is_finite() {
        out.push(Violation::NonFiniteField("watch_time"));
    } else if rec.watch_time < 0.0 {
        out.push(Violation::NegativeWatchTime(rec.watch_time));
    }
    if rec.timestamp <= 0 {
        out.push(Violation::NonPositiveTimestamp(rec.timestamp));
    }
    out
}

/// Returns the log unchanged when every record satisfies the type invariants,
/// otherwise every violation in record order. Records are never dropped.
pub fn validate_log(
    interactions: Vec<Interaction>,
    schema: &FeatureSchema,
) -> std::result::Result<Vec<Interaction>, Vec<RecordError>> {
    let arity = schema.arity();
    let errors: Vec<RecordError> = interactions
        .iter()
        .enumerate()
        .flat_map(|(index, rec)| {
            check_record(rec, arity)
                .into_iter()
                .map(move |violation| RecordError { index, violation })
        })
        .collect();
    if errors.is_empty() {
        Ok(interactions)
    } else {
        Err(errors)
    }
}

/// Cumulative exposure counts per item and per creator, indexed densely by id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PopularityTable {
    items: Vec<u64>,
    creators: Vec<u64>,
}

impl PopularityTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, item: ItemId, creator: CreatorId) {
        bump(&mut self.items, item.index());
        bump(&mut self.creators, creator.index());
    }

    pub fn item(&self, item: ItemId) -> u64 {
        self.items.get(item.index()).copied().unwrap_or(0)
    }

    pub fn creator(&self, creator: CreatorId) -> u64 {
        self.creators.get(creator.index()).copied().unwrap_or(0)
    }

    /// Item counts, densely indexed; ids past the end have count zero.
    pub fn item_counts(&self) -> &[u64] {
        &self.items
    }

    pub fn creator_counts(&self) -> &[u64] {
        &self.creators
    }

    pub fn is_empty(&self) -> bool {
        self.items.iter().all(|&c| c == 0)
    }

    pub fn total(&self) -> u64 {
        self.items.iter().sum()
    }

    pub fn nonzero_items(&self) -> BTreeMap<ItemId, u64> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (ItemId(i as u32), c))
            .collect()
    }
}

fn bump(counts: &mut Vec<u64>, idx: usize) {
    if counts.len() <= idx {
        counts.resize(idx + 1, 0);
    }
    counts[idx] += 1;
}

pub fn compute_popularity(interactions: &[Interaction]) -> PopularityTable {
    let mut table = PopularityTable::new();
    for rec in interactions {
        table.record(rec.item_id, rec.creator_id);
    }
    table
}

struct FamiliarityMap<'a> {
    names: &'a [String],
    values: &'a [f64],
}

impl Serialize for FamiliarityMap<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.values.len()))?;
        for (name, value) in self.names.iter().zip(self.values) {
            map.serialize_entry(name, value)?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    user_id: UserId,
    item_id: ItemId,
    creator_id: CreatorId,
    timestamp: i64,
    watch_time: f64,
    urps: f64,
    familiarity: FamiliarityMap<'a>,
}

#[derive(Deserialize)]
struct RecordIn {
    user_id: UserId,
    item_id: ItemId,
    creator_id: CreatorId,
    timestamp: i64,
    watch_time: f64,
    urps: f64,
    familiarity: BTreeMap<String, f64>,
}

/// Orders a keyed familiarity object by the schema; the key set must match exactly.
pub(crate) fn familiarity_from_map(
    map: &BTreeMap<String, f64>,
    schema: &FeatureSchema,
) -> std::result::Result<FamiliarityVector, String> {
    let missing: Vec<&str> = schema
        .names
        .iter()
        .filter(|n| !map.contains_key(n.as_str()))
        .map(String::as_str)
        .collect();
    let unknown: Vec<&str> = map
        .keys()
        .filter(|k| schema.position(k).is_none())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(format!(
            "familiarity keys do not match schema (missing {missing:?}, unknown {unknown:?})"
        ));
    }
    Ok(FamiliarityVector(
        schema.names.iter().map(|n| map[n.as_str()]).collect(),
    ))
}

pub fn write_interaction<W: Write>(
    mut out: W,
    rec: &Interaction,
    schema: &FeatureSchema,
) -> Result<()> {
    let row = RecordOut {
        user_id: rec.user_id,
        item_id: rec.item_id,
        creator_id: rec.creator_id,
        timestamp: rec.timestamp,
        watch_time: rec.watch_time,
        urps: rec.urps,
        familiarity: FamiliarityMap {
            names: &schema.names,
            values: rec.familiarity.values(),
        },
    };
    serde_json::to_writer(&mut out, &row)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_log<W: Write>(mut out: W, log: &[Interaction], schema: &FeatureSchema) -> Result<()> {
    for rec in log {
        write_interaction(&mut out, rec, schema)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a JSON Lines log. Blank lines are skipped; records are not validated.
pub fn read_log<R: BufRead>(input: R, schema: &FeatureSchema) -> Result<Vec<Interaction>> {
    let mut log = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordIn = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        log.push(Interaction {
            user_id: raw.user_id,
            item_id: raw.item_id,
            creator_id: raw.creator_id,
            timestamp: raw.timestamp,
            watch_time: raw.watch_time,
            urps: raw.urps,
            familiarity: familiarity_from_map(&raw.familiarity, schema)
                .map_err(|message| Error::Parse { line: i + 1, message })?,
        });
    }
    Ok(log)
}

/// Reads then validates, mapping record errors into [`Error::Validation`].
pub fn load_log<R: BufRead>(input: R, schema: &FeatureSchema) -> Result<Vec<Interaction>> {
    validate_log(read_log(input, schema)?, schema).map_err(Error::Validation)
}
