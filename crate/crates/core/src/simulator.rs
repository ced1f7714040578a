//! Synthetic closed-loop universe with a declared familiarity-inflation process.
//!
//! Observed URPS is `q(u, v) * g(b) * noise`, where `q` is a latent-factor
//! quality, `g` the multiplicative inflation of the familiarity features and the
//! noise a lognormal factor. Consumption feeds back into the familiarity state,
//! so ranking policies change the features later observations are drawn at.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    CreatorId, FamiliarityVector, FeatureKind, FeatureSchema, Interaction, ItemId, Monotonicity,
    PopularityTable, UserId,
};
use crate::debias::{by_score_desc, SlateCandidate};
use crate::error::{Error, Result};
use crate::stats::mix_seed;

pub const DAY: i64 = 86_400;
/// Timestamp of session 0.
pub const EPOCH: i64 = 1_700_000_000;

pub const CHANNEL_WATCH_COUNT: &str = "channel_watch_count";
pub const ITEM_WATCH_COUNT: &str = "item_watch_count";
pub const DAYS_SINCE_LAST_WATCH: &str = "days_since_last_watch";
pub const CREATOR_AFFINITY: &str = "creator_affinity";

const STREAM_POOL: u64 = 1;
const STREAM_WATCH: u64 = 2;
const STREAM_ORACLE: u64 = 3;

/// The four familiarity features the simulator emits, in vector order.
pub fn simulator_schema() -> FeatureSchema {
    FeatureSchema::new(
        vec![
            CHANNEL_WATCH_COUNT.into(),
            ITEM_WATCH_COUNT.into(),
            DAYS_SINCE_LAST_WATCH.into(),
            CREATOR_AFFINITY.into(),
        ],
        vec![
            FeatureKind::Count,
            FeatureKind::Count,
            FeatureKind::Recency,
            FeatureKind::Affinity,
        ],
        vec![
            Monotonicity::Increasing,
            Monotonicity::Increasing,
            Monotonicity::Decreasing,
            Monotonicity::Increasing,
        ],
    )
    .expect("static schema is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UniverseConfig {
    pub users: usize,
    pub items: usize,
    pub creators: usize,
    pub latent_dim: usize,
    /// Creator size weights fall off as `rank^-exponent`.
    pub creator_exponent: f64,
    /// Most recently joined fraction of creators, eligible as emerging.
    pub recent_fraction: f64,
    pub seed: u64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            users: 2_000,
            items: 20_000,
            creators: 2_000,
            latent_dim: 8,
            creator_exponent: 1.2,
            recent_fraction: 0.2,
            seed: 7,
        }
    }
}

impl UniverseConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("universe: {m}")));
        if self.users == 0 || self.items == 0 || self.creators == 0 || self.latent_dim == 0 {
            return bad("users, items, creators and latent_dim must be positive");
        }
        if self.creators > self.items {
            return bad("every creator needs at least one item");
        }
        if self.items > u32::MAX as usize || self.users > u32::MAX as usize {
            return bad("ids must fit in 32 bits");
        }
        if !(0.0..=1.0).contains(&self.recent_fraction) {
            return bad("recent_fraction must lie in [0, 1]");
        }
        if !(self.creator_exponent >= 0.0) {
            return bad("creator_exponent must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    pub config: UniverseConfig,
    user_vectors: Vec<f64>,
    item_vectors: Vec<f64>,
    item_creator: Vec<CreatorId>,
    /// Join day relative to session 0; negative means before the first session.
    creator_join_day: Vec<f64>,
    creator_recent: Vec<bool>,
}

/// `exp(<u, v> / sqrt(d))`.
pub fn true_quality(user: &[f64], item: &[f64]) -> f64 {
    let dot: f64 = user.iter().zip(item).map(|(a, b)| a * b).sum();
    (dot / (user.len() as f64).sqrt()).exp()
}

impl Universe {
    pub fn generate(config: &UniverseConfig) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.latent_dim;
        let normal_vec = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n * d).map(|_| rng.sample(StandardNormal)).collect()
        };
        let user_vectors = normal_vec(config.users, &mut rng);
        let item_vectors = normal_vec(config.items, &mut rng);

        let weights: Vec<f64> = (1..=config.creators)
            .map(|r| (r as f64).powf(-config.creator_exponent))
            .collect();
        let sizes = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
        let mut item_creator: Vec<CreatorId> =
            (0..config.creators).map(|c| CreatorId(c as u32)).collect();
        item_creator.extend((config.creators..config.items).map(|_| CreatorId(sizes.sample(&mut rng) as u32)));

        let creator_join_day: Vec<f64> = (0..config.creators)
            .map(|_| -rng.random_range(0.0..365.0))
            .collect();
        let mut by_recency: Vec<usize> = (0..config.creators).collect();
        by_recency.sort_by(|&a, &b| creator_join_day[b].total_cmp(&creator_join_day[a]).then(a.cmp(&b)));
        let recent_count = (config.recent_fraction * config.creators as f64).round() as usize;
        let mut creator_recent = vec![false; config.creators];
        for &c in &by_recency[..recent_count] {
            creator_recent[c] = true;
        }

        Ok(Self {
            config: config.clone(),
            user_vectors,
            item_vectors,
            item_creator,
            creator_join_day,
            creator_recent,
        })
    }

    pub fn users(&self) -> usize {
        self.config.users
    }

    pub fn items(&self) -> usize {
        self.config.items
    }

    pub fn creators(&self) -> usize {
        self.config.creators
    }

    pub fn user_vector(&self, u: UserId) -> &[f64] {
        let d = self.config.latent_dim;
        &self.user_vectors[u.index() * d..(u.index() + 1) * d]
    }

    pub fn item_vector(&self, v: ItemId) -> &[f64] {
        let d = self.config.latent_dim;
        &self.item_vectors[v.index() * d..(v.index() + 1) * d]
    }

    pub fn quality(&self, u: UserId, v: ItemId) -> f64 {
        true_quality(self.user_vector(u), self.item_vector(v))
    }

    pub fn creator_of(&self, v: ItemId) -> CreatorId {
        self.item_creator[v.index()]
    }

    pub fn creator_join_day(&self, c: CreatorId) -> f64 {
        self.creator_join_day[c.index()]
    }

    pub fn recent_creators(&self) -> &[bool] {
        &self.creator_recent
    }

    /// Mean quality over every (user, item) pair.
    pub fn mean_quality(&self) -> f64 {
        let mut total = 0.0;
        for u in 0..self.users() {
            let uv = self.user_vector(UserId(u as u32));
            let row: f64 = (0..self.items())
                .map(|v| true_quality(uv, self.item_vector(ItemId(v as u32))))
                .sum();
            total += row;
        }
        total / (self.users() * self.items()) as f64
    }

    pub fn manifest(&self) -> UniverseManifest {
        let mut hasher = Sha256::new();
        for x in self.user_vectors.iter().chain(&self.item_vectors) {
            hasher.update(x.to_le_bytes());
        }
        for c in &self.item_creator {
            hasher.update(c.0.to_le_bytes());
        }
        let mut sizes = vec![0usize; self.creators()];
        for c in &self.item_creator {
            sizes[c.index()] += 1;
        }
        UniverseManifest {
            config: self.config.clone(),
            largest_creator_items: sizes.iter().copied().max().unwrap_or(0),
            single_item_creators: sizes.iter().filter(|&&s| s == 1).count(),
            recent_creator_ids: (0..self.creators() as u32).filter(|&c| self.creator_recent[c as usize]).collect(),
            content_sha256: hex::encode(hasher.finalize()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniverseManifest {
    pub config: UniverseConfig,
    pub largest_creator_items: usize,
    pub single_item_creators: usize,
    pub recent_creator_ids: Vec<u32>,
    pub content_sha256: String,
}

impl UniverseManifest {
    /// Recent-creator flags indexed by creator id.
    pub fn recent_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.config.creators];
        for &c in &self.recent_creator_ids {
            if let Some(f) = flags.get_mut(c as usize) {
                *f = true;
            }
        }
        flags
    }
}

/// `g(b) = prod_i (1 + alpha_i * h_i(b_i))` with lognormal observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InflationSpec {
    pub count_alpha: f64,
    pub recency_alpha: f64,
    pub affinity_alpha: f64,
    pub recency_tau_days: f64,
    pub noise_sigma: f64,
}

impl Default for InflationSpec {
    fn default() -> Self {
        Self {
            count_alpha: 0.6,
            recency_alpha: 0.4,
            affinity_alpha: 0.3,
            recency_tau_days: 7.0,
            noise_sigma: 0.2,
        }
    }
}

impl InflationSpec {
    pub fn check(&self) -> Result<()> {
        if !(self.recency_tau_days > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(
                "inflation: recency_tau_days must be positive and noise_sigma non-negative".into(),
            ));
        }
        if ![self.count_alpha, self.recency_alpha, self.affinity_alpha]
            .iter()
            .all(|a| a.is_finite())
        {
            return Err(Error::Config("inflation: alphas must be finite".into()));
        }
        Ok(())
    }

    pub fn alpha(&self, kind: FeatureKind) -> f64 {
        match kind {
            FeatureKind::Count => self.count_alpha,
            FeatureKind::Recency => self.recency_alpha,
            FeatureKind::Affinity => self.affinity_alpha,
        }
    }

    pub fn h(&self, kind: FeatureKind, value: f64) -> f64 {
        match kind {
            FeatureKind::Count => value.max(0.0).ln_1p(),
            FeatureKind::Recency => (-value.max(0.0) / self.recency_tau_days).exp(),
            FeatureKind::Affinity => value,
        }
    }

    pub fn inflation(&self, b: &[f64], kinds: &[FeatureKind]) -> f64 {
        b.iter()
            .zip(kinds)
            .map(|(&v, &k)| 1.0 + self.alpha(k) * self.h(k, v))
            .product()
    }

    /// `E[noise] = exp(sigma^2 / 2)`.
    pub fn noise_mean(&self) -> f64 {
        (self.noise_sigma * self.noise_sigma / 2.0).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WatchTimeModel {
    /// Proportional to true quality; inflation does not lengthen watches.
    Quality,
    /// Proportional to the observed URPS.
    Urps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WatchTimeConfig {
    pub model: WatchTimeModel,
    pub scale_seconds: f64,
    /// Spread of the mean-one lognormal watch factor.
    pub sigma: f64,
}

impl Default for WatchTimeConfig {
    fn default() -> Self {
        Self {
            model: WatchTimeModel::Quality,
            scale_seconds: 60.0,
            sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub pool_size: usize,
    pub slate_size: usize,
    pub consume_top_k: usize,
    /// Per-day decay of creator affinity weights.
    pub affinity_decay: f64,
    /// Recency reported for never-watched pairs.
    pub recency_cap_days: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            pool_size: 200,
            slate_size: 10,
            consume_top_k: 10,
            affinity_decay: 0.9,
            recency_cap_days: 365.0,
        }
    }
}

impl SessionConfig {
    pub fn check(&self, items: usize) -> Result<()> {
        if self.slate_size > self.pool_size {
            return Err(Error::InvalidArgument(format!(
                "slate size {} exceeds pool size {}",
                self.slate_size, self.pool_size
            )));
        }
        if self.pool_size > items {
            return Err(Error::InvalidArgument(format!(
                "pool size {} exceeds catalog of {items} items",
                self.pool_size
            )));
        }
        if self.consume_top_k > self.slate_size {
            return Err(Error::InvalidArgument(format!(
                "consume_top_k {} exceeds slate size {}",
                self.consume_top_k, self.slate_size
            )));
        }
        if !(self.affinity_decay > 0.0 && self.affinity_decay <= 1.0) || !(self.recency_cap_days > 0.0) {
            return Err(Error::Config(
                "session: affinity_decay must lie in (0, 1] and recency_cap_days be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything the simulator needs besides the universe itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SimulatorConfig {
    pub inflation: InflationSpec,
    pub session: SessionConfig,
    pub watch_time: WatchTimeConfig,
}

impl SimulatorConfig {
    pub fn check(&self, items: usize) -> Result<()> {
        self.inflation.check()?;
        self.session.check(items)?;
        if !(self.watch_time.scale_seconds > 0.0) || !(self.watch_time.sigma >= 0.0) {
            return Err(Error::Config("watch_time: scale must be positive, sigma non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemHistory {
    pub count: u32,
    pub last_timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CreatorHistory {
    pub count: u32,
    /// Sum of `decay^-day` over this creator's watches.
    pub weight: f64,
}

/// One user's familiarity state. Maps are only probed, never iterated into output.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UserHistory {
    pub items: HashMap<u32, ItemHistory>,
    pub creators: HashMap<u32, CreatorHistory>,
    pub total_weight: f64,
}

impl UserHistory {
    /// Exponentially decayed share of this user's watches that went to `creator`.
    pub fn affinity(&self, creator: CreatorId) -> f64 {
        if self.total_weight <= 0.0 {
            return 0.0;
        }
        self.creators
            .get(&creator.0)
            .map_or(0.0, |c| (c.weight / self.total_weight).clamp(0.0, 1.0))
    }

    pub fn familiarity(&self, item: ItemId, creator: CreatorId, now: i64, config: &SessionConfig) -> [f64; 4] {
        let channel = self.creators.get(&creator.0).map_or(0, |c| c.count);
        let (count, days) = match self.items.get(&item.0) {
            Some(h) => (
                h.count,
                ((now - h.last_timestamp) as f64 / DAY as f64).clamp(0.0, config.recency_cap_days),
            ),
            None => (0, config.recency_cap_days),
        };
        [channel as f64, count as f64, days, self.affinity(creator)]
    }

    fn record(&mut self, item: ItemId, creator: CreatorId, timestamp: i64, day_weight: f64) {
        let h = self.items.entry(item.0).or_insert(ItemHistory {
            count: 0,
            last_timestamp: timestamp,
        });
        h.count += 1;
        h.last_timestamp = timestamp;
        let c = self.creators.entry(creator.0).or_insert(CreatorHistory { count: 0, weight: 0.0 });
        c.count += 1;
        c.weight += day_weight;
        self.total_weight += day_weight;
    }
}

/// Familiarity state of every user plus global exposure counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub users: Vec<UserHistory>,
    /// Index of the next session to run.
    pub session: u32,
    pub popularity: PopularityTable,
}

impl SessionState {
    pub fn new(users: usize) -> Self {
        Self {
            users: vec![UserHistory::default(); users],
            session: 0,
            popularity: PopularityTable::new(),
        }
    }

    pub fn session_start(&self) -> i64 {
        EPOCH + self.session as i64 * DAY
    }
}

/// Draws `s = q * g(b) * exp(sigma * z)`; `b` is read from the state at `now`.
pub fn observe_urps<R: Rng>(
    universe: &Universe,
    user: UserId,
    item: ItemId,
    history: &UserHistory,
    now: i64,
    config: &SimulatorConfig,
    kinds: &[FeatureKind],
    rng: &mut R,
) -> (f64, FamiliarityVector) {
    let creator = universe.creator_of(item);
    let b = history.familiarity(item, creator, now, &config.session);
    let g = config.inflation.inflation(&b, kinds);
    let z: f64 = rng.sample(StandardNormal);
    let urps = universe.quality(user, item) * g * (config.inflation.noise_sigma * z).exp();
    (urps, FamiliarityVector(b.to_vec()))
}

pub struct RankContext<'a> {
    pub user: UserId,
    pub popularity: &'a PopularityTable,
    pub slate_size: usize,
}

/// Maps a scored candidate pool to an ordered slate.
pub trait Policy {
    fn name(&self) -> &str;

    /// Called once per session before any user is ranked.
    fn begin_session(&mut self, _popularity: &PopularityTable) -> Result<()> {
        Ok(())
    }

    fn rank(&self, candidates: Vec<SlateCandidate>, ctx: &RankContext<'_>) -> Result<Vec<SlateCandidate>>;
}

/// Ranks by raw URPS.
#[derive(Debug, Clone, Default)]
pub struct ControlPolicy;

impl Policy for ControlPolicy {
    fn name(&self) -> &str {
        "control"
    }

    fn rank(&self, mut candidates: Vec<SlateCandidate>, _ctx: &RankContext<'_>) -> Result<Vec<SlateCandidate>> {
        for c in &mut candidates {
            c.debiased = Some(c.urps);
            c.final_score = Some(c.urps);
        }
        candidates.sort_by(|a, b| by_score_desc(a.urps, a.item_id, b.urps, b.item_id));
        Ok(candidates)
    }
}

fn watch_time(
    universe: &Universe,
    config: &WatchTimeConfig,
    seed: u64,
    user: UserId,
    session: u32,
    item: ItemId,
    urps: f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        seed,
        STREAM_WATCH,
        user.0 as u64,
        session as u64,
        item.0 as u64,
    ]));
    let z: f64 = rng.sample(StandardNormal);
    let base = match config.model {
        WatchTimeModel::Quality => universe.quality(user, item),
        WatchTimeModel::Urps => urps,
    };
    config.scale_seconds * base * (config.sigma * z - config.sigma * config.sigma / 2.0).exp()
}

/// Runs one session for every user and appends the consumed interactions.
///
/// Each user's pool and noise come from a stream keyed by `(seed, user, session)`,
/// so arms sharing a seed see identical pools with identical observation noise.
/// Popularity is read as of session start and updated after all users.
pub fn step_session(
    universe: &Universe,
    state: &mut SessionState,
    policy: &mut dyn Policy,
    config: &SimulatorConfig,
    kinds: &[FeatureKind],
    seed: u64,
    out: &mut Vec<Interaction>,
) -> Result<()> {
    config.session.check(universe.items())?;
    policy.begin_session(&state.popularity)?;
    let session = state.session;
    let now = state.session_start();
    let s = &config.session;
    let day_weight = s.affinity_decay.powf(-(session as f64));
    let mut consumed: Vec<(ItemId, CreatorId)> = Vec::with_capacity(universe.users() * s.consume_top_k);

    for u in 0..universe.users() {
        let user = UserId(u as u32);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_POOL, u as u64, session as u64]));
        let pool = index::sample(&mut rng, universe.items(), s.pool_size);
        let history = &state.users[u];
        let candidates: Vec<SlateCandidate> = pool
            .iter()
            .map(|v| {
                let item = ItemId(v as u32);
                let (urps, b) = observe_urps(universe, user, item, history, now, config, kinds, &mut rng);
                SlateCandidate::new(item, universe.creator_of(item), urps, b)
            })
            .collect();
        if s.consume_top_k == 0 {
            continue;
        }
        let ctx = RankContext {
            user,
            popularity: &state.popularity,
            slate_size: s.slate_size,
        };
        let ranked = policy.rank(candidates, &ctx)?;
        if ranked.len() < s.consume_top_k {
            return Err(Error::InvalidArgument(format!(
                "policy {} returned {} candidates, fewer than {}",
                policy.name(),
                ranked.len(),
                s.consume_top_k
            )));
        }
        for (pos, c) in ranked.into_iter().take(s.consume_top_k).enumerate() {
            let timestamp = now + 1 + 60 * pos as i64;
            let wt = watch_time(universe, &config.watch_time, seed, user, session, c.item_id, c.urps);
            out.push(Interaction {
                user_id: user,
                item_id: c.item_id,
                creator_id: c.creator_id,
                timestamp,
                watch_time: wt,
                urps: c.urps,
                familiarity: c.familiarity,
            });
            state.users[u].record(c.item_id, c.creator_id, timestamp, day_weight);
            consumed.push((c.item_id, c.creator_id));
        }
    }
    if s.consume_top_k > 0 {
        for (item, creator) in consumed {
            state.popularity.record(item, creator);
        }
    }
    state.session += 1;
    Ok(())
}

/// Runs `sessions` consecutive sessions under one policy.
pub fn run_sessions(
    universe: &Universe,
    state: &mut SessionState,
    policy: &mut dyn Policy,
    config: &SimulatorConfig,
    kinds: &[FeatureKind],
    sessions: usize,
    seed: u64,
) -> Result<Vec<Interaction>> {
    let mut log = Vec::with_capacity(universe.users() * sessions * config.session.consume_top_k);
    for _ in 0..sessions {
        step_session(universe, state, policy, config, kinds, seed, &mut log)?;
    }
    Ok(log)
}

/// Runs every policy from a copy of the same starting state with the same seed.
pub fn run_arms(
    universe: &Universe,
    start: &SessionState,
    policies: &mut [Box<dyn Policy>],
    config: &SimulatorConfig,
    kinds: &[FeatureKind],
    sessions: usize,
    seed: u64,
) -> Result<Vec<Vec<Interaction>>> {
    policies
        .iter_mut()
        .map(|p| {
            let mut state = start.clone();
            log::info!("running arm {} for {sessions} sessions", p.name());
            run_sessions(universe, &mut state, p.as_mut(), config, kinds, sessions, seed)
        })
        .collect()
}

/// A record drawn with `b` independent of `(u, v)`, paired with `q` and `g(b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRecord {
    pub interaction: Interaction,
    pub quality: f64,
    pub inflation: f64,
}

/// Draws `(u, v)` uniformly and `b` from a fixed prior, then observes `s`.
/// Since `b` is independent of `q`, `E[s | b] = E[q] * g(b) * exp(sigma^2 / 2)`.
pub fn oracle_dataset(
    universe: &Universe,
    spec: &InflationSpec,
    n: usize,
    seed: u64,
) -> Vec<OracleRecord> {
    let kinds = simulator_schema().kinds;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_ORACLE]));
    (0..n)
        .map(|i| {
            let user = UserId(rng.random_range(0..universe.users()) as u32);
            let item = ItemId(rng.random_range(0..universe.items()) as u32);
            let b = sample_familiarity_prior(&mut rng);
            let g = spec.inflation(&b, &kinds);
            let q = universe.quality(user, item);
            let z: f64 = rng.sample(StandardNormal);
            let urps = q * g * (spec.noise_sigma * z).exp();
            OracleRecord {
                interaction: Interaction {
                    user_id: user,
                    item_id: item,
                    creator_id: universe.creator_of(item),
                    timestamp: EPOCH + i as i64,
                    watch_time: 0.0,
                    urps,
                    familiarity: FamiliarityVector(b.to_vec()),
                },
                quality: q,
                inflation: g,
            }
        })
        .collect()
}

/// Channel count, item count, days since last watch and affinity on their natural ranges.
pub fn sample_familiarity_prior<R: Rng>(rng: &mut R) -> [f64; 4] {
    let channel = (rng.random::<f64>() * 30f64.ln_1p()).exp_m1().floor();
    let item = (rng.random::<f64>() * 6f64.ln_1p()).exp_m1().floor();
    let days = rng.random_range(0.0..30.0);
    let affinity = rng.random::<f64>();
    [channel, item, days, affinity]
}
