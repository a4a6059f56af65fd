//! Multi-market interaction data: CSV ingestion, preprocessing, splits, and
//! a synthetic generator with controllable cross-market heterogeneity.
//!
//! IDs are market-local by construction: a [`MarketDataset`] only ever holds
//! dense indices into its own user/item ranges and carries no global
//! identifier type, so a record referencing another market's ID space is not
//! representable. Datasets are immutable after construction; every operation
//! here returns a new dataset and is pure given its seed.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// One user-item interaction. `label` is the binary click signal; when a
/// rating is present the invariant `label == (rating >= 4)` holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: u32,
    pub item: u32,
    pub rating: Option<u8>,
    pub label: bool,
    pub timestamp: Option<i64>,
}

/// CTR-task split assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtrSplit {
    Train,
    Valid,
    Test,
}

/// Role of a record in the collaborative-filtering pretraining split.
/// Negative records are excluded: the interaction graph is built from
/// positives only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfRole {
    Train,
    Heldout,
    Excluded,
}

/// Optional categorical side-feature column, one value per record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureField {
    pub name: String,
    pub cardinality: usize,
    pub values: Vec<u32>,
}

/// All interactions of one market, with dense market-local IDs.
#[derive(Debug, Clone)]
pub struct MarketDataset {
    pub market_id: String,
    pub num_users: usize,
    pub num_items: usize,
    pub interactions: Vec<InteractionRecord>,
    /// Parallel to `interactions` once [`split_ctr`] ran.
    pub ctr_split: Option<Vec<CtrSplit>>,
    /// Parallel to `interactions` once [`split_cf_leave_one_out`] ran.
    pub cf_split: Option<Vec<CfRole>>,
    pub feature_fields: Vec<FeatureField>,
}

impl MarketDataset {
    pub fn new(market_id: impl Into<String>, interactions: Vec<InteractionRecord>) -> Result<Self> {
        let market_id = market_id.into();
        if interactions.is_empty() {
            return Err(Error::EmptyDataset(format!("market `{market_id}` has no records")));
        }
        let num_users = interactions.iter().map(|r| r.user as usize + 1).max().unwrap();
        let num_items = interactions.iter().map(|r| r.item as usize + 1).max().unwrap();
        let d = Self {
            market_id,
            num_users,
            num_items,
            interactions,
            ctr_split: None,
            cf_split: None,
            feature_fields: Vec::new(),
        };
        d.validate()?;
        Ok(d)
    }

    /// Checks ID density, label/rating consistency, and split invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen_user = vec![false; self.num_users];
        let mut seen_item = vec![false; self.num_items];
        for r in &self.interactions {
            if r.user as usize >= self.num_users || r.item as usize >= self.num_items {
                return Err(Error::Shape {
                    context: format!("market `{}` record ids", self.market_id),
                    expected: format!("user < {}, item < {}", self.num_users, self.num_items),
                    found: format!("user {}, item {}", r.user, r.item),
                });
            }
            seen_user[r.user as usize] = true;
            seen_item[r.item as usize] = true;
            if let Some(rating) = r.rating {
                if r.label != (rating >= 4) {
                    return Err(Error::Split(format!(
                        "market `{}`: label {} inconsistent with rating {}",
                        self.market_id, r.label, rating
                    )));
                }
            }
        }
        if seen_user.iter().any(|&s| !s) || seen_item.iter().any(|&s| !s) {
            return Err(Error::Split(format!(
                "market `{}`: ids are not dense",
                self.market_id
            )));
        }
        if let Some(split) = &self.ctr_split {
            if split.len() != self.interactions.len() {
                return Err(Error::Split("ctr_split length mismatch".into()));
            }
        }
        if let Some(split) = &self.cf_split {
            if split.len() != self.interactions.len() {
                return Err(Error::Split("cf_split length mismatch".into()));
            }
        }
        for f in &self.feature_fields {
            if f.values.len() != self.interactions.len() {
                return Err(Error::Split(format!("feature field `{}` length mismatch", f.name)));
            }
        }
        Ok(())
    }

    pub fn num_records(&self) -> usize {
        self.interactions.len()
    }

    /// Per-user interaction counts.
    pub fn user_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_users];
        for r in &self.interactions {
            counts[r.user as usize] += 1;
        }
        counts
    }

    /// Record indices belonging to a CTR split cell.
    pub fn ctr_indices(&self, cell: CtrSplit) -> Result<Vec<usize>> {
        let split = self.ctr_split.as_ref().ok_or_else(|| {
            Error::Split(format!(
                "market `{}` has no CTR split; run split_ctr first",
                self.market_id
            ))
        })?;
        Ok(split
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == cell)
            .map(|(i, _)| i)
            .collect())
    }

    /// Positive (user, item) pairs in the CF training split, deduplicated.
    pub fn cf_train_pairs(&self) -> Result<Vec<(u32, u32)>> {
        let split = self.cf_split.as_ref().ok_or_else(|| {
            Error::Split(format!(
                "market `{}` has no CF split; run split_cf_leave_one_out first",
                self.market_id
            ))
        })?;
        let mut pairs: Vec<(u32, u32)> = self
            .interactions
            .iter()
            .zip(split)
            .filter(|(_, &role)| role == CfRole::Train)
            .map(|(r, _)| (r.user, r.item))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        Ok(pairs)
    }

    /// Held-out positive (user, item) pair per user, ordered by user.
    pub fn cf_heldout_pairs(&self) -> Result<Vec<(u32, u32)>> {
        let split = self.cf_split.as_ref().ok_or_else(|| {
            Error::Split(format!("market `{}` has no CF split", self.market_id))
        })?;
        let mut pairs: Vec<(u32, u32)> = self
            .interactions
            .iter()
            .zip(split)
            .filter(|(_, &role)| role == CfRole::Heldout)
            .map(|(r, _)| (r.user, r.item))
            .collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Loads `user,item,rating[,timestamp]` rows from a CSV file. A header row
/// is accepted when its first column names the user field; any other
/// non-numeric first row is a parse error naming line 1. IDs are re-indexed
/// densely in order of first appearance; no splits are assigned.
pub fn load_interactions(path: &Path) -> Result<MarketDataset> {
    let market_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "market".into());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let mut user_index: HashMap<u64, u32> = HashMap::new();
    let mut item_index: HashMap<u64, u32> = HashMap::new();
    let mut interactions = Vec::new();

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(row + 1);
        if row == 0 && looks_like_header(&record) {
            continue;
        }
        if record.len() < 3 || record.len() > 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 or 4 columns, found {}", record.len()),
            });
        }
        let parse_u64 = |idx: usize, what: &str| -> Result<u64> {
            record[idx].parse::<u64>().map_err(|_| Error::Parse {
                line,
                msg: format!("cannot parse {what} `{}`", &record[idx]),
            })
        };
        let user_raw = parse_u64(0, "user id")?;
        let item_raw = parse_u64(1, "item id")?;
        let rating: i64 = record[2].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("cannot parse rating `{}`", &record[2]),
        })?;
        if !(1..=5).contains(&rating) {
            return Err(Error::Parse {
                line,
                msg: format!("rating {rating} outside 1..=5"),
            });
        }
        let timestamp = if record.len() == 4 && !record[3].is_empty() {
            Some(record[3].parse::<i64>().map_err(|_| Error::Parse {
                line,
                msg: format!("cannot parse timestamp `{}`", &record[3]),
            })?)
        } else {
            None
        };

        let next_user = user_index.len() as u32;
        let user = *user_index.entry(user_raw).or_insert(next_user);
        let next_item = item_index.len() as u32;
        let item = *item_index.entry(item_raw).or_insert(next_item);
        let rating = rating as u8;
        interactions.push(InteractionRecord {
            user,
            item,
            rating: Some(rating),
            label: rating >= 4,
            timestamp,
        });
    }

    if interactions.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} contains no data rows",
            path.display()
        )));
    }
    MarketDataset::new(market_id, interactions)
}

fn looks_like_header(record: &csv::StringRecord) -> bool {
    let first = record.get(0).unwrap_or("").to_ascii_lowercase();
    first.parse::<u64>().is_err() && (first.contains("user") || first == "u" || first == "uid")
}

/// Drops users with `count <= k_min` interactions, iterating to a fixpoint,
/// then re-densifies both ID spaces. Existing splits are discarded (run the
/// split operations afterwards).
pub fn filter_min_interactions(d: &MarketDataset, k_min: usize) -> Result<MarketDataset> {
    let mut records = d.interactions.clone();
    loop {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for r in &records {
            *counts.entry(r.user).or_insert(0) += 1;
        }
        let before = records.len();
        records.retain(|r| counts[&r.user] > k_min);
        if records.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "market `{}`: all users fall at or below {k_min} interactions",
                d.market_id
            )));
        }
        if records.len() == before {
            break;
        }
    }
    reindex(&d.market_id, records)
}

fn reindex(market_id: &str, records: Vec<InteractionRecord>) -> Result<MarketDataset> {
    let mut user_map: HashMap<u32, u32> = HashMap::new();
    let mut item_map: HashMap<u32, u32> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let next_user = user_map.len() as u32;
        let user = *user_map.entry(r.user).or_insert(next_user);
        let next_item = item_map.len() as u32;
        let item = *item_map.entry(r.item).or_insert(next_item);
        out.push(InteractionRecord { user, item, ..r });
    }
    MarketDataset::new(market_id, out)
}

/// Re-derives labels from ratings: positive iff rating >= 4. Ratings are
/// retained; idempotent. Errors if any record lacks a rating.
pub fn binarize(d: &MarketDataset) -> Result<MarketDataset> {
    let mut out = d.clone();
    for (i, r) in out.interactions.iter_mut().enumerate() {
        match r.rating {
            Some(rating) => r.label = rating >= 4,
            None => {
                return Err(Error::Split(format!(
                    "market `{}`: record {i} has no rating to binarize",
                    d.market_id
                )))
            }
        }
    }
    Ok(out)
}

/// Assigns every record to train/valid/test with the given ratio,
/// stratified by label so both classes land in every cell. Deterministic
/// given the seed.
pub fn split_ctr(
    d: &MarketDataset,
    ratios: (usize, usize, usize),
    seed: u64,
) -> Result<MarketDataset> {
    let (rt, rv, rs) = ratios;
    let total_ratio = rt + rv + rs;
    if total_ratio == 0 || rt == 0 {
        return Err(Error::Config("split ratios must have a nonzero train share".into()));
    }
    let n = d.num_records();
    if n < total_ratio {
        return Err(Error::Split(format!(
            "market `{}`: {n} records cannot realize a {rt}:{rv}:{rs} split",
            d.market_id
        )));
    }
    let mut assignment = vec![CtrSplit::Train; n];
    for label in [false, true] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| d.interactions[i].label == label).collect();
        let mut rng = rng_for(seed, "ctr-split", &[label as u64]);
        idx.shuffle(&mut rng);
        let m = idx.len();
        let n_valid = ((m * rv) as f64 / total_ratio as f64).round() as usize;
        let n_test = ((m * rs) as f64 / total_ratio as f64).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            assignment[i] = if k < n_test {
                CtrSplit::Test
            } else if k < n_test + n_valid {
                CtrSplit::Valid
            } else {
                CtrSplit::Train
            };
        }
    }
    let mut out = d.clone();
    out.ctr_split = Some(assignment);
    Ok(out)
}

/// Holds out exactly one positive interaction per user for CF evaluation:
/// the latest by timestamp when all of the user's positives carry one
/// (ties broken toward the later record), otherwise a seeded uniform pick.
/// Negative records are marked [`CfRole::Excluded`].
pub fn split_cf_leave_one_out(d: &MarketDataset, seed: u64) -> Result<MarketDataset> {
    let n = d.num_records();
    let mut roles = vec![CfRole::Excluded; n];
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); d.num_users];
    for (i, r) in d.interactions.iter().enumerate() {
        if r.label {
            per_user[r.user as usize].push(i);
        }
    }
    for (user, positives) in per_user.iter().enumerate() {
        if positives.len() < 2 {
            return Err(Error::Split(format!(
                "market `{}`: user {user} has {} positive interaction(s); leave-one-out needs at least 2",
                d.market_id,
                positives.len()
            )));
        }
        let all_timestamped = positives
            .iter()
            .all(|&i| d.interactions[i].timestamp.is_some());
        let heldout = if all_timestamped {
            *positives
                .iter()
                .max_by_key(|&&i| (d.interactions[i].timestamp.unwrap(), i))
                .unwrap()
        } else {
            let mut rng = rng_for(seed, "cf-split", &[user as u64]);
            positives[rng.random_range(0..positives.len())]
        };
        for &i in positives {
            roles[i] = if i == heldout { CfRole::Heldout } else { CfRole::Train };
        }
    }
    let mut out = d.clone();
    out.cf_split = Some(roles);
    Ok(out)
}

/// Controls for the synthetic multi-market generator.
///
/// Entity factors concatenate a globally shared block (the same draw for
/// entity index j in every market) and a market-specific block; the
/// heterogeneity weight interpolates between a single shared factor model
/// (0.0) and statistically independent markets (1.0). Click probability is
/// the logistic of the factor inner product plus noise, and every sampled
/// exposure is kept as an explicit record so both label classes appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_markets: usize,
    pub users_per_market: usize,
    pub items_per_market: usize,
    pub shared_dim: usize,
    pub market_dim: usize,
    /// In [0, 1]: weight of the market-specific factor block.
    pub heterogeneity: f64,
    pub interactions_per_user: usize,
    /// Standard deviation of the logit noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_markets: 3,
            users_per_market: 200,
            items_per_market: 100,
            shared_dim: 8,
            market_dim: 8,
            heterogeneity: 0.5,
            interactions_per_user: 30,
            noise: 0.5,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::Config(format!(
                "heterogeneity {} outside [0, 1]",
                self.heterogeneity
            )));
        }
        for (name, v) in [
            ("num_markets", self.num_markets),
            ("users_per_market", self.users_per_market),
            ("items_per_market", self.items_per_market),
            ("shared_dim", self.shared_dim),
            ("market_dim", self.market_dim),
            ("interactions_per_user", self.interactions_per_user),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.interactions_per_user > self.items_per_market {
            return Err(Error::Config(
                "interactions_per_user cannot exceed items_per_market".into(),
            ));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Config("noise must be a nonnegative finite value".into()));
        }
        Ok(())
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// Generates `num_markets` datasets with ground-truth factor structure.
/// Deterministic given the spec (including its seed). Each user ends with
/// at least two positive and one negative record so downstream splits are
/// always feasible.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<MarketDataset>> {
    spec.validate()?;
    let h = spec.heterogeneity;
    let s_dim = spec.shared_dim;
    let m_dim = spec.market_dim;
    let w_shared = (1.0 - h).sqrt();
    let w_market = h.sqrt();
    // Normalizes the logit so its scale does not depend on the dims or h.
    let raw_var = (1.0 - h).powi(2) * s_dim as f64 + h.powi(2) * m_dim as f64;
    let logit_scale = if raw_var > 0.0 { 2.0 / raw_var.sqrt() } else { 0.0 };

    let mut shared_rng = rng_for(spec.seed, "synthetic-shared", &[]);
    let shared_users = normal_matrix(spec.users_per_market, s_dim, &mut shared_rng);
    let shared_items = normal_matrix(spec.items_per_market, s_dim, &mut shared_rng);
    // Item popularity bias, mixed with the same heterogeneity weight, so
    // per-item expected popularity carries cross-market signal when h is low.
    let shared_bias: Vec<f64> = (0..spec.items_per_market)
        .map(|_| StandardNormal.sample(&mut shared_rng))
        .collect();

    let mut markets = Vec::with_capacity(spec.num_markets);
    for k in 0..spec.num_markets {
        let mut rng = rng_for(spec.seed, "synthetic-market", &[k as u64]);
        let market_users = normal_matrix(spec.users_per_market, m_dim, &mut rng);
        let market_items = normal_matrix(spec.items_per_market, m_dim, &mut rng);
        let market_bias: Vec<f64> = (0..spec.items_per_market)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();

        let mut interactions =
            Vec::with_capacity(spec.users_per_market * spec.interactions_per_user);
        for u in 0..spec.users_per_market {
            let items = rand::seq::index::sample(
                &mut rng,
                spec.items_per_market,
                spec.interactions_per_user,
            );
            let mut user_records = Vec::with_capacity(spec.interactions_per_user);
            for (t, i) in items.into_iter().enumerate() {
                let mut dot = 0.0;
                for d2 in 0..s_dim {
                    dot += w_shared * shared_users[u][d2] * w_shared * shared_items[i][d2];
                }
                for d2 in 0..m_dim {
                    dot += w_market * market_users[u][d2] * w_market * market_items[i][d2];
                }
                let bias = w_shared * shared_bias[i] + w_market * market_bias[i];
                let eps: f64 = StandardNormal.sample(&mut rng);
                let logit = logit_scale * dot + bias + spec.noise * eps;
                let p = crate::nn::sigmoid(logit);
                let label = rng.random::<f64>() < p;
                user_records.push((
                    p,
                    InteractionRecord {
                        user: u as u32,
                        item: i as u32,
                        rating: None,
                        label,
                        timestamp: Some(t as i64),
                    },
                ));
            }
            ensure_both_classes(&mut user_records);
            interactions.extend(user_records.into_iter().map(|(_, r)| r));
        }
        markets.push(MarketDataset::new(format!("m{k}"), interactions)?);
    }
    Ok(markets)
}

/// Forces at least two positives and one negative per user by flipping the
/// records whose click probability makes the flip least surprising.
fn ensure_both_classes(records: &mut [(f64, InteractionRecord)]) {
    let positives = records.iter().filter(|(_, r)| r.label).count();
    let need_pos = 2usize.saturating_sub(positives);
    if need_pos > 0 {
        let mut candidates: Vec<usize> =
            (0..records.len()).filter(|&i| !records[i].1.label).collect();
        candidates.sort_by(|&a, &b| records[b].0.total_cmp(&records[a].0));
        for &i in candidates.iter().take(need_pos) {
            records[i].1.label = true;
        }
    }
    let negatives = records.iter().filter(|(_, r)| !r.label).count();
    if negatives == 0 {
        if let Some(i) = (0..records.len()).min_by(|&a, &b| records[a].0.total_cmp(&records[b].0)) {
            records[i].1.label = false;
        }
    }
}

// ---------------------------------------------------------------------------
// Directory persistence: one CSV per market plus a JSON manifest.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketMeta {
    pub market_id: String,
    pub file: String,
    pub num_users: usize,
    pub num_items: usize,
    pub num_records: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub markets: Vec<MarketMeta>,
    /// Preprocessing provenance: counts, seeds, ratios, filters applied.
    pub provenance: serde_json::Value,
}

fn split_to_str(s: CtrSplit) -> &'static str {
    match s {
        CtrSplit::Train => "train",
        CtrSplit::Valid => "valid",
        CtrSplit::Test => "test",
    }
}

fn role_to_str(r: CfRole) -> &'static str {
    match r {
        CfRole::Train => "train",
        CfRole::Heldout => "heldout",
        CfRole::Excluded => "excluded",
    }
}

/// Persists datasets as `<market_id>.csv` files plus `manifest.json`.
pub fn save_dataset_dir(
    datasets: &[MarketDataset],
    dir: &Path,
    provenance: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut metas = Vec::with_capacity(datasets.len());
    for d in datasets {
        let file = format!("{}.csv", d.market_id);
        let mut w = csv::Writer::from_path(dir.join(&file))?;
        w.write_record([
            "user",
            "item",
            "rating",
            "timestamp",
            "label",
            "ctr_split",
            "cf_split",
        ])?;
        for (i, r) in d.interactions.iter().enumerate() {
            w.write_record([
                r.user.to_string(),
                r.item.to_string(),
                r.rating.map(|x| x.to_string()).unwrap_or_default(),
                r.timestamp.map(|x| x.to_string()).unwrap_or_default(),
                (r.label as u8).to_string(),
                d.ctr_split
                    .as_ref()
                    .map(|s| split_to_str(s[i]).to_string())
                    .unwrap_or_default(),
                d.cf_split
                    .as_ref()
                    .map(|s| role_to_str(s[i]).to_string())
                    .unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        metas.push(MarketMeta {
            market_id: d.market_id.clone(),
            file,
            num_users: d.num_users,
            num_items: d.num_items,
            num_records: d.num_records(),
        });
    }
    let manifest = DatasetManifest {
        version: 1,
        markets: metas,
        provenance,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a directory written by [`save_dataset_dir`].
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<MarketDataset>> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact {
            required: "pretrain".into(),
            detail: format!("no dataset manifest at {}", manifest_path.display()),
        });
    }
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let mut out = Vec::with_capacity(manifest.markets.len());
    for meta in &manifest.markets {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(dir.join(&meta.file))?;
        let mut interactions = Vec::with_capacity(meta.num_records);
        let mut ctr = Vec::new();
        let mut cf = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            let field = |i: usize| record.get(i).unwrap_or("");
            let parse = |i: usize, what: &str| -> Result<u32> {
                field(i).parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad {what} `{}`", field(i)),
                })
            };
            interactions.push(InteractionRecord {
                user: parse(0, "user")?,
                item: parse(1, "item")?,
                rating: if field(2).is_empty() {
                    None
                } else {
                    Some(parse(2, "rating")? as u8)
                },
                label: field(4) == "1",
                timestamp: if field(3).is_empty() {
                    None
                } else {
                    Some(field(3).parse().map_err(|_| Error::Parse {
                        line,
                        msg: format!("bad timestamp `{}`", field(3)),
                    })?)
                },
            });
            match field(5) {
                "" => {}
                "train" => ctr.push(CtrSplit::Train),
                "valid" => ctr.push(CtrSplit::Valid),
                "test" => ctr.push(CtrSplit::Test),
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("bad ctr_split `{other}`"),
                    })
                }
            }
            match field(6) {
                "" => {}
                "train" => cf.push(CfRole::Train),
                "heldout" => cf.push(CfRole::Heldout),
                "excluded" => cf.push(CfRole::Excluded),
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("bad cf_split `{other}`"),
                    })
                }
            }
        }
        let mut d = MarketDataset::new(meta.market_id.clone(), interactions)?;
        if ctr.len() == d.num_records() {
            d.ctr_split = Some(ctr);
        }
        if cf.len() == d.num_records() {
            d.cf_split = Some(cf);
        }
        d.validate()?;
        out.push(d);
    }
    Ok(out)
}

/// Standard preprocessing chain: min-interaction filtering, binarization
/// when ratings are present, CF leave-one-out, and the CTR split.
pub fn preprocess(
    d: &MarketDataset,
    min_interactions: usize,
    ratios: (usize, usize, usize),
    split_seed: u64,
) -> Result<MarketDataset> {
    let filtered = filter_min_interactions(d, min_interactions)?;
    let labeled = if filtered.interactions.iter().all(|r| r.rating.is_some()) {
        binarize(&filtered)?
    } else {
        filtered
    };
    let with_cf = split_cf_leave_one_out(&labeled, crate::seeding::derive_seed(split_seed, "cf", &[]))?;
    split_ctr(&with_cf, ratios, crate::seeding::derive_seed(split_seed, "ctr", &[]))
}

/// Spearman rank correlation between two equal-length value vectors,
/// used to compare item popularity across markets.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = midranks(a);
    let rb = midranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (ra[i] - mean) * (rb[i] - mean);
        da += (ra[i] - mean).powi(2);
        db += (rb[i] - mean).powi(2);
    }
    num / (da.sqrt() * db.sqrt() + 1e-12)
}

/// Average ranks (1-based) with ties sharing their midrank.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("es.csv");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_minimal_file() {
        let (_dir, path) = write_csv("0,0,5\n");
        let d = load_interactions(&path).unwrap();
        assert_eq!(d.num_users, 1);
        assert_eq!(d.num_items, 1);
        assert_eq!(d.num_records(), 1);
        assert_eq!(d.interactions[0].rating, Some(5));
        assert!(d.interactions[0].label);
        assert_eq!(d.market_id, "es");
    }

    #[test]
    fn malformed_row_names_line_one() {
        let (_dir, path) = write_csv("a,b,c\n");
        let err = load_interactions(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn header_row_is_skipped() {
        let (_dir, path) = write_csv("user,item,rating\n7,9,4\n3,9,2\n");
        let d = load_interactions(&path).unwrap();
        assert_eq!(d.num_records(), 2);
        assert_eq!(d.num_users, 2);
        assert_eq!(d.num_items, 1);
        assert!(d.interactions[0].label);
        assert!(!d.interactions[1].label);
    }

    #[test]
    fn empty_file_is_an_error() {
        let (_dir, path) = write_csv("");
        assert!(matches!(load_interactions(&path), Err(Error::EmptyDataset(_))));
    }

    fn toy_records(counts: &[usize]) -> Vec<InteractionRecord> {
        let mut out = Vec::new();
        let mut item = 0u32;
        for (u, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                out.push(InteractionRecord {
                    user: u as u32,
                    item: item % 7,
                    rating: Some(5),
                    label: true,
                    timestamp: None,
                });
                item += 1;
            }
        }
        out
    }

    #[test]
    fn filter_boundary_is_strict() {
        // k_min = 3: a user with exactly 3 interactions goes, one with 4 stays.
        let d = MarketDataset::new("t", toy_records(&[3, 4])).unwrap();
        let f = filter_min_interactions(&d, 3).unwrap();
        assert_eq!(f.num_users, 1);
        assert_eq!(f.num_records(), 4);
    }

    #[test]
    fn filter_with_zero_threshold_is_identity_up_to_reindex() {
        let d = MarketDataset::new("t", toy_records(&[2, 3])).unwrap();
        let f = filter_min_interactions(&d, 0).unwrap();
        assert_eq!(f.num_records(), d.num_records());
        assert_eq!(f.num_users, d.num_users);
    }

    #[test]
    fn filter_everything_is_an_error() {
        let d = MarketDataset::new("t", toy_records(&[2, 2])).unwrap();
        assert!(matches!(filter_min_interactions(&d, 5), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn binarize_threshold() {
        let recs = vec![
            InteractionRecord { user: 0, item: 0, rating: Some(4), label: false, timestamp: None },
            InteractionRecord { user: 0, item: 1, rating: Some(3), label: true, timestamp: None },
            InteractionRecord { user: 0, item: 2, rating: Some(5), label: false, timestamp: None },
        ];
        // Build with consistent labels, then inject the wrong ones so
        // binarize has something to fix.
        let mut d = MarketDataset::new(
            "t",
            recs.iter()
                .map(|r| InteractionRecord { label: r.rating.unwrap() >= 4, ..r.clone() })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        d.interactions = recs;
        let b = binarize(&d).unwrap();
        assert_eq!(
            b.interactions.iter().map(|r| r.label).collect::<Vec<_>>(),
            vec![true, false, true]
        );
        let again = binarize(&b).unwrap();
        assert_eq!(again.interactions, b.interactions);
        assert!(again.interactions.iter().all(|r| r.rating.is_some()));
    }

    #[test]
    fn binarize_missing_rating_is_an_error() {
        let d = MarketDataset::new(
            "t",
            vec![InteractionRecord { user: 0, item: 0, rating: None, label: true, timestamp: None }],
        )
        .unwrap();
        assert!(binarize(&d).is_err());
    }

    fn balanced_dataset(n: usize) -> MarketDataset {
        let records = (0..n)
            .map(|i| InteractionRecord {
                user: (i % 10) as u32,
                item: (i % 20) as u32,
                rating: None,
                label: i % 2 == 0,
                timestamp: Some(i as i64),
            })
            .collect();
        MarketDataset::new("t", records).unwrap()
    }

    #[test]
    fn ctr_split_is_811_and_deterministic() {
        let d = balanced_dataset(100);
        let s1 = split_ctr(&d, (8, 1, 1), 9).unwrap();
        let s2 = split_ctr(&d, (8, 1, 1), 9).unwrap();
        assert_eq!(s1.ctr_split, s2.ctr_split);
        let split = s1.ctr_split.unwrap();
        let count = |c| split.iter().filter(|&&s| s == c).count();
        assert_eq!(count(CtrSplit::Train), 80);
        assert_eq!(count(CtrSplit::Valid), 10);
        assert_eq!(count(CtrSplit::Test), 10);
    }

    #[test]
    fn ctr_split_too_small_is_an_error() {
        let d = balanced_dataset(5);
        assert!(split_ctr(&d, (8, 1, 1), 0).is_err());
    }

    #[test]
    fn ctr_split_partitions_records() {
        let d = balanced_dataset(57);
        let s = split_ctr(&d, (8, 1, 1), 3).unwrap();
        let split = s.ctr_split.unwrap();
        assert_eq!(split.len(), 57);
    }

    #[test]
    fn cf_split_takes_latest_timestamp() {
        let records = vec![
            InteractionRecord { user: 0, item: 0, rating: None, label: true, timestamp: Some(1) },
            InteractionRecord { user: 0, item: 1, rating: None, label: true, timestamp: Some(3) },
            InteractionRecord { user: 0, item: 2, rating: None, label: true, timestamp: Some(2) },
        ];
        let d = MarketDataset::new("t", records).unwrap();
        let s = split_cf_leave_one_out(&d, 0).unwrap();
        assert_eq!(s.cf_split.unwrap()[1], CfRole::Heldout);
    }

    #[test]
    fn cf_split_minimal_user() {
        let records = vec![
            InteractionRecord { user: 0, item: 0, rating: None, label: true, timestamp: Some(0) },
            InteractionRecord { user: 0, item: 1, rating: None, label: true, timestamp: Some(1) },
        ];
        let d = MarketDataset::new("t", records).unwrap();
        let s = split_cf_leave_one_out(&d, 0).unwrap();
        let roles = s.cf_split.unwrap();
        assert_eq!(roles.iter().filter(|&&r| r == CfRole::Heldout).count(), 1);
        assert_eq!(roles.iter().filter(|&&r| r == CfRole::Train).count(), 1);
    }

    #[test]
    fn cf_split_single_positive_names_user() {
        let records = vec![
            InteractionRecord { user: 0, item: 0, rating: None, label: true, timestamp: None },
            InteractionRecord { user: 0, item: 1, rating: None, label: true, timestamp: None },
            InteractionRecord { user: 1, item: 1, rating: None, label: true, timestamp: None },
        ];
        let d = MarketDataset::new("t", records).unwrap();
        let err = split_cf_leave_one_out(&d, 0).unwrap_err();
        assert!(err.to_string().contains("user 1"), "{err}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            num_markets: 3,
            users_per_market: 20,
            items_per_market: 15,
            interactions_per_user: 8,
            seed: 7,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.interactions, y.interactions);
        }
    }

    #[test]
    fn synthetic_popularity_correlation_tracks_heterogeneity() {
        let base = SyntheticSpec {
            num_markets: 2,
            users_per_market: 300,
            items_per_market: 60,
            interactions_per_user: 25,
            noise: 0.2,
            seed: 11,
            ..Default::default()
        };
        let popularity = |d: &MarketDataset| {
            let mut pop = vec![0.0; d.num_items];
            for r in &d.interactions {
                if r.label {
                    pop[r.item as usize] += 1.0;
                }
            }
            pop
        };
        let shared =
            generate_synthetic(&SyntheticSpec { heterogeneity: 0.0, ..base.clone() }).unwrap();
        let disjoint = generate_synthetic(&SyntheticSpec { heterogeneity: 1.0, ..base }).unwrap();
        let corr_shared = rank_correlation(&popularity(&shared[0]), &popularity(&shared[1]));
        let corr_disjoint = rank_correlation(&popularity(&disjoint[0]), &popularity(&disjoint[1]));
        assert!(
            corr_shared > corr_disjoint + 0.3,
            "shared {corr_shared} vs disjoint {corr_disjoint}"
        );
    }

    #[test]
    fn preprocess_and_round_trip_dir() {
        let spec = SyntheticSpec {
            num_markets: 2,
            users_per_market: 30,
            items_per_market: 20,
            interactions_per_user: 10,
            seed: 3,
            ..Default::default()
        };
        let datasets: Vec<MarketDataset> = generate_synthetic(&spec)
            .unwrap()
            .iter()
            .map(|d| preprocess(d, 3, (8, 1, 1), 5).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        save_dataset_dir(&datasets, dir.path(), serde_json::json!({"seed": 3})).unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in datasets.iter().zip(&loaded) {
            assert_eq!(a.interactions, b.interactions);
            assert_eq!(a.ctr_split, b.ctr_split);
            assert_eq!(a.cf_split, b.cf_split);
        }
    }
}
