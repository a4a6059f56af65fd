//! Token-augmented CTR prediction, one model per market.
//!
//! Every categorical field (user id, item id, and the four collaborative
//! token fields) maps to a 16-dimensional learnable embedding; the
//! concatenation feeds a dense tower ending in a single logit. Training
//! minimizes the logistic loss on the CTR training split with early
//! stopping on validation AUC; the returned model is the best-validation
//! checkpoint. Token assignments are frozen inputs here, never trained.

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{CtrSplit, InteractionRecord, MarketDataset};
use crate::error::{Error, Result};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::tape::{Bound, Tape};
use crate::nn::{glorot_uniform, sigmoid, Activation, Mat, Mlp, MlpSpec, ParamId, ParamSet};
use crate::quantizer::TokenTable;
use crate::seeding::rng_from;

/// Which token signal the CTR model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Both token pairs: federated and local.
    Full,
    /// Drops the local-token fields; federated signal only.
    NoLocal,
    /// All token fields, but phase 1 ran without any federated aggregation.
    NoGlobal,
    /// All token fields, assignments from a frozen randomly initialized
    /// quantizer.
    RandomCodebook,
    /// No token fields at all: the single-market baseline.
    LocalOnly,
}

impl AblationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoLocal => "no_local",
            AblationMode::NoGlobal => "no_global",
            AblationMode::RandomCodebook => "random_codebook",
            AblationMode::LocalOnly => "local_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "no_local" => Ok(AblationMode::NoLocal),
            "no_global" => Ok(AblationMode::NoGlobal),
            "random_codebook" => Ok(AblationMode::RandomCodebook),
            "local_only" => Ok(AblationMode::LocalOnly),
            other => Err(Error::Config(format!("unknown ablation mode `{other}`"))),
        }
    }

    /// Whether phase 1 runs federated rounds in this mode.
    pub fn federated(&self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::NoLocal)
    }

    /// Whether the mode consumes a token table at all.
    pub fn uses_tokens(&self) -> bool {
        !matches!(self, AblationMode::LocalOnly)
    }

    /// Ordered feature fields the CTR model consumes in this mode.
    pub fn field_kinds(&self) -> Vec<FieldKind> {
        use FieldKind::*;
        match self {
            AblationMode::Full | AblationMode::NoGlobal | AblationMode::RandomCodebook => {
                vec![UserId, ItemId, UserFed, UserLocal, ItemFed, ItemLocal]
            }
            AblationMode::NoLocal => vec![UserId, ItemId, UserFed, ItemFed],
            AblationMode::LocalOnly => vec![UserId, ItemId],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    UserId,
    ItemId,
    UserFed,
    UserLocal,
    ItemFed,
    ItemLocal,
    /// Optional categorical side-feature column (index into the dataset's
    /// feature fields).
    Side(usize),
}

/// Resolves one record to its ordered per-field embedding indices.
pub fn build_features(
    record: &InteractionRecord,
    tokens: &TokenTable,
    mode: AblationMode,
) -> Result<Vec<(FieldKind, usize)>> {
    let mut out = Vec::new();
    for kind in mode.field_kinds() {
        let idx = match kind {
            FieldKind::UserId => record.user as usize,
            FieldKind::ItemId => record.item as usize,
            FieldKind::UserFed => tokens.user_tokens(record.user)?.0 as usize,
            FieldKind::UserLocal => tokens.user_tokens(record.user)?.1 as usize,
            FieldKind::ItemFed => tokens.item_tokens(record.item)?.0 as usize,
            FieldKind::ItemLocal => tokens.item_tokens(record.item)?.1 as usize,
            FieldKind::Side(_) => unreachable!("side fields are dataset-driven"),
        };
        out.push((kind, idx));
    }
    Ok(out)
}

/// CTR training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtrConfig {
    pub emb_dim: usize,
    /// Hidden tower widths; a final single-logit layer is appended.
    pub tower: Vec<usize>,
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Early-stopping patience on validation AUC.
    pub patience: usize,
}

impl Default for CtrConfig {
    fn default() -> Self {
        Self {
            emb_dim: 16,
            tower: vec![512, 256, 128],
            lr: 1e-3,
            l2: 1e-6,
            epochs: 10,
            batch: 256,
            patience: 5,
        }
    }
}

/// Per-market CTR model: one embedding table per feature field plus the
/// dense tower.
#[derive(Debug, Clone)]
pub struct CtrModel {
    pub market_id: String,
    pub mode: AblationMode,
    pub cfg: CtrConfig,
    params: ParamSet,
    fields: Vec<(FieldKind, ParamId)>,
    tower: Mlp,
    num_users: usize,
    num_items: usize,
    codebook_size: usize,
}

impl CtrModel {
    pub fn new(
        market_id: impl Into<String>,
        mode: AblationMode,
        num_users: usize,
        num_items: usize,
        codebook_size: usize,
        side_cardinalities: &[usize],
        cfg: CtrConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_from(seed);
        let mut params = ParamSet::new();
        let mut fields = Vec::new();
        let mut kinds = mode.field_kinds();
        for (k, &card) in side_cardinalities.iter().enumerate() {
            let _ = card;
            kinds.push(FieldKind::Side(k));
        }
        for kind in kinds {
            let (name, rows) = match kind {
                FieldKind::UserId => ("emb.user_id".to_string(), num_users),
                FieldKind::ItemId => ("emb.item_id".to_string(), num_items),
                FieldKind::UserFed => ("emb.user_fed".to_string(), codebook_size),
                FieldKind::UserLocal => ("emb.user_local".to_string(), codebook_size),
                FieldKind::ItemFed => ("emb.item_fed".to_string(), codebook_size),
                FieldKind::ItemLocal => ("emb.item_local".to_string(), codebook_size),
                FieldKind::Side(k) => (format!("emb.side{k}"), side_cardinalities[k]),
            };
            let id = params.add(name, glorot_uniform(rows, cfg.emb_dim, &mut rng));
            fields.push((kind, id));
        }
        let input_dim = fields.len() * cfg.emb_dim;
        let mut tower_widths = cfg.tower.clone();
        tower_widths.push(1);
        let spec = MlpSpec::new(tower_widths, Activation::Relu)?;
        let tower = Mlp::init(&mut params, "tower", input_dim, spec, &mut rng);
        Ok(Self {
            market_id: market_id.into(),
            mode,
            cfg,
            params,
            fields,
            tower,
            num_users,
            num_items,
            codebook_size,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Total scalar parameter count (embeddings + tower).
    pub fn param_count(&self) -> usize {
        self.params.num_values()
    }

    pub fn token_table_rows(&self) -> usize {
        self.codebook_size
    }

    /// Per-field embedding indices for a batch, with range checks.
    fn batch_indices(
        &self,
        records: &[&InteractionRecord],
        tokens: Option<&TokenTable>,
        side: Option<&MarketDataset>,
        record_ids: Option<&[usize]>,
    ) -> Result<Vec<Vec<usize>>> {
        let mut per_field: Vec<Vec<usize>> = vec![Vec::with_capacity(records.len()); self.fields.len()];
        for (row, r) in records.iter().enumerate() {
            if r.user as usize >= self.num_users {
                return Err(Error::Split(format!(
                    "unseen user id {} (model knows {})",
                    r.user, self.num_users
                )));
            }
            if r.item as usize >= self.num_items {
                return Err(Error::Split(format!(
                    "unseen item id {} (model knows {})",
                    r.item, self.num_items
                )));
            }
            for (f, (kind, _)) in self.fields.iter().enumerate() {
                let idx = match kind {
                    FieldKind::UserId => r.user as usize,
                    FieldKind::ItemId => r.item as usize,
                    FieldKind::UserFed | FieldKind::UserLocal | FieldKind::ItemFed | FieldKind::ItemLocal => {
                        let t = tokens.ok_or_else(|| Error::MissingArtifact {
                            required: "tokenize".into(),
                            detail: format!("mode {:?} needs a token table", self.mode),
                        })?;
                        let pair = match kind {
                            FieldKind::UserFed | FieldKind::UserLocal => t.user_tokens(r.user)?,
                            _ => t.item_tokens(r.item)?,
                        };
                        let v = match kind {
                            FieldKind::UserFed | FieldKind::ItemFed => pair.0,
                            _ => pair.1,
                        } as usize;
                        if v >= self.codebook_size {
                            return Err(Error::Split(format!(
                                "token index {v} out of range {}",
                                self.codebook_size
                            )));
                        }
                        v
                    }
                    FieldKind::Side(k) => {
                        let d = side.ok_or_else(|| {
                            Error::Config("side fields need the dataset".into())
                        })?;
                        let rid = record_ids
                            .ok_or_else(|| Error::Config("side fields need record ids".into()))?[row];
                        d.feature_fields[*k].values[rid] as usize
                    }
                };
                per_field[f].push(idx);
            }
        }
        Ok(per_field)
    }

    /// Plain logits for a batch (inference path).
    fn logits(
        &self,
        records: &[&InteractionRecord],
        tokens: Option<&TokenTable>,
    ) -> Result<Array1<f64>> {
        let per_field = self.batch_indices(records, tokens, None, None)?;
        let b = records.len();
        let width = self.fields.len() * self.cfg.emb_dim;
        let mut fused = Mat::zeros((b, width));
        for (f, (_, pid)) in self.fields.iter().enumerate() {
            let table = self.params.value(*pid);
            for (row, &idx) in per_field[f].iter().enumerate() {
                let off = f * self.cfg.emb_dim;
                fused
                    .row_mut(row)
                    .slice_mut(ndarray::s![off..off + self.cfg.emb_dim])
                    .assign(&table.row(idx));
            }
        }
        let out = self.tower.forward_plain(&self.params, &fused)?;
        Ok(out.column(0).to_owned())
    }
}

/// Click probabilities for a batch of records; all outputs in (0, 1),
/// deterministic, errors on entity ids the model has never seen.
pub fn predict(
    model: &CtrModel,
    records: &[InteractionRecord],
    tokens: Option<&TokenTable>,
) -> Result<Vec<f64>> {
    let refs: Vec<&InteractionRecord> = records.iter().collect();
    let logits = model.logits(&refs, tokens)?;
    Ok(logits.iter().map(|&s| sigmoid(s)).collect())
}

/// One epoch row of the training trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
    pub test_auc: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CtrHistory {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_valid_auc: f64,
}

fn split_class_check(d: &MarketDataset, idx: &[usize], split: &str) -> Result<()> {
    let pos = idx.iter().filter(|&&i| d.interactions[i].label).count();
    if pos == 0 || pos == idx.len() {
        return Err(Error::SingleClass(format!(
            "market `{}` {split} split has a single label class ({pos}/{} positive)",
            d.market_id,
            idx.len()
        )));
    }
    Ok(())
}

fn auc_on(
    model: &CtrModel,
    d: &MarketDataset,
    idx: &[usize],
    tokens: Option<&TokenTable>,
) -> Result<f64> {
    let records: Vec<&InteractionRecord> = idx.iter().map(|&i| &d.interactions[i]).collect();
    let scores = model.logits(&records, tokens)?;
    let labels: Vec<bool> = idx.iter().map(|&i| d.interactions[i].label).collect();
    auc(scores.as_slice().unwrap(), &labels)
}

/// Trains the CTR model on the dataset's training split, early-stopping on
/// validation AUC, and returns the best-validation checkpoint. With
/// `epochs = 0` the seeded initialization comes back untouched.
pub fn train_ctr(
    d: &MarketDataset,
    tokens: Option<&TokenTable>,
    mode: AblationMode,
    cfg: &CtrConfig,
    seed: u64,
) -> Result<(CtrModel, CtrHistory)> {
    if mode.uses_tokens() && tokens.is_none() {
        return Err(Error::MissingArtifact {
            required: "tokenize".into(),
            detail: format!("mode {} trains on token fields", mode.as_str()),
        });
    }
    let train_idx = d.ctr_indices(CtrSplit::Train)?;
    let valid_idx = d.ctr_indices(CtrSplit::Valid)?;
    let test_idx = d.ctr_indices(CtrSplit::Test)?;
    split_class_check(d, &train_idx, "training")?;
    split_class_check(d, &valid_idx, "validation")?;

    let codebook_size = tokens.map(|t| t.codebook_size).unwrap_or(2);
    let side_cards: Vec<usize> = d.feature_fields.iter().map(|f| f.cardinality).collect();
    let mut model = CtrModel::new(
        &d.market_id,
        mode,
        d.num_users,
        d.num_items,
        codebook_size,
        &side_cards,
        cfg.clone(),
        seed,
    )?;
    let mut opt = Adam::new(AdamConfig::new(cfg.lr, cfg.l2));
    let mut rng = rng_from(crate::seeding::derive_seed(seed, "ctr-batches", &[]));

    let mut history = CtrHistory::default();
    let mut best_params: Option<ParamSet> = None;
    let mut best_auc = f64::NEG_INFINITY;
    let mut patience_left = cfg.patience;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let records: Vec<&InteractionRecord> =
                chunk.iter().map(|&i| &d.interactions[i]).collect();
            let labels: Vec<f64> = records.iter().map(|r| r.label as u8 as f64).collect();
            let per_field = model.batch_indices(&records, tokens, Some(d), Some(chunk))?;

            let mut tape = Tape::new();
            let mut bound = Bound::new();
            let mut parts = Vec::with_capacity(model.fields.len());
            for (f, (_, pid)) in model.fields.iter().enumerate() {
                let table = bound.bind(&mut tape, &model.params, *pid);
                parts.push(tape.gather_rows(table, per_field[f].clone()));
            }
            let fused = tape.concat_cols(parts);
            let out = model
                .tower
                .forward_tape(&mut tape, &mut bound, &model.params, fused)?;
            let per_record = tape.bce_with_logits(out, labels);
            let loss = tape.mean_all(per_record);
            let loss_value = tape.value(loss)[[0, 0]];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    context: "train_ctr".into(),
                    detail: format!("market `{}` epoch {epoch} loss {loss_value}", d.market_id),
                });
            }
            tape.backward(loss);
            model.params.zero_grads();
            bound.accumulate(&tape, &mut model.params);
            opt.step(&mut model.params)?;
            epoch_loss += loss_value;
            batches += 1;
        }

        let valid_auc = auc_on(&model, d, &valid_idx, tokens)?;
        let test_auc = auc_on(&model, d, &test_idx, tokens)?;
        history.epochs.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            valid_auc,
            test_auc,
        });
        if valid_auc > best_auc {
            best_auc = valid_auc;
            best_params = Some(model.params.clone());
            history.best_epoch = Some(epoch);
            patience_left = cfg.patience;
        } else {
            if patience_left == 0 {
                break;
            }
            patience_left -= 1;
        }
    }

    if let Some(best) = best_params {
        model.params = best;
        history.best_valid_auc = best_auc;
    }
    Ok((model, history))
}

/// Area under the ROC curve by the midrank statistic:
/// `P(s+ > s-) + 0.5 P(s+ = s-)`. Errors when only one class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            context: "auc".into(),
            expected: format!("{} labels", scores.len()),
            found: format!("{}", labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!(
            "auc needs both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }
    let ranks = crate::data::midranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&r, _)| r)
        .sum();
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Combines per-market AUCs into the overall figure: test-size-weighted
/// mean by default, plain mean when `weighted` is false.
pub fn evaluate_overall(per_market: &[(f64, usize)], weighted: bool) -> f64 {
    if per_market.is_empty() {
        return f64::NAN;
    }
    if weighted {
        let total: usize = per_market.iter().map(|&(_, n)| n).sum();
        per_market
            .iter()
            .map(|&(a, n)| a * n as f64 / total as f64)
            .sum()
    } else {
        per_market.iter().map(|&(a, _)| a).sum::<f64>() / per_market.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, preprocess, SyntheticSpec};
    use proptest::prelude::*;

    fn toy_tokens(num_users: usize, num_items: usize, t: u32) -> TokenTable {
        TokenTable {
            market_id: "m0".into(),
            codebook_size: t as usize,
            users: (0..num_users as u32).map(|u| (u % t, (u + 1) % t)).collect(),
            items: (0..num_items as u32).map(|i| ((i + 2) % t, i % t)).collect(),
        }
    }

    #[test]
    fn field_counts_per_mode() {
        let r = InteractionRecord {
            user: 1,
            item: 2,
            rating: None,
            label: true,
            timestamp: None,
        };
        let tokens = toy_tokens(4, 4, 4);
        assert_eq!(build_features(&r, &tokens, AblationMode::Full).unwrap().len(), 6);
        assert_eq!(build_features(&r, &tokens, AblationMode::NoLocal).unwrap().len(), 4);
        assert_eq!(build_features(&r, &tokens, AblationMode::LocalOnly).unwrap().len(), 2);
        let no_local = build_features(&r, &tokens, AblationMode::NoLocal).unwrap();
        assert!(no_local
            .iter()
            .all(|(k, _)| !matches!(k, FieldKind::UserLocal | FieldKind::ItemLocal)));
    }

    #[test]
    fn missing_entity_names_it() {
        let r = InteractionRecord {
            user: 9,
            item: 0,
            rating: None,
            label: true,
            timestamp: None,
        };
        let tokens = toy_tokens(4, 4, 4);
        let err = build_features(&r, &tokens, AblationMode::Full).unwrap_err();
        assert!(err.to_string().contains("user 9"), "{err}");
    }

    fn prepared_market(seed: u64, users: usize, items: usize) -> MarketDataset {
        let spec = SyntheticSpec {
            num_markets: 1,
            users_per_market: users,
            items_per_market: items,
            interactions_per_user: 10,
            seed,
            ..Default::default()
        };
        let d = generate_synthetic(&spec).unwrap().remove(0);
        preprocess(&d, 0, (8, 1, 1), seed).unwrap()
    }

    fn small_cfg(epochs: usize) -> CtrConfig {
        CtrConfig {
            emb_dim: 8,
            tower: vec![16, 8],
            lr: 2e-3,
            l2: 1e-6,
            epochs,
            batch: 64,
            patience: 5,
        }
    }

    #[test]
    fn zero_epochs_random_model_is_near_chance() {
        let d = prepared_market(21, 40, 30);
        let tokens = toy_tokens(d.num_users, d.num_items, 8);
        let (model, history) =
            train_ctr(&d, Some(&tokens), AblationMode::Full, &small_cfg(0), 3).unwrap();
        assert!(history.epochs.is_empty());
        let test_idx = d.ctr_indices(CtrSplit::Test).unwrap();
        let a = auc_on(&model, &d, &test_idx, Some(&tokens)).unwrap();
        assert!((a - 0.5).abs() < 0.2, "untrained AUC {a}");
    }

    #[test]
    fn training_improves_loss_and_tokens_move() {
        let d = prepared_market(22, 50, 40);
        let tokens = toy_tokens(d.num_users, d.num_items, 8);
        let (model, history) =
            train_ctr(&d, Some(&tokens), AblationMode::Full, &small_cfg(6), 4).unwrap();
        let first = history.epochs.first().unwrap().train_loss;
        let last = history.epochs.last().unwrap().train_loss;
        assert!(last < first, "loss {first} -> {last}");
        // Token embeddings actually participate: training moved them.
        let tok_id = model.params.find("emb.user_fed").unwrap();
        let mut fresh = CtrModel::new(
            "m0",
            AblationMode::Full,
            d.num_users,
            d.num_items,
            8,
            &[],
            small_cfg(6),
            4,
        )
        .unwrap();
        let init_id = fresh.params.find("emb.user_fed").unwrap();
        assert_ne!(model.params.value(tok_id), fresh.params.value(init_id));
        fresh.params.zero_grads();
    }

    #[test]
    fn predict_outputs_probabilities_deterministically() {
        let d = prepared_market(23, 30, 20);
        let tokens = toy_tokens(d.num_users, d.num_items, 4);
        let (model, _) =
            train_ctr(&d, Some(&tokens), AblationMode::Full, &small_cfg(1), 5).unwrap();
        let records = d.interactions[..10].to_vec();
        let p1 = predict(&model, &records, Some(&tokens)).unwrap();
        let p2 = predict(&model, &records, Some(&tokens)).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.iter().all(|&p| (0.0..1.0).contains(&p) && p > 0.0));
        // Batch equals per-record.
        for (i, r) in records.iter().enumerate() {
            let single = predict(&model, std::slice::from_ref(r), Some(&tokens)).unwrap();
            assert_eq!(single[0], p1[i]);
        }
    }

    #[test]
    fn predict_zero_tower_gives_half() {
        let d = prepared_market(24, 20, 15);
        let mut model = CtrModel::new(
            "m0",
            AblationMode::LocalOnly,
            d.num_users,
            d.num_items,
            2,
            &[],
            small_cfg(1),
            6,
        )
        .unwrap();
        // Zero the final tower layer so every logit is exactly 0.
        let w = model.params.find("tower.w2").unwrap();
        let b = model.params.find("tower.b2").unwrap();
        let zeros_w = Mat::zeros(model.params.value(w).raw_dim());
        let zeros_b = Mat::zeros(model.params.value(b).raw_dim());
        model.params.set_value(w, zeros_w);
        model.params.set_value(b, zeros_b);
        let p = predict(&model, &d.interactions[..5], None).unwrap();
        assert!(p.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn unseen_entity_is_an_error() {
        let d = prepared_market(25, 20, 15);
        let (model, _) = train_ctr(&d, None, AblationMode::LocalOnly, &small_cfg(0), 7).unwrap();
        let bad = InteractionRecord {
            user: 999,
            item: 0,
            rating: None,
            label: false,
            timestamp: None,
        };
        assert!(predict(&model, &[bad], None).is_err());
    }

    #[test]
    fn single_class_train_split_is_an_error() {
        let records: Vec<InteractionRecord> = (0..40)
            .map(|i| InteractionRecord {
                user: (i % 4) as u32,
                item: (i % 8) as u32,
                rating: None,
                label: true,
                timestamp: None,
            })
            .collect();
        let d = MarketDataset::new("t", records).unwrap();
        let d = crate::data::split_ctr(&d, (8, 1, 1), 0).unwrap();
        let err = train_ctr(&d, None, AblationMode::LocalOnly, &small_cfg(1), 0).unwrap_err();
        assert!(matches!(err, Error::SingleClass(_)));
    }

    #[test]
    fn auc_perfect_and_ties() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        let flat = [0.5; 4];
        assert_eq!(auc(&flat, &labels).unwrap(), 0.5);
        assert!(auc(&scores, &[true; 4]).is_err());
    }

    #[test]
    fn auc_matches_all_pairs_oracle() {
        let mut rng = rng_from(77);
        use rand::Rng;
        for case in 0..30 {
            let n = rng.random_range(5..200);
            let quantized = case % 2 == 0;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let s: f64 = rng.random();
                    if quantized {
                        (s * 5.0).round() / 5.0
                    } else {
                        s
                    }
                })
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.4).collect();
            if labels.iter().all(|&l| l) {
                labels[0] = false;
            }
            if labels.iter().all(|&l| !l) {
                labels[0] = true;
            }
            let fast = auc(&scores, &labels).unwrap();
            let brute = brute_force_auc(&scores, &labels);
            assert!((fast - brute).abs() < 1e-12, "case {case}: {fast} vs {brute}");
        }
    }

    fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn overall_weighted_and_unweighted() {
        let per = [(0.8, 100), (0.9, 300)];
        assert!((evaluate_overall(&per, true) - 0.875).abs() < 1e-12);
        assert!((evaluate_overall(&per, false) - 0.85).abs() < 1e-12);
        assert_eq!(evaluate_overall(&[(0.7, 10)], true), 0.7);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transforms(
            raw in proptest::collection::vec((0.0f64..1.0, proptest::bool::ANY), 4..60),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s).collect();
            let mut labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
            if labels.iter().all(|&l| l) { labels[0] = false; }
            if labels.iter().all(|&l| !l) { labels[0] = true; }
            let base = auc(&scores, &labels).unwrap();
            let affine: Vec<f64> = scores.iter().map(|&s| s * scale + shift).collect();
            let expo: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
            prop_assert!((auc(&affine, &labels).unwrap() - base).abs() < 1e-12);
            prop_assert!((auc(&expo, &labels).unwrap() - base).abs() < 1e-12);
        }
    }

    use crate::seeding::rng_from;
}
