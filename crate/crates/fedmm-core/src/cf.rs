//! Per-market collaborative embedding pretraining.
//!
//! Embeddings come from light graph propagation over the user-item
//! interaction bipartite graph: each layer aggregates neighbor rows with
//! symmetric normalization `1/sqrt(deg(u) deg(i))` and the final embedding
//! is the mean over layers 0..L. Training scores an observed item above a
//! sampled unobserved one with a pairwise logistic ranking loss on the
//! propagated inner products.
//!
//! External CF models plug in through the embedding file format below, so
//! this trainer is a default, not a requirement.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::MarketDataset;
use crate::error::{Error, Result};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::tape::{Bound, SparseMatrix, Tape};
use crate::nn::{glorot_uniform, Mat, ParamSet};
use crate::seeding::rng_from;

/// Pretrained embeddings for one market.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub market_id: String,
    pub dim: usize,
    pub users: Mat,
    pub items: Mat,
}

impl EmbeddingTable {
    pub fn num_users(&self) -> usize {
        self.users.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.items.nrows()
    }
}

/// Positive-interaction bipartite graph with symmetric-normalized weights.
#[derive(Debug)]
pub struct BipartiteGraph {
    pub num_users: usize,
    pub num_items: usize,
    /// Deduplicated positive edges.
    pub edges: Vec<(u32, u32)>,
    user_from_item: Arc<SparseMatrix>,
    item_from_user: Arc<SparseMatrix>,
    /// Positive-item set per user, for negative sampling.
    user_items: Vec<Vec<u32>>,
}

impl BipartiteGraph {
    pub fn from_edges(num_users: usize, num_items: usize, mut edges: Vec<(u32, u32)>) -> Result<Self> {
        edges.sort_unstable();
        edges.dedup();
        if edges.is_empty() {
            return Err(Error::EmptyDataset("bipartite graph has no edges".into()));
        }
        let mut deg_u = vec![0usize; num_users];
        let mut deg_i = vec![0usize; num_items];
        let mut user_items = vec![Vec::new(); num_users];
        for &(u, i) in &edges {
            deg_u[u as usize] += 1;
            deg_i[i as usize] += 1;
            user_items[u as usize].push(i);
        }
        let mut user_rows = vec![Vec::new(); num_users];
        for &(u, i) in &edges {
            let w = 1.0 / ((deg_u[u as usize] * deg_i[i as usize]) as f64).sqrt();
            user_rows[u as usize].push((i, w));
        }
        let user_from_item = Arc::new(SparseMatrix {
            nrows: num_users,
            ncols: num_items,
            rows: user_rows,
        });
        let item_from_user = Arc::new(user_from_item.transpose());
        Ok(Self {
            num_users,
            num_items,
            edges,
            user_from_item,
            item_from_user,
            user_items,
        })
    }

    /// Builds the graph from the CF training split of a dataset.
    pub fn from_cf_train(d: &MarketDataset) -> Result<Self> {
        Self::from_edges(d.num_users, d.num_items, d.cf_train_pairs()?)
    }

    pub fn is_positive(&self, user: u32, item: u32) -> bool {
        self.user_items[user as usize].contains(&item)
    }
}

/// One propagation sweep: `out = mean(layer_0, ..., layer_L)` where layer
/// l+1 aggregates the opposite side's layer-l rows with the normalized
/// weights. `layers = 0` returns the input unchanged; isolated nodes keep
/// their layer-0 row.
pub fn propagate(g: &BipartiteGraph, e0: &EmbeddingTable, layers: usize) -> EmbeddingTable {
    let mut acc_u = e0.users.clone();
    let mut acc_i = e0.items.clone();
    let mut cur_u = e0.users.clone();
    let mut cur_i = e0.items.clone();
    for _ in 0..layers {
        let next_u = g.user_from_item.apply(&cur_i);
        let next_i = g.item_from_user.apply(&cur_u);
        acc_u += &next_u;
        acc_i += &next_i;
        cur_u = next_u;
        cur_i = next_i;
    }
    let scale = 1.0 / (layers + 1) as f64;
    EmbeddingTable {
        market_id: e0.market_id.clone(),
        dim: e0.dim,
        users: acc_u * scale,
        items: acc_i * scale,
    }
}

/// Collaborative pretraining hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CfConfig {
    pub dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub batch: usize,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            layers: 2,
            lr: 5e-3,
            epochs: 20,
            negatives_per_positive: 1,
            batch: 256,
        }
    }
}

/// Per-epoch training trace.
#[derive(Debug, Clone, Default)]
pub struct CfReport {
    pub train_losses: Vec<f64>,
    pub holdout_losses: Vec<f64>,
}

fn ranking_loss_value(su: f64, sneg: f64) -> f64 {
    // -log sigmoid(su - sneg), stable form.
    let d = su - sneg;
    d.max(0.0) - d + (-d.abs()).exp().ln_1p()
}

/// Mean pairwise ranking loss of held-out positives against seeded sampled
/// negatives, under the propagated embeddings. Used as the convergence
/// signal for the pretraining curve.
pub fn heldout_ranking_loss(
    d: &MarketDataset,
    g: &BipartiteGraph,
    base: &EmbeddingTable,
    layers: usize,
    seed: u64,
) -> Result<f64> {
    let propagated = propagate(g, base, layers);
    let heldout = d.cf_heldout_pairs()?;
    let mut rng = rng_from(seed);
    let mut total = 0.0;
    for &(u, i) in &heldout {
        let neg = sample_negative(g, u, &mut rng);
        let eu = propagated.users.row(u as usize);
        let su = eu.dot(&propagated.items.row(i as usize));
        let sn = eu.dot(&propagated.items.row(neg as usize));
        total += ranking_loss_value(su, sn);
    }
    Ok(total / heldout.len() as f64)
}

fn sample_negative(g: &BipartiteGraph, user: u32, rng: &mut rand_chacha::ChaCha8Rng) -> u32 {
    for _ in 0..100 {
        let j = rng.random_range(0..g.num_items) as u32;
        if !g.is_positive(user, j) {
            return j;
        }
    }
    // Degenerate near-complete graph; accept a positive rather than spin.
    rng.random_range(0..g.num_items) as u32
}

/// Trains base embeddings on the CF split with the pairwise ranking loss.
/// Returns the layer-0 table (`epochs = 0` returns the seeded init
/// unchanged); feed it through [`propagate`] for the final collaborative
/// embeddings.
pub fn train_cf(d: &MarketDataset, cfg: &CfConfig, seed: u64) -> Result<(EmbeddingTable, CfReport)> {
    let g = BipartiteGraph::from_cf_train(d)?;
    let counts = d.user_counts();
    if let Some(user) = (0..d.num_users).find(|&u| counts[u] == 0) {
        return Err(Error::Split(format!("user {user} has no training interactions")));
    }

    let mut rng = rng_from(seed);
    let mut params = ParamSet::new();
    let user_id = params.add("cf.users", glorot_uniform(d.num_users, cfg.dim, &mut rng));
    let item_id = params.add("cf.items", glorot_uniform(d.num_items, cfg.dim, &mut rng));
    let mut opt = Adam::new(AdamConfig::new(cfg.lr, 0.0));
    let mut report = CfReport::default();

    for epoch in 0..cfg.epochs {
        let mut pairs = g.edges.clone();
        pairs.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in pairs.chunks(cfg.batch) {
            let mut users = Vec::with_capacity(chunk.len() * cfg.negatives_per_positive);
            let mut pos = Vec::with_capacity(users.capacity());
            let mut neg = Vec::with_capacity(users.capacity());
            for &(u, i) in chunk {
                for _ in 0..cfg.negatives_per_positive {
                    users.push(u as usize);
                    pos.push(i as usize);
                    neg.push(sample_negative(&g, u, &mut rng) as usize);
                }
            }

            let mut tape = Tape::new();
            let mut bound = Bound::new();
            let u0 = bound.bind(&mut tape, &params, user_id);
            let i0 = bound.bind(&mut tape, &params, item_id);
            let (ubar, ibar) = propagate_tape(&mut tape, &g, u0, i0, cfg.layers);
            let bu = tape.gather_rows(ubar, users);
            let bi = tape.gather_rows(ibar, pos);
            let bj = tape.gather_rows(ibar, neg);
            let s_pos = tape.row_dot(bu, bi);
            let s_neg = tape.row_dot(bu, bj);
            let diff = tape.sub(s_pos, s_neg);
            let ones = vec![1.0; chunk.len() * cfg.negatives_per_positive];
            let per_pair = tape.bce_with_logits(diff, ones);
            let loss = tape.mean_all(per_pair);
            let loss_value = tape.value(loss)[[0, 0]];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    context: "train_cf".into(),
                    detail: format!("epoch {epoch} loss {loss_value}"),
                });
            }
            tape.backward(loss);
            params.zero_grads();
            bound.accumulate(&tape, &mut params);
            opt.step(&mut params)?;
            epoch_loss += loss_value;
            batches += 1;
        }
        report.train_losses.push(epoch_loss / batches.max(1) as f64);
        let base = table_from_params(d, cfg, &params, user_id, item_id);
        report
            .holdout_losses
            .push(heldout_ranking_loss(d, &g, &base, cfg.layers, seed ^ 0x5eed)?);
    }

    Ok((table_from_params(d, cfg, &params, user_id, item_id), report))
}

fn table_from_params(
    d: &MarketDataset,
    cfg: &CfConfig,
    params: &ParamSet,
    user_id: crate::nn::ParamId,
    item_id: crate::nn::ParamId,
) -> EmbeddingTable {
    EmbeddingTable {
        market_id: d.market_id.clone(),
        dim: cfg.dim,
        users: params.value(user_id).clone(),
        items: params.value(item_id).clone(),
    }
}

fn propagate_tape(
    tape: &mut Tape,
    g: &BipartiteGraph,
    u0: crate::nn::tape::NodeId,
    i0: crate::nn::tape::NodeId,
    layers: usize,
) -> (crate::nn::tape::NodeId, crate::nn::tape::NodeId) {
    let mut acc_u = u0;
    let mut acc_i = i0;
    let mut cur_u = u0;
    let mut cur_i = i0;
    for _ in 0..layers {
        let next_u = tape.sp_mul(&g.user_from_item, Arc::clone(&g.item_from_user), cur_i);
        let next_i = tape.sp_mul(&g.item_from_user, Arc::clone(&g.user_from_item), cur_u);
        acc_u = tape.add(acc_u, next_u);
        acc_i = tape.add(acc_i, next_i);
        cur_u = next_u;
        cur_i = next_i;
    }
    let scale = 1.0 / (layers + 1) as f64;
    (tape.scale(acc_u, scale), tape.scale(acc_i, scale))
}

// ---------------------------------------------------------------------------
// Embedding file format: magic, JSON header line, then row-major
// little-endian f64 values (users, then items). Round trips are bit-exact.
// This is also the export format consumed by external visualization.
// ---------------------------------------------------------------------------

const EMB_MAGIC: &[u8; 8] = b"FMEMB001";

#[derive(serde::Serialize, serde::Deserialize)]
struct EmbHeader {
    market_id: String,
    dim: usize,
    num_users: usize,
    num_items: usize,
}

pub fn export_embeddings(t: &EmbeddingTable, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(EMB_MAGIC)?;
    let header = serde_json::to_vec(&EmbHeader {
        market_id: t.market_id.clone(),
        dim: t.dim,
        num_users: t.num_users(),
        num_items: t.num_items(),
    })?;
    f.write_all(&(header.len() as u32).to_le_bytes())?;
    f.write_all(&header)?;
    for v in t.users.iter().chain(t.items.iter()) {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Imports an embedding file; when `expected_dim` is given, a differing
/// stored dimension is an error naming both.
pub fn import_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingTable> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != EMB_MAGIC {
        return Err(Error::Config(format!("{} is not an embedding file", path.display())));
    }
    let mut len = [0u8; 4];
    f.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    f.read_exact(&mut header)?;
    let header: EmbHeader = serde_json::from_slice(&header)?;
    if let Some(expected) = expected_dim {
        if header.dim != expected {
            return Err(Error::Shape {
                context: format!("embedding import {}", path.display()),
                expected: format!("dim {expected}"),
                found: format!("dim {}", header.dim),
            });
        }
    }
    let total = (header.num_users + header.num_items) * header.dim;
    let mut values = Vec::with_capacity(total);
    let mut buf = [0u8; 8];
    for _ in 0..total {
        f.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    let users = Array2::from_shape_vec(
        (header.num_users, header.dim),
        values[..header.num_users * header.dim].to_vec(),
    )
    .expect("length checked");
    let items = Array2::from_shape_vec(
        (header.num_items, header.dim),
        values[header.num_users * header.dim..].to_vec(),
    )
    .expect("length checked");
    Ok(EmbeddingTable {
        market_id: header.market_id,
        dim: header.dim,
        users,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, preprocess, SyntheticSpec};
    use ndarray::array;

    fn single_pair_table() -> EmbeddingTable {
        EmbeddingTable {
            market_id: "t".into(),
            dim: 2,
            users: array![[1.0, 0.0]],
            items: array![[0.0, 2.0]],
        }
    }

    #[test]
    fn propagate_zero_layers_is_identity() {
        let g = BipartiteGraph::from_edges(1, 1, vec![(0, 0)]).unwrap();
        let e0 = single_pair_table();
        let out = propagate(&g, &e0, 0);
        assert_eq!(out.users, e0.users);
        assert_eq!(out.items, e0.items);
    }

    #[test]
    fn propagate_single_edge_one_layer_averages() {
        // deg(u) = deg(i) = 1 so the weight is 1; the mean over layers 0..1
        // is (e_u + e_i)/2 on both sides.
        let g = BipartiteGraph::from_edges(1, 1, vec![(0, 0)]).unwrap();
        let out = propagate(&g, &single_pair_table(), 1);
        assert_eq!(out.users, array![[0.5, 1.0]]);
        assert_eq!(out.items, array![[0.5, 1.0]]);
    }

    #[test]
    fn disconnected_components_stay_independent() {
        let g = BipartiteGraph::from_edges(2, 2, vec![(0, 0), (1, 1)]).unwrap();
        let e0 = EmbeddingTable {
            market_id: "t".into(),
            dim: 1,
            users: array![[1.0], [100.0]],
            items: array![[2.0], [200.0]],
        };
        let out = propagate(&g, &e0, 2);
        // Component 0 never sees component 1's values.
        let e0_only = EmbeddingTable {
            market_id: "t".into(),
            dim: 1,
            users: array![[1.0], [0.0]],
            items: array![[2.0], [0.0]],
        };
        let out0 = propagate(&g, &e0_only, 2);
        assert_eq!(out.users[[0, 0]], out0.users[[0, 0]]);
        assert_eq!(out.items[[0, 0]], out0.items[[0, 0]]);
    }

    #[test]
    fn propagation_is_linear() {
        let g = BipartiteGraph::from_edges(3, 2, vec![(0, 0), (1, 0), (2, 1), (1, 1)]).unwrap();
        let mut rng = rng_from(4);
        let mut mk = |rng: &mut rand_chacha::ChaCha8Rng| EmbeddingTable {
            market_id: "t".into(),
            dim: 3,
            users: glorot_uniform(3, 3, rng),
            items: glorot_uniform(2, 3, rng),
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let (alpha, beta) = (0.7, -1.3);
        let combo = EmbeddingTable {
            market_id: "t".into(),
            dim: 3,
            users: &a.users * alpha + &b.users * beta,
            items: &a.items * alpha + &b.items * beta,
        };
        let lhs = propagate(&g, &combo, 2);
        let pa = propagate(&g, &a, 2);
        let pb = propagate(&g, &b, 2);
        let rhs_users = &pa.users * alpha + &pb.users * beta;
        for (x, y) in lhs.users.iter().zip(rhs_users.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn prepared_market(seed: u64) -> MarketDataset {
        let spec = SyntheticSpec {
            num_markets: 1,
            users_per_market: 24,
            items_per_market: 16,
            interactions_per_user: 8,
            seed,
            ..Default::default()
        };
        let d = generate_synthetic(&spec).unwrap().remove(0);
        preprocess(&d, 0, (8, 1, 1), seed).unwrap()
    }

    #[test]
    fn zero_epochs_returns_seeded_init() {
        let d = prepared_market(5);
        let cfg = CfConfig { epochs: 0, dim: 4, ..Default::default() };
        let (t1, _) = train_cf(&d, &cfg, 9).unwrap();
        let mut rng = rng_from(9);
        let expected_users = glorot_uniform(d.num_users, 4, &mut rng);
        assert_eq!(t1.users, expected_users);
    }

    #[test]
    fn block_structure_separates_scores() {
        // Two disjoint user/item blocks; after training, in-block propagated
        // scores should exceed out-of-block scores on average.
        let mut records = Vec::new();
        for u in 0..4u32 {
            for rep in 0..4u32 {
                let item = (u / 2) * 2 + ((u + rep) % 2);
                records.push(crate::data::InteractionRecord {
                    user: u,
                    item,
                    rating: None,
                    label: true,
                    timestamp: Some(rep as i64),
                });
            }
        }
        let d = MarketDataset::new("blocks", records).unwrap();
        let d = crate::data::split_cf_leave_one_out(&d, 0).unwrap();
        let cfg = CfConfig { dim: 8, epochs: 60, lr: 0.05, ..Default::default() };
        let (base, _) = train_cf(&d, &cfg, 3).unwrap();
        let g = BipartiteGraph::from_cf_train(&d).unwrap();
        let p = propagate(&g, &base, cfg.layers);
        let mut in_block = 0.0;
        let mut out_block = 0.0;
        for u in 0..4usize {
            for i in 0..4usize {
                let s = p.users.row(u).dot(&p.items.row(i));
                if u / 2 == i / 2 {
                    in_block += s;
                } else {
                    out_block += s;
                }
            }
        }
        assert!(
            in_block / 8.0 > out_block / 8.0,
            "in {in_block} out {out_block}"
        );
    }

    #[test]
    fn holdout_loss_decreases() {
        let d = prepared_market(11);
        let cfg = CfConfig { epochs: 25, dim: 8, ..Default::default() };
        let (_, report) = train_cf(&d, &cfg, 13).unwrap();
        let first = report.holdout_losses[0];
        let last = *report.holdout_losses.last().unwrap();
        assert!(last < first, "holdout loss {first} -> {last}");
    }

    #[test]
    fn embedding_round_trip_bit_exact() {
        let t = EmbeddingTable {
            market_id: "es".into(),
            dim: 3,
            users: array![[0.1, 0.2, -0.3], [1.0 / 3.0, 2.0_f64.sqrt(), 1e-300]],
            items: array![[5.5, -6.25, 7.0]],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emb");
        export_embeddings(&t, &path).unwrap();
        let back = import_embeddings(&path, Some(3)).unwrap();
        assert_eq!(t, back);
        for (a, b) in t.users.iter().zip(back.users.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn import_dimension_mismatch_names_both() {
        let t = single_pair_table();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emb");
        export_embeddings(&t, &path).unwrap();
        let err = import_embeddings(&path, Some(16)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("16") && msg.contains('2'), "{msg}");
    }
}
