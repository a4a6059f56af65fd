//! Federated codebook training across in-process market clients.
//!
//! One round: the server broadcasts the global federated codebooks, every
//! client adapts its local codebook to the new priors (everything else
//! frozen), trains its full quantizer locally, perturbs its federated
//! codebooks with zero-mean Laplace noise, and uploads them; the server
//! aggregates index-aligned (global codeword j is the mean of the clients'
//! codeword j) and the next round begins. Clients run their local phase
//! concurrently; aggregation is the synchronization barrier.
//!
//! Three rules keep market data local. Only [`FederatedMessage`] crosses
//! the client boundary, and it can only be built from federated-role
//! codebooks: local codebooks, residuals, embeddings, and raw interactions
//! are not representable in it. Messages pass through an explicit
//! serialize/deserialize boundary so the wire payload stays auditable.
//! And the Laplace mechanism runs before upload, so the server never sees
//! exact client codewords.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cf::EmbeddingTable;
use crate::error::{Error, Result};
use crate::nn::{glorot_uniform, Mat};
use crate::par::map_jobs_mut;
use crate::quantizer::{Codebook, Entity, LossReport, QuantizerStream, Role};
use crate::seeding::{derive_seed, rng_from};

/// Local differential privacy configuration: per-coordinate Laplace scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LdpConfig {
    pub scale_b: f64,
    pub enabled: bool,
}

impl LdpConfig {
    pub fn new(scale_b: f64) -> Self {
        Self {
            scale_b,
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        Self {
            scale_b: 0.0,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_b < 0.0 || !self.scale_b.is_finite() {
            return Err(Error::Config(format!(
                "Laplace scale {} must be nonnegative",
                self.scale_b
            )));
        }
        Ok(())
    }
}

/// One Laplace(0, b) draw by inverse CDF.
fn laplace_draw(rng: &mut rand_chacha::ChaCha8Rng, b: f64) -> f64 {
    let r = loop {
        let r: f64 = rng.random();
        if r > 0.0 {
            break r;
        }
    };
    let u = r - 0.5;
    -b * u.signum() * (-2.0 * u.abs()).ln_1p()
}

/// Adds independent Laplace(0, b) noise to every coordinate of a federated
/// codebook. `b = 0` or a disabled config returns the input bit-exactly.
/// Applying this to a local-role codebook is a privacy-wall violation:
/// local codebooks never leave the client, perturbed or not.
pub fn ldp_perturb(book: &Codebook, cfg: &LdpConfig, seed: u64) -> Result<Codebook> {
    cfg.validate()?;
    if book.role() != Role::Federated {
        return Err(Error::PrivacyWall(
            "ldp_perturb applies only to federated codebooks; local codebooks are never uploaded"
                .into(),
        ));
    }
    if !cfg.enabled || cfg.scale_b == 0.0 {
        return Ok(book.clone());
    }
    let mut rng = rng_from(seed);
    let mut codewords = book.codewords().clone();
    for v in codewords.iter_mut() {
        *v += laplace_draw(&mut rng, cfg.scale_b);
    }
    Codebook::new(codewords, Role::Federated, book.entity())
}

/// The only payload a client ever uploads: its round number, market id,
/// and the two perturbed federated codebooks. Constructible solely from
/// federated-role codebooks; immutable once created.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FederatedMessage {
    round: u32,
    market_id: String,
    user_fed: Mat,
    item_fed: Mat,
}

impl FederatedMessage {
    pub fn new(
        round: u32,
        market_id: impl Into<String>,
        user_book: &Codebook,
        item_book: &Codebook,
    ) -> Result<Self> {
        for (book, entity) in [(user_book, Entity::User), (item_book, Entity::Item)] {
            if book.role() != Role::Federated {
                return Err(Error::PrivacyWall(format!(
                    "cannot build a federated message from a {:?}-role codebook",
                    book.role()
                )));
            }
            if book.entity() != entity {
                return Err(Error::Config(format!(
                    "expected {entity:?} codebook, found {:?}",
                    book.entity()
                )));
            }
        }
        Ok(Self {
            round,
            market_id: market_id.into(),
            user_fed: user_book.codewords().clone(),
            item_fed: item_book.codewords().clone(),
        })
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn market_id(&self) -> &str {
        &self.market_id
    }

    pub fn user_fed(&self) -> &Mat {
        &self.user_fed
    }

    pub fn item_fed(&self) -> &Mat {
        &self.item_fed
    }

    /// Number of codebook values carried: `2 * T * d_latent`.
    pub fn payload_values(&self) -> usize {
        self.user_fed.len() + self.item_fed.len()
    }

    /// Wire form. The simulated transport always round-trips through this
    /// so the payload is exactly what a real network would carry.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

/// One ledger row: what each client transmitted in a round.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: u32,
    pub values_per_client: usize,
    pub cumulative_per_client: usize,
}

/// Server-side state: the global federated codebooks plus the
/// transmitted-parameter ledger.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub user_fed: Mat,
    pub item_fed: Mat,
    pub round: u32,
    pub ledger: Vec<LedgerEntry>,
}

impl ServerState {
    /// Seeded uniform initialization of the global codebooks. Every client
    /// receives this same table in the round-1 broadcast, so codeword j
    /// starts as the same semantic slot everywhere.
    pub fn init(codebook_size: usize, d_latent: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        Self {
            user_fed: glorot_uniform(codebook_size, d_latent, &mut rng),
            item_fed: glorot_uniform(codebook_size, d_latent, &mut rng),
            round: 0,
            ledger: Vec::new(),
        }
    }
}

/// Index-aligned aggregation: global codeword j becomes the (optionally
/// weighted) mean of the clients' codeword j, independently per entity
/// codebook. Requires exactly `expected_clients` messages from the same
/// round with matching shapes.
///
/// The mean is computed as `m_0 + sum_k w_k (m_k - m_0)`, which is the same
/// weighted mean but makes consensus a bit-exact fixpoint: identical
/// uploads aggregate to exactly that codebook, so idle rounds cannot
/// drift the global state.
pub fn server_aggregate(
    state: &mut ServerState,
    msgs: &[FederatedMessage],
    expected_clients: usize,
    weights: Option<&[f64]>,
) -> Result<()> {
    if msgs.len() != expected_clients {
        return Err(Error::Config(format!(
            "aggregation expected {expected_clients} client messages, got {} (full participation)",
            msgs.len()
        )));
    }
    let round = msgs[0].round;
    if msgs.iter().any(|m| m.round != round) {
        return Err(Error::Config("aggregation mixes rounds".into()));
    }
    for m in msgs {
        if m.user_fed.raw_dim() != state.user_fed.raw_dim()
            || m.item_fed.raw_dim() != state.item_fed.raw_dim()
        {
            return Err(Error::Shape {
                context: format!("aggregation message from `{}`", m.market_id),
                expected: format!("{:?}", state.user_fed.raw_dim()),
                found: format!("{:?}", m.user_fed.raw_dim()),
            });
        }
    }
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != msgs.len() {
                return Err(Error::Config("aggregation weights length mismatch".into()));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::Config("aggregation weights must sum to a positive value".into()));
            }
            w.iter().map(|&x| x / total).collect()
        }
        None => vec![1.0 / msgs.len() as f64; msgs.len()],
    };
    let mut user = msgs[0].user_fed.clone();
    let mut item = msgs[0].item_fed.clone();
    for (m, &wk) in msgs.iter().zip(&w).skip(1) {
        user.scaled_add(wk, &(&m.user_fed - &msgs[0].user_fed));
        item.scaled_add(wk, &(&m.item_fed - &msgs[0].item_fed));
    }
    state.user_fed = user;
    state.item_fed = item;
    state.round = round;
    Ok(())
}

/// One market's state inside the federation.
pub struct MarketClient {
    pub market_id: String,
    pub user_stream: QuantizerStream,
    pub item_stream: QuantizerStream,
    pub embeddings: EmbeddingTable,
    /// Positive training pairs driving the quantizer losses.
    pub pairs: Vec<(u32, u32)>,
    pub lambda: f64,
    pub seed: u64,
}

impl MarketClient {
    pub fn new(
        user_stream: QuantizerStream,
        item_stream: QuantizerStream,
        embeddings: EmbeddingTable,
        pairs: Vec<(u32, u32)>,
        lambda: f64,
        seed: u64,
    ) -> Result<Self> {
        if user_stream.cfg.d_in != embeddings.dim || item_stream.cfg.d_in != embeddings.dim {
            return Err(Error::Shape {
                context: "market client".into(),
                expected: format!("stream input dim {}", embeddings.dim),
                found: format!(
                    "user {}, item {}",
                    user_stream.cfg.d_in, item_stream.cfg.d_in
                ),
            });
        }
        Ok(Self {
            market_id: embeddings.market_id.clone(),
            user_stream,
            item_stream,
            embeddings,
            pairs,
            lambda,
            seed,
        })
    }

    /// Adaptation then local training, as one round's client-side phase.
    fn local_phase(&mut self, round: u32, cfg: &RoundConfig) -> Result<Option<LossReport>> {
        let mut last = None;
        if cfg.adapt_epochs > 0 {
            self.user_stream.set_adaptation_phase();
            self.item_stream.set_adaptation_phase();
            let mut rng = rng_from(derive_seed(self.seed, "adapt", &[round as u64]));
            for _ in 0..cfg.adapt_epochs {
                last = Some(crate::quantizer::train_epoch(
                    &mut self.user_stream,
                    &mut self.item_stream,
                    &self.pairs,
                    &self.embeddings,
                    self.lambda,
                    &mut rng,
                )?);
            }
            self.user_stream.set_training_phase();
            self.item_stream.set_training_phase();
        }
        let mut rng = rng_from(derive_seed(self.seed, "local", &[round as u64]));
        for _ in 0..cfg.local_epochs {
            last = Some(crate::quantizer::train_epoch(
                &mut self.user_stream,
                &mut self.item_stream,
                &self.pairs,
                &self.embeddings,
                self.lambda,
                &mut rng,
            )?);
        }
        Ok(last)
    }
}

/// Round hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundConfig {
    pub local_epochs: usize,
    pub adapt_epochs: usize,
    pub ldp: LdpConfig,
}

/// What one federated round produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    /// Market id -> mean loss over the round's last epoch (None when the
    /// round ran zero epochs).
    pub client_losses: Vec<(String, Option<LossReport>)>,
    pub payload_values_per_client: usize,
    pub payload_bytes: Vec<usize>,
}

/// Executes one full federated round over all clients (full participation:
/// any client error aborts the round). Deterministic given the client
/// seeds, regardless of how the per-client work is scheduled.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [MarketClient],
    cfg: &RoundConfig,
) -> Result<RoundReport> {
    cfg.ldp.validate()?;
    if clients.is_empty() {
        return Err(Error::Config("run_round needs at least one client".into()));
    }
    let round = server.round + 1;

    // Broadcast: hard synchronization, the client's federated codebooks are
    // replaced by the global ones.
    for client in clients.iter_mut() {
        client.user_stream.load_fed_codebook(server.user_fed.clone())?;
        client.item_stream.load_fed_codebook(server.item_fed.clone())?;
    }

    let ldp = cfg.ldp;
    let results: Vec<Result<(String, Option<LossReport>, Vec<u8>)>> =
        map_jobs_mut(clients, |client| {
            let losses = client.local_phase(round, cfg)?;
            let user_book = ldp_perturb(
                &client.user_stream.fed_codebook(),
                &ldp,
                derive_seed(client.seed, "ldp-user", &[round as u64]),
            )?;
            let item_book = ldp_perturb(
                &client.item_stream.fed_codebook(),
                &ldp,
                derive_seed(client.seed, "ldp-item", &[round as u64]),
            )?;
            let msg = FederatedMessage::new(round, &client.market_id, &user_book, &item_book)?;
            Ok((client.market_id.clone(), losses, msg.to_bytes()?))
        });

    let mut client_losses = Vec::with_capacity(results.len());
    let mut payload_bytes = Vec::with_capacity(results.len());
    let mut msgs = Vec::with_capacity(results.len());
    for r in results {
        let (market_id, losses, bytes) = r?;
        payload_bytes.push(bytes.len());
        msgs.push(FederatedMessage::from_bytes(&bytes)?);
        client_losses.push((market_id, losses));
    }

    let expected = msgs.len();
    server_aggregate(server, &msgs, expected, None)?;

    let payload_values_per_client = msgs[0].payload_values();
    let cumulative = server
        .ledger
        .last()
        .map(|e| e.cumulative_per_client)
        .unwrap_or(0)
        + payload_values_per_client;
    server.ledger.push(LedgerEntry {
        round,
        values_per_client: payload_values_per_client,
        cumulative_per_client: cumulative,
    });

    Ok(RoundReport {
        round,
        client_losses,
        payload_values_per_client,
        payload_bytes,
    })
}

/// The same client-side schedule with federation disabled: no broadcast,
/// no upload, no aggregation. Used by the purely-local ablation so its
/// training compute matches the federated runs.
pub fn run_isolated_round(
    clients: &mut [MarketClient],
    round: u32,
    cfg: &RoundConfig,
) -> Result<Vec<(String, Option<LossReport>)>> {
    let results: Vec<Result<(String, Option<LossReport>)>> = map_jobs_mut(clients, |client| {
        let losses = client.local_phase(round, cfg)?;
        Ok((client.market_id.clone(), losses))
    });
    results.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Gradient-equivalence check for index-aligned aggregation.
// ---------------------------------------------------------------------------

fn euclidean_nn(point: ndarray::ArrayView1<f64>, codebook: &Mat) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in codebook.rows().into_iter().enumerate() {
        let mut d = 0.0;
        for (a, b) in point.iter().zip(c.iter()) {
            d += (a - b) * (a - b);
        }
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn quantization_gradients(points: &Mat, codebook: &Mat) -> Mat {
    // Gradient of sum_e ||e - c_nn(e)||^2 w.r.t. codeword j:
    // sum over assigned points of 2 (c_j - e).
    let mut grads = Mat::zeros(codebook.raw_dim());
    for p in points.rows() {
        let j = euclidean_nn(p, codebook);
        for d in 0..codebook.ncols() {
            grads[[j, d]] += 2.0 * (codebook[[j, d]] - p[d]);
        }
    }
    grads
}

/// Compares the codeword gradients of the Euclidean quantization loss
/// computed over the union of all shards against the sum of per-shard
/// gradients, with hard nearest-neighbor assignments under the shared
/// codebook. Returns the max over codewords of the L2 norm of the
/// difference; empty shards contribute zero.
pub fn theorem1_check(shards: &[Mat], codebook: &Mat) -> f64 {
    let d = codebook.ncols();
    let total: usize = shards.iter().map(|s| s.nrows()).sum();
    let mut union = Mat::zeros((total, d));
    let mut off = 0;
    for s in shards {
        for r in 0..s.nrows() {
            union.row_mut(off + r).assign(&s.row(r));
        }
        off += s.nrows();
    }
    let global = quantization_gradients(&union, codebook);

    let mut local_sum = Mat::zeros(codebook.raw_dim());
    for s in shards {
        local_sum += &quantization_gradients(s, codebook);
    }

    let mut max_dev = 0.0_f64;
    for j in 0..codebook.nrows() {
        let mut norm2 = 0.0;
        for k in 0..d {
            let diff = global[[j, k]] - local_sum[[j, k]];
            norm2 += diff * diff;
        }
        max_dev = max_dev.max(norm2.sqrt());
    }
    max_dev
}

/// Random instance for the equivalence check: K shards of n points each in
/// d dimensions against a T-codeword table.
pub fn theorem1_random_instance(k: usize, t: usize, d: usize, n_total: usize, seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    let codebook = glorot_uniform(t, d, &mut rng);
    let mut shards = Vec::with_capacity(k);
    let base = n_total / k;
    for shard in 0..k {
        let n = if shard == k - 1 { n_total - base * (k - 1) } else { base };
        shards.push(Mat::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)));
    }
    theorem1_check(&shards, &codebook)
}

// ---------------------------------------------------------------------------
// Communication accounting.
// ---------------------------------------------------------------------------

/// Transmitted-parameter comparison between codebook synchronization and a
/// model-sharing scheme that uploads the CTR backbone every round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommCostReport {
    pub rounds: usize,
    /// `2 * T * d_latent`: both federated codebooks, per client per round.
    pub codebook_values_per_client_per_round: usize,
    pub codebook_values_per_client_total: usize,
    /// Dense tower parameters of the reference backbone (what model-sharing
    /// schemes synchronize every round).
    pub backbone_dense_params: usize,
    /// ID-embedding parameters of the backbone, reported for context; they
    /// are not meaningfully shareable across disjoint ID spaces.
    pub backbone_embedding_params: usize,
    /// backbone_dense_params / codebook payload per round.
    pub dense_ratio: f64,
}

impl std::fmt::Display for CommCostReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "transmitted parameters per client")?;
        writeln!(
            f,
            "  codebook sync : {:>12} per round  {:>14} total ({} rounds)",
            self.codebook_values_per_client_per_round,
            self.codebook_values_per_client_total,
            self.rounds
        )?;
        writeln!(
            f,
            "  model sharing : {:>12} per round  {:>14} total (dense tower)",
            self.backbone_dense_params,
            self.backbone_dense_params * self.rounds
        )?;
        writeln!(
            f,
            "  backbone id-embedding params (not shareable across markets): {}",
            self.backbone_embedding_params
        )?;
        write!(f, "  reduction: {:.1}x", self.dense_ratio)
    }
}

/// Counts transmitted parameters for both schemes. The reference backbone
/// embeds `raw_fields` categorical fields at `emb_dim` and stacks the given
/// tower widths onto a single logit output.
#[allow(clippy::too_many_arguments)]
pub fn comm_cost_report(
    codebook_size: usize,
    d_latent: usize,
    rounds: usize,
    raw_fields: usize,
    emb_dim: usize,
    tower: &[usize],
    num_users: usize,
    num_items: usize,
) -> CommCostReport {
    let per_round = 2 * codebook_size * d_latent;
    let mut dense = 0usize;
    let mut prev = raw_fields * emb_dim;
    for &w in tower {
        dense += prev * w + w;
        prev = w;
    }
    dense += prev + 1; // final logit layer
    CommCostReport {
        rounds,
        codebook_values_per_client_per_round: per_round,
        codebook_values_per_client_total: per_round * rounds,
        backbone_dense_params: dense,
        backbone_embedding_params: (num_users + num_items) * emb_dim,
        dense_ratio: dense as f64 / per_round as f64,
    }
}
