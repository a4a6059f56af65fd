//! Dual-layer residual quantized autoencoder, one stream per entity type
//! per market.
//!
//! The encoder maps a collaborative embedding to a latent `z`, which is the
//! level-0 residual. Level 0 quantizes against the federated codebook (the
//! one synchronized across markets), the leftover residual `r1 = z - c0`
//! quantizes against the local codebook, and the quantized latent is
//! exactly `z_q = c0 + c1`. Assignment scores are cosine similarities put
//! through a temperature softmax; the selected index is the argmax with
//! ties broken toward the lowest index.
//!
//! Training losses:
//! - code loss: negative log assignment probability of the selected
//!   codeword at both levels (codebooks and encoder learn through this);
//! - alignment loss: in-batch softmax that keeps `z_q` closest to its own
//!   input embedding among the batch's candidates;
//! - reconstruction loss: logistic loss on the inner product of decoded
//!   user/item embeddings against the interaction label.
//!
//! The argmax is not differentiable, so `z_q` enters the alignment and
//! reconstruction paths through a straight-through node: its gradient is
//! handed to `z` unchanged, and codebooks receive gradients only from the
//! code loss. A residual that is exactly zero (encoder output landing on a
//! codeword) would make cosine similarity undefined; those rows fall back
//! to raw dot-product scores, which keeps the batch trainable and selects
//! index 0 on total ties, without injecting noise.

use std::path::Path;

use ndarray::Array1;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cf::EmbeddingTable;
use crate::error::{Error, Result};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::tape::{Bound, NodeId, Tape};
use crate::nn::{glorot_uniform, Activation, Mat, Mlp, MlpSpec, ParamId, ParamSet};
use crate::seeding::rng_from;

/// Norm threshold under which a residual is treated as exactly zero.
const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// First-level codebook, synchronized through the server.
    Federated,
    /// Second-level codebook, never transmitted.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entity {
    User,
    Item,
}

impl Entity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Entity::User => "user",
            Entity::Item => "item",
        }
    }
}

/// A `T x d_latent` table of codewords with an immutable role/entity tag.
#[derive(Debug, Clone)]
pub struct Codebook {
    codewords: Mat,
    role: Role,
    entity: Entity,
}

impl Codebook {
    pub fn new(codewords: Mat, role: Role, entity: Entity) -> Result<Self> {
        if codewords.nrows() < 2 {
            return Err(Error::Config(format!(
                "codebook needs at least 2 codewords, got {}",
                codewords.nrows()
            )));
        }
        if codewords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "codebook".into(),
                detail: "non-finite codeword entry".into(),
            });
        }
        Ok(Self {
            codewords,
            role,
            entity,
        })
    }

    pub fn codewords(&self) -> &Mat {
        &self.codewords
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn entity(&self) -> Entity {
        self.entity
    }

    pub fn size(&self) -> usize {
        self.codewords.nrows()
    }

    pub fn width(&self) -> usize {
        self.codewords.ncols()
    }
}

/// Output of quantizing one embedding.
#[derive(Debug, Clone)]
pub struct QuantizationResult {
    /// Encoder latent, also the level-0 residual.
    pub z: Array1<f64>,
    pub index0: usize,
    pub index1: usize,
    pub c0: Array1<f64>,
    pub c1: Array1<f64>,
    /// First residual, exactly `z - c0`.
    pub r1: Array1<f64>,
    /// Quantized latent, exactly `c0 + c1`.
    pub z_q: Array1<f64>,
    pub probs0: Array1<f64>,
    pub probs1: Array1<f64>,
}

/// Hyperparameters of one quantizer stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub d_in: usize,
    pub d_latent: usize,
    pub codebook_size: usize,
    pub tau: f64,
    pub lr: f64,
    pub l2: f64,
    pub batch: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_latent: 16,
            codebook_size: 256,
            tau: 0.1,
            lr: 1e-3,
            l2: 0.0,
            batch: 256,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if self.d_in == 0 || self.d_latent == 0 || self.batch == 0 {
            return Err(Error::Config("quantizer dims and batch must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder/decoder parameters plus the two-level codebook pair for one
/// entity type in one market.
#[derive(Debug, Clone)]
pub struct QuantizerStream {
    pub market_id: String,
    pub entity: Entity,
    pub cfg: QuantizerConfig,
    params: ParamSet,
    encoder: Mlp,
    decoder: Mlp,
    fed_id: ParamId,
    local_id: ParamId,
    opt: Adam,
    /// Local codebook is re-seeded from the first training batch's
    /// residual latents; false until that happened.
    local_initialized: bool,
    init_seed: u64,
}

impl QuantizerStream {
    /// Builds a stream with seeded encoder/decoder (one hidden layer of
    /// width `2 * d_in`, relu) and seeded uniform codebooks. The local
    /// codebook is replaced by a data-dependent sample on the first
    /// training batch.
    pub fn new(
        market_id: impl Into<String>,
        entity: Entity,
        cfg: QuantizerConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(seed);
        let mut params = ParamSet::new();
        let enc_spec = MlpSpec::new(vec![2 * cfg.d_in, cfg.d_latent], Activation::Relu)?;
        let dec_spec = MlpSpec::new(vec![2 * cfg.d_in, cfg.d_in], Activation::Relu)?;
        let encoder = Mlp::init(&mut params, "encoder", cfg.d_in, enc_spec, &mut rng);
        let decoder = Mlp::init(&mut params, "decoder", cfg.d_latent, dec_spec, &mut rng);
        let fed_id = params.add(
            "fed_codebook",
            glorot_uniform(cfg.codebook_size, cfg.d_latent, &mut rng),
        );
        let local_id = params.add(
            "local_codebook",
            glorot_uniform(cfg.codebook_size, cfg.d_latent, &mut rng),
        );
        let opt = Adam::new(AdamConfig::new(cfg.lr, cfg.l2));
        Ok(Self {
            market_id: market_id.into(),
            entity,
            cfg,
            params,
            encoder,
            decoder,
            fed_id,
            local_id,
            opt,
            local_initialized: false,
            init_seed: seed,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn fed_codebook(&self) -> Codebook {
        Codebook {
            codewords: self.params.value(self.fed_id).clone(),
            role: Role::Federated,
            entity: self.entity,
        }
    }

    pub fn local_codebook(&self) -> Codebook {
        Codebook {
            codewords: self.params.value(self.local_id).clone(),
            role: Role::Local,
            entity: self.entity,
        }
    }

    /// Overwrites the federated codebook (server broadcast).
    pub fn load_fed_codebook(&mut self, codewords: Mat) -> Result<()> {
        let current = self.params.value(self.fed_id);
        if current.raw_dim() != codewords.raw_dim() {
            return Err(Error::Shape {
                context: "load_fed_codebook".into(),
                expected: format!("{:?}", current.raw_dim()),
                found: format!("{:?}", codewords.raw_dim()),
            });
        }
        self.params.set_value(self.fed_id, codewords);
        Ok(())
    }

    /// Adaptation phase: only the local codebook learns.
    pub fn set_adaptation_phase(&mut self) {
        self.params.set_all_trainable(false);
        self.params.set_trainable(self.local_id, true);
    }

    /// Full training phase: everything learns.
    pub fn set_training_phase(&mut self) {
        self.params.set_all_trainable(true);
    }

    /// Freezes both codebooks, leaving encoder/decoder trainable.
    pub fn freeze_codebooks(&mut self) {
        self.params.set_trainable(self.fed_id, false);
        self.params.set_trainable(self.local_id, false);
    }

    pub fn encode(&self, e: &Mat) -> Result<Mat> {
        self.encoder.forward_plain(&self.params, e)
    }

    pub fn decode(&self, z_q: &Mat) -> Result<Mat> {
        self.decoder.forward_plain(&self.params, z_q)
    }

    /// Number of scalar values in the federated codebook (`T * d_latent`),
    /// i.e. what one upload of this stream costs.
    pub fn fed_codebook_values(&self) -> usize {
        self.cfg.codebook_size * self.cfg.d_latent
    }

    /// Samples the local codebook from the first batch's residual latents
    /// (plus a small jitter so duplicated samples stay distinct). No-op
    /// after the first call.
    fn ensure_local_init(&mut self, e_batch: &Mat) -> Result<()> {
        if self.local_initialized {
            return Ok(());
        }
        let z = self.encode(e_batch)?;
        check_rows_nonzero(&z, "encoder latent during local codebook init")?;
        let fed = self.params.value(self.fed_id).clone();
        check_rows_nonzero(&fed, "federated codeword")?;
        let idx0 = assign_rows(&z, &fed);
        let mut residuals = Mat::zeros((z.nrows(), z.ncols()));
        for b in 0..z.nrows() {
            for d in 0..z.ncols() {
                residuals[[b, d]] = z[[b, d]] - fed[[idx0[b], d]];
            }
        }
        let mut rng = rng_from(crate::seeding::derive_seed(self.init_seed, "local-init", &[]));
        let jitter = Normal::new(0.0, 0.01 / (self.cfg.d_latent as f64).sqrt()).unwrap();
        let t = self.cfg.codebook_size;
        let mut book = Mat::zeros((t, self.cfg.d_latent));
        for j in 0..t {
            let src = rng.random_range(0..residuals.nrows());
            for d in 0..self.cfg.d_latent {
                book[[j, d]] = residuals[[src, d]] + jitter.sample(&mut rng);
            }
        }
        self.params.set_value(self.local_id, book);
        self.local_initialized = true;
        Ok(())
    }

    /// Persists the stream (parameters + config + identity metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "market_id": self.market_id,
            "entity": self.entity,
            "cfg": self.cfg,
            "local_initialized": self.local_initialized,
            "init_seed": self.init_seed,
        });
        crate::nn::checkpoint::save_params(&self.params, meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = crate::nn::checkpoint::load_params(path)?;
        let cfg: QuantizerConfig = serde_json::from_value(meta["cfg"].clone())?;
        let entity: Entity = serde_json::from_value(meta["entity"].clone())?;
        let market_id = meta["market_id"].as_str().unwrap_or("market").to_string();
        let init_seed = meta["init_seed"].as_u64().unwrap_or(0);
        let local_initialized = meta["local_initialized"].as_bool().unwrap_or(true);
        let mut stream = Self::new(&market_id, entity, cfg, init_seed)?;
        if params.len() != stream.params.len() {
            return Err(Error::Config(format!(
                "checkpoint {} has {} params, expected {}",
                path.display(),
                params.len(),
                stream.params.len()
            )));
        }
        for (id, loaded) in stream.params.ids().collect::<Vec<_>>().into_iter().zip(params.params()) {
            if stream.params.name(id) != loaded.name {
                return Err(Error::Config(format!(
                    "checkpoint {} param order mismatch at `{}`",
                    path.display(),
                    loaded.name
                )));
            }
            stream.params.set_value(id, loaded.value.clone());
        }
        stream.local_initialized = local_initialized;
        Ok(stream)
    }
}

fn check_rows_nonzero(m: &Mat, what: &str) -> Result<()> {
    for (r, row) in m.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm < ZERO_NORM_EPS {
            return Err(Error::Degenerate(format!("zero-norm {what} at row {r}")));
        }
    }
    Ok(())
}

fn argmax_ties_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = j;
        }
    }
    best
}

fn softmax(scores: &[f64]) -> Array1<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Array1::from_iter(exps.into_iter().map(|e| e / sum))
}

/// Cosine-softmax assignment of `r` against a codebook. Errors on a
/// zero-norm input or a collapsed (zero-norm) codeword, both of which make
/// cosine similarity undefined.
pub fn assign(r: &Array1<f64>, book: &Codebook, tau: f64) -> Result<(usize, Array1<f64>)> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    if book.width() != r.len() {
        return Err(Error::Shape {
            context: "assign".into(),
            expected: format!("width {}", book.width()),
            found: format!("{}", r.len()),
        });
    }
    let rn = r.dot(r).sqrt();
    if rn < ZERO_NORM_EPS {
        return Err(Error::Degenerate(
            "zero-norm input to cosine assignment (degenerate embedding)".into(),
        ));
    }
    let mut scores = Vec::with_capacity(book.size());
    for (j, c) in book.codewords().rows().into_iter().enumerate() {
        let cn = c.dot(&c).sqrt();
        if cn < ZERO_NORM_EPS {
            return Err(Error::Degenerate(format!("collapsed codeword {j} (zero norm)")));
        }
        scores.push(r.dot(&c) / (rn * cn) / tau);
    }
    let probs = softmax(&scores);
    Ok((argmax_ties_lowest(&scores), probs))
}

/// Raw dot-product fallback used when the residual is exactly zero: the
/// scores degenerate to all zeros, the softmax to uniform, and the tie
/// rule selects index 0.
fn assign_dot(r: &Array1<f64>, book: &Mat, tau: f64) -> (usize, Array1<f64>) {
    let scores: Vec<f64> = book.rows().into_iter().map(|c| r.dot(&c) / tau).collect();
    (argmax_ties_lowest(&scores), softmax(&scores))
}

/// Batch cosine argmax (indices only), for inference paths.
fn assign_rows(latents: &Mat, book: &Mat) -> Vec<usize> {
    let mut out = Vec::with_capacity(latents.nrows());
    let book_norms: Vec<f64> = book
        .rows()
        .into_iter()
        .map(|c| c.dot(&c).sqrt())
        .collect();
    for row in latents.rows() {
        let rn = row.dot(&row).sqrt();
        let mut scores = Vec::with_capacity(book.nrows());
        for (j, c) in book.rows().into_iter().enumerate() {
            let s = if rn < ZERO_NORM_EPS {
                row.dot(&c)
            } else {
                row.dot(&c) / (rn * book_norms[j])
            };
            scores.push(s);
        }
        out.push(argmax_ties_lowest(&scores));
    }
    out
}

/// Full two-level quantization of one embedding.
pub fn quantize(stream: &QuantizerStream, e: &Array1<f64>) -> Result<QuantizationResult> {
    if e.len() != stream.cfg.d_in {
        return Err(Error::Shape {
            context: "quantize".into(),
            expected: format!("input width {}", stream.cfg.d_in),
            found: format!("{}", e.len()),
        });
    }
    let e_mat = e.clone().insert_axis(ndarray::Axis(0));
    let z_mat = stream.encode(&e_mat)?;
    let z = z_mat.row(0).to_owned();
    let fed = stream.fed_codebook();
    let (index0, probs0) = assign(&z, &fed, stream.cfg.tau)?;
    let c0 = fed.codewords().row(index0).to_owned();
    let r1 = &z - &c0;
    let local = stream.local_codebook();
    let r1_norm = r1.dot(&r1).sqrt();
    let (index1, probs1) = if r1_norm < ZERO_NORM_EPS {
        // Exact-landing degeneracy: cosine is undefined, fall back to raw
        // dot scores (uniform probabilities, lowest index on total ties).
        check_rows_nonzero(local.codewords(), "local codeword")?;
        assign_dot(&r1, local.codewords(), stream.cfg.tau)
    } else {
        assign(&r1, &local, stream.cfg.tau)?
    };
    let c1 = local.codewords().row(index1).to_owned();
    let z_q = &c0 + &c1;
    Ok(QuantizationResult {
        z,
        index0,
        index1,
        c0,
        c1,
        r1,
        z_q,
        probs0,
        probs1,
    })
}

/// Negative log likelihood of the selected codewords at both levels.
pub fn code_loss(result: &QuantizationResult) -> f64 {
    -(result.probs0[result.index0].ln() + result.probs1[result.index1].ln())
}

/// In-batch semantic alignment loss: softmax of `sim(z_q_b, e_j)/tau` over
/// the batch's candidates, picked at the matching row. Duplicate inputs in
/// the batch are allowed; they simply enlarge the denominator.
pub fn align_loss(z_q: &Mat, e: &Mat, tau: f64) -> Result<f64> {
    if z_q.nrows() != e.nrows() {
        return Err(Error::Shape {
            context: "align_loss".into(),
            expected: format!("{} rows", z_q.nrows()),
            found: format!("{}", e.nrows()),
        });
    }
    check_rows_nonzero(z_q, "quantized latent")?;
    check_rows_nonzero(e, "input embedding")?;
    let b = z_q.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let zi = z_q.row(i);
        let zn = zi.dot(&zi).sqrt();
        let mut scores = Vec::with_capacity(b);
        for j in 0..b {
            let ej = e.row(j);
            let en = ej.dot(&ej).sqrt();
            scores.push(zi.dot(&ej) / (zn * en) / tau);
        }
        let probs = softmax(&scores);
        total -= probs[i].ln();
    }
    Ok(total / b as f64)
}

/// Logistic reconstruction loss on the inner product of decoded user/item
/// embeddings. The inner product is passed through a sigmoid so the log
/// stays in domain for any finite input.
pub fn rec_loss(e_u: &Array1<f64>, e_i: &Array1<f64>, y: bool) -> f64 {
    let s = e_u.dot(e_i);
    let y = y as u8 as f64;
    s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
}

/// Weighted composite: `rec + lambda * (code_u + code_i + align_u + align_i)`.
pub fn total_loss(
    rec: f64,
    code_user: f64,
    code_item: f64,
    align_user: f64,
    align_item: f64,
    lambda: f64,
) -> f64 {
    rec + lambda * (code_user + code_item + align_user + align_item)
}

/// Per-step (or per-epoch mean) loss breakdown.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub rec: f64,
    pub code_user: f64,
    pub code_item: f64,
    pub align_user: f64,
    pub align_item: f64,
}

impl LossReport {
    fn add(&mut self, other: &LossReport) {
        self.total += other.total;
        self.rec += other.rec;
        self.code_user += other.code_user;
        self.code_item += other.code_item;
        self.align_user += other.align_user;
        self.align_item += other.align_item;
    }

    fn scale(&mut self, c: f64) {
        self.total *= c;
        self.rec *= c;
        self.code_user *= c;
        self.code_item *= c;
        self.align_user *= c;
        self.align_item *= c;
    }
}

struct SideNodes {
    code: NodeId,
    align: NodeId,
    decoded: NodeId,
}

/// Builds one stream's recorded losses for a batch of embedding rows.
fn build_side(
    tape: &mut Tape,
    bound: &mut Bound,
    stream: &QuantizerStream,
    e_values: &Mat,
) -> Result<SideNodes> {
    if stream.cfg.d_latent != e_values.ncols() {
        // The alignment loss scores z_q against the input embeddings, so
        // the latent width must equal the embedding width.
        return Err(Error::Shape {
            context: "alignment loss".into(),
            expected: format!("d_latent == embedding dim ({})", e_values.ncols()),
            found: format!("d_latent {}", stream.cfg.d_latent),
        });
    }
    let tau_inv = 1.0 / stream.cfg.tau;
    let b = e_values.nrows();
    let e_const = tape.constant(e_values.clone());
    let z = stream.encoder.forward_tape(tape, bound, &stream.params, e_const)?;
    let z_vals = tape.value(z).clone();
    check_rows_nonzero(&z_vals, "encoder latent")?;

    let fed_vals = stream.params.value(stream.fed_id).clone();
    check_rows_nonzero(&fed_vals, "federated codeword")?;
    let local_vals = stream.params.value(stream.local_id).clone();
    check_rows_nonzero(&local_vals, "local codeword")?;
    let fed = bound.bind(tape, &stream.params, stream.fed_id);
    let local = bound.bind(tape, &stream.params, stream.local_id);

    // Level 0: cosine scores against the federated codebook.
    let cos0 = tape.cosine_rows(z, fed);
    let idx0 = argmax_per_row(tape.value(cos0));
    let scores0 = tape.scale(cos0, tau_inv);
    let logp0 = tape.pick_log_softmax(scores0, idx0.clone());
    let sum0 = tape.sum_all(logp0);

    let c0 = tape.gather_rows(fed, idx0.clone());
    let r1 = tape.sub(z, c0);
    let r1_vals = tape.value(r1).clone();

    // Level 1: rows with a nonzero residual take the cosine path; rows that
    // landed exactly on a codeword take the raw dot-product fallback.
    let mut normal_rows = Vec::new();
    let mut zero_rows = Vec::new();
    for (r, row) in r1_vals.rows().into_iter().enumerate() {
        if row.dot(&row).sqrt() < ZERO_NORM_EPS {
            zero_rows.push(r);
        } else {
            normal_rows.push(r);
        }
    }
    let mut idx1 = vec![0usize; b];
    let mut sum1_parts = Vec::new();
    if !normal_rows.is_empty() {
        let r1n = tape.gather_rows(r1, normal_rows.clone());
        let cos1 = tape.cosine_rows(r1n, local);
        let picks = argmax_per_row(tape.value(cos1));
        for (slot, &row) in normal_rows.iter().enumerate() {
            idx1[row] = picks[slot];
        }
        let scores1 = tape.scale(cos1, tau_inv);
        let logp1 = tape.pick_log_softmax(scores1, picks);
        sum1_parts.push(tape.sum_all(logp1));
    }
    if !zero_rows.is_empty() {
        let r1d = tape.gather_rows(r1, zero_rows.clone());
        let local_t = tape.transpose(local);
        let dots = tape.matmul(r1d, local_t);
        let picks = argmax_per_row(tape.value(dots));
        for (slot, &row) in zero_rows.iter().enumerate() {
            idx1[row] = picks[slot];
        }
        let scores1 = tape.scale(dots, tau_inv);
        let logp1 = tape.pick_log_softmax(scores1, picks);
        sum1_parts.push(tape.sum_all(logp1));
    }
    let sum1 = match sum1_parts.len() {
        1 => sum1_parts[0],
        _ => tape.add(sum1_parts[0], sum1_parts[1]),
    };
    let code = {
        let s = tape.add(sum0, sum1);
        tape.scale(s, -1.0 / b as f64)
    };

    // Quantized latent: exact c0 + c1 values, straight-through gradient to z.
    let mut zq_vals = Mat::zeros((b, stream.cfg.d_latent));
    for row in 0..b {
        for d in 0..stream.cfg.d_latent {
            zq_vals[[row, d]] = fed_vals[[idx0[row], d]] + local_vals[[idx1[row], d]];
        }
    }
    check_rows_nonzero(&zq_vals, "quantized latent")?;
    let zq = tape.straight_through(z, zq_vals);

    let cos_al = tape.cosine_rows(zq, e_const);
    let scores_al = tape.scale(cos_al, tau_inv);
    let logp_al = tape.pick_log_softmax(scores_al, (0..b).collect());
    let align = {
        let s = tape.sum_all(logp_al);
        tape.scale(s, -1.0 / b as f64)
    };

    let decoded = stream.decoder.forward_tape(tape, bound, &stream.params, zq)?;
    Ok(SideNodes { code, align, decoded })
}

fn argmax_per_row(m: &Mat) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| argmax_ties_lowest(row.as_slice().expect("contiguous row")))
        .collect()
}

/// One optimizer step over both streams on a batch of labeled triples.
/// Triples index into the market's embedding table; the reconstruction
/// pairs decoded user row b against decoded item row b.
pub fn train_step(
    user_stream: &mut QuantizerStream,
    item_stream: &mut QuantizerStream,
    batch: &[(u32, u32, bool)],
    tables: &EmbeddingTable,
    lambda: f64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Config("train_step needs a non-empty batch".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda {lambda} must be nonnegative")));
    }
    let user_rows: Vec<usize> = batch.iter().map(|&(u, _, _)| u as usize).collect();
    let item_rows: Vec<usize> = batch.iter().map(|&(_, i, _)| i as usize).collect();
    let labels: Vec<f64> = batch.iter().map(|&(_, _, y)| y as u8 as f64).collect();
    let e_users = gather_table_rows(&tables.users, &user_rows);
    let e_items = gather_table_rows(&tables.items, &item_rows);

    user_stream.ensure_local_init(&e_users)?;
    item_stream.ensure_local_init(&e_items)?;

    let mut tape = Tape::new();
    let mut bound_u = Bound::new();
    let mut bound_i = Bound::new();
    let side_u = build_side(&mut tape, &mut bound_u, user_stream, &e_users)?;
    let side_i = build_side(&mut tape, &mut bound_i, item_stream, &e_items)?;

    let logits = tape.row_dot(side_u.decoded, side_i.decoded);
    let per_pair = tape.bce_with_logits(logits, labels);
    let rec = tape.mean_all(per_pair);

    let rq = {
        let a = tape.add(side_u.code, side_i.code);
        let b = tape.add(side_u.align, side_i.align);
        tape.add(a, b)
    };
    let total = {
        let scaled = tape.scale(rq, lambda);
        tape.add(rec, scaled)
    };

    let report = LossReport {
        total: tape.value(total)[[0, 0]],
        rec: tape.value(rec)[[0, 0]],
        code_user: tape.value(side_u.code)[[0, 0]],
        code_item: tape.value(side_i.code)[[0, 0]],
        align_user: tape.value(side_u.align)[[0, 0]],
        align_item: tape.value(side_i.align)[[0, 0]],
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite {
            context: "quantizer train_step".into(),
            detail: format!(
                "market `{}` loss {:?} on batch of {}",
                user_stream.market_id,
                report,
                batch.len()
            ),
        });
    }

    tape.backward(total);
    user_stream.params.zero_grads();
    item_stream.params.zero_grads();
    bound_u.accumulate(&tape, &mut user_stream.params);
    bound_i.accumulate(&tape, &mut item_stream.params);
    user_stream.opt.step(&mut user_stream.params)?;
    item_stream.opt.step(&mut item_stream.params)?;
    Ok(report)
}

fn gather_table_rows(table: &Mat, rows: &[usize]) -> Mat {
    let mut out = Mat::zeros((rows.len(), table.ncols()));
    for (r, &src) in rows.iter().enumerate() {
        out.row_mut(r).assign(&table.row(src));
    }
    out
}

/// One epoch over the positive pairs: each pair contributes itself (label 1)
/// and a seeded uniformly sampled item as its negative (label 0).
pub fn train_epoch(
    user_stream: &mut QuantizerStream,
    item_stream: &mut QuantizerStream,
    pairs: &[(u32, u32)],
    tables: &EmbeddingTable,
    lambda: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<LossReport> {
    use rand::seq::SliceRandom;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no training pairs for quantizer".into()));
    }
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(rng);
    let num_items = tables.num_items();
    let mut report = LossReport::default();
    let mut batches = 0usize;
    let per_chunk = (user_stream.cfg.batch / 2).max(1);
    for chunk in shuffled.chunks(per_chunk) {
        let mut batch = Vec::with_capacity(chunk.len() * 2);
        for &(u, i) in chunk {
            batch.push((u, i, true));
            batch.push((u, rng.random_range(0..num_items) as u32, false));
        }
        let step = train_step(user_stream, item_stream, &batch, tables, lambda)?;
        report.add(&step);
        batches += 1;
    }
    report.scale(1.0 / batches.max(1) as f64);
    Ok(report)
}

/// Discrete token pair per entity, the quantizer's product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTable {
    pub market_id: String,
    pub codebook_size: usize,
    /// `(id_fed, id_local)` indexed by user id.
    pub users: Vec<(u32, u32)>,
    /// `(id_fed, id_local)` indexed by item id.
    pub items: Vec<(u32, u32)>,
}

impl TokenTable {
    pub fn user_tokens(&self, user: u32) -> Result<(u32, u32)> {
        self.users.get(user as usize).copied().ok_or_else(|| {
            Error::Split(format!("user {user} missing from token table `{}`", self.market_id))
        })
    }

    pub fn item_tokens(&self, item: u32) -> Result<(u32, u32)> {
        self.items.get(item as usize).copied().ok_or_else(|| {
            Error::Split(format!("item {item} missing from token table `{}`", self.market_id))
        })
    }

    /// Fraction of codewords ever selected, per (entity, level).
    pub fn utilization(&self) -> [f64; 4] {
        let frac = |tokens: &[(u32, u32)], level: usize| {
            let mut used = vec![false; self.codebook_size];
            for &(f, l) in tokens {
                used[if level == 0 { f } else { l } as usize] = true;
            }
            used.iter().filter(|&&u| u).count() as f64 / self.codebook_size as f64
        };
        [
            frac(&self.users, 0),
            frac(&self.users, 1),
            frac(&self.items, 0),
            frac(&self.items, 1),
        ]
    }

    /// Writes `entity_id,id_fed,id_local` CSVs, one per entity type.
    pub fn save(&self, users_path: &Path, items_path: &Path) -> Result<()> {
        for (path, tokens) in [(users_path, &self.users), (items_path, &self.items)] {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["entity_id", "id_fed", "id_local"])?;
            for (id, &(f, l)) in tokens.iter().enumerate() {
                w.write_record([id.to_string(), f.to_string(), l.to_string()])?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(
        market_id: impl Into<String>,
        codebook_size: usize,
        users_path: &Path,
        items_path: &Path,
    ) -> Result<Self> {
        let read = |path: &Path| -> Result<Vec<(u32, u32)>> {
            let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
            let mut out = Vec::new();
            for rec in reader.records() {
                let rec = rec?;
                let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                let parse = |i: usize| -> Result<u32> {
                    rec.get(i)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Parse {
                            line,
                            msg: format!("bad token row in {}", path.display()),
                        })
                };
                let id = parse(0)? as usize;
                if id != out.len() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("token ids must be dense, found {id}"),
                    });
                }
                out.push((parse(1)?, parse(2)?));
            }
            Ok(out)
        };
        Ok(Self {
            market_id: market_id.into(),
            codebook_size,
            users: read(users_path)?,
            items: read(items_path)?,
        })
    }
}

/// Inference-mode pass assigning every entity its `(id_fed, id_local)`
/// token pair. No parameters change; calling it twice yields identical
/// tables.
pub fn tokenize(
    user_stream: &QuantizerStream,
    item_stream: &QuantizerStream,
    tables: &EmbeddingTable,
) -> Result<TokenTable> {
    let run = |stream: &QuantizerStream, rows: &Mat| -> Result<Vec<(u32, u32)>> {
        let mut out = Vec::with_capacity(rows.nrows());
        for row in rows.rows() {
            let q = quantize(stream, &row.to_owned())?;
            out.push((q.index0 as u32, q.index1 as u32));
        }
        Ok(out)
    };
    Ok(TokenTable {
        market_id: tables.market_id.clone(),
        codebook_size: user_stream.cfg.codebook_size,
        users: run(user_stream, &tables.users)?,
        items: run(item_stream, &tables.items)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn book(rows: Mat, role: Role) -> Codebook {
        Codebook::new(rows, role, Entity::User).unwrap()
    }

    #[test]
    fn assign_orthonormal_basis() {
        let b = book(array![[1.0, 0.0], [0.0, 1.0]], Role::Federated);
        let (idx, probs) = assign(&array![1.0, 0.0], &b, 1.0).unwrap();
        assert_eq!(idx, 0);
        // softmax([1, 0]) = (e/(e+1), 1/(e+1))
        assert!((probs[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((probs[1] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn assign_tie_breaks_to_lowest_index() {
        let b = book(array![[1.0, 0.0], [0.0, 1.0]], Role::Federated);
        let (idx, probs) = assign(&array![1.0, 1.0], &b, 0.5).unwrap();
        assert_eq!(idx, 0);
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!((probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn assign_is_scale_invariant() {
        let b = book(array![[0.3, -1.0, 0.5], [1.0, 0.2, 0.0], [-0.4, 0.4, 2.0]], Role::Federated);
        let r = array![0.7, -0.1, 0.4];
        let (i1, p1) = assign(&r, &b, 0.1).unwrap();
        let (i2, p2) = assign(&(&r * 37.5), &b, 0.1).unwrap();
        assert_eq!(i1, i2);
        for (a, bb) in p1.iter().zip(p2.iter()) {
            assert!((a - bb).abs() < 1e-12);
        }
    }

    #[test]
    fn assign_rejects_zero_norm() {
        let b = book(array![[1.0, 0.0], [0.0, 1.0]], Role::Federated);
        assert!(matches!(assign(&array![0.0, 0.0], &b, 1.0), Err(Error::Degenerate(_))));
        let collapsed = book(array![[0.0, 0.0], [0.0, 1.0]], Role::Federated);
        assert!(matches!(
            assign(&array![1.0, 0.0], &collapsed, 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    fn tiny_stream(seed: u64) -> QuantizerStream {
        let cfg = QuantizerConfig {
            d_in: 4,
            d_latent: 4,
            codebook_size: 4,
            tau: 0.5,
            lr: 1e-2,
            ..Default::default()
        };
        QuantizerStream::new("m0", Entity::User, cfg, seed).unwrap()
    }

    #[test]
    fn quantize_residual_and_composition_are_exact() {
        let stream = tiny_stream(3);
        let e = array![0.3, -0.2, 0.9, 0.1];
        let q = quantize(&stream, &e).unwrap();
        for d in 0..4 {
            assert_eq!(q.r1[d].to_bits(), (q.z[d] - q.c0[d]).to_bits());
            assert_eq!(q.z_q[d].to_bits(), (q.c0[d] + q.c1[d]).to_bits());
        }
        assert!((q.probs0.sum() - 1.0).abs() < 1e-9);
        assert!((q.probs1.sum() - 1.0).abs() < 1e-9);
        let q2 = quantize(&stream, &e).unwrap();
        assert_eq!(q.index0, q2.index0);
        assert_eq!(q.index1, q2.index1);
    }

    #[test]
    fn quantize_zero_residual_uses_dot_fallback() {
        // Identity-ish setup: force the fed codebook to contain the exact
        // latent so r1 is the zero vector.
        let mut stream = tiny_stream(5);
        let e = array![0.5, 0.5, -0.5, 0.25];
        let z = stream
            .encode(&e.clone().insert_axis(ndarray::Axis(0)))
            .unwrap()
            .row(0)
            .to_owned();
        let mut fed = stream.params.value(stream.fed_id).clone();
        fed.row_mut(2).assign(&z);
        // Make row 2 the clear cosine winner by zeroing competitors away.
        fed.row_mut(0).assign(&(-&z));
        stream.params.set_value(stream.fed_id, fed);
        let q = quantize(&stream, &e).unwrap();
        if q.index0 == 2 {
            assert!(q.r1.iter().all(|&v| v == 0.0));
            // All-zero dots: uniform probabilities, index 0 by the tie rule.
            assert_eq!(q.index1, 0);
            for p in q.probs1.iter() {
                assert!((p - 0.25).abs() < 1e-12);
            }
        } else {
            // The random codebook happened to beat the planted row; the
            // residual path is then ordinary.
            assert!(q.r1.dot(&q.r1).sqrt() > 0.0);
        }
    }

    #[test]
    fn code_loss_symmetric_tie_is_two_ln_two() {
        let q = QuantizationResult {
            z: array![1.0, 1.0],
            index0: 0,
            index1: 0,
            c0: array![1.0, 0.0],
            c1: array![0.0, 1.0],
            r1: array![0.0, 1.0],
            z_q: array![1.0, 1.0],
            probs0: array![0.5, 0.5],
            probs1: array![0.5, 0.5],
        };
        assert!((code_loss(&q) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn code_loss_certain_assignment_is_zero() {
        let q = QuantizationResult {
            z: array![1.0],
            index0: 1,
            index1: 0,
            c0: array![1.0],
            c1: array![0.0],
            r1: array![0.0],
            z_q: array![1.0],
            probs0: array![0.0, 1.0],
            probs1: array![1.0, 0.0],
        };
        assert_eq!(code_loss(&q), 0.0);
    }

    #[test]
    fn align_loss_single_candidate_is_zero() {
        let z = array![[0.4, 0.6]];
        let e = array![[1.0, -1.0]];
        assert!(align_loss(&z, &e, 0.1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn align_loss_symmetric_pair_is_ln_two() {
        // Two identical candidates: every row's softmax is uniform over 2.
        let z = array![[1.0, 0.0], [1.0, 0.0]];
        let e = array![[0.0, 1.0], [0.0, 1.0]];
        let l = align_loss(&z, &e, 0.1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "{l}");
    }

    #[test]
    fn rec_loss_values() {
        // Orthogonal vectors: logit 0 -> ln 2. Large aligned logit -> ~0.
        let a = array![1.0, 0.0];
        let b = array![0.0, 1.0];
        assert!((rec_loss(&a, &b, true) - std::f64::consts::LN_2).abs() < 1e-12);
        let big = array![40.0, 0.0];
        assert!(rec_loss(&big, &a, true) < 1e-12);
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        assert!((total_loss(0.3, 0.05, 0.05, 0.05, 0.05, 1.0) - 0.5).abs() < 1e-12);
        assert_eq!(total_loss(0.7, 9.0, 9.0, 9.0, 9.0, 0.0), 0.7);
        let l1 = total_loss(0.0, 0.1, 0.2, 0.3, 0.4, 1.0);
        let l2 = total_loss(0.0, 0.1, 0.2, 0.3, 0.4, 2.0);
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
    }

    fn toy_tables(seed: u64, n_users: usize, n_items: usize, d: usize) -> EmbeddingTable {
        let mut rng = rng_from(seed);
        EmbeddingTable {
            market_id: "m0".into(),
            dim: d,
            users: glorot_uniform(n_users, d, &mut rng),
            items: glorot_uniform(n_items, d, &mut rng),
        }
    }

    fn toy_pairs(n_users: usize, n_items: usize) -> Vec<(u32, u32)> {
        (0..n_users)
            .flat_map(|u| {
                (0..3).map(move |k| (u as u32, ((u * 7 + k * 3) % n_items) as u32))
            })
            .collect()
    }

    #[test]
    fn zero_lr_steps_are_idempotent_on_loss() {
        let cfg = QuantizerConfig { d_in: 4, d_latent: 4, codebook_size: 4, lr: 0.0, ..Default::default() };
        let mut us = QuantizerStream::new("m0", Entity::User, cfg.clone(), 1).unwrap();
        let mut is = QuantizerStream::new("m0", Entity::Item, cfg, 2).unwrap();
        let tables = toy_tables(3, 8, 8, 4);
        let batch = vec![(0, 1, true), (2, 3, false), (4, 5, true)];
        let r1 = train_step(&mut us, &mut is, &batch, &tables, 1.0).unwrap();
        let r2 = train_step(&mut us, &mut is, &batch, &tables, 1.0).unwrap();
        assert_eq!(r1.total, r2.total);
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = QuantizerConfig {
            d_in: 8,
            d_latent: 8,
            codebook_size: 8,
            lr: 5e-3,
            batch: 64,
            ..Default::default()
        };
        let mut us = QuantizerStream::new("m0", Entity::User, cfg.clone(), 10).unwrap();
        let mut is = QuantizerStream::new("m0", Entity::Item, cfg, 11).unwrap();
        let tables = toy_tables(12, 50, 50, 8);
        let pairs = toy_pairs(50, 50);
        let mut rng = rng_from(100);
        let first = train_epoch(&mut us, &mut is, &pairs, &tables, 1.0, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..40 {
            last = train_epoch(&mut us, &mut is, &pairs, &tables, 1.0, &mut rng).unwrap();
        }
        assert!(
            last.total < first.total,
            "loss did not decrease: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn frozen_codebooks_never_change() {
        let cfg = QuantizerConfig { d_in: 4, d_latent: 4, codebook_size: 4, lr: 0.05, ..Default::default() };
        let mut us = QuantizerStream::new("m0", Entity::User, cfg.clone(), 1).unwrap();
        let mut is = QuantizerStream::new("m0", Entity::Item, cfg, 2).unwrap();
        let tables = toy_tables(3, 8, 8, 4);
        // Initialize local books first so the freeze covers their final values.
        let batch = vec![(0, 1, true), (2, 3, false)];
        train_step(&mut us, &mut is, &batch, &tables, 1.0).unwrap();
        us.freeze_codebooks();
        is.freeze_codebooks();
        let fed_before = us.params.value(us.fed_id).clone();
        let local_before = us.params.value(us.local_id).clone();
        for _ in 0..5 {
            train_step(&mut us, &mut is, &batch, &tables, 1.0).unwrap();
        }
        assert_eq!(us.params.value(us.fed_id), &fed_before);
        assert_eq!(us.params.value(us.local_id), &local_before);
    }

    #[test]
    fn adaptation_phase_only_moves_local_codebook() {
        let cfg = QuantizerConfig { d_in: 4, d_latent: 4, codebook_size: 4, lr: 0.05, ..Default::default() };
        let mut us = QuantizerStream::new("m0", Entity::User, cfg.clone(), 1).unwrap();
        let mut is = QuantizerStream::new("m0", Entity::Item, cfg, 2).unwrap();
        let tables = toy_tables(3, 8, 8, 4);
        let batch = vec![(0, 1, true), (2, 3, false)];
        train_step(&mut us, &mut is, &batch, &tables, 1.0).unwrap();
        us.set_adaptation_phase();
        is.set_adaptation_phase();
        let fed_before = us.params.value(us.fed_id).clone();
        let enc_id = us.params.find("encoder.w0").unwrap();
        let enc_before = us.params.value(enc_id).clone();
        let local_before = us.params.value(us.local_id).clone();
        train_step(&mut us, &mut is, &batch, &tables, 1.0).unwrap();
        assert_eq!(us.params.value(us.fed_id), &fed_before);
        assert_eq!(us.params.value(enc_id), &enc_before);
        assert_ne!(us.params.value(us.local_id), &local_before);
        us.set_training_phase();
        is.set_training_phase();
    }

    #[test]
    fn tokenize_is_deterministic_and_in_range() {
        let cfg = QuantizerConfig { d_in: 4, d_latent: 4, codebook_size: 4, ..Default::default() };
        let us = QuantizerStream::new("m0", Entity::User, cfg.clone(), 1).unwrap();
        let is = QuantizerStream::new("m0", Entity::Item, cfg, 2).unwrap();
        let tables = toy_tables(3, 10, 12, 4);
        let t1 = tokenize(&us, &is, &tables).unwrap();
        let t2 = tokenize(&us, &is, &tables).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.users.len(), 10);
        assert_eq!(t1.items.len(), 12);
        for &(f, l) in t1.users.iter().chain(t1.items.iter()) {
            assert!((f as usize) < 4 && (l as usize) < 4);
        }
    }

    #[test]
    fn identical_embeddings_share_tokens() {
        let cfg = QuantizerConfig { d_in: 4, d_latent: 4, codebook_size: 4, ..Default::default() };
        let us = QuantizerStream::new("m0", Entity::User, cfg.clone(), 1).unwrap();
        let is = QuantizerStream::new("m0", Entity::Item, cfg, 2).unwrap();
        let mut tables = toy_tables(3, 4, 4, 4);
        let row = tables.users.row(0).to_owned();
        tables.users.row_mut(2).assign(&row);
        let t = tokenize(&us, &is, &tables).unwrap();
        assert_eq!(t.users[0], t.users[2]);
    }

    #[test]
    fn token_table_round_trip() {
        let t = TokenTable {
            market_id: "m0".into(),
            codebook_size: 8,
            users: vec![(0, 1), (7, 3)],
            items: vec![(2, 2)],
        };
        let dir = tempfile::tempdir().unwrap();
        let up = dir.path().join("u.csv");
        let ip = dir.path().join("i.csv");
        t.save(&up, &ip).unwrap();
        let back = TokenTable::load("m0", 8, &up, &ip).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn stream_checkpoint_round_trip() {
        let cfg = QuantizerConfig { d_in: 4, d_latent: 4, codebook_size: 4, ..Default::default() };
        let mut us = QuantizerStream::new("m7", Entity::Item, cfg, 9).unwrap();
        let tables = toy_tables(3, 8, 8, 4);
        let mut other = QuantizerStream::new("m7", Entity::User, us.cfg.clone(), 10).unwrap();
        train_step(&mut other, &mut us, &[(0, 1, true)], &tables, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.json");
        us.save(&path).unwrap();
        let loaded = QuantizerStream::load(&path).unwrap();
        assert_eq!(loaded.market_id, "m7");
        assert_eq!(loaded.entity, Entity::Item);
        for (a, b) in us.params.params().iter().zip(loaded.params.params()) {
            assert_eq!(a.value, b.value, "param {}", a.name);
        }
        let e = array![0.1, 0.2, 0.3, 0.4];
        let qa = quantize(&us, &e).unwrap();
        let qb = quantize(&loaded, &e).unwrap();
        assert_eq!(qa.index0, qb.index0);
        assert_eq!(qa.index1, qb.index1);
    }
}
