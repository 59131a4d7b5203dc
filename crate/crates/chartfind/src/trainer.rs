//! Multi-Similarity-Loss contrastive training.
//!
//! Each batch takes B chunks as anchors; every anchor carries P sampled
//! positive terms, and its negatives are the other anchors' sampled positives
//! (in-batch negatives), so |N(i)| = (B-1)*P before optional filtering.
//! Mining keeps only informative samples: positives below the hardest
//! negative plus a margin, negatives above the easiest positive minus the
//! margin (strict inequalities; an empty opposite set empties the mined set).
//! Per-anchor losses are averaged over the batch, and the mined sets are held
//! constant through the backward pass.
//!
//! Both log-sum terms use a max-shifted log-sum-exp: beta = 50 keeps
//! exponents within f64 range for cosine inputs, but the shifted form costs
//! nothing and removes the concern entirely.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncodeTrace, EncoderParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MslConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_epsilon() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    2.0
}
fn default_beta() -> f64 {
    50.0
}
fn default_lambda() -> f64 {
    0.5
}

impl Default for MslConfig {
    fn default() -> Self {
        MslConfig {
            epsilon: default_epsilon(),
            alpha: default_alpha(),
            beta: default_beta(),
            lambda: default_lambda(),
        }
    }
}

impl MslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("msl epsilon must be finite and >= 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("msl alpha and beta must be finite and > 0".into()));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("msl lambda must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// P: positives sampled per chunk (up- or down-sampled to exactly this).
    #[serde(default = "default_p")]
    pub positives_per_chunk: usize,
    /// B: anchors per batch.
    #[serde(default = "default_b")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Drop negatives string-equal to one of the anchor's sampled positives.
    #[serde(default)]
    pub in_batch_negative_filter: bool,
}

fn default_p() -> usize {
    128
}
fn default_b() -> usize {
    32
}
fn default_epochs() -> usize {
    3
}
fn default_lr() -> f64 {
    1e-4
}
fn default_warmup_ratio() -> f64 {
    0.1
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::AdamW
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

impl TrainConfig {
    /// Stage-I data hyperparameters for the small model scale.
    pub fn stage1_defaults() -> Self {
        TrainConfig {
            positives_per_chunk: 128,
            batch_size: 32,
            epochs: 3,
            lr: default_lr(),
            warmup_ratio: default_warmup_ratio(),
            seed: 0,
            optimizer: OptimizerKind::AdamW,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            weight_decay: default_weight_decay(),
            in_batch_negative_filter: false,
        }
    }

    /// Stage-II data hyperparameters for the small model scale.
    pub fn stage2_defaults() -> Self {
        TrainConfig {
            positives_per_chunk: 16,
            batch_size: 32,
            epochs: 1,
            ..Self::stage1_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be >= 2: in-batch negatives need another anchor".into(),
            ));
        }
        if self.positives_per_chunk < 1 {
            return Err(Error::Config("positives_per_chunk must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must be in [0, 1)".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adam_eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Indices into the anchor's positive/negative similarity lists that survived
/// mining, plus the boundary statistics that defined them.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningResult {
    pub informative_pos: Vec<usize>,
    pub informative_neg: Vec<usize>,
    pub max_neg: Option<f64>,
    pub min_pos: Option<f64>,
}

/// Eq. 1/2 mining. `P' = {j : S_pos[j] < max_neg + eps}` and
/// `N' = {k : S_neg[k] > min_pos - eps}`, strict on both sides; an empty
/// opposite list empties the mined set (no boundary to push against).
pub fn mine(pos_sims: &[f64], neg_sims: &[f64], epsilon: f64) -> MiningResult {
    debug_assert!(pos_sims.iter().chain(neg_sims).all(|s| s.is_finite()));
    let max_neg = neg_sims.iter().copied().reduce(f64::max);
    let min_pos = pos_sims.iter().copied().reduce(f64::min);
    let informative_pos = match max_neg {
        Some(mx) => pos_sims
            .iter()
            .enumerate()
            .filter(|(_, s)| **s < mx + epsilon)
            .map(|(j, _)| j)
            .collect(),
        None => Vec::new(),
    };
    let informative_neg = match min_pos {
        Some(mn) => neg_sims
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > mn - epsilon)
            .map(|(k, _)| k)
            .collect(),
        None => Vec::new(),
    };
    MiningResult {
        informative_pos,
        informative_neg,
        max_neg,
        min_pos,
    }
}

/// Max-shifted `ln(1 + sum_i exp(x_i))`; the implicit 1 participates in the
/// shift as exp(0).
fn log1p_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(0.0f64, f64::max);
    let sum: f64 = (-m).exp() + xs.map(|x| (x - m).exp()).sum::<f64>();
    m + sum.ln()
}

/// Eq. 3 for one anchor over already-mined index sets.
pub fn msl_loss(mining: &MiningResult, pos_sims: &[f64], neg_sims: &[f64], cfg: &MslConfig) -> f64 {
    let mut loss = 0.0;
    if !mining.informative_pos.is_empty() {
        let xs = mining
            .informative_pos
            .iter()
            .map(|&j| -cfg.alpha * (pos_sims[j] - cfg.lambda))
            .collect::<Vec<_>>();
        loss += log1p_sum_exp(xs.iter().copied()) / cfg.alpha;
    }
    if !mining.informative_neg.is_empty() {
        let xs = mining
            .informative_neg
            .iter()
            .map(|&k| cfg.beta * (neg_sims[k] - cfg.lambda))
            .collect::<Vec<_>>();
        loss += log1p_sum_exp(xs.iter().copied()) / cfg.beta;
    }
    loss
}

/// dL/dS for one anchor, aligned with `pos_sims`/`neg_sims` (zeros outside
/// the mined sets). Computed with the same shifted softmax as the loss.
fn msl_sim_grads(
    mining: &MiningResult,
    pos_sims: &[f64],
    neg_sims: &[f64],
    cfg: &MslConfig,
) -> (Vec<f64>, Vec<f64>) {
    let mut dpos = vec![0.0; pos_sims.len()];
    let mut dneg = vec![0.0; neg_sims.len()];
    if !mining.informative_pos.is_empty() {
        let xs: Vec<f64> = mining
            .informative_pos
            .iter()
            .map(|&j| -cfg.alpha * (pos_sims[j] - cfg.lambda))
            .collect();
        let m = xs.iter().copied().fold(0.0f64, f64::max);
        let denom: f64 = (-m).exp() + xs.iter().map(|x| (x - m).exp()).sum::<f64>();
        for (&j, &x) in mining.informative_pos.iter().zip(&xs) {
            // d/dS [ln(1+sum exp(-a(S-l)))/a] = -exp(-a(S-l)) / (1+sum)
            dpos[j] = -((x - m).exp()) / denom;
        }
    }
    if !mining.informative_neg.is_empty() {
        let xs: Vec<f64> = mining
            .informative_neg
            .iter()
            .map(|&k| cfg.beta * (neg_sims[k] - cfg.lambda))
            .collect();
        let m = xs.iter().copied().fold(0.0f64, f64::max);
        let denom: f64 = (-m).exp() + xs.iter().map(|x| (x - m).exp()).sum::<f64>();
        for (&k, &x) in mining.informative_neg.iter().zip(&xs) {
            dneg[k] = (x - m).exp() / denom;
        }
    }
    (dpos, dneg)
}

/// Uniform draw of `k` distinct indices out of `n` (partial Fisher-Yates).
pub(crate) fn sample_k_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Up/down-samples a positive set to exactly `p` terms: a uniform sample
/// without replacement when the set is large enough, otherwise every item
/// plus uniform resampling with replacement.
pub fn sample_positives(set: &[String], p: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    assert!(!set.is_empty(), "sample_positives requires a non-empty set");
    assert!(p >= 1);
    if set.len() >= p {
        sample_k_indices(set.len(), p, rng)
            .into_iter()
            .map(|i| set[i].clone())
            .collect()
    } else {
        let mut out: Vec<String> = set.to_vec();
        while out.len() < p {
            out.push(set[rng.random_range(0..set.len())].clone());
        }
        out
    }
}

/// One positive term with its token ids.
#[derive(Debug, Clone)]
pub struct TermTokens {
    pub term: String,
    pub tokens: Vec<u32>,
}

/// One anchor of a batch: the chunk's tokens plus its P sampled positives.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub anchor_tokens: Vec<u32>,
    pub positives: Vec<TermTokens>,
}

/// Forward + backward for one batch. Returns the batch loss (mean of
/// per-anchor losses) and accumulates its exact gradient into `grad`, which
/// must be zeroed by the caller and laid out like `params.table()`.
///
/// Negatives for anchor `i` are the other anchors' positives in (anchor,
/// position) order. With the filter off, every anchor sees exactly
/// `(B-1)*P` negatives — asserted here.
pub fn batch_loss_and_grad(
    params: &EncoderParams,
    batch: &[BatchItem],
    msl: &MslConfig,
    filter_in_batch: bool,
    grad: &mut [f64],
) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::Config("batch needs at least 2 anchors".into()));
    }
    let p = batch[0].positives.len();
    if p == 0 || batch.iter().any(|b| b.positives.len() != p) {
        return Err(Error::Config("every anchor must carry the same positive count".into()));
    }
    let dim = params.dim();

    struct Encoded {
        anchor: EncodeTrace,
        anchor_unit: Vec<f64>,
        terms: Vec<(EncodeTrace, Vec<f64>)>,
    }
    let mut encoded = Vec::with_capacity(batch.len());
    for item in batch {
        let (anchor_unit, anchor) = encoder::encode(params, &item.anchor_tokens)?;
        let mut terms = Vec::with_capacity(p);
        for t in &item.positives {
            let (unit, trace) = encoder::encode(params, &t.tokens)?;
            terms.push((trace, unit));
        }
        encoded.push(Encoded {
            anchor,
            anchor_unit,
            terms,
        });
    }

    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let mut total_loss = 0.0;
    for i in 0..b {
        let own: std::collections::BTreeSet<&str> = batch[i]
            .positives
            .iter()
            .map(|t| t.term.as_str())
            .collect();
        let pos_sims: Vec<f64> = encoded[i]
            .terms
            .iter()
            .map(|(_, unit)| encoder::similarity(&encoded[i].anchor_unit, unit))
            .collect();
        // (source anchor, term position) for each negative, in scan order
        let mut neg_refs: Vec<(usize, usize)> = Vec::with_capacity((b - 1) * p);
        for j in 0..b {
            if j == i {
                continue;
            }
            for t in 0..p {
                if filter_in_batch && own.contains(batch[j].positives[t].term.as_str()) {
                    continue;
                }
                neg_refs.push((j, t));
            }
        }
        if !filter_in_batch {
            assert_eq!(
                neg_refs.len(),
                (b - 1) * p,
                "in-batch negative accounting violated"
            );
        }
        let neg_sims: Vec<f64> = neg_refs
            .iter()
            .map(|&(j, t)| encoder::similarity(&encoded[i].anchor_unit, &encoded[j].terms[t].1))
            .collect();

        let mining = mine(&pos_sims, &neg_sims, msl.epsilon);
        total_loss += msl_loss(&mining, &pos_sims, &neg_sims, msl);
        let (dpos, dneg) = msl_sim_grads(&mining, &pos_sims, &neg_sims, msl);
        for (t, d) in dpos.iter().enumerate() {
            if *d != 0.0 {
                encoder::backprop(&encoded[i].anchor, &encoded[i].terms[t].0, d * inv_b, dim, grad)?;
            }
        }
        for (n, d) in dneg.iter().enumerate() {
            if *d != 0.0 {
                let (j, t) = neg_refs[n];
                encoder::backprop(&encoded[i].anchor, &encoded[j].terms[t].0, d * inv_b, dim, grad)?;
            }
        }
    }
    Ok(total_loss * inv_b)
}

/// Linear warmup from 0 to `lr` over the first `warmup_ratio * total_steps`
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    assert!(total_steps > 0 && step <= total_steps);
    let warmup = (cfg.warmup_ratio * total_steps as f64).floor() as usize;
    if step <= warmup && warmup > 0 {
        cfg.lr * step as f64 / warmup as f64
    } else {
        cfg.lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

enum Optimizer {
    Sgd,
    AdamW { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl Optimizer {
    fn new(cfg: &TrainConfig, len: usize) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::AdamW => Optimizer::AdamW {
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            },
        }
    }

    fn step(&mut self, table: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        match self {
            Optimizer::Sgd => {
                for (pv, g) in table.iter_mut().zip(grad) {
                    *pv -= lr * g;
                }
            }
            Optimizer::AdamW { m, v, t } => {
                *t += 1;
                let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
                let bc1 = 1.0 - b1.powi(*t as i32);
                let bc2 = 1.0 - b2.powi(*t as i32);
                for i in 0..table.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    // decoupled weight decay
                    table[i] -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * table[i]);
                }
            }
        }
    }
}

/// One training example: a chunk and its (unsampled) positive terms.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub chunk_id: String,
    pub text: String,
    pub positives: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub history: Vec<LossRecord>,
    /// Examples skipped for an empty positive set (or no encodable anchor token).
    pub skipped: usize,
}

/// Runs the full loop: per-epoch seeded shuffle, per-anchor positive
/// sampling, MSL forward/backward, one optimizer update per batch under the
/// warmup/decay schedule. A trailing partial batch is dropped so the
/// in-batch-negative count stays exact. Deterministic given the seed.
pub fn train(
    dataset: &[TrainExample],
    params: EncoderParams,
    tc: &TrainConfig,
    msl: &MslConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    msl.validate()?;
    let mut params = params;
    let vocab = params.vocab().clone();

    // Pre-tokenize; unusable examples (no positives / no anchor tokens) are skipped.
    struct Prepared {
        anchor_tokens: Vec<u32>,
        positives: Vec<String>,
    }
    let mut usable: Vec<Prepared> = Vec::new();
    let mut skipped = 0usize;
    for ex in dataset {
        let anchor_tokens = encoder::tokenize(&vocab, &ex.text, encoder::CHUNK_TOKEN_BUDGET);
        if ex.positives.is_empty() || anchor_tokens.is_empty() {
            skipped += 1;
            continue;
        }
        usable.push(Prepared {
            anchor_tokens,
            positives: ex.positives.clone(),
        });
    }

    let b = tc.batch_size;
    if usable.len() < b {
        return Err(Error::Config(format!(
            "dataset smaller than one batch: {} usable chunks < batch size {b}",
            usable.len()
        )));
    }
    let steps_per_epoch = usable.len() / b;
    let total_steps = steps_per_epoch * tc.epochs;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut term_tokens: std::collections::HashMap<String, Vec<u32>> = std::collections::HashMap::new();
    let mut opt = Optimizer::new(tc, params.table().len());
    let mut grad = vec![0.0f64; params.table().len()];
    let mut history = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut step = 0usize;

    for _epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        for batch_ids in order.chunks_exact(b) {
            let mut batch = Vec::with_capacity(b);
            for &ex_i in batch_ids {
                let ex = &usable[ex_i];
                let sampled = sample_positives(&ex.positives, tc.positives_per_chunk, &mut rng);
                let positives = sampled
                    .into_iter()
                    .map(|term| {
                        let tokens = term_tokens
                            .entry(term.clone())
                            .or_insert_with(|| {
                                encoder::tokenize(&vocab, &term, encoder::ENTITY_TOKEN_BUDGET)
                            })
                            .clone();
                        TermTokens { term, tokens }
                    })
                    .collect();
                batch.push(BatchItem {
                    anchor_tokens: ex.anchor_tokens.clone(),
                    positives,
                });
            }
            grad.fill(0.0);
            let loss = batch_loss_and_grad(&params, &batch, msl, tc.in_batch_negative_filter, &mut grad)?;
            let lr = lr_at(step, total_steps, tc);
            opt.step(params.table_mut(), &grad, lr, tc);
            history.push(LossRecord { step, lr, loss });
            step += 1;
        }
    }

    Ok(TrainOutcome {
        params,
        history,
        skipped,
    })
}

/// Loss-history CSV: `step,lr,loss` header plus one row per step.
pub fn write_loss_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "step,lr,loss").map_err(|e| Error::io(path, e))?;
    for r in history {
        writeln!(w, "{},{},{}", r.step, r.lr, r.loss).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_loss_history(path: &Path) -> Result<Vec<LossRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if idx == 0 {
            if line.trim() != "step,lr,loss" {
                return Err(Error::parse(path, 1, "expected header step,lr,loss"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let parse_err = |m: &str| Error::parse(path, idx + 1, m);
        let step = cols
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad step"))?;
        let lr = cols
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad lr"))?;
        let loss = cols
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad loss"))?;
        out.push(LossRecord { step, lr, loss });
    }
    Ok(out)
}
