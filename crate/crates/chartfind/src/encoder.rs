//! Trainable bag-of-words encoder.
//!
//! A text embeds as the L2-normalized mean of its token rows, so cosine
//! similarity is a plain dot product of encodings. The vocabulary maps known
//! tokens to dense indices and everything else to one of a fixed number of
//! FNV-hashed OOV bucket rows, which keeps unseen Stage-II terms trainable
//! without growing the table.
//!
//! Gradients are analytic. With `m` the token-row mean, `u = m/|m|`, and a
//! fixed unit vector `v` on the other side, `dS/dm = (v - S*u)/|m|`, spread
//! equally over the contributing rows.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Token budget for chunk-side encoding.
pub const CHUNK_TOKEN_BUDGET: usize = 512;
/// Token budget for entity/query-side encoding.
pub const ENTITY_TOKEN_BUDGET: usize = 16;
/// Embedding width.
pub const DEFAULT_DIM: usize = 64;
/// Hash-bucket rows for out-of-vocabulary tokens.
pub const DEFAULT_OOV_BUCKETS: u32 = 1024;
/// Initial weights are uniform in [-INIT_RANGE, INIT_RANGE).
pub const INIT_RANGE: f64 = 0.05;

const CHECKPOINT_MAGIC: &[u8; 8] = b"CFEMB001";

/// Lowercases and strips every non-alphanumeric character; `None` when
/// nothing is left ("x-ray" -> "xray", "---" -> None).
pub fn normalize_token(raw: &str) -> Option<String> {
    let t: String = raw
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    (!t.is_empty()).then_some(t)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
    oov_buckets: u32,
}

impl Vocabulary {
    /// Collects the sorted set of normalized tokens over `texts`. Sorting
    /// makes the vocabulary independent of text order.
    pub fn build<I, S>(texts: I, oov_buckets: u32) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if oov_buckets == 0 {
            return Err(Error::Config("oov_buckets must be at least 1".into()));
        }
        let mut set = std::collections::BTreeSet::new();
        for text in texts {
            for raw in text.as_ref().split_whitespace() {
                if let Some(tok) = normalize_token(raw) {
                    set.insert(tok);
                }
            }
        }
        let tokens: Vec<String> = set.into_iter().collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            tokens,
            index,
            oov_buckets,
        })
    }

    pub fn from_tokens(tokens: Vec<String>, oov_buckets: u32) -> Result<Self> {
        if oov_buckets == 0 {
            return Err(Error::Config("oov_buckets must be at least 1".into()));
        }
        let index: BTreeMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::Checkpoint("duplicate vocabulary token".into()));
        }
        Ok(Vocabulary {
            tokens,
            index,
            oov_buckets,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn oov_buckets(&self) -> u32 {
        self.oov_buckets
    }

    /// Total embedding rows: known tokens plus OOV buckets.
    pub fn rows(&self) -> usize {
        self.tokens.len() + self.oov_buckets as usize
    }

    /// Row index for a *normalized* token; unknown tokens hash into the OOV
    /// range `[vocab_len, rows)`.
    pub fn token_index(&self, token: &str) -> u32 {
        match self.index.get(token) {
            Some(&i) => i,
            None => {
                let bucket = crate::hashing::fnv1a_64(token.as_bytes()) % u64::from(self.oov_buckets);
                self.tokens.len() as u32 + bucket as u32
            }
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Normalizes, indexes, and truncates a text to `budget` tokens.
pub fn tokenize(vocab: &Vocabulary, text: &str, budget: usize) -> Vec<u32> {
    text.split_whitespace()
        .filter_map(normalize_token)
        .take(budget)
        .map(|t| vocab.token_index(&t))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dim: usize,
    init_seed: u64,
    vocab: Vocabulary,
    table: Vec<f64>,
}

impl EncoderParams {
    /// Fresh table, every weight uniform in [-0.05, 0.05), filled row-major
    /// from a ChaCha8 stream seeded with `seed`.
    pub fn init(vocab: Vocabulary, dim: usize, seed: u64) -> Self {
        let rows = vocab.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..rows * dim)
            .map(|_| rng.random::<f64>() * 2.0 * INIT_RANGE - INIT_RANGE)
            .collect();
        EncoderParams {
            dim,
            init_seed: seed,
            vocab,
            table,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn rows(&self) -> usize {
        self.vocab.rows()
    }

    pub fn row(&self, idx: u32) -> &[f64] {
        let i = idx as usize * self.dim;
        &self.table[i..i + self.dim]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    /// Binary checkpoint: magic, dims, seed, vocabulary, then the raw table as
    /// little-endian f64. Bit-exact round trip.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.vocab.vocab_len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&self.vocab.oov_buckets.to_le_bytes()).map_err(io)?;
        w.write_all(&self.init_seed.to_le_bytes()).map_err(io)?;
        for tok in &self.vocab.tokens {
            w.write_all(&(tok.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(tok.as_bytes()).map_err(io)?;
        }
        for x in &self.table {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut BufReader<File>, what: &str| -> Result<u32> {
            r.read_exact(&mut u32buf)
                .map_err(|_| bad(&format!("truncated {what}")))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let dim = read_u32(&mut r, "dim")? as usize;
        let vocab_len = read_u32(&mut r, "vocab len")? as usize;
        let oov = read_u32(&mut r, "oov buckets")?;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)
            .map_err(|_| bad("truncated seed"))?;
        let init_seed = u64::from_le_bytes(u64buf);

        let mut tokens = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let mut lenbuf = [0u8; 4];
            r.read_exact(&mut lenbuf)
                .map_err(|_| bad("truncated token length"))?;
            let len = u32::from_le_bytes(lenbuf) as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(|_| bad("truncated token"))?;
            tokens.push(String::from_utf8(buf).map_err(|_| bad("token not utf-8"))?);
        }
        let vocab = Vocabulary::from_tokens(tokens, oov)?;

        let mut table = vec![0f64; vocab.rows() * dim];
        let mut fbuf = [0u8; 8];
        for x in table.iter_mut() {
            r.read_exact(&mut fbuf)
                .map_err(|_| bad("truncated table"))?;
            *x = f64::from_le_bytes(fbuf);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(bad("trailing bytes after table"));
        }
        Ok(EncoderParams {
            dim,
            init_seed,
            vocab,
            table,
        })
    }
}

/// What backprop needs to redo the forward pass: the token rows used, their
/// mean, and the mean's norm.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    pub indices: Vec<u32>,
    pub mean: Vec<f64>,
    pub norm: f64,
}

impl EncodeTrace {
    /// The unit embedding this trace produced.
    pub fn unit(&self) -> Vec<f64> {
        self.mean.iter().map(|x| x / self.norm).collect()
    }
}

/// Mean-pools the rows at `indices` and L2-normalizes. Errors on zero tokens
/// and on an exactly zero-norm mean (e.g. rows `v` and `-v`).
pub fn encode(params: &EncoderParams, indices: &[u32]) -> Result<(Vec<f64>, EncodeTrace)> {
    if indices.is_empty() {
        return Err(Error::DegenerateInput);
    }
    let d = params.dim;
    let mut mean = vec![0f64; d];
    for &idx in indices {
        let row = params.row(idx);
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let n = indices.len() as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    let unit = mean.iter().map(|x| x / norm).collect();
    Ok((
        unit,
        EncodeTrace {
            indices: indices.to_vec(),
            mean,
            norm,
        },
    ))
}

/// Tokenizes `text` under `budget` and encodes it.
pub fn encode_text(params: &EncoderParams, text: &str, budget: usize) -> Result<(Vec<f64>, EncodeTrace)> {
    let indices = tokenize(&params.vocab, text, budget);
    encode(params, &indices)
}

/// Cosine similarity of two unit embeddings: their dot product.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Accumulates `d_sim * dS/dθ` into `grad` (same layout as the parameter
/// table) for both sides of one similarity.
pub fn backprop(a: &EncodeTrace, b: &EncodeTrace, d_sim: f64, dim: usize, grad: &mut [f64]) -> Result<()> {
    if d_sim == 0.0 {
        return Ok(());
    }
    if a.norm == 0.0 || b.norm == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    let ua = a.unit();
    let ub = b.unit();
    let s = similarity(&ua, &ub);
    for (side, u_self, u_other) in [(a, &ua, &ub), (b, &ub, &ua)] {
        let coeff = d_sim / (side.norm * side.indices.len() as f64);
        for &idx in &side.indices {
            let base = idx as usize * dim;
            for j in 0..dim {
                grad[base + j] += coeff * (u_other[j] - s * u_self[j]);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_params(seed: u64) -> EncoderParams {
        let vocab = Vocabulary::build(["alpha beta gamma delta", "epsilon zeta"], 4).unwrap();
        EncoderParams::init(vocab, 8, seed)
    }

    #[test]
    fn normalize_strips_punctuation_and_case() {
        assert_eq!(normalize_token("CHF!"), Some("chf".into()));
        assert_eq!(normalize_token("x-ray"), Some("xray".into()));
        assert_eq!(normalize_token("(hf)"), Some("hf".into()));
        assert_eq!(normalize_token("---"), None);
        assert_eq!(normalize_token(""), None);
    }

    #[test]
    fn vocabulary_is_sorted_and_order_independent() {
        let a = Vocabulary::build(["b a", "c"], 8).unwrap();
        let b = Vocabulary::build(["c", "a b"], 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens(), ["a", "b", "c"]);
        assert_eq!(a.rows(), 11);
    }

    #[test]
    fn oov_tokens_hash_into_the_bucket_range() {
        let vocab = Vocabulary::build(["known tokens only"], 16).unwrap();
        let v = vocab.vocab_len() as u32;
        for tok in ["unseen", "novel", "zzz9"] {
            let idx = vocab.token_index(tok);
            assert!(idx >= v && idx < v + 16, "{tok} -> {idx}");
            // stable across calls and vocab copies
            assert_eq!(idx, vocab.clone().token_index(tok));
        }
        assert_eq!(vocab.token_index("known"), 0);
    }

    #[test]
    fn budgets_truncate() {
        let vocab = Vocabulary::build(["w"], 4).unwrap();
        let long = (0..600).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
        assert_eq!(tokenize(&vocab, &long, CHUNK_TOKEN_BUDGET).len(), 512);
        let entity = (0..20).map(|i| format!("e{i}")).collect::<Vec<_>>().join(" ");
        assert_eq!(tokenize(&vocab, &entity, ENTITY_TOKEN_BUDGET).len(), 16);
        assert_eq!(tokenize(&vocab, "-- !! ?", 10), Vec::<u32>::new());
    }

    #[test]
    fn init_is_seed_deterministic_and_in_range() {
        let a = small_params(7);
        let b = small_params(7);
        let c = small_params(8);
        assert_eq!(a.table(), b.table());
        assert_ne!(a.table(), c.table());
        assert!(a.table().iter().all(|x| (-0.05..0.05).contains(x)));
        assert_eq!(a.table().len(), a.rows() * a.dim());
    }

    #[test]
    fn encodings_are_unit_norm() {
        let p = small_params(3);
        let (e, trace) = encode(&p, &[0, 1, 2, 2]).unwrap();
        assert_relative_eq!(similarity(&e, &e), 1.0, epsilon = 1e-12);
        assert_eq!(trace.indices, vec![0, 1, 2, 2]);
        // single token: the normalized row itself
        let (e0, _) = encode(&p, &[4]).unwrap();
        let row = p.row(4);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in e0.iter().zip(row) {
            assert_relative_eq!(*a, b / norm, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_inputs_error() {
        let p = small_params(3);
        assert!(matches!(encode(&p, &[]), Err(Error::DegenerateInput)));

        let mut p = small_params(3);
        let d = p.dim();
        let (r0, r1) = (0usize, 1usize);
        for j in 0..d {
            let v = (j + 1) as f64;
            p.table_mut()[r0 * d + j] = v;
            p.table_mut()[r1 * d + j] = -v;
        }
        assert!(matches!(
            encode(&p, &[0, 1]),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn scaling_the_table_leaves_encodings_unchanged() {
        let p = small_params(5);
        let mut scaled = p.clone();
        for x in scaled.table_mut() {
            *x *= 3.7;
        }
        let (a, _) = encode(&p, &[0, 3, 5]).unwrap();
        let (b, _) = encode(&scaled, &[0, 3, 5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    /// Central finite differences through the full encode+dot pipeline.
    fn fd_grad(params: &EncoderParams, ia: &[u32], ib: &[u32], h: f64) -> Vec<f64> {
        let mut grad = vec![0f64; params.table().len()];
        for i in 0..grad.len() {
            let mut plus = params.clone();
            plus.table_mut()[i] += h;
            let (ea, _) = encode(&plus, ia).unwrap();
            let (eb, _) = encode(&plus, ib).unwrap();
            let sp = similarity(&ea, &eb);

            let mut minus = params.clone();
            minus.table_mut()[i] -= h;
            let (ea, _) = encode(&minus, ia).unwrap();
            let (eb, _) = encode(&minus, ib).unwrap();
            let sm = similarity(&ea, &eb);
            grad[i] = (sp - sm) / (2.0 * h);
        }
        grad
    }

    fn check_backprop(ia: &[u32], ib: &[u32], seed: u64, rel_tol: f64) {
        let p = small_params(seed);
        let (_, ta) = encode(&p, ia).unwrap();
        let (_, tb) = encode(&p, ib).unwrap();
        let mut grad = vec![0f64; p.table().len()];
        backprop(&ta, &tb, 1.0, p.dim(), &mut grad).unwrap();
        let fd = fd_grad(&p, ia, ib, 1e-5);
        for (i, (a, f)) in grad.iter().zip(&fd).enumerate() {
            let denom = f.abs().max(1e-6);
            assert!(
                (a - f).abs() / denom < rel_tol,
                "coord {i}: analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn backprop_matches_finite_differences_single_tokens() {
        check_backprop(&[0], &[3], 11, 1e-6);
    }

    #[test]
    fn backprop_matches_finite_differences_multi_token() {
        // 10-token side (with repeats) vs 3-token side
        check_backprop(&[0, 1, 2, 3, 4, 5, 0, 1, 2, 3], &[5, 6, 7], 13, 1e-5);
    }

    #[test]
    fn backprop_skips_zero_upstream() {
        let p = small_params(1);
        let (_, ta) = encode(&p, &[0]).unwrap();
        let (_, tb) = encode(&p, &[1]).unwrap();
        let mut grad = vec![0f64; p.table().len()];
        backprop(&ta, &tb, 0.0, p.dim(), &mut grad).unwrap();
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let p = small_params(42);
        p.save(&path).unwrap();
        let q = EncoderParams::load(&path).unwrap();
        assert_eq!(p.dim(), q.dim());
        assert_eq!(p.init_seed(), q.init_seed());
        assert_eq!(p.vocab(), q.vocab());
        let bits = |t: &[f64]| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(p.table()), bits(q.table()));
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let p = small_params(42);
        p.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(EncoderParams::load(&path), Err(Error::Checkpoint(_))));

        p.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(EncoderParams::load(&path), Err(Error::Checkpoint(_))));

        p.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(EncoderParams::load(&path), Err(Error::Checkpoint(_))));
    }
}
