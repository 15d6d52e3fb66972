//! Synthetic training corpus.
//!
//! The stream interleaves two sources over one vocabulary. Most tokens come
//! from an order-2 Markov chain whose transition table is itself generated
//! from a seed, so its entropy rate and stationary distribution are known
//! exactly. Every so often a key–value recall segment is spliced in:
//!
//! ```text
//! KV k1 v1 k2 v2 … kn vn  <gap Markov tokens>  QUERY kj vj
//! ```
//!
//! The gap tokens continue the same chain, so the Markov-token subsequence
//! of the stream is an unbroken sample of the chain.
//!
//! Token layout: `[0, n_markov)` chain symbols, then keys, then values,
//! then the `KV` and `QUERY` markers as the last two ids.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{DashError, Result};

const MAGIC: &[u8; 8] = b"DASHCORP";
const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub vocab: usize,
    pub n_keys: usize,
    pub n_values: usize,
    /// Key–value pairs per recall segment.
    pub pairs: usize,
    /// Chain tokens between the last pair and the query.
    pub gap: usize,
    /// Probability of opening a recall segment before each chain token.
    pub segment_rate: f64,
    /// Non-zero successors per context before smoothing.
    pub successors: usize,
    /// Weight of the uniform component mixed into every row.
    pub smoothing: f64,
    pub table_seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            vocab: 64,
            n_keys: 12,
            n_values: 12,
            pairs: 3,
            gap: 20,
            segment_rate: 0.02,
            successors: 3,
            smoothing: 0.05,
            table_seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DashError::Config(format!("corpus generator: {m}")));
        if self.vocab > u16::MAX as usize {
            return bad("vocabulary must fit in 16 bits");
        }
        if self.n_keys + self.n_values + 2 + 2 > self.vocab {
            return bad("vocabulary too small for keys, values, markers and a chain alphabet of 2");
        }
        if self.pairs == 0 || self.pairs > self.n_keys {
            return bad("pairs per segment must be in 1..=n_keys");
        }
        if self.n_values == 0 {
            return bad("need at least one value token");
        }
        if !(0.0..1.0).contains(&self.segment_rate) {
            return bad("segment_rate must be in [0, 1)");
        }
        if self.successors == 0 || self.successors > self.n_markov() {
            return bad("successors must be in 1..=chain alphabet size");
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return bad("smoothing must be in [0, 1]");
        }
        Ok(())
    }

    pub fn n_markov(&self) -> usize {
        self.vocab.saturating_sub(self.n_keys + self.n_values + 2)
    }

    pub fn key_token(&self, i: usize) -> usize {
        self.n_markov() + i
    }

    pub fn value_token(&self, i: usize) -> usize {
        self.n_markov() + self.n_keys + i
    }

    pub fn kv_marker(&self) -> usize {
        self.vocab - 2
    }

    pub fn query_marker(&self) -> usize {
        self.vocab - 1
    }

    pub fn is_value(&self, token: usize) -> bool {
        let lo = self.value_token(0);
        (lo..lo + self.n_values).contains(&token)
    }

    pub fn segment_len(&self) -> usize {
        1 + 2 * self.pairs + self.gap + 3
    }
}

/// Order-2 transition table: row `a·M + b` is `P(· | a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovTable {
    pub alphabet: usize,
    probs: Vec<f64>,
}

impl MarkovTable {
    pub fn generate(spec: &GeneratorSpec) -> MarkovTable {
        let m = spec.n_markov();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.table_seed);
        let mut probs = vec![spec.smoothing / m as f64; m * m * m];
        for ctx in 0..m * m {
            let support = sample(&mut rng, m, spec.successors);
            let weights: Vec<f64> = (0..spec.successors).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = weights.iter().sum();
            for (next, w) in support.iter().zip(&weights) {
                probs[ctx * m + next] += (1.0 - spec.smoothing) * w / total;
            }
        }
        MarkovTable { alphabet: m, probs }
    }

    pub fn row(&self, a: usize, b: usize) -> &[f64] {
        let m = self.alphabet;
        let ctx = a * m + b;
        &self.probs[ctx * m..(ctx + 1) * m]
    }

    pub fn sample_next(&self, a: usize, b: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let row = self.row(a, b);
        for (c, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return c;
            }
        }
        row.len() - 1
    }

    /// Stationary distribution over pair states `(a, b)` by power iteration.
    pub fn stationary_pairs(&self) -> Vec<f64> {
        let m = self.alphabet;
        let mut pi = vec![1.0 / (m * m) as f64; m * m];
        for _ in 0..10_000 {
            let mut next = vec![0.0; m * m];
            for a in 0..m {
                for b in 0..m {
                    let mass = pi[a * m + b];
                    for (c, &p) in self.row(a, b).iter().enumerate() {
                        next[b * m + c] += mass * p;
                    }
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(x, y)| (x - y).abs()).sum();
            pi = next;
            if delta < 1e-14 {
                break;
            }
        }
        pi
    }

    /// Marginal stationary distribution over single chain symbols.
    pub fn stationary_unigram(&self) -> Vec<f64> {
        let m = self.alphabet;
        let pairs = self.stationary_pairs();
        let mut uni = vec![0.0; m];
        for b in 0..m {
            for c in 0..m {
                uni[c] += pairs[b * m + c];
            }
        }
        uni
    }

    /// Entropy rate in nats per chain token.
    pub fn entropy_rate(&self) -> f64 {
        let m = self.alphabet;
        let pairs = self.stationary_pairs();
        let mut h = 0.0;
        for a in 0..m {
            for b in 0..m {
                let row_h: f64 = self.row(a, b).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
                h += pairs[a * m + b] * row_h;
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: GeneratorSpec,
    pub tokens: Vec<u16>,
}

/// Deterministic stream of `n_tokens` tokens.
pub fn gen_corpus(seed: u64, n_tokens: usize, spec: &GeneratorSpec) -> Result<Corpus> {
    spec.validate()?;
    let table = MarkovTable::generate(spec);
    let m = table.alphabet;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<u16> = Vec::with_capacity(n_tokens);
    let (mut a, mut b) = (rng.gen_range(0..m), rng.gen_range(0..m));
    let mut chain_step = |rng: &mut ChaCha8Rng, tokens: &mut Vec<u16>| {
        let c = table.sample_next(a, b, rng);
        tokens.push(c as u16);
        (a, b) = (b, c);
    };
    while tokens.len() < n_tokens {
        if rng.gen::<f64>() < spec.segment_rate {
            let keys = sample(&mut rng, spec.n_keys, spec.pairs).into_vec();
            let values: Vec<usize> = (0..spec.pairs).map(|_| rng.gen_range(0..spec.n_values)).collect();
            tokens.push(spec.kv_marker() as u16);
            for (&k, &v) in keys.iter().zip(&values) {
                tokens.push(spec.key_token(k) as u16);
                tokens.push(spec.value_token(v) as u16);
            }
            for _ in 0..spec.gap {
                chain_step(&mut rng, &mut tokens);
            }
            let j = rng.gen_range(0..spec.pairs);
            tokens.push(spec.query_marker() as u16);
            tokens.push(spec.key_token(keys[j]) as u16);
            tokens.push(spec.value_token(values[j]) as u16);
        } else {
            chain_step(&mut rng, &mut tokens);
        }
    }
    tokens.truncate(n_tokens);
    Ok(Corpus {
        spec: spec.clone(),
        tokens,
    })
}

impl Corpus {
    /// Splits off the last `fraction` of the stream as held-out data.
    pub fn split(&self, fraction: f64) -> (&[u16], &[u16]) {
        let cut = ((1.0 - fraction.clamp(0.0, 1.0)) * self.tokens.len() as f64).round() as usize;
        self.tokens.split_at(cut)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| DashError::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let spec = serde_json::to_vec(&self.spec).expect("generator spec serializes");
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&CORPUS_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(spec.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&spec).map_err(io)?;
        w.write_all(&(self.tokens.len() as u64).to_le_bytes()).map_err(io)?;
        for t in &self.tokens {
            w.write_all(&t.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| DashError::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| DashError::io(path, e))?;
        let corrupt = |reason: &str| DashError::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| corrupt("truncated header"))? != MAGIC {
            return Err(corrupt("not a corpus file"));
        }
        let version = cur.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != CORPUS_VERSION {
            return Err(DashError::VersionMismatch {
                found: version,
                expected: CORPUS_VERSION,
            });
        }
        let spec_len = cur.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let spec_bytes = cur.take(spec_len).ok_or_else(|| corrupt("truncated generator spec"))?;
        let spec: GeneratorSpec =
            serde_json::from_slice(spec_bytes).map_err(|e| corrupt(&format!("generator spec: {e}")))?;
        let n = cur.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        let body = cur.take(n.checked_mul(2).ok_or_else(|| corrupt("bad length"))?);
        let body = body.ok_or_else(|| corrupt("token stream shorter than declared"))?;
        let tokens: Vec<u16> = body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= spec.vocab) {
            return Err(corrupt(&format!("token {t} outside vocabulary {}", spec.vocab)));
        }
        Ok(Corpus { spec, tokens })
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// `batch` windows of `len` tokens at uniformly random offsets.
pub fn random_windows(tokens: &[u16], rng: &mut impl Rng, batch: usize, len: usize) -> Vec<Vec<usize>> {
    assert!(tokens.len() >= len, "token stream shorter than one window");
    (0..batch)
        .map(|_| {
            let start = rng.gen_range(0..=tokens.len() - len);
            tokens[start..start + len].iter().map(|&t| t as usize).collect()
        })
        .collect()
}

/// A fixed, seed-determined set of evaluation batches.
pub fn fixed_batches(tokens: &[u16], n_batches: usize, batch: usize, len: usize, seed: u64) -> Vec<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_batches)
        .map(|_| random_windows(tokens, &mut rng, batch, len))
        .collect()
}
