//! The Bigram-Backcopy task.
//!
//! Sequences are a Markov chain over a character-level bigram table, except
//! after a *trigger* token, where the token preceding the trigger is copied
//! (BB), or re-sampled from its own bigram row (BS, "bigram skip-one").

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Bundled public-domain sample (the text of *Hamlet*).
pub const DEFAULT_CORPUS: &str = include_str!("../data/hamlet.txt");

pub const DEFAULT_VOCAB: usize = 64;
pub const DEFAULT_TRIGGERS: usize = 3;

const ROW_SUM_TOL: f64 = 1e-9;
const POWER_ITER_TOL: f64 = 1e-13;
const POWER_ITER_MAX: usize = 100_000;

#[derive(Clone, Debug)]
pub struct BigramSpec {
    labels: Vec<String>,
    /// Row-major `V x V`; `p[v * V + k] = P(k | v)`.
    p: Vec<f64>,
    triggers: Vec<usize>,
    is_trigger: Vec<bool>,
    pi: Vec<f64>,
    pi_tilde: Vec<f64>,
    smoothing: f64,
    source_hash: String,
    row_cdf: Vec<f64>,
    start_cdf: Vec<f64>,
}

/// JSON form of a [`BigramSpec`]; `pi` is recomputed on import.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDocument {
    labels: Vec<String>,
    #[serde(rename = "P")]
    p: Vec<f64>,
    triggers: Vec<usize>,
    smoothing: f64,
    source_hash: String,
}

impl BigramSpec {
    pub fn new(
        labels: Vec<String>,
        p: Vec<f64>,
        triggers: Vec<usize>,
        smoothing: f64,
        source_hash: String,
    ) -> Result<Self> {
        let v = labels.len();
        if v < 2 {
            return Err(Error::config("vocabulary needs at least two tokens"));
        }
        if p.len() != v * v {
            return Err(Error::arg(format!("transition matrix has {} entries, expected {}", p.len(), v * v)));
        }
        let mut is_trigger = vec![false; v];
        for &t in &triggers {
            if t >= v {
                return Err(Error::arg(format!("trigger id {t} out of range")));
            }
            if is_trigger[t] {
                return Err(Error::arg(format!("duplicate trigger id {t}")));
            }
            is_trigger[t] = true;
        }
        if triggers.len() >= v {
            return Err(Error::config("every token is a trigger"));
        }
        let pi = stationary(&p, v)?;
        let pi_tilde: Vec<f64> = pi
            .iter()
            .zip(&is_trigger)
            .map(|(&x, &t)| if t { 0.0 } else { x })
            .collect();
        if pi_tilde.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("non-trigger tokens carry no stationary mass"));
        }

        let mut row_cdf = vec![0.0; v * v];
        for r in 0..v {
            cumulative(&p[r * v..(r + 1) * v], &mut row_cdf[r * v..(r + 1) * v]);
        }
        let mut start_cdf = vec![0.0; v];
        cumulative(&pi_tilde, &mut start_cdf);

        Ok(Self {
            labels,
            p,
            triggers,
            is_trigger,
            pi,
            pi_tilde,
            smoothing,
            source_hash,
            row_cdf,
            start_cdf,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.labels.len()
    }

    /// Id of the beginning-of-sequence token, one past the last real token.
    pub fn bos_id(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn transition(&self) -> &[f64] {
        &self.p
    }

    pub fn row(&self, v: usize) -> &[f64] {
        let n = self.vocab_size();
        &self.p[v * n..(v + 1) * n]
    }

    pub fn triggers(&self) -> &[usize] {
        &self.triggers
    }

    pub fn is_trigger(&self, v: usize) -> bool {
        self.is_trigger.get(v).copied().unwrap_or(false)
    }

    pub fn trigger_flags(&self) -> &[bool] {
        &self.is_trigger
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// Stationary distribution with trigger entries zeroed (not renormalized).
    pub fn pi_tilde(&self) -> &[f64] {
        &self.pi_tilde
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SpecDocument {
            labels: self.labels.clone(),
            p: self.p.clone(),
            triggers: self.triggers.clone(),
            smoothing: self.smoothing,
            source_hash: self.source_hash.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: SpecDocument = serde_json::from_str(s)?;
        Self::new(doc.labels, doc.p, doc.triggers, doc.smoothing, doc.source_hash)
    }

    fn sample_row(&self, v: usize, rng: &mut impl Rng) -> usize {
        let n = self.vocab_size();
        draw(&self.row_cdf[v * n..(v + 1) * n], rng)
    }

    fn sample_start(&self, rng: &mut impl Rng) -> usize {
        draw(&self.start_cdf, rng)
    }
}

fn cumulative(weights: &[f64], out: &mut [f64]) {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (o, w) in out.iter_mut().zip(weights) {
        acc += w / total;
        *o = acc;
    }
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
}

fn draw(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn printable(b: u8) -> String {
    match b {
        b'\n' => "\\n".to_string(),
        b'\t' => "\\t".to_string(),
        b'\r' => "\\r".to_string(),
        0x20..=0x7e => (b as char).to_string(),
        _ => format!("\\x{b:02x}"),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Character-level (byte-level) bigram table with add-`smoothing` counts.
///
/// The vocabulary is the `vocab` most frequent bytes (ties broken by byte
/// value), token ids are frequency ranks, and the triggers are the three most
/// frequent tokens (fewer when `vocab <= 3`, so at least one token stays
/// non-trigger).
pub fn estimate_bigram(corpus: &[u8], vocab: usize, smoothing: f64) -> Result<BigramSpec> {
    if !smoothing.is_finite() || smoothing <= 0.0 {
        return Err(Error::arg(format!("smoothing must be finite and positive, got {smoothing}")));
    }
    if vocab < 2 {
        return Err(Error::config("vocabulary size must be at least 2"));
    }
    let mut counts = [0usize; 256];
    for &b in corpus {
        counts[b as usize] += 1;
    }
    let distinct = counts.iter().filter(|&&c| c > 0).count();
    if distinct < vocab {
        return Err(Error::config(format!(
            "corpus has {distinct} distinct characters, need at least {vocab}"
        )));
    }
    if corpus.len() < 10 * vocab * vocab {
        return Err(Error::config(format!(
            "corpus has {} characters, need at least {}",
            corpus.len(),
            10 * vocab * vocab
        )));
    }

    let mut by_freq: Vec<u8> = (0..=255u8).filter(|&b| counts[b as usize] > 0).collect();
    by_freq.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    by_freq.truncate(vocab);

    let mut id_of = [usize::MAX; 256];
    for (i, &b) in by_freq.iter().enumerate() {
        id_of[b as usize] = i;
    }

    let mut table = vec![smoothing; vocab * vocab];
    for w in corpus.windows(2) {
        let (a, b) = (id_of[w[0] as usize], id_of[w[1] as usize]);
        if a != usize::MAX && b != usize::MAX {
            table[a * vocab + b] += 1.0;
        }
    }
    for r in 0..vocab {
        let row = &mut table[r * vocab..(r + 1) * vocab];
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }

    let n_triggers = DEFAULT_TRIGGERS.min(vocab - 1);
    let labels = by_freq.iter().map(|&b| printable(b)).collect();
    BigramSpec::new(labels, table, (0..n_triggers).collect(), smoothing, sha256_hex(corpus))
}

/// Spec built from the bundled corpus with default vocabulary and smoothing.
pub fn default_spec() -> BigramSpec {
    estimate_bigram(DEFAULT_CORPUS.as_bytes(), DEFAULT_VOCAB, 1.0).expect("bundled corpus is valid")
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
///
/// Iterates the lazy chain `(I + P) / 2`, which has the same fixed point but
/// no eigenvalue near -1, so nearly periodic chains still converge.
pub fn stationary(p: &[f64], v: usize) -> Result<Vec<f64>> {
    if v == 0 || p.len() != v * v {
        return Err(Error::arg("stationary: matrix must be square and non-empty"));
    }
    for r in 0..v {
        let row = &p[r * v..(r + 1) * v];
        if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::arg(format!("stationary: row {r} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::arg(format!("stationary: row {r} sums to {s}")));
        }
    }
    let mut pi = vec![1.0 / v as f64; v];
    let mut next = vec![0.0; v];
    for _ in 0..POWER_ITER_MAX {
        next.iter_mut().zip(&pi).for_each(|(n, &x)| *n = x);
        for (r, &w) in pi.iter().enumerate() {
            for (n, &pk) in next.iter_mut().zip(&p[r * v..(r + 1) * v]) {
                *n += w * pk;
            }
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= s);
        let change: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if change < POWER_ITER_TOL {
            return Ok(pi);
        }
    }
    Err(Error::numeric("stationary", "power iteration did not converge"))
}

/// Per-token entropy (nats) of the transition rows.
pub fn bayes_entropy_table(spec: &BigramSpec) -> Vec<f64> {
    (0..spec.vocab_size()).map(|v| entropy(spec.row(v))).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "BB")]
    Bb,
    #[serde(rename = "BB_NO_BOS")]
    BbNoBos,
    #[serde(rename = "BS")]
    Bs,
}

impl Variant {
    pub fn has_bos(self) -> bool {
        !matches!(self, Variant::BbNoBos)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Bb => "BB",
            Variant::BbNoBos => "BB_NO_BOS",
            Variant::Bs => "BS",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BB" => Ok(Variant::Bb),
            "BB_NO_BOS" => Ok(Variant::BbNoBos),
            "BS" => Ok(Variant::Bs),
            other => Err(Error::arg(format!("unknown task variant `{other}`"))),
        }
    }
}

/// `batch x (n + 1)` token ids plus the positions whose next token came from
/// the trigger rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    tokens: Vec<usize>,
    trigger_mask: Vec<bool>,
    batch: usize,
    len: usize,
    variant: Variant,
    seed: u64,
}

impl SequenceBatch {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Number of columns, `N + 1`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn token(&self, b: usize, i: usize) -> usize {
        self.tokens[b * self.len + i]
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.len..(b + 1) * self.len]
    }

    pub fn trigger_mask(&self) -> &[bool] {
        &self.trigger_mask
    }

    /// True when the token at `i + 1` was produced by the trigger rule.
    pub fn is_trigger_output(&self, b: usize, i: usize) -> bool {
        self.trigger_mask[b * self.len + i]
    }

    /// Same shape, variant and mask with different token ids (for perturbation probes).
    pub fn with_tokens(&self, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != self.tokens.len() {
            return Err(Error::arg("with_tokens: token count mismatch"));
        }
        Ok(Self { tokens, ..self.clone() })
    }

    /// Debug dump: `batch_idx,position,token_id,is_trigger_output`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#schema=batch-v1")?;
        writeln!(w, "batch_idx,position,token_id,is_trigger_output")?;
        for b in 0..self.batch {
            for i in 0..self.len {
                writeln!(w, "{b},{i},{},{}", self.token(b, i), u8::from(self.is_trigger_output(b, i)))?;
            }
        }
        Ok(())
    }
}

/// Sample `batch` sequences with `n + 1` columns each.
///
/// Sequence `b` uses its own generator, `rng::stream(seed, b)`.
pub fn sample_batch(
    spec: &BigramSpec,
    batch: usize,
    n: usize,
    variant: Variant,
    seed: u64,
) -> Result<SequenceBatch> {
    if batch == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    if n < 2 {
        return Err(Error::arg("sequence length must be at least 2"));
    }
    let len = n + 1;
    let mut tokens = vec![0usize; batch * len];
    let mut trigger_mask = vec![false; batch * len];
    for b in 0..batch {
        let mut rng = rng::stream(seed, b as u64);
        let row = &mut tokens[b * len..(b + 1) * len];
        let mask = &mut trigger_mask[b * len..(b + 1) * len];
        let first = if variant.has_bos() {
            row[0] = spec.bos_id();
            row[1] = spec.sample_start(&mut rng);
            1
        } else {
            row[0] = spec.sample_start(&mut rng);
            0
        };
        for i in first..n {
            let cur = row[i];
            // The first real token is never a trigger, so `i - 1` is a real token here.
            if spec.is_trigger(cur) && i > first {
                mask[i] = true;
                row[i + 1] = match variant {
                    Variant::Bb | Variant::BbNoBos => row[i - 1],
                    Variant::Bs => spec.sample_row(row[i - 1], &mut rng),
                };
            } else {
                row[i + 1] = spec.sample_row(cur, &mut rng);
            }
        }
    }
    Ok(SequenceBatch { tokens, trigger_mask, batch, len, variant, seed })
}
