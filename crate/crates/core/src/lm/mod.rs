//! Backoff n-gram language model over the closed token vocabulary.
//!
//! Probabilities are stored as base-10 logarithms in backoff form: an n-gram
//! table per order plus a backoff weight per context. Lookup of `P(w | h)`
//! returns the listed n-gram if present, otherwise `bow(h) * P(w | h[1..])`.
//! The event set is every token plus the end-of-sentence marker.

mod arpa;

use std::collections::BTreeMap;
use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{LmState, LmToken, PrefixScorer, Vocabulary};

pub use arpa::{read_arpa, write_arpa};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
    #[error("token id {0} is outside the vocabulary")]
    InvalidToken(usize),
    #[error("smoothing constant must be finite and non-negative, got {0}")]
    BadSmoothing(f64),
    #[error("malformed LM file at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("LM was trained over a different vocabulary")]
    VocabMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Smoothing {
    /// Additive smoothing on the longest available context. Unseen contexts
    /// fall back to the uniform distribution when `k > 0` and to the
    /// next-shorter context when `k == 0`.
    AddK { k: f64 },
    /// Interpolated Witten-Bell, bottoming out in a uniform distribution.
    #[default]
    WittenBell,
}

type Gram = Vec<u32>;

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    tokens: Vec<String>,
    vocab_fingerprint: u64,
    smoothing: Smoothing,
    /// `probs[m - 1]`: n-grams of order `m` mapped to log10 probability.
    probs: Vec<BTreeMap<Gram, f64>>,
    /// `backoffs[l]`: contexts of length `l` mapped to log10 backoff weight.
    backoffs: Vec<BTreeMap<Gram, f64>>,
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    /// Number of predicted events: tokens plus end-of-sentence.
    pub fn num_events(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn end_symbol(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn begin_symbol(&self) -> u32 {
        self.tokens.len() as u32 + 1
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<(), LmError> {
        if vocab.fingerprint() == self.vocab_fingerprint && vocab.tokens() == self.tokens.as_slice() {
            Ok(())
        } else {
            Err(LmError::VocabMismatch)
        }
    }

    fn symbol(&self, token: LmToken) -> u32 {
        match token {
            LmToken::Token(id) => id as u32,
            LmToken::End => self.end_symbol(),
        }
    }

    /// log10 `P(w | context)` with the context truncated to `order - 1` symbols.
    pub fn log10_prob(&self, context: &[u32], w: u32) -> f64 {
        let keep = (self.order - 1).min(context.len());
        let context = &context[context.len() - keep..];
        let mut acc = 0.0;
        let mut key: Gram = Vec::with_capacity(context.len() + 1);
        for start in 0..=context.len() {
            let h = &context[start..];
            key.clear();
            key.extend_from_slice(h);
            key.push(w);
            if let Some(p) = self.probs[h.len()].get(&key) {
                return acc + p;
            }
            if let Some(b) = self.backoffs[h.len()].get(h) {
                acc += b;
            }
        }
        f64::NEG_INFINITY
    }

    /// Natural-log probability of a whole sentence, end marker included.
    pub fn sentence_log_prob(&self, sentence: &[usize]) -> f64 {
        let mut state = self.initial_state();
        let mut total = 0.0;
        for &id in sentence {
            let (s, next) = self.score_extension(&state, LmToken::Token(id));
            total += s;
            state = next;
        }
        total + self.score_extension(&state, LmToken::End).0
    }

    /// Every context that appears in the tables, used for normalization checks.
    pub fn known_contexts(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = vec![Vec::new()];
        for table in self.probs.iter().skip(1) {
            for gram in table.keys() {
                let h = gram[..gram.len() - 1].to_vec();
                if out.last() != Some(&h) && !out.contains(&h) {
                    out.push(h);
                }
            }
        }
        out
    }

    pub(crate) fn from_parts(
        order: usize,
        tokens: Vec<String>,
        smoothing: Smoothing,
        probs: Vec<BTreeMap<Gram, f64>>,
        backoffs: Vec<BTreeMap<Gram, f64>>,
    ) -> Self {
        let vocab_fingerprint = Vocabulary::new(tokens.iter().cloned())
            .map(|v| v.fingerprint())
            .unwrap_or(0);
        Self { order, tokens, vocab_fingerprint, smoothing, probs, backoffs }
    }
}

impl PrefixScorer for NgramModel {
    fn initial_state(&self) -> LmState {
        if self.order > 1 {
            LmState(vec![self.begin_symbol()])
        } else {
            LmState(Vec::new())
        }
    }

    fn score_extension(&self, state: &LmState, token: LmToken) -> (f64, LmState) {
        let w = self.symbol(token);
        let score = self.log10_prob(&state.0, w) * LN_10;
        let mut next = state.0.clone();
        if self.order > 1 {
            next.push(w);
            if next.len() > self.order - 1 {
                next.drain(..next.len() - (self.order - 1));
            }
        }
        (score, LmState(next))
    }

    fn vocab_fingerprint(&self) -> u64 {
        self.vocab_fingerprint
    }
}

/// Counts every n-gram up to `order`; contexts are truncated at sentence start.
fn count(corpus: &[Vec<usize>], order: usize, vocab_len: usize) -> Result<Vec<BTreeMap<Gram, u64>>, LmError> {
    let bos = vocab_len as u32 + 1;
    let eos = vocab_len as u32;
    let mut counts = vec![BTreeMap::new(); order];
    for sentence in corpus {
        let mut seq = Vec::with_capacity(sentence.len() + 2);
        seq.push(bos);
        for &id in sentence {
            if id >= vocab_len {
                return Err(LmError::InvalidToken(id));
            }
            seq.push(id as u32);
        }
        seq.push(eos);
        for i in 1..seq.len() {
            for m in 1..=order.min(i + 1) {
                *counts[m - 1].entry(seq[i + 1 - m..=i].to_vec()).or_insert(0) += 1;
            }
        }
    }
    Ok(counts)
}

/// Per-context totals and distinct-successor counts for one order.
fn context_stats(table: &BTreeMap<Gram, u64>) -> BTreeMap<Gram, (u64, u64)> {
    let mut stats: BTreeMap<Gram, (u64, u64)> = BTreeMap::new();
    for (gram, &c) in table {
        let e = stats.entry(gram[..gram.len() - 1].to_vec()).or_insert((0, 0));
        e.0 += c;
        e.1 += 1;
    }
    stats
}

/// Estimates a backoff n-gram model from token sequences.
pub fn train_ngram(
    corpus: &[Vec<usize>],
    vocab: &Vocabulary,
    order: usize,
    smoothing: Smoothing,
) -> Result<NgramModel, LmError> {
    if order == 0 {
        return Err(LmError::ZeroOrder);
    }
    if corpus.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    if let Smoothing::AddK { k } = smoothing {
        if !(k >= 0.0) || !k.is_finite() {
            return Err(LmError::BadSmoothing(k));
        }
    }
    let v = vocab.len();
    let events = (v + 1) as u32;
    let bos = v as u32 + 1;
    let counts = count(corpus, order, v)?;
    let mut model = NgramModel::from_parts(
        order,
        vocab.tokens().to_vec(),
        smoothing,
        vec![BTreeMap::new(); order],
        vec![BTreeMap::new(); order],
    );

    match smoothing {
        Smoothing::WittenBell => {
            let total: u64 = counts[0].values().sum();
            let distinct = counts[0].len() as f64;
            let uniform = 1.0 / events as f64;
            for w in 0..events {
                let c = counts[0].get(&vec![w]).copied().unwrap_or(0) as f64;
                let p = (c + distinct * uniform) / (total as f64 + distinct);
                model.probs[0].insert(vec![w], p.log10());
            }
            for m in 2..=order {
                let stats = context_stats(&counts[m - 1]);
                let mut table = BTreeMap::new();
                for (gram, &c) in &counts[m - 1] {
                    let h = &gram[..m - 1];
                    let (ch, th) = stats[h];
                    let lower = 10f64.powf(model.log10_prob(&h[1..], gram[m - 1]));
                    let p = (c as f64 + th as f64 * lower) / (ch + th) as f64;
                    table.insert(gram.clone(), p.log10());
                }
                for (h, (ch, th)) in stats {
                    let bow = th as f64 / (ch + th) as f64;
                    model.backoffs[m - 1].insert(h, bow.log10());
                }
                model.probs[m - 1] = table;
            }
        }
        Smoothing::AddK { k } if k > 0.0 => {
            let complete = |h: &[u32]| h.len() == order - 1 || h.first() == Some(&bos);
            let uniform = (1.0 / events as f64).log10();
            if order > 1 {
                for w in 0..events {
                    model.probs[0].insert(vec![w], uniform);
                }
            }
            for m in 1..=order {
                for (h, (ch, _)) in context_stats(&counts[m - 1]) {
                    if m > 1 && !complete(&h) {
                        continue;
                    }
                    if m == 1 && order > 1 {
                        continue;
                    }
                    let denom = ch as f64 + k * events as f64;
                    for w in 0..events {
                        let mut gram = h.clone();
                        gram.push(w);
                        let c = counts[m - 1].get(&gram).copied().unwrap_or(0) as f64;
                        model.probs[m - 1].insert(gram, ((c + k) / denom).log10());
                    }
                }
            }
        }
        Smoothing::AddK { .. } => {
            for m in 1..=order {
                let stats = context_stats(&counts[m - 1]);
                for (gram, &c) in &counts[m - 1] {
                    let ch = stats[&gram[..m - 1]].0;
                    model.probs[m - 1].insert(gram.clone(), (c as f64 / ch as f64).log10());
                }
                if m > 1 {
                    for h in stats.into_keys() {
                        model.backoffs[m - 1].insert(h, f64::NEG_INFINITY);
                    }
                }
            }
        }
    }
    Ok(model)
}

/// `exp(-mean log P)` over all events, end-of-sentence included.
pub fn perplexity(model: &NgramModel, corpus: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    let mut events = 0usize;
    for sentence in corpus {
        total += model.sentence_log_prob(sentence);
        events += sentence.len() + 1;
    }
    if events == 0 {
        return 1.0;
    }
    (-total / events as f64).exp()
}
