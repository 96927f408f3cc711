//! Connectionist temporal classification: exact likelihood and gradient,
//! best-path decoding and frame-synchronous prefix beam search.
//!
//! The blank symbol is always the last index of the output layer, i.e.
//! `blank_id == vocab.len()`.

mod beam;
mod loss;

use std::collections::HashSet;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::{self, POSTERIOR_MAGIC};
use crate::logmath::log_softmax_in_place;

pub use beam::{prefix_beam_search, BeamConfig, Hypothesis};
pub use loss::{ctc_log_likelihood, ctc_loss_and_grad, CtcLoss};

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("token id {id} outside of vocabulary of size {size}")]
    InvalidToken { id: usize, size: usize },
    #[error("target of length {target_len} cannot be aligned to {frames} frames")]
    Unreachable { frames: usize, target_len: usize },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid posteriors: {0}")]
    Posteriors(String),
    #[error("invalid beam configuration: {0}")]
    BeamConfig(String),
    #[error("language model is bound to a different vocabulary")]
    LmMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Closed token inventory. Blank is implicit and sits after the last token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Result<Self, CtcError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(CtcError::Vocabulary("vocabulary must hold at least one token".into()));
        }
        let mut seen = HashSet::new();
        for t in &tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(CtcError::Vocabulary(format!("bad token string {t:?}")));
            }
            if !seen.insert(t.as_str()) {
                return Err(CtcError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens })
    }

    /// Number of real tokens (blank excluded).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank_id(&self) -> usize {
        self.tokens.len()
    }

    /// Output-layer width: tokens plus blank.
    pub fn size_with_blank(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    /// Stable 64-bit digest of the token list, used to bind language models.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn check_labels(&self, labels: &[usize]) -> Result<(), CtcError> {
        match labels.iter().find(|&&id| id >= self.len()) {
            Some(&id) => Err(CtcError::InvalidToken { id, size: self.len() }),
            None => Ok(()),
        }
    }

    /// Space-separated token strings.
    pub fn render(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .map(|&id| self.token(id).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse(&self, line: &str) -> Result<Vec<usize>, CtcError> {
        line.split_whitespace()
            .map(|t| {
                self.id_of(t)
                    .ok_or_else(|| CtcError::Vocabulary(format!("unknown token {t:?}")))
            })
            .collect()
    }
}

/// Per-frame log-probabilities over tokens plus blank, shape `T x (|V|+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosteriors {
    log_probs: Array2<f64>,
}

const ROW_TOLERANCE: f64 = 1e-6;

impl FramePosteriors {
    /// Wraps an already normalized matrix, validating every row.
    pub fn from_log_probs(log_probs: Array2<f64>) -> Result<Self, CtcError> {
        if log_probs.ncols() < 2 {
            return Err(CtcError::Posteriors("need at least one token and blank".into()));
        }
        for (t, row) in log_probs.rows().into_iter().enumerate() {
            if row.iter().any(|&v| v.is_nan() || v > 1e-12) {
                return Err(CtcError::Posteriors(format!("row {t} has positive or NaN entries")));
            }
            let lse = crate::logmath::log_sum_exp(row.as_slice().expect("standard layout"));
            if (lse).abs() > ROW_TOLERANCE {
                return Err(CtcError::Posteriors(format!("row {t} sums to exp({lse})")));
            }
        }
        Ok(Self { log_probs })
    }

    /// Applies a row-wise log-softmax to unnormalized scores.
    pub fn from_logits(logits: &Array2<f64>) -> Self {
        let mut log_probs = logits.as_standard_layout().into_owned();
        for mut row in log_probs.rows_mut() {
            log_softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        Self { log_probs }
    }

    pub fn frames(&self) -> usize {
        self.log_probs.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.log_probs.ncols()
    }

    pub fn blank_id(&self) -> usize {
        self.log_probs.ncols() - 1
    }

    pub fn log_probs(&self) -> &Array2<f64> {
        &self.log_probs
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.log_probs.row(t)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), CtcError> {
        container::write_matrix(w, POSTERIOR_MAGIC, &self.log_probs)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Option<Self>, CtcError> {
        match container::read_matrix(r, POSTERIOR_MAGIC)? {
            Some(m) => Self::from_log_probs(m).map(Some),
            None => Ok(None),
        }
    }
}

/// The collapse map: merge consecutive repeats, then drop blanks.
pub fn collapse(alignment: &[usize], blank_id: usize) -> Result<Vec<usize>, CtcError> {
    if let Some(&id) = alignment.iter().find(|&&id| id > blank_id) {
        return Err(CtcError::InvalidToken { id, size: blank_id + 1 });
    }
    Ok(collapse_unchecked(alignment, blank_id))
}

pub(crate) fn collapse_unchecked(alignment: &[usize], blank_id: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &id in alignment {
        if Some(id) != prev && id != blank_id {
            out.push(id);
        }
        prev = Some(id);
    }
    out
}

/// Per-frame argmax (lowest id wins ties).
pub fn frame_argmax(post: &FramePosteriors) -> Vec<usize> {
    post.log_probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn best_path_decode(post: &FramePosteriors) -> Vec<usize> {
    collapse_unchecked(&frame_argmax(post), post.blank_id())
}

/// One step of label history fed to a [`PrefixScorer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmToken {
    Token(usize),
    End,
}

/// Opaque scorer state: the retained context window of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LmState(pub Vec<u32>);

/// Decoder-facing language-model interface used for shallow fusion.
pub trait PrefixScorer {
    fn initial_state(&self) -> LmState;
    /// Natural-log probability of `token` after `state`, plus the successor state.
    fn score_extension(&self, state: &LmState, token: LmToken) -> (f64, LmState);
    /// Fingerprint of the vocabulary the scorer was trained over.
    fn vocab_fingerprint(&self) -> u64;
}
