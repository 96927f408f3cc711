use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CtcError, FramePosteriors, LmState, LmToken, PrefixScorer, Vocabulary};
use crate::logmath::log_add;

const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Prefixes scoring more than this below the frame-best are dropped.
    pub prune_threshold: f64,
    pub lm_weight: f64,
    /// Added once per emitted token.
    pub insertion_bonus: f64,
    pub nbest: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_size: 20, prune_threshold: 14.0, lm_weight: 0.3, insertion_bonus: 0.5, nbest: 1 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), CtcError> {
        let bad = |m: &str| Err(CtcError::BeamConfig(m.to_string()));
        if self.beam_size == 0 {
            return bad("beam_size must be positive");
        }
        if self.nbest == 0 || self.nbest > self.beam_size {
            return bad("nbest must be in 1..=beam_size");
        }
        if self.prune_threshold.is_nan() || self.prune_threshold < 0.0 {
            return bad("prune_threshold must be non-negative");
        }
        if !(self.lm_weight >= 0.0) || !self.lm_weight.is_finite() {
            return bad("lm_weight must be a finite non-negative number");
        }
        if !self.insertion_bonus.is_finite() {
            return bad("insertion_bonus must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Fused score used for ranking.
    pub score: f64,
    /// `log P_ctc(tokens | X)` accumulated over surviving paths.
    pub ctc_score: f64,
    /// `log P_lm(tokens)` including the end-of-sentence event; 0 without an LM.
    pub lm_score: f64,
}

#[derive(Clone)]
struct Prefix {
    tokens: Vec<usize>,
    blank: f64,
    non_blank: f64,
    lm_state: LmState,
    lm_score: f64,
}

impl Prefix {
    fn ctc(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

struct Fusion<'a> {
    lm: Option<&'a dyn PrefixScorer>,
    weight: f64,
    bonus: f64,
}

impl Fusion<'_> {
    fn score(&self, p: &Prefix) -> f64 {
        let mut s = p.ctc() + self.bonus * p.tokens.len() as f64;
        if self.lm.is_some() {
            s += self.weight * p.lm_score;
        }
        s
    }
}

fn rank(a: f64, a_tokens: &[usize], b: f64, b_tokens: &[usize]) -> Ordering {
    b.total_cmp(&a).then_with(|| a_tokens.cmp(b_tokens))
}

/// Frame-synchronous CTC prefix beam search with optional shallow fusion.
///
/// Hypotheses are ranked by `log P_ctc + lm_weight * log P_lm + insertion_bonus * |Y|`.
/// A zero `lm_weight` disables the scorer entirely.
pub fn prefix_beam_search(
    post: &FramePosteriors,
    vocab: &Vocabulary,
    cfg: &BeamConfig,
    lm: Option<&dyn PrefixScorer>,
) -> Result<Vec<Hypothesis>, CtcError> {
    cfg.validate()?;
    if post.num_classes() != vocab.size_with_blank() {
        return Err(CtcError::Posteriors(format!(
            "posteriors have {} classes, vocabulary needs {}",
            post.num_classes(),
            vocab.size_with_blank()
        )));
    }
    if let Some(lm) = lm {
        if lm.vocab_fingerprint() != vocab.fingerprint() {
            return Err(CtcError::LmMismatch);
        }
    }
    let lm = if cfg.lm_weight == 0.0 { None } else { lm };
    let fusion = Fusion { lm, weight: cfg.lm_weight, bonus: cfg.insertion_bonus };
    let blank = vocab.blank_id();
    let lp = post.log_probs();

    let mut beams = vec![Prefix {
        tokens: Vec::new(),
        blank: 0.0,
        non_blank: NEG_INF,
        lm_state: lm.map(|l| l.initial_state()).unwrap_or_default(),
        lm_score: 0.0,
    }];

    for t in 0..post.frames() {
        let mut next: Vec<Prefix> = Vec::with_capacity(beams.len() * vocab.size_with_blank());
        let mut index: HashMap<Vec<usize>, usize> = HashMap::with_capacity(next.capacity());

        // Seed the frame with every surviving prefix so extensions can merge into it.
        for p in &beams {
            index.insert(p.tokens.clone(), next.len());
            next.push(Prefix { blank: NEG_INF, non_blank: NEG_INF, ..p.clone() });
        }

        for (bi, p) in beams.iter().enumerate() {
            let total = p.ctc();
            let slot = &mut next[bi];
            slot.blank = log_add(slot.blank, total + lp[[t, blank]]);
            if let Some(&last) = p.tokens.last() {
                slot.non_blank = log_add(slot.non_blank, p.non_blank + lp[[t, last]]);
            }

            for c in 0..vocab.len() {
                let emit = lp[[t, c]];
                if emit == NEG_INF {
                    continue;
                }
                let mass = if p.tokens.last() == Some(&c) { p.blank } else { total };
                if mass == NEG_INF {
                    continue;
                }
                let mut tokens = p.tokens.clone();
                tokens.push(c);
                let pos = match index.get(&tokens) {
                    Some(&pos) => pos,
                    None => {
                        let (lm_state, lm_score) = match lm {
                            Some(scorer) => {
                                let (s, st) = scorer.score_extension(&p.lm_state, LmToken::Token(c));
                                (st, p.lm_score + s)
                            }
                            None => (LmState::default(), 0.0),
                        };
                        index.insert(tokens.clone(), next.len());
                        next.push(Prefix { tokens, blank: NEG_INF, non_blank: NEG_INF, lm_state, lm_score });
                        next.len() - 1
                    }
                };
                let slot = &mut next[pos];
                slot.non_blank = log_add(slot.non_blank, mass + emit);
            }
        }

        let mut scored: Vec<(f64, Prefix)> = next
            .into_iter()
            .map(|p| (fusion.score(&p), p))
            .filter(|(s, _)| *s > NEG_INF)
            .collect();
        scored.sort_by(|(a, pa), (b, pb)| rank(*a, &pa.tokens, *b, &pb.tokens));
        let best = scored.first().map(|(s, _)| *s).unwrap_or(NEG_INF);
        beams = scored
            .into_iter()
            .take_while(|(s, _)| *s >= best - cfg.prune_threshold)
            .take(cfg.beam_size)
            .map(|(_, p)| p)
            .collect();
    }

    let mut hyps: Vec<Hypothesis> = beams
        .into_iter()
        .map(|p| {
            let ctc_score = p.ctc();
            let mut score = ctc_score + fusion.bonus * p.tokens.len() as f64;
            let mut lm_score = 0.0;
            if let Some(scorer) = lm {
                let (end, _) = scorer.score_extension(&p.lm_state, LmToken::End);
                lm_score = p.lm_score + end;
                score += fusion.weight * lm_score;
            }
            Hypothesis { tokens: p.tokens, score, ctc_score, lm_score }
        })
        .collect();
    hyps.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
    hyps.truncate(cfg.nbest);
    Ok(hyps)
}
