//! Supervised seeding, (iterative) pseudo-labeling and momentum
//! pseudo-labeling.
//!
//! Training code only sees labeled [`Utterance`]s and bare unlabeled
//! [`FeatureSequence`]s; it has no route to hidden transcripts.

mod optim;
mod regimes;

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentPolicy;
use crate::ctc::{best_path_decode, ctc_loss_and_grad, CtcError};
use crate::datagen::{FeatureSequence, Utterance};
use crate::encoder::{apply_statistics, Encoder, EncoderError, Mode, ParameterSet};
use crate::logmath::mix_seed;
use crate::metrics::token_error_rate;

pub use optim::{clip_grad_norm, LrSchedule, Optimizer, OptimizerConfig};
pub use regimes::{
    generate_pseudo_labels, run_ipl, run_mpl, train_seed, IplOutcome, MplOutcome, MplState, SeedOutcome,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no trainable samples: every target is unreachable for CTC")]
    NothingTrainable,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Seed-training epochs.
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed-training optimizer, used with `lr_schedule`.
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    /// Optimizer for the semi-supervised phases, at a constant rate.
    pub ssl_optimizer: OptimizerConfig,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Fraction of the epoch-start offline model retained after one epoch.
    pub w: f64,
    pub ipl_iters: usize,
    pub ipl_epochs_per_iter: usize,
    /// Checkpoints averaged after each IPL iteration.
    pub ipl_avg_last: usize,
    pub mpl_epochs: usize,
    /// Best-by-validation checkpoints averaged for the final model.
    pub checkpoint_avg_n: usize,
    /// Labeled share of each epoch's samples; `None` keeps the natural N:M mix.
    pub sup_ratio_override: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            optimizer: OptimizerConfig::adam(2e-3),
            lr_schedule: LrSchedule::Warmup { steps: 100 },
            ssl_optimizer: OptimizerConfig::adam(2e-4),
            grad_clip_norm: 5.0,
            seed: 0,
            w: 0.5,
            ipl_iters: 2,
            ipl_epochs_per_iter: 5,
            ipl_avg_last: 5,
            mpl_epochs: 30,
            checkpoint_avg_n: 10,
            sup_ratio_override: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.w > 0.0 && self.w <= 1.0) {
            return bad("w must lie in (0, 1]");
        }
        if self.ipl_iters == 0 || self.ipl_avg_last == 0 || self.checkpoint_avg_n == 0 {
            return bad("ipl_iters, ipl_avg_last and checkpoint_avg_n must be positive");
        }
        if let Some(r) = self.sup_ratio_override {
            if !(r > 0.0 && r < 1.0) {
                return bad("sup_ratio_override must lie in (0, 1)");
            }
        }
        for o in [self.optimizer, self.ssl_optimizer] {
            if !(o.lr() >= 0.0) {
                return bad("learning rates must be non-negative");
            }
        }
        Ok(())
    }
}

/// Which stream a batch is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub stream: Stream,
    /// Indices into the stream's sample list.
    pub items: Vec<usize>,
}

/// Shuffles the union of `n_labeled` and `n_unlabeled` samples with a stream
/// seeded by `(seed, epoch)`, then cuts status-homogeneous batches: walking
/// the shuffled order, each sample joins the pending batch of its stream and
/// a batch is emitted when full. Leftover partial batches are emitted in the
/// order their first sample appeared.
///
/// With `sup_ratio` set, the labeled stream is resampled (cycling a shuffled
/// order) so labeled samples make up that share of the epoch.
pub fn compose_batches(
    n_labeled: usize,
    n_unlabeled: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    sup_ratio: Option<f64>,
) -> Vec<Batch> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xBA7C, epoch as u64]));
    let labeled: Vec<usize> = match sup_ratio {
        Some(r) if n_labeled > 0 && n_unlabeled > 0 => {
            let count = ((r / (1.0 - r)) * n_unlabeled as f64).round().max(1.0) as usize;
            let mut order: Vec<usize> = (0..n_labeled).collect();
            order.shuffle(&mut rng);
            (0..count).map(|i| order[i % n_labeled]).collect()
        }
        _ => (0..n_labeled).collect(),
    };
    let mut union: Vec<(Stream, usize)> = labeled
        .iter()
        .map(|&i| (Stream::Labeled, i))
        .chain((0..n_unlabeled).map(|i| (Stream::Unlabeled, i)))
        .collect();
    union.shuffle(&mut rng);

    let mut out = Vec::new();
    let mut pending: [(Option<usize>, Vec<usize>); 2] = [(None, Vec::new()), (None, Vec::new())];
    for (pos, (stream, idx)) in union.into_iter().enumerate() {
        let slot = &mut pending[stream as usize];
        slot.0.get_or_insert(pos);
        slot.1.push(idx);
        if slot.1.len() == batch_size {
            out.push(Batch { stream, items: std::mem::take(&mut slot.1) });
            slot.0 = None;
        }
    }
    let mut rest: Vec<(usize, Stream, Vec<usize>)> = pending
        .into_iter()
        .zip([Stream::Labeled, Stream::Unlabeled])
        .filter_map(|((first, items), s)| first.map(|f| (f, s, items)))
        .collect();
    rest.sort_by_key(|r| r.0);
    out.extend(rest.into_iter().map(|(_, stream, items)| Batch { stream, items }));
    out
}

/// One record per completed epoch. Fields serialize in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub supervised_loss: Option<f64>,
    pub unsupervised_loss: Option<f64>,
    pub valid_ter: f64,
    pub valid_wer: f64,
    pub pseudo_label_churn: Option<f64>,
    pub skipped: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn extend(&mut self, other: RunLog) {
        self.records.extend(other.records);
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// A training example borrowed from either stream.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a FeatureSequence,
    pub labels: &'a [usize],
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub loss_sum: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Shared state for one training run.
pub struct Session<'a> {
    pub encoder: &'a Encoder,
    pub config: &'a TrainConfig,
    pub augment: &'a AugmentPolicy,
    /// Per-epoch checkpoints are written here when set.
    pub checkpoint_dir: Option<&'a std::path::Path>,
}

impl Session<'_> {
    /// One optimizer update on the mean CTC loss of the reachable examples.
    /// Unreachable examples are skipped and counted. Batch-norm statistics are
    /// refreshed from the same forward pass.
    pub fn step(
        &self,
        params: &mut ParameterSet,
        opt: &mut Optimizer,
        batch: &[Example<'_>],
        rng_seed: u64,
    ) -> Result<StepStats, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let augmented: Vec<FeatureSequence> = batch.iter().map(|e| self.augment.apply(e.features, &mut rng)).collect();
        let refs: Vec<&FeatureSequence> = augmented.iter().collect();
        let out = self.encoder.forward_batch(params, &refs, Mode::Train, &mut rng)?;
        let mut stats = StepStats::default();
        let mut grads = Vec::with_capacity(batch.len());
        let mut losses = Vec::with_capacity(batch.len());
        for (post, ex) in out.posteriors.iter().zip(batch) {
            match ctc_loss_and_grad(post, ex.labels) {
                Ok(l) => {
                    stats.used += 1;
                    losses.push(l.loss);
                    grads.push(Some(l.grad));
                }
                Err(CtcError::Unreachable { .. }) => {
                    stats.skipped += 1;
                    grads.push(None);
                }
                Err(e) => return Err(e.into()),
            }
        }
        stats.loss_sum = losses.iter().sum();
        if stats.used > 0 {
            let scale = 1.0 / stats.used as f64;
            let upstream: Vec<Array2<f64>> = grads
                .into_iter()
                .zip(&out.posteriors)
                .map(|(g, p)| g.map_or_else(|| Array2::zeros(p.log_probs().raw_dim()), |g| g * scale))
                .collect();
            let mut g = self.encoder.backward(params, &out.tape, &upstream)?;
            clip_grad_norm(&mut g, self.config.grad_clip_norm);
            opt.step(params, &g);
        }
        apply_statistics(params, &out.statistics);
        Ok(stats)
    }
}

/// Greedy decodes of `features` under eval mode.
pub fn greedy_decode_all(
    encoder: &Encoder,
    params: &ParameterSet,
    features: &[&FeatureSequence],
) -> Result<Vec<Vec<usize>>, TrainError> {
    features
        .iter()
        .map(|f| Ok(best_path_decode(&encoder.infer(params, f)?)))
        .collect()
}

/// Token error rate (percent) of greedy decoding on `data`.
pub fn validation_ter(encoder: &Encoder, params: &ParameterSet, data: &[Utterance]) -> Result<f64, TrainError> {
    let feats: Vec<&FeatureSequence> = data.iter().map(|u| &u.features).collect();
    let hyps = greedy_decode_all(encoder, params, &feats)?;
    let refs: Vec<Vec<usize>> = data.iter().map(|u| u.labels.clone()).collect();
    Ok(token_error_rate(&refs, &hyps))
}
