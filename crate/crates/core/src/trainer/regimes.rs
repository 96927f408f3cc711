use log::info;

use super::{
    compose_batches, greedy_decode_all, validation_ter, EpochRecord, Example, LrSchedule, Optimizer, RunLog, Session,
    Stream, TrainError,
};
use crate::ctc::{prefix_beam_search, BeamConfig, PrefixScorer, Vocabulary};
use crate::datagen::{FeatureSequence, Utterance};
use crate::encoder::{average_checkpoints, ema_update, momentum_from_weight, save_checkpoint, Encoder, ParameterSet};
use crate::logmath::mix_seed;

const PHASE_SEED: u64 = 1;
const PHASE_IPL: u64 = 2;
const PHASE_MPL: u64 = 3;

/// The `n` best checkpoints by validation error; ties keep the later epoch.
struct BestCheckpoints {
    n: usize,
    kept: Vec<(f64, usize, ParameterSet)>,
}

impl BestCheckpoints {
    fn new(n: usize) -> Self {
        Self { n, kept: Vec::new() }
    }

    fn offer(&mut self, ter: f64, epoch: usize, params: &ParameterSet) {
        self.kept.push((ter, epoch, params.clone()));
        self.kept.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        self.kept.truncate(self.n);
    }

    fn average(&self) -> Result<ParameterSet, TrainError> {
        let mut sets: Vec<&(f64, usize, ParameterSet)> = self.kept.iter().collect();
        sets.sort_by_key(|k| k.1);
        let refs: Vec<&ParameterSet> = sets.iter().map(|k| &k.2).collect();
        Ok(average_checkpoints(&refs)?)
    }
}

fn emit(session: &Session<'_>, phase: &str, epoch: usize, params: &ParameterSet) -> Result<(), TrainError> {
    if let Some(dir) = session.checkpoint_dir {
        let path = dir.join(format!("{phase}_epoch{epoch:03}.ckpt"));
        save_checkpoint(&path, session.encoder.config(), params)?;
    }
    Ok(())
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    /// Average of the best checkpoints by validation token error rate.
    pub params: ParameterSet,
    /// Parameters after the last epoch.
    pub last: ParameterSet,
    pub log: RunLog,
}

/// Supervised training on the labeled set.
pub fn train_seed(
    session: &Session<'_>,
    init: &ParameterSet,
    labeled: &[Utterance],
    dev: &[Utterance],
) -> Result<SeedOutcome, TrainError> {
    let cfg = session.config;
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(TrainError::Config("labeled set is empty".into()));
    }
    let mut params = init.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr_schedule, &params);
    let mut best = BestCheckpoints::new(cfg.checkpoint_avg_n);
    let mut log = RunLog::default();
    for epoch in 1..=cfg.epochs {
        let batches = compose_batches(labeled.len(), 0, cfg.batch_size, cfg.seed, epoch, None);
        let (mut loss, mut used, mut skipped) = (0.0, 0, 0);
        for (step, batch) in batches.iter().enumerate() {
            let examples: Vec<Example<'_>> = batch
                .items
                .iter()
                .map(|&i| Example { features: &labeled[i].features, labels: &labeled[i].labels })
                .collect();
            let seed = mix_seed(&[cfg.seed, PHASE_SEED, epoch as u64, step as u64]);
            let s = session.step(&mut params, &mut opt, &examples, seed)?;
            loss += s.loss_sum;
            used += s.used;
            skipped += s.skipped;
        }
        if used == 0 {
            return Err(TrainError::NothingTrainable);
        }
        let ter = validation_ter(session.encoder, &params, dev)?;
        info!("seed epoch {epoch}: loss {:.4} dev TER {ter:.2}", loss / used as f64);
        log.push(EpochRecord {
            phase: "seed".into(),
            epoch,
            supervised_loss: mean(loss, used),
            unsupervised_loss: None,
            valid_ter: ter,
            valid_wer: ter,
            pseudo_label_churn: None,
            skipped,
            steps: batches.len(),
        });
        emit(session, "seed", epoch, &params)?;
        best.offer(ter, epoch, &params);
    }
    let averaged = if best.kept.is_empty() { params.clone() } else { best.average()? };
    Ok(SeedOutcome { params: averaged, last: params, log })
}

/// Top-1 beam hypothesis for every unlabeled sample, in input order.
pub fn generate_pseudo_labels(
    encoder: &Encoder,
    params: &ParameterSet,
    unlabeled: &[&FeatureSequence],
    vocab: &Vocabulary,
    beam: &BeamConfig,
    lm: Option<&dyn PrefixScorer>,
) -> Result<Vec<Vec<usize>>, TrainError> {
    unlabeled
        .iter()
        .map(|f| {
            let post = encoder.infer(params, f)?;
            let hyps = prefix_beam_search(&post, vocab, beam, lm)?;
            Ok(hyps.into_iter().next().map(|h| h.tokens).unwrap_or_default())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct IplOutcome {
    pub params: ParameterSet,
    pub log: RunLog,
    /// Pseudo-labels of every generation pass, in order.
    pub generations: Vec<Vec<Vec<usize>>>,
}

/// Iterative pseudo-labeling; `ipl_iters = 1` is plain pseudo-labeling.
#[allow(clippy::too_many_arguments)]
pub fn run_ipl(
    session: &Session<'_>,
    seed_params: &ParameterSet,
    labeled: &[Utterance],
    unlabeled: &[&FeatureSequence],
    dev: &[Utterance],
    vocab: &Vocabulary,
    beam: &BeamConfig,
    lm: Option<&dyn PrefixScorer>,
) -> Result<IplOutcome, TrainError> {
    let cfg = session.config;
    cfg.validate()?;
    let mut params = seed_params.clone();
    let mut opt = Optimizer::new(cfg.ssl_optimizer, LrSchedule::Constant, &params);
    let mut log = RunLog::default();
    let mut generations = Vec::with_capacity(cfg.ipl_iters);
    let mut epoch_index = 0;
    for iter in 1..=cfg.ipl_iters {
        let labels = generate_pseudo_labels(session.encoder, &params, unlabeled, vocab, beam, lm)?;
        let phase = format!("ipl{iter}");
        let mut recent: Vec<ParameterSet> = Vec::new();
        for e in 1..=cfg.ipl_epochs_per_iter {
            epoch_index += 1;
            let batches =
                compose_batches(labeled.len(), unlabeled.len(), cfg.batch_size, cfg.seed, epoch_index, None);
            let (mut sup, mut n_sup, mut uns, mut n_uns, mut skipped) = (0.0, 0, 0.0, 0, 0);
            for (step, batch) in batches.iter().enumerate() {
                let examples: Vec<Example<'_>> = batch
                    .items
                    .iter()
                    .map(|&i| match batch.stream {
                        Stream::Labeled => Example { features: &labeled[i].features, labels: &labeled[i].labels },
                        Stream::Unlabeled => Example { features: unlabeled[i], labels: &labels[i] },
                    })
                    .collect();
                let seed = mix_seed(&[cfg.seed, PHASE_IPL, epoch_index as u64, step as u64]);
                let s = session.step(&mut params, &mut opt, &examples, seed)?;
                skipped += s.skipped;
                match batch.stream {
                    Stream::Labeled => {
                        sup += s.loss_sum;
                        n_sup += s.used;
                    }
                    Stream::Unlabeled => {
                        uns += s.loss_sum;
                        n_uns += s.used;
                    }
                }
            }
            let ter = validation_ter(session.encoder, &params, dev)?;
            info!("{phase} epoch {e}: dev TER {ter:.2}");
            log.push(EpochRecord {
                phase: phase.clone(),
                epoch: e,
                supervised_loss: mean(sup, n_sup),
                unsupervised_loss: mean(uns, n_uns),
                valid_ter: ter,
                valid_wer: ter,
                pseudo_label_churn: None,
                skipped,
                steps: batches.len(),
            });
            emit(session, &phase, e, &params)?;
            recent.push(params.clone());
            if recent.len() > cfg.ipl_avg_last {
                recent.remove(0);
            }
        }
        if !recent.is_empty() {
            let refs: Vec<&ParameterSet> = recent.iter().collect();
            params = average_checkpoints(&refs)?;
        }
        generations.push(labels);
    }
    Ok(IplOutcome { params, log, generations })
}

/// Online/offline pair carried across MPL epochs.
#[derive(Debug, Clone)]
pub struct MplState {
    pub online: ParameterSet,
    pub offline: ParameterSet,
    pub optimizer: Optimizer,
    /// Latest pseudo-label of each unlabeled sample.
    pub labels: Vec<Vec<usize>>,
    pub epochs_done: usize,
}

/// Per-epoch statistics returned by [`MplState::run_epoch`].
#[derive(Debug, Clone, Copy)]
pub struct MplEpochStats {
    pub steps: usize,
    pub alpha: f64,
    pub supervised_loss: Option<f64>,
    pub unsupervised_loss: Option<f64>,
    pub churn: Option<f64>,
    pub skipped: usize,
}

impl MplState {
    /// Both models start from `init`; the reference labels for churn are the
    /// greedy decodes of `init`.
    pub fn new(
        session: &Session<'_>,
        init: &ParameterSet,
        unlabeled: &[&FeatureSequence],
    ) -> Result<Self, TrainError> {
        Ok(Self {
            online: init.clone(),
            offline: init.clone(),
            optimizer: Optimizer::new(session.config.ssl_optimizer, LrSchedule::Constant, init),
            labels: greedy_decode_all(session.encoder, init, unlabeled)?,
            epochs_done: 0,
        })
    }

    /// One pass over the shuffled union. Unlabeled batches are labeled by the
    /// offline model from unaugmented features; after every online update the
    /// offline model moves toward the online one with `alpha = w^(1/K)`.
    pub fn run_epoch(
        &mut self,
        session: &Session<'_>,
        labeled: &[Utterance],
        unlabeled: &[&FeatureSequence],
    ) -> Result<MplEpochStats, TrainError> {
        let cfg = session.config;
        let epoch = self.epochs_done + 1;
        let batches = compose_batches(
            labeled.len(),
            unlabeled.len(),
            cfg.batch_size,
            cfg.seed,
            epoch,
            cfg.sup_ratio_override,
        );
        let k = batches.len();
        if k == 0 {
            return Err(TrainError::Config("no data for an MPL epoch".into()));
        }
        let alpha = momentum_from_weight(cfg.w, k)?;
        let (mut sup, mut n_sup, mut uns, mut n_uns, mut skipped) = (0.0, 0, 0.0, 0, 0);
        let mut changed = 0;
        let mut labeled_unsup = 0;
        let mut updates = 0;
        for (step, batch) in batches.iter().enumerate() {
            let seed = mix_seed(&[cfg.seed, PHASE_MPL, epoch as u64, step as u64]);
            let stats = match batch.stream {
                Stream::Labeled => {
                    let examples: Vec<Example<'_>> = batch
                        .items
                        .iter()
                        .map(|&i| Example { features: &labeled[i].features, labels: &labeled[i].labels })
                        .collect();
                    let s = session.step(&mut self.online, &mut self.optimizer, &examples, seed)?;
                    sup += s.loss_sum;
                    n_sup += s.used;
                    s
                }
                Stream::Unlabeled => {
                    let feats: Vec<&FeatureSequence> = batch.items.iter().map(|&i| unlabeled[i]).collect();
                    let fresh = greedy_decode_all(session.encoder, &self.offline, &feats)?;
                    for (&i, l) in batch.items.iter().zip(&fresh) {
                        labeled_unsup += 1;
                        if self.labels[i] != *l {
                            changed += 1;
                        }
                    }
                    let examples: Vec<Example<'_>> = feats
                        .iter()
                        .zip(&fresh)
                        .map(|(f, l)| Example { features: f, labels: l })
                        .collect();
                    let s = session.step(&mut self.online, &mut self.optimizer, &examples, seed)?;
                    for (&i, l) in batch.items.iter().zip(fresh) {
                        self.labels[i] = l;
                    }
                    uns += s.loss_sum;
                    n_uns += s.used;
                    s
                }
            };
            skipped += stats.skipped;
            self.offline = ema_update(&self.offline, &self.online, alpha)?;
            updates += 1;
        }
        assert_eq!(updates, k, "momentum must be derived from the realized number of updates");
        self.epochs_done = epoch;
        Ok(MplEpochStats {
            steps: k,
            alpha,
            supervised_loss: mean(sup, n_sup),
            unsupervised_loss: mean(uns, n_uns),
            churn: (labeled_unsup > 0).then(|| changed as f64 / labeled_unsup as f64),
            skipped,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MplOutcome {
    /// Online model after the last epoch.
    pub online: ParameterSet,
    pub offline: ParameterSet,
    /// Average of the best online checkpoints by validation token error rate.
    pub averaged: ParameterSet,
    pub log: RunLog,
}

/// Momentum pseudo-labeling for `mpl_epochs` epochs.
pub fn run_mpl(
    session: &Session<'_>,
    init: &ParameterSet,
    labeled: &[Utterance],
    unlabeled: &[&FeatureSequence],
    dev: &[Utterance],
) -> Result<MplOutcome, TrainError> {
    let cfg = session.config;
    cfg.validate()?;
    let mut state = MplState::new(session, init, unlabeled)?;
    let mut best = BestCheckpoints::new(cfg.checkpoint_avg_n);
    let mut log = RunLog::default();
    for epoch in 1..=cfg.mpl_epochs {
        let s = state.run_epoch(session, labeled, unlabeled)?;
        let ter = validation_ter(session.encoder, &state.online, dev)?;
        info!("mpl epoch {epoch}: dev TER {ter:.2} churn {:?}", s.churn);
        log.push(EpochRecord {
            phase: "mpl".into(),
            epoch,
            supervised_loss: s.supervised_loss,
            unsupervised_loss: s.unsupervised_loss,
            valid_ter: ter,
            valid_wer: ter,
            pseudo_label_churn: s.churn,
            skipped: s.skipped,
            steps: s.steps,
        });
        emit(session, "mpl_online", epoch, &state.online)?;
        emit(session, "mpl_offline", epoch, &state.offline)?;
        best.offer(ter, epoch, &state.online);
    }
    let averaged = if best.kept.is_empty() { state.online.clone() } else { best.average()? };
    Ok(MplOutcome { online: state.online, offline: state.offline, averaged, log })
}
