//! Experiment pipeline over a work directory.
//!
//! [`Experiment`] runs every stage in memory. The `cmd_*` functions wrap the
//! stages with artifact I/O under `paths.workdir`:
//!
//! ```text
//! data/            generated dataset
//! lm.arpa          n-gram model
//! seed.ckpt  topline.ckpt  ipl.ckpt  mpl.ckpt  mpl_online.ckpt  mpl_offline.ckpt
//! logs/*.jsonl     per-epoch run logs
//! pseudo/*.txt     pseudo-label generations
//! hyp/*.txt        decoded hypotheses
//! report.txt       end-to-end results table
//! ```

use std::fs::{self, OpenOptions};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use log::info;
use thiserror::Error;

use crate::config::{ConfigError, MplInit, RunConfig};
use crate::ctc::{CtcError, PrefixScorer, Vocabulary};
use crate::datagen::{
    load_dataset, make_setting, read_transcripts, write_dataset, write_transcripts, DataError, EvalCapability,
    FeatureSequence, SplitDataset, Utterance,
};
use crate::encoder::{load_checkpoint, save_checkpoint, Encoder, EncoderError, ParameterSet};
use crate::lm::{read_arpa, train_ngram, write_arpa, LmError, NgramModel};
use crate::metrics::{edit_distance_breakdown, render_report, token_error_rate, wrr, ErrorBreakdown, ReportRow};
use crate::trainer::{
    generate_pseudo_labels, greedy_decode_all, run_ipl, run_mpl, train_seed, IplOutcome, MplOutcome, RunLog,
    SeedOutcome, Session, TrainError,
};

pub const DATA_DIR: &str = "data";
pub const LM_FILE: &str = "lm.arpa";
pub const SEED_CKPT: &str = "seed.ckpt";
pub const TOPLINE_CKPT: &str = "topline.ckpt";
pub const IPL_CKPT: &str = "ipl.ckpt";
pub const MPL_CKPT: &str = "mpl.ckpt";
pub const MPL_ONLINE_CKPT: &str = "mpl_online.ckpt";
pub const MPL_OFFLINE_CKPT: &str = "mpl_offline.ckpt";
pub const REPORT_FILE: &str = "report.txt";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing input: expected {}", .0.display())]
    MissingInput(PathBuf),
    #[error("workdir is in use: {} exists", .0.display())]
    Locked(PathBuf),
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Data(DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Missing(p) => PipelineError::MissingInput(p),
            other => PipelineError::Data(other),
        }
    }
}

impl PipelineError {
    /// Short category name, also used to pick the process exit code.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::MissingInput(_) => "missing-input",
            PipelineError::Locked(_) => "locked",
            PipelineError::Inconsistent(_) => "inconsistent",
            PipelineError::Data(_) => "data",
            PipelineError::Encoder(_) => "model",
            PipelineError::Train(_) => "training",
            PipelineError::Lm(_) => "lm",
            PipelineError::Ctc(_) => "decoding",
            PipelineError::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingInput(_) => 3,
            PipelineError::Locked(_) => 4,
            PipelineError::Inconsistent(_) | PipelineError::Data(_) => 5,
            PipelineError::Io { .. } => 6,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingInput(path.to_path_buf()))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Exclusive use of a workdir, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        create_dir(workdir)?;
        let path = workdir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam,
}

/// A dataset, a configuration and the encoder they define.
#[derive(Debug, Clone)]
pub struct Experiment {
    config: RunConfig,
    data: SplitDataset,
    encoder: Encoder,
}

impl Experiment {
    /// Generates the dataset described by `config`.
    pub fn generate(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let d = &config.datagen;
        let data = make_setting(d.setting, &d.sizes, &d.domains, d.base_seed)?;
        Self::from_dataset(config, data)
    }

    pub fn from_dataset(config: &RunConfig, data: SplitDataset) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone())?;
        Ok(Self { config: config.clone(), data, encoder })
    }

    /// Same data under a different configuration.
    pub fn with_config(&self, config: &RunConfig) -> Result<Self> {
        Self::from_dataset(config, self.data.clone())
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn data(&self) -> &SplitDataset {
        &self.data
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.data.vocabulary()
    }

    pub fn init_params(&self) -> ParameterSet {
        self.encoder.init_params(self.config.train.seed)
    }

    fn session<'a>(&'a self, checkpoint_dir: Option<&'a Path>) -> Session<'a> {
        Session {
            encoder: &self.encoder,
            config: &self.config.train,
            augment: &self.config.augment,
            checkpoint_dir,
        }
    }

    fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Dev => &self.data.dev,
            Split::Test => &self.data.test,
        }
    }

    pub fn train_seed(&self, checkpoint_dir: Option<&Path>) -> Result<SeedOutcome> {
        Ok(train_seed(&self.session(checkpoint_dir), &self.init_params(), &self.data.labeled, &self.data.dev)?)
    }

    /// Supervised training on the labeled set plus the unlabeled set with its
    /// hidden transcripts.
    pub fn train_topline(&self, checkpoint_dir: Option<&Path>) -> Result<SeedOutcome> {
        let cap = EvalCapability::evaluation_only();
        let mut all = self.data.labeled.clone();
        for u in &self.data.unlabeled {
            let truth = u
                .truth(&cap)
                .ok_or_else(|| PipelineError::Inconsistent("unlabeled transcripts are not available".into()))?;
            all.push(Utterance { features: u.features.clone(), labels: truth.to_vec() });
        }
        Ok(train_seed(&self.session(checkpoint_dir), &self.init_params(), &all, &self.data.dev)?)
    }

    /// The configured n-gram model, or `None` when `lm.order` is 0.
    pub fn train_lm(&self) -> Result<Option<NgramModel>> {
        let lm = &self.config.lm;
        if lm.order == 0 {
            return Ok(None);
        }
        let vocab = self.vocabulary();
        let corpus = match &lm.corpus {
            Some(path) => read_transcripts(require(path)?, &vocab)?,
            None => self.data.lm_corpus(),
        };
        Ok(Some(train_ngram(&corpus, &vocab, lm.order, lm.smoothing)?))
    }

    pub fn run_ipl(&self, init: &ParameterSet, lm: Option<&NgramModel>, checkpoint_dir: Option<&Path>) -> Result<IplOutcome> {
        let feats = self.data.unlabeled_features();
        Ok(run_ipl(
            &self.session(checkpoint_dir),
            init,
            &self.data.labeled,
            &feats,
            &self.data.dev,
            &self.vocabulary(),
            &self.config.beam,
            lm.map(|m| m as &dyn PrefixScorer),
        )?)
    }

    pub fn run_mpl(&self, init: &ParameterSet, checkpoint_dir: Option<&Path>) -> Result<MplOutcome> {
        let feats = self.data.unlabeled_features();
        Ok(run_mpl(&self.session(checkpoint_dir), init, &self.data.labeled, &feats, &self.data.dev)?)
    }

    pub fn decode_features(
        &self,
        params: &ParameterSet,
        feats: &[&FeatureSequence],
        mode: DecodeMode,
        lm: Option<&NgramModel>,
    ) -> Result<Vec<Vec<usize>>> {
        Ok(match mode {
            DecodeMode::Greedy => greedy_decode_all(&self.encoder, params, feats)?,
            DecodeMode::Beam => generate_pseudo_labels(
                &self.encoder,
                params,
                feats,
                &self.vocabulary(),
                &self.config.beam,
                lm.map(|m| m as &dyn PrefixScorer),
            )?,
        })
    }

    pub fn decode(
        &self,
        params: &ParameterSet,
        split: Split,
        mode: DecodeMode,
        lm: Option<&NgramModel>,
    ) -> Result<Vec<Vec<usize>>> {
        let feats: Vec<&FeatureSequence> = self.split(split).iter().map(|u| &u.features).collect();
        self.decode_features(params, &feats, mode, lm)
    }

    /// Word error rate in percent; a token is a word on this task.
    pub fn wer(&self, params: &ParameterSet, split: Split, mode: DecodeMode, lm: Option<&NgramModel>) -> Result<f64> {
        let hyps = self.decode(params, split, mode, lm)?;
        let refs: Vec<Vec<usize>> = self.split(split).iter().map(|u| u.labels.clone()).collect();
        Ok(token_error_rate(&refs, &hyps))
    }

    /// Error rate of pseudo-labels against the hidden unlabeled transcripts.
    pub fn pseudo_label_wer(&self, labels: &[Vec<usize>]) -> Result<f64> {
        let cap = EvalCapability::evaluation_only();
        let truth: Option<Vec<Vec<usize>>> =
            self.data.unlabeled.iter().map(|u| u.truth(&cap).map(<[usize]>::to_vec)).collect();
        let truth = truth.ok_or_else(|| PipelineError::Inconsistent("unlabeled transcripts are not available".into()))?;
        if truth.len() != labels.len() {
            return Err(PipelineError::Inconsistent(format!(
                "{} pseudo-labels for {} unlabeled utterances",
                labels.len(),
                truth.len()
            )));
        }
        Ok(token_error_rate(&truth, labels))
    }
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.workdir.join(DATA_DIR)
}

fn prepare(cfg: &RunConfig) -> Result<WorkdirLock> {
    cfg.validate()?;
    WorkdirLock::acquire(&cfg.paths.workdir)
}

fn epoch_dir(cfg: &RunConfig, sub: &str) -> Result<Option<PathBuf>> {
    if !cfg.paths.keep_epoch_checkpoints {
        return Ok(None);
    }
    let dir = cfg.checkpoint_dir().join(sub);
    create_dir(&dir)?;
    Ok(Some(dir))
}

fn load_experiment(cfg: &RunConfig) -> Result<Experiment> {
    let dir = data_dir(cfg);
    let data = load_dataset(&dir)?;
    if data.manifest.setting != cfg.datagen.setting || data.manifest.base_seed != cfg.datagen.base_seed {
        return Err(PipelineError::Inconsistent(format!(
            "{} holds {} with seed {}, but the config asks for {} with seed {}",
            dir.display(),
            data.manifest.setting.name(),
            data.manifest.base_seed,
            cfg.datagen.setting.name(),
            cfg.datagen.base_seed
        )));
    }
    Experiment::from_dataset(cfg, data)
}

fn load_params(exp: &Experiment, path: &Path) -> Result<ParameterSet> {
    let (config, params) = load_checkpoint(require(path)?)?;
    if config != *exp.encoder.config() {
        return Err(PipelineError::Inconsistent(format!(
            "{} was trained with a different encoder config",
            path.display()
        )));
    }
    exp.encoder.check_params(&params)?;
    Ok(params)
}

fn load_lm(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Option<NgramModel>> {
    if cfg.lm.order == 0 {
        return Ok(None);
    }
    let path = cfg.paths.workdir.join(LM_FILE);
    let file = fs::File::open(require(&path)?).map_err(io_err(&path))?;
    let model = read_arpa(io::BufReader::new(file))?;
    model.check_vocab(vocab)?;
    if model.order() != cfg.lm.order {
        return Err(PipelineError::Inconsistent(format!(
            "{} has order {}, but lm.order is {}",
            path.display(),
            model.order(),
            cfg.lm.order
        )));
    }
    Ok(Some(model))
}

fn save(exp: &Experiment, path: &Path, params: &ParameterSet) -> Result<PathBuf> {
    save_checkpoint(path, exp.encoder.config(), params)?;
    Ok(path.to_path_buf())
}

fn write_log(cfg: &RunConfig, name: &str, log: &RunLog) -> Result<()> {
    let dir = cfg.paths.workdir.join("logs");
    create_dir(&dir)?;
    let path = dir.join(format!("{name}.jsonl"));
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    log.write_jsonl(BufWriter::new(file)).map_err(io_err(&path))
}

fn write_labels(path: &Path, vocab: &Vocabulary, labels: &[Vec<usize>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    write_transcripts(path, vocab, labels.iter().map(|l| &l[..]))?;
    Ok(())
}

fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let exp = Experiment::generate(cfg)?;
    let dir = data_dir(cfg);
    write_dataset(&dir, &exp.data)?;
    info!("wrote {} to {}", cfg.datagen.setting.name(), dir.display());
    Ok(dir)
}

fn lm_train(exp: &Experiment) -> Result<Option<PathBuf>> {
    let Some(model) = exp.train_lm()? else { return Ok(None) };
    let path = exp.config.paths.workdir.join(LM_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_arpa(&model, BufWriter::new(file))?;
    Ok(Some(path))
}

fn seed_stage(exp: &Experiment) -> Result<(PathBuf, SeedOutcome)> {
    let cfg = &exp.config;
    let dir = epoch_dir(cfg, "seed")?;
    let out = exp.train_seed(dir.as_deref())?;
    write_log(cfg, "seed", &out.log)?;
    Ok((save(exp, &cfg.paths.workdir.join(SEED_CKPT), &out.params)?, out))
}

fn topline_stage(exp: &Experiment) -> Result<(PathBuf, SeedOutcome)> {
    let cfg = &exp.config;
    let dir = epoch_dir(cfg, "topline")?;
    let out = exp.train_topline(dir.as_deref())?;
    write_log(cfg, "topline", &out.log)?;
    Ok((save(exp, &cfg.paths.workdir.join(TOPLINE_CKPT), &out.params)?, out))
}

fn ipl_stage(exp: &Experiment, init: &ParameterSet, lm: Option<&NgramModel>) -> Result<(PathBuf, IplOutcome)> {
    let cfg = &exp.config;
    let dir = epoch_dir(cfg, "ipl")?;
    let out = exp.run_ipl(init, lm, dir.as_deref())?;
    write_log(cfg, "ipl", &out.log)?;
    let vocab = exp.vocabulary();
    for (i, labels) in out.generations.iter().enumerate() {
        write_labels(&cfg.paths.workdir.join("pseudo").join(format!("ipl{}.txt", i + 1)), &vocab, labels)?;
    }
    Ok((save(exp, &cfg.paths.workdir.join(IPL_CKPT), &out.params)?, out))
}

/// Checkpoints written by [`cmd_mpl`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MplArtifacts {
    /// Average of the best online checkpoints.
    pub averaged: PathBuf,
    pub online: PathBuf,
    pub offline: PathBuf,
}

fn mpl_stage(exp: &Experiment, init: &ParameterSet) -> Result<(MplArtifacts, MplOutcome)> {
    let cfg = &exp.config;
    let dir = epoch_dir(cfg, "mpl")?;
    let out = exp.run_mpl(init, dir.as_deref())?;
    write_log(cfg, "mpl", &out.log)?;
    let root = &cfg.paths.workdir;
    let artifacts = MplArtifacts {
        averaged: save(exp, &root.join(MPL_CKPT), &out.averaged)?,
        online: save(exp, &root.join(MPL_ONLINE_CKPT), &out.online)?,
        offline: save(exp, &root.join(MPL_OFFLINE_CKPT), &out.offline)?,
    };
    Ok((artifacts, out))
}

/// Generates the configured setting into `<workdir>/data`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let _lock = prepare(cfg)?;
    gen_data(cfg)
}

/// Trains the n-gram model; `None` when `lm.order` is 0.
pub fn cmd_lm_train(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let _lock = prepare(cfg)?;
    lm_train(&load_experiment(cfg)?)
}

pub fn cmd_train_seed(cfg: &RunConfig) -> Result<PathBuf> {
    let _lock = prepare(cfg)?;
    Ok(seed_stage(&load_experiment(cfg)?)?.0)
}

pub fn cmd_topline(cfg: &RunConfig) -> Result<PathBuf> {
    let _lock = prepare(cfg)?;
    Ok(topline_stage(&load_experiment(cfg)?)?.0)
}

pub fn cmd_ipl(cfg: &RunConfig, init: &Path) -> Result<PathBuf> {
    let _lock = prepare(cfg)?;
    let exp = load_experiment(cfg)?;
    let params = load_params(&exp, init)?;
    let lm = load_lm(cfg, &exp.vocabulary())?;
    Ok(ipl_stage(&exp, &params, lm.as_ref())?.0)
}

pub fn cmd_mpl(cfg: &RunConfig, init: &Path) -> Result<MplArtifacts> {
    let _lock = prepare(cfg)?;
    let exp = load_experiment(cfg)?;
    let params = load_params(&exp, init)?;
    Ok(mpl_stage(&exp, &params)?.0)
}

/// Decodes a split and writes `<workdir>/hyp/<checkpoint>.<split>.<mode>.txt`.
pub fn cmd_decode(cfg: &RunConfig, checkpoint: &Path, split: Split, mode: DecodeMode, use_lm: bool) -> Result<PathBuf> {
    let _lock = prepare(cfg)?;
    let exp = load_experiment(cfg)?;
    let params = load_params(&exp, checkpoint)?;
    let lm = if use_lm {
        if mode == DecodeMode::Greedy {
            return Err(ConfigError::Invalid("LM fusion needs beam decoding".into()).into());
        }
        if cfg.lm.order == 0 {
            return Err(ConfigError::Invalid("LM fusion requested but lm.order is 0".into()).into());
        }
        load_lm(cfg, &exp.vocabulary())?
    } else {
        None
    };
    let hyps = exp.decode(&params, split, mode, lm.as_ref())?;
    let stem = checkpoint.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let tag = match (mode, lm.is_some()) {
        (DecodeMode::Greedy, _) => "greedy",
        (DecodeMode::Beam, false) => "beam",
        (DecodeMode::Beam, true) => "beam_lm",
    };
    let path = cfg.paths.workdir.join("hyp").join(format!("{stem}.{}.{tag}.txt", split.name()));
    write_labels(&path, &exp.vocabulary(), &hyps)?;
    Ok(path)
}

/// Path of the reference transcripts of `split` in the generated dataset.
pub fn reference_path(cfg: &RunConfig, split: Split) -> PathBuf {
    data_dir(cfg).join(format!("{}.txt", split.name()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub breakdown: ErrorBreakdown,
    pub wer: f64,
    pub wrr: Option<f64>,
    pub text: String,
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(require(path)?).map_err(io_err(path))?;
    Ok(text.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect())
}

/// Scores a hypothesis file against a reference file, line by line. With
/// `anchors = (seed WER, topline WER)` the WER recovery rate is reported too.
pub fn cmd_eval(hypothesis: &Path, reference: &Path, anchors: Option<(f64, f64)>) -> Result<EvalReport> {
    let hyp = read_lines(hypothesis)?;
    let refs = read_lines(reference)?;
    if hyp.len() != refs.len() {
        return Err(PipelineError::Inconsistent(format!(
            "{} has {} lines but {} has {}",
            hypothesis.display(),
            hyp.len(),
            reference.display(),
            refs.len()
        )));
    }
    let breakdown: ErrorBreakdown = refs.iter().zip(&hyp).map(|(r, h)| edit_distance_breakdown(r, h)).sum();
    let wer = breakdown.rate().unwrap_or(0.0);
    let wrr = anchors.and_then(|(seed, top)| wrr(wer, seed, top));
    let mut row = ReportRow::new(
        hypothesis.file_stem().map_or_else(|| "hypothesis".into(), |s| s.to_string_lossy().into_owned()),
        "-",
    );
    row.test_wer = Some(wer);
    row.test_wrr = wrr;
    let mut text = render_report("evaluation", &[row]);
    text.push_str(&format!(
        "words {} substitutions {} insertions {} deletions {} wer {wer:.4}",
        breakdown.reference_length, breakdown.substitutions, breakdown.insertions, breakdown.deletions
    ));
    if let Some(w) = wrr {
        text.push_str(&format!(" wrr {w:.4}"));
    }
    text.push('\n');
    Ok(EvalReport { breakdown, wer, wrr, text })
}

/// Results of [`run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub rows: Vec<ReportRow>,
    pub text: String,
    pub path: PathBuf,
}

fn score(exp: &Experiment, method: &str, init: &str, params: &ParameterSet, lm: Option<&NgramModel>) -> Result<ReportRow> {
    let mut row = ReportRow::new(method, init);
    row.dev_wer = Some(exp.wer(params, Split::Dev, DecodeMode::Greedy, None)?);
    row.test_wer = Some(exp.wer(params, Split::Test, DecodeMode::Greedy, None)?);
    if lm.is_some() {
        row.dev_wer_lm = Some(exp.wer(params, Split::Dev, DecodeMode::Beam, lm)?);
        row.test_wer_lm = Some(exp.wer(params, Split::Test, DecodeMode::Beam, lm)?);
    }
    Ok(row)
}

/// Every stage in order: data, LM, seed, topline, IPL, MPL, then a results
/// table with test WRR against the seed and topline rows.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    let _lock = prepare(cfg)?;
    gen_data(cfg)?;
    let exp = load_experiment(cfg)?;
    lm_train(&exp)?;
    let lm = load_lm(cfg, &exp.vocabulary())?;
    let lm = lm.as_ref();

    let (_, seed) = seed_stage(&exp)?;
    let mut rows = vec![score(&exp, "seed", "-", &seed.params, lm)?];
    if cfg.pipeline.topline {
        let (_, top) = topline_stage(&exp)?;
        rows.push(score(&exp, "topline", "-", &top.params, lm)?);
    }
    let (_, ipl) = ipl_stage(&exp, &seed.params, lm)?;
    rows.push(score(&exp, "ipl", "seed", &ipl.params, lm)?);
    let (init_name, init) = match cfg.pipeline.mpl_init {
        MplInit::Seed => ("seed", &seed.params),
        MplInit::Ipl => ("ipl", &ipl.params),
    };
    let (_, mpl) = mpl_stage(&exp, init)?;
    rows.push(score(&exp, "mpl", init_name, &mpl.averaged, lm)?);

    if cfg.pipeline.topline {
        let (s, t) = (rows[0].clone(), rows[1].clone());
        for row in &mut rows {
            row.test_wrr = wrr(row.test_wer.unwrap_or(f64::NAN), s.test_wer.unwrap_or(f64::NAN), t.test_wer.unwrap_or(f64::NAN));
            if let (Some(m), Some(sl), Some(tl)) = (row.test_wer_lm, s.test_wer_lm, t.test_wer_lm) {
                row.test_wrr_lm = wrr(m, sl, tl);
            }
        }
    }
    let title = format!("{} (seed {})", cfg.datagen.setting.name(), cfg.datagen.base_seed);
    let text = render_report(&title, &rows);
    let path = cfg.paths.workdir.join(REPORT_FILE);
    fs::write(&path, &text).map_err(io_err(&path))?;
    Ok(PipelineReport { rows, text, path })
}
