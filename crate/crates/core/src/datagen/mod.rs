//! Deterministic synthetic speech-like data with controllable domain shift.
//!
//! A domain is a first-order Markov grammar over the token vocabulary plus a
//! per-token prototype vector. Rendering a sentence emits, for each token, a
//! random number of frames equal to the rotated prototype plus isotropic
//! Gaussian noise. Out-of-domain data rotates the prototypes, perturbs the
//! grammar and raises the noise floor while keeping the vocabulary.

mod io;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::Vocabulary;
use crate::logmath::mix_seed;

pub use io::{load_dataset, read_features, read_transcripts, write_dataset, write_features, write_transcripts};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("unknown setting {0:?}")]
    UnknownSetting(String),
    #[error("missing input: expected {}", .0.display())]
    Missing(std::path::PathBuf),
    #[error("malformed data file {path}: {msg}")]
    Malformed { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_TOKENS: [&str; 12] =
    ["ba", "de", "ki", "lo", "mu", "na", "po", "ri", "sa", "tu", "vo", "zi"];

pub fn default_vocabulary() -> Vocabulary {
    Vocabulary::new(DEFAULT_TOKENS).expect("static vocabulary is valid")
}

/// `T x D` matrix of acoustic-like features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence(Array2<f64>);

impl FeatureSequence {
    pub fn new(values: Array2<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Begin-state distribution over tokens.
    pub start: Vec<f64>,
    /// Row `i`: successors of token `i`; the final column is end-of-sentence.
    pub transitions: Vec<Vec<f64>>,
    pub prototypes: Vec<Vec<f64>>,
    /// Inclusive per-token frame-count range.
    pub durations: Vec<(usize, usize)>,
    pub noise_std: f64,
    /// Givens rotation angles in degrees for the planes (0,1), (2,3), ...
    pub rotation_deg: Vec<f64>,
    /// Additive per-dimension offset applied to every frame.
    #[serde(default)]
    pub channel_offset: Vec<f64>,
    pub min_len: usize,
    pub max_len: usize,
}

impl DomainSpec {
    pub fn vocab_size(&self) -> usize {
        self.start.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        let v = self.vocab_size();
        if v == 0 {
            return bad("empty vocabulary".into());
        }
        let close = |row: &[f64]| (row.iter().sum::<f64>() - 1.0).abs() < 1e-9 && row.iter().all(|&p| p >= 0.0);
        if !close(&self.start) {
            return bad("start distribution does not sum to 1".into());
        }
        if self.transitions.len() != v || self.transitions.iter().any(|r| r.len() != v + 1 || !close(r)) {
            return bad("transition rows must have |V|+1 entries summing to 1".into());
        }
        let d = self.feature_dim();
        if d == 0 || self.prototypes.len() != v || self.prototypes.iter().any(|p| p.len() != d) {
            return bad("prototype table inconsistent with vocabulary/feature dim".into());
        }
        if self.durations.len() != v || self.durations.iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
            return bad("durations must satisfy 1 <= min <= max".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        if self.rotation_deg.len() != d / 2 {
            return bad(format!("expected {} rotation angles", d / 2));
        }
        if !self.channel_offset.is_empty() && self.channel_offset.len() != d {
            return bad("channel offset must be empty or have one entry per dimension".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("sentence length bounds must satisfy 1 <= min <= max".into());
        }
        Ok(())
    }

    /// Noise-free frame of `token`: rotated prototype plus channel offset.
    pub fn frame_mean(&self, token: usize) -> Vec<f64> {
        let mut p = self.rotated_prototype(token);
        for (x, o) in p.iter_mut().zip(&self.channel_offset) {
            *x += o;
        }
        p
    }

    /// Prototype of `token` after the domain rotation.
    pub fn rotated_prototype(&self, token: usize) -> Vec<f64> {
        let mut p = self.prototypes[token].clone();
        for (plane, &deg) in self.rotation_deg.iter().enumerate() {
            let (s, c) = deg.to_radians().sin_cos();
            let (a, b) = (p[2 * plane], p[2 * plane + 1]);
            p[2 * plane] = c * a - s * b;
            p[2 * plane + 1] = s * a + c * b;
        }
        p
    }
}

fn draw_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Markov walk from the begin state. End-of-sentence is suppressed below
/// `min_len` (renormalizing over tokens) and forced at `max_len`.
pub fn sample_sentence<R: Rng + ?Sized>(spec: &DomainSpec, rng: &mut R) -> Vec<usize> {
    let v = spec.vocab_size();
    let mut out = vec![draw_categorical(rng, &spec.start)];
    while out.len() < spec.max_len {
        let row = &spec.transitions[*out.last().expect("non-empty")];
        let next = if out.len() < spec.min_len {
            let mass: f64 = row[..v].iter().sum();
            let scaled: Vec<f64> = row[..v].iter().map(|p| p / mass).collect();
            draw_categorical(rng, &scaled)
        } else {
            draw_categorical(rng, row)
        };
        if next == v {
            break;
        }
        out.push(next);
    }
    out
}

pub fn render_features<R: Rng + ?Sized>(sentence: &[usize], spec: &DomainSpec, rng: &mut R) -> FeatureSequence {
    let d = spec.feature_dim();
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let mut rows: Vec<f64> = Vec::new();
    let mut frames = 0;
    for &tok in sentence {
        let (lo, hi) = spec.durations[tok];
        let dur = rng.random_range(lo..=hi);
        let proto = spec.frame_mean(tok);
        for _ in 0..dur {
            for &p in &proto {
                let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                rows.push(p + n);
            }
        }
        frames += dur;
    }
    FeatureSequence(Array2::from_shape_vec((frames, d), rows).expect("frames * d values"))
}

/// Knobs used to synthesize a [`DomainSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainParams {
    pub feature_dim: usize,
    /// Preferred successors per token.
    pub successors: usize,
    /// Probability mass spread over non-preferred successors.
    pub floor_mass: f64,
    pub end_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub prototype_scale: f64,
    pub noise_std: f64,
    pub rotation_deg: f64,
    /// Fraction of the grammar replaced by a fresh random grammar.
    pub grammar_shift: f64,
    /// Standard deviation of the per-dimension channel offset.
    pub channel_offset_std: f64,
}

impl Default for DomainParams {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            successors: 3,
            floor_mass: 0.1,
            end_prob: 0.15,
            min_len: 3,
            max_len: 12,
            min_duration: 2,
            max_duration: 5,
            prototype_scale: 0.6,
            noise_std: 0.3,
            rotation_deg: 0.0,
            grammar_shift: 0.0,
            channel_offset_std: 0.0,
        }
    }
}

impl DomainParams {
    /// Shifted target domain: 15 degree rotations, louder noise, half-new grammar.
    pub fn out_of_domain() -> Self {
        Self { noise_std: 0.5, rotation_deg: 15.0, grammar_shift: 0.5, channel_offset_std: 0.0, ..Self::default() }
    }
}

fn random_token_chain(v: usize, params: &DomainParams, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..v)
        .map(|i| {
            let others: Vec<usize> = (0..v).filter(|&j| j != i).collect();
            let mut row = vec![0.0; v];
            let k = params.successors.min(others.len());
            let mut pool = others.clone();
            let mut weights = Vec::with_capacity(k);
            for _ in 0..k {
                let pick = pool.swap_remove(rng.random_range(0..pool.len()));
                weights.push((pick, 0.2 + rng.random::<f64>()));
            }
            let wsum: f64 = weights.iter().map(|(_, w)| w).sum();
            let floor = if others.is_empty() { 0.0 } else { params.floor_mass / others.len() as f64 };
            let pref = if k > 0 { 1.0 - params.floor_mass } else { 0.0 };
            for &j in &others {
                row[j] = floor;
            }
            for (j, w) in weights {
                row[j] += pref * w / wsum;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            row
        })
        .collect()
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(chain: &[Vec<f64>]) -> Vec<f64> {
    let v = chain.len();
    let mut pi = vec![1.0 / v as f64; v];
    for _ in 0..10_000 {
        let mut next = vec![0.0; v];
        for (i, row) in chain.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                next[j] += pi[i] * p;
            }
        }
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

/// Builds a domain. `grammar_seed` and `prototype_seed` are shared between
/// domains so a shifted domain perturbs, rather than replaces, the base one.
pub fn build_domain(
    name: &str,
    vocab_size: usize,
    params: &DomainParams,
    grammar_seed: u64,
    prototype_seed: u64,
    shift_seed: u64,
) -> Result<DomainSpec, DataError> {
    let mut grng = ChaCha8Rng::seed_from_u64(grammar_seed);
    let mut chain = random_token_chain(vocab_size, params, &mut grng);
    if params.grammar_shift > 0.0 {
        let mut srng = ChaCha8Rng::seed_from_u64(shift_seed);
        let other = random_token_chain(vocab_size, params, &mut srng);
        for (row, orow) in chain.iter_mut().zip(&other) {
            for (p, q) in row.iter_mut().zip(orow) {
                *p = (1.0 - params.grammar_shift) * *p + params.grammar_shift * q;
            }
        }
    }
    let start = stationary_distribution(&chain);
    let transitions = chain
        .iter()
        .map(|row| {
            let mut r: Vec<f64> = row.iter().map(|p| p * (1.0 - params.end_prob)).collect();
            r.push(params.end_prob);
            r
        })
        .collect();

    let mut prng = ChaCha8Rng::seed_from_u64(prototype_seed);
    let normal = Normal::new(0.0, params.prototype_scale).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let prototypes = (0..vocab_size)
        .map(|_| (0..params.feature_dim).map(|_| normal.sample(&mut prng)).collect())
        .collect();

    let channel_offset = if params.channel_offset_std > 0.0 {
        let mut orng = ChaCha8Rng::seed_from_u64(shift_seed ^ 0x0FF5E7);
        let n = Normal::new(0.0, params.channel_offset_std).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        (0..params.feature_dim).map(|_| n.sample(&mut orng)).collect()
    } else {
        Vec::new()
    };
    let spec = DomainSpec {
        name: name.to_string(),
        start,
        transitions,
        prototypes,
        durations: vec![(params.min_duration, params.max_duration); vocab_size],
        noise_std: params.noise_std,
        rotation_deg: vec![params.rotation_deg; params.feature_dim / 2],
        channel_offset,
        min_len: params.min_len,
        max_len: params.max_len,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    InDomainSmall,
    InDomainLarge,
    OutDomain,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::InDomainSmall => "in_domain_small",
            Setting::InDomainLarge => "in_domain_large",
            Setting::OutDomain => "out_domain",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "in_domain_small" => Ok(Setting::InDomainSmall),
            "in_domain_large" => Ok(Setting::InDomainLarge),
            "out_domain" => Ok(Setting::OutDomain),
            other => Err(DataError::UnknownSetting(other.to_string())),
        }
    }

    /// Default unlabeled-to-labeled ratio of the setting.
    pub fn unlabeled_ratio(self) -> usize {
        match self {
            Setting::InDomainSmall => 3,
            Setting::InDomainLarge => 8,
            Setting::OutDomain => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SettingSizes {
    pub labeled: usize,
    /// `None` uses the setting's default ratio to `labeled`.
    pub unlabeled: Option<usize>,
    pub dev: usize,
    pub test: usize,
    /// Extra source-domain sentences for LM training.
    pub lm_text: usize,
}

impl Default for SettingSizes {
    fn default() -> Self {
        Self { labeled: 40, unlabeled: None, dev: 200, test: 200, lm_text: 2000 }
    }
}

/// Everything needed to regenerate a dataset byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub setting: Setting,
    pub base_seed: u64,
    pub tokens: Vec<String>,
    pub labeled: usize,
    pub unlabeled: usize,
    pub dev: usize,
    pub test: usize,
    pub lm_text: usize,
    pub source_domain: DomainSpec,
    pub target_domain: DomainSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: FeatureSequence,
    pub labels: Vec<usize>,
}

/// Grants access to the transcripts of unlabeled data. Only evaluation code
/// constructs one; training entry points never take it.
#[derive(Debug)]
pub struct EvalCapability(());

impl EvalCapability {
    pub fn evaluation_only() -> Self {
        EvalCapability(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledUtterance {
    pub features: FeatureSequence,
    truth: Option<Vec<usize>>,
}

impl UnlabeledUtterance {
    pub fn new(features: FeatureSequence, truth: Option<Vec<usize>>) -> Self {
        Self { features, truth }
    }

    pub fn truth(&self, _cap: &EvalCapability) -> Option<&[usize]> {
        self.truth.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub manifest: Manifest,
    /// Source-domain transcribed data.
    pub labeled: Vec<Utterance>,
    /// Target-domain audio; transcripts gated by [`EvalCapability`].
    pub unlabeled: Vec<UnlabeledUtterance>,
    /// Target-domain validation set.
    pub dev: Vec<Utterance>,
    /// Target-domain test set.
    pub test: Vec<Utterance>,
    /// Source-domain text only, for LM training.
    pub lm_text: Vec<Vec<usize>>,
}

impl SplitDataset {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.manifest.tokens.iter().cloned()).expect("manifest tokens are valid")
    }

    pub fn unlabeled_features(&self) -> Vec<&FeatureSequence> {
        self.unlabeled.iter().map(|u| &u.features).collect()
    }

    /// LM training text: labeled transcripts followed by the extra text.
    pub fn lm_corpus(&self) -> Vec<Vec<usize>> {
        self.labeled.iter().map(|u| u.labels.clone()).chain(self.lm_text.iter().cloned()).collect()
    }

    /// Regenerates every split from a manifest.
    pub fn from_manifest(manifest: &Manifest) -> Result<Self, DataError> {
        manifest.source_domain.validate()?;
        manifest.target_domain.validate()?;
        let seed = manifest.base_seed;
        let make = |spec: &DomainSpec, tag: u64, i: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, tag, i as u64]));
            let labels = sample_sentence(spec, &mut rng);
            let features = render_features(&labels, spec, &mut rng);
            Utterance { features, labels }
        };
        let src = &manifest.source_domain;
        let tgt = &manifest.target_domain;
        // Stream tags depend on the domain role only, so every setting built
        // from one base seed shares its labeled set.
        let target_tag = if manifest.setting == Setting::OutDomain { 100 } else { 0 };
        let labeled = (0..manifest.labeled).map(|i| make(src, 1, i)).collect();
        let unlabeled = (0..manifest.unlabeled)
            .map(|i| {
                let u = make(tgt, 2 + target_tag, i);
                UnlabeledUtterance::new(u.features, Some(u.labels))
            })
            .collect();
        let dev = (0..manifest.dev).map(|i| make(tgt, 3 + target_tag, i)).collect();
        let test = (0..manifest.test).map(|i| make(tgt, 4 + target_tag, i)).collect();
        let lm_text = (0..manifest.lm_text)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 5, i as u64]));
                sample_sentence(src, &mut rng)
            })
            .collect();
        Ok(Self { manifest: manifest.clone(), labeled, unlabeled, dev, test, lm_text })
    }
}

/// Source and target domain knobs for [`make_setting`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainPair {
    pub source: DomainParams,
    pub shifted: DomainParams,
}

impl Default for DomainPair {
    fn default() -> Self {
        Self { source: DomainParams::default(), shifted: DomainParams::out_of_domain() }
    }
}

pub fn make_manifest(
    setting: Setting,
    sizes: &SettingSizes,
    domains: &DomainPair,
    base_seed: u64,
) -> Result<Manifest, DataError> {
    if sizes.labeled == 0 || sizes.dev == 0 || sizes.test == 0 {
        return Err(DataError::InvalidSpec("dataset sizes must be positive".into()));
    }
    let v = DEFAULT_TOKENS.len();
    let grammar_seed = mix_seed(&[base_seed, 10]);
    let proto_seed = mix_seed(&[base_seed, 11]);
    let shift_seed = mix_seed(&[base_seed, 12]);
    let source = build_domain("source", v, &domains.source, grammar_seed, proto_seed, shift_seed)?;
    let target = match setting {
        Setting::OutDomain => build_domain("shifted", v, &domains.shifted, grammar_seed, proto_seed, shift_seed)?,
        _ => source.clone(),
    };
    Ok(Manifest {
        setting,
        base_seed,
        tokens: DEFAULT_TOKENS.iter().map(|s| s.to_string()).collect(),
        labeled: sizes.labeled,
        unlabeled: sizes.unlabeled.unwrap_or(sizes.labeled * setting.unlabeled_ratio()),
        dev: sizes.dev,
        test: sizes.test,
        lm_text: sizes.lm_text,
        source_domain: source,
        target_domain: target,
    })
}

pub fn make_setting(
    setting: Setting,
    sizes: &SettingSizes,
    domains: &DomainPair,
    base_seed: u64,
) -> Result<SplitDataset, DataError> {
    SplitDataset::from_manifest(&make_manifest(setting, sizes, domains, base_seed)?)
}
