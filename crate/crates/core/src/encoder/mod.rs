//! Conformer-style encoder with hand-written reverse-mode gradients.
//!
//! Layer stack:
//!
//! ```text
//! features (T x D)
//!   -> stack `subsample_factor` frames, linear to d_model      (T' = ceil(T / s))
//!   -> num_blocks x [ x + 1/2 FFN(x)
//!                     x + MHSA(x)        per-head learned bias over clipped offsets
//!                     x + Conv(x)        LN, pointwise 2C, GLU, depthwise K, norm, swish, pointwise
//!                     x + 1/2 FFN(x)
//!                     LN ]
//!   -> linear to |V|+1, log-softmax
//! ```
//!
//! Only the normalization inside the convolution module is swappable.

mod checkpoint;
mod ops;
mod params;

use ndarray::{s, Array1, Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::FramePosteriors;
use crate::datagen::FeatureSequence;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use ops::{group_norm, Segment, NORM_EPS};
pub use params::{average_checkpoints, ema_update, momentum_from_weight, ParamEntry, ParamKind, ParameterSet};

use ops::{BatchCache, GroupCache, LnCache};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("incompatible parameter sets: {0}")]
    Incompatible(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tape was recorded with different parameters")]
    StaleTape,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NormKind {
    Batch,
    Group { num_groups: usize },
    Instance,
    Layer,
}

impl NormKind {
    /// Group count for the group-normalization family; `None` for batch norm.
    pub fn groups(self, d_model: usize) -> Option<usize> {
        match self {
            NormKind::Batch => None,
            NormKind::Group { num_groups } => Some(num_groups),
            NormKind::Instance => Some(d_model),
            NormKind::Layer => Some(1),
        }
    }

    pub fn label(self) -> String {
        match self {
            NormKind::Batch => "batch".into(),
            NormKind::Group { num_groups } => format!("group{num_groups}"),
            NormKind::Instance => "instance".into(),
            NormKind::Layer => "layer".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub norm_kind: NormKind,
    pub subsample_factor: usize,
    pub feature_dim: usize,
    pub vocab_size_with_blank: usize,
    pub dropout: f64,
    /// Relative offsets beyond this share one bias.
    pub rel_pos_window: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            d_model: 32,
            num_heads: 4,
            d_ff: 128,
            conv_kernel: 7,
            norm_kind: NormKind::Group { num_groups: 8 },
            subsample_factor: 2,
            feature_dim: 8,
            vocab_size_with_blank: 13,
            dropout: 0.1,
            rel_pos_window: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if [self.num_blocks, self.d_model, self.num_heads, self.d_ff, self.conv_kernel, self.subsample_factor]
            .contains(&0)
            || self.feature_dim == 0
            || self.vocab_size_with_blank == 0
        {
            return bad("sizes must be positive");
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return bad("num_heads must divide d_model");
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad("conv_kernel must be odd");
        }
        if let Some(g) = self.norm_kind.groups(self.d_model) {
            if g == 0 || !self.d_model.is_multiple_of(g) {
                return bad("num_groups must divide d_model");
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample_factor)
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfIds {
    ln: Affine,
    l1: Lin,
    l2: Lin,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    ln: Affine,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    pos: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    ln: Affine,
    pw1: Lin,
    dw: Lin,
    norm: Affine,
    /// Running mean and variance for batch norm.
    stats: Option<(usize, usize)>,
    pw2: Lin,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ff1: FfIds,
    attn: AttnIds,
    conv: ConvIds,
    ff2: FfIds,
    out_ln: Affine,
}

#[derive(Debug, Clone)]
struct Layout {
    input: Lin,
    blocks: Vec<BlockIds>,
    output: Lin,
}

enum Init {
    Normal(f64),
    Const(f64),
}

struct Builder<'a> {
    set: ParameterSet,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], kind: ParamKind, init: Init) -> usize {
        let mut value = ArrayD::zeros(IxDyn(shape));
        match (init, self.rng.as_deref_mut()) {
            (Init::Const(c), _) => value.fill(c),
            (Init::Normal(std), Some(rng)) => {
                let n = Normal::new(0.0, std).expect("finite std");
                value.mapv_inplace(|_| n.sample(rng));
            }
            (Init::Normal(_), None) => {}
        }
        self.set.push(name, kind, value).expect("generated names are unique")
    }

    fn lin(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Lin {
        let std = 1.0 / (fan_in as f64).sqrt();
        Lin {
            w: self.add(format!("{name}.weight"), &[fan_in, fan_out], ParamKind::Weight, Init::Normal(std)),
            b: self.add(format!("{name}.bias"), &[fan_out], ParamKind::Weight, Init::Const(0.0)),
        }
    }

    fn affine(&mut self, name: &str, c: usize) -> Affine {
        Affine {
            gain: self.add(format!("{name}.gain"), &[c], ParamKind::Weight, Init::Const(1.0)),
            bias: self.add(format!("{name}.bias"), &[c], ParamKind::Weight, Init::Const(0.0)),
        }
    }

    fn ff(&mut self, name: &str, c: usize, f: usize) -> FfIds {
        FfIds {
            ln: self.affine(&format!("{name}.ln"), c),
            l1: self.lin(&format!("{name}.linear1"), c, f),
            l2: self.lin(&format!("{name}.linear2"), f, c),
        }
    }
}

fn build(cfg: &EncoderConfig, rng: Option<&mut ChaCha8Rng>) -> (ParameterSet, Layout) {
    let c = cfg.d_model;
    let mut b = Builder { set: ParameterSet::new(), rng };
    let input = b.lin("input", cfg.feature_dim * cfg.subsample_factor, c);
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for i in 0..cfg.num_blocks {
        let p = format!("block{i}");
        let ff1 = b.ff(&format!("{p}.ff1"), c, cfg.d_ff);
        let attn = AttnIds {
            ln: b.affine(&format!("{p}.attn.ln"), c),
            q: b.lin(&format!("{p}.attn.query"), c, c),
            k: b.lin(&format!("{p}.attn.key"), c, c),
            v: b.lin(&format!("{p}.attn.value"), c, c),
            o: b.lin(&format!("{p}.attn.out"), c, c),
            pos: b.add(
                format!("{p}.attn.pos_bias"),
                &[cfg.num_heads, 2 * cfg.rel_pos_window + 1],
                ParamKind::Weight,
                Init::Const(0.0),
            ),
        };
        let ln = b.affine(&format!("{p}.conv.ln"), c);
        let pw1 = b.lin(&format!("{p}.conv.pointwise1"), c, 2 * c);
        let dw = Lin {
            w: b.add(
                format!("{p}.conv.depthwise.weight"),
                &[cfg.conv_kernel, c],
                ParamKind::Weight,
                Init::Normal(1.0 / (cfg.conv_kernel as f64).sqrt()),
            ),
            b: b.add(format!("{p}.conv.depthwise.bias"), &[c], ParamKind::Weight, Init::Const(0.0)),
        };
        let norm = b.affine(&format!("{p}.conv.norm"), c);
        let stats = (cfg.norm_kind == NormKind::Batch).then(|| {
            (
                b.add(format!("{p}.conv.norm.running_mean"), &[c], ParamKind::Statistic, Init::Const(0.0)),
                b.add(format!("{p}.conv.norm.running_var"), &[c], ParamKind::Statistic, Init::Const(1.0)),
            )
        });
        let pw2 = b.lin(&format!("{p}.conv.pointwise2"), c, c);
        let conv = ConvIds { ln, pw1, dw, norm, stats, pw2 };
        let ff2 = b.ff(&format!("{p}.ff2"), c, cfg.d_ff);
        let out_ln = b.affine(&format!("{p}.out_ln"), c);
        blocks.push(BlockIds { ff1, attn, conv, ff2, out_ln });
    }
    let output = b.lin("output", c, cfg.vocab_size_with_blank);
    (b.set, Layout { input, blocks, output })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct FfTape {
    ln: LnCache,
    ln_out: Array2<f64>,
    hidden: Array2<f64>,
    act: Array2<f64>,
    mask: Option<Array2<f64>>,
}

struct AttnTape {
    ln: LnCache,
    ln_out: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: ops::AttentionCache,
    ctx: Array2<f64>,
    mask: Option<Array2<f64>>,
}

enum NormTape {
    Group(GroupCache),
    Batch(BatchCache),
}

struct ConvTape {
    ln: LnCache,
    ln_out: Array2<f64>,
    pw1_out: Array2<f64>,
    glu_out: Array2<f64>,
    norm: NormTape,
    norm_out: Array2<f64>,
    act: Array2<f64>,
    mask: Option<Array2<f64>>,
}

struct BlockTape {
    ff1: FfTape,
    attn: AttnTape,
    conv: ConvTape,
    ff2: FfTape,
    out_ln: LnCache,
}

/// Intermediate activations of one forward pass.
pub struct Tape {
    fingerprint: u64,
    segments: Vec<Segment>,
    stacked: Array2<f64>,
    blocks: Vec<BlockTape>,
    top: Array2<f64>,
    log_probs: Array2<f64>,
}

impl Tape {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }
}

pub struct ForwardOutput {
    pub posteriors: Vec<FramePosteriors>,
    pub tape: Tape,
    /// Updated batch-norm running statistics (train mode only), as
    /// `(entry index, new value)` pairs to store with [`apply_statistics`].
    pub statistics: Vec<(usize, Array1<f64>)>,
}

/// Writes running-statistic updates returned by a train-mode forward.
pub fn apply_statistics(params: &mut ParameterSet, updates: &[(usize, Array1<f64>)]) {
    for (idx, v) in updates {
        params.vector_mut(*idx).assign(v);
    }
}

const BN_MOMENTUM: f64 = 0.9;

fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, mode: Mode, rng: &mut R) -> Option<Array2<f64>> {
    if mode == Mode::Eval || p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { 0.0 } else { keep }))
}

fn masked(x: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    layout: Layout,
    template: ParameterSet,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let (template, layout) = build(&config, None);
        Ok(Self { config, layout, template })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build(&self.config, Some(&mut rng)).0
    }

    pub fn check_params(&self, params: &ParameterSet) -> Result<(), EncoderError> {
        self.template.check_compatible(params)
    }

    /// Convenience wrapper for a single utterance.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        params: &ParameterSet,
        features: &FeatureSequence,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput, EncoderError> {
        self.forward_batch(params, &[features], mode, rng)
    }

    /// Eval-mode posteriors without keeping a tape.
    pub fn infer(&self, params: &ParameterSet, features: &FeatureSequence) -> Result<FramePosteriors, EncoderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = self.forward_batch(params, &[features], Mode::Eval, &mut rng)?;
        Ok(out.posteriors.pop().expect("one utterance"))
    }

    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        params: &ParameterSet,
        batch: &[&FeatureSequence],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput, EncoderError> {
        self.check_params(params)?;
        let cfg = &self.config;
        let sub = cfg.subsample_factor;
        let d = cfg.feature_dim;
        let mut segments = Vec::with_capacity(batch.len());
        let mut total = 0;
        for f in batch {
            if f.dim() != d && f.frames() > 0 {
                return Err(EncoderError::Shape(format!("feature dim {} but encoder expects {d}", f.dim())));
            }
            let len = cfg.output_frames(f.frames());
            segments.push(Segment { start: total, len });
            total += len;
        }
        let mut stacked = Array2::zeros((total, d * sub));
        for (f, seg) in batch.iter().zip(&segments) {
            for t in 0..f.frames() {
                stacked
                    .slice_mut(s![seg.start + t / sub, (t % sub) * d..(t % sub + 1) * d])
                    .assign(&f.values().row(t));
            }
        }

        let l = &self.layout;
        let p = params;
        let mut x = ops::linear(&stacked, p.mat(l.input.w), p.vector(l.input.b));
        let mut blocks = Vec::with_capacity(l.blocks.len());
        let mut statistics = Vec::new();
        for ids in &l.blocks {
            let (ff1, y) = self.ff_forward(p, &ids.ff1, &x, mode, rng);
            x = x + y * 0.5;
            let (attn, y) = self.attn_forward(p, &ids.attn, &x, &segments, mode, rng);
            x = x + y;
            let (conv, y) = self.conv_forward(p, &ids.conv, &x, &segments, mode, rng, &mut statistics);
            x = x + y;
            let (ff2, y) = self.ff_forward(p, &ids.ff2, &x, mode, rng);
            x = x + y * 0.5;
            let (y, out_ln) = ops::layer_norm(&x, p.vector(ids.out_ln.gain), p.vector(ids.out_ln.bias));
            x = y;
            blocks.push(BlockTape { ff1, attn, conv, ff2, out_ln });
        }
        let logits = ops::linear(&x, p.mat(l.output.w), p.vector(l.output.b));
        let log_probs = ops::log_softmax_rows(&logits);
        let posteriors = segments
            .iter()
            .map(|seg| {
                FramePosteriors::from_log_probs(log_probs.slice(s![seg.start..seg.start + seg.len, ..]).to_owned())
                    .map_err(|e| EncoderError::Shape(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let tape = Tape { fingerprint: params.fingerprint(), segments, stacked, blocks, top: x, log_probs };
        Ok(ForwardOutput { posteriors, tape, statistics })
    }

    fn ff_forward<R: Rng + ?Sized>(
        &self,
        p: &ParameterSet,
        ids: &FfIds,
        x: &Array2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> (FfTape, Array2<f64>) {
        let (ln_out, ln) = ops::layer_norm(x, p.vector(ids.ln.gain), p.vector(ids.ln.bias));
        let hidden = ops::linear(&ln_out, p.mat(ids.l1.w), p.vector(ids.l1.b));
        let act = ops::swish(&hidden);
        let out = ops::linear(&act, p.mat(ids.l2.w), p.vector(ids.l2.b));
        let mask = dropout_mask(out.nrows(), out.ncols(), self.config.dropout, mode, rng);
        let out = masked(out, &mask);
        (FfTape { ln, ln_out, hidden, act, mask }, out)
    }

    fn attn_forward<R: Rng + ?Sized>(
        &self,
        p: &ParameterSet,
        ids: &AttnIds,
        x: &Array2<f64>,
        segments: &[Segment],
        mode: Mode,
        rng: &mut R,
    ) -> (AttnTape, Array2<f64>) {
        let (ln_out, ln) = ops::layer_norm(x, p.vector(ids.ln.gain), p.vector(ids.ln.bias));
        let q = ops::linear(&ln_out, p.mat(ids.q.w), p.vector(ids.q.b));
        let k = ops::linear(&ln_out, p.mat(ids.k.w), p.vector(ids.k.b));
        let v = ops::linear(&ln_out, p.mat(ids.v.w), p.vector(ids.v.b));
        let (ctx, att) = ops::attention(&q, &k, &v, p.mat(ids.pos), segments);
        let out = ops::linear(&ctx, p.mat(ids.o.w), p.vector(ids.o.b));
        let mask = dropout_mask(out.nrows(), out.ncols(), self.config.dropout, mode, rng);
        let out = masked(out, &mask);
        (AttnTape { ln, ln_out, q, k, v, att, ctx, mask }, out)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_forward<R: Rng + ?Sized>(
        &self,
        p: &ParameterSet,
        ids: &ConvIds,
        x: &Array2<f64>,
        segments: &[Segment],
        mode: Mode,
        rng: &mut R,
        statistics: &mut Vec<(usize, Array1<f64>)>,
    ) -> (ConvTape, Array2<f64>) {
        let (ln_out, ln) = ops::layer_norm(x, p.vector(ids.ln.gain), p.vector(ids.ln.bias));
        let pw1_out = ops::linear(&ln_out, p.mat(ids.pw1.w), p.vector(ids.pw1.b));
        let glu_out = ops::glu(&pw1_out);
        let dw_out = ops::depthwise_conv(&glu_out, segments, p.mat(ids.dw.w), p.vector(ids.dw.b));
        let gain = p.vector(ids.norm.gain);
        let bias = p.vector(ids.norm.bias);
        let (norm_out, norm) = match (self.config.norm_kind.groups(self.config.d_model), ids.stats) {
            (Some(g), _) => {
                let (y, c) = ops::group_norm_packed(&dw_out, segments, g, gain, bias);
                (y, NormTape::Group(c))
            }
            (None, Some((mi, vi))) => {
                let running = (mode == Mode::Eval).then(|| (p.vector(mi), p.vector(vi)));
                let (y, c, batch) = ops::batch_norm(&dw_out, running, gain, bias);
                if let Some((m, v)) = batch {
                    statistics.push((mi, &p.vector(mi) * BN_MOMENTUM + &(m * (1.0 - BN_MOMENTUM))));
                    statistics.push((vi, &p.vector(vi) * BN_MOMENTUM + &(v * (1.0 - BN_MOMENTUM))));
                }
                (y, NormTape::Batch(c))
            }
            (None, None) => unreachable!("batch norm layout always has statistics"),
        };
        let act = ops::swish(&norm_out);
        let out = ops::linear(&act, p.mat(ids.pw2.w), p.vector(ids.pw2.b));
        let mask = dropout_mask(out.nrows(), out.ncols(), self.config.dropout, mode, rng);
        let out = masked(out, &mask);
        (ConvTape { ln, ln_out, pw1_out, glu_out, norm, norm_out, act, mask }, out)
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to each utterance's log-posteriors.
    /// Statistic entries always receive zero gradient.
    pub fn backward(
        &self,
        params: &ParameterSet,
        tape: &Tape,
        grad_log_probs: &[Array2<f64>],
    ) -> Result<ParameterSet, EncoderError> {
        self.check_params(params)?;
        if params.fingerprint() != tape.fingerprint {
            return Err(EncoderError::StaleTape);
        }
        if grad_log_probs.len() != tape.segments.len() {
            return Err(EncoderError::Shape(format!(
                "{} gradients for {} utterances",
                grad_log_probs.len(),
                tape.segments.len()
            )));
        }
        let classes = self.config.vocab_size_with_blank;
        let mut dlp = Array2::zeros(tape.log_probs.raw_dim());
        for (g, seg) in grad_log_probs.iter().zip(&tape.segments) {
            if g.dim() != (seg.len, classes) {
                return Err(EncoderError::Shape(format!("gradient {:?}, expected {:?}", g.dim(), (seg.len, classes))));
            }
            dlp.slice_mut(s![seg.start..seg.start + seg.len, ..]).assign(g);
        }

        let p = params;
        let l = &self.layout;
        let mut grads = params.zeros_like();
        let dlogits = ops::log_softmax_backward(&tape.log_probs, &dlp);
        let mut dx = lin_back(p, &mut grads, l.output, &tape.top, &dlogits);
        for (ids, bt) in l.blocks.iter().zip(&tape.blocks).rev() {
            let (mut dg, mut db) = affine_grads(&mut grads, ids.out_ln);
            dx = ops::layer_norm_backward(&bt.out_ln, p.vector(ids.out_ln.gain), &dx, &mut dg, &mut db);
            let d = self.ff_backward(p, &mut grads, &ids.ff2, &bt.ff2, &(&dx * 0.5));
            dx += &d;
            let d = self.conv_backward(p, &mut grads, &ids.conv, &bt.conv, &tape.segments, &dx);
            dx += &d;
            let d = self.attn_backward(p, &mut grads, &ids.attn, &bt.attn, &tape.segments, &dx);
            dx += &d;
            let d = self.ff_backward(p, &mut grads, &ids.ff1, &bt.ff1, &(&dx * 0.5));
            dx += &d;
        }
        lin_back(p, &mut grads, l.input, &tape.stacked, &dx);
        Ok(grads)
    }

    fn ff_backward(
        &self,
        p: &ParameterSet,
        grads: &mut ParameterSet,
        ids: &FfIds,
        t: &FfTape,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let dy = masked(dy.clone(), &t.mask);
        let dact = lin_back(p, grads, ids.l2, &t.act, &dy);
        let dhidden = ops::swish_backward(&t.hidden, &dact);
        let dln = lin_back(p, grads, ids.l1, &t.ln_out, &dhidden);
        let (mut dg, mut db) = affine_grads(grads, ids.ln);
        ops::layer_norm_backward(&t.ln, p.vector(ids.ln.gain), &dln, &mut dg, &mut db)
    }

    fn attn_backward(
        &self,
        p: &ParameterSet,
        grads: &mut ParameterSet,
        ids: &AttnIds,
        t: &AttnTape,
        segments: &[Segment],
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let dy = masked(dy.clone(), &t.mask);
        let dctx = lin_back(p, grads, ids.o, &t.ctx, &dy);
        let (dq, dk, dv) = {
            let mut dpos = grads.mat_mut(ids.pos);
            ops::attention_backward(&t.q, &t.k, &t.v, &t.att, segments, &dctx, &mut dpos)
        };
        let mut dln = lin_back(p, grads, ids.q, &t.ln_out, &dq);
        dln += &lin_back(p, grads, ids.k, &t.ln_out, &dk);
        dln += &lin_back(p, grads, ids.v, &t.ln_out, &dv);
        let (mut dg, mut db) = affine_grads(grads, ids.ln);
        ops::layer_norm_backward(&t.ln, p.vector(ids.ln.gain), &dln, &mut dg, &mut db)
    }

    fn conv_backward(
        &self,
        p: &ParameterSet,
        grads: &mut ParameterSet,
        ids: &ConvIds,
        t: &ConvTape,
        segments: &[Segment],
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let dy = masked(dy.clone(), &t.mask);
        let dact = lin_back(p, grads, ids.pw2, &t.act, &dy);
        let dnorm_out = ops::swish_backward(&t.norm_out, &dact);
        let gain = p.vector(ids.norm.gain);
        let ddw = {
            let (mut dg, mut db) = affine_grads(grads, ids.norm);
            match &t.norm {
                NormTape::Group(c) => ops::group_norm_packed_backward(c, segments, gain, &dnorm_out, &mut dg, &mut db),
                NormTape::Batch(c) => ops::batch_norm_backward(c, gain, &dnorm_out, &mut dg, &mut db),
            }
        };
        let dglu = {
            let (mut dw, mut db) = lin_grads(grads, ids.dw);
            ops::depthwise_conv_backward(&t.glu_out, segments, p.mat(ids.dw.w), &ddw, &mut dw, &mut db)
        };
        let dpw1 = ops::glu_backward(&t.pw1_out, &dglu);
        let dln = lin_back(p, grads, ids.pw1, &t.ln_out, &dpw1);
        let (mut dg, mut db) = affine_grads(grads, ids.ln);
        ops::layer_norm_backward(&t.ln, p.vector(ids.ln.gain), &dln, &mut dg, &mut db)
    }
}

fn lin_back(p: &ParameterSet, grads: &mut ParameterSet, ids: Lin, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let (mut dw, mut db) = lin_grads(grads, ids);
    ops::linear_backward(x, p.mat(ids.w), dy, &mut dw, &mut db)
}

fn lin_grads(grads: &mut ParameterSet, ids: Lin) -> (ndarray::ArrayViewMut2<'_, f64>, ndarray::ArrayViewMut1<'_, f64>) {
    let (w, b) = grads.pair_mut(ids.w, ids.b);
    (w.into_dimensionality().expect("rank 2"), b.into_dimensionality().expect("rank 1"))
}

fn affine_grads(
    grads: &mut ParameterSet,
    ids: Affine,
) -> (ndarray::ArrayViewMut1<'_, f64>, ndarray::ArrayViewMut1<'_, f64>) {
    let (g, b) = grads.pair_mut(ids.gain, ids.bias);
    (g.into_dimensionality().expect("rank 1"), b.into_dimensionality().expect("rank 1"))
}

#[cfg(test)]
mod tests;
