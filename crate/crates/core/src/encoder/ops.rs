//! Forward/backward pairs for the encoder's building blocks.
//!
//! Activations of a batch are packed row-wise into one `frames x channels`
//! matrix; `Segment`s mark the rows of each utterance.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Returns `dx` and accumulates `dw`, `db`.
pub fn linear_backward(
    x: &Array2<f64>,
    w: ArrayView2<f64>,
    dy: &Array2<f64>,
    dw: &mut ndarray::ArrayViewMut2<f64>,
    db: &mut ndarray::ArrayViewMut1<f64>,
) -> Array2<f64> {
    dw.scaled_add(1.0, &x.t().dot(dy));
    db.scaled_add(1.0, &dy.sum_axis(Axis(0)));
    dy.dot(&w.t())
}

pub fn swish(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn swish_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

/// Gated linear unit over the two halves of the channel axis.
pub fn glu(u: &Array2<f64>) -> Array2<f64> {
    let c = u.ncols() / 2;
    let a = u.slice(s![.., ..c]);
    let g = u.slice(s![.., c..]);
    let mut y = a.to_owned();
    Zip::from(&mut y).and(&g).for_each(|y, &g| *y *= sigmoid(g));
    y
}

pub fn glu_backward(u: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let c = u.ncols() / 2;
    let mut du = Array2::zeros(u.raw_dim());
    for ((r, dur), dyr) in u.rows().into_iter().zip(du.rows_mut()).zip(dy.rows()) {
        let mut dur = dur;
        for j in 0..c {
            let (a, g) = (r[j], r[c + j]);
            let s = sigmoid(g);
            dur[j] = dyr[j] * s;
            dur[c + j] = dyr[j] * a * s * (1.0 - s);
        }
    }
    du
}

/// Per-row normalization cache.
#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Layer normalization over the channels of every row.
pub fn layer_norm(x: &Array2<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let c = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        *is = 1.0 / (var + NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * *is);
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, LnCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LnCache,
    gain: ArrayView1<f64>,
    dy: &Array2<f64>,
    dgain: &mut ndarray::ArrayViewMut1<f64>,
    dbias: &mut ndarray::ArrayViewMut1<f64>,
) -> Array2<f64> {
    dgain.scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
    dbias.scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let g = dy * &gain;
    let c = g.ncols() as f64;
    let mut dx = Array2::zeros(g.raw_dim());
    for (((gr, xr), mut dr), &is) in g.rows().into_iter().zip(cache.xhat.rows()).zip(dx.rows_mut()).zip(&cache.inv_std) {
        let mg = gr.sum() / c;
        let mgx = gr.dot(&xr) / c;
        Zip::from(&mut dr).and(&gr).and(&xr).for_each(|d, &g, &x| *d = is * (g - mg - x * mgx));
    }
    dx
}

/// Group normalization cache: normalized values and one inverse std per
/// (segment, group).
#[derive(Debug, Clone)]
pub struct GroupCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
    groups: usize,
}

/// Normalizes each (segment, channel group) over time x group channels.
pub fn group_norm_packed(
    x: &Array2<f64>,
    segments: &[Segment],
    groups: usize,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, GroupCache) {
    let c = x.ncols();
    let width = c / groups;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(segments.len() * groups);
    for seg in segments {
        for g in 0..groups {
            let mut block = xhat.slice_mut(s![seg.start..seg.start + seg.len, g * width..(g + 1) * width]);
            let n = block.len() as f64;
            if block.is_empty() {
                inv_std.push(0.0);
                continue;
            }
            let mean = block.sum() / n;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            block.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, GroupCache { xhat, inv_std, groups })
}

pub fn group_norm_packed_backward(
    cache: &GroupCache,
    segments: &[Segment],
    gain: ArrayView1<f64>,
    dy: &Array2<f64>,
    dgain: &mut ndarray::ArrayViewMut1<f64>,
    dbias: &mut ndarray::ArrayViewMut1<f64>,
) -> Array2<f64> {
    dgain.scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
    dbias.scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let g = dy * &gain;
    let width = g.ncols() / cache.groups;
    let mut dx = Array2::zeros(g.raw_dim());
    let mut k = 0;
    for seg in segments {
        for grp in 0..cache.groups {
            let is = cache.inv_std[k];
            k += 1;
            if seg.len == 0 {
                continue;
            }
            let sl = s![seg.start..seg.start + seg.len, grp * width..(grp + 1) * width];
            let gb = g.slice(sl);
            let xb = cache.xhat.slice(sl);
            let n = gb.len() as f64;
            let mg = gb.sum() / n;
            let mgx = (&gb * &xb).sum() / n;
            Zip::from(dx.slice_mut(sl)).and(&gb).and(&xb).for_each(|d, &g, &x| *d = is * (g - mg - x * mgx));
        }
    }
    dx
}

/// Group normalization of a single `channels x time` matrix.
pub fn group_norm(
    x: ArrayView2<f64>,
    num_groups: usize,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
    epsilon: f64,
) -> Array2<f64> {
    let (c, _) = x.dim();
    assert!(num_groups > 0 && c % num_groups == 0, "num_groups must divide the channel count");
    let width = c / num_groups;
    let mut y = x.to_owned();
    for g in 0..num_groups {
        let mut block = y.slice_mut(s![g * width..(g + 1) * width, ..]);
        if block.is_empty() {
            continue;
        }
        let n = block.len() as f64;
        let mean = block.sum() / n;
        let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + epsilon).sqrt();
        block.mapv_inplace(|v| (v - mean) * is);
    }
    for (mut row, (&g, &b)) in y.rows_mut().into_iter().zip(gain.iter().zip(bias.iter())) {
        row.mapv_inplace(|v| g * v + b);
    }
    y
}

#[derive(Debug, Clone)]
pub struct BatchCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_stats: bool,
}

/// Per-channel mean and variance.
pub type Moments = (Array1<f64>, Array1<f64>);

/// Batch normalization. With `running = None` statistics come from the
/// batch and are returned alongside the output.
pub fn batch_norm(
    x: &Array2<f64>,
    running: Option<(ArrayView1<f64>, ArrayView1<f64>)>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, BatchCache, Option<Moments>) {
    let (mean, var, batch) = match running {
        Some((m, v)) => (m.to_owned(), v.to_owned(), None),
        None if x.nrows() == 0 => (Array1::zeros(x.ncols()), Array1::ones(x.ncols()), None),
        None => {
            let mean = x.mean_axis(Axis(0)).expect("non-empty");
            let var = x.var_axis(Axis(0), 0.0);
            (mean.clone(), var.clone(), Some((mean, var)))
        }
    };
    let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
    let xhat = (x - &mean) * &inv_std;
    let mut y = &xhat * &gain;
    y += &bias;
    let batch_stats = running.is_none();
    (y, BatchCache { xhat, inv_std, batch_stats }, batch)
}

pub fn batch_norm_backward(
    cache: &BatchCache,
    gain: ArrayView1<f64>,
    dy: &Array2<f64>,
    dgain: &mut ndarray::ArrayViewMut1<f64>,
    dbias: &mut ndarray::ArrayViewMut1<f64>,
) -> Array2<f64> {
    dgain.scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
    dbias.scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let g = dy * &gain;
    if !cache.batch_stats || g.nrows() == 0 {
        return g * &cache.inv_std;
    }
    let n = g.nrows() as f64;
    let mg = g.sum_axis(Axis(0)) / n;
    let mgx = (&g * &cache.xhat).sum_axis(Axis(0)) / n;
    (g - &mg - &(&cache.xhat * &mgx)) * &cache.inv_std
}

/// Depthwise temporal convolution with "same" zero padding inside each
/// segment. `w` is `kernel x channels`.
pub fn depthwise_conv(x: &Array2<f64>, segments: &[Segment], w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let k = w.nrows();
    let pad = (k - 1) / 2;
    let mut y = Array2::zeros(x.raw_dim());
    for seg in segments {
        for t in 0..seg.len {
            let mut out = y.row_mut(seg.start + t);
            out.assign(&b);
            for j in 0..k {
                let src = t + j;
                if src < pad || src - pad >= seg.len {
                    continue;
                }
                Zip::from(&mut out).and(&w.row(j)).and(&x.row(seg.start + src - pad)).for_each(|o, &w, &x| *o += w * x);
            }
        }
    }
    y
}

pub fn depthwise_conv_backward(
    x: &Array2<f64>,
    segments: &[Segment],
    w: ArrayView2<f64>,
    dy: &Array2<f64>,
    dw: &mut ndarray::ArrayViewMut2<f64>,
    db: &mut ndarray::ArrayViewMut1<f64>,
) -> Array2<f64> {
    let k = w.nrows();
    let pad = (k - 1) / 2;
    let mut dx = Array2::zeros(x.raw_dim());
    db.scaled_add(1.0, &dy.sum_axis(Axis(0)));
    for seg in segments {
        for t in 0..seg.len {
            let g = dy.row(seg.start + t);
            for j in 0..k {
                let src = t + j;
                if src < pad || src - pad >= seg.len {
                    continue;
                }
                let row = seg.start + src - pad;
                Zip::from(dw.row_mut(j)).and(&g).and(&x.row(row)).for_each(|d, &g, &x| *d += g * x);
                Zip::from(dx.row_mut(row)).and(&g).and(&w.row(j)).for_each(|d, &g, &w| *d += g * w);
            }
        }
    }
    dx
}

/// Softmax attention weights for every (segment, head).
#[derive(Debug, Clone)]
pub struct AttentionCache {
    weights: Vec<Array2<f64>>,
}

fn rel_index(i: usize, j: usize, window: usize) -> usize {
    let d = (j as isize - i as isize).clamp(-(window as isize), window as isize);
    (d + window as isize) as usize
}

/// Multi-head scaled dot-product attention within each segment, plus a
/// learned bias per head and clipped relative offset (`pos` is
/// `heads x (2 * window + 1)`).
pub fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    pos: ArrayView2<f64>,
    segments: &[Segment],
) -> (Array2<f64>, AttentionCache) {
    let heads = pos.nrows();
    let window = (pos.ncols() - 1) / 2;
    let dh = q.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros(q.raw_dim());
    let mut weights = Vec::with_capacity(segments.len() * heads);
    for seg in segments {
        let rows = seg.start..seg.start + seg.len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let mut a = qh.dot(&kh.t()) * scale;
            for ((i, j), x) in a.indexed_iter_mut() {
                *x += pos[[h, rel_index(i, j, window)]];
            }
            for mut row in a.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                row.mapv_inplace(|x| (x - m).exp());
                let z = row.sum();
                row.mapv_inplace(|x| x / z);
            }
            out.slice_mut(s![rows.clone(), cols]).assign(&a.dot(&vh));
            weights.push(a);
        }
    }
    (out, AttentionCache { weights })
}

/// Returns `(dq, dk, dv)` and accumulates the positional-bias gradient.
pub fn attention_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    cache: &AttentionCache,
    segments: &[Segment],
    dout: &Array2<f64>,
    dpos: &mut ndarray::ArrayViewMut2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let heads = dpos.nrows();
    let window = (dpos.ncols() - 1) / 2;
    let dh = q.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    let mut idx = 0;
    for seg in segments {
        let rows = seg.start..seg.start + seg.len;
        for h in 0..heads {
            let a = &cache.weights[idx];
            idx += 1;
            let cols = h * dh..(h + 1) * dh;
            let sl = s![rows.clone(), cols];
            let qh = q.slice(sl);
            let kh = k.slice(sl);
            let vh = v.slice(sl);
            let doh = dout.slice(sl);
            dv.slice_mut(sl).assign(&a.t().dot(&doh));
            let da = doh.dot(&vh.t());
            let mut ds = a * &da;
            for (mut r, ar) in ds.rows_mut().into_iter().zip(a.rows()) {
                let total = r.sum();
                Zip::from(&mut r).and(&ar).for_each(|d, &a| *d -= a * total);
            }
            for ((i, j), &g) in ds.indexed_iter() {
                dpos[[h, rel_index(i, j, window)]] += g;
            }
            dq.slice_mut(sl).assign(&(ds.dot(&kh) * scale));
            dk.slice_mut(sl).assign(&(ds.t().dot(&qh) * scale));
        }
    }
    (dq, dk, dv)
}

/// Log-softmax of every row.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.mapv_inplace(|v| v - z);
    }
    y
}

/// Gradient through a row-wise log-softmax given its output.
pub fn log_softmax_backward(log_probs: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    for (mut d, lp) in dx.rows_mut().into_iter().zip(log_probs.rows()) {
        let total = d.sum();
        Zip::from(&mut d).and(&lp).for_each(|d, &l| *d -= l.exp() * total);
    }
    dx
}
