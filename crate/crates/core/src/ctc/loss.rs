use ndarray::Array2;

use super::{CtcError, FramePosteriors};
use crate::logmath::log_add;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Negative log-likelihood and its gradient with respect to the pre-softmax
/// scores that produced the posteriors.
#[derive(Debug, Clone)]
pub struct CtcLoss {
    pub loss: f64,
    pub grad: Array2<f64>,
}

/// Blank-interleaved target: `ε y1 ε y2 ... ε`.
fn extend(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

fn check_target(post: &FramePosteriors, target: &[usize]) -> Result<(), CtcError> {
    let blank = post.blank_id();
    match target.iter().find(|&&id| id >= blank) {
        Some(&id) => Err(CtcError::InvalidToken { id, size: blank }),
        None => Ok(()),
    }
}

/// Can state `s` be entered from `s - 2` (skipping a blank)?
#[inline]
fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Forward variables `alpha[t][s]`, emission at `t` included.
fn forward(post: &FramePosteriors, ext: &[usize]) -> Array2<f64> {
    let t_len = post.frames();
    let s_len = ext.len();
    let blank = post.blank_id();
    let lp = post.log_probs();
    let mut alpha = Array2::from_elem((t_len, s_len), NEG_INF);
    if t_len == 0 {
        return alpha;
    }
    alpha[[0, 0]] = lp[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = lp[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = if acc == NEG_INF { NEG_INF } else { acc + lp[[t, ext[s]]] };
        }
    }
    alpha
}

/// Backward variables `beta[t][s]`, emission at `t` excluded.
fn backward(post: &FramePosteriors, ext: &[usize]) -> Array2<f64> {
    let t_len = post.frames();
    let s_len = ext.len();
    let blank = post.blank_id();
    let lp = post.log_probs();
    let mut beta = Array2::from_elem((t_len, s_len), NEG_INF);
    if t_len == 0 {
        return beta;
    }
    beta[[t_len - 1, s_len - 1]] = 0.0;
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]] + lp[[t + 1, ext[s]]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[[t + 1, s + 1]] + lp[[t + 1, ext[s + 1]]]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, beta[[t + 1, s + 2]] + lp[[t + 1, ext[s + 2]]]);
            }
            beta[[t, s]] = acc;
        }
    }
    beta
}

/// `log P(target | X)` summed over every alignment that collapses to `target`.
/// Returns `-inf` when no such alignment fits in the available frames.
pub fn ctc_log_likelihood(post: &FramePosteriors, target: &[usize]) -> Result<f64, CtcError> {
    check_target(post, target)?;
    let t_len = post.frames();
    if t_len == 0 {
        return Ok(if target.is_empty() { 0.0 } else { NEG_INF });
    }
    let ext = extend(target, post.blank_id());
    let alpha = forward(post, &ext);
    let s_len = ext.len();
    let mut ll = alpha[[t_len - 1, s_len - 1]];
    if s_len > 1 {
        ll = log_add(ll, alpha[[t_len - 1, s_len - 2]]);
    }
    Ok(ll)
}

/// Loss `-log P(target | X)` and its gradient via forward-backward.
///
/// An unreachable target is reported as [`CtcError::Unreachable`]; callers in
/// the training loop treat it as a skip signal.
pub fn ctc_loss_and_grad(post: &FramePosteriors, target: &[usize]) -> Result<CtcLoss, CtcError> {
    check_target(post, target)?;
    let t_len = post.frames();
    let classes = post.num_classes();
    let unreachable = || CtcError::Unreachable { frames: t_len, target_len: target.len() };
    if t_len == 0 {
        return if target.is_empty() {
            Ok(CtcLoss { loss: 0.0, grad: Array2::zeros((0, classes)) })
        } else {
            Err(unreachable())
        };
    }
    let ext = extend(target, post.blank_id());
    let alpha = forward(post, &ext);
    let beta = backward(post, &ext);
    let s_len = ext.len();
    let mut ll = alpha[[t_len - 1, s_len - 1]];
    if s_len > 1 {
        ll = log_add(ll, alpha[[t_len - 1, s_len - 2]]);
    }
    if ll == NEG_INF {
        return Err(unreachable());
    }

    let lp = post.log_probs();
    let mut grad = lp.mapv(f64::exp);
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[[t, s]] + beta[[t, s]];
            if occ != NEG_INF {
                grad[[t, ext[s]]] -= (occ - ll).exp();
            }
        }
    }
    Ok(CtcLoss { loss: -ll, grad })
}
