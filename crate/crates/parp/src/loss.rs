//! Loss functions with analytic gradients: frame cross-entropy, CTC over
//! the blank-augmented label lattice, masked reconstruction, and the
//! contrastive (InfoNCE-style) objective.

use crate::error::{Error, Result};
use crate::nn::Encoder;
use crate::tensor::{ParamStore, Tensor};

/// Row-wise log-softmax of a T x V tensor.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let (t, v) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(vec![t, v]);
    for r in 0..t {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let lz = m + z.ln();
        let o = out.row_mut(r);
        for j in 0..v {
            o[j] = row[j] - lz;
        }
    }
    out
}

/// Chain a gradient w.r.t. log-softmax outputs back to the logits:
/// d_logit = d_lp - softmax * sum(d_lp).
pub fn log_softmax_backward(log_probs: &Tensor, d_log_probs: &Tensor) -> Tensor {
    let (t, v) = (log_probs.rows(), log_probs.cols());
    let mut out = Tensor::zeros(vec![t, v]);
    for r in 0..t {
        let lp = log_probs.row(r);
        let dlp = d_log_probs.row(r);
        let s: f64 = dlp.iter().sum();
        let o = out.row_mut(r);
        for j in 0..v {
            o[j] = dlp[j] - lp[j].exp() * s;
        }
    }
    out
}

/// Mean per-frame cross-entropy. Returns the loss and its gradient with
/// respect to the logits.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (t, v) = (logits.rows(), logits.cols());
    if labels.len() != t {
        return Err(Error::input(format!("{} labels for {} frames", labels.len(), t)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
        return Err(Error::input(format!("label {bad} out of range [0,{v})")));
    }
    let lp = log_softmax(logits);
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(vec![t, v]);
    for r in 0..t {
        loss -= lp.at(r, labels[r]);
        let g = grad.row_mut(r);
        let lpr = lp.row(r);
        for j in 0..v {
            g[j] = lpr[j].exp() / t as f64;
        }
        g[labels[r]] -= 1.0 / t as f64;
    }
    Ok((loss / t as f64, grad))
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum number of frames needed to emit `target` (blanks required
/// between repeated labels).
pub fn ctc_min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// CTC loss over log-softmax-normalized `log_probs` (T x V), with the
/// standard forward-backward recursion on the blank-augmented lattice.
/// Returns -log P(target) and the gradient with respect to `log_probs`.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<(f64, Tensor)> {
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    if blank >= v {
        return Err(Error::input(format!("blank id {blank} out of range [0,{v})")));
    }
    if let Some(&bad) = target.iter().find(|&&l| l >= v || l == blank) {
        return Err(Error::input(format!("target label {bad} invalid (V={v}, blank={blank})")));
    }
    if ctc_min_frames(target) > t_len {
        return Err(Error::InfeasibleTarget { target_len: target.len(), frames: t_len });
    }

    // Augmented label sequence: blank, l1, blank, l2, ..., blank.
    let s_len = 2 * target.len() + 1;
    let lab = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            target[s / 2]
        }
    };

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![vec![neg; s_len]; t_len];
    alpha[0][0] = log_probs.at(0, blank);
    if s_len > 1 {
        alpha[0][1] = log_probs.at(0, lab(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            // skip transition allowed unless current is blank or repeats s-2
            if s >= 2 && lab(s) != blank && lab(s) != lab(s - 2) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if a == neg { neg } else { a + log_probs.at(t, lab(s)) };
        }
    }

    let mut log_p = alpha[t_len - 1][s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[t_len - 1][s_len - 2]);
    }
    if log_p == neg {
        return Err(Error::InfeasibleTarget { target_len: target.len(), frames: t_len });
    }

    // beta[t][s]: log prob of completing the target from (t, s), with the
    // frame-t emission excluded (so alpha + beta covers each path once).
    let mut beta = vec![vec![neg; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s] + log_probs.at(t + 1, lab(s));
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1] + log_probs.at(t + 1, lab(s + 1)));
            }
            if s + 2 < s_len && lab(s + 2) != blank && lab(s + 2) != lab(s) {
                b = log_add(b, beta[t + 1][s + 2] + log_probs.at(t + 1, lab(s + 2)));
            }
            beta[t][s] = b;
        }
    }

    // d(-logP)/d lp[t][k] = -sum_{s: lab(s)=k} exp(alpha[t][s] + beta[t][s] - logP)
    let mut grad = Tensor::zeros(vec![t_len, v]);
    for t in 0..t_len {
        let mut per_class = vec![neg; v];
        for s in 0..s_len {
            let g = alpha[t][s] + beta[t][s];
            if g != neg {
                let k = lab(s);
                per_class[k] = log_add(per_class[k], g);
            }
        }
        let gr = grad.row_mut(t);
        for k in 0..v {
            if per_class[k] != neg {
                gr[k] = -(per_class[k] - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Greedy best-path CTC decode: per-frame argmax, collapse repeats, drop
/// blanks.
pub fn ctc_greedy_decode(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for r in 0..log_probs.rows() {
        let row = log_probs.row(r);
        let arg = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if arg != prev && arg != blank {
            out.push(arg);
        }
        prev = arg;
    }
    out
}

/// InfoNCE-style contrastive loss. Returns the loss and gradients with
/// respect to anchor, positive, and each negative.
pub fn contrastive_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    if temperature <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    if negatives.is_empty() {
        return Err(Error::input("at least one negative required".to_string()));
    }
    let dim = anchor.len();
    if positive.len() != dim || negatives.iter().any(|n| n.len() != dim) {
        return Err(Error::Shape("contrastive embeddings must share a dimension".to_string()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut scores = Vec::with_capacity(negatives.len() + 1);
    scores.push(dot(anchor, positive) / temperature);
    for n in negatives {
        scores.push(dot(anchor, n) / temperature);
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    let log_z = m + z.ln();
    let loss = log_z - scores[0];

    let probs: Vec<f64> = scores.iter().map(|s| (s - log_z).exp()).collect();
    let mut d_anchor = vec![0.0; dim];
    let c0 = (probs[0] - 1.0) / temperature;
    for j in 0..dim {
        d_anchor[j] += c0 * positive[j];
    }
    let d_pos: Vec<f64> = anchor.iter().map(|a| c0 * a).collect();
    let mut d_negs = Vec::with_capacity(negatives.len());
    for (k, n) in negatives.iter().enumerate() {
        let ck = probs[k + 1] / temperature;
        for j in 0..dim {
            d_anchor[j] += ck * n[j];
        }
        d_negs.push(anchor.iter().map(|a| ck * a).collect());
    }
    Ok((loss, d_anchor, d_pos, d_negs))
}

/// Masked-reconstruction loss: zero out masked frames at the input, encode,
/// reconstruct via the `recon` head, and score MSE (per-frame squared error
/// averaged over masked frames only). Accumulates gradients into `store`.
pub fn masked_recon_loss(
    enc: &Encoder,
    store: &mut ParamStore,
    batch: &Tensor,
    mask_positions: &[usize],
) -> Result<f64> {
    if mask_positions.is_empty() {
        return Err(Error::input("mask_positions must be nonempty".to_string()));
    }
    let t = batch.rows();
    if let Some(&bad) = mask_positions.iter().find(|&&p| p >= t) {
        return Err(Error::input(format!("mask position {bad} out of range [0,{t})")));
    }
    let mut masked = batch.clone();
    for &p in mask_positions {
        masked.row_mut(p).iter_mut().for_each(|v| *v = 0.0);
    }
    let cache = enc.forward(store, &masked)?;
    let recon = enc.head_forward(store, "recon", &cache.output)?;

    let m = mask_positions.len() as f64;
    let mut loss = 0.0;
    let mut d_recon = Tensor::zeros(vec![t, recon.cols()]);
    for &p in mask_positions {
        let r = recon.row(p);
        let x = batch.row(p);
        let dr = d_recon.row_mut(p);
        for j in 0..x.len() {
            let diff = r[j] - x[j];
            loss += diff * diff;
            dr[j] = 2.0 * diff / m;
        }
    }
    loss /= m;

    let d_emb = enc.head_backward(store, "recon", &cache.output, &d_recon);
    enc.backward(store, &cache, &d_emb);
    Ok(loss)
}
