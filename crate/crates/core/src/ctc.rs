//! CTC negative log-likelihood and its gradient, computed with a log-space
//! forward-backward pass. Label 0 is blank; reference labels are column
//! indices in `1..C`.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::math::{log_add_exp, log_softmax_into};

pub const BLANK: usize = 0;

#[derive(Clone, Debug)]
pub struct CtcResult {
    pub neg_log_likelihood: f64,
    /// `∂loss/∂scores` where the posteriors are `softmax(scores)` per frame.
    pub grad: Array2<f64>,
}

/// Minimum number of frames an alignment of `labels` needs: one per label
/// plus a separating blank between equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_inputs(log_posteriors: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    let (frames, classes) = log_posteriors.dim();
    if log_posteriors.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("log posteriors contain NaN".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::Input(format!(
            "reference label {bad} outside 1..{classes}"
        )));
    }
    let needed = min_frames(labels);
    if frames < needed.max(1) {
        return Err(Error::InfeasibleAlignment {
            labels: labels.len(),
            needed: needed.max(1),
            frames,
        });
    }
    Ok(())
}

fn expand(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

struct Lattice {
    ext: Vec<usize>,
    alpha: Array2<f64>,
    beta: Array2<f64>,
    forward_total: f64,
    backward_total: f64,
}

fn lattice(lp: &ArrayView2<f64>, labels: &[usize]) -> Lattice {
    let frames = lp.nrows();
    let ext = expand(labels);
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let mut alpha = Array2::from_elem((frames, s_len), ninf);
    let mut beta = Array2::from_elem((frames, s_len), ninf);
    // whether state s may be entered by skipping the blank at s-1
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2])
        .collect();

    alpha[[0, 0]] = lp[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = lp[[0, ext[1]]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut a = alpha[[t - 1, s]];
            if s >= 1 {
                a = log_add_exp(a, alpha[[t - 1, s - 1]]);
            }
            if skip[s] {
                a = log_add_exp(a, alpha[[t - 1, s - 2]]);
            }
            if a != ninf {
                alpha[[t, s]] = a + lp[[t, ext[s]]];
            }
        }
    }

    let last = frames - 1;
    beta[[last, s_len - 1]] = lp[[last, ext[s_len - 1]]];
    if s_len > 1 {
        beta[[last, s_len - 2]] = lp[[last, ext[s_len - 2]]];
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut b = beta[[t + 1, s]];
            if s + 1 < s_len {
                b = log_add_exp(b, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && skip[s + 2] {
                b = log_add_exp(b, beta[[t + 1, s + 2]]);
            }
            if b != ninf {
                beta[[t, s]] = b + lp[[t, ext[s]]];
            }
        }
    }

    let mut forward_total = alpha[[last, s_len - 1]];
    if s_len > 1 {
        forward_total = log_add_exp(forward_total, alpha[[last, s_len - 2]]);
    }
    let mut backward_total = beta[[0, 0]];
    if s_len > 1 {
        backward_total = log_add_exp(backward_total, beta[[0, 1]]);
    }
    Lattice {
        ext,
        alpha,
        beta,
        forward_total,
        backward_total,
    }
}

/// Forward and backward log-likelihoods of `labels`; equal up to rounding.
pub fn log_likelihoods(log_posteriors: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, f64)> {
    check_inputs(&log_posteriors, labels)?;
    let lat = lattice(&log_posteriors, labels);
    Ok((lat.forward_total, lat.backward_total))
}

/// CTC loss over per-frame log-posteriors (rows are log-probabilities).
pub fn ctc_loss(log_posteriors: ArrayView2<f64>, labels: &[usize]) -> Result<CtcResult> {
    check_inputs(&log_posteriors, labels)?;
    let lat = lattice(&log_posteriors, labels);
    let log_p = lat.forward_total;
    if log_p == f64::NEG_INFINITY {
        return Err(Error::Input(
            "reference has zero probability under the posteriors".into(),
        ));
    }
    let (frames, classes) = log_posteriors.dim();
    let mut grad = Array2::zeros((frames, classes));
    let mut occupancy = vec![f64::NEG_INFINITY; classes];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
        for (s, &label) in lat.ext.iter().enumerate() {
            let a = lat.alpha[[t, s]];
            let b = lat.beta[[t, s]];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            // alpha and beta both include this frame's emission
            let g = a + b - log_posteriors[[t, label]];
            occupancy[label] = log_add_exp(occupancy[label], g);
        }
        for c in 0..classes {
            let p = log_posteriors[[t, c]].exp();
            let gamma = (occupancy[c] - log_p).exp();
            grad[[t, c]] = p - gamma;
        }
    }
    Ok(CtcResult {
        neg_log_likelihood: -log_p,
        grad,
    })
}

/// Applies a row-wise log-softmax to `scores` and returns the CTC loss with
/// the gradient with respect to `scores`.
pub fn ctc_loss_from_scores(scores: ArrayView2<f64>, labels: &[usize]) -> Result<CtcResult> {
    let lp = log_softmax_rows(scores);
    ctc_loss(lp.view(), labels)
}

pub fn log_softmax_rows(scores: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(scores.dim());
    for (src, mut dst) in scores.outer_iter().zip(out.outer_iter_mut()) {
        let src = src.to_vec();
        log_softmax_into(&src, dst.as_slice_mut().expect("contiguous"));
    }
    out
}

/// Compares the analytic gradient against central finite differences of
/// the loss with respect to every score. Returns the largest relative
/// error `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn ctc_grad_check(scores: ArrayView2<f64>, labels: &[usize], h: f64) -> Result<f64> {
    let analytic = ctc_loss_from_scores(scores, labels)?.grad;
    let mut work = scores.to_owned();
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(scores.dim()) {
        let orig = work[idx];
        work[idx] = orig + h;
        let up = ctc_loss_from_scores(work.view(), labels)?.neg_log_likelihood;
        work[idx] = orig - h;
        let down = ctc_loss_from_scores(work.view(), labels)?.neg_log_likelihood;
        work[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_frame_single_label() {
        let lp = array![[0.5f64.ln(), 0.5f64.ln()]];
        let r = ctc_loss(lp.view(), &[1]).unwrap();
        assert!((r.neg_log_likelihood + 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_frames_uniform() {
        let h = 0.5f64.ln();
        let lp = array![[h, h], [h, h]];
        let r = ctc_loss(lp.view(), &[1]).unwrap();
        assert!((r.neg_log_likelihood + 0.75f64.ln()).abs() < 1e-15);
        for row in r.grad.outer_iter() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_and_bad_inputs() {
        let h = 0.5f64.ln();
        let lp = array![[h, h], [h, h]];
        assert!(matches!(
            ctc_loss(lp.view(), &[1, 1]),
            Err(Error::InfeasibleAlignment { needed: 3, frames: 2, .. })
        ));
        assert!(matches!(ctc_loss(lp.view(), &[2]), Err(Error::Input(_))));
        let nan = array![[f64::NAN, h]];
        assert!(matches!(ctc_loss(nan.view(), &[1]), Err(Error::Input(_))));
        assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
    }

    #[test]
    fn forward_equals_backward() {
        let scores = array![[0.1, -0.3, 0.7], [1.0, 0.2, -1.0], [0.0, 0.5, 0.5], [-0.2, 0.9, 0.1]];
        let lp = log_softmax_rows(scores.view());
        let (f, b) = log_likelihoods(lp.view(), &[1, 2]).unwrap();
        assert!((f - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_small_instance() {
        let scores = array![[0.1, -0.3, 0.7], [1.0, 0.2, -1.0], [0.0, 0.5, 0.5], [-0.2, 0.9, 0.1]];
        assert!(ctc_grad_check(scores.view(), &[1, 1], 1e-5).unwrap() < 1e-5);
    }
}
