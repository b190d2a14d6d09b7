//! Log-domain helpers shared by scoring, CTC and decoding.

/// `ln(exp(a) + exp(b))` without overflow; `-inf` is the additive identity.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(Σ exp(x_i))`, returning `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted log-softmax, written into `out`.
pub fn log_softmax_into(xs: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(xs);
    for (o, x) in out.iter_mut().zip(xs) {
        *o = x - lse;
    }
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    log_softmax_into(xs, &mut out);
    out
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_exp_identity_and_symmetry() {
        assert_eq!(log_add_exp(f64::NEG_INFINITY, -3.0), -3.0);
        assert_eq!(log_add_exp(-3.0, f64::NEG_INFINITY), -3.0);
        let v = log_add_exp(0.5f64.ln(), 0.25f64.ln());
        assert!((v - 0.75f64.ln()).abs() < 1e-15);
        assert_eq!(log_add_exp(-1.0, -2.0), log_add_exp(-2.0, -1.0));
    }

    #[test]
    fn softmax_handles_large_scores() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let lp = log_softmax(&[-1e6, 0.0]);
        assert!(lp[1].abs() < 1e-12);
        assert!(lp[0].is_finite());
    }
}
