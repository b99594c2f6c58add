//! Graph-free numeric kernels. The autodiff graph calls these for its forward
//! values, and inference paths can use them directly.

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

pub fn log_softmax<S: Scalar>(x: &[S]) -> Result<Vec<S>> {
    if x.is_empty() {
        return Err(Error::Empty("log_softmax"));
    }
    let mut out = x.to_vec();
    log_softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn log_softmax_in_place<S: Scalar>(x: &mut [S]) {
    let lse = log_sum_exp(x);
    for v in x.iter_mut() {
        *v -= lse;
    }
}

pub fn softmax<S: Scalar>(x: &[S]) -> Result<Vec<S>> {
    if x.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out, x.len());
    Ok(out)
}

/// Softmax over the first `active` entries; the rest are set to zero.
pub(crate) fn softmax_in_place<S: Scalar>(x: &mut [S], active: usize) {
    let max = x[..active].iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in x[..active].iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x[..active].iter_mut() {
        *v /= sum;
    }
    for v in x[active..].iter_mut() {
        *v = S::zero();
    }
}

/// Per-vector layer normalisation `gain * (x - mean) / sqrt(var + eps) + bias`
/// with the biased (population) variance.
pub fn layer_norm<S: Scalar>(x: &[S], gain: &[S], bias: &[S], eps: S) -> Result<Vec<S>> {
    if x.is_empty() {
        return Err(Error::Empty("layer_norm"));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::shape(
            "layer_norm",
            format!("input {} gain {} bias {}", x.len(), gain.len(), bias.len()),
        ));
    }
    if !(eps > S::zero()) {
        return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
    }
    let (xhat, _) = normalize(x, eps);
    Ok(xhat.iter().zip(gain).zip(bias).map(|((&h, &g), &b)| g * h + b).collect())
}

/// Returns the normalised vector and `1 / sqrt(var + eps)`.
pub(crate) fn normalize<S: Scalar>(x: &[S], eps: S) -> (Vec<S>, S) {
    let n = S::from_usize_lossy(x.len());
    let mean = x.iter().copied().sum::<S>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let inv = S::one() / (var + eps).sqrt();
    (x.iter().map(|&v| (v - mean) * inv).collect(), inv)
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_examples() {
        let y = log_softmax(&[0.0f64, 0.0]).unwrap();
        for v in y {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
        assert_eq!(log_softmax(&[5.0f64]).unwrap(), vec![0.0]);
        assert!(matches!(log_softmax::<f64>(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn log_softmax_matches_direct_normalisation() {
        // Oracle: normalise in the probability domain with compensated summation.
        let x = [1.0f64, 2.0, 3.0];
        let exps: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for e in &exps {
            let y = e - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let oracle: Vec<f64> = exps.iter().map(|e| (e / sum).ln()).collect();
        let got = log_softmax(&x).unwrap();
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g - o).abs() <= 1e-12);
        }
        let argmax = got.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 2);
        assert!(log_sum_exp(&got).abs() <= 1e-9);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = vec![1.0f64; 4];
        let zeros = vec![0.0f64; 4];
        let out = layer_norm(&[3.0; 4], &ones, &zeros, 1e-5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let out = layer_norm(&[1.0f64, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);

        assert!(layer_norm(&[1.0f64, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
        assert!(layer_norm(&[1.0f64, 2.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn layer_norm_two_pass_oracle() {
        let x = [0.3f64, -1.2, 2.5, 0.0, 0.7, -0.4, 1.1, -2.2];
        let gain = [1.0, 0.5, 2.0, -1.0, 1.5, 0.2, 0.9, 1.1];
        let bias = [0.1, -0.1, 0.0, 0.3, 0.0, 0.2, -0.5, 0.05];
        let eps = 1e-5;
        let mut mean = 0.0;
        for v in &x {
            mean += v;
        }
        mean /= 8.0;
        let mut var = 0.0;
        for v in &x {
            var += (v - mean) * (v - mean);
        }
        var /= 8.0;
        let got = layer_norm(&x, &gain, &bias, eps).unwrap();
        for i in 0..8 {
            let o = gain[i] * (x[i] - mean) / (var + eps).sqrt() + bias[i];
            assert!((got[i] - o).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }
}
