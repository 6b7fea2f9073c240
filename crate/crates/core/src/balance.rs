//! Propensity scores and the Jensen-Shannon distance used to compare them.

use ndcore::{logsumexp, Tensor};

use crate::error::{config_err, numerical, Result};

/// `[p(anchor_j | s)]_j` over the candidate anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancingScore {
    pub probs: Vec<f64>,
    /// Which anchor each coordinate refers to.
    pub label_ids: Vec<usize>,
}

/// Propensity of `s` against the anchors' prior means (`nu × n`).
///
/// Each anchor's prior is `N(μ_j, I)` and the anchors are equally likely a
/// priori, so the score is a softmax over `−½‖s − μ_j‖²`.
///
/// ```
/// use ndcore::Tensor;
/// use pidssl::balance::propensity;
///
/// let mu = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]);
/// let ba = propensity(&[1.0, 0.0], &mu).unwrap();
/// let e = (-2.0f64).exp();
/// assert!((ba.probs[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
/// ```
pub fn propensity(s: &[f64], prior_means: &Tensor) -> Result<BalancingScore> {
    let nu = prior_means.rows();
    if nu < 2 {
        return Err(config_err(format!(
            "propensity needs at least 2 anchors, got {nu}"
        )));
    }
    if s.len() != prior_means.cols() {
        return Err(config_err(format!(
            "s has {} entries, prior means have {}",
            s.len(),
            prior_means.cols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(numerical("propensity input s"));
    }
    let mut logits = vec![0.0; nu];
    log_densities_into(s, prior_means, &mut logits);
    Ok(BalancingScore {
        probs: softmax_in_place(logits),
        label_ids: (0..nu).collect(),
    })
}

/// `−½‖s − μ_j‖²` for every row `j`; returns the number of squared-difference
/// terms evaluated (`rows · n`).
pub fn log_densities_into(s: &[f64], prior_means: &Tensor, out: &mut [f64]) -> u64 {
    let n = s.len();
    for (j, o) in out.iter_mut().enumerate() {
        let mu = prior_means.row_slice(j);
        let mut acc = 0.0;
        for i in 0..n {
            let t = s[i] - mu[i];
            acc += t * t;
        }
        *o = -0.5 * acc;
    }
    (out.len() * n) as u64
}

/// Normalizes log-weights with log-sum-exp.
pub fn softmax_in_place(mut logits: Vec<f64>) -> Vec<f64> {
    let lse = logsumexp(&logits);
    logits.iter_mut().for_each(|v| *v = (*v - lse).exp());
    logits
}

fn kl_to_mid(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            let m = 0.5 * (a + b);
            total += a * (a / m).ln();
        }
    }
    total
}

/// `½KL(p‖m) + ½KL(q‖m)` with `m = (p + q)/2`, in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(config_err(format!(
            "JS divergence of vectors with lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(js_unchecked(p, q))
}

/// [`js_divergence`] without the length check, for the matching hot loop.
#[inline]
pub fn js_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let v = 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p);
    v.clamp(0.0, std::f64::consts::LN_2)
}

pub fn js_scores(p: &BalancingScore, q: &BalancingScore) -> Result<f64> {
    if p.label_ids != q.label_ids {
        return Err(config_err("balancing scores refer to different anchors"));
    }
    js_divergence(&p.probs, &q.probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - ln2).abs() < 1e-15);
        // Direct evaluation: ½[0.5 ln(5/7) + 0.5 ln(5/3)] + ½[0.9 ln(9/7) + 0.1 ln(1/3)].
        let v = js_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((v - 0.101_749_225_079_196_8).abs() < 1e-15, "{v}");
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn propensity_rejects_bad_input() {
        let mu = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        assert!(propensity(&[0.0, 0.0], &mu).is_err());
        let mu = Tensor::matrix(2, 2, vec![0.0; 4]);
        assert!(propensity(&[f64::NAN, 0.0], &mu).is_err());
        let eq = propensity(
            &[0.0, 3.0],
            &Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]),
        )
        .unwrap();
        assert!((eq.probs[0] - 0.5).abs() < 1e-15);
    }
}
