//! Two-factor Gaussian model of a binary SSL sub-task.
//!
//! A label `y ∈ {±1}` produces a causal factor `F_x ~ N(y·μ_l, σ_l²)` and a
//! spurious factor `F_s ~ N(ȳ·μ_s, σ_s²)`, where `ȳ` is the label of another
//! pair. When pairs are indistinguishable `ȳ = y` with probability `p_sc`
//! and `−y` otherwise; when they are distinguishable `ȳ` carries no
//! information about `y`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{config_err, numerical, Result};
use crate::rngs;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoFactor {
    pub p_sc: f64,
    pub mu_label: f64,
    pub mu_s: f64,
    pub sigma_label: f64,
    pub sigma_s: f64,
    pub distinguishable: bool,
}

impl TwoFactor {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.p_sc,
            self.mu_label,
            self.mu_s,
            self.sigma_label,
            self.sigma_s,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(config_err("two-factor parameters must be finite"));
        }
        if !(self.sigma_label > 0.0 && self.sigma_s > 0.0) {
            return Err(config_err(
                "two-factor standard deviations must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.p_sc) {
            return Err(config_err("p_sc must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Exact `ln P(y=+1 | F) − ln P(y=−1 | F)`.
    pub fn log_odds(&self, f_x: f64, f_s: f64) -> f64 {
        let causal = 2.0 * self.mu_label * f_x / (self.sigma_label * self.sigma_label);
        if self.distinguishable {
            return causal;
        }
        let c = self.mu_s * f_s / (self.sigma_s * self.sigma_s);
        causal + 2.0 * ((2.0 * self.p_sc - 1.0) * c.tanh()).atanh()
    }

    pub fn posterior(&self, f_x: f64, f_s: f64) -> f64 {
        1.0 / (1.0 + (-self.log_odds(f_x, f_s)).exp())
    }

    /// Weight on `F_x` in the log-odds.
    pub fn label_coefficient(&self) -> f64 {
        2.0 * self.mu_label / (self.sigma_label * self.sigma_label)
    }

    /// Slope of the log-odds in `F_s` at `F_s = 0`: `2(2p_sc − 1)·μ_s/σ_s²`
    /// when indistinguishable, zero otherwise.
    pub fn s_coefficient(&self) -> f64 {
        if self.distinguishable {
            0.0
        } else {
            2.0 * (2.0 * self.p_sc - 1.0) * self.mu_s / (self.sigma_s * self.sigma_s)
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64, f64) {
        let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let other = if self.distinguishable {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        } else if rng.random::<f64>() < self.p_sc {
            y
        } else {
            -y
        };
        let fx = Normal::new(y * self.mu_label, self.sigma_label)
            .expect("validated")
            .sample(rng);
        let fs = Normal::new(other * self.mu_s, self.sigma_s)
            .expect("validated")
            .sample(rng);
        (y, fx, fs)
    }
}

/// What the logistic regression is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Targets {
    /// Sampled binary labels.
    Sampled,
    /// The exact posterior `P(y=+1 | F)` at each sampled feature pair.
    Bayes,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticFit {
    /// `[intercept, w_x, w_s]`.
    pub coef: [f64; 3],
    /// Square roots of the inverse-Hessian diagonal at the optimum. These are
    /// the usual standard errors for [`Targets::Sampled`].
    pub std_err: [f64; 3],
}

/// Logistic regression of `y` on `(1, F_x, F_s)` over `samples`
/// Monte-Carlo draws, fitted by Newton's method.
pub fn monte_carlo_logistic(
    model: &TwoFactor,
    samples: usize,
    seed: u64,
    targets: Targets,
) -> Result<LogisticFit> {
    model.validate()?;
    const CHUNK: usize = 1 << 15;
    let n_chunks = samples.div_ceil(CHUNK);
    let data: Vec<(f64, f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = rngs::stream(seed, "two-factor-mc", c as u64);
            let len = CHUNK.min(samples - c * CHUNK);
            (0..len)
                .map(move |_| {
                    let (y, fx, fs) = model.draw(&mut rng);
                    let t = match targets {
                        Targets::Sampled => f64::from(y > 0.0),
                        Targets::Bayes => model.posterior(fx, fs),
                    };
                    (t, fx, fs)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut w = Vector3::zeros();
    let mut hessian = Matrix3::identity();
    for _ in 0..100 {
        // Per-chunk partial sums, reduced in chunk order.
        let partials: Vec<(Vector3<f64>, Matrix3<f64>)> = data
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Vector3::zeros();
                let mut h = Matrix3::zeros();
                for &(t, fx, fs) in chunk {
                    let v = Vector3::new(1.0, fx, fs);
                    let p = 1.0 / (1.0 + (-w.dot(&v)).exp());
                    g += v * (p - t);
                    h += v * v.transpose() * (p * (1.0 - p));
                }
                (g, h)
            })
            .collect();
        let (g, h) = partials
            .into_iter()
            .fold((Vector3::zeros(), Matrix3::zeros()), |(ga, ha), (g, h)| {
                (ga + g, ha + h)
            });
        let step = h
            .lu()
            .solve(&g)
            .ok_or_else(|| numerical("logistic Hessian is singular"))?;
        hessian = h;
        w -= step;
        if !w.iter().all(|v| v.is_finite()) {
            return Err(numerical("logistic fit"));
        }
        if step.amax() < 1e-12 {
            break;
        }
    }
    let cov = hessian
        .try_inverse()
        .ok_or_else(|| numerical("logistic Hessian is singular"))?;
    Ok(LogisticFit {
        coef: [w[0], w[1], w[2]],
        std_err: [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt(), cov[(2, 2)].sqrt()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(p_sc: f64, distinguishable: bool) -> TwoFactor {
        TwoFactor {
            p_sc,
            mu_label: 1.0,
            mu_s: 0.2,
            sigma_label: 1.0,
            sigma_s: 1.0,
            distinguishable,
        }
    }

    #[test]
    fn coefficient_vanishes_in_both_null_regimes() {
        assert_eq!(model(0.5, false).s_coefficient(), 0.0);
        assert_eq!(model(0.9, true).s_coefficient(), 0.0);
        assert!((model(0.9, false).s_coefficient() - 0.32).abs() < 1e-15);
    }

    #[test]
    fn slope_matches_finite_difference_of_log_odds() {
        let m = model(0.9, false);
        let h = 1e-5;
        let fd = (m.log_odds(0.3, h) - m.log_odds(0.3, -h)) / (2.0 * h);
        assert!((fd - m.s_coefficient()).abs() < 1e-9);
        // The mixture saturates: the log-odds contribution of F_s is bounded by 2·atanh(2p − 1).
        let bound = 2.0 * (0.8f64).atanh();
        assert!(m.log_odds(0.0, 1e3) <= bound + 1e-12);
    }
}
