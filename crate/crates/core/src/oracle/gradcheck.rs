//! Central finite differences against the taped ELBO gradient.

use ndcore::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::rlvm::{ElboConfig, Rlvm};
use crate::rngs;

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const REL_FLOOR: f64 = 1e-3;

/// Worst relative error per parameter group (`encoder`, `decoder`, `prior`, `prior.A`).
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub groups: Vec<(String, f64)>,
    pub entries_checked: usize,
}

fn group_of(name: &str) -> &str {
    match name.split_once('.') {
        Some(("prior", "A")) => "prior.A",
        Some((head, _)) => head,
        None => name,
    }
}

fn random_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect(),
    )
}

/// Checks every parameter entry on `batches` random tiny batches, each with
/// a freshly initialized model. Step size `h` is used for `(L(θ+h) − L(θ−h)) / 2h`.
pub fn elbo_gradient_check(batches: usize, rows: usize, h: f64, seed: u64) -> Result<GradCheck> {
    let d = 3;
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut entries = 0;
    for b in 0..batches {
        let mut rng = rngs::stream(seed, "elbo-gradcheck", b as u64);
        let cfg = ElboConfig {
            n: 2,
            k: 2,
            hidden: vec![5],
            alpha: rng.random_range(0.1..2.0),
            decoder_sigma: rng.random_range(0.5..1.5),
            seed: rng.random(),
            ..ElboConfig::default()
        };
        let model = Rlvm::new(d, &cfg)?;
        let xp = random_tensor(rows, d, &mut rng);
        let xl = random_tensor(rows, d, &mut rng);
        let z = random_tensor(rows, cfg.n, &mut rng);
        let (_, grads) = model.elbo(&xp, &xl, &z, &cfg)?;
        let loss_at = |m: &Rlvm| -> Result<f64> { Ok(m.elbo(&xp, &xl, &z, &cfg)?.0.loss) };
        for (p, name) in model.param_names().iter().enumerate() {
            let group = group_of(name);
            for e in 0..grads[p].len() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                plus.params_mut()[p].data_mut()[e] += h;
                minus.params_mut()[p].data_mut()[e] -= h;
                let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
                let err = rel_err(grads[p].data()[e], fd, REL_FLOOR);
                entries += 1;
                match worst.iter_mut().find(|(g, _)| g == group) {
                    Some((_, w)) => *w = w.max(err),
                    None => worst.push((group.to_string(), err)),
                }
            }
        }
    }
    Ok(GradCheck {
        groups: worst,
        entries_checked: entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(rel_err(0.0, 1e-4, 1e-3), 0.1);
        assert_eq!(rel_err(2.0, 1.0, 1e-3), 0.5);
    }

    #[test]
    fn groups_follow_parameter_names() {
        assert_eq!(group_of("prior.A"), "prior.A");
        assert_eq!(group_of("prior.w0"), "prior");
        assert_eq!(group_of("encoder.b1"), "encoder");
    }
}
