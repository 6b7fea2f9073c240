use crate::error::{shape_err, NdError, Result};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `names` is only used in error messages.
    ///
    /// Every gradient is checked before any parameter changes, so a
    /// non-finite gradient leaves the parameters untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        names: &[String],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err(
                "Adam::step",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(shape_err(
                    "Adam::step",
                    format!("parameter {i}: {} values, gradient {}", p.len(), g.len()),
                ));
            }
            if !g.is_finite() {
                let name = names
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("param[{i}]"));
                return Err(NdError::Numerical {
                    what: format!("gradient of {name}"),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // After bias correction the first step is lr·sign(g) up to eps.
        let mut p = Tensor::row(&[1.0, -2.0]);
        let g = Tensor::row(&[0.3, -5.0]);
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut p], &[g], &["w".into()]).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = Tensor::row(&[1.0]);
        let mut opt = Adam::new(0.01);
        let err = opt
            .step(
                &mut [&mut p],
                &[Tensor::row(&[f64::NAN])],
                &["enc.w0".into()],
            )
            .unwrap_err();
        assert!(err.to_string().contains("enc.w0"));
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }
}
