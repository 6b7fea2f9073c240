//! Regularized latent-variable model of the spurious factor.
//!
//! Three networks and one matrix:
//!
//! * encoder `φ`: `concat(x⁺, x_label) → (mean, log-variance)` of `q(s | x⁺, x_label)`;
//! * decoder `f`: `concat(s, x_label) → x̂⁺`, Gaussian likelihood with fixed σ;
//! * prior network `g`: `concat(context, x_label) → λ ∈ R^{n·k}`;
//! * `A ∈ R^{n×k}`: coefficients of the linear sufficient statistics `T_ij(s) = a_ij·s_i`.
//!
//! With base measure `exp(-s_i²/2)` the conditional prior is exactly
//! `N(μ, I)` where `μ_i = Σ_j a_ij λ_ij`, so its normalizer is analytic.
//! `context` is the mean of `concat(x⁺, x_label)` over the current
//! batch-task while training, and over the whole dataset when scoring.
//!
//! The training objective per batch-task is
//!
//! ```text
//! mean_b [ ‖x⁺ − f(s, x_label)‖² / (2σ²) + KL(q ‖ prior) ] + α Σ_{i≠j} (A_i · A_j)²
//! ```
//!
//! where the penalty sums over ordered column pairs, so two identical unit
//! columns contribute 2.

use ndcore::{Activation, Adam, Bundle, Mlp, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{config_err, numerical, Error, Result};
use crate::rngs;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElboConfig {
    pub alpha: f64,
    pub decoder_sigma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_task_size: usize,
    pub seed: u64,
    /// Latent dimension.
    pub n: usize,
    /// Sufficient statistics per latent coordinate.
    pub k: usize,
    pub hidden: Vec<usize>,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            decoder_sigma: 1.0,
            lr: 1e-3,
            epochs: 100,
            batch_task_size: 64,
            seed: 0,
            n: 4,
            k: 2,
            hidden: vec![64, 64],
        }
    }
}

impl ElboConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(config_err("alpha must be finite and non-negative"));
        }
        if !(self.decoder_sigma > 0.0) {
            return Err(config_err("decoder_sigma must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(config_err("lr must be positive"));
        }
        if self.n == 0 || self.k == 0 {
            return Err(config_err("n and k must be positive"));
        }
        if self.batch_task_size < 2 {
            return Err(config_err("batch_task_size must be at least 2"));
        }
        Ok(())
    }
}

/// Diagonal Gaussian `q(s | x⁺, x_label)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl Posterior {
    /// `mean + exp(log_variance / 2) ⊙ z`.
    pub fn reparam(&self, z: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_variance)
            .zip(z)
            .map(|((m, lv), z)| m + (0.5 * lv).exp() * z)
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.mean.len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        self.reparam(&z)
    }
}

/// `½ Σ_i [exp(lv_i) + (m_i − μ_i)² − 1 − lv_i]`: KL from `N(m, diag(e^lv))` to `N(μ, I)`.
pub fn kl_term(post: &Posterior, prior_mu: &[f64]) -> f64 {
    0.5 * post
        .mean
        .iter()
        .zip(&post.log_variance)
        .zip(prior_mu)
        .map(|((m, lv), mu)| lv.exp() + (m - mu).powi(2) - 1.0 - lv)
        .sum::<f64>()
}

/// `Σ_{i≠j} (A_{·i} · A_{·j})²` over ordered pairs of columns.
pub fn ortho_penalty(a: &Tensor) -> f64 {
    let gram = a.matmul_tn(a).expect("A^T A is always defined");
    let k = gram.rows();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                total += gram.get(i, j).powi(2);
            }
        }
    }
    total
}

/// `μ_i = Σ_j a_ij λ_ij` for one row of natural parameters.
pub fn prior_mean_from(a: &Tensor, lambda: &[f64]) -> Vec<f64> {
    let (n, k) = (a.rows(), a.cols());
    (0..n)
        .map(|i| (0..k).map(|j| a.get(i, j) * lambda[i * k + j]).sum())
        .collect()
}

/// Log density of coordinate `i` of the conditional prior, written in
/// exponential-family form: `−s²/2 + Σ_j a_ij λ_ij s − log K`, with
/// `log K = ½ log 2π + μ_i²/2`.
pub fn prior_log_density_coord(s: f64, a_row: &[f64], lambda_row: &[f64]) -> f64 {
    let eta: f64 = a_row.iter().zip(lambda_row).map(|(a, l)| a * l).sum();
    let log_k = 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * eta * eta;
    -0.5 * s * s + eta * s - log_k
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorModel {
    /// `n × k`.
    pub a: Tensor,
    pub g: Mlp,
}

impl PriorModel {
    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn k(&self) -> usize {
        self.a.cols()
    }

    /// Natural parameters for every row of `x_label` under one context row.
    pub fn lambda(&self, x_label: &Tensor, context: &Tensor) -> Result<Tensor> {
        let rows = x_label.rows();
        let input = context.repeat_rows(rows).concat_cols(x_label)?;
        let lam = self.g.forward(&input)?;
        if !lam.is_finite() {
            return Err(numerical("prior network output"));
        }
        Ok(lam)
    }

    /// Prior means, `rows × n`.
    pub fn prior_mean(&self, x_label: &Tensor, context: &Tensor) -> Result<Tensor> {
        let lam = self.lambda(x_label, context)?;
        let (n, rows) = (self.n(), lam.rows());
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            out.extend(prior_mean_from(&self.a, lam.row_slice(r)));
        }
        Ok(Tensor::matrix(rows, n, out))
    }
}

/// Breakdown of one ELBO evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rlvm {
    pub d: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub prior: PriorModel,
}

struct Bound {
    enc: ndcore::BoundMlp,
    dec: ndcore::BoundMlp,
    g: ndcore::BoundMlp,
    a: Var,
}

impl Rlvm {
    pub fn new(d: usize, cfg: &ElboConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, k) = (cfg.n, cfg.k);
        let mut rng = rngs::stream(cfg.seed, "rlvm-init", 0);
        let sizes = |input: usize, output: usize| {
            let mut s = vec![input];
            s.extend(&cfg.hidden);
            s.push(output);
            s
        };
        let encoder = Mlp::new(&sizes(2 * d, 2 * n), Activation::Tanh, &mut rng);
        let decoder = Mlp::new(&sizes(n + d, d), Activation::Tanh, &mut rng);
        let g = Mlp::new(&sizes(3 * d, n * k), Activation::Tanh, &mut rng);
        let a_data = (0..n * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 * z
            })
            .collect::<Vec<f64>>();
        Ok(Self {
            d,
            encoder,
            decoder,
            prior: PriorModel {
                a: Tensor::matrix(n, k, a_data),
                g,
            },
        })
    }

    pub fn n(&self) -> usize {
        self.prior.n()
    }

    pub fn k(&self) -> usize {
        self.prior.k()
    }

    /// Parameters in a fixed order: encoder, decoder, prior network, `A`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.prior.g.params());
        p.push(&self.prior.a);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.prior.g.params_mut());
        p.push(&mut self.prior.a);
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.encoder.param_names("encoder");
        names.extend(self.decoder.param_names("decoder"));
        names.extend(self.prior.g.param_names("prior"));
        names.push("prior.A".into());
        names
    }

    /// Mean of `concat(x⁺, x_label)` over rows, as `1 × 2d`.
    pub fn context(x_plus: &Tensor, x_label: &Tensor) -> Result<Tensor> {
        Ok(x_plus.concat_cols(x_label)?.mean_rows())
    }

    /// Posterior means and clamped log-variances, each `rows × n`.
    pub fn encode(&self, x_plus: &Tensor, x_label: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = self.n();
        let h = self.encoder.forward(&x_plus.concat_cols(x_label)?)?;
        if !h.is_finite() {
            return Err(numerical("encoder output"));
        }
        let mean = h.slice_cols(0, n);
        let lv = h
            .slice_cols(n, 2 * n)
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        Ok((mean, lv))
    }

    pub fn posterior(&self, x_plus: &[f64], x_label: &[f64]) -> Result<Posterior> {
        let (m, lv) = self.encode(&Tensor::row(x_plus), &Tensor::row(x_label))?;
        Ok(Posterior {
            mean: m.into_data(),
            log_variance: lv.into_data(),
        })
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            enc: self.encoder.bind(tape),
            dec: self.decoder.bind(tape),
            g: self.prior.g.bind(tape),
            a: tape.leaf(self.prior.a.clone()),
        }
    }

    fn param_vars(b: &Bound) -> Vec<Var> {
        let mut v = b.enc.param_vars();
        v.extend(b.dec.param_vars());
        v.extend(b.g.param_vars());
        v.push(b.a);
        v
    }

    /// ELBO loss and its gradient for one batch-task, with `z` the standard
    /// normal draws used for the reparameterized `s` (one row per record).
    /// Gradients follow [`Rlvm::params`] order.
    pub fn elbo(
        &self,
        x_plus: &Tensor,
        x_label: &Tensor,
        z: &Tensor,
        cfg: &ElboConfig,
    ) -> Result<(ElboTerms, Vec<Tensor>)> {
        let rows = x_plus.rows();
        if rows == 0 {
            return Err(config_err("ELBO needs a non-empty batch"));
        }
        let n = self.n();
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xp = tape.leaf(x_plus.clone());
        let xl = tape.leaf(x_label.clone());
        let ctx = tape.leaf(Self::context(x_plus, x_label)?.repeat_rows(rows));
        let zs = tape.leaf(z.clone());

        let enc_in = tape.concat_cols(xp, xl)?;
        let h = bound.enc.forward(&mut tape, enc_in)?;
        let m = tape.slice_cols(h, 0, n)?;
        let lv_raw = tape.slice_cols(h, n, 2 * n)?;
        let lv = tape.clamp(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX);
        let half_lv = tape.scale(lv, 0.5);
        let std = tape.exp(half_lv);
        let noise = tape.mul(std, zs)?;
        let s = tape.add(m, noise)?;

        let dec_in = tape.concat_cols(s, xl)?;
        let xhat = bound.dec.forward(&mut tape, dec_in)?;
        let diff = tape.sub(xp, xhat)?;
        let sq = tape.square(diff);
        let rec_raw = tape.sum_cols(sq);
        let sigma = cfg.decoder_sigma;
        let rec_rows = tape.scale(rec_raw, 1.0 / (2.0 * sigma * sigma));

        let g_in = tape.concat_cols(ctx, xl)?;
        let lam = bound.g.forward(&mut tape, g_in)?;
        let mu = tape.block_dot(lam, bound.a)?;
        let var = tape.exp(lv);
        let dm = tape.sub(m, mu)?;
        let dm2 = tape.square(dm);
        let t = tape.add(var, dm2)?;
        let t = tape.sub(t, lv)?;
        let t = tape.add_scalar(t, -1.0);
        let kl_raw = tape.sum_cols(t);
        let kl_rows = tape.scale(kl_raw, 0.5);

        let at = tape.transpose(bound.a);
        let gram = tape.matmul(at, bound.a)?;
        let gram_sq = tape.square(gram);
        let all = tape.sum(gram_sq);
        let diag = tape.diag(gram)?;
        let diag_sq = tape.square(diag);
        let on_diag = tape.sum(diag_sq);
        let penalty = tape.sub(all, on_diag)?;

        let per_row = tape.add(rec_rows, kl_rows)?;
        let total = tape.sum(per_row);
        let data_term = tape.scale(total, 1.0 / rows as f64);
        let weighted = tape.scale(penalty, cfg.alpha);
        let loss = tape.add(data_term, weighted)?;

        let terms = ElboTerms {
            loss: tape.value(loss).item(),
            recon: tape.value(rec_rows).sum() / rows as f64,
            kl: tape.value(kl_rows).sum() / rows as f64,
            penalty: tape.value(penalty).item(),
        };
        if !terms.loss.is_finite() {
            return Err(diagnose(&tape, rec_rows, kl_rows, &terms));
        }
        let grads = tape.backward(loss)?;
        let params = self.params();
        let out = Self::param_vars(&bound)
            .into_iter()
            .zip(params)
            .map(|(v, p)| grads.get_or_zeros(v, p))
            .collect();
        Ok((terms, out))
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut b = Bundle::new();
        b.set_meta("kind", "rlvm")
            .set_meta("version", 1)
            .set_meta("d", self.d)
            .set_meta("n", self.n())
            .set_meta("k", self.k())
            .set_meta("activation", "tanh")
            .set_meta("encoder.layers", self.encoder.layers().len())
            .set_meta("decoder.layers", self.decoder.layers().len())
            .set_meta("prior.layers", self.prior.g.layers().len());
        for (name, p) in self.param_names().iter().zip(self.params()) {
            b.put_tensor(name, p)?;
        }
        Ok(b)
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        if b.meta("kind")? != "rlvm" {
            return Err(config_err("bundle does not hold an rlvm checkpoint"));
        }
        let load_mlp = |prefix: &str| -> Result<Mlp> {
            let layers: usize = b.meta_parse(&format!("{prefix}.layers"))?;
            let layers = (0..layers)
                .map(|i| {
                    Ok(ndcore::Linear {
                        weight: b.tensor(&format!("{prefix}.w{i}"))?.clone(),
                        bias: b.tensor(&format!("{prefix}.b{i}"))?.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Mlp::from_layers(layers, Activation::Tanh))
        };
        Ok(Self {
            d: b.meta_parse("d")?,
            encoder: load_mlp("encoder")?,
            decoder: load_mlp("decoder")?,
            prior: PriorModel {
                a: b.tensor("prior.A")?.clone(),
                g: load_mlp("prior")?,
            },
        })
    }

    /// One posterior draw per row; row `i` uses stream `i` under `seed`.
    pub fn posterior_draws(&self, x_plus: &Tensor, x_label: &Tensor, seed: u64) -> Result<Tensor> {
        let rows = x_plus.rows();
        let n = self.n();
        let chunk = 256;
        let starts: Vec<usize> = (0..rows).step_by(chunk).collect();
        let parts = starts
            .par_iter()
            .map(|&lo| {
                let hi = (lo + chunk).min(rows);
                let idx: Vec<usize> = (lo..hi).collect();
                let (m, lv) = self.encode(&x_plus.select_rows(&idx), &x_label.select_rows(&idx))?;
                let mut out = Vec::with_capacity(idx.len() * n);
                for (r, &i) in idx.iter().enumerate() {
                    let mut rng = rngs::stream(seed, "posterior-draw", i as u64);
                    let post = Posterior {
                        mean: m.row_slice(r).to_vec(),
                        log_variance: lv.row_slice(r).to_vec(),
                    };
                    out.extend(post.sample(&mut rng));
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::matrix(rows, n, parts.concat()))
    }
}

fn diagnose(tape: &Tape, rec_rows: Var, kl_rows: Var, terms: &ElboTerms) -> Error {
    let rec = tape.value(rec_rows).data();
    let kl = tape.value(kl_rows).data();
    for (i, (r, k)) in rec.iter().zip(kl).enumerate() {
        if !r.is_finite() {
            return numerical(format!("ELBO reconstruction term of record {i} is {r}"));
        }
        if !k.is_finite() {
            return numerical(format!("ELBO KL term of record {i} is {k}"));
        }
    }
    numerical(format!("ELBO orthogonality penalty is {}", terms.penalty))
}

/// Records grouped by environment, each group cut into consecutive tasks of
/// `size` records. A trailing group shorter than 2 records is dropped.
pub fn batch_tasks(ds: &Dataset, size: usize) -> Vec<Vec<usize>> {
    let mut env_ids: Vec<u32> = ds.records.iter().map(|r| r.env_id).collect();
    env_ids.sort_unstable();
    env_ids.dedup();
    let mut tasks = Vec::new();
    for e in env_ids {
        let idx: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.records[i].env_id == e)
            .collect();
        for chunk in idx.chunks(size) {
            if chunk.len() >= 2 {
                tasks.push(chunk.to_vec());
            }
        }
    }
    tasks
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Mean task loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub final_penalty: f64,
    pub a_full_column_rank: bool,
}

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Trains on the dataset's batch-tasks, visiting them in a fresh random order each epoch.
pub fn train_rlvm(ds: &Dataset, cfg: &ElboConfig) -> Result<(Rlvm, TrainLog)> {
    cfg.validate()?;
    let tasks = batch_tasks(ds, cfg.batch_task_size);
    if tasks.is_empty() {
        return Err(config_err(
            "dataset yields no batch-task with at least 2 records",
        ));
    }
    let mut model = Rlvm::new(ds.d, cfg)?;
    let names = model.param_names();
    let mut opt = Adam::new(cfg.lr);
    let xp_all = ds.x_plus();
    let xl_all = ds.x_label();
    let task_data: Vec<(Tensor, Tensor)> = tasks
        .iter()
        .map(|t| (xp_all.select_rows(t), xl_all.select_rows(t)))
        .collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let n = cfg.n;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        let mut rng = rngs::stream(cfg.seed, "rlvm-task-order", epoch as u64);
        shuffle(&mut order, &mut rng);
        let mut total = 0.0;
        for &t in &order {
            let (xp, xl) = &task_data[t];
            let mut zr = rngs::stream(cfg.seed, "rlvm-noise", step);
            step += 1;
            let z = Tensor::matrix(
                xp.rows(),
                n,
                (0..xp.rows() * n)
                    .map(|_| StandardNormal.sample(&mut zr))
                    .collect(),
            );
            let (terms, grads) = model.elbo(xp, xl, &z, cfg).map_err(|e| match e {
                Error::Numerical { context } => {
                    numerical(format!("epoch {epoch}, task {t}: {context}"))
                }
                other => other,
            })?;
            if terms.loss > DIVERGENCE_LIMIT {
                return Err(Error::Divergence {
                    epoch,
                    loss: terms.loss,
                });
            }
            total += terms.loss;
            opt.step(&mut model.params_mut(), &grads, &names)?;
        }
        epoch_loss.push(total / tasks.len() as f64);
    }
    let log = TrainLog {
        epoch_loss,
        final_penalty: ortho_penalty(&model.prior.a),
        a_full_column_rank: full_column_rank(&model.prior.a),
    };
    Ok((model, log))
}

/// Fisher-Yates with the crate's generators.
pub fn shuffle<T, R: Rng + ?Sized>(v: &mut [T], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

pub fn full_column_rank(a: &Tensor) -> bool {
    let m = nalgebra::DMatrix::from_row_slice(a.rows(), a.cols(), a.data());
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    sv.len() == a.cols() && sv.iter().all(|s| *s > 1e-8 * max.max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        let post = Posterior {
            mean: vec![1.0],
            log_variance: vec![4f64.ln()],
        };
        assert!((kl_term(&post, &[1.0]) - 0.5 * (4.0 - 1.0 - 4f64.ln())).abs() < 1e-15);
        let same = Posterior {
            mean: vec![0.3, -1.0],
            log_variance: vec![0.0, 0.0],
        };
        assert_eq!(kl_term(&same, &[0.3, -1.0]), 0.0);
        assert!((kl_term(&same, &[1.3, 1.0]) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn penalty_counting_convention() {
        let a = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ortho_penalty(&a), 2.0);
        assert_eq!(ortho_penalty(&Tensor::identity(3)), 0.0);
        let b = Tensor::matrix(2, 2, vec![1.0, 0.5, 0.2, -0.7]);
        let b3 = b.map(|v| 3.0 * v);
        assert!((ortho_penalty(&b3) - 81.0 * ortho_penalty(&b)).abs() < 1e-12);
    }

    #[test]
    fn zero_a_gives_standard_normal_prior() {
        let cfg = ElboConfig {
            hidden: vec![8],
            ..ElboConfig::default()
        };
        let mut m = Rlvm::new(3, &cfg).unwrap();
        m.prior.a = Tensor::zeros(4, 2);
        let xl = Tensor::matrix(2, 3, vec![0.5, 1.0, -1.0, 2.0, 0.0, 0.1]);
        let ctx = Tensor::zeros(1, 6);
        assert!(m
            .prior
            .prior_mean(&xl, &ctx)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ElboConfig {
            hidden: vec![5],
            ..ElboConfig::default()
        };
        let m = Rlvm::new(3, &cfg).unwrap();
        let b = Bundle::from_reader(m.to_bundle().unwrap().to_bytes().as_slice()).unwrap();
        assert_eq!(Rlvm::from_bundle(&b).unwrap(), m);
    }
}
