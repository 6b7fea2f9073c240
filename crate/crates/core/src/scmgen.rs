//! Synthetic data from the structural causal model
//! `x⁺ = F(s, x_label) + ε`.
//!
//! A [`Scm`] holds the per-seed constants (mixing matrix, class embeddings,
//! spurious directions, colour prototypes) and generates [`PairRecord`]s.
//! Each record is drawn from its own random stream keyed by the record index,
//! so datasets are identical for any thread count.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rngs;

/// One environment (batch-task family) with its own `p(s | label)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub env_id: u32,
    /// Probability that `s` is aligned with the record's class.
    pub p_sc: f64,
    /// Offset added to the conditional mean of `s`.
    #[serde(default)]
    pub style_shift: Option<Vec<f64>>,
}

impl Environment {
    pub fn new(env_id: u32, p_sc: f64) -> Result<Self> {
        let env = Self {
            env_id,
            p_sc,
            style_shift: None,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_sc > 0.0 && self.p_sc < 1.0) {
            return Err(config_err(format!(
                "environment {}: p_sc must lie in (0, 1), got {}",
                self.env_id, self.p_sc
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub x_plus: Vec<f64>,
    pub x_label: Vec<f64>,
    pub s_true: Option<Vec<f64>>,
    pub env_id: u32,
    pub class_id: u32,
    /// Class whose spurious mean (or colour) `s` was drawn around, when that is discrete.
    pub s_class: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mixing {
    LinearInvertible,
    ColoredCompositor,
}

/// How `s` depends on the class and environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpuriousModel {
    /// `s ~ N(scale·u_a, sigma²·I)` where `a` is the record's class with
    /// probability `p_sc` and a uniformly chosen other class otherwise.
    /// `sigma = 0` gives a discrete `s`.
    Aligned { scale: f64, sigma: f64 },
    /// `s ~ N(A λ(class, env), I)` with `A` of shape `n × k`. The means are
    /// centred across environments within each class.
    ExpFamily {
        k: usize,
        lambda_scale: f64,
        num_envs: usize,
    },
}

impl Default for SpuriousModel {
    fn default() -> Self {
        SpuriousModel::Aligned {
            scale: 2.0,
            sigma: 1.0,
        }
    }
}

/// Shape of the colour-compositor surrogate. The first `d - n` coordinates
/// carry a class shape code, the last `n` a colour code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColoredConfig {
    /// Norm of each class prototype.
    pub shape_sep: f64,
    /// Spread of instance shapes around their prototype.
    pub instance_sigma: f64,
    pub color_intensity: f64,
    /// Extra shape noise on the positive view.
    pub view_noise: f64,
}

impl Default for ColoredConfig {
    fn default() -> Self {
        Self {
            shape_sep: 1.5,
            instance_sigma: 0.6,
            color_intensity: 2.0,
            view_noise: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmConfig {
    pub d: usize,
    pub n: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    pub mixing: Mixing,
    pub num_classes: usize,
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub spurious: SpuriousModel,
    #[serde(default)]
    pub colored: ColoredConfig,
}

impl ScmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err("num_classes must be at least 2"));
        }
        if self.n == 0 || self.d <= self.n {
            return Err(config_err(format!(
                "need d > n >= 1 so the class code has room, got d={} n={}",
                self.d, self.n
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(config_err("noise_sigma must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(config_err("label_noise must lie in [0, 1)"));
        }
        match self.spurious {
            SpuriousModel::Aligned { scale, sigma } => {
                if !(scale.is_finite() && sigma.is_finite() && sigma >= 0.0) {
                    return Err(config_err(
                        "spurious scale and sigma must be finite, sigma >= 0",
                    ));
                }
            }
            SpuriousModel::ExpFamily { k, num_envs, .. } => {
                if k == 0 || num_envs == 0 {
                    return Err(config_err(
                        "exp-family spurious model needs k >= 1 and num_envs >= 1",
                    ));
                }
                if self.mixing != Mixing::LinearInvertible {
                    return Err(config_err(
                        "exp-family spurious model requires linear-invertible mixing",
                    ));
                }
            }
        }
        if self.mixing == Mixing::ColoredCompositor && self.n < self.num_classes {
            return Err(config_err(format!(
                "colour code needs n >= num_classes, got n={} for {} classes",
                self.n, self.num_classes
            )));
        }
        Ok(())
    }
}

/// Per-seed constants of the generator.
#[derive(Debug, Clone)]
pub struct Scm {
    cfg: ScmConfig,
    /// `d × d`, only for linear-invertible mixing.
    mixing: Option<DMatrix<f64>>,
    mixing_inv: Option<DMatrix<f64>>,
    /// Class codes: embeddings (linear) or shape prototypes (colour), `d - n` wide.
    class_code: Vec<Vec<f64>>,
    /// Spurious directions per class (aligned model).
    s_dirs: Vec<Vec<f64>>,
    /// Exp-family truth: `A` row-major `n × k`, and centred means per (class, env).
    a_true: Vec<f64>,
    mu_true: Vec<Vec<Vec<f64>>>,
}

fn normals<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let v = normals(rng, len);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Class the spurious factor follows: `class` with probability `p_sc`, else a
/// uniformly drawn different class.
fn aligned_class<R: Rng + ?Sized>(rng: &mut R, class: u32, p_sc: f64, num_classes: usize) -> u32 {
    if rng.random::<f64>() < p_sc {
        class
    } else {
        other_class(rng, class, num_classes)
    }
}

fn other_class<R: Rng + ?Sized>(rng: &mut R, class: u32, num_classes: usize) -> u32 {
    let r = rng.random_range(0..num_classes as u32 - 1);
    if r >= class {
        r + 1
    } else {
        r
    }
}

impl Scm {
    pub fn new(cfg: ScmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rngs::stream(cfg.seed, "scm-constants", 0);
        let (d, n, c) = (cfg.d, cfg.n, cfg.num_classes);
        let code_dim = d - n;

        let (mixing, mixing_inv) = if cfg.mixing == Mixing::LinearInvertible {
            let g = DMatrix::from_row_slice(d, d, &normals(&mut rng, d * d));
            let q = g.qr().q();
            let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..=2.0)).collect();
            let m = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(scales.clone()));
            let inv_scales = scales.iter().map(|s| 1.0 / s).collect();
            let m_inv =
                DMatrix::from_diagonal(&nalgebra::DVector::from_vec(inv_scales)) * q.transpose();
            (Some(m), Some(m_inv))
        } else {
            (None, None)
        };

        let class_code: Vec<Vec<f64>> = match cfg.mixing {
            Mixing::LinearInvertible => (0..c).map(|_| normals(&mut rng, code_dim)).collect(),
            Mixing::ColoredCompositor => (0..c)
                .map(|_| {
                    unit(&mut rng, code_dim)
                        .into_iter()
                        .map(|x| x * cfg.colored.shape_sep)
                        .collect()
                })
                .collect(),
        };

        let mut s_dirs = Vec::new();
        let mut a_true = Vec::new();
        let mut mu_true = Vec::new();
        match cfg.spurious {
            SpuriousModel::Aligned { scale, .. } => {
                let first = unit(&mut rng, n);
                s_dirs.push(first.iter().map(|x| x * scale).collect::<Vec<_>>());
                if c == 2 {
                    // Antipodal means keep the binary case symmetric.
                    s_dirs.push(first.iter().map(|x| -x * scale).collect());
                } else {
                    for _ in 1..c {
                        s_dirs.push(unit(&mut rng, n).into_iter().map(|x| x * scale).collect());
                    }
                }
            }
            SpuriousModel::ExpFamily {
                k,
                lambda_scale,
                num_envs,
            } => {
                a_true = normals(&mut rng, n * k);
                for _ in 0..c {
                    let mut per_env: Vec<Vec<f64>> = (0..num_envs)
                        .map(|_| {
                            let lam: Vec<f64> = normals(&mut rng, n * k)
                                .iter()
                                .map(|x| x * lambda_scale)
                                .collect();
                            (0..n)
                                .map(|i| (0..k).map(|j| a_true[i * k + j] * lam[i * k + j]).sum())
                                .collect()
                        })
                        .collect();
                    // A label-only shift of the prior is invisible to the model
                    // (the decoder also sees the label), so the truth keeps none.
                    for i in 0..n {
                        let mean = per_env.iter().map(|m| m[i]).sum::<f64>() / num_envs as f64;
                        per_env.iter_mut().for_each(|m| m[i] -= mean);
                    }
                    mu_true.push(per_env);
                }
            }
        }

        Ok(Self {
            cfg,
            mixing,
            mixing_inv,
            class_code,
            s_dirs,
            a_true,
            mu_true,
        })
    }

    pub fn config(&self) -> &ScmConfig {
        &self.cfg
    }

    /// `M⁻¹`, for linear-invertible mixing.
    pub fn mixing_inverse(&self) -> Option<&DMatrix<f64>> {
        self.mixing_inv.as_ref()
    }

    /// Ground-truth `A` (row-major `n × k`) for the exp-family model.
    pub fn a_true(&self) -> &[f64] {
        &self.a_true
    }

    /// Ground-truth prior mean of `s` for `(class, env)`, before any style shift.
    pub fn true_prior_mean(&self, class: u32, env: &Environment) -> Vec<f64> {
        match self.cfg.spurious {
            SpuriousModel::ExpFamily { .. } => {
                self.mu_true[class as usize][env.env_id as usize].clone()
            }
            SpuriousModel::Aligned { .. } => {
                // Mixture mean over the aligned class.
                let c = self.cfg.num_classes;
                let mut mu = vec![0.0; self.cfg.n];
                for (a, dir) in self.s_dirs.iter().enumerate() {
                    let w = if a as u32 == class {
                        env.p_sc
                    } else {
                        (1.0 - env.p_sc) / (c - 1) as f64
                    };
                    mu.iter_mut().zip(dir).for_each(|(m, v)| *m += w * v);
                }
                mu
            }
        }
    }

    /// Spurious mean for class `a` in the aligned model.
    pub fn s_direction(&self, a: u32) -> &[f64] {
        &self.s_dirs[a as usize]
    }

    /// The anchor: `F(0, class code)` for linear mixing, the bare prototype for colour.
    pub fn anchor(&self, class: u32) -> Vec<f64> {
        let code = &self.class_code[class as usize];
        match &self.mixing {
            Some(m) => {
                let mut z = vec![0.0; self.cfg.n];
                z.extend_from_slice(code);
                mat_vec(m, &z)
            }
            None => {
                let mut v = code.clone();
                v.resize(v.len() + self.cfg.n, 0.0);
                v
            }
        }
    }

    /// `F(s, class) = M · concat(s, code)`, for linear mixing.
    pub fn mix(&self, s: &[f64], class: u32) -> Vec<f64> {
        let m = self.mixing.as_ref().expect("linear mixing");
        let mut z = s.to_vec();
        z.extend_from_slice(&self.class_code[class as usize]);
        mat_vec(m, &z)
    }

    /// `M⁻¹ x`, returning `(s, class code)`.
    pub fn unmix(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m_inv = self.mixing_inv.as_ref().expect("linear mixing");
        let mut z = mat_vec(m_inv, x);
        let code = z.split_off(self.cfg.n);
        (z, code)
    }

    fn draw_s<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        class: u32,
        env: &Environment,
    ) -> (Vec<f64>, Option<u32>) {
        let n = self.cfg.n;
        let (mut s, s_class) = match self.cfg.spurious {
            SpuriousModel::Aligned { sigma, .. } => {
                let a = aligned_class(rng, class, env.p_sc, self.cfg.num_classes);
                let noise = normals(rng, n);
                let s: Vec<f64> = self.s_dirs[a as usize]
                    .iter()
                    .zip(noise)
                    .map(|(m, z)| m + sigma * z)
                    .collect();
                (s, Some(a))
            }
            SpuriousModel::ExpFamily { .. } => {
                let mu = &self.mu_true[class as usize][env.env_id as usize];
                let s = mu.iter().zip(normals(rng, n)).map(|(m, z)| m + z).collect();
                (s, None)
            }
        };
        if let Some(shift) = &env.style_shift {
            s.iter_mut().zip(shift).for_each(|(v, o)| *v += o);
        }
        (s, s_class)
    }

    fn check_env(&self, env: &Environment) -> Result<()> {
        env.validate()?;
        if let Some(shift) = &env.style_shift {
            if shift.len() != self.cfg.n {
                return Err(config_err(format!(
                    "style_shift has {} entries, n = {}",
                    shift.len(),
                    self.cfg.n
                )));
            }
        }
        if let SpuriousModel::ExpFamily { num_envs, .. } = self.cfg.spurious {
            if env.env_id as usize >= num_envs {
                return Err(config_err(format!(
                    "env_id {} outside the {num_envs} environments of the exp-family model",
                    env.env_id
                )));
            }
        }
        Ok(())
    }

    fn observed_label<R: Rng + ?Sized>(&self, rng: &mut R, class: u32) -> u32 {
        if self.cfg.label_noise > 0.0 && rng.random::<f64>() < self.cfg.label_noise {
            other_class(rng, class, self.cfg.num_classes)
        } else {
            class
        }
    }

    /// One record of class `class` in `env`, drawing everything from `rng`.
    pub fn gen_pair<R: Rng + ?Sized>(
        &self,
        class: u32,
        env: &Environment,
        rng: &mut R,
    ) -> Result<PairRecord> {
        if class as usize >= self.cfg.num_classes {
            return Err(config_err(format!(
                "class {class} out of range for {} classes",
                self.cfg.num_classes
            )));
        }
        self.check_env(env)?;
        Ok(self.pair_with_s_source(class, class, env, rng))
    }

    /// `s` is drawn as if the class were `s_source`; everything else uses `class`.
    fn pair_with_s_source<R: Rng + ?Sized>(
        &self,
        class: u32,
        s_source: u32,
        env: &Environment,
        rng: &mut R,
    ) -> PairRecord {
        match self.cfg.mixing {
            Mixing::LinearInvertible => {
                let (s, s_class) = self.draw_s(rng, s_source, env);
                let mut x_plus = self.mix(&s, class);
                if self.cfg.noise_sigma > 0.0 {
                    for (x, z) in x_plus.iter_mut().zip(normals(rng, self.cfg.d)) {
                        *x += self.cfg.noise_sigma * z;
                    }
                }
                let class_id = self.observed_label(rng, class);
                PairRecord {
                    x_plus,
                    x_label: self.anchor(class),
                    s_true: Some(s),
                    env_id: env.env_id,
                    class_id,
                    s_class,
                }
            }
            Mixing::ColoredCompositor => self.colored_record(class, s_source, env, rng),
        }
    }

    fn colored_record<R: Rng + ?Sized>(
        &self,
        class: u32,
        s_source: u32,
        env: &Environment,
        rng: &mut R,
    ) -> PairRecord {
        let cc = self.cfg.colored;
        let code_dim = self.cfg.d - self.cfg.n;
        let proto = &self.class_code[class as usize];
        let inst = normals(rng, code_dim);
        let view = normals(rng, code_dim);
        let color = aligned_class(rng, s_source, env.p_sc, self.cfg.num_classes);
        let class_id = self.observed_label(rng, class);

        let mut x_plus: Vec<f64> = (0..code_dim)
            .map(|i| proto[i] + cc.instance_sigma * inst[i] + cc.view_noise * view[i])
            .collect();
        let mut s = vec![0.0; self.cfg.n];
        s[color as usize] = cc.color_intensity;
        if let Some(shift) = &env.style_shift {
            s.iter_mut().zip(shift).for_each(|(v, o)| *v += o);
        }
        x_plus.extend_from_slice(&s);
        if self.cfg.noise_sigma > 0.0 {
            for (x, z) in x_plus.iter_mut().zip(normals(rng, self.cfg.d)) {
                *x += self.cfg.noise_sigma * z;
            }
        }
        PairRecord {
            x_plus,
            x_label: self.anchor(class),
            s_true: Some(s),
            env_id: env.env_id,
            class_id,
            s_class: Some(color),
        }
    }

    /// `count` records with uniformly drawn classes. Record `i` uses stream `i`
    /// of a domain named by `split` and the environment id.
    pub fn gen_records(
        &self,
        env: &Environment,
        count: usize,
        split: &str,
    ) -> Result<Vec<PairRecord>> {
        self.check_env(env)?;
        let domain = format!("records/{split}/env{}", env.env_id);
        let c = self.cfg.num_classes as u32;
        Ok((0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = rngs::stream(self.cfg.seed, &domain, i as u64);
                let class = rng.random_range(0..c);
                self.pair_with_s_source(class, class, env, &mut rng)
            })
            .collect())
    }

    /// Colour-compositor records for one environment.
    pub fn gen_colored_dataset(
        &self,
        env: &Environment,
        count: usize,
        split: &str,
    ) -> Result<Vec<PairRecord>> {
        if self.cfg.mixing != Mixing::ColoredCompositor {
            return Err(config_err(
                "gen_colored_dataset needs colored-compositor mixing",
            ));
        }
        self.gen_records(env, count, split)
    }

    /// Records whose `s` is drawn from its marginal, independently of the class.
    pub fn gen_pid_reference(
        &self,
        env: &Environment,
        count: usize,
        split: &str,
    ) -> Result<Vec<PairRecord>> {
        self.check_env(env)?;
        let domain = format!("pid-reference/{split}/env{}", env.env_id);
        let c = self.cfg.num_classes as u32;
        Ok((0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = rngs::stream(self.cfg.seed, &domain, i as u64);
                let class = rng.random_range(0..c);
                let source = rng.random_range(0..c);
                self.pair_with_s_source(class, source, env, &mut rng)
            })
            .collect())
    }
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum())
        .collect()
}

/// Exact joint `p[x⁺][label][s]` over finite supports.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    pub n_x: usize,
    pub n_label: usize,
    pub n_s: usize,
    p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(n_x: usize, n_label: usize, n_s: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != n_x * n_label * n_s {
            return Err(config_err(format!(
                "joint table needs {} cells, got {}",
                n_x * n_label * n_s,
                p.len()
            )));
        }
        if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(config_err(
                "joint table entries must be finite and non-negative",
            ));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(config_err(format!("joint table sums to {total}, not 1")));
        }
        Ok(Self {
            n_x,
            n_label,
            n_s,
            p,
        })
    }

    #[inline]
    pub fn idx(&self, x: usize, l: usize, s: usize) -> usize {
        (x * self.n_label + l) * self.n_s + s
    }

    pub fn get(&self, x: usize, l: usize, s: usize) -> f64 {
        self.p[self.idx(x, l, s)]
    }

    pub fn cells(&self) -> &[f64] {
        &self.p
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    /// `p(label, s)`, row-major `n_label × n_s`.
    pub fn label_s(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_label * self.n_s];
        for x in 0..self.n_x {
            for l in 0..self.n_label {
                for s in 0..self.n_s {
                    out[l * self.n_s + s] += self.get(x, l, s);
                }
            }
        }
        out
    }

    pub fn label_marginal(&self) -> Vec<f64> {
        let ls = self.label_s();
        (0..self.n_label)
            .map(|l| ls[l * self.n_s..(l + 1) * self.n_s].iter().sum())
            .collect()
    }

    pub fn s_marginal(&self) -> Vec<f64> {
        let ls = self.label_s();
        (0..self.n_s)
            .map(|s| (0..self.n_label).map(|l| ls[l * self.n_s + s]).sum())
            .collect()
    }

    /// `p(x⁺ | label, s)`; `None` where `p(label, s) = 0`.
    pub fn channel(&self, x: usize, l: usize, s: usize) -> Option<f64> {
        let denom = self.label_s()[l * self.n_s + s];
        (denom > 0.0).then(|| self.get(x, l, s) / denom)
    }
}

/// Discrete toy family with a binary label, a binary spurious bit aligned
/// with the label with probability `p_sc`, and an optional style component
/// that is independent of everything else.
///
/// `s` enumerates `(align bit, style)` as `align + 2·style`. `x⁺` encodes
/// `(label, align bit, style)` as `label·2 + align + 4·style`; the label and
/// align bits each pass through a binary symmetric channel with flip
/// probability `channel_noise`, the style is copied.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteToy {
    pub p_sc: f64,
    pub channel_noise: f64,
    pub style_weights: Vec<f64>,
}

impl DiscreteToy {
    pub fn new(p_sc: f64, channel_noise: f64) -> Self {
        Self {
            p_sc,
            channel_noise,
            style_weights: vec![1.0],
        }
    }

    pub fn with_style(mut self, weights: Vec<f64>) -> Self {
        self.style_weights = weights;
        self
    }

    pub fn joint(&self) -> Result<DiscreteJoint> {
        if !(self.p_sc > 0.0 && self.p_sc < 1.0) {
            return Err(config_err("p_sc must lie in (0, 1)"));
        }
        if !(0.0..0.5).contains(&self.channel_noise) {
            return Err(config_err("channel_noise must lie in [0, 0.5)"));
        }
        let wsum: f64 = self.style_weights.iter().sum();
        if self.style_weights.is_empty() || self.style_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(config_err("style weights must be positive"));
        }
        let m = self.style_weights.len();
        let (n_x, n_s) = (4 * m, 2 * m);
        let eta = self.channel_noise;
        let flip = |a: usize, b: usize| if a == b { 1.0 - eta } else { eta };
        let mut p = vec![0.0; n_x * 2 * n_s];
        for label in 0..2 {
            for align in 0..2 {
                let p_align = if align == label {
                    self.p_sc
                } else {
                    1.0 - self.p_sc
                };
                for style in 0..m {
                    let p_ls = 0.5 * p_align * self.style_weights[style] / wsum;
                    let s = align + 2 * style;
                    for xl in 0..2 {
                        for xa in 0..2 {
                            let x = xl * 2 + xa + 4 * style;
                            p[(x * 2 + label) * n_s + s] +=
                                p_ls * flip(xl, label) * flip(xa, align);
                        }
                    }
                }
            }
        }
        DiscreteJoint::new(n_x, 2, n_s, p)
    }
}

/// The 16-cell toy: binary label, binary `s`, four values of `x⁺`.
pub fn gen_discrete_toy(p_sc: f64, channel_noise: f64) -> Result<DiscreteJoint> {
    DiscreteToy::new(p_sc, channel_noise).joint()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_cfg() -> ScmConfig {
        ScmConfig {
            d: 8,
            n: 3,
            noise_sigma: 0.0,
            mixing: Mixing::LinearInvertible,
            num_classes: 2,
            label_noise: 0.0,
            seed: 11,
            spurious: SpuriousModel::default(),
            colored: ColoredConfig::default(),
        }
    }

    #[test]
    fn noiseless_linear_mixing_round_trips() {
        let scm = Scm::new(linear_cfg()).unwrap();
        let env = Environment::new(0, 0.8).unwrap();
        for r in scm.gen_records(&env, 50, "t").unwrap() {
            let (s, code) = scm.unmix(&r.x_plus);
            let s_true = r.s_true.as_ref().unwrap();
            assert!(s.iter().zip(s_true).all(|(a, b)| (a - b).abs() < 1e-9));
            let (zero, code2) = scm.unmix(&r.x_label);
            assert!(zero.iter().all(|v| v.abs() < 1e-9));
            assert!(code.iter().zip(&code2).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let mut cfg = linear_cfg();
        cfg.d = 3;
        let err = Scm::new(cfg).unwrap_err().to_string();
        assert!(err.contains("d > n"), "{err}");
        assert!(Environment::new(0, 1.0).is_err());
    }

    #[test]
    fn toy_table_is_normalized_and_noiseless_channel_is_exact() {
        let j = gen_discrete_toy(0.7, 0.0).unwrap();
        assert_eq!(j.cells().len(), 16);
        assert!((j.total() - 1.0).abs() < 1e-12);
        for x in 0..4 {
            let mass: Vec<f64> = (0..2)
                .map(|l| (0..2).map(|s| j.get(x, l, s)).sum())
                .collect();
            assert!(mass.iter().filter(|m| **m > 0.0).count() <= 1);
        }
    }
}
