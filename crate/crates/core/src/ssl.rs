//! Contrastive and reconstruction SSL trainers on vector data.
//!
//! Both arms of a comparison share every setting except where their batches
//! come from: uniform shuffling, or a precomputed [`BatchPlan`] of matched
//! batches. Initialization and augmentation noise are keyed by the training
//! step, so the two arms see the same random draws.

use ndcore::{Activation, Adam, Bundle, Mlp, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{config_err, Error, Result};
use crate::rlvm::shuffle;
use crate::rngs;
use crate::sampler::BatchPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchSource {
    Random,
    Pid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// InfoNCE between the positive and anchor views.
    Contrastive,
    /// Reconstruct the anchor from a masked positive.
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub temperature: f64,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub mask_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_source: BatchSource,
    /// Batch size minus one.
    pub a: usize,
    pub seed: u64,
    pub objective: Objective,
    pub jitter: f64,
    pub dropout: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            embed_dim: 32,
            hidden: vec![64, 64],
            mask_fraction: 0.5,
            epochs: 30,
            lr: 1e-3,
            batch_source: BatchSource::Random,
            a: 63,
            seed: 0,
            objective: Objective::Contrastive,
            jitter: 0.1,
            dropout: 0.1,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(config_err("temperature must be positive"));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(config_err("mask_fraction must lie in (0, 1)"));
        }
        if self.a < 1 {
            return Err(config_err("a must be at least 1 (batches of two or more)"));
        }
        if self.embed_dim == 0 {
            return Err(config_err("embed_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.jitter >= 0.0) {
            return Err(config_err(
                "dropout must lie in [0, 1) and jitter must be non-negative",
            ));
        }
        Ok(())
    }

    /// The same configuration with a different batch source.
    pub fn with_source(&self, source: BatchSource) -> Self {
        Self {
            batch_source: source,
            ..self.clone()
        }
    }
}

/// Encoder plus projection head (and a decoder for the reconstruction objective).
#[derive(Debug, Clone, PartialEq)]
pub struct SslEncoder {
    pub encoder: Mlp,
    /// Applied to `tanh(embedding)`.
    pub head: Mlp,
    pub decoder: Mlp,
}

impl SslEncoder {
    pub fn new(d: usize, cfg: &SslConfig) -> Self {
        let mut rng = rngs::stream(cfg.seed, "ssl-init", 0);
        let mut sizes = vec![d];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.embed_dim);
        let encoder = Mlp::new(&sizes, Activation::Tanh, &mut rng);
        let head = Mlp::new(
            &[cfg.embed_dim, cfg.embed_dim],
            Activation::Identity,
            &mut rng,
        );
        let decoder = Mlp::new(&[cfg.embed_dim, d], Activation::Identity, &mut rng);
        Self {
            encoder,
            head,
            decoder,
        }
    }

    /// Frozen embeddings, one row per input row.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encoder.forward(x)?;
        if !z.is_finite() {
            return Err(crate::error::numerical("encoder embedding"));
        }
        Ok(z)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p.extend(self.decoder.params());
        p
    }

    fn param_names(&self) -> Vec<String> {
        let mut n = self.encoder.param_names("encoder");
        n.extend(self.head.param_names("head"));
        n.extend(self.decoder.param_names("decoder"));
        n
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut b = Bundle::new();
        b.set_meta("kind", "ssl-encoder")
            .set_meta("version", 1)
            .set_meta("encoder.layers", self.encoder.layers().len())
            .set_meta("encoder.activation", "tanh");
        for (name, p) in self.param_names().iter().zip(self.params()) {
            b.put_tensor(name, p)?;
        }
        Ok(b)
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        if b.meta("kind")? != "ssl-encoder" {
            return Err(config_err("bundle does not hold an SSL encoder"));
        }
        let layer = |prefix: &str, i: usize| -> Result<ndcore::Linear> {
            Ok(ndcore::Linear {
                weight: b.tensor(&format!("{prefix}.w{i}"))?.clone(),
                bias: b.tensor(&format!("{prefix}.b{i}"))?.clone(),
            })
        };
        let n_enc: usize = b.meta_parse("encoder.layers")?;
        let enc = (0..n_enc)
            .map(|i| layer("encoder", i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder: Mlp::from_layers(enc, Activation::Tanh),
            head: Mlp::from_layers(vec![layer("head", 0)?], Activation::Identity),
            decoder: Mlp::from_layers(vec![layer("decoder", 0)?], Activation::Identity),
        })
    }
}

/// Mean over rows of `−log softmax_j(cos(z⁺_i, z^a_j)/τ)[i]`, for unit rows.
///
/// ```
/// use ndcore::Tensor;
/// use pidssl::ssl::info_nce_loss;
///
/// // Matching first pair, orthogonal second anchor, τ = 1.
/// let zp = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
/// let za = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
/// let per_row = pidssl::ssl::info_nce_rows(&zp, &za, 1.0).unwrap();
/// assert!((per_row[0] - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
/// # let _ = info_nce_loss(&zp, &za, 1.0).unwrap();
/// ```
pub fn info_nce_loss(z_pos: &Tensor, z_anchor: &Tensor, tau: f64) -> Result<f64> {
    let rows = info_nce_rows(z_pos, z_anchor, tau)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Per-row terms of [`info_nce_loss`].
pub fn info_nce_rows(z_pos: &Tensor, z_anchor: &Tensor, tau: f64) -> Result<Vec<f64>> {
    let b = z_pos.rows();
    if b < 2 || z_anchor.rows() != b {
        return Err(config_err(format!(
            "InfoNCE needs B >= 2 equal-sized views, got {} and {}",
            b,
            z_anchor.rows()
        )));
    }
    let logits = z_pos.matmul_nt(z_anchor)?.map(|v| v / tau);
    Ok((0..b)
        .map(|i| ndcore::logsumexp(logits.row_slice(i)) - logits.get(i, i))
        .collect())
}

/// `⌈fraction · d⌉` distinct coordinates, drawn without replacement.
pub fn mask_coords<R: Rng + ?Sized>(d: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    let count = ((fraction * d as f64).ceil() as usize).min(d);
    let mut idx: Vec<usize> = (0..d).collect();
    for i in 0..count {
        let j = rng.random_range(i..d);
        idx.swap(i, j);
    }
    let mut out = idx[..count].to_vec();
    out.sort_unstable();
    out
}

/// Zeroes the masked columns.
pub fn apply_mask(x: &Tensor, coords: &[usize]) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        for &c in coords {
            row[c] = 0.0;
        }
    }
    out
}

/// Mean squared error of reconstructing `x_label` from masked `x_plus`.
pub fn recon_loss(
    model: &SslEncoder,
    x_plus: &Tensor,
    x_label: &Tensor,
    coords: &[usize],
) -> Result<f64> {
    let z = model.embed(&apply_mask(x_plus, coords))?;
    let xhat = model.decoder.forward(&z)?;
    let se: f64 = xhat
        .data()
        .iter()
        .zip(x_label.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(se / x_label.len() as f64)
}

/// Gaussian jitter plus random coordinate dropout.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, jitter: f64, dropout: f64, rng: &mut R) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        let keep = rng.random::<f64>() >= dropout;
        *v = if keep { *v + jitter * z } else { 0.0 };
    }
    out
}

fn project(
    tape: &mut Tape,
    enc: &ndcore::BoundMlp,
    head: &ndcore::BoundMlp,
    x: Var,
) -> Result<Var> {
    let h = enc.forward(tape, x)?;
    let h = tape.tanh(h);
    let p = head.forward(tape, h)?;
    Ok(tape.normalize_rows(p))
}

/// Loss and gradients (in parameter order) for one batch of views.
fn batch_step(
    model: &SslEncoder,
    xp: &Tensor,
    xl: &Tensor,
    coords: &[usize],
    cfg: &SslConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let enc = model.encoder.bind(&mut tape);
    let head = model.head.bind(&mut tape);
    let dec = model.decoder.bind(&mut tape);
    let loss = match cfg.objective {
        Objective::Contrastive => {
            let p = tape.leaf(xp.clone());
            let a = tape.leaf(xl.clone());
            let zp = project(&mut tape, &enc, &head, p)?;
            let za = project(&mut tape, &enc, &head, a)?;
            let sim = tape.matmul_nt(zp, za)?;
            let logits = tape.scale(sim, 1.0 / cfg.temperature);
            let lse = tape.logsumexp_rows(logits);
            let diag = tape.diag(logits)?;
            let per = tape.sub(lse, diag)?;
            tape.mean(per)
        }
        Objective::Reconstruction => {
            let p = tape.leaf(apply_mask(xp, coords));
            let target = tape.leaf(xl.clone());
            let z = enc.forward(&mut tape, p)?;
            let xhat = dec.forward(&mut tape, z)?;
            let diff = tape.sub(xhat, target)?;
            let sq = tape.square(diff);
            tape.mean(sq)
        }
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(crate::error::numerical("SSL batch loss"));
    }
    let grads = tape.backward(loss)?;
    let mut vars = enc.param_vars();
    vars.extend(head.param_vars());
    vars.extend(dec.param_vars());
    let out = vars
        .into_iter()
        .zip(model.params())
        .map(|(v, p)| grads.get_or_zeros(v, p))
        .collect();
    Ok((value, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslLog {
    pub epoch_loss: Vec<f64>,
    /// Pairs consumed per epoch (full batches only).
    pub epoch_pairs: Vec<usize>,
}

/// Trains one arm. The `pid` arm needs a plan made for this dataset.
pub fn train_ssl(
    ds: &Dataset,
    cfg: &SslConfig,
    plan: Option<&BatchPlan>,
) -> Result<(SslEncoder, SslLog)> {
    cfg.validate()?;
    let b = cfg.a + 1;
    if ds.len() < b {
        return Err(config_err(format!(
            "dataset has {} pairs, a batch needs {b}",
            ds.len()
        )));
    }
    if cfg.batch_source == BatchSource::Pid {
        let plan = plan.ok_or_else(|| config_err("the pid arm needs a batch plan"))?;
        let hash = ds.hash()?;
        if plan.dataset_hash != hash {
            return Err(Error::Mismatch {
                what: "batch plan dataset hash".into(),
                expected: hash,
                found: plan.dataset_hash.clone(),
            });
        }
        if plan.a != cfg.a {
            return Err(Error::Mismatch {
                what: "batch plan a".into(),
                expected: cfg.a.to_string(),
                found: plan.a.to_string(),
            });
        }
        if plan.epochs.is_empty() {
            return Err(config_err("batch plan holds no epochs"));
        }
    }
    let mut model = SslEncoder::new(ds.d, cfg);
    let names = model.param_names();
    let mut opt = Adam::new(cfg.lr);
    let xp_all = ds.x_plus();
    let xl_all = ds.x_label();
    let mut log = SslLog {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        epoch_pairs: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let batches: Vec<Vec<usize>> = match cfg.batch_source {
            BatchSource::Random => {
                let mut perm: Vec<usize> = (0..ds.len()).collect();
                shuffle(
                    &mut perm,
                    &mut rngs::stream(cfg.seed, "ssl-shuffle", epoch as u64),
                );
                perm.chunks_exact(b).map(<[usize]>::to_vec).collect()
            }
            BatchSource::Pid => plan
                .expect("checked above")
                .full_batches(epoch)
                .map(|mb| mb.indices.clone())
                .collect(),
        };
        let mut total = 0.0;
        let mut pairs = 0;
        for idx in &batches {
            let mut rng = rngs::stream(cfg.seed, "ssl-augment", step);
            step += 1;
            let xp = augment(&xp_all.select_rows(idx), cfg.jitter, cfg.dropout, &mut rng);
            let xl = augment(&xl_all.select_rows(idx), cfg.jitter, cfg.dropout, &mut rng);
            let coords = mask_coords(ds.d, cfg.mask_fraction, &mut rng);
            let (loss, grads) = batch_step(&model, &xp, &xl, &coords, cfg)?;
            opt.step(&mut model.params_mut(), &grads, &names)?;
            total += loss;
            pairs += idx.len();
        }
        log.epoch_loss.push(total / batches.len().max(1) as f64);
        log.epoch_pairs.push(pairs);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_anchors_give_log_b() {
        let zp = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]);
        let za = Tensor::matrix(3, 2, vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8]);
        let l = info_nce_loss(&zp, &za, 0.5).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!(info_nce_loss(&Tensor::zeros(1, 2), &Tensor::zeros(1, 2), 1.0).is_err());
    }

    #[test]
    fn mask_size_is_ceiling() {
        let mut rng = rngs::stream(0, "t", 0);
        let m = mask_coords(11, 0.3, &mut rng);
        assert_eq!(m.len(), 4);
        let mut dedup = m.clone();
        dedup.dedup();
        assert_eq!(dedup, m);
        let x = Tensor::filled(2, 11, 1.0);
        let masked = apply_mask(&x, &m);
        for c in 0..11 {
            let expect = if m.contains(&c) { 0.0 } else { 1.0 };
            assert_eq!(masked.get(1, c), expect);
        }
    }
}
