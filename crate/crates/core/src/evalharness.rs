//! Linear probes, in- and out-of-distribution comparisons, spurious-content
//! probes, and the affine identifiability fit.

use nalgebra::DMatrix;
use ndcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{config_err, Error, Result};
use crate::rlvm::Rlvm;
use crate::scmgen::{Environment, Scm};
use crate::ssl::{BatchSource, SslConfig, SslEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Coefficient of `½‖W‖²` (the intercept is not penalized).
    pub l2: f64,
    /// Stop when the largest gradient entry falls below this.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            tolerance: 1e-8,
            max_iter: 200_000,
        }
    }
}

/// Multinomial logistic head on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(p + 1) × classes`, intercept in the last row.
    weights: Tensor,
    pub iterations: usize,
    pub converged: bool,
}

fn standardize(x: &Tensor, mean: &[f64], scale: &[f64]) -> Tensor {
    let (n, p) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(n, p + 1);
    for i in 0..n {
        let (src, dst) = (x.row_slice(i), out.row_slice_mut(i));
        for j in 0..p {
            dst[j] = (src[j] - mean[j]) / scale[j];
        }
        dst[p] = 1.0;
    }
    out
}

/// Mean cross-entropy plus penalty, and its gradient.
fn objective(z: &Tensor, y: &[usize], w: &Tensor, l2: f64) -> (f64, Tensor) {
    let (n, q) = (z.rows(), z.cols());
    let c = w.cols();
    let logits = z.matmul(w).expect("shapes fixed at fit time");
    let mut resid = Tensor::zeros(n, c);
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row_slice(i);
        let lse = ndcore::logsumexp(row);
        loss += lse - row[y[i]];
        let r = resid.row_slice_mut(i);
        for k in 0..c {
            r[k] = (row[k] - lse).exp() / n as f64;
        }
        r[y[i]] -= 1.0 / n as f64;
    }
    let mut grad = z.matmul_tn(&resid).expect("shapes fixed at fit time");
    let mut penalty = 0.0;
    for j in 0..q - 1 {
        for k in 0..c {
            let v = w.get(j, k);
            penalty += v * v;
            grad.set(j, k, grad.get(j, k) + l2 * v);
        }
    }
    (loss / n as f64 + 0.5 * l2 * penalty, grad)
}

fn largest_eigenvalue(z: &Tensor) -> f64 {
    let gram = z.matmul_tn(z).expect("square").map(|v| v / z.rows() as f64);
    let q = gram.rows();
    let mut v = vec![1.0 / (q as f64).sqrt(); q];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let next: Vec<f64> = (0..q)
            .map(|i| (0..q).map(|j| gram.get(i, j) * v[j]).sum())
            .collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = next.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

impl Probe {
    /// Accelerated gradient descent with restarts. The objective is strongly
    /// convex, so the optimum does not depend on the starting point.
    pub fn fit(x: &Tensor, y: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.rows() != y.len() || x.rows() == 0 {
            return Err(config_err(format!(
                "{} feature rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if !x.is_finite() {
            return Err(crate::error::numerical("probe features"));
        }
        let mut seen = vec![false; num_classes];
        for &l in y {
            *seen
                .get_mut(l)
                .ok_or_else(|| config_err(format!("label {l} >= {num_classes}")))? = true;
        }
        if seen.iter().filter(|s| **s).count() < 2 {
            return Err(config_err("probe training split has a single class"));
        }
        let (n, p) = (x.rows(), x.cols());
        let mean: Vec<f64> = (0..p)
            .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
            .collect();
        let scale: Vec<f64> = (0..p)
            .map(|j| {
                let var = (0..n).map(|i| (x.get(i, j) - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let z = standardize(x, &mean, &scale);
        let step = 1.0 / (0.5 * largest_eigenvalue(&z) * 1.05 + cfg.l2);
        let mut w = Tensor::zeros(p + 1, num_classes);
        let mut prev = w.clone();
        let (mut f_prev, _) = objective(&z, y, &w, cfg.l2);
        let mut t = 1.0f64;
        let mut converged = false;
        let mut it = 0;
        while it < cfg.max_iter {
            it += 1;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            let look = w.zip_map(&prev, |a, b| a + beta * (a - b));
            let (_, g) = objective(&z, y, &look, cfg.l2);
            let cand = look.zip_map(&g, |a, b| a - step * b);
            let (f_cand, g_cand) = objective(&z, y, &cand, cfg.l2);
            if f_cand > f_prev {
                // Momentum overshot: restart from the current iterate.
                t = 1.0;
                let (_, g_w) = objective(&z, y, &w, cfg.l2);
                prev = w.clone();
                w = w.zip_map(&g_w, |a, b| a - step * b);
                let (f_w, g_new) = objective(&z, y, &w, cfg.l2);
                f_prev = f_w;
                if g_new.data().iter().all(|v| v.abs() < cfg.tolerance) {
                    converged = true;
                    break;
                }
                continue;
            }
            prev = w;
            w = cand;
            f_prev = f_cand;
            t = t_next;
            if g_cand.data().iter().all(|v| v.abs() < cfg.tolerance) {
                converged = true;
                break;
            }
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
            iterations: it,
            converged,
        })
    }

    /// Class probabilities, one row per input row.
    pub fn probabilities(&self, x: &Tensor) -> Tensor {
        let mut logits = standardize(x, &self.mean, &self.scale)
            .matmul(&self.weights)
            .expect("probe input width matches training");
        for i in 0..logits.rows() {
            let row = logits.row_slice_mut(i);
            let lse = ndcore::logsumexp(row);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        logits
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let logits = standardize(x, &self.mean, &self.scale)
            .matmul(&self.weights)
            .expect("probe input width matches training");
        (0..logits.rows())
            .map(|i| {
                let row = logits.row_slice(i);
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect()
    }

    pub fn accuracy(&self, x: &Tensor, y: &[usize]) -> f64 {
        let pred = self.predict(x);
        pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
    }
}

/// Fits on one split and reports accuracy on another.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if test_x.cols() != train_x.cols() {
        return Err(config_err("probe splits have different feature widths"));
    }
    let probe = Probe::fit(train_x, train_y, num_classes, cfg)?;
    if !probe.converged {
        return Err(crate::error::numerical(format!(
            "probe did not reach tolerance {} in {} iterations",
            cfg.tolerance, probe.iterations
        )));
    }
    Ok(probe.accuracy(test_x, test_y))
}

/// Frozen features of a dataset's positive views.
#[derive(Debug, Clone, Copy)]
pub enum Features<'a> {
    Raw,
    Encoder(&'a SslEncoder),
}

impl Features<'_> {
    pub fn of(&self, ds: &Dataset) -> Result<Tensor> {
        match self {
            Features::Raw => Ok(ds.x_plus()),
            Features::Encoder(e) => e.embed(&ds.x_plus()),
        }
    }
}

/// Labelled splits for probing: a training split and two test splits.
#[derive(Debug, Clone)]
pub struct ProbeSplits {
    pub train: Dataset,
    pub id_test: Dataset,
    pub ood_test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub arm: String,
    pub id_accuracy: f64,
    pub ood_accuracy: f64,
    /// Accuracy of predicting the spurious category from the features.
    pub spurious_accuracy: f64,
}

/// Class probe (ID and OOD) and spurious probe for one feature map.
pub fn evaluate_features(
    arm: &str,
    features: Features<'_>,
    splits: &ProbeSplits,
    cfg: &ProbeConfig,
) -> Result<ArmMetrics> {
    let k = splits.train.num_classes;
    let tr = features.of(&splits.train)?;
    let probe = Probe::fit(&tr, &splits.train.class_ids(), k, cfg)?;
    let id_accuracy = probe.accuracy(&features.of(&splits.id_test)?, &splits.id_test.class_ids());
    let ood_accuracy = probe.accuracy(
        &features.of(&splits.ood_test)?,
        &splits.ood_test.class_ids(),
    );
    Ok(ArmMetrics {
        arm: arm.to_string(),
        id_accuracy,
        ood_accuracy,
        spurious_accuracy: spurious_probe(features, &splits.train, &splits.id_test, cfg)?,
    })
}

/// Linear probe that predicts the spurious category from frozen features.
pub fn spurious_probe(
    features: Features<'_>,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let ys = |ds: &Dataset| -> Result<Vec<usize>> {
        ds.s_classes()
            .ok_or_else(|| config_err("spurious probe needs a discrete s on every record"))
    };
    let (ytr, yte) = (ys(train)?, ys(test)?);
    let k = ytr.iter().chain(&yte).max().map_or(0, |m| m + 1);
    linear_probe(
        &features.of(train)?,
        &ytr,
        &features.of(test)?,
        &yte,
        k,
        cfg,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub dataset_hash: String,
    pub seed: u64,
    pub arms: Vec<ArmMetrics>,
    /// `OOD(pid) − OOD(random)` in accuracy points.
    pub ood_gain: f64,
    /// `ID(random) − ID(pid)` in accuracy points.
    pub id_drop: f64,
}

impl OodReport {
    pub fn arm(&self, name: &str) -> Option<&ArmMetrics> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

/// Compares two encoders whose configurations differ only in batch source.
pub fn ood_comparison(
    random: (&SslEncoder, &SslConfig),
    pid: (&SslEncoder, &SslConfig),
    splits: &ProbeSplits,
    dataset_hash: &str,
    cfg: &ProbeConfig,
) -> Result<OodReport> {
    if random.1.batch_source != BatchSource::Random || pid.1.batch_source != BatchSource::Pid {
        return Err(config_err(
            "ood_comparison expects a random arm and a pid arm",
        ));
    }
    if random.1.with_source(BatchSource::Pid) != *pid.1 {
        return Err(Error::Mismatch {
            what: "arm configuration (everything but batch_source)".into(),
            expected: format!("{:?}", random.1.with_source(BatchSource::Pid)),
            found: format!("{:?}", pid.1),
        });
    }
    let r = evaluate_features("random", Features::Encoder(random.0), splits, cfg)?;
    let p = evaluate_features("pid", Features::Encoder(pid.0), splits, cfg)?;
    Ok(OodReport {
        dataset_hash: dataset_hash.to_string(),
        seed: random.1.seed,
        ood_gain: 100.0 * (p.ood_accuracy - r.ood_accuracy),
        id_drop: 100.0 * (r.id_accuracy - p.id_accuracy),
        arms: vec![r, p],
    })
}

/// `R²` of the best affine map from `x` (`N × p`) to `y` (`N × q`), pooled
/// over all output coordinates.
pub fn affine_r2(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, p, q) = (x.rows(), x.cols(), y.cols());
    if y.rows() != n {
        return Err(config_err("affine fit needs equal row counts"));
    }
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j < p { x.get(i, j) } else { 1.0 });
    let target = DMatrix::from_fn(n, q, |i, j| y.get(i, j));
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > smax * 1e-10)
        .count();
    if rank < p + 1 {
        return Err(Error::Unidentifiable(format!(
            "affine design has rank {rank}, needs {}",
            p + 1
        )));
    }
    let coef = svd
        .solve(&target, smax * 1e-12)
        .map_err(|e| crate::error::numerical(format!("least squares: {e}")))?;
    let resid = &target - &design * coef;
    let mut ss_tot = 0.0;
    for j in 0..q {
        let col = target.column(j);
        let m = col.mean();
        ss_tot += col.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    Ok(1.0 - resid.norm_squared() / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeldOutGrid {
    /// Fresh tasks per environment.
    pub tasks_per_env: usize,
    pub task_size: usize,
    pub seed: u64,
}

impl Default for HeldOutGrid {
    fn default() -> Self {
        Self {
            tasks_per_env: 5,
            task_size: 64,
            seed: 999,
        }
    }
}

/// Pooled `R²` of an affine fit from the model's prior means to the
/// generator's true prior means, on fresh tasks from every environment.
pub fn identifiability_report(
    model: &Rlvm,
    scm: &Scm,
    envs: &[Environment],
    grid: &HeldOutGrid,
) -> Result<f64> {
    let (n, k) = (model.n(), model.k());
    let cfg = scm.config();
    match cfg.spurious {
        crate::scmgen::SpuriousModel::ExpFamily { k: true_k, .. } if true_k == k && cfg.n == n => {}
        _ => {
            return Err(Error::Mismatch {
                what: "latent model class (n, k)".into(),
                expected: format!("exp-family with n={n}, k={k}"),
                found: format!("{:?} with n={}", cfg.spurious, cfg.n),
            })
        }
    }
    if cfg.label_noise > 0.0 {
        return Err(config_err(
            "identifiability needs label_noise = 0 so labels name the generating class",
        ));
    }
    if cfg.num_classes * envs.len() < n * k + 1 {
        return Err(Error::Unidentifiable(format!(
            "{} (label, env) pairs, need at least {}",
            cfg.num_classes * envs.len(),
            n * k + 1
        )));
    }
    let mut learned = Vec::new();
    let mut truth = Vec::new();
    for env in envs {
        for t in 0..grid.tasks_per_env {
            let recs = scm.gen_records(
                env,
                grid.task_size,
                &format!("heldout{}-task{t}", grid.seed),
            )?;
            let ds = Dataset::new(cfg.d, cfg.n, cfg.num_classes, vec![env.clone()], recs)?;
            let (xp, xl) = (ds.x_plus(), ds.x_label());
            let mu = model.prior.prior_mean(&xl, &Rlvm::context(&xp, &xl)?)?;
            learned.extend_from_slice(mu.data());
            for r in &ds.records {
                truth.extend(scm.true_prior_mean(r.class_id, env));
            }
        }
    }
    let rows = learned.len() / n;
    affine_r2(
        &Tensor::matrix(rows, n, learned),
        &Tensor::matrix(rows, n, truth),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngs;
    use rand::Rng;

    #[test]
    fn separable_labels_are_recovered() {
        let mut rng = rngs::stream(1, "probe-test", 0);
        // The label is the side of coordinate 0, with a gap of 0.2 around the boundary.
        let mut data = Vec::new();
        for _ in 0..200 {
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            data.push(side * rng.random_range(0.1..1.0));
            data.push(rng.random_range(-1.0..1.0));
        }
        let x = Tensor::matrix(200, 2, data);
        let y: Vec<usize> = (0..200).map(|i| usize::from(x.get(i, 0) > 0.0)).collect();
        let acc = linear_probe(&x, &y, &x, &y, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Tensor::zeros(4, 1);
        assert!(Probe::fit(&x, &[1, 1, 1, 1], 2, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn exact_affine_map_has_unit_r2() {
        let mut rng = rngs::stream(2, "r2-test", 0);
        let x = Tensor::matrix(
            50,
            3,
            (0..150).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let y = Tensor::matrix(
            50,
            2,
            (0..50)
                .flat_map(|i| {
                    [
                        2.0 * x.get(i, 0) - x.get(i, 2) + 1.0,
                        0.5 * x.get(i, 1) - 3.0,
                    ]
                })
                .collect(),
        );
        assert!((affine_r2(&x, &y).unwrap() - 1.0).abs() < 1e-9);
        let flat = Tensor::matrix(50, 1, vec![1.0; 50]);
        assert!(matches!(
            affine_r2(&flat, &y),
            Err(Error::Unidentifiable(_))
        ));
    }
}
