//! End-to-end runs: the colored OOD comparison, the identifiability check
//! and the sweeps built on them.
//!
//! Every run derives all of its random streams from one experiment seed, so
//! a run is a pure function of its configuration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ndcore::Tensor;

use crate::dataset::Dataset;
use crate::error::{config_err, Result};
use crate::evalharness::{
    evaluate_features, identifiability_report, ood_comparison, ArmMetrics, Features, HeldOutGrid,
    OodReport, ProbeConfig, ProbeSplits,
};
use crate::oracle::{batch_pid_check, SpuriousValues};
use crate::rlvm::{train_rlvm, ElboConfig, Rlvm, TrainLog};
use crate::rngs;
use crate::sampler::{build_pool, plan_epochs, sample_batch, BatchPlan, MatchPool, MatchTarget};
use crate::scmgen::{ColoredConfig, Environment, Mixing, Scm, ScmConfig, SpuriousModel};
use crate::ssl::{train_ssl, BatchSource, SslConfig, SslEncoder, SslLog};

/// Two-class colored data, one training environment and one flipped test environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColoredExperiment {
    pub seed: u64,
    pub shape_dim: usize,
    pub colors: usize,
    pub label_noise: f64,
    pub colored: ColoredConfig,
    /// Colour/class alignment in the training and ID splits.
    pub p_train: f64,
    /// Colour/class alignment in the OOD split.
    pub p_ood: f64,
    pub ssl_pairs: usize,
    pub probe_train: usize,
    pub id_test: usize,
    pub ood_test: usize,
    pub rlvm: ElboConfig,
    pub ssl: SslConfig,
    pub probe: ProbeConfig,
    pub target: MatchTarget,
}

impl Default for ColoredExperiment {
    fn default() -> Self {
        Self {
            seed: 1,
            shape_dim: 8,
            colors: 3,
            label_noise: 0.1,
            colored: ColoredConfig::default(),
            p_train: 0.775,
            p_ood: 0.225,
            ssl_pairs: 4096,
            probe_train: 5000,
            id_test: 10_000,
            ood_test: 10_000,
            rlvm: ElboConfig {
                n: 11,
                k: 2,
                epochs: 40,
                decoder_sigma: 0.5,
                ..ElboConfig::default()
            },
            ssl: SslConfig {
                embed_dim: 2,
                ..SslConfig::default()
            },
            probe: ProbeConfig::default(),
            target: MatchTarget::Seed,
        }
    }
}

/// Everything a colored run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoredOutcome {
    pub report: OodReport,
    /// Probe on the raw positive views.
    pub raw: ArmMetrics,
    /// Mean within-batch MI between label and colour, first planned epoch.
    pub pid_batch_mi: f64,
    /// The same for uniformly shuffled batches of the same size.
    pub random_batch_mi: f64,
}

impl ColoredExperiment {
    pub fn validate(&self) -> Result<()> {
        if self.colors < 2 {
            return Err(config_err("colored experiment needs at least 2 colours"));
        }
        self.scm_config(self.colored).validate()?;
        Environment::new(0, self.p_train)?;
        Environment::new(1, self.p_ood)?;
        self.ssl.validate()?;
        self.rlvm.validate()
    }

    fn scm_config(&self, colored: ColoredConfig) -> ScmConfig {
        ScmConfig {
            d: self.shape_dim + self.colors,
            n: self.colors,
            noise_sigma: 0.0,
            mixing: Mixing::ColoredCompositor,
            num_classes: 2,
            label_noise: self.label_noise,
            seed: self.seed,
            spurious: SpuriousModel::default(),
            colored,
        }
    }

    /// Component configurations with their seeds tied to the experiment seed.
    pub fn seeded(&self) -> (ElboConfig, SslConfig) {
        let rlvm = ElboConfig {
            seed: rngs::derive_seed(self.seed, "experiment-rlvm", 0),
            ..self.rlvm.clone()
        };
        let ssl = SslConfig {
            seed: rngs::derive_seed(self.seed, "experiment-ssl", 0),
            ..self.ssl.clone()
        };
        (rlvm, ssl)
    }

    /// The SSL training set (noisy positive views).
    pub fn ssl_dataset(&self) -> Result<Dataset> {
        let scm = Scm::new(self.scm_config(self.colored))?;
        let env = Environment::new(0, self.p_train)?;
        let recs = scm.gen_colored_dataset(&env, self.ssl_pairs, "ssl")?;
        Dataset::new(scm.config().d, self.colors, 2, vec![env], recs)
    }

    /// Probe splits of clean records: no view noise, labels still noisy.
    pub fn probe_splits(&self) -> Result<ProbeSplits> {
        let clean = Scm::new(self.scm_config(ColoredConfig {
            view_noise: 0.0,
            ..self.colored
        }))?;
        let id_env = Environment::new(0, self.p_train)?;
        let ood_env = Environment::new(1, self.p_ood)?;
        let d = clean.config().d;
        let make = |env: &Environment, count: usize, split: &str| -> Result<Dataset> {
            Dataset::new(
                d,
                self.colors,
                2,
                vec![env.clone()],
                clean.gen_colored_dataset(env, count, split)?,
            )
        };
        Ok(ProbeSplits {
            train: make(&id_env, self.probe_train, "probe-train")?,
            id_test: make(&id_env, self.id_test, "id-test")?,
            ood_test: make(&ood_env, self.ood_test, "ood-test")?,
        })
    }

    /// Trains the latent model on the SSL training set.
    pub fn train_latent(&self, ds: &Dataset) -> Result<(Rlvm, TrainLog)> {
        train_rlvm(ds, &self.seeded().0)
    }

    /// Scores the pool with a trained model and plans one matched partition per SSL epoch.
    pub fn plan_from(&self, ds: &Dataset, model: &Rlvm) -> Result<BatchPlan> {
        let ssl = &self.ssl;
        let mut pool = build_pool(
            ds,
            model,
            rngs::derive_seed(self.seed, "experiment-pool", 0),
        )?;
        plan_epochs(
            &mut pool,
            ssl.a,
            ssl.epochs.max(1),
            rngs::derive_seed(self.seed, "experiment-plan", 0),
            self.target,
            &ds.hash()?,
        )
    }

    /// Trains one arm; the pid arm needs the plan.
    pub fn train_arm(
        &self,
        ds: &Dataset,
        source: BatchSource,
        plan: Option<&BatchPlan>,
    ) -> Result<(SslEncoder, SslLog)> {
        let cfg = self.seeded().1.with_source(source);
        train_ssl(ds, &cfg, plan)
    }

    /// Probes both encoders and the raw views, and measures within-batch MI.
    pub fn evaluate(
        &self,
        ds: &Dataset,
        splits: &ProbeSplits,
        plan: &BatchPlan,
        random: &SslEncoder,
        pid: &SslEncoder,
    ) -> Result<ColoredOutcome> {
        let ssl_cfg = self.seeded().1;
        let random_cfg = ssl_cfg.with_source(BatchSource::Random);
        let pid_cfg = ssl_cfg.with_source(BatchSource::Pid);
        let report = ood_comparison(
            (random, &random_cfg),
            (pid, &pid_cfg),
            splits,
            &ds.hash()?,
            &self.probe,
        )?;
        let raw = evaluate_features("raw", Features::Raw, splits, &self.probe)?;

        let labels = ds.class_ids();
        let colors = ds
            .s_classes()
            .ok_or_else(|| config_err("colored records carry a colour"))?;
        let pid_batches: Vec<Vec<usize>> =
            plan.full_batches(0).map(|b| b.indices.clone()).collect();
        let random_batches = random_partition(ds.len(), ssl_cfg.a + 1, ssl_cfg.seed);
        let pid_batch_mi =
            batch_pid_check(&pid_batches, &labels, SpuriousValues::Discrete(&colors))?.mean_mi();
        let random_batch_mi =
            batch_pid_check(&random_batches, &labels, SpuriousValues::Discrete(&colors))?.mean_mi();
        Ok(ColoredOutcome {
            report,
            raw,
            pid_batch_mi,
            random_batch_mi,
        })
    }

    /// Every stage in one process.
    pub fn run(&self) -> Result<ColoredOutcome> {
        self.validate()?;
        let ds = self.ssl_dataset()?;
        let splits = self.probe_splits()?;
        let (model, _) = self.train_latent(&ds)?;
        let plan = self.plan_from(&ds, &model)?;
        let (random, _) = self.train_arm(&ds, BatchSource::Random, None)?;
        let (pid, _) = self.train_arm(&ds, BatchSource::Pid, Some(&plan))?;
        self.evaluate(&ds, &splits, &plan, &random, &pid)
    }
}

/// The full batches the random arm sees in its first epoch.
pub fn random_partition(len: usize, b: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..len).collect();
    crate::rlvm::shuffle(&mut perm, &mut rngs::stream(seed, "ssl-shuffle", 0));
    perm.chunks_exact(b).map(<[usize]>::to_vec).collect()
}

/// Linear-invertible data with an exp-family spurious factor over several environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentExperiment {
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub code_dim: usize,
    pub num_classes: usize,
    pub num_envs: usize,
    pub lambda_scale: f64,
    pub noise_sigma: f64,
    pub tasks_per_env: usize,
    pub rlvm: ElboConfig,
    pub grid: HeldOutGrid,
}

impl Default for IdentExperiment {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 4,
            k: 2,
            code_dim: 4,
            num_classes: 4,
            num_envs: 3,
            lambda_scale: 1.5,
            noise_sigma: 0.1,
            tasks_per_env: 20,
            // The decoder noise matches the generator's.
            rlvm: ElboConfig {
                epochs: 100,
                decoder_sigma: 0.1,
                ..ElboConfig::default()
            },
            grid: HeldOutGrid::default(),
        }
    }
}

impl IdentExperiment {
    pub fn scm(&self) -> Result<Scm> {
        Scm::new(ScmConfig {
            d: self.n + self.code_dim,
            n: self.n,
            noise_sigma: self.noise_sigma,
            mixing: Mixing::LinearInvertible,
            num_classes: self.num_classes,
            label_noise: 0.0,
            seed: self.seed,
            spurious: SpuriousModel::ExpFamily {
                k: self.k,
                lambda_scale: self.lambda_scale,
                num_envs: self.num_envs,
            },
            colored: ColoredConfig::default(),
        })
    }

    pub fn envs(&self) -> Result<Vec<Environment>> {
        (0..self.num_envs as u32)
            .map(|e| Environment::new(e, 0.5))
            .collect()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let scm = self.scm()?;
        let envs = self.envs()?;
        let size = self.rlvm.batch_task_size;
        let mut recs = Vec::new();
        for env in &envs {
            recs.extend(scm.gen_records(env, size * self.tasks_per_env, "ident-train")?);
        }
        Dataset::new(self.n + self.code_dim, self.n, self.num_classes, envs, recs)
    }

    /// Trains on the generated tasks and returns the held-out `R²` with the model.
    pub fn run(&self) -> Result<(f64, Rlvm)> {
        if self.rlvm.n != self.n || self.rlvm.k != self.k {
            return Err(config_err("rlvm n and k must match the generator"));
        }
        let ds = self.dataset()?;
        let cfg = ElboConfig {
            seed: rngs::derive_seed(self.seed, "experiment-rlvm", 0),
            ..self.rlvm.clone()
        };
        let (model, _) = train_rlvm(&ds, &cfg)?;
        let r2 = identifiability_report(&model, &self.scm()?, &self.envs()?, &self.grid)?;
        Ok((r2, model))
    }
}

/// The setting an ablation varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    /// Weight of the orthogonality penalty in the latent model.
    Alpha,
    /// Batch size minus one, for both arms.
    A,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub outcome: ColoredOutcome,
}

/// One colored run per value. Runs are independent and may execute in parallel.
pub fn ablation_sweep(
    base: &ColoredExperiment,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(config_err("a sweep needs at least one value"));
    }
    values
        .par_iter()
        .map(|&value| {
            let mut exp = base.clone();
            match param {
                SweepParam::Alpha => exp.rlvm.alpha = value,
                SweepParam::A => {
                    if value < 1.0 || value.fract() != 0.0 {
                        return Err(config_err(format!(
                            "a must be a positive integer, got {value}"
                        )));
                    }
                    exp.ssl.a = value as usize;
                }
            }
            Ok(SweepRow {
                param,
                value,
                outcome: exp.run()?,
            })
        })
        .collect()
}

/// Value whose pid arm reaches the highest OOD accuracy; ties go to the earlier row.
pub fn pid_ood_argmax(rows: &[SweepRow]) -> Option<f64> {
    let ood = |r: &SweepRow| {
        r.outcome
            .report
            .arm("pid")
            .map_or(f64::NEG_INFINITY, |m| m.ood_accuracy)
    };
    rows.iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if ood(b) >= ood(r) => Some(b),
            _ => Some(r),
        })
        .map(|r| r.value)
}

/// `max − min` of an arm's OOD accuracy across the rows.
pub fn ood_spread(rows: &[SweepRow], arm: &str) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.outcome.report.arm(arm).map(|m| m.ood_accuracy))
        .collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Discrete binary `s`, exact propensities, and batches drawn from a freshly reset pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndependenceExperiment {
    pub seed: u64,
    pub pool_size: usize,
    pub p_sc: f64,
    pub a: usize,
    /// Matched batches to draw (the pool is reset before each).
    pub batches: usize,
}

impl Default for IndependenceExperiment {
    fn default() -> Self {
        Self {
            seed: 0,
            pool_size: 4096,
            p_sc: 0.9,
            a: 63,
            batches: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceOutcome {
    pub pid_mi: f64,
    pub random_mi: f64,
    /// Single-label batches left out of the means.
    pub pid_excluded: usize,
    pub random_excluded: usize,
    pub score_groups: usize,
}

impl IndependenceExperiment {
    pub fn dataset(&self) -> Result<Dataset> {
        let scm = Scm::new(ScmConfig {
            d: 4,
            n: 1,
            noise_sigma: 0.0,
            mixing: Mixing::LinearInvertible,
            num_classes: 2,
            label_noise: 0.0,
            seed: self.seed,
            spurious: SpuriousModel::Aligned {
                scale: 1.0,
                sigma: 0.0,
            },
            colored: ColoredConfig::default(),
        })?;
        let env = Environment::new(0, self.p_sc)?;
        let recs = scm.gen_records(&env, self.pool_size, "independence")?;
        Dataset::new(4, 1, 2, vec![env], recs)
    }

    pub fn run(&self) -> Result<IndependenceOutcome> {
        let ds = self.dataset()?;
        let labels = ds.class_ids();
        let s = ds
            .s_classes()
            .ok_or_else(|| config_err("discrete s expected"))?;
        let scores = exact_scores(&labels, &s, self.p_sc);
        let mut pool = MatchPool::from_scores(scores, (0..ds.len()).collect())?;
        let mut rng = rngs::stream(self.seed, "independence-batches", 0);
        let mut pid = Vec::with_capacity(self.batches);
        for _ in 0..self.batches {
            pool.reset();
            pid.push(sample_batch(&mut pool, self.a, &mut rng, MatchTarget::Seed)?.indices);
        }
        let random = random_partition(ds.len(), self.a + 1, self.seed);
        let p = batch_pid_check(&pid, &labels, SpuriousValues::Discrete(&s))?;
        let r = batch_pid_check(&random, &labels, SpuriousValues::Discrete(&s))?;
        Ok(IndependenceOutcome {
            pid_mi: p.mean_mi(),
            random_mi: r.mean_mi(),
            pid_excluded: p.excluded,
            random_excluded: r.excluded,
            score_groups: pool.n_groups(),
        })
    }
}

/// `P(anchor j | s_i)` when `s` is binary and follows the anchor's class with probability `p_sc`.
pub fn exact_scores(classes: &[usize], s: &[usize], p_sc: f64) -> Tensor {
    let d = classes.len();
    let mut data = Vec::with_capacity(d * d);
    for &si in s {
        let row: Vec<f64> = classes
            .iter()
            .map(|&c| if c == si { p_sc } else { 1.0 - p_sc })
            .collect();
        let total: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|v| v / total));
    }
    Tensor::matrix(d, d, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityPoint {
    pub pool_size: usize,
    pub ops: u64,
    /// `D² · n`.
    pub expected_ops: u64,
    /// Median wall time of the pool build, in seconds.
    pub seconds: f64,
}

/// Times `build_pool` with an untrained small model at each pool size.
pub fn complexity_scan(
    sizes: &[usize],
    n: usize,
    hidden: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<ComplexityPoint>> {
    let code_dim = 4;
    let cfg = ElboConfig {
        n,
        k: 2,
        hidden: vec![hidden],
        seed,
        ..ElboConfig::default()
    };
    let model = Rlvm::new(n + code_dim, &cfg)?;
    let scm = Scm::new(ScmConfig {
        d: n + code_dim,
        n,
        noise_sigma: 0.1,
        mixing: Mixing::LinearInvertible,
        num_classes: 4,
        label_noise: 0.0,
        seed,
        spurious: SpuriousModel::default(),
        colored: ColoredConfig::default(),
    })?;
    let env = Environment::new(0, 0.9)?;
    sizes
        .iter()
        .map(|&size| {
            let ds = Dataset::new(
                n + code_dim,
                n,
                4,
                vec![env.clone()],
                scm.gen_records(&env, size, "complexity")?,
            )?;
            let mut times = Vec::with_capacity(repeats.max(1));
            let mut ops = 0;
            for _ in 0..repeats.max(1) {
                let start = std::time::Instant::now();
                let pool = build_pool(&ds, &model, seed)?;
                times.push(start.elapsed().as_secs_f64());
                ops = pool.op_count;
            }
            times.sort_by(f64::total_cmp);
            Ok(ComplexityPoint {
                pool_size: size,
                ops,
                expected_ops: (size * size * n) as u64,
                seconds: times[times.len() / 2],
            })
        })
        .collect()
}

/// Least-squares slope of `ln seconds` against `ln D`.
pub fn loglog_slope(points: &[ComplexityPoint]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.pool_size as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.seconds.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
