//! Ground truth by enumeration, closed forms, and quadrature.
//!
//! [`run_suite`] executes every check and returns a [`Report`] with one
//! assertion per line. The environment grid is finite, so the minimax lines
//! are a necessary condition at that grid and not a proof for every
//! environment.

mod batches;
mod exact;
mod gradcheck;
mod quadrature;
mod report;
mod two_factor;

pub use batches::{batch_pid_check, chi_squared, BatchCheck, SpuriousValues, CONTINUOUS_BINS};
pub use exact::{
    bayes_posterior, decomposition, env_risk, minimax_table, mutual_information, pid_project,
    stratify, ExactClassifier, MinimaxTable, Stratification,
};
pub use gradcheck::{elbo_gradient_check, rel_err, GradCheck, REL_FLOOR};
pub use quadrature::{
    gaussian_density, gaussian_log_density, js_bruteforce, kl_quadrature, kl_quadrature_log,
    prior_moments, trapezoid,
};
pub use report::{Check, Relation, Report};
pub use two_factor::{monte_carlo_logistic, LogisticFit, Targets, TwoFactor};

use ndcore::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::balance::{js_divergence, propensity};
use crate::error::{config_err, Result};
use crate::rlvm::{kl_term, prior_mean_from, Posterior};
use crate::rngs;
use crate::scmgen::{gen_discrete_toy, DiscreteToy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoFactorCase {
    pub p_sc: f64,
    pub mu_label: f64,
    pub mu_s: f64,
    pub sigma_label: f64,
    pub sigma_s: f64,
}

impl Default for TwoFactorCase {
    fn default() -> Self {
        Self {
            p_sc: 0.9,
            mu_label: 1.0,
            mu_s: 0.2,
            sigma_label: 1.0,
            sigma_s: 1.0,
        }
    }
}

impl TwoFactorCase {
    pub fn model(&self, p_sc: f64, distinguishable: bool) -> TwoFactor {
        TwoFactor {
            p_sc,
            mu_label: self.mu_label,
            mu_s: self.mu_s,
            sigma_label: self.sigma_label,
            sigma_s: self.sigma_s,
            distinguishable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub grid: Vec<f64>,
    pub channel_noise: f64,
    /// Extra channel-noise levels for the decomposition identity.
    pub noise_levels: Vec<f64>,
    pub style_weights: Vec<f64>,
    pub two_factor: TwoFactorCase,
    pub mc_samples: usize,
    pub mc_rel_tol: f64,
    pub probes: usize,
    pub js_pairs: usize,
    pub quadrature_steps: usize,
    pub exact_tol: f64,
    pub identity_tol: f64,
    pub quadrature_tol: f64,
    /// Tiny batches for the ELBO finite-difference check.
    pub grad_batches: usize,
    pub grad_rows: usize,
    pub grad_step: f64,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            grid: vec![0.05, 0.275, 0.5, 0.725, 0.95],
            channel_noise: 0.1,
            noise_levels: vec![0.0, 0.05, 0.1, 0.25, 0.4],
            style_weights: vec![1.0, 3.0],
            two_factor: TwoFactorCase::default(),
            mc_samples: 1_000_000,
            mc_rel_tol: 0.02,
            probes: 10_000,
            js_pairs: 1000,
            quadrature_steps: 20_000,
            exact_tol: 1e-12,
            identity_tol: 1e-10,
            quadrature_tol: 1e-6,
            grad_batches: 20,
            grad_rows: 4,
            grad_step: 1e-6,
            grad_tol: 1e-4,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.len() < 2 {
            return Err(config_err("grid needs at least two environments"));
        }
        if self.quadrature_steps < 10_000 {
            return Err(config_err("quadrature_steps must be at least 10000"));
        }
        if self.mc_samples == 0 {
            return Err(config_err("mc_samples must be positive"));
        }
        if self.grad_batches == 0 || self.grad_rows == 0 || !(self.grad_step > 0.0) {
            return Err(config_err(
                "gradient check needs batches, rows and a positive step",
            ));
        }
        Ok(())
    }
}

/// Worst-case risk comparison on the toy grid, plus Bayes optimality of each
/// environment's own classifier.
pub fn minimax_report(grid: &[f64], channel_noise: f64, tol: f64) -> Result<Report> {
    let t = minimax_table(grid, channel_noise)?;
    let mut r = Report::new();
    r.note(format!(
        "minimax over p_sc grid {:?}, channel_noise {channel_noise}: finite grid, necessary condition only",
        grid
    ));
    r.push(Check::new(
        "minimax.pid_projection_shared",
        t.pid_spread,
        Relation::Eq,
        0.0,
        tol,
    ));
    for (i, p) in grid.iter().enumerate() {
        r.push(Check::new(
            format!("minimax.worst_pid_vs_env[p_sc={p}]"),
            t.worst_pid,
            Relation::Le,
            t.worst_env[i],
            tol,
        ));
    }
    let envs = grid
        .iter()
        .map(|&p| gen_discrete_toy(p, channel_noise))
        .collect::<Result<Vec<_>>>()?;
    let pid_clf = bayes_posterior(&pid_project(&envs[0])?);
    if let Some(i) = grid.iter().position(|&p| p == 0.5) {
        let diff = bayes_posterior(&envs[i]).max_abs_diff(&pid_clf);
        r.push(Check::new(
            "minimax.half_equals_pid",
            diff,
            Relation::Eq,
            0.0,
            tol,
        ));
    }
    for (e, p) in grid.iter().enumerate() {
        let own = t.risks[e][e];
        let others = t.risks.iter().map(|row| row[e]).chain([t.pid_risks[e]]);
        let best_other = others.fold(f64::INFINITY, f64::min);
        r.push(Check::new(
            format!("bayes_optimal[p_sc={p}]"),
            own,
            Relation::Le,
            best_other,
            tol,
        ));
    }
    Ok(r)
}

pub fn decomposition_report(cfg: &OracleConfig) -> Result<Report> {
    let mut r = Report::new();
    for &noise in &cfg.noise_levels {
        let pid = pid_project(&gen_discrete_toy(0.5, noise)?)?;
        let own = env_risk(&bayes_posterior(&pid), &pid)?;
        r.push(Check::new(
            format!("pid_risk_own_env[noise={noise}]"),
            own,
            Relation::Le,
            std::f64::consts::LN_2,
            cfg.exact_tol,
        ));
        for &p in &cfg.grid {
            let env = gen_discrete_toy(p, noise)?;
            let (lhs, rhs) = decomposition(&env, &pid)?;
            r.push(Check::new(
                format!("decomposition[p_sc={p},noise={noise}]"),
                lhs,
                Relation::Eq,
                rhs,
                cfg.identity_tol,
            ));
        }
    }
    Ok(r)
}

pub fn stratification_report(cfg: &OracleConfig) -> Result<Report> {
    let mut r = Report::new();
    for &p in &cfg.grid {
        let joint = DiscreteToy::new(p, cfg.channel_noise)
            .with_style(cfg.style_weights.clone())
            .joint()?;
        let st = stratify(&joint, cfg.exact_tol);
        r.push(Check::new(
            format!(
                "stratified_independence[p_sc={p},strata={}]",
                st.strata.len()
            ),
            st.max_error,
            Relation::Eq,
            0.0,
            cfg.exact_tol,
        ));
    }
    Ok(r)
}

/// Closed-form coefficients in the two null regimes and a Monte-Carlo
/// logistic fit at the configured `p_sc`.
pub fn two_factor_report(
    case: &TwoFactorCase,
    samples: usize,
    rel_tol: f64,
    seed: u64,
) -> Result<Report> {
    let mut r = Report::new();
    r.push(Check::new(
        "two_factor.coef[p_sc=0.5]",
        case.model(0.5, false).s_coefficient(),
        Relation::Eq,
        0.0,
        0.0,
    ));
    r.push(Check::new(
        format!("two_factor.coef_distinguishable[p_sc={}]", case.p_sc),
        case.model(case.p_sc, true).s_coefficient(),
        Relation::Eq,
        0.0,
        0.0,
    ));
    let m = case.model(case.p_sc, false);
    m.validate()?;
    let closed = m.s_coefficient();
    let bayes = monte_carlo_logistic(&m, samples, seed, Targets::Bayes)?;
    let sampled = monte_carlo_logistic(&m, samples, seed, Targets::Sampled)?;
    r.note(format!(
        "two-factor p_sc={}: closed-form F_s coefficient {closed}; logistic fit over {samples} draws: \
         {} against the exact posterior, {} (se {}) against sampled labels",
        case.p_sc, bayes.coef[2], sampled.coef[2], sampled.std_err[2]
    ));
    r.push(Check::new(
        format!("two_factor.coef_nonzero[p_sc={}]", case.p_sc),
        closed.abs(),
        Relation::Ge,
        f64::MIN_POSITIVE,
        0.0,
    ));
    r.push(Check::new(
        format!("two_factor.mc_rel_error[p_sc={}]", case.p_sc),
        ((bayes.coef[2] - closed) / closed).abs(),
        Relation::Le,
        rel_tol,
        0.0,
    ));
    // Sampled labels only add noise around the same population optimum.
    r.push(Check::new(
        format!("two_factor.sampled_within_4se[p_sc={}]", case.p_sc),
        (sampled.coef[2] - bayes.coef[2]).abs(),
        Relation::Le,
        4.0 * sampled.std_err[2],
        0.0,
    ));
    Ok(r)
}

/// Prior normalization, prior mean, and Gaussian KL against quadrature.
pub fn quadrature_report(steps: usize, tol: f64, seed: u64) -> Result<Report> {
    let mut rng = rngs::stream(seed, "oracle-quadrature", 0);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let (n, k) = (4, 2);
    let a = Tensor::matrix(n, k, (0..n * k).map(|_| normal()).collect());
    let lambda: Vec<f64> = (0..n * k).map(|_| normal()).collect();
    let mu = prior_mean_from(&a, &lambda);
    let mut r = Report::new();
    let (mut worst_mass, mut worst_mean) = (0.0f64, 0.0f64);
    for i in 0..n {
        let (mass, mean) = prior_moments(a.row_slice(i), &lambda[i * k..(i + 1) * k], steps);
        worst_mass = worst_mass.max((mass - 1.0).abs());
        worst_mean = worst_mean.max((mean - mu[i]).abs());
    }
    r.push(Check::new("prior.mass", worst_mass, Relation::Eq, 0.0, tol));
    r.push(Check::new("prior.mean", worst_mean, Relation::Eq, 0.0, tol));

    let mut worst_kl = 0.0f64;
    for _ in 0..8 {
        let mean: Vec<f64> = (0..n).map(|_| normal()).collect();
        let log_variance: Vec<f64> = (0..n).map(|_| normal()).collect();
        let post = Posterior { mean, log_variance };
        let closed = kl_term(&post, &mu);
        let mut quad = 0.0;
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            let var = post.log_variance[i].exp();
            let lo = post.mean[i].min(mu[i]) - 15.0 * var.sqrt().max(1.0);
            let hi = post.mean[i].max(mu[i]) + 15.0 * var.sqrt().max(1.0);
            quad += kl_quadrature_log(
                gaussian_log_density(post.mean[i], var),
                gaussian_log_density(mu[i], 1.0),
                lo,
                hi,
                steps,
            );
        }
        worst_kl = worst_kl.max((closed - quad).abs());
    }
    r.push(Check::new(
        "kl.closed_vs_quadrature",
        worst_kl,
        Relation::Eq,
        0.0,
        tol,
    ));
    let unit = kl_quadrature(
        gaussian_density(1.0, 1.0),
        gaussian_density(0.0, 1.0),
        -14.0,
        15.0,
        steps,
    );
    r.push(Check::new("kl.unit_shift", unit, Relation::Eq, 0.5, tol));
    Ok(r)
}

/// Propensity normalization and JS properties on random inputs.
pub fn score_report(probes: usize, pairs: usize, tol: f64, seed: u64) -> Result<Report> {
    let mut rng = rngs::stream(seed, "oracle-scores", 0);
    let mut r = Report::new();
    let mut worst_sum = 0.0f64;
    for _ in 0..probes {
        let nu = rng.random_range(2..=16);
        let n = rng.random_range(1..=6);
        let scale = 10f64.powf(rng.random_range(-1.0..1.5));
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect()
        };
        let mu = Tensor::matrix(nu, n, draw(nu * n));
        let s = draw(n);
        let ba = propensity(&s, &mu)?;
        worst_sum = worst_sum.max((ba.probs.iter().sum::<f64>() - 1.0).abs());
    }
    r.push(Check::new(
        "propensity.row_sum",
        worst_sum,
        Relation::Eq,
        0.0,
        1e-9,
    ));

    let (mut asym, mut over, mut under, mut self_js, mut brute) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..pairs {
        let len = rng.random_range(2..=10);
        let dist = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            let mut v: Vec<f64> = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < 0.15 {
                        0.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            if v.iter().all(|x| *x == 0.0) {
                v[0] = 1.0;
            }
            let t: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= t);
            v
        };
        let p = dist(&mut rng);
        let q = dist(&mut rng);
        let pq = js_divergence(&p, &q)?;
        let qp = js_divergence(&q, &p)?;
        asym = asym.max((pq - qp).abs());
        over = over.max(pq - std::f64::consts::LN_2);
        under = under.max(-pq);
        self_js = self_js.max(js_divergence(&p, &p)?);
        brute = brute.max((pq - js_bruteforce(&p, &q)).abs());
    }
    r.push(Check::new("js.symmetry", asym, Relation::Eq, 0.0, tol));
    r.push(Check::new(
        "js.upper_bound_excess",
        over,
        Relation::Le,
        0.0,
        0.0,
    ));
    r.push(Check::new(
        "js.lower_bound_excess",
        under,
        Relation::Le,
        0.0,
        0.0,
    ));
    r.push(Check::new(
        "js.self_distance",
        self_js,
        Relation::Eq,
        0.0,
        tol,
    ));
    r.push(Check::new(
        "js.bruteforce_agreement",
        brute,
        Relation::Eq,
        0.0,
        tol,
    ));
    Ok(r)
}

/// Every oracle check in one report.
/// Worst finite-difference disagreement of the ELBO gradient, per parameter group.
pub fn elbo_gradient_report(
    batches: usize,
    rows: usize,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<Report> {
    let chk = elbo_gradient_check(batches, rows, step, seed)?;
    let mut r = Report::new();
    r.note(format!(
        "elbo gradient: {} entries over {batches} batches of {rows}, relative error floor {REL_FLOOR:e}",
        chk.entries_checked
    ));
    for (group, err) in chk.groups {
        r.push(Check::new(
            format!("elbo.grad.{group}"),
            err,
            Relation::Le,
            tol,
            0.0,
        ));
    }
    Ok(r)
}

/// The independent parts of the suite, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleSection {
    Minimax,
    Decomposition,
    Stratification,
    TwoFactor,
    Quadrature,
    Scores,
    Gradient,
}

impl OracleSection {
    pub const ALL: [OracleSection; 7] = [
        OracleSection::Minimax,
        OracleSection::Decomposition,
        OracleSection::Stratification,
        OracleSection::TwoFactor,
        OracleSection::Quadrature,
        OracleSection::Scores,
        OracleSection::Gradient,
    ];
}

pub fn section_report(cfg: &OracleConfig, section: OracleSection) -> Result<Report> {
    cfg.validate()?;
    match section {
        OracleSection::Minimax => minimax_report(&cfg.grid, cfg.channel_noise, cfg.exact_tol),
        OracleSection::Decomposition => decomposition_report(cfg),
        OracleSection::Stratification => stratification_report(cfg),
        OracleSection::TwoFactor => {
            two_factor_report(&cfg.two_factor, cfg.mc_samples, cfg.mc_rel_tol, cfg.seed)
        }
        OracleSection::Quadrature => {
            quadrature_report(cfg.quadrature_steps, cfg.quadrature_tol, cfg.seed)
        }
        OracleSection::Scores => score_report(cfg.probes, cfg.js_pairs, cfg.exact_tol, cfg.seed),
        OracleSection::Gradient => elbo_gradient_report(
            cfg.grad_batches,
            cfg.grad_rows,
            cfg.grad_step,
            cfg.grad_tol,
            cfg.seed,
        ),
    }
}

pub fn run_suite(cfg: &OracleConfig) -> Result<Report> {
    let mut r = Report::new();
    for section in OracleSection::ALL {
        r.extend(section_report(cfg, section)?);
    }
    Ok(r)
}
