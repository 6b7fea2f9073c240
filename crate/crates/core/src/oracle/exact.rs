//! Exact enumeration over [`DiscreteJoint`] tables.

use crate::error::{config_err, Result};
use crate::scmgen::DiscreteJoint;

/// `p(label | x⁺)` for every `x⁺` in the support.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactClassifier {
    pub n_x: usize,
    pub n_label: usize,
    /// `x`-major: `table[x · n_label + l]`.
    table: Vec<f64>,
    /// `false` where `x⁺` had zero marginal; those columns hold the uniform guess.
    defined: Vec<bool>,
}

impl ExactClassifier {
    pub fn from_table(n_x: usize, n_label: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != n_x * n_label {
            return Err(config_err("classifier table has the wrong size"));
        }
        for x in 0..n_x {
            let col = &table[x * n_label..(x + 1) * n_label];
            if col.iter().any(|v| !(*v >= 0.0)) || (col.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(config_err(format!(
                    "classifier column {x} is not a distribution"
                )));
            }
        }
        Ok(Self {
            n_x,
            n_label,
            table,
            defined: vec![true; n_x],
        })
    }

    pub fn uniform(n_x: usize, n_label: usize) -> Self {
        Self {
            n_x,
            n_label,
            table: vec![1.0 / n_label as f64; n_x * n_label],
            defined: vec![true; n_x],
        }
    }

    /// Ignores `x⁺` and predicts the given label marginal.
    pub fn constant(n_x: usize, marginal: &[f64]) -> Self {
        Self {
            n_x,
            n_label: marginal.len(),
            table: (0..n_x).flat_map(|_| marginal.iter().copied()).collect(),
            defined: vec![true; n_x],
        }
    }

    pub fn prob(&self, label: usize, x: usize) -> f64 {
        self.table[x * self.n_label + label]
    }

    pub fn is_defined(&self, x: usize) -> bool {
        self.defined[x]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.table
            .iter()
            .zip(&other.table)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Replaces `p(s | label)` by `p(s)` while keeping the channel `p(x⁺ | label, s)`.
pub fn pid_project(joint: &DiscreteJoint) -> Result<DiscreteJoint> {
    let ls = joint.label_s();
    let pl = joint.label_marginal();
    let ps = joint.s_marginal();
    let (nl, ns) = (joint.n_label, joint.n_s);
    let mut out = vec![0.0; joint.cells().len()];
    for l in 0..nl {
        for s in 0..ns {
            let target = pl[l] * ps[s];
            if target == 0.0 {
                continue;
            }
            let denom = ls[l * ns + s];
            if denom == 0.0 {
                return Err(config_err(format!(
                    "p(label={l}, s={s}) = 0, so its channel is undefined but the projection needs it"
                )));
            }
            for x in 0..joint.n_x {
                out[joint.idx(x, l, s)] = joint.get(x, l, s) / denom * target;
            }
        }
    }
    DiscreteJoint::new(joint.n_x, nl, ns, out)
}

/// Exact `p(label | x⁺)` by summing out `s`.
pub fn bayes_posterior(joint: &DiscreteJoint) -> ExactClassifier {
    let (nx, nl) = (joint.n_x, joint.n_label);
    let mut table = vec![0.0; nx * nl];
    let mut defined = vec![true; nx];
    for x in 0..nx {
        let col: Vec<f64> = (0..nl)
            .map(|l| (0..joint.n_s).map(|s| joint.get(x, l, s)).sum())
            .collect();
        let m: f64 = col.iter().sum();
        if m > 0.0 {
            for l in 0..nl {
                table[x * nl + l] = col[l] / m;
            }
        } else {
            defined[x] = false;
            for l in 0..nl {
                table[x * nl + l] = 1.0 / nl as f64;
            }
        }
    }
    ExactClassifier {
        n_x: nx,
        n_label: nl,
        table,
        defined,
    }
}

/// `E_env[−ln c(label | x⁺)]`; `+∞` if the classifier rules out an event the
/// environment can produce.
pub fn env_risk(classifier: &ExactClassifier, env: &DiscreteJoint) -> Result<f64> {
    if classifier.n_x != env.n_x || classifier.n_label != env.n_label {
        return Err(config_err(format!(
            "classifier support {}x{} does not match environment {}x{}",
            classifier.n_x, classifier.n_label, env.n_x, env.n_label
        )));
    }
    let mut risk = 0.0;
    for x in 0..env.n_x {
        for l in 0..env.n_label {
            let p: f64 = (0..env.n_s).map(|s| env.get(x, l, s)).sum();
            if p == 0.0 {
                continue;
            }
            if !classifier.is_defined(x) {
                return Err(config_err(format!(
                    "classifier is undefined at x={x}, which has positive mass"
                )));
            }
            let q = classifier.prob(l, x);
            if q == 0.0 {
                return Ok(f64::INFINITY);
            }
            risk -= p * q.ln();
        }
    }
    Ok(risk)
}

/// Plug-in mutual information of a non-negative `rows × cols` count or
/// probability table, in nats.
pub fn mutual_information(table: &[f64], rows: usize, cols: usize) -> f64 {
    let total: f64 = table.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut r = vec![0.0; rows];
    let mut c = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            r[i] += table[i * cols + j];
            c[j] += table[i * cols + j];
        }
    }
    let mut mi = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let v = table[i * cols + j];
            if v > 0.0 {
                mi += v / total * (v * total / (r[i] * c[j])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Both sides of the PID-versus-marginal decomposition in environment `env`:
/// `L(PID posterior) − L(label marginal)` and
/// `−E_{env(label,s)} KL(pid(x⁺|label,s) ‖ pid(x⁺|s))`.
///
/// The two agree whenever `label ⊥ s | x⁺` holds under the PID.
pub fn decomposition(env: &DiscreteJoint, pid: &DiscreteJoint) -> Result<(f64, f64)> {
    let lhs = env_risk(&bayes_posterior(pid), env)?
        - env_risk(
            &ExactClassifier::constant(pid.n_x, &pid.label_marginal()),
            env,
        )?;
    let env_ls = env.label_s();
    let pid_ls = pid.label_s();
    let pid_s = pid.s_marginal();
    let ns = pid.n_s;
    let mut rhs = 0.0;
    for l in 0..pid.n_label {
        for s in 0..ns {
            let w = env_ls[l * ns + s];
            if w == 0.0 {
                continue;
            }
            let mut kl = 0.0;
            for x in 0..pid.n_x {
                let p = pid.get(x, l, s) / pid_ls[l * ns + s];
                if p > 0.0 {
                    let q = (0..pid.n_label).map(|m| pid.get(x, m, s)).sum::<f64>() / pid_s[s];
                    kl += p * (p / q).ln();
                }
            }
            rhs -= w * kl;
        }
    }
    Ok((lhs, rhs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimaxTable {
    pub grid: Vec<f64>,
    /// `risks[t][e]`: classifier trained at `grid[t]`, evaluated at `grid[e]`.
    pub risks: Vec<Vec<f64>>,
    pub pid_risks: Vec<f64>,
    pub worst_env: Vec<f64>,
    pub worst_pid: f64,
    /// Largest cellwise difference between the PID projections of the grid's
    /// environments (they share `p(s)` and the channel, so this should be 0).
    pub pid_spread: f64,
}

/// Bayes classifiers for every environment on the toy grid plus the PID
/// classifier, each scored against every environment.
pub fn minimax_table(grid: &[f64], channel_noise: f64) -> Result<MinimaxTable> {
    if grid.is_empty() {
        return Err(config_err("minimax grid is empty"));
    }
    let envs = grid
        .iter()
        .map(|&p| crate::scmgen::gen_discrete_toy(p, channel_noise))
        .collect::<Result<Vec<_>>>()?;
    let pids = envs.iter().map(pid_project).collect::<Result<Vec<_>>>()?;
    let pid_spread = pids
        .iter()
        .flat_map(|p| {
            p.cells()
                .iter()
                .zip(pids[0].cells())
                .map(|(a, b)| (a - b).abs())
        })
        .fold(0.0, f64::max);
    let pid_clf = bayes_posterior(&pids[0]);
    let risks = envs
        .iter()
        .map(|train| {
            let c = bayes_posterior(train);
            envs.iter()
                .map(|e| env_risk(&c, e))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let pid_risks = envs
        .iter()
        .map(|e| env_risk(&pid_clf, e))
        .collect::<Result<Vec<_>>>()?;
    let worst = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(MinimaxTable {
        grid: grid.to_vec(),
        worst_env: risks.iter().map(|r| worst(r)).collect(),
        worst_pid: worst(&pid_risks),
        risks,
        pid_risks,
        pid_spread,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stratification {
    /// Groups of `s` values that share a propensity vector.
    pub strata: Vec<Vec<usize>>,
    /// `max |p(l, s | b) − p(l | b) p(s | b)|` over strata, labels, and `s`.
    pub max_error: f64,
    /// The same statistic with no conditioning (one stratum holding every `s`).
    pub unconditioned_error: f64,
}

/// Groups `s` by its exact propensity `p(· | s)` and measures the remaining
/// dependence between label and `s` inside each group.
pub fn stratify(joint: &DiscreteJoint, tol: f64) -> Stratification {
    let (nl, ns) = (joint.n_label, joint.n_s);
    let ls = joint.label_s();
    let ps = joint.s_marginal();
    let score = |s: usize| -> Vec<f64> { (0..nl).map(|l| ls[l * ns + s] / ps[s]).collect() };
    let mut strata: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for s in (0..ns).filter(|&s| ps[s] > 0.0) {
        let b = score(s);
        match strata
            .iter_mut()
            .find(|(rep, _)| rep.iter().zip(&b).all(|(u, v)| (u - v).abs() <= tol))
        {
            Some((_, members)) => members.push(s),
            None => strata.push((b, vec![s])),
        }
    }
    let dependence = |members: &[usize]| -> f64 {
        let mass: f64 = members.iter().map(|&s| ps[s]).sum();
        let mut worst: f64 = 0.0;
        for l in 0..nl {
            let pl: f64 = members.iter().map(|&s| ls[l * ns + s]).sum::<f64>() / mass;
            for &s in members {
                worst = worst.max((ls[l * ns + s] / mass - pl * ps[s] / mass).abs());
            }
        }
        worst
    };
    let all: Vec<usize> = (0..ns).filter(|&s| ps[s] > 0.0).collect();
    Stratification {
        max_error: strata
            .iter()
            .map(|(_, m)| dependence(m))
            .fold(0.0, f64::max),
        unconditioned_error: dependence(&all),
        strata: strata.into_iter().map(|(_, m)| m).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scmgen::{gen_discrete_toy, DiscreteToy};

    #[test]
    fn projection_keeps_channel_and_removes_dependence() {
        let joint = gen_discrete_toy(0.9, 0.1).unwrap();
        let pid = pid_project(&joint).unwrap();
        assert!(mutual_information(&pid.label_s(), 2, 2) < 1e-15);
        for x in 0..4 {
            for l in 0..2 {
                for s in 0..2 {
                    let a = joint.channel(x, l, s).unwrap();
                    let b = pid.channel(x, l, s).unwrap();
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        let twice = pid_project(&pid).unwrap();
        for (a, b) in pid.cells().iter().zip(twice.cells()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn risk_baselines() {
        let joint = gen_discrete_toy(0.7, 0.0).unwrap();
        assert_eq!(env_risk(&bayes_posterior(&joint), &joint).unwrap(), 0.0);
        let r = env_risk(&ExactClassifier::uniform(4, 2), &joint).unwrap();
        assert!((r - std::f64::consts::LN_2).abs() < 1e-15);
        let noisy = gen_discrete_toy(0.7, 0.1).unwrap();
        assert_eq!(
            env_risk(&bayes_posterior(&joint), &noisy).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn zero_cell_channel_is_rejected() {
        // label 0 never co-occurs with s = 1 but both marginals are positive.
        let p = vec![0.5, 0.0, 0.25, 0.25];
        let joint = DiscreteJoint::new(1, 2, 2, p).unwrap();
        assert!(pid_project(&joint).is_err());
    }

    #[test]
    fn styled_toy_strata_merge_styles() {
        let joint = DiscreteToy::new(0.8, 0.1)
            .with_style(vec![1.0, 3.0])
            .joint()
            .unwrap();
        let st = stratify(&joint, 1e-12);
        assert_eq!(st.strata, vec![vec![0, 2], vec![1, 3]]);
        assert!(st.max_error < 1e-12);
        assert!(st.unconditioned_error > 0.05);
    }
}
