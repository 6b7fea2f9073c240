//! Pinned benchmark fixtures and the runner that re-executes them.
//!
//! Fixtures live in `fixtures/acceptance.toml`. Each names a pipeline, the
//! seeds it runs under, configuration overrides, and the thresholds its
//! outcome must meet.
//!
//! ```
//! let fixtures = pidssl_docsbench::acceptance_fixtures().unwrap();
//! assert!(fixtures.iter().any(|f| f.name == "colored-trend"));
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use pidssl::experiment::{
    ablation_sweep, complexity_scan, loglog_slope, ood_spread, pid_ood_argmax, ColoredExperiment,
    IdentExperiment, IndependenceExperiment, SweepParam,
};
use pidssl::oracle::{section_report, OracleConfig, OracleSection};
use pidssl::ssl::BatchSource;
use pidssl_cli::commands::{self, Ctx};
use pidssl_cli::RunConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const ACCEPTANCE_FIXTURES: &str = include_str!("../fixtures/acceptance.toml");
pub const DETERMINISM_RUN: &str = include_str!("../fixtures/determinism-run.toml");

/// Pipelines listed in `MAPPED_OPERATIONS` must each appear in this map.
pub const EQUATION_MAP: &str = include_str!("../../../book/src/equation-map.md");

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("fixture file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("fixture {name}: {message}")]
    Invalid { name: String, message: String },
    #[error(transparent)]
    Core(#[from] pidssl::Error),
    #[error(transparent)]
    Cli(#[from] pidssl_cli::CliError),
    #[error("scratch directory: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FixtureError>;

/// What a fixture runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Pipeline {
    Oracle(OracleSection),
    Independence,
    Identifiability,
    Colored,
    Sweep(SweepParam),
    Complexity,
    Determinism,
}

impl TryFrom<String> for Pipeline {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        let kebab = |v: &str| serde_json::Value::String(v.to_string());
        Ok(match s.split_once('/') {
            Some(("oracle", section)) => Pipeline::Oracle(
                serde_json::from_value(kebab(section))
                    .map_err(|_| format!("unknown oracle section `{section}`"))?,
            ),
            Some(("sweep", param)) => Pipeline::Sweep(
                serde_json::from_value(kebab(param))
                    .map_err(|_| format!("unknown sweep parameter `{param}`"))?,
            ),
            None if s == "independence" => Pipeline::Independence,
            None if s == "identifiability" => Pipeline::Identifiability,
            None if s == "colored" => Pipeline::Colored,
            None if s == "complexity" => Pipeline::Complexity,
            None if s == "determinism" => Pipeline::Determinism,
            _ => return Err(format!("unknown pipeline `{s}`")),
        })
    }
}

impl From<Pipeline> for String {
    fn from(p: Pipeline) -> String {
        p.to_string()
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kebab = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
        match self {
            Pipeline::Oracle(s) => write!(
                f,
                "oracle/{}",
                kebab(serde_json::to_value(s).expect("unit variant"))
            ),
            Pipeline::Sweep(p) => write!(
                f,
                "sweep/{}",
                kebab(serde_json::to_value(p).expect("unit variant"))
            ),
            Pipeline::Independence => f.write_str("independence"),
            Pipeline::Identifiability => f.write_str("identifiability"),
            Pipeline::Colored => f.write_str("colored"),
            Pipeline::Complexity => f.write_str("complexity"),
            Pipeline::Determinism => f.write_str("determinism"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    pub name: String,
    pub criterion: u8,
    pub config: Pipeline,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Sweep grid or pool sizes, for the pipelines that take one.
    #[serde(default)]
    pub values: Vec<f64>,
    pub thresholds: BTreeMap<String, f64>,
    #[serde(default)]
    pub overrides: toml::Table,
    /// Where the thresholds come from: the oracle, or the pilot runs and their numbers.
    pub source: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    fixture: Vec<Fixture>,
}

pub fn parse_fixtures(text: &str) -> Result<Vec<Fixture>> {
    let file: FixtureFile = toml::from_str(text)?;
    let mut seen = std::collections::BTreeSet::new();
    for f in &file.fixture {
        if !seen.insert(f.name.as_str()) {
            return Err(f.invalid("duplicate name"));
        }
        if f.source.trim().is_empty() {
            return Err(f.invalid("source must say where the thresholds come from"));
        }
    }
    Ok(file.fixture)
}

pub fn acceptance_fixtures() -> Result<Vec<Fixture>> {
    parse_fixtures(ACCEPTANCE_FIXTURES)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureResult {
    pub name: String,
    pub criterion: u8,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for FixtureResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "pass" } else { "FAIL" };
        write!(
            f,
            "{} {verdict} [{:.1}s] {}",
            self.name, self.seconds, self.detail
        )
    }
}

impl Fixture {
    fn invalid(&self, message: impl Into<String>) -> FixtureError {
        FixtureError::Invalid {
            name: self.name.clone(),
            message: message.into(),
        }
    }

    pub fn threshold(&self, key: &str) -> Result<f64> {
        self.thresholds
            .get(key)
            .copied()
            .ok_or_else(|| self.invalid(format!("missing threshold `{key}`")))
    }

    fn seeds(&self) -> Result<&[u64]> {
        if self.seeds.is_empty() {
            return Err(self.invalid("needs at least one seed"));
        }
        Ok(&self.seeds)
    }

    /// `base` with the fixture's overrides merged over it.
    fn configured<T: Serialize + DeserializeOwned>(&self, base: &T) -> Result<T> {
        let mut value = toml::Value::try_from(base).map_err(|e| self.invalid(e.to_string()))?;
        merge(&mut value, &toml::Value::Table(self.overrides.clone()));
        value
            .try_into()
            .map_err(|e: toml::de::Error| self.invalid(e.to_string()))
    }

    /// Runs the pipeline and checks it, including `max_seconds` when present.
    pub fn run(&self) -> Result<FixtureResult> {
        let start = Instant::now();
        let (mut passed, mut detail) = match self.config {
            Pipeline::Oracle(section) => self.oracle(section)?,
            Pipeline::Independence => self.independence()?,
            Pipeline::Identifiability => self.identifiability()?,
            Pipeline::Colored => self.colored()?,
            Pipeline::Sweep(SweepParam::Alpha) => self.alpha_sweep()?,
            Pipeline::Sweep(SweepParam::A) => self.size_sweep()?,
            Pipeline::Complexity => self.complexity()?,
            Pipeline::Determinism => self.determinism()?,
        };
        let seconds = start.elapsed().as_secs_f64();
        if let Some(&limit) = self.thresholds.get("max_seconds") {
            if seconds >= limit {
                passed = false;
                detail.push_str(&format!("; took {seconds:.1}s, limit {limit}s"));
            }
        }
        Ok(FixtureResult {
            name: self.name.clone(),
            criterion: self.criterion,
            passed,
            detail,
            seconds,
        })
    }

    fn oracle(&self, section: OracleSection) -> Result<(bool, String)> {
        let mut passed = true;
        let mut notes = Vec::new();
        for &seed in self.seeds()? {
            let cfg = self.configured(&OracleConfig {
                seed,
                ..OracleConfig::default()
            })?;
            let report = section_report(&cfg, section)?;
            if report.checks.is_empty() {
                return Err(self.invalid("section produced no checks"));
            }
            let failures = report.failures();
            passed &= failures.is_empty();
            notes.push(if failures.is_empty() {
                format!("seed {seed}: {} checks", report.checks.len())
            } else {
                let lines: Vec<String> = failures.iter().map(|c| c.to_string()).collect();
                format!("seed {seed}: {}", lines.join("; "))
            });
        }
        Ok((passed, notes.join(", ")))
    }

    fn independence(&self) -> Result<(bool, String)> {
        let (max_pid, min_random) = (
            self.threshold("max_pid_mi")?,
            self.threshold("min_random_mi")?,
        );
        let mut passed = true;
        let mut notes = Vec::new();
        for &seed in self.seeds()? {
            let out = self
                .configured(&IndependenceExperiment {
                    seed,
                    ..IndependenceExperiment::default()
                })?
                .run()?;
            passed &= out.pid_mi < max_pid && out.random_mi >= min_random;
            notes.push(format!(
                "seed {seed}: matched MI {:.2e}, random MI {:.3}",
                out.pid_mi, out.random_mi
            ));
        }
        Ok((passed, notes.join(", ")))
    }

    fn identifiability(&self) -> Result<(bool, String)> {
        let min_r2 = self.threshold("min_r2")?;
        let mut passed = true;
        let mut notes = Vec::new();
        for &seed in self.seeds()? {
            let exp = self.configured(&IdentExperiment {
                seed,
                ..IdentExperiment::default()
            })?;
            let pairs = exp.num_classes * exp.num_envs;
            let needed = exp.n * exp.k + 1;
            let (r2, _) = exp.run()?;
            passed &= r2 >= min_r2 && pairs >= needed;
            notes.push(format!(
                "seed {seed}: R2 {r2:.4} from {pairs} (label, env) pairs, {needed} needed"
            ));
        }
        Ok((passed, notes.join(", ")))
    }

    fn colored(&self) -> Result<(bool, String)> {
        let (min_gain, max_drop) = (
            self.threshold("min_ood_gain")?,
            self.threshold("max_id_drop")?,
        );
        let mut passed = true;
        let mut notes = Vec::new();
        for &seed in self.seeds()? {
            let out = self
                .configured(&ColoredExperiment {
                    seed,
                    ..ColoredExperiment::default()
                })?
                .run()?;
            let r = &out.report;
            passed &= r.ood_gain >= min_gain && r.id_drop <= max_drop;
            notes.push(format!(
                "seed {seed}: OOD gain {:+.2}, ID drop {:+.2}",
                r.ood_gain, r.id_drop
            ));
        }
        Ok((passed, notes.join(", ")))
    }

    fn sweep_base(&self, seed: u64) -> Result<ColoredExperiment> {
        if self.values.is_empty() {
            return Err(self.invalid("sweep needs values"));
        }
        self.configured(&ColoredExperiment {
            seed,
            ..ColoredExperiment::default()
        })
    }

    fn alpha_sweep(&self) -> Result<(bool, String)> {
        let (target, max_dist) = (
            self.threshold("target")?,
            self.threshold("max_index_distance")?,
        );
        let target_at = self
            .values
            .iter()
            .position(|&v| v == target)
            .ok_or_else(|| self.invalid("target is not on the grid"))?;
        let mut passed = true;
        let mut notes = Vec::new();
        for &seed in self.seeds()? {
            let rows = ablation_sweep(&self.sweep_base(seed)?, SweepParam::Alpha, &self.values)?;
            let best = pid_ood_argmax(&rows).ok_or_else(|| self.invalid("empty sweep"))?;
            let best_at = self
                .values
                .iter()
                .position(|&v| v == best)
                .expect("argmax is a grid value");
            passed &= best_at.abs_diff(target_at) as f64 <= max_dist;
            notes.push(format!(
                "seed {seed}: matched-arm OOD peaks at alpha = {best}"
            ));
        }
        Ok((passed, notes.join(", ")))
    }

    fn size_sweep(&self) -> Result<(bool, String)> {
        let ratio = self.threshold("max_spread_ratio")?;
        let mut passed = true;
        let mut notes = Vec::new();
        for &seed in self.seeds()? {
            let rows = ablation_sweep(&self.sweep_base(seed)?, SweepParam::A, &self.values)?;
            let (pid, random) = (ood_spread(&rows, "pid"), ood_spread(&rows, "random"));
            passed &= pid < ratio * random;
            notes.push(format!(
                "seed {seed}: OOD spread matched {pid:.4}, random {random:.4}"
            ));
        }
        Ok((passed, notes.join(", ")))
    }

    fn complexity(&self) -> Result<(bool, String)> {
        #[derive(Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Settings {
            n: usize,
            hidden: usize,
            repeats: usize,
        }
        let s = self.configured(&Settings {
            n: 4,
            hidden: 16,
            repeats: 5,
        })?;
        let (lo, hi) = (self.threshold("min_slope")?, self.threshold("max_slope")?);
        let sizes: Vec<usize> = self.values.iter().map(|&v| v as usize).collect();
        if sizes.len() < 2 {
            return Err(self.invalid("needs at least two pool sizes"));
        }
        let points = complexity_scan(&sizes, s.n, s.hidden, s.repeats, self.seeds()?[0])?;
        let exact = points.iter().all(|p| p.ops == p.expected_ops);
        let slope = loglog_slope(&points);
        Ok((
            exact && (lo..=hi).contains(&slope),
            format!("operation counts equal D^2 n: {exact}; wall-time slope {slope:.3}"),
        ))
    }

    fn determinism(&self) -> Result<(bool, String)> {
        #[derive(Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Settings {
            threads: Vec<usize>,
            reruns: usize,
        }
        let s = self.configured(&Settings {
            threads: vec![1, 4],
            reruns: 2,
        })?;
        let max_differing = self.threshold("max_differing_files")?;
        let mut cfg = RunConfig::parse(DETERMINISM_RUN, Path::new("determinism-run.toml"))?;
        cfg.set_seed(self.seeds()?[0]);
        let scratch = tempfile::tempdir()?;
        let mut reference: Option<BTreeMap<String, Vec<u8>>> = None;
        let mut differing = std::collections::BTreeSet::new();
        let mut runs = 0;
        for &threads in &s.threads {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| self.invalid(e.to_string()))?;
            for rerun in 0..s.reruns.max(1) {
                let out = scratch.path().join(format!("t{threads}-r{rerun}"));
                let ctx = Ctx {
                    cfg: cfg.clone(),
                    out: out.clone(),
                    force: false,
                };
                pool.install(|| full_pipeline(&ctx))?;
                let snap = snapshot(&out)?;
                runs += 1;
                match &reference {
                    None => reference = Some(snap),
                    Some(r) => {
                        for key in r.keys().chain(snap.keys()) {
                            if r.get(key) != snap.get(key) {
                                differing.insert(key.clone());
                            }
                        }
                    }
                }
            }
        }
        let files = reference.map_or(0, |r| r.len());
        let count = differing.len();
        let detail = if differing.is_empty() {
            format!(
                "{files} files identical over {runs} runs with threads {:?}",
                s.threads
            )
        } else {
            format!(
                "differing: {}",
                differing.into_iter().collect::<Vec<_>>().join(", ")
            )
        };
        Ok((count as f64 <= max_differing, detail))
    }
}

fn merge(base: &mut toml::Value, over: &toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Every stage in order: data, latent model, plan, both encoders, evaluation, oracle, sweep.
pub fn full_pipeline(ctx: &Ctx) -> Result<()> {
    commands::datagen(ctx)?;
    commands::train_rlvm(ctx)?;
    commands::sample(ctx)?;
    commands::train_ssl(ctx, BatchSource::Random)?;
    commands::train_ssl(ctx, BatchSource::Pid)?;
    commands::evaluate(ctx)?;
    commands::oracle(ctx)?;
    commands::sweep(ctx)?;
    Ok(())
}

/// Every file under `dir` by relative path. Manifests lose their wall time.
pub fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .expect("walk stays under dir")
                .to_string_lossy()
                .replace('\\', "/");
            let mut bytes = std::fs::read(&path)?;
            if rel.starts_with("manifests/") {
                let mut v: serde_json::Value =
                    serde_json::from_slice(&bytes).map_err(std::io::Error::other)?;
                if let Some(m) = v.as_object_mut() {
                    m.remove("wall_time_seconds");
                }
                bytes = serde_json::to_vec(&v).map_err(std::io::Error::other)?;
            }
            files.insert(rel, bytes);
        }
    }
    Ok(files)
}

/// Runs the named fixtures (all when `names` is empty) one after another.
pub fn verify_fixtures(fixtures: &[Fixture], names: &[String]) -> Result<Vec<FixtureResult>> {
    let unknown: Vec<&String> = names
        .iter()
        .filter(|n| !fixtures.iter().any(|f| &&f.name == n))
        .collect();
    if let Some(n) = unknown.first() {
        return Err(FixtureError::Invalid {
            name: n.to_string(),
            message: "no such fixture".into(),
        });
    }
    fixtures
        .iter()
        .filter(|f| names.is_empty() || names.contains(&f.name))
        .map(Fixture::run)
        .collect()
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/fixtures.md")]
pub struct FixturesChapter;

/// Code paths the equation map must mention.
pub const MAPPED_OPERATIONS: &[&str] = &[
    "scmgen::Scm::gen_pair",
    "scmgen::Scm::gen_colored_dataset",
    "scmgen::Scm::gen_pid_reference",
    "scmgen::gen_discrete_toy",
    "rlvm::Rlvm::elbo",
    "rlvm::kl_term",
    "rlvm::ortho_penalty",
    "rlvm::prior_mean_from",
    "rlvm::prior_log_density_coord",
    "rlvm::train_rlvm",
    "rlvm::Rlvm::posterior_draws",
    "balance::propensity",
    "balance::js_divergence",
    "sampler::score_matrix",
    "sampler::build_pool",
    "sampler::sample_batch",
    "sampler::plan_epochs",
    "ssl::info_nce_loss",
    "ssl::recon_loss",
    "ssl::train_ssl",
    "evalharness::linear_probe",
    "evalharness::ood_comparison",
    "evalharness::affine_r2",
    "evalharness::identifiability_report",
    "oracle::pid_project",
    "oracle::env_risk",
    "oracle::minimax_table",
    "oracle::decomposition",
    "oracle::stratify",
    "oracle::TwoFactor::s_coefficient",
    "oracle::monte_carlo_logistic",
    "oracle::kl_quadrature_log",
    "oracle::prior_moments",
    "oracle::js_bruteforce",
    "oracle::elbo_gradient_check",
    "oracle::batch_pid_check",
    "oracle::mutual_information",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_names_round_trip() {
        for name in [
            "oracle/minimax",
            "oracle/two-factor",
            "sweep/a",
            "sweep/alpha",
            "independence",
            "determinism",
        ] {
            let p = Pipeline::try_from(name.to_string()).unwrap();
            assert_eq!(p.to_string(), name);
        }
        assert!(Pipeline::try_from("oracle/nope".to_string()).is_err());
    }

    #[test]
    fn overrides_merge_into_nested_tables() {
        let mut base = toml::Value::try_from(ColoredExperiment::default()).unwrap();
        let over: toml::Value = toml::from_str("ssl_pairs = 7\n[rlvm]\nepochs = 2\n").unwrap();
        merge(&mut base, &over);
        let exp: ColoredExperiment = base.try_into().unwrap();
        assert_eq!((exp.ssl_pairs, exp.rlvm.epochs), (7, 2));
        assert_eq!(exp.rlvm.n, ColoredExperiment::default().rlvm.n);
    }

    #[test]
    fn duplicate_and_unsourced_fixtures_are_rejected() {
        let one = "[[fixture]]\nname = \"x\"\ncriterion = 1\nconfig = \"colored\"\nsource = \"pilot\"\n[fixture.thresholds]\n";
        assert!(parse_fixtures(one).is_ok());
        let twice = format!("{one}{one}");
        assert!(parse_fixtures(&twice)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
        let blank = one.replace("\"pilot\"", "\" \"");
        assert!(parse_fixtures(&blank).is_err());
    }
}
