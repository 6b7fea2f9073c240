//! One function per subcommand. Each reads verified inputs, writes its
//! artifacts, and records a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndcore::Bundle;
use pidssl::dataset::Dataset;
use pidssl::evalharness::ProbeSplits;
use pidssl::experiment::{ablation_sweep, SweepRow};
use pidssl::hash::content_hash;
use pidssl::oracle::run_suite;
use pidssl::rlvm::Rlvm;
use pidssl::sampler::BatchPlan;
use pidssl::ssl::{BatchSource, SslEncoder};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{
    read_manifest, up_to_date, verified_input, write_bytes, write_manifest, RunManifest,
};

pub const SSL_DATA: &str = "data/ssl.pds";
pub const PROBE_TRAIN: &str = "data/probe-train.pds";
pub const ID_TEST: &str = "data/id-test.pds";
pub const OOD_TEST: &str = "data/ood-test.pds";
pub const RLVM: &str = "models/rlvm.ckpt";
pub const RLVM_LOG: &str = "logs/rlvm.jsonl";
pub const PLAN: &str = "plans/pid.plan";
pub const EVAL_JSON: &str = "reports/eval.json";
pub const EVAL_JSONL: &str = "reports/eval.jsonl";
pub const ORACLE_REPORT: &str = "reports/oracle.txt";

pub fn ssl_checkpoint(arm: BatchSource) -> String {
    format!("models/ssl-{}.ckpt", arm_name(arm))
}

pub fn ssl_log(arm: BatchSource) -> String {
    format!("logs/ssl-{}.jsonl", arm_name(arm))
}

pub fn arm_name(arm: BatchSource) -> &'static str {
    match arm {
        BatchSource::Random => "random",
        BatchSource::Pid => "pid",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub force: bool,
}

type Artifacts = Vec<(String, Vec<u8>)>;

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Runs `body` unless the stage is up to date, then writes its outputs and manifest.
    fn stage(
        &self,
        stage: &str,
        config: serde_json::Value,
        inputs: BTreeMap<String, String>,
        body: impl FnOnce() -> CliResult<Artifacts>,
    ) -> CliResult<Outcome> {
        if !self.force && up_to_date(&self.out, stage, stage, &config, &inputs)? {
            eprintln!("{stage}: up to date");
            return Ok(Outcome::UpToDate);
        }
        let start = Instant::now();
        let artifacts = body()?;
        let mut outputs = BTreeMap::new();
        for (rel, bytes) in &artifacts {
            write_bytes(&self.path(rel), bytes)?;
            outputs.insert(rel.clone(), content_hash(bytes));
        }
        let manifest = RunManifest {
            command: stage.to_string(),
            config,
            seed: self.cfg.seed,
            inputs,
            outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_seconds: start.elapsed().as_secs_f64(),
        };
        write_manifest(&self.out, stage, &manifest)?;
        eprintln!(
            "{stage}: wrote {} artifacts in {:.2}s",
            artifacts.len(),
            manifest.wall_time_seconds
        );
        Ok(Outcome::Ran)
    }

    fn load_dataset(&self, rel: &str) -> CliResult<Dataset> {
        Ok(Dataset::load(&self.path(rel))?)
    }

    fn load_bundle(&self, rel: &str) -> CliResult<Bundle> {
        Ok(Bundle::load(&self.path(rel))?)
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn jsonl<T: serde::Serialize>(rows: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn datagen(ctx: &Ctx) -> CliResult<Outcome> {
    let exp = &ctx.cfg.colored;
    let mut config = to_value(exp);
    if let Some(map) = config.as_object_mut() {
        for key in ["rlvm", "ssl", "probe", "target"] {
            map.remove(key);
        }
    }
    ctx.stage("datagen", config, BTreeMap::new(), || {
        let ssl = exp.ssl_dataset()?;
        let ProbeSplits {
            train,
            id_test,
            ood_test,
        } = exp.probe_splits()?;
        Ok(vec![
            (SSL_DATA.into(), ssl.to_bytes()?),
            (PROBE_TRAIN.into(), train.to_bytes()?),
            (ID_TEST.into(), id_test.to_bytes()?),
            (OOD_TEST.into(), ood_test.to_bytes()?),
        ])
    })
}

pub fn train_rlvm(ctx: &Ctx) -> CliResult<Outcome> {
    let exp = &ctx.cfg.colored;
    let inputs = BTreeMap::from([(
        SSL_DATA.to_string(),
        verified_input(&ctx.out, SSL_DATA, "datagen")?,
    )]);
    let config = json!({ "seed": exp.seed, "rlvm": exp.rlvm });
    ctx.stage("train-rlvm", config, inputs, || {
        let ds = ctx.load_dataset(SSL_DATA)?;
        let (model, log) = exp.train_latent(&ds)?;
        let lines = log
            .epoch_loss
            .iter()
            .enumerate()
            .map(|(epoch, loss)| json!({ "epoch": epoch, "loss": loss }));
        Ok(vec![
            (RLVM.into(), model.to_bundle()?.to_bytes()),
            (RLVM_LOG.into(), jsonl(lines)),
        ])
    })
}

pub fn sample(ctx: &Ctx) -> CliResult<Outcome> {
    let exp = &ctx.cfg.colored;
    let inputs = BTreeMap::from([
        (
            SSL_DATA.to_string(),
            verified_input(&ctx.out, SSL_DATA, "datagen")?,
        ),
        (
            RLVM.to_string(),
            verified_input(&ctx.out, RLVM, "train-rlvm")?,
        ),
    ]);
    let config =
        json!({ "seed": exp.seed, "target": exp.target, "a": exp.ssl.a, "epochs": exp.ssl.epochs });
    ctx.stage("sample", config, inputs, || {
        let ds = ctx.load_dataset(SSL_DATA)?;
        let model = Rlvm::from_bundle(&ctx.load_bundle(RLVM)?)?;
        let plan = exp.plan_from(&ds, &model)?;
        Ok(vec![(PLAN.into(), plan.to_bundle()?.to_bytes())])
    })
}

pub fn train_ssl(ctx: &Ctx, arm: BatchSource) -> CliResult<Outcome> {
    let exp = &ctx.cfg.colored;
    let mut inputs = BTreeMap::from([(
        SSL_DATA.to_string(),
        verified_input(&ctx.out, SSL_DATA, "datagen")?,
    )]);
    if arm == BatchSource::Pid {
        inputs.insert(PLAN.into(), verified_input(&ctx.out, PLAN, "sample")?);
    }
    let stage = format!("train-ssl-{}", arm_name(arm));
    let config = json!({ "seed": exp.seed, "ssl": exp.ssl, "arm": arm });
    ctx.stage(&stage, config, inputs, || {
        let ds = ctx.load_dataset(SSL_DATA)?;
        let plan = match arm {
            BatchSource::Pid => Some(BatchPlan::from_bundle(&ctx.load_bundle(PLAN)?)?),
            BatchSource::Random => None,
        };
        let (enc, log) = exp.train_arm(&ds, arm, plan.as_ref())?;
        let lines = log.epoch_loss.iter().zip(&log.epoch_pairs).enumerate().map(|(epoch, (loss, pairs))| {
            json!({ "epoch": epoch, "arm": arm_name(arm), "loss": loss, "pairs": pairs })
        });
        Ok(vec![(ssl_checkpoint(arm), enc.to_bundle()?.to_bytes()), (ssl_log(arm), jsonl(lines))])
    })
}

pub fn evaluate(ctx: &Ctx) -> CliResult<Outcome> {
    let exp = &ctx.cfg.colored;
    let random_ckpt = ssl_checkpoint(BatchSource::Random);
    let pid_ckpt = ssl_checkpoint(BatchSource::Pid);
    let inputs = BTreeMap::from([
        (
            SSL_DATA.to_string(),
            verified_input(&ctx.out, SSL_DATA, "datagen")?,
        ),
        (
            PROBE_TRAIN.to_string(),
            verified_input(&ctx.out, PROBE_TRAIN, "datagen")?,
        ),
        (
            ID_TEST.to_string(),
            verified_input(&ctx.out, ID_TEST, "datagen")?,
        ),
        (
            OOD_TEST.to_string(),
            verified_input(&ctx.out, OOD_TEST, "datagen")?,
        ),
        (PLAN.to_string(), verified_input(&ctx.out, PLAN, "sample")?),
        (
            random_ckpt.clone(),
            verified_input(&ctx.out, &random_ckpt, "train-ssl-random")?,
        ),
        (
            pid_ckpt.clone(),
            verified_input(&ctx.out, &pid_ckpt, "train-ssl-pid")?,
        ),
    ]);
    let config = json!({ "seed": exp.seed, "probe": exp.probe, "ssl": exp.ssl });
    ctx.stage("evaluate", config, inputs, || {
        let ds = ctx.load_dataset(SSL_DATA)?;
        let splits = ProbeSplits {
            train: ctx.load_dataset(PROBE_TRAIN)?,
            id_test: ctx.load_dataset(ID_TEST)?,
            ood_test: ctx.load_dataset(OOD_TEST)?,
        };
        let plan = BatchPlan::from_bundle(&ctx.load_bundle(PLAN)?)?;
        let random = SslEncoder::from_bundle(&ctx.load_bundle(&random_ckpt)?)?;
        let pid = SslEncoder::from_bundle(&ctx.load_bundle(&pid_ckpt)?)?;
        let outcome = exp.evaluate(&ds, &splits, &plan, &random, &pid)?;
        let hash = outcome.report.dataset_hash.clone();
        let rows = outcome
            .report
            .arms
            .iter()
            .chain(std::iter::once(&outcome.raw))
            .map(|m| json!({ "dataset_hash": hash, "seed": exp.seed, "metrics": m }));
        Ok(vec![
            (
                EVAL_JSON.into(),
                format!(
                    "{}\n",
                    serde_json::to_string_pretty(&outcome).expect("serializes")
                )
                .into_bytes(),
            ),
            (EVAL_JSONL.into(), jsonl(rows)),
        ])
    })
}

pub fn oracle(ctx: &Ctx) -> CliResult<Outcome> {
    let config = to_value(&ctx.cfg.oracle);
    let outcome = ctx.stage("oracle", config, BTreeMap::new(), || {
        let report = run_suite(&ctx.cfg.oracle)?;
        Ok(vec![(
            ORACLE_REPORT.into(),
            format!("{report}").into_bytes(),
        )])
    })?;
    let text = std::fs::read_to_string(ctx.path(ORACLE_REPORT))
        .map_err(|e| CliError::io(ctx.path(ORACLE_REPORT), e))?;
    let failed: Vec<&str> = text.lines().filter(|l| l.ends_with(" FAIL")).collect();
    if !failed.is_empty() {
        return Err(CliError::Assertion(format!(
            "{} oracle checks failed:\n{}",
            failed.len(),
            failed.join("\n")
        )));
    }
    Ok(outcome)
}

pub fn sweep_paths(param: &str) -> (String, String) {
    (
        format!("reports/sweep-{param}.jsonl"),
        format!("reports/sweep-{param}.tsv"),
    )
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut t = String::from("value\trandom_id\trandom_ood\tpid_id\tpid_ood\tood_gain\tid_drop\tpid_batch_mi\trandom_batch_mi\n");
    for r in rows {
        let rep = &r.outcome.report;
        let get = |arm: &str| {
            rep.arm(arm)
                .map_or((f64::NAN, f64::NAN), |m| (m.id_accuracy, m.ood_accuracy))
        };
        let (ri, ro) = get("random");
        let (pi, po) = get("pid");
        t.push_str(&format!(
            "{}\t{ri:.6}\t{ro:.6}\t{pi:.6}\t{po:.6}\t{:.4}\t{:.4}\t{:.6}\t{:.6}\n",
            r.value, rep.ood_gain, rep.id_drop, r.outcome.pid_batch_mi, r.outcome.random_batch_mi
        ));
    }
    t
}

pub fn sweep(ctx: &Ctx) -> CliResult<Outcome> {
    let sweep = &ctx.cfg.sweep;
    let name = serde_json::to_value(sweep.param).expect("serializes");
    let name = name.as_str().expect("unit variant").to_string();
    let (rows_path, table_path) = sweep_paths(&name);
    let config = json!({ "colored": ctx.cfg.colored, "sweep": sweep });
    ctx.stage(&format!("sweep-{name}"), config, BTreeMap::new(), || {
        let rows = ablation_sweep(&ctx.cfg.colored, sweep.param, &sweep.values)?;
        Ok(vec![
            (rows_path, jsonl(&rows)),
            (table_path, sweep_table(&rows).into_bytes()),
        ])
    })
}

/// Whether a stage has a manifest under `out`.
pub fn has_run(out: &Path, stage: &str) -> CliResult<bool> {
    Ok(read_manifest(out, stage)?.is_some())
}
