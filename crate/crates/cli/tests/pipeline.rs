use std::path::Path;
use std::process::{Command, Output};

use pidssl::dataset::Dataset;

const SMALL: &str = "seed = 3

[colored]
ssl_pairs = 512
probe_train = 300
id_test = 300
ood_test = 300

[colored.rlvm]
epochs = 2

[colored.ssl]
epochs = 1
a = 31

[oracle]
mc_samples = 20000
mc_rel_tol = 0.05
grad_batches = 1
";

fn pidssl(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_pidssl"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_ok(dir: &Path, config: &str, args: &[&str]) -> String {
    let o = pidssl(dir, config, args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    stderr(&o)
}

const STAGES: [&str; 5] = ["datagen", "train-rlvm", "sample", "train-ssl", "evaluate"];

#[test]
fn full_pipeline_emits_one_report_and_reruns_are_noops() {
    let tmp = tempfile::tempdir().unwrap();
    for stage in STAGES {
        run_ok(tmp.path(), SMALL, &[stage]);
    }
    let out = tmp.path().join("out");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("reports/eval.json")).unwrap())
            .unwrap();
    let arms: Vec<&str> = report["report"]["arms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["arm"].as_str().unwrap())
        .collect();
    assert_eq!(arms, ["random", "pid"]);
    let lines = std::fs::read_to_string(out.join("reports/eval.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);

    for stage in STAGES {
        let err = run_ok(tmp.path(), SMALL, &[stage]);
        assert!(err.contains("up to date"), "{stage} reran: {err}");
    }
    let err = run_ok(tmp.path(), SMALL, &["--force", "sample"]);
    assert!(err.contains("sample: wrote"), "{err}");

    let orphans = Command::new(env!("CARGO_BIN_EXE_pidssl"))
        .args(["--out-dir"])
        .arg(&out)
        .arg("orphans")
        .output()
        .unwrap();
    assert!(orphans.status.success());
    assert_eq!(String::from_utf8_lossy(&orphans.stdout), "");
    std::fs::write(out.join("models/stray.ckpt"), b"x").unwrap();
    let orphans = Command::new(env!("CARGO_BIN_EXE_pidssl"))
        .args(["--out-dir"])
        .arg(&out)
        .arg("orphans")
        .output()
        .unwrap();
    assert_eq!(
        String::from_utf8_lossy(&orphans.stdout),
        "models/stray.ckpt\n"
    );
}

#[test]
fn changed_config_invalidates_only_downstream_of_the_change() {
    let tmp = tempfile::tempdir().unwrap();
    for stage in ["datagen", "train-rlvm", "sample"] {
        run_ok(tmp.path(), SMALL, &[stage]);
    }
    let changed = SMALL.replace("a = 31", "a = 15");
    assert!(run_ok(tmp.path(), &changed, &["datagen"]).contains("up to date"));
    assert!(run_ok(tmp.path(), &changed, &["train-rlvm"]).contains("up to date"));
    assert!(run_ok(tmp.path(), &changed, &["sample"]).contains("sample: wrote"));
}

#[test]
fn stale_and_missing_inputs_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pidssl(tmp.path(), SMALL, &["train-rlvm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("datagen"), "{}", stderr(&o));

    run_ok(tmp.path(), SMALL, &["datagen"]);
    let data = tmp.path().join("out/data/ssl.pds");
    let mut bytes = std::fs::read(&data).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&data, bytes).unwrap();
    let o = pidssl(tmp.path(), SMALL, &["train-rlvm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stale"), "{}", stderr(&o));

    // Regenerating restores the recorded bytes.
    run_ok(tmp.path(), SMALL, &["datagen"]);
    run_ok(tmp.path(), SMALL, &["train-rlvm"]);
}

#[test]
fn datagen_is_reproducible_and_round_trips() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_ok(a.path(), SMALL, &["datagen"]);
    run_ok(b.path(), SMALL, &["--threads", "2", "datagen"]);
    for name in ["ssl", "probe-train", "id-test", "ood-test"] {
        let rel = format!("out/data/{name}.pds");
        let bytes = std::fs::read(a.path().join(&rel)).unwrap();
        assert_eq!(bytes, std::fs::read(b.path().join(&rel)).unwrap(), "{name}");

        let loaded = Dataset::load(&a.path().join(&rel)).unwrap();
        let copy = a.path().join("copy.pds");
        loaded.save(&copy).unwrap();
        assert_eq!(std::fs::read(&copy).unwrap(), bytes, "{name}");
        assert_eq!(Dataset::load(&copy).unwrap(), loaded);
    }
}

#[test]
fn configuration_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pidssl(tmp.path(), "[colored]\nssl_pairs = 512\n", &["datagen"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("missing field `seed`"),
        "{}",
        stderr(&o)
    );

    let o = pidssl(
        tmp.path(),
        "seed = 1\n[colored.ssl]\ntemprature = 0.5\n",
        &["datagen"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("temprature"), "{}", stderr(&o));

    let o = pidssl(
        tmp.path(),
        "seed = 1\n[colored]\np_train = 1.5\n",
        &["datagen"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[colored]"), "{}", stderr(&o));
}

#[test]
fn exit_codes_distinguish_numerical_and_assertion_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let diverging = SMALL.replace("epochs = 2", "epochs = 2\nlr = 1e12");
    run_ok(tmp.path(), &diverging, &["datagen"]);
    let o = pidssl(tmp.path(), &diverging, &["train-rlvm"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let impossible = format!("{SMALL}grad_tol = 1e-300\n");
    let o = pidssl(tmp.path(), &impossible, &["oracle"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("elbo.grad"), "{}", stderr(&o));
    // A cached failing report still fails.
    let o = pidssl(tmp.path(), &impossible, &["oracle"]);
    assert_eq!(o.status.code(), Some(3));

    run_ok(tmp.path(), SMALL, &["oracle"]);
}

#[test]
fn seed_flag_overrides_the_file() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_ok(a.path(), SMALL, &["--seed", "9", "datagen"]);
    run_ok(
        b.path(),
        &SMALL.replace("seed = 3", "seed = 9"),
        &["datagen"],
    );
    let rel = "out/data/ssl.pds";
    assert_eq!(
        std::fs::read(a.path().join(rel)).unwrap(),
        std::fs::read(b.path().join(rel)).unwrap()
    );
    let manifest = std::fs::read_to_string(a.path().join("out/manifests/datagen.json")).unwrap();
    assert!(manifest.contains("\"seed\": 9"), "{manifest}");
}
