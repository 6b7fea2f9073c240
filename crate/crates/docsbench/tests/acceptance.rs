//! Acceptance run: every fixture, then one pass/fail line per criterion.
//! Exits nonzero when any criterion fails.

use std::collections::BTreeMap;

use pidssl_docsbench::{acceptance_fixtures, FixtureResult};

const CRITERIA: [&str; 13] = [
    "minimax enumeration",
    "independence of matched batches",
    "decomposition identity",
    "two-factor Monte Carlo",
    "ELBO gradient",
    "prior quadrature and KL",
    "propensity rows and JS",
    "stratification",
    "identifiability",
    "colored OOD trend",
    "alpha and batch-size ablations",
    "pool-build complexity",
    "pipeline determinism",
];

fn main() {
    let fixtures = acceptance_fixtures().expect("fixture file parses");
    let mut by_criterion: BTreeMap<u8, Vec<FixtureResult>> = BTreeMap::new();
    for f in &fixtures {
        let result = f.run().unwrap_or_else(|e| FixtureResult {
            name: f.name.clone(),
            criterion: f.criterion,
            passed: false,
            detail: format!("error: {e}"),
            seconds: 0.0,
        });
        println!("  {result}");
        by_criterion.entry(f.criterion).or_default().push(result);
    }
    let mut failed = 0;
    for (i, title) in CRITERIA.iter().enumerate() {
        let id = i as u8 + 1;
        let results = by_criterion.get(&id).map(Vec::as_slice).unwrap_or_default();
        let passed = !results.is_empty() && results.iter().all(|r| r.passed);
        failed += usize::from(!passed);
        let names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
        let names = if names.is_empty() {
            "no fixture".to_string()
        } else {
            names.join(", ")
        };
        println!(
            "criterion {id:02} {:<32} {} ({names})",
            title,
            if passed { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        CRITERIA.len() - failed,
        CRITERIA.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
