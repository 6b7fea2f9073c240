//! `verify-fixtures [NAME...]`: re-run fixtures and exit 3 listing any that fail.

use std::process::ExitCode;

use pidssl_docsbench::{acceptance_fixtures, verify_fixtures};

fn main() -> ExitCode {
    let names: Vec<String> = std::env::args().skip(1).collect();
    let results = match acceptance_fixtures().and_then(|f| verify_fixtures(&f, &names)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failed fixtures: {}", failed.join(", "));
        ExitCode::from(3)
    }
}
