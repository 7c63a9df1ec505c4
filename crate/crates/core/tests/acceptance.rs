//! Runs every acceptance criterion and prints one line per criterion.
//! Plain `main` so the lines show up without `--nocapture`.

use std::process::ExitCode;

use sftlab::harness::acceptance::{run_acceptance, AcceptOptions, CRITERIA};

fn main() -> ExitCode {
    // `cargo test -- --list` and name filters come through as arguments
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance_suite: test");
        return ExitCode::SUCCESS;
    }
    let report = match run_acceptance(&AcceptOptions::default()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("acceptance suite could not run: {e}");
            return ExitCode::FAILURE;
        }
    };
    for r in &report.results {
        println!("{r}");
    }
    println!("{}", report.to_string().lines().last().unwrap_or_default());
    let failed: Vec<u8> = report.results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    if report.results.len() != CRITERIA.len() || !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
