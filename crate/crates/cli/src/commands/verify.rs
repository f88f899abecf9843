use std::time::Instant;

use serde::Serialize;

use symtrans_core::scalar::Precision;
use symtrans_core::verify::{self, CheckResult, Suite};

use crate::cli::VerifyArgs;
use crate::commands::create_dir;
use crate::config;
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, FILE_NAME};

pub const REPORT: &str = "report.json";

#[derive(Serialize)]
pub struct Report {
    pub seed: u64,
    pub suites: Vec<Suite>,
    pub passed: bool,
    pub results: Vec<CheckResult>,
}

pub fn line(r: &CheckResult) -> String {
    let precision = match r.precision {
        Some(Precision::Standard) => " [standard]",
        Some(Precision::Wide) => " [wide]",
        None => "",
    };
    let mut s = format!(
        "{} {:<9} {}{}: error {:.3e}, tolerance {:.0e}",
        if r.passed { "PASS" } else { "FAIL" },
        r.suite.name(),
        r.name,
        precision,
        r.error,
        r.tolerance
    );
    if !r.detail.is_empty() {
        s.push_str(&format!(" ({})", r.detail));
    }
    s
}

pub fn run(args: &VerifyArgs) -> Result<()> {
    let suites = args.suite.suites();
    let mut results = Vec::new();
    for &suite in &suites {
        let start = Instant::now();
        let rs = verify::run(suite, args.seed)?;
        for r in &rs {
            println!("{}", line(r));
        }
        println!("{} suite: {:.1}s", suite.name(), start.elapsed().as_secs_f64());
        results.extend(rs);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let report = Report {
        seed: args.seed,
        suites: suites.clone(),
        passed: failed == 0,
        results,
    };
    if let Some(out) = &args.out {
        create_dir(out)?;
        config::write_pretty(out.join(REPORT), &report)?;
        let mut manifest = RunManifest::new("verify", &serde_json::json!({ "suites": suites }), Some(args.seed));
        manifest.output(out, REPORT)?;
        manifest.write(out.join(FILE_NAME))?;
    }
    println!("{} of {} checks passed", report.results.len() - failed, report.results.len());
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: report.results.len(),
        });
    }
    Ok(())
}
