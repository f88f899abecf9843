//! Self-checks behind `symtrans verify`: gradient checks, brute-force oracles and
//! integration invariants.

mod cases;
mod diffeo;
pub mod oracle;
mod oracles;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::scalar::Precision;

pub use cases::{grad_cases, tiny_model_config, GradCase};
pub use diffeo::diffeo_suite;
pub use oracles::oracle_suite;

pub const GRAD_TOL_STANDARD: f64 = 1e-4;
pub const GRAD_TOL_WIDE: f64 = 1e-6;
pub const ORACLE_TOL: f64 = 1e-5;
/// Leaf gradients smaller than this fraction of the largest one in a case are
/// compared against the floor instead of their own magnitude.
pub const LEAF_SCALE_FLOOR: f64 = 1e-2;
/// Random instances per oracle family.
pub const ORACLE_INSTANCES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gradcheck,
    Oracles,
    Diffeo,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Gradcheck, Suite::Oracles, Suite::Diffeo];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Oracles => "oracles",
            Suite::Diffeo => "diffeo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub precision: Option<Precision>,
    pub instances: usize,
    /// Worst observed error (relative for gradient checks, absolute otherwise).
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn bounded(suite: Suite, name: impl Into<String>, precision: Option<Precision>, instances: usize, error: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            precision,
            instances,
            error,
            tolerance,
            passed: error < tolerance,
            detail: String::new(),
        }
    }
}

/// Worst per-leaf error and the leaf it occurs at.
///
/// Leaves the function is invariant to have no meaningful relative error; their
/// deviation from zero is measured against the largest gradient of the other leaves.
/// Every other leaf uses `max_abs_err / max(scale, LEAF_SCALE_FLOOR * global)`.
fn leaf_errors(report: &GradCheckReport, invariant: &[usize]) -> (f64, usize) {
    let global = report
        .leaves
        .iter()
        .filter(|l| !invariant.contains(&l.leaf))
        .map(|l| l.scale)
        .fold(0.0, f64::max);
    report
        .leaves
        .iter()
        .map(|l| {
            let e = if invariant.contains(&l.leaf) {
                l.scale / global.max(f64::MIN_POSITIVE)
            } else {
                let denom = l.scale.max(LEAF_SCALE_FLOOR * global).max(f64::MIN_POSITIVE);
                l.max_abs_err / denom
            };
            (if e.is_nan() { f64::INFINITY } else { e }, l.leaf)
        })
        .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
}

/// Every case at both precisions.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for case in grad_cases(seed)? {
        let cfg = GradCheckConfig {
            max_coords: case.max_coords,
            seed,
            ..Default::default()
        };
        for precision in [Precision::Standard, Precision::Wide] {
            let (report, tol) = match precision {
                Precision::Standard => (grad_check::<f32, _>(&case, &case.inputs, &cfg)?, GRAD_TOL_STANDARD),
                Precision::Wide => (grad_check::<f64, _>(&case, &case.inputs, &cfg)?, GRAD_TOL_WIDE),
            };
            let (error, leaf) = leaf_errors(&report, &case.invariant);
            let mut r = CheckResult::bounded(Suite::Gradcheck, case.name, Some(precision), 1, error, tol);
            r.detail = alloc::format!("worst leaf {} of {}", leaf, report.leaves.len());
            if !case.invariant.is_empty() {
                r.detail.push_str(&alloc::format!(", {} invariant leaves", case.invariant.len()));
            }
            out.push(r);
        }
    }
    Ok(out)
}

pub fn run(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Gradcheck => gradcheck_suite(seed),
        Suite::Oracles => oracle_suite(ORACLE_INSTANCES, seed),
        Suite::Diffeo => diffeo_suite(seed),
    }
}
