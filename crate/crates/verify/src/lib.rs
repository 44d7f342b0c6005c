//! Independent oracles for the core library: central finite differences for
//! every differentiable op and for whole-model losses, a finite-difference
//! recomputation of the distillation mask, and brute-force herding, NME,
//! CKA and forgetting.

pub mod gradients;
pub mod mask;
pub mod metrics;
pub mod protocol;

use std::fmt;

/// Outcome of one oracle comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn extend(&mut self, checks: impl IntoIterator<Item = Check>) {
        self.checks.extend(checks);
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<40} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

/// Every oracle with its default instance counts.
pub fn run_all() -> Report {
    let mut r = Report::default();
    r.extend(gradients::check_all_ops());
    r.extend(gradients::check_model_losses(0));
    r.extend(gradients::check_conv_model(0));
    r.extend(mask::check_mask_instances(20));
    r.extend(mask::check_complementarity(200));
    r.extend(protocol::check_herding(50));
    r.extend(protocol::check_nme(50));
    r.extend(metrics::check_cka(50));
    r.extend(metrics::check_forgetting(50));
    r
}
