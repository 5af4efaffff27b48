//! Validation reporting shared by the measure, connectivity, and kernel
//! checkers. A report is a list of named checks; `margin` is positive when
//! the check holds with room to spare and negative by the amount of the
//! worst violation found.

use std::fmt;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Signed slack: how far inside (positive) or outside (negative) the
    /// admissible region the worst sample landed.
    pub margin: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: &str, passed: bool, margin: f64, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            margin,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    /// What was validated, e.g. "base measure" or "kernel matrix".
    pub subject: String,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn new(subject: impl Into<String>) -> Self {
        ValidationReport {
            subject: subject.into(),
            checks: Vec::new(),
        }
    }

    pub fn push(&mut self, check: CheckResult) {
        self.checks.push(check);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}]", self.subject)?;
        for c in &self.checks {
            writeln!(
                f,
                "  {} {:24} margin {:+.3e}  {}",
                if c.passed { "ok  " } else { "FAIL" },
                c.name,
                c.margin,
                c.detail
            )?;
        }
        Ok(())
    }
}
