//! Structured pass/fail records shared by every verifier.

use serde::{Deserialize, Serialize};

/// Outcome of a single obligation. `Undecided` is an honest third value:
/// the check neither passed nor produced a witness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Undecided,
}

/// Location + value pinpointing a violated obligation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    /// Human-readable location: a grid index, a sample point, a config/site pair.
    pub location: String,
    /// The offending value (margin, residual, rate difference).
    pub value: f64,
}

impl Witness {
    pub fn new(location: impl Into<String>, value: f64) -> Witness {
        Witness {
            location: location.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub status: CheckStatus,
    /// Residual/margin relevant to the tolerance, when there is one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckRecord {
    pub fn pass(name: impl Into<String>) -> CheckRecord {
        CheckRecord {
            name: name.into(),
            status: CheckStatus::Pass,
            margin: None,
            tolerance: None,
            witness: None,
            detail: None,
        }
    }

    pub fn fail(name: impl Into<String>, witness: Witness) -> CheckRecord {
        CheckRecord {
            name: name.into(),
            status: CheckStatus::Fail,
            margin: None,
            tolerance: None,
            witness: Some(witness),
            detail: None,
        }
    }

    pub fn undecided(name: impl Into<String>, detail: impl Into<String>) -> CheckRecord {
        CheckRecord {
            name: name.into(),
            status: CheckStatus::Undecided,
            margin: None,
            tolerance: None,
            witness: None,
            detail: Some(detail.into()),
        }
    }

    pub fn with_margin(mut self, margin: f64, tolerance: f64) -> CheckRecord {
        self.margin = Some(margin);
        self.tolerance = Some(tolerance);
        self
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> CheckRecord {
        self.detail = Some(detail.into());
        self
    }
}

/// A named bundle of checks with witnesses, residuals and tolerances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub title: String,
    pub checks: Vec<CheckRecord>,
}

impl VerificationReport {
    pub fn new(title: impl Into<String>) -> VerificationReport {
        VerificationReport {
            title: title.into(),
            checks: Vec::new(),
        }
    }

    pub fn push(&mut self, record: CheckRecord) {
        self.checks.push(record);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Pass)
    }

    pub fn has_failure(&self) -> bool {
        self.checks.iter().any(|c| c.status == CheckStatus::Fail)
    }

    pub fn has_undecided(&self) -> bool {
        self.checks
            .iter()
            .any(|c| c.status == CheckStatus::Undecided)
    }

    pub fn first_failure(&self) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.status == CheckStatus::Fail)
    }

    /// Merge another report's checks under this title.
    pub fn extend(&mut self, other: VerificationReport) {
        self.checks.extend(other.checks);
    }
}
