//! Pass/fail records shared by the inequality ledger and the experiments.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// Not enough data (or an unmet hypothesis) to decide.
    Inconclusive,
    /// Outside the regime the bound speaks about; reported, never counted.
    CounterRegime,
}

/// One inequality lhs ≤ rhs (or ≥, per `direction`) evaluated numerically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub id: String,
    pub params: Vec<(String, f64)>,
    pub lhs: f64,
    pub rhs: f64,
    /// Distance to failure in the direction of the bound, after slack.
    pub margin: f64,
    pub status: Status,
    /// Extra checks reported for context; they do not affect the verdict.
    #[serde(default)]
    pub informational: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl BoundCheck {
    /// lhs ≤ rhs·(1 + slack).
    pub fn upper(id: &str, params: Vec<(String, f64)>, lhs: f64, rhs: f64, slack: f64) -> Self {
        let margin = rhs * (1.0 + slack) - lhs;
        let status = if margin >= 0.0 { Status::Pass } else { Status::Fail };
        Self { id: id.into(), params, lhs, rhs, margin, status, informational: false, note: String::new() }
    }

    /// lhs ≥ rhs·(1 − slack).
    pub fn lower(id: &str, params: Vec<(String, f64)>, lhs: f64, rhs: f64, slack: f64) -> Self {
        let margin = lhs - rhs * (1.0 - slack);
        let status = if margin >= 0.0 { Status::Pass } else { Status::Fail };
        Self { id: id.into(), params, lhs, rhs, margin, status, informational: false, note: String::new() }
    }

    /// |lhs − rhs| ≤ tol.
    pub fn close(id: &str, params: Vec<(String, f64)>, lhs: f64, rhs: f64, tol: f64) -> Self {
        let margin = tol - (lhs - rhs).abs();
        let status = if margin >= 0.0 { Status::Pass } else { Status::Fail };
        Self { id: id.into(), params, lhs, rhs, margin, status, informational: false, note: String::new() }
    }

    pub fn with_status(mut self, status: Status) -> Self {
        self.status = status;
        self
    }

    pub fn informational(mut self) -> Self {
        self.informational = true;
        self
    }

    pub fn note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub fn counts(&self) -> bool {
        !self.informational && self.status != Status::CounterRegime
    }
}

pub(crate) fn p(name: &str, value: f64) -> (String, f64) {
    (name.to_string(), value)
}

/// True when no counted check failed.
pub fn all_pass(checks: &[BoundCheck]) -> bool {
    checks.iter().filter(|c| c.counts()).all(|c| c.status != Status::Fail)
}
