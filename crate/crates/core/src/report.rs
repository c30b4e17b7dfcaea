//! Structured outcome of a numerical probe.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    ReportOnly,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub lhs_sup: f64,
    pub rhs_sup: f64,
    pub empirical_constant: f64,
    pub samples: usize,
    /// `lhs_sup / rhs_sup` when `rhs_sup > 0`.
    pub ratio: Option<f64>,
    pub pass: Verdict,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub witnesses: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, Value>,
}

impl ProbeReport {
    pub fn new(probe: &str, lhs_sup: f64, rhs_sup: f64, samples: usize) -> Self {
        let ratio = (rhs_sup > 0.0).then(|| lhs_sup / rhs_sup);
        Self {
            probe: probe.to_string(),
            lhs_sup,
            rhs_sup,
            empirical_constant: ratio.unwrap_or(f64::NAN),
            samples,
            ratio,
            pass: Verdict::ReportOnly,
            witnesses: Vec::new(),
            details: BTreeMap::new(),
        }
    }

    pub fn with_constant(mut self, c: f64) -> Self {
        self.empirical_constant = c;
        self
    }

    pub fn with_verdict(mut self, v: Verdict) -> Self {
        self.pass = v;
        self
    }

    pub fn detail(mut self, key: &str, value: impl Serialize) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        self.details.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(Value::Null),
        );
    }

    pub fn witness(mut self, w: Vec<f64>) -> Self {
        self.witnesses.push(w);
        self
    }

    pub fn passed(&self) -> bool {
        self.pass == Verdict::Pass
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.details.get(key).and_then(Value::as_f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `probe: verdict (lhs .. vs rhs .., constant ..)` on one line.
    pub fn verdict_line(&self) -> String {
        let v = serde_json::to_value(self.pass).unwrap_or(Value::Null);
        format!(
            "{}: {} (lhs {:.4e} vs rhs {:.4e}, constant {:.4})",
            self.probe,
            v.as_str().unwrap_or("?"),
            self.lhs_sup,
            self.rhs_sup,
            self.empirical_constant
        )
    }
}
