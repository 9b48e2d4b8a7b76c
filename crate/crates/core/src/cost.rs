//! Training, serving and total-cost-of-ownership arithmetic.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SECONDS_PER_HOUR: f64 = 3600.0;
const PER_MILLION: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub hourly_rate: f64,
    pub wall_hours: f64,
    pub throughput_tok_s: f64,
}

impl CostInputs {
    pub fn validate(&self) -> Result<()> {
        positive("hourly_rate", self.hourly_rate)?;
        positive("wall_hours", self.wall_hours)?;
        positive("throughput_tok_s", self.throughput_tok_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub hourly_rate: f64,
    /// Zero for serving reports, which describe a rate rather than a job.
    pub total_cost: f64,
    pub tokens_per_hour: f64,
    #[serde(rename = "dollars_per_1M_tokens")]
    pub dollars_per_1m_tokens: f64,
}

impl CostReport {
    /// `dollars_per_1M == hourly_rate / tokens_per_hour * 1e6`, to a relative
    /// 1e-9.
    pub fn check_consistency(&self) -> Result<()> {
        let expected = self.hourly_rate / self.tokens_per_hour * PER_MILLION;
        if (self.dollars_per_1m_tokens - expected).abs() > expected.abs() * 1e-9 {
            return Err(Error::Invalid(format!(
                "inconsistent cost report: ${}/1M tokens, expected ${expected}",
                self.dollars_per_1m_tokens
            )));
        }
        Ok(())
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

pub fn training_cost(inputs: &CostInputs) -> Result<CostReport> {
    inputs.validate()?;
    let total = inputs.wall_hours * inputs.hourly_rate;
    let tokens = inputs.throughput_tok_s * inputs.wall_hours * SECONDS_PER_HOUR;
    let report = CostReport {
        hourly_rate: inputs.hourly_rate,
        total_cost: total,
        tokens_per_hour: inputs.throughput_tok_s * SECONDS_PER_HOUR,
        dollars_per_1m_tokens: total / tokens * PER_MILLION,
    };
    report.check_consistency()?;
    Ok(report)
}

pub fn serving_cost(hourly_rate: f64, peak_tok_s: f64) -> Result<CostReport> {
    positive("hourly_rate", hourly_rate)?;
    positive("peak_tok_s", peak_tok_s)?;
    let tokens_per_hour = peak_tok_s * SECONDS_PER_HOUR;
    let report = CostReport {
        hourly_rate,
        total_cost: 0.0,
        tokens_per_hour,
        dollars_per_1m_tokens: hourly_rate / tokens_per_hour * PER_MILLION,
    };
    report.check_consistency()?;
    Ok(report)
}

pub fn tco(train: &CostReport, serve_rate: f64, serve_hours: f64) -> Result<f64> {
    if !(serve_hours >= 0.0 && serve_hours.is_finite()) {
        return Err(Error::Config(format!(
            "serve_hours must be non-negative, got {serve_hours}"
        )));
    }
    positive("serve_rate", serve_rate)?;
    Ok(train.total_cost + serve_rate * serve_hours)
}

/// One row of a rendered comparison: a label and its report.
pub struct CostRow<'a> {
    pub label: &'a str,
    pub report: CostReport,
}

/// Markdown table of cost reports, money to cents and tokens/hr in millions.
pub fn render_table(rows: &[CostRow<'_>]) -> String {
    let mut out = String::from("| | $/hr | total | tok/hr | $/1M tok |\n|---|---:|---:|---:|---:|\n");
    for row in rows {
        let r = &row.report;
        let _ = writeln!(
            out,
            "| {} | {:.2} | {:.2} | {:.2}M | {:.2} |",
            row.label,
            r.hourly_rate,
            r.total_cost,
            r.tokens_per_hour / PER_MILLION,
            r.dollars_per_1m_tokens
        );
    }
    out
}
