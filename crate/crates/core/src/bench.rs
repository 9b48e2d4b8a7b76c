//! Serving-benchmark summaries: latency percentiles, sustained throughput,
//! peak and saturation detection across a QPS sweep, and bucket padding.
//!
//! Percentiles are nearest-rank: the p-th percentile of n sorted values is
//! the value at 1-based rank `ceil(p/100 * n)`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Target request rate; `Qps::INF` is the burst mode where every request is
/// sent at once.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Qps(pub f64);

impl Qps {
    pub const INF: Qps = Qps(f64::INFINITY);

    pub fn is_burst(self) -> bool {
        self.0.is_infinite()
    }
}

impl fmt::Display for Qps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_burst() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Qps {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.is_burst() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Qps {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v > 0.0 => Ok(Qps(v)),
            Raw::Text(t) if matches!(t.to_ascii_lowercase().as_str(), "inf" | "infinity") => Ok(Qps::INF),
            _ => Err(serde::de::Error::custom(
                "qps_target must be a positive number or \"inf\"",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub qps_target: Qps,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub ttft_ms: f64,
    pub e2e_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub itl_ms: Option<Vec<f64>>,
    /// Send time relative to the start of the run. When absent, request `i`
    /// of a run is taken to start at `i / qps` seconds (all at 0 in burst
    /// mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_ms: Option<f64>,
}

impl RequestRecord {
    fn validate(&self) -> Result<()> {
        if self.output_tokens < 1 {
            return Err(Error::Invalid("request has no output tokens".into()));
        }
        if !(self.ttft_ms >= 0.0 && self.e2e_ms >= self.ttft_ms) {
            return Err(Error::Invalid(format!(
                "request has e2e {} ms < ttft {} ms",
                self.e2e_ms, self.ttft_ms
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub qps_target: Qps,
    pub median_ttft_ms: f64,
    pub p99_itl_ms: Option<f64>,
    pub median_tpot_ms: Option<f64>,
    pub output_throughput_tok_s: f64,
    pub request_count: usize,
}

/// Nearest-rank percentile of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Summarizes one run. All records are taken to belong to the same QPS level
/// (the first record's).
pub fn summarize_run(records: &[RequestRecord]) -> Result<RunSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Invalid("cannot summarize an empty run".into()))?;
    for r in records {
        r.validate()?;
    }
    let qps = first.qps_target;

    let ttfts: Vec<f64> = records.iter().map(|r| r.ttft_ms).collect();
    let itls: Vec<f64> = records
        .iter()
        .flat_map(|r| r.itl_ms.iter().flatten().copied())
        .collect();
    let tpots: Vec<f64> = records
        .iter()
        .filter(|r| r.output_tokens > 1)
        .map(|r| (r.e2e_ms - r.ttft_ms) / (r.output_tokens - 1) as f64)
        .collect();

    let starts: Vec<f64> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.start_ms
                .unwrap_or(if qps.is_burst() { 0.0 } else { i as f64 * 1000.0 / qps.0 })
        })
        .collect();
    let begin = starts.iter().copied().fold(f64::INFINITY, f64::min);
    let end = starts
        .iter()
        .zip(records)
        .map(|(s, r)| s + r.e2e_ms)
        .fold(f64::NEG_INFINITY, f64::max);
    let makespan_s = (end - begin) / 1000.0;
    if makespan_s <= 0.0 {
        return Err(Error::Invalid("run has zero makespan".into()));
    }
    let output_tokens: u64 = records.iter().map(|r| r.output_tokens).sum();

    Ok(RunSummary {
        qps_target: qps,
        median_ttft_ms: percentile(&ttfts, 50.0).unwrap_or(0.0),
        p99_itl_ms: percentile(&itls, 99.0),
        median_tpot_ms: percentile(&tpots, 50.0),
        output_throughput_tok_s: output_tokens as f64 / makespan_s,
        request_count: records.len(),
    })
}

/// Splits records into runs by `qps_target`, ordered by ascending QPS (burst
/// last). Record order within a run is preserved.
pub fn group_runs(records: &[RequestRecord]) -> Vec<(Qps, Vec<RequestRecord>)> {
    let mut runs: Vec<(Qps, Vec<RequestRecord>)> = Vec::new();
    for r in records {
        match runs.iter_mut().find(|(q, _)| q.0.total_cmp(&r.qps_target.0).is_eq()) {
            Some((_, run)) => run.push(r.clone()),
            None => runs.push((r.qps_target, vec![r.clone()])),
        }
    }
    runs.sort_by(|a, b| a.0 .0.total_cmp(&b.0 .0));
    runs
}

/// Run with the highest throughput; ties go to the lower QPS.
pub fn peak_throughput(summaries: &[RunSummary]) -> Result<(Qps, f64)> {
    let mut best: Option<&RunSummary> = None;
    for s in summaries {
        best = match best {
            None => Some(s),
            Some(b) if s.output_throughput_tok_s > b.output_throughput_tok_s => Some(s),
            Some(b) if s.output_throughput_tok_s == b.output_throughput_tok_s && s.qps_target.0 < b.qps_target.0 => {
                Some(s)
            }
            keep => keep,
        };
    }
    best.map(|b| (b.qps_target, b.output_throughput_tok_s))
        .ok_or_else(|| Error::Invalid("no runs to compare".into()))
}

pub const DEFAULT_SATURATION_EPSILON: f64 = 0.05;

/// First QPS level whose throughput gain over the previous level is below
/// `epsilon` (relative); the highest level if throughput never flattens.
pub fn saturation_qps(summaries: &[RunSummary], epsilon: f64) -> Result<Qps> {
    if summaries.len() < 2 {
        return Err(Error::Invalid("saturation needs at least two QPS levels".into()));
    }
    let mut sorted: Vec<&RunSummary> = summaries.iter().collect();
    sorted.sort_by(|a, b| a.qps_target.0.total_cmp(&b.qps_target.0));
    for pair in sorted.windows(2) {
        let prev = pair[0].output_throughput_tok_s;
        let gain = pair[1].output_throughput_tok_s - prev;
        if gain < epsilon * prev {
            return Ok(pair[1].qps_target);
        }
    }
    Ok(sorted.last().unwrap().qps_target)
}

pub const DEFAULT_BUCKETS: [usize; 8] = [16, 32, 64, 128, 256, 512, 1024, 2048];

/// Smallest bucket holding `n_tokens`, and the padding it adds.
pub fn bucket_pad(n_tokens: usize, buckets: &[usize]) -> Result<(usize, usize)> {
    if buckets.is_empty() || buckets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("buckets must be a non-empty ascending list".into()));
    }
    let idx = buckets.partition_point(|&b| b < n_tokens);
    match buckets.get(idx) {
        Some(&bucket) => Ok((bucket, bucket - n_tokens)),
        None => Err(Error::Invalid(format!(
            "{n_tokens} tokens exceeds max bucket {}",
            buckets[buckets.len() - 1]
        ))),
    }
}
