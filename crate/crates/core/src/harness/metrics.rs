// Copyright 2026 The tcpext Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


//! Line-delimited measurement log: a header line, one JSON record per
//! sample, then a summary line.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::SimTime;

pub const SCHEMA: &str = "tcpext-metrics/1";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported schema `{0}`")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub scenario: String,
    pub seed: u64,
    pub duration_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Nanoseconds of simulated time.
    pub t: u64,
    pub host: String,
    pub conn: Option<u32>,
    pub subflow: Option<u32>,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

/// Summary statistics; an empty selection is reported as such rather
/// than as zeros.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Statistics {
    Empty,
    Values(Stats),
}

impl Statistics {
    pub fn values(&self) -> Option<&Stats> {
        match self {
            Statistics::Empty => None,
            Statistics::Values(s) => Some(s),
        }
    }

    pub fn mean(&self) -> Option<f64> {
        self.values().map(|s| s.mean)
    }
}

/// Nearest-rank percentile over sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn statistics(values: &[f64]) -> Statistics {
    if values.is_empty() {
        return Statistics::Empty;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let sum: f64 = v.iter().sum();
    Statistics::Values(Stats {
        count: v.len(),
        mean: sum / v.len() as f64,
        p50: percentile(&v, 0.5),
        p95: percentile(&v, 0.95),
        min: v[0],
        max: v[v.len() - 1],
    })
}

/// Record selector. `to` is exclusive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Filter {
    pub host: Option<String>,
    pub conn: Option<u32>,
    pub subflow: Option<u32>,
    pub from: Option<SimTime>,
    pub to: Option<SimTime>,
}

impl Filter {
    pub fn host(h: &str) -> Self {
        Filter { host: Some(h.to_string()), ..Default::default() }
    }

    pub fn subflow(mut self, id: u32) -> Self {
        self.subflow = Some(id);
        self
    }

    pub fn conn(mut self, id: u32) -> Self {
        self.conn = Some(id);
        self
    }

    pub fn between(mut self, from: SimTime, to: SimTime) -> Self {
        self.from = Some(from);
        self.to = Some(to);
        self
    }

    pub fn matches(&self, r: &Record) -> bool {
        self.host.as_ref().is_none_or(|h| *h == r.host)
            && self.conn.is_none_or(|c| r.conn == Some(c))
            && self.subflow.is_none_or(|s| r.subflow == Some(s))
            && self.from.is_none_or(|f| r.t >= f.as_nanos())
            && self.to.is_none_or(|t| r.t < t.as_nanos())
    }
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: BTreeMap<String, Statistics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub header: Header,
    pub records: Vec<Record>,
    selection: Option<Vec<String>>,
}

impl MetricsLog {
    pub fn new(scenario: &str, seed: u64, duration: SimTime) -> Self {
        MetricsLog {
            header: Header {
                schema: SCHEMA.to_string(),
                scenario: scenario.to_string(),
                seed,
                duration_ns: duration.as_nanos(),
            },
            records: Vec::new(),
            selection: None,
        }
    }

    /// Restricts recording to the listed names; `prefix*` matches a prefix.
    /// An empty list records everything.
    pub fn select(&mut self, names: &[String]) {
        self.selection = (!names.is_empty()).then(|| names.to_vec());
    }

    pub fn wants(&self, metric: &str) -> bool {
        self.selection.as_ref().is_none_or(|sel| {
            sel.iter().any(|s| match s.strip_suffix('*') {
                Some(p) => metric.starts_with(p),
                None => s == metric,
            })
        })
    }

    pub fn push(&mut self, t: SimTime, host: &str, conn: Option<u32>, subflow: Option<u32>, metric: &str, value: f64) {
        if !self.wants(metric) {
            return;
        }
        self.records.push(Record {
            t: t.as_nanos(),
            host: host.to_string(),
            conn,
            subflow,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn duration(&self) -> SimTime {
        SimTime::from_nanos(self.header.duration_ns)
    }

    pub fn metrics(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.metric.as_str()).collect()
    }

    pub fn has_metric(&self, metric: &str) -> bool {
        self.records.iter().any(|r| r.metric == metric)
    }

    fn known(&self, metric: &str) -> Result<(), MetricsError> {
        if self.has_metric(metric) {
            Ok(())
        } else {
            Err(MetricsError::UnknownMetric(metric.to_string()))
        }
    }

    pub fn select_records<'a>(&'a self, metric: &'a str, filter: &'a Filter) -> impl Iterator<Item = &'a Record> + 'a {
        self.records.iter().filter(move |r| r.metric == metric && filter.matches(r))
    }

    pub fn values(&self, metric: &str, filter: &Filter) -> Vec<f64> {
        self.select_records(metric, filter).map(|r| r.value).collect()
    }

    pub fn sum(&self, metric: &str, filter: &Filter) -> f64 {
        self.select_records(metric, filter).map(|r| r.value).sum()
    }

    pub fn first(&self, metric: &str, filter: &Filter) -> Option<&Record> {
        self.records.iter().find(|r| r.metric == metric && filter.matches(r))
    }

    /// Per-window sums divided by the window length (a rate per second),
    /// over consecutive full windows from `filter.from` (default 0) up to
    /// `filter.to` (default the run duration).
    pub fn window_rates(&self, metric: &str, filter: &Filter, window: SimTime) -> Result<Vec<(SimTime, f64)>, MetricsError> {
        self.known(metric)?;
        let from = filter.from.unwrap_or(SimTime::ZERO);
        let to = filter.to.unwrap_or(self.duration());
        if window == SimTime::ZERO || to <= from {
            return Ok(Vec::new());
        }
        let n = ((to - from).as_nanos() / window.as_nanos()) as usize;
        let mut sums = vec![0.0; n];
        let inner = Filter { from: Some(from), to: Some(from + SimTime::from_nanos(window.as_nanos() * n as u64)), ..filter.clone() };
        for r in self.select_records(metric, &inner) {
            let i = ((r.t - from.as_nanos()) / window.as_nanos()) as usize;
            sums[i] += r.value;
        }
        let w = window.as_secs_f64();
        Ok(sums.into_iter().enumerate().map(|(i, s)| (from + SimTime::from_nanos(window.as_nanos() * i as u64), s / w)).collect())
    }

    /// Statistics of a metric. With a window, the statistics are over the
    /// per-window rates (see [`MetricsLog::window_rates`]).
    pub fn summarize(&self, metric: &str, window: Option<SimTime>) -> Result<Statistics, MetricsError> {
        self.summarize_where(metric, &Filter::default(), window)
    }

    pub fn summarize_where(&self, metric: &str, filter: &Filter, window: Option<SimTime>) -> Result<Statistics, MetricsError> {
        self.known(metric)?;
        let values = match window {
            None => self.values(metric, filter),
            Some(w) => self.window_rates(metric, filter, w)?.into_iter().map(|(_, v)| v).collect(),
        };
        Ok(statistics(&values))
    }

    pub fn summary(&self) -> BTreeMap<String, Statistics> {
        let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            by.entry(&r.metric).or_default().push(r.value);
        }
        by.into_iter().map(|(k, v)| (k.to_string(), statistics(&v))).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s.push_str(&serde_json::to_string(&SummaryLine { summary: self.summary() }).expect("summary serializes"));
        s.push('\n');
        s
    }

    /// Parses a log; the summary line is checked against the records.
    pub fn from_jsonl(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let err = |line: usize, e: serde_json::Error| MetricsError::Parse { line: line + 1, message: e.to_string() };
        let (i, first) = lines.next().ok_or(MetricsError::Parse { line: 1, message: "empty log".into() })?;
        let header: Header = serde_json::from_str(first).map_err(|e| err(i, e))?;
        if header.schema != SCHEMA {
            return Err(MetricsError::Schema(header.schema));
        }
        let mut records = Vec::new();
        let mut summary = None;
        for (i, l) in lines {
            if summary.is_some() {
                return Err(MetricsError::Parse { line: i + 1, message: "content after summary".into() });
            }
            if l.starts_with("{\"summary\"") {
                summary = Some((i, serde_json::from_str::<SummaryLine>(l).map_err(|e| err(i, e))?));
            } else {
                records.push(serde_json::from_str::<Record>(l).map_err(|e| err(i, e))?);
            }
        }
        let log = MetricsLog { header, records, selection: None };
        if let Some((i, s)) = summary {
            if s.summary != log.summary() {
                return Err(MetricsError::Parse { line: i + 1, message: "summary does not match records".into() });
            }
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, MetricsError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}
