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


//! Scenario files: TOML describing hosts, links, connections with their
//! application workload, and the extension programs to load.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use super::apps::{GenerateSpec, Manifest, ManifestError, ObjectSpec};
use crate::extensions::{self, ExtensionError, ExtensionSpec};
use crate::mptcp::Scheduler;
use crate::simnet::{Blackhole, DelayChange, DeviceType, LinkSpec, SimTime};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("{field}: {source}")]
    Manifest { field: String, source: ManifestError },
    #[error("{field}: {source}")]
    Extension { field: String, source: ExtensionError },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlackholeSpec {
    pub start_s: f64,
    #[serde(default)]
    pub end_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayChangeSpec {
    pub at_s: f64,
    pub delay_ms: f64,
}

/// Linear one-way delay ramp, applied in `step_ms` increments.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayRampSpec {
    pub from_ms: f64,
    pub to_ms: f64,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default = "default_step")]
    pub step_ms: f64,
}

fn default_step() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkCfg {
    pub name: String,
    pub a: String,
    pub b: String,
    #[serde(default)]
    pub a_addr: Option<Ipv4Addr>,
    #[serde(default)]
    pub b_addr: Option<Ipv4Addr>,
    pub rate_mbps: f64,
    /// One-way propagation delay.
    pub delay_ms: f64,
    #[serde(default = "default_queue")]
    pub queue_cap: usize,
    #[serde(default)]
    pub device: DeviceType,
    #[serde(default)]
    pub loss: f64,
    #[serde(default)]
    pub blackhole: Vec<BlackholeSpec>,
    #[serde(default)]
    pub delay_change: Vec<DelayChangeSpec>,
    #[serde(default)]
    pub delay_ramp: Option<DelayRampSpec>,
}

fn default_queue() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnKind {
    #[default]
    Tcp,
    Mptcp,
}

/// Which way application bytes flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferDir {
    /// Server to client.
    #[default]
    Download,
    Upload,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubflowSpec {
    pub link: String,
    #[serde(default)]
    pub backup: bool,
    /// Delay after the master is established before joining.
    #[serde(default)]
    pub delay_s: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum AppSpec {
    /// Unbounded (or `bytes`-bounded) transfer starting at connect.
    Bulk {
        #[serde(default)]
        direction: TransferDir,
        #[serde(default)]
        bytes: Option<u64>,
    },
    /// One transfer; its completion time is recorded as `fct_ms`.
    Flow {
        #[serde(default)]
        direction: TransferDir,
        bytes: u64,
    },
    /// Request/response fetches of a dependency graph of objects over
    /// `connections` persistent connections.
    MultiObject {
        #[serde(default = "one")]
        connections: usize,
        #[serde(default = "default_request")]
        request_bytes: u64,
        #[serde(default)]
        objects: Vec<ObjectSpec>,
        #[serde(default)]
        generate: Option<GenerateSpec>,
    },
    /// `chunk` bytes every `interval_ms`.
    Periodic {
        #[serde(default)]
        direction: TransferDir,
        interval_ms: f64,
        chunk: u64,
    },
}

fn one() -> usize {
    1
}

fn default_request() -> u64 {
    200
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub client: String,
    pub server: String,
    #[serde(default)]
    pub kind: ConnKind,
    /// Path of a TCP connection; defaults to the first link joining the
    /// two hosts.
    #[serde(default)]
    pub link: Option<String>,
    #[serde(default, rename = "subflow")]
    pub subflows: Vec<SubflowSpec>,
    #[serde(default)]
    pub scheduler: Scheduler,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default = "default_port")]
    pub port: u16,
    /// Default controller on both ends.
    #[serde(default = "default_cc")]
    pub cc: String,
    #[serde(default = "default_iw")]
    pub iw: u32,
    /// Receiver immediate-ACK threshold in segments.
    #[serde(default)]
    pub delack_threshold: Option<u32>,
    pub app: AppSpec,
}

fn default_port() -> u16 {
    80
}

fn default_cc() -> String {
    "cubic".to_string()
}

fn default_iw() -> u32 {
    crate::tcpcore::DEFAULT_IW
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub duration_s: f64,
    /// Metric names to record (`prefix*` allowed); empty records all.
    #[serde(default)]
    pub metrics: Vec<String>,
    /// Keep a per-event text trace.
    #[serde(default)]
    pub trace: bool,
    #[serde(rename = "host")]
    pub hosts: Vec<HostSpec>,
    #[serde(rename = "link")]
    pub links: Vec<LinkCfg>,
    #[serde(default, rename = "connection")]
    pub connections: Vec<ConnSpec>,
    #[serde(default, rename = "extension")]
    pub extensions: Vec<ExtensionSpec>,
    /// Parameter sweeps: dotted path to a list of values.
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

fn parse_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
    ConfigError::Parse { line, column, message: e.message().to_string() }
}

/// Reads a scenario file into its raw TOML tree.
pub fn load_table(path: &Path) -> Result<(toml::Table, String), ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    let table = text.parse::<toml::Table>().map_err(|e| parse_error(&text, &e))?;
    Ok((table, text))
}

/// Sets `path` (dot-separated; numeric parts index arrays of tables) in a
/// raw scenario tree.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = path.split('.').collect();
    let bad = |m: &str| invalid(path, m);
    if parts.len() == 1 {
        table.insert(path.to_string(), value);
        return Ok(());
    }
    let mut cur: &mut toml::Value = table.get_mut(parts[0]).ok_or_else(|| bad("no such key"))?;
    for (i, p) in parts.iter().enumerate().skip(1) {
        let last = i == parts.len() - 1;
        cur = match cur {
            toml::Value::Array(a) => {
                let idx: usize = p.parse().map_err(|_| bad("expected an array index"))?;
                a.get_mut(idx).ok_or_else(|| bad("index out of range"))?
            }
            toml::Value::Table(t) => {
                if last {
                    t.insert(p.to_string(), value);
                    return Ok(());
                }
                t.get_mut(*p).ok_or_else(|| bad("no such key"))?
            }
            _ => return Err(bad("path runs through a scalar")),
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    Ok(())
}

/// Parses a command-line sweep value: integer, float, bool, else string.
pub fn parse_value(s: &str) -> toml::Value {
    if let Ok(i) = s.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = s.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = s.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(s.to_string())
    }
}

/// Variant-name form of a sweep value, safe to use as a file name.
fn value_label(v: &toml::Value) -> String {
    let raw = match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Array(a) => a.iter().map(value_label).collect::<Vec<_>>().join("+"),
        other => other.to_string(),
    };
    raw.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.+=".contains(c) { c } else { '_' }).collect()
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let s: Scenario = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        let text = toml::to_string(&table).map_err(|e| invalid("<root>", e.to_string()))?;
        Self::parse(&text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let (_, text) = load_table(path)?;
        Self::parse(&text)
    }

    /// One scenario per combination of sweep values (the file's `[sweep]`
    /// table, overridden by `extra`), each named `<name>-<key>=<value>…`.
    /// Without sweeps the scenario itself is the only variant.
    pub fn variants(table: &toml::Table, extra: &[(String, Vec<toml::Value>)]) -> Result<Vec<Self>, ConfigError> {
        let base = Self::from_table(table.clone())?;
        let mut sweeps: BTreeMap<String, Vec<toml::Value>> = base.sweep.clone();
        for (k, v) in extra {
            sweeps.insert(k.clone(), v.clone());
        }
        let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for (k, vals) in &sweeps {
            if vals.is_empty() {
                return Err(invalid(format!("sweep.{k}"), "no values"));
            }
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    vals.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((k.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        let mut out = Vec::new();
        for combo in combos {
            let mut t = table.clone();
            t.remove("sweep");
            let mut name = base.name.clone();
            for (k, v) in &combo {
                set_path(&mut t, k, v.clone())?;
                let short = k.rsplit('.').next().unwrap_or(k);
                name.push_str(&format!("-{short}={}", value_label(v)));
            }
            t.insert("name".into(), toml::Value::String(name));
            out.push(Self::from_table(t)?);
        }
        Ok(out)
    }

    pub fn duration(&self) -> SimTime {
        SimTime::from_secs_f64(self.duration_s)
    }

    pub fn host_index(&self, name: &str) -> Option<usize> {
        self.hosts.iter().position(|h| h.name == name)
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    /// Endpoint addresses of link `i`: explicit, else 10.0.i.1 / 10.0.i.2.
    pub fn link_addrs(&self, i: usize) -> (Ipv4Addr, Ipv4Addr) {
        let l = &self.links[i];
        let n = i as u8;
        (l.a_addr.unwrap_or(Ipv4Addr::new(10, 0, n, 1)), l.b_addr.unwrap_or(Ipv4Addr::new(10, 0, n, 2)))
    }

    pub fn link_spec(&self, i: usize) -> LinkSpec {
        let l = &self.links[i];
        let mut spec = LinkSpec::new(&l.name, l.rate_mbps * 1e6, SimTime::from_secs_f64(l.delay_ms / 1e3));
        spec.queue_cap = l.queue_cap;
        spec.device = l.device;
        spec.loss_prob = l.loss;
        spec.blackholes = l
            .blackhole
            .iter()
            .map(|b| Blackhole { start: SimTime::from_secs_f64(b.start_s), end: b.end_s.map(SimTime::from_secs_f64) })
            .collect();
        spec.delay_changes = l
            .delay_change
            .iter()
            .map(|c| DelayChange { at: SimTime::from_secs_f64(c.at_s), delay: SimTime::from_secs_f64(c.delay_ms / 1e3) })
            .collect();
        if let Some(r) = &l.delay_ramp {
            let steps = (((r.end_s - r.start_s) * 1e3) / r.step_ms).ceil().max(1.0) as usize;
            for k in 0..=steps {
                let frac = k as f64 / steps as f64;
                spec.delay_changes.push(DelayChange {
                    at: SimTime::from_secs_f64(r.start_s + (r.end_s - r.start_s) * frac),
                    delay: SimTime::from_secs_f64((r.from_ms + (r.to_ms - r.from_ms) * frac) / 1e3),
                });
            }
        }
        spec.delay_changes.sort_by_key(|c| c.at);
        spec
    }

    /// Link joining `client` and `server`, either way round.
    pub fn joins(&self, link: usize, client: usize, server: usize) -> bool {
        let l = &self.links[link];
        let (a, b) = (self.host_index(&l.a), self.host_index(&l.b));
        (a == Some(client) && b == Some(server)) || (a == Some(server) && b == Some(client))
    }

    pub fn conn_link(&self, c: &ConnSpec) -> Option<usize> {
        let (ci, si) = (self.host_index(&c.client)?, self.host_index(&c.server)?);
        match &c.link {
            Some(name) => self.link_index(name),
            None => (0..self.links.len()).find(|&i| self.joins(i, ci, si)),
        }
    }

    pub fn manifest(&self, conn: usize) -> Option<Manifest> {
        match &self.connections[conn].app {
            AppSpec::MultiObject { objects, generate, .. } => Some(match generate {
                Some(g) => Manifest::generate(g, self.seed ^ crate::simnet::label_hash(&format!("manifest{conn}"))),
                None => Manifest::new(objects.clone()),
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(invalid("duration_s", "must be positive"));
        }
        let within = |field: String, t: f64| {
            if (0.0..=self.duration_s).contains(&t) {
                Ok(())
            } else {
                Err(invalid(field, format!("time {t} s outside [0, {}]", self.duration_s)))
            }
        };
        for (i, h) in self.hosts.iter().enumerate() {
            if self.hosts[..i].iter().any(|o| o.name == h.name) {
                return Err(invalid(format!("host[{i}].name"), format!("duplicate host `{}`", h.name)));
            }
        }
        let mut addrs = BTreeMap::new();
        for (i, l) in self.links.iter().enumerate() {
            let f = |k: &str| format!("link[{i}].{k}");
            if self.links[..i].iter().any(|o| o.name == l.name) {
                return Err(invalid(f("name"), format!("duplicate link `{}`", l.name)));
            }
            for (k, h) in [("a", &l.a), ("b", &l.b)] {
                if self.host_index(h).is_none() {
                    return Err(invalid(f(k), format!("unknown host `{h}`")));
                }
            }
            if l.a == l.b {
                return Err(invalid(f("b"), "link must join two different hosts"));
            }
            if !(l.rate_mbps > 0.0) || !(l.delay_ms >= 0.0) {
                return Err(invalid(f("rate_mbps"), "rate must be positive and delay non-negative"));
            }
            if !(0.0..1.0).contains(&l.loss) {
                return Err(invalid(f("loss"), "loss must be in [0, 1)"));
            }
            for (j, b) in l.blackhole.iter().enumerate() {
                within(f(&format!("blackhole[{j}].start_s")), b.start_s)?;
                if let Some(e) = b.end_s {
                    within(f(&format!("blackhole[{j}].end_s")), e)?;
                }
            }
            for (j, c) in l.delay_change.iter().enumerate() {
                within(f(&format!("delay_change[{j}].at_s")), c.at_s)?;
            }
            if let Some(r) = &l.delay_ramp {
                within(f("delay_ramp.start_s"), r.start_s)?;
                within(f("delay_ramp.end_s"), r.end_s)?;
                if r.end_s < r.start_s || !(r.step_ms > 0.0) {
                    return Err(invalid(f("delay_ramp"), "ramp must end after it starts with a positive step"));
                }
            }
            let (a, b) = self.link_addrs(i);
            for addr in [a, b] {
                if let Some(o) = addrs.insert(addr, i) {
                    return Err(invalid(f("a_addr"), format!("address {addr} already used by link[{o}]")));
                }
            }
        }
        for (i, c) in self.connections.iter().enumerate() {
            let f = |k: &str| format!("connection[{i}].{k}");
            let ci = self.host_index(&c.client).ok_or_else(|| invalid(f("client"), format!("unknown host `{}`", c.client)))?;
            let si = self.host_index(&c.server).ok_or_else(|| invalid(f("server"), format!("unknown host `{}`", c.server)))?;
            if ci == si {
                return Err(invalid(f("server"), "client and server must differ"));
            }
            within(f("start_s"), c.start_s)?;
            if crate::cc::create::<f64>(&c.cc).is_err() {
                return Err(invalid(f("cc"), format!("unknown controller `{}`", c.cc)));
            }
            if c.iw == 0 {
                return Err(invalid(f("iw"), "must be positive"));
            }
            match c.kind {
                ConnKind::Tcp => {
                    if !c.subflows.is_empty() {
                        return Err(invalid(f("subflow"), "subflows need kind = \"mptcp\""));
                    }
                    let link = self.conn_link(c).ok_or_else(|| invalid(f("link"), "no link joins client and server"))?;
                    if !self.joins(link, ci, si) {
                        return Err(invalid(f("link"), "link does not join client and server"));
                    }
                }
                ConnKind::Mptcp => {
                    if c.link.is_some() {
                        return Err(invalid(f("link"), "MPTCP connections list the master as subflow 0"));
                    }
                    if c.subflows.is_empty() {
                        return Err(invalid(f("subflow"), "an MPTCP connection needs at least one subflow"));
                    }
                    if c.subflows[0].backup {
                        return Err(invalid(f("subflow[0].backup"), "the master subflow cannot be a backup"));
                    }
                    for (j, s) in c.subflows.iter().enumerate() {
                        let l = self
                            .link_index(&s.link)
                            .ok_or_else(|| invalid(f(&format!("subflow[{j}].link")), format!("unknown link `{}`", s.link)))?;
                        if !self.joins(l, ci, si) {
                            return Err(invalid(f(&format!("subflow[{j}].link")), "link does not join client and server"));
                        }
                        within(f(&format!("subflow[{j}].delay_s")), s.delay_s)?;
                    }
                }
            }
            match &c.app {
                AppSpec::MultiObject { connections, objects, generate, .. } => {
                    if *connections == 0 {
                        return Err(invalid(f("app.connections"), "must be positive"));
                    }
                    if c.kind == ConnKind::Mptcp {
                        return Err(invalid(f("app.model"), "multi_object runs over plain TCP"));
                    }
                    if objects.is_empty() == generate.is_none() {
                        return Err(invalid(f("app"), "give exactly one of `objects` or `generate`"));
                    }
                    let m = self.manifest(i).expect("multi-object app");
                    m.order().map_err(|source| ConfigError::Manifest { field: f("app.objects"), source })?;
                }
                AppSpec::Periodic { interval_ms, .. } if !(*interval_ms > 0.0) => {
                    return Err(invalid(f("app.interval_ms"), "must be positive"));
                }
                _ => {}
            }
        }
        for (i, e) in self.extensions.iter().enumerate() {
            extensions::build(e).map_err(|source| ConfigError::Extension { field: format!("extension[{i}]"), source })?;
        }
        Ok(())
    }
}
