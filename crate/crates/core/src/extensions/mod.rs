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


//! Shipped extension programs and the name-based factory the scenario
//! loader uses.

pub mod appendix;
pub mod bwcap;
pub mod ccreq;
pub mod delack;
pub mod iw;
pub mod options;
pub mod rttthresh;
pub mod uto;

use std::net::Ipv4Addr;

use serde::Deserialize;
use thiserror::Error;

use crate::cc::CcRegistry;
use crate::hookrt::{ConnFilter, ExtensionProgram, Side, SockOpsContext};

pub use appendix::{AppendixParams, AppendixProgram};
pub use bwcap::{cwnd_clamp, BwCapClient, BwCapServer};
pub use ccreq::{CcRequestClient, CcRequestServer};
pub use delack::{DelAckReceiver, DelAckSender};
pub use iw::{IwRequestClient, IwRequestServer};
pub use rttthresh::{RttThresholdClient, RttThresholdServer};
pub use uto::{UtoReceiver, UtoSender};

/// Program names accepted by [`build`].
pub const PROGRAMS: &[&str] = &[
    "appendix",
    "uto_sender",
    "uto_receiver",
    "cc_request_client",
    "cc_request_server",
    "iw_request_client",
    "iw_request_server",
    "delack_sender",
    "delack_receiver",
    "bwcap_client",
    "bwcap_server",
    "rtt_threshold_client",
    "rtt_threshold_server",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtensionError {
    #[error("unknown extension program `{0}`")]
    UnknownProgram(String),
    #[error("bad parameters for `{program}`: {message}")]
    BadParams { program: String, message: String },
    #[error("bad prefix `{0}` (expected a.b.c.d/len)")]
    BadPrefix(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub local_prefix: Option<String>,
    pub remote_prefix: Option<String>,
    pub local_port: Option<u16>,
    pub remote_port: Option<u16>,
}

/// One `[[extension]]` table of a scenario.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionSpec {
    pub program: String,
    /// Registration name; defaults to `program`.
    #[serde(default)]
    pub name: Option<String>,
    pub side: Side,
    #[serde(default)]
    pub params: toml::Table,
    #[serde(default)]
    pub filter: Option<FilterSpec>,
}

impl ExtensionSpec {
    pub fn new(program: &str, side: Side) -> Self {
        ExtensionSpec { program: program.to_string(), name: None, side, params: toml::Table::new(), filter: None }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<toml::Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn display_name(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.program)
    }
}

/// Parses `a.b.c.d/len`; a bare address means /32.
pub fn parse_cidr(s: &str) -> Result<(Ipv4Addr, u8), ExtensionError> {
    let bad = || ExtensionError::BadPrefix(s.to_string());
    let (addr, len) = match s.split_once('/') {
        Some((a, l)) => (a, l.parse::<u8>().map_err(|_| bad())?),
        None => (s, 32),
    };
    if len > 32 {
        return Err(bad());
    }
    Ok((addr.parse().map_err(|_| bad())?, len))
}

impl FilterSpec {
    pub fn to_filter(&self) -> Result<ConnFilter, ExtensionError> {
        Ok(ConnFilter {
            local_prefix: self.local_prefix.as_deref().map(parse_cidr).transpose()?,
            remote_prefix: self.remote_prefix.as_deref().map(parse_cidr).transpose()?,
            local_port: self.local_port,
            remote_port: self.remote_port,
        })
    }
}

struct WithFilter {
    inner: Box<dyn ExtensionProgram>,
    filter: ConnFilter,
}

impl ExtensionProgram for WithFilter {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn filter(&self) -> Option<&ConnFilter> {
        Some(&self.filter)
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        self.inner.handle(ctx)
    }
}

fn params<T: serde::de::DeserializeOwned>(spec: &ExtensionSpec) -> Result<T, ExtensionError> {
    toml::Value::Table(spec.params.clone()).try_into().map_err(|e: toml::de::Error| ExtensionError::BadParams {
        program: spec.program.clone(),
        message: e.message().to_string(),
    })
}

fn no_params(spec: &ExtensionSpec) -> Result<(), ExtensionError> {
    match spec.params.keys().next() {
        None => Ok(()),
        Some(k) => Err(ExtensionError::BadParams {
            program: spec.program.clone(),
            message: format!("unknown field `{k}`"),
        }),
    }
}

/// Instantiates the program a spec names.
pub fn build(spec: &ExtensionSpec) -> Result<Box<dyn ExtensionProgram>, ExtensionError> {
    let name = spec.display_name();
    let prog: Box<dyn ExtensionProgram> = match spec.program.as_str() {
        "appendix" => Box::new(AppendixProgram::new(name, params(spec)?)),
        "uto_sender" => Box::new(UtoSender::new(name, params(spec)?)),
        "uto_receiver" => {
            no_params(spec)?;
            Box::new(UtoReceiver::new(name))
        }
        "cc_request_client" => {
            let p: ccreq::CcRequestParams = params(spec)?;
            let bad = |message: String| ExtensionError::BadParams { program: spec.program.clone(), message };
            let id = match (p.cc, p.id) {
                (Some(cc), None) => CcRegistry::shipped().reverse(&cc).map_err(|e| bad(e.to_string()))?,
                (None, Some(id)) => id,
                _ => return Err(bad("exactly one of `cc` or `id` is required".into())),
            };
            Box::new(CcRequestClient::new(name, id))
        }
        "cc_request_server" => {
            no_params(spec)?;
            Box::new(CcRequestServer::new(name))
        }
        "iw_request_client" => Box::new(IwRequestClient::new(name, params(spec)?)),
        "iw_request_server" => {
            let p: iw::IwServerParams = params(spec)?;
            let trusted = p.trusted.iter().map(|s| parse_cidr(s)).collect::<Result<Vec<_>, _>>()?;
            Box::new(IwRequestServer::new(name, trusted, p.max_iw))
        }
        "delack_sender" => Box::new(DelAckSender::new(name, params(spec)?)),
        "delack_receiver" => {
            no_params(spec)?;
            Box::new(DelAckReceiver::new(name))
        }
        "bwcap_client" => Box::new(BwCapClient::new(name, params(spec)?)),
        "bwcap_server" => {
            no_params(spec)?;
            Box::new(BwCapServer::new(name))
        }
        "rtt_threshold_client" => Box::new(RttThresholdClient::new(name, params(spec)?)),
        "rtt_threshold_server" => {
            no_params(spec)?;
            Box::new(RttThresholdServer::new(name))
        }
        other => return Err(ExtensionError::UnknownProgram(other.to_string())),
    };
    Ok(match &spec.filter {
        Some(f) => Box::new(WithFilter { inner: prog, filter: f.to_filter()? }),
        None => prog,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cidr_parsing() {
        assert_eq!(parse_cidr("10.0.0.0/8").unwrap(), (Ipv4Addr::new(10, 0, 0, 0), 8));
        assert_eq!(parse_cidr("10.0.0.1").unwrap(), (Ipv4Addr::new(10, 0, 0, 1), 32));
        assert!(parse_cidr("10.0.0.0/33").is_err());
        assert!(parse_cidr("nope/8").is_err());
    }

    #[test]
    fn factory_builds_every_program() {
        let with = |p: &str| -> ExtensionSpec {
            let s = ExtensionSpec::new(p, Side::Both);
            match p {
                "uto_sender" => s.with_param("timeout_s", 3),
                "cc_request_client" => s.with_param("cc", "vegas"),
                "iw_request_client" => s.with_param("iw", 40),
                "iw_request_server" => s.with_param("max_iw", 64),
                "delack_sender" => s.with_param("frac_num", 32).with_param("quick_thresh", 8),
                "bwcap_client" => s.with_param("cap", 100_000),
                "rtt_threshold_client" => s.with_param("threshold_ms", 80),
                _ => s,
            }
        };
        for p in PROGRAMS {
            let prog = build(&with(p)).unwrap_or_else(|e| panic!("{p}: {e}"));
            assert_eq!(prog.name(), *p);
        }
    }

    #[test]
    fn factory_rejects_bad_input() {
        assert!(matches!(build(&ExtensionSpec::new("nope", Side::Client)), Err(ExtensionError::UnknownProgram(_))));
        let extra = ExtensionSpec::new("uto_receiver", Side::Server).with_param("x", 1);
        assert!(matches!(build(&extra), Err(ExtensionError::BadParams { .. })));
        let missing = ExtensionSpec::new("uto_sender", Side::Client);
        assert!(matches!(build(&missing), Err(ExtensionError::BadParams { .. })));
        let unknown_cc = ExtensionSpec::new("cc_request_client", Side::Client).with_param("cc", "reno2");
        assert!(build(&unknown_cc).is_err());
    }

    mod programs {
        use super::*;
        use crate::hookrt::testutil::{env, FakeSock};
        use crate::hookrt::{HookEnv, HookFlagSet, HookInput, HookOp, HookRuntime, Role, SockField};
        use crate::simnet::SimTime;
        use crate::wire::TcpOption;

        fn rt(spec: ExtensionSpec) -> (HookRuntime, Vec<crate::hookrt::ProgramHandle>) {
            let mut rt = HookRuntime::new();
            let side = spec.side;
            rt.register(build(&spec).unwrap(), side).unwrap();
            let h = rt.attach(Role::Server);
            let h = if h.is_empty() { rt.attach(Role::Client) } else { h };
            (rt, h)
        }

        fn parse(rt: &mut HookRuntime, h: &[crate::hookrt::ProgramHandle], e: &HookEnv, s: &mut FakeSock, o: &TcpOption) {
            let input = HookInput { option_in: Some(o), ..Default::default() };
            rt.dispatch(HookOp::ParseOptions, h, e, s, None, input);
        }

        fn server_env(syn: bool) -> HookEnv {
            let mut e = env();
            e.role = Role::Server;
            e.is_syn = syn;
            e
        }

        #[test]
        fn iw_server_honours_trusted_non_syn_requests_only() {
            let spec = ExtensionSpec::new("iw_request_server", Side::Server)
                .with_param("max_iw", 64)
                .with_param("trusted", toml::Value::Array(vec!["10.0.0.0/16".into()]));
            let (mut rt, h) = rt(spec);
            let mut s = FakeSock::default();
            rt.dispatch(HookOp::PassiveEstablished, &h, &server_env(false), &mut s, None, HookInput::default());
            assert!(s.flags.contains(HookFlagSet::PARSE_OPTIONS));
            let req = options::IwRequestOption { iw: 100 }.encode();
            parse(&mut rt, &h, &server_env(true), &mut s, &req);
            assert_eq!(s.fields.get(&SockField::InitialCwnd), None);
            parse(&mut rt, &h, &server_env(false), &mut s, &req);
            assert_eq!(s.fields.get(&SockField::InitialCwnd), Some(&64));

            let mut other = server_env(false);
            other.remote.addr = Ipv4Addr::new(192, 168, 0, 1);
            let mut s2 = FakeSock { flags: HookFlagSet::PARSE_OPTIONS, ..Default::default() };
            parse(&mut rt, &h, &other, &mut s2, &req);
            assert_eq!(s2.fields.get(&SockField::InitialCwnd), None);
        }

        #[test]
        fn uto_receiver_applies_and_rejects_zero() {
            let (mut rt, h) = rt(ExtensionSpec::new("uto_receiver", Side::Server));
            let mut s = FakeSock { flags: HookFlagSet::PARSE_OPTIONS, ..Default::default() };
            parse(&mut rt, &h, &server_env(false), &mut s, &TcpOption::new(28, vec![0, 0]).unwrap());
            assert_eq!(s.fields.get(&SockField::UserTimeoutUs), None);
            let opt = options::UtoOption::from_duration(SimTime::from_secs(3)).encode();
            parse(&mut rt, &h, &server_env(false), &mut s, &opt);
            assert_eq!(s.fields.get(&SockField::UserTimeoutUs), Some(&3_000_000));
            assert!(!s.flags.contains(HookFlagSet::PARSE_OPTIONS));
        }

        #[test]
        fn delack_receiver_sets_both_fields() {
            let (mut rt, h) = rt(ExtensionSpec::new("delack_receiver", Side::Server));
            let mut s = FakeSock { flags: HookFlagSet::PARSE_OPTIONS, ..Default::default() };
            let opt = options::DelAckOption { frac_num: 32, quick_thresh: 8 }.encode();
            parse(&mut rt, &h, &server_env(false), &mut s, &opt);
            assert_eq!(s.fields.get(&SockField::DelackFracNum), Some(&32));
            assert_eq!(s.fields.get(&SockField::DelackQuickThresh), Some(&8));
        }

        #[test]
        fn cc_request_client_writes_only_on_handshake_ack() {
            let (mut rt, h) = rt(ExtensionSpec::new("cc_request_client", Side::Client).with_param("cc", "cubic"));
            let mut s = FakeSock::default();
            rt.dispatch(HookOp::ActiveEstablished, &h, &env(), &mut s, None, HookInput::default());
            let mut e = env();
            e.is_handshake_ack = true;
            let block = rt.build_options(&h, &e, &mut s, None, vec![], false);
            assert_eq!(block.options, vec![options::CcRequestOption { cc_id: 2 }.encode()]);
            assert!(!s.flags.contains(HookFlagSet::OPTION_WRITE));
            assert!(rt.build_options(&h, &env(), &mut s, None, vec![], false).options.is_empty());
        }

        #[test]
        fn filter_restricts_program() {
            let mut spec = ExtensionSpec::new("uto_receiver", Side::Server);
            spec.filter = Some(FilterSpec { remote_prefix: Some("172.16.0.0/12".into()), ..Default::default() });
            let (mut rt, h) = rt(spec);
            let mut s = FakeSock::default();
            rt.dispatch(HookOp::PassiveEstablished, &h, &server_env(false), &mut s, None, HookInput::default());
            assert!(s.flags.is_empty());
            assert_eq!(rt.stats().filtered, 1);
        }
    }
}
