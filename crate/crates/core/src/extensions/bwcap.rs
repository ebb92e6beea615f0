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


//! MPTCP bandwidth cap: the client marks its cellular subflow and keeps
//! sending a cap; the server turns it into a cwnd clamp on that subflow.

use super::options::BwCapOption;
use crate::hookrt::{ExtensionProgram, HookFlagSet, HookOp, SockField, SockOpsContext};
use crate::simnet::{DeviceType, SimTime};

/// Clamp in segments for a cap in bytes/s: max(1, floor(cap·srtt/mss)).
pub fn cwnd_clamp(cap: u32, srtt_us: u64, mss: u64) -> u64 {
    if mss == 0 {
        return 1;
    }
    (u128::from(cap) * u128::from(srtt_us) / (1_000_000 * u128::from(mss))).max(1) as u64
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BwCapClientParams {
    /// Cap in bytes per second.
    pub cap: u32,
    /// Seconds into the run before the option is first sent.
    #[serde(default)]
    pub start_after_s: f64,
    /// Received data segments between resends.
    #[serde(default = "ten")]
    pub every: u64,
}

fn ten() -> u64 {
    10
}

#[derive(Debug, Clone)]
pub struct BwCapClient {
    name: String,
    opt: BwCapOption,
    start_after: SimTime,
    every: u64,
}

impl BwCapClient {
    pub fn new(name: &str, p: BwCapClientParams) -> Self {
        BwCapClient {
            name: name.to_string(),
            opt: BwCapOption { cap: p.cap },
            start_after: SimTime::from_secs_f64(p.start_after_s),
            every: p.every.max(1),
        }
    }
}

impl ExtensionProgram for BwCapClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::TcpConnect => ctx.enable(HookFlagSet::MPTCP_SUBFLOW),
            HookOp::MptcpSubflowEstablished => {
                if ctx.device_type() == Some(DeviceType::Cellular) {
                    ctx.enable(HookFlagSet::MPTCP_OPTION_WRITE);
                }
            }
            HookOp::MptcpOptionsWrite => {
                if ctx.now() < self.start_after {
                    return;
                }
                let segs_in = ctx.get_sock_field(SockField::DataSegsIn).unwrap_or(0);
                let last = ctx.ext_get("last").map(|v| u64::from_be_bytes(v.try_into().unwrap_or([0; 8])));
                if last.is_none_or(|l| segs_in >= l + self.every) {
                    ctx.mptcp_out = Some(self.opt.record());
                    ctx.ext_put("last", segs_in.to_be_bytes().to_vec());
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct BwCapServer {
    name: String,
}

impl BwCapServer {
    pub fn new(name: &str) -> Self {
        BwCapServer { name: name.to_string() }
    }
}

impl ExtensionProgram for BwCapServer {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::PassiveEstablished => ctx.enable(HookFlagSet::MPTCP_PARSE),
            HookOp::MptcpParseOptions => {
                let Some(rec) = ctx.mptcp_in else { return };
                let Ok(opt) = BwCapOption::decode(rec) else { return };
                let srtt = ctx.get_sock_field(SockField::SrttUs).unwrap_or(0);
                let mss = ctx.get_sock_field(SockField::Mss).unwrap_or(0);
                if srtt == 0 {
                    return;
                }
                let _ = ctx.set_sock_field(SockField::CwndClamp, cwnd_clamp(opt.cap, srtt, mss));
            }
            _ => {}
        }
    }
}
