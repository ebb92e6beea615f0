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


//! MPTCP delay threshold: once a backup subflow has joined, the client
//! tells the server, on the master subflow, the RTT above which backups
//! should start carrying data.

use super::options::RttThresholdOption;
use crate::hookrt::{ExtensionProgram, HookFlagSet, HookOp, SockOpsContext};
use crate::simnet::SimTime;

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RttThresholdClientParams {
    pub threshold_ms: u16,
    #[serde(default = "three")]
    pub repeat: u32,
}

fn three() -> u32 {
    3
}

#[derive(Debug, Clone)]
pub struct RttThresholdClient {
    name: String,
    opt: RttThresholdOption,
    repeat: u32,
}

impl RttThresholdClient {
    pub fn new(name: &str, p: RttThresholdClientParams) -> Self {
        RttThresholdClient {
            name: name.to_string(),
            opt: RttThresholdOption { threshold_ms: p.threshold_ms },
            repeat: p.repeat.max(1),
        }
    }
}

impl ExtensionProgram for RttThresholdClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::TcpConnect => {
                if ctx.is_master() == Some(true) {
                    ctx.enable(HookFlagSet::MPTCP_OPTION_WRITE);
                }
            }
            HookOp::MptcpOptionsWrite => {
                if ctx.meta_joins_established().unwrap_or(0) == 0 {
                    return;
                }
                ctx.mptcp_out = Some(self.opt.record());
                let sent = ctx.ext_get("sent").map_or(0, |v| v[0] as u32) + 1;
                ctx.ext_put("sent", vec![sent.min(255) as u8]);
                if sent >= self.repeat {
                    ctx.disable(HookFlagSet::MPTCP_OPTION_WRITE);
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct RttThresholdServer {
    name: String,
}

impl RttThresholdServer {
    pub fn new(name: &str) -> Self {
        RttThresholdServer { name: name.to_string() }
    }
}

impl ExtensionProgram for RttThresholdServer {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::PassiveEstablished => ctx.enable(HookFlagSet::MPTCP_PARSE),
            HookOp::MptcpParseOptions => {
                let Some(rec) = ctx.mptcp_in else { return };
                if let Ok(opt) = RttThresholdOption::decode(rec) {
                    ctx.set_meta_rtt_threshold(Some(SimTime::from_millis(u64::from(opt.threshold_ms))));
                }
            }
            _ => {}
        }
    }
}
