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


//! Delayed-ACK tuning: the data sender tells its peer how to acknowledge
//! (timeout as a fraction of min RTT, immediate-ACK segment count).

use super::options::DelAckOption;
use crate::hookrt::{ExtensionProgram, HookFlagSet, HookOp, SockField, SockOpsContext};
use crate::wire::{kind, MAX_OPTION_SPACE};

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelAckSenderParams {
    /// Timeout as `frac_num/128` of the receiver's min RTT.
    pub frac_num: u8,
    pub quick_thresh: u8,
    /// Segments that carry the option.
    #[serde(default = "three")]
    pub repeat: u32,
}

fn three() -> u32 {
    3
}

#[derive(Debug, Clone)]
pub struct DelAckSender {
    name: String,
    opt: DelAckOption,
    repeat: u32,
}

impl DelAckSender {
    pub fn new(name: &str, p: DelAckSenderParams) -> Self {
        DelAckSender {
            name: name.to_string(),
            opt: DelAckOption { frac_num: p.frac_num, quick_thresh: p.quick_thresh },
            repeat: p.repeat.max(1),
        }
    }
}

impl ExtensionProgram for DelAckSender {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::ActiveEstablished | HookOp::PassiveEstablished => ctx.enable(HookFlagSet::OPTION_WRITE),
            HookOp::OptionsSizeCalc => {
                if ctx.args[1] as usize + DelAckOption::LEN <= MAX_OPTION_SPACE {
                    ctx.reply = DelAckOption::LEN as i64;
                }
            }
            HookOp::OptionsWrite => {
                ctx.option_out = Some(self.opt.encode());
                let sent = ctx.ext_get("sent").map_or(0, |v| v[0] as u32) + 1;
                ctx.ext_put("sent", vec![sent.min(255) as u8]);
                if sent >= self.repeat {
                    ctx.disable(HookFlagSet::OPTION_WRITE);
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct DelAckReceiver {
    name: String,
}

impl DelAckReceiver {
    pub fn new(name: &str) -> Self {
        DelAckReceiver { name: name.to_string() }
    }
}

impl ExtensionProgram for DelAckReceiver {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::ActiveEstablished | HookOp::PassiveEstablished => ctx.enable(HookFlagSet::PARSE_OPTIONS),
            HookOp::ParseOptions => {
                let Some(opt) = ctx.option_in.filter(|o| o.kind == kind::EXPERIMENTAL_2) else { return };
                let Ok(d) = DelAckOption::decode(opt) else { return };
                let ok = ctx.set_sock_field(SockField::DelackFracNum, u64::from(d.frac_num)).is_ok()
                    && ctx.set_sock_field(SockField::DelackQuickThresh, u64::from(d.quick_thresh)).is_ok();
                if ok {
                    ctx.disable(HookFlagSet::PARSE_OPTIONS);
                }
            }
            _ => {}
        }
    }
}
