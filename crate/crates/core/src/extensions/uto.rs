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


//! User Timeout: the client advertises a timeout once the connection is up;
//! the peer installs it as its local user timeout.

use super::options::UtoOption;
use crate::hookrt::{ExtensionProgram, HookFlagSet, HookOp, SockField, SockOpsContext};
use crate::simnet::SimTime;
use crate::wire::{kind, MAX_OPTION_SPACE};

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtoSenderParams {
    /// Advertised timeout in seconds.
    pub timeout_s: f64,
}

#[derive(Debug, Clone)]
pub struct UtoSender {
    name: String,
    opt: UtoOption,
}

impl UtoSender {
    pub fn new(name: &str, p: UtoSenderParams) -> Self {
        UtoSender { name: name.to_string(), opt: UtoOption::from_duration(SimTime::from_secs_f64(p.timeout_s)) }
    }
}

impl ExtensionProgram for UtoSender {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::ActiveEstablished | HookOp::PassiveEstablished => ctx.enable(HookFlagSet::OPTION_WRITE),
            HookOp::OptionsSizeCalc => {
                if ctx.args[1] as usize + UtoOption::LEN <= MAX_OPTION_SPACE {
                    ctx.reply = UtoOption::LEN as i64;
                }
            }
            HookOp::OptionsWrite => {
                ctx.option_out = Some(self.opt.encode());
                ctx.disable(HookFlagSet::OPTION_WRITE);
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct UtoReceiver {
    name: String,
}

impl UtoReceiver {
    pub fn new(name: &str) -> Self {
        UtoReceiver { name: name.to_string() }
    }
}

impl ExtensionProgram for UtoReceiver {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::ActiveEstablished | HookOp::PassiveEstablished => ctx.enable(HookFlagSet::PARSE_OPTIONS),
            HookOp::ParseOptions => {
                let Some(opt) = ctx.option_in.filter(|o| o.kind == kind::USER_TIMEOUT) else { return };
                match UtoOption::decode(opt) {
                    Ok(u) => {
                        let us = u.duration().as_nanos() / 1_000;
                        if ctx.set_sock_field(SockField::UserTimeoutUs, us).is_ok() {
                            ctx.disable(HookFlagSet::PARSE_OPTIONS);
                        }
                    }
                    Err(_) => ctx.ext_put("malformed", vec![1]),
                }
            }
            _ => {}
        }
    }
}
