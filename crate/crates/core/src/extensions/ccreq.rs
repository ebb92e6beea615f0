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


//! Congestion-control request: the client names a controller in its third
//! handshake ACK and the server switches to it.

use super::options::CcRequestOption;
use crate::cc::CcRegistry;
use crate::hookrt::{ExtensionProgram, HookFlagSet, HookOp, SockField, SockOpsContext};
use crate::wire::{kind, MAX_OPTION_SPACE};

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcRequestParams {
    /// Controller name, or a raw id with `id`.
    #[serde(default)]
    pub cc: Option<String>,
    #[serde(default)]
    pub id: Option<u8>,
}

#[derive(Debug, Clone)]
pub struct CcRequestClient {
    name: String,
    opt: CcRequestOption,
}

impl CcRequestClient {
    pub fn new(name: &str, cc_id: u8) -> Self {
        CcRequestClient { name: name.to_string(), opt: CcRequestOption { cc_id } }
    }
}

impl ExtensionProgram for CcRequestClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::ActiveEstablished => ctx.enable(HookFlagSet::OPTION_WRITE),
            HookOp::OptionsSizeCalc => {
                if !ctx.env.is_handshake_ack {
                    ctx.disable(HookFlagSet::OPTION_WRITE);
                } else if ctx.args[1] as usize + CcRequestOption::LEN <= MAX_OPTION_SPACE {
                    ctx.reply = CcRequestOption::LEN as i64;
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
pub struct CcRequestServer {
    name: String,
    registry: CcRegistry,
}

impl CcRequestServer {
    pub fn new(name: &str) -> Self {
        CcRequestServer { name: name.to_string(), registry: CcRegistry::shipped() }
    }
}

impl ExtensionProgram for CcRequestServer {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::PassiveEstablished => ctx.enable(HookFlagSet::PARSE_OPTIONS),
            HookOp::ParseOptions => {
                let Some(opt) = ctx.option_in.filter(|o| o.kind == kind::EXPERIMENTAL_2) else { return };
                let Ok(req) = CcRequestOption::decode(opt) else { return };
                if self.registry.lookup(req.cc_id).is_err() {
                    ctx.ext_put("unknown_id", vec![req.cc_id]);
                } else {
                    let _ = ctx.set_sock_field(SockField::CcAlgorithmId, u64::from(req.cc_id));
                }
                ctx.disable(HookFlagSet::PARSE_OPTIONS);
            }
            _ => {}
        }
    }
}
