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


//! Initial-window request: the client asks for an IW in the third ACK; the
//! server grants min(request, policy cap) to trusted prefixes before any
//! data leaves.

use std::net::Ipv4Addr;

use super::options::IwRequestOption;
use crate::hookrt::{prefix_contains, ExtensionProgram, HookFlagSet, HookOp, SockField, SockOpsContext};
use crate::wire::{kind, MAX_OPTION_SPACE};

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IwClientParams {
    pub iw: u16,
    /// Also put the request on the SYN (a misbehaving client).
    #[serde(default)]
    pub on_syn: bool,
    #[serde(default = "yes")]
    pub on_handshake_ack: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone)]
pub struct IwRequestClient {
    name: String,
    opt: IwRequestOption,
    on_syn: bool,
    on_handshake_ack: bool,
}

impl IwRequestClient {
    pub fn new(name: &str, p: IwClientParams) -> Self {
        IwRequestClient {
            name: name.to_string(),
            opt: IwRequestOption { iw: p.iw },
            on_syn: p.on_syn,
            on_handshake_ack: p.on_handshake_ack,
        }
    }

    fn wants(&self, ctx: &SockOpsContext<'_>) -> bool {
        (ctx.env.is_syn && self.on_syn) || (ctx.env.is_handshake_ack && self.on_handshake_ack)
    }
}

impl ExtensionProgram for IwRequestClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::TcpConnect if self.on_syn => ctx.enable(HookFlagSet::OPTION_WRITE),
            HookOp::ActiveEstablished if self.on_handshake_ack => ctx.enable(HookFlagSet::OPTION_WRITE),
            HookOp::OptionsSizeCalc => {
                if !self.wants(ctx) {
                    if !ctx.env.is_syn {
                        ctx.disable(HookFlagSet::OPTION_WRITE);
                    }
                } else if ctx.args[1] as usize + IwRequestOption::LEN <= MAX_OPTION_SPACE {
                    ctx.reply = IwRequestOption::LEN as i64;
                }
            }
            HookOp::OptionsWrite => {
                ctx.option_out = Some(self.opt.encode());
                if !ctx.env.is_syn {
                    ctx.disable(HookFlagSet::OPTION_WRITE);
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IwServerParams {
    /// CIDR prefixes whose requests are honoured.
    #[serde(default)]
    pub trusted: Vec<String>,
    pub max_iw: u16,
}

#[derive(Debug, Clone)]
pub struct IwRequestServer {
    name: String,
    trusted: Vec<(Ipv4Addr, u8)>,
    max_iw: u16,
}

impl IwRequestServer {
    pub fn new(name: &str, trusted: Vec<(Ipv4Addr, u8)>, max_iw: u16) -> Self {
        IwRequestServer { name: name.to_string(), trusted, max_iw }
    }

    /// IW the server grants for a request.
    pub fn grant(&self, requested: u16) -> u16 {
        requested.min(self.max_iw)
    }
}

impl ExtensionProgram for IwRequestServer {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::PassiveEstablished => ctx.enable(HookFlagSet::PARSE_OPTIONS),
            HookOp::ParseOptions => {
                let Some(opt) = ctx.option_in.filter(|o| o.kind == kind::EXPERIMENTAL_2) else { return };
                let Ok(req) = IwRequestOption::decode(opt) else { return };
                if ctx.env.is_syn {
                    ctx.ext_put("rejected", b"syn".to_vec());
                    return;
                }
                let peer = ctx.env.remote.addr;
                if !self.trusted.iter().any(|(n, l)| prefix_contains(*n, *l, peer)) {
                    ctx.ext_put("rejected", b"untrusted".to_vec());
                    return;
                }
                let iw = self.grant(req.iw);
                if ctx.set_sock_field(SockField::InitialCwnd, u64::from(iw)).is_err() {
                    ctx.ext_put("rejected", b"phase".to_vec());
                }
                ctx.disable(HookFlagSet::PARSE_OPTIONS);
            }
            _ => {}
        }
    }
}
