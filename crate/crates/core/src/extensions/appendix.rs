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


//! Transliteration of the classic sockops option-insertion listing: set
//! the write flag once the active open completes, reserve four bytes when
//! they fit, write the option and stop after the first data packet.

use crate::hookrt::{ExtensionProgram, HookFlagSet, HookOp, SockField, SockOpsContext};
use crate::wire::{TcpOption, MAX_OPTION_SPACE};

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppendixParams {
    pub kind: u8,
    pub data: u16,
}

impl Default for AppendixParams {
    fn default() -> Self {
        AppendixParams { kind: 66, data: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct AppendixProgram {
    name: String,
    opt: TcpOption,
}

impl AppendixProgram {
    pub fn new(name: &str, p: AppendixParams) -> Self {
        let opt = TcpOption::new(p.kind, p.data.to_be_bytes().to_vec()).expect("4-byte option");
        AppendixProgram { name: name.to_string(), opt }
    }
}

impl ExtensionProgram for AppendixProgram {
    fn name(&self) -> &str {
        &self.name
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        let mut rv = 0;
        match ctx.op {
            HookOp::ActiveEstablished => ctx.set_cb_flags(HookFlagSet::OPTION_WRITE),
            HookOp::OptionsSizeCalc => {
                let option_len = self.opt.encoded_len() as i64;
                let total_len = i64::from(ctx.args[1]);
                if total_len + option_len <= MAX_OPTION_SPACE as i64 {
                    rv = option_len;
                }
            }
            HookOp::OptionsWrite => {
                ctx.option_out = Some(self.opt.clone());
                if ctx.get_sock_field(SockField::DataSegsIn).unwrap_or(0) > 1 {
                    ctx.set_cb_flags(HookFlagSet::empty());
                }
            }
            _ => rv = -1,
        }
        ctx.reply = rv;
    }
}
