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


//! Extension runtime: program registration, gated dispatch of hook ops with a
//! restricted per-callback context, and the two-step option build.
//!
//! Handlers never touch a connection directly. Their field writes, flag
//! changes and storage updates are staged in the context and committed only
//! when the handler returns normally, so a panicking handler leaves the
//! connection exactly as it was.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::panic::{catch_unwind, AssertUnwindSafe};

use bitflags::bitflags;
use thiserror::Error;

use crate::simnet::{DeviceType, SimTime};
use crate::wire::{encode_mptcp, Endpoint, MptcpOptionRecord, OptionBlock, TcpOption, MAX_OPTION_SPACE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HookOp {
    TcpConnect,
    ActiveEstablished,
    PassiveEstablished,
    StateChange,
    RtoFired,
    Retrans,
    OptionsSizeCalc,
    OptionsWrite,
    ParseOptions,
    MptcpSubflowAdded,
    MptcpSubflowEstablished,
    MptcpOptionsWrite,
    MptcpParseOptions,
}

impl HookOp {
    pub const ALL: [HookOp; 13] = [
        HookOp::TcpConnect,
        HookOp::ActiveEstablished,
        HookOp::PassiveEstablished,
        HookOp::StateChange,
        HookOp::RtoFired,
        HookOp::Retrans,
        HookOp::OptionsSizeCalc,
        HookOp::OptionsWrite,
        HookOp::ParseOptions,
        HookOp::MptcpSubflowAdded,
        HookOp::MptcpSubflowEstablished,
        HookOp::MptcpOptionsWrite,
        HookOp::MptcpParseOptions,
    ];

    /// Flag that must be set for the op to fire; `None` for always-enabled ops.
    pub fn gate(self) -> Option<HookFlagSet> {
        use HookOp::*;
        match self {
            TcpConnect | ActiveEstablished | PassiveEstablished => None,
            StateChange => Some(HookFlagSet::STATE),
            RtoFired => Some(HookFlagSet::RTO),
            Retrans => Some(HookFlagSet::RETRANS),
            OptionsSizeCalc | OptionsWrite => Some(HookFlagSet::OPTION_WRITE),
            ParseOptions => Some(HookFlagSet::PARSE_OPTIONS),
            MptcpSubflowAdded | MptcpSubflowEstablished => Some(HookFlagSet::MPTCP_SUBFLOW),
            MptcpOptionsWrite => Some(HookFlagSet::MPTCP_OPTION_WRITE),
            MptcpParseOptions => Some(HookFlagSet::MPTCP_PARSE),
        }
    }

    pub fn is_gateable(self) -> bool {
        self.gate().is_some()
    }

    pub fn name(self) -> &'static str {
        use HookOp::*;
        match self {
            TcpConnect => "tcp_connect",
            ActiveEstablished => "active_established",
            PassiveEstablished => "passive_established",
            StateChange => "state_change",
            RtoFired => "rto_fired",
            Retrans => "retrans",
            OptionsSizeCalc => "options_size_calc",
            OptionsWrite => "options_write",
            ParseOptions => "parse_options",
            MptcpSubflowAdded => "mptcp_subflow_added",
            MptcpSubflowEstablished => "mptcp_subflow_established",
            MptcpOptionsWrite => "mptcp_options_write",
            MptcpParseOptions => "mptcp_parse_options",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

bitflags! {
    /// Per-connection gate over the optional hook ops.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
    pub struct HookFlagSet: u32 {
        const STATE = 1 << 0;
        const RTO = 1 << 1;
        const RETRANS = 1 << 2;
        /// Gates both OPTIONS_SIZE_CALC and OPTIONS_WRITE.
        const OPTION_WRITE = 1 << 3;
        const PARSE_OPTIONS = 1 << 4;
        const MPTCP_SUBFLOW = 1 << 5;
        const MPTCP_OPTION_WRITE = 1 << 6;
        const MPTCP_PARSE = 1 << 7;
    }
}

/// Which end of a connection a connection object is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Client,
    Server,
}

/// Host side a program is registered on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Client,
    Server,
    Both,
}

impl Side {
    pub fn covers(self, role: Role) -> bool {
        matches!((self, role), (Side::Both, _) | (Side::Client, Role::Client) | (Side::Server, Role::Server))
    }
}

/// Socket fields reachable through the get/set helpers. Times are in
/// microseconds, windows in segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SockField {
    UserTimeoutUs,
    CcAlgorithmId,
    InitialCwnd,
    CwndClamp,
    DelackFracNum,
    DelackQuickThresh,
    SrttUs,
    MinRttUs,
    Mss,
    SndCwnd,
    DataSegsIn,
    DataSegsOut,
    State,
}

impl SockField {
    const TABLE: [SockField; 13] = [
        SockField::UserTimeoutUs,
        SockField::CcAlgorithmId,
        SockField::InitialCwnd,
        SockField::CwndClamp,
        SockField::DelackFracNum,
        SockField::DelackQuickThresh,
        SockField::SrttUs,
        SockField::MinRttUs,
        SockField::Mss,
        SockField::SndCwnd,
        SockField::DataSegsIn,
        SockField::DataSegsOut,
        SockField::State,
    ];

    pub fn from_id(id: u32) -> Result<Self, SockFieldError> {
        Self::TABLE.get(id as usize).copied().ok_or(SockFieldError::UnknownField(id))
    }

    pub fn is_writable(self) -> bool {
        use SockField::*;
        matches!(self, UserTimeoutUs | CcAlgorithmId | InitialCwnd | CwndClamp | DelackFracNum | DelackQuickThresh)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SockFieldError {
    #[error("field {0:?} is read-only")]
    ReadOnlyField(SockField),
    #[error("unknown socket field id {0}")]
    UnknownField(u32),
    #[error("field {0:?} cannot be set in the current phase")]
    IllegalPhase(SockField),
    #[error("value {value} rejected for field {field:?}")]
    InvalidValue { field: SockField, value: u64 },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HookError {
    #[error("a program named {0:?} is already registered")]
    DuplicateName(String),
}

/// Connection surface the runtime drives. Implemented by the stack's
/// connection type.
pub trait SockOps {
    fn get_field(&self, f: SockField) -> Result<u64, SockFieldError>;
    /// Validates a write without applying it.
    fn check_field(&self, f: SockField, v: u64) -> Result<(), SockFieldError>;
    fn set_field(&mut self, f: SockField, v: u64) -> Result<(), SockFieldError>;
    fn cb_flags(&self) -> HookFlagSet;
    fn set_cb_flags(&mut self, flags: HookFlagSet);
    fn ext_get(&self, key: &str) -> Option<Vec<u8>>;
    fn ext_put(&mut self, key: &str, value: Vec<u8>);
    /// Counts a handler invocation on this connection.
    fn record_invocation(&mut self, op: HookOp);
}

/// Meta-connection control block surface for MPTCP programs.
pub trait MetaOps {
    /// Joined (non-master) subflows that reached ESTABLISHED.
    fn joins_established(&self) -> usize;
    fn rtt_threshold(&self) -> Option<SimTime>;
    fn set_rtt_threshold(&mut self, t: Option<SimTime>);
    fn ext_get(&self, key: &str) -> Option<Vec<u8>>;
    fn ext_put(&mut self, key: &str, value: Vec<u8>);
}

/// Subflow identity passed to MPTCP hooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubflowInfo {
    pub id: u32,
    pub is_master: bool,
    pub backup: bool,
    pub device: Option<DeviceType>,
}

/// Read-only facts about the connection and the segment at hand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookEnv {
    pub now: SimTime,
    pub role: Role,
    pub local: Endpoint,
    pub remote: Endpoint,
    /// The segment being built or parsed is a SYN.
    pub is_syn: bool,
    /// The segment being built or parsed is the third handshake ACK.
    pub is_handshake_ack: bool,
    pub subflow: Option<SubflowInfo>,
}

impl HookEnv {
    pub fn new(now: SimTime, role: Role, local: Endpoint, remote: Endpoint) -> Self {
        HookEnv { now, role, local, remote, is_syn: false, is_handshake_ack: false, subflow: None }
    }
}

/// (src ip, src port, dst ip, dst port) from the local end's perspective.
pub type FourTuple = (Ipv4Addr, u16, Ipv4Addr, u16);

/// True when `addr` lies inside `net/len`.
pub fn prefix_contains(net: Ipv4Addr, len: u8, addr: Ipv4Addr) -> bool {
    if len == 0 {
        return true;
    }
    let mask = u32::MAX << (32 - u32::from(len.min(32)));
    u32::from(net) & mask == u32::from(addr) & mask
}

/// Four-tuple / prefix predicate restricting which connections a program
/// sees.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConnFilter {
    pub local_prefix: Option<(Ipv4Addr, u8)>,
    pub remote_prefix: Option<(Ipv4Addr, u8)>,
    pub local_port: Option<u16>,
    pub remote_port: Option<u16>,
}

impl ConnFilter {
    pub fn matches(&self, env: &HookEnv) -> bool {
        self.local_prefix.is_none_or(|(n, l)| prefix_contains(n, l, env.local.addr))
            && self.remote_prefix.is_none_or(|(n, l)| prefix_contains(n, l, env.remote.addr))
            && self.local_port.is_none_or(|p| p == env.local.port)
            && self.remote_port.is_none_or(|p| p == env.remote.port)
    }
}

/// A loaded extension: a named handler invoked for every dispatched op on
/// the connections it is attached to.
pub trait ExtensionProgram: Send {
    fn name(&self) -> &str;

    fn filter(&self) -> Option<&ConnFilter> {
        None
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>);
}

#[derive(Debug, Clone, PartialEq)]
enum Staged {
    Field(SockField, u64),
    Flags(HookFlagSet),
    Ext(String, Vec<u8>),
    MetaExt(String, Vec<u8>),
    MetaThreshold(Option<SimTime>),
}

/// The restricted view a handler receives for one invocation.
pub struct SockOpsContext<'a> {
    pub op: HookOp,
    pub args: [u32; 4],
    /// Out-slot; 0 by default, negative declines.
    pub reply: i64,
    pub option_out: Option<TcpOption>,
    pub mptcp_out: Option<MptcpOptionRecord>,
    pub option_in: Option<&'a TcpOption>,
    pub mptcp_in: Option<&'a MptcpOptionRecord>,
    pub env: &'a HookEnv,
    program: &'a str,
    sock: &'a dyn SockOps,
    meta: Option<&'a dyn MetaOps>,
    staged: Vec<Staged>,
}

impl<'a> SockOpsContext<'a> {
    pub fn now(&self) -> SimTime {
        self.env.now
    }

    pub fn role(&self) -> Role {
        self.env.role
    }

    pub fn four_tuple(&self) -> FourTuple {
        (self.env.local.addr, self.env.local.port, self.env.remote.addr, self.env.remote.port)
    }

    pub fn subflow_id(&self) -> Option<u32> {
        self.env.subflow.map(|s| s.id)
    }

    pub fn is_master(&self) -> Option<bool> {
        self.env.subflow.map(|s| s.is_master)
    }

    pub fn device_type(&self) -> Option<DeviceType> {
        self.env.subflow.and_then(|s| s.device)
    }

    pub fn get_sock_field(&self, f: SockField) -> Result<u64, SockFieldError> {
        for s in self.staged.iter().rev() {
            if let Staged::Field(g, v) = s {
                if *g == f {
                    return Ok(*v);
                }
            }
        }
        self.sock.get_field(f)
    }

    pub fn set_sock_field(&mut self, f: SockField, v: u64) -> Result<(), SockFieldError> {
        self.sock.check_field(f, v)?;
        self.staged.push(Staged::Field(f, v));
        Ok(())
    }

    pub fn cb_flags(&self) -> HookFlagSet {
        for s in self.staged.iter().rev() {
            if let Staged::Flags(f) = s {
                return *f;
            }
        }
        self.sock.cb_flags()
    }

    pub fn set_cb_flags(&mut self, flags: HookFlagSet) {
        self.staged.push(Staged::Flags(flags));
    }

    pub fn enable(&mut self, flags: HookFlagSet) {
        let f = self.cb_flags() | flags;
        self.set_cb_flags(f);
    }

    pub fn disable(&mut self, flags: HookFlagSet) {
        let f = self.cb_flags() - flags;
        self.set_cb_flags(f);
    }

    fn ext_key(&self, key: &str) -> String {
        format!("{}/{}", self.program, key)
    }

    /// Per-connection storage, namespaced by program name.
    pub fn ext_get(&self, key: &str) -> Option<Vec<u8>> {
        let k = self.ext_key(key);
        for s in self.staged.iter().rev() {
            if let Staged::Ext(g, v) = s {
                if *g == k {
                    return Some(v.clone());
                }
            }
        }
        self.sock.ext_get(&k)
    }

    pub fn ext_put(&mut self, key: &str, value: Vec<u8>) {
        let k = self.ext_key(key);
        self.staged.push(Staged::Ext(k, value));
    }

    pub fn has_meta(&self) -> bool {
        self.meta.is_some()
    }

    pub fn meta_joins_established(&self) -> Option<usize> {
        self.meta.map(|m| m.joins_established())
    }

    pub fn meta_rtt_threshold(&self) -> Option<SimTime> {
        for s in self.staged.iter().rev() {
            if let Staged::MetaThreshold(t) = s {
                return *t;
            }
        }
        self.meta.and_then(|m| m.rtt_threshold())
    }

    /// Records the threshold in the meta control block; ignored on plain TCP.
    pub fn set_meta_rtt_threshold(&mut self, t: Option<SimTime>) -> bool {
        if self.meta.is_none() {
            return false;
        }
        self.staged.push(Staged::MetaThreshold(t));
        true
    }

    pub fn meta_ext_get(&self, key: &str) -> Option<Vec<u8>> {
        let k = self.ext_key(key);
        for s in self.staged.iter().rev() {
            if let Staged::MetaExt(g, v) = s {
                if *g == k {
                    return Some(v.clone());
                }
            }
        }
        self.meta.and_then(|m| m.ext_get(&k))
    }

    pub fn meta_ext_put(&mut self, key: &str, value: Vec<u8>) -> bool {
        if self.meta.is_none() {
            return false;
        }
        let k = self.ext_key(key);
        self.staged.push(Staged::MetaExt(k, value));
        true
    }
}

/// Input carried by a dispatch.
#[derive(Debug, Clone, Copy, Default)]
pub struct HookInput<'a> {
    pub args: [u32; 4],
    pub option_in: Option<&'a TcpOption>,
    pub mptcp_in: Option<&'a MptcpOptionRecord>,
}

/// Out-slots of one successful handler invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct HookOutput {
    pub program: ProgramHandle,
    pub reply: i64,
    pub option_out: Option<TcpOption>,
    pub mptcp_out: Option<MptcpOptionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProgramHandle(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtensionFault {
    pub program: String,
    pub op: HookOp,
    pub at: SimTime,
    pub message: String,
}

/// Runtime-wide counters.
#[derive(Debug, Clone, Default)]
pub struct RuntimeStats {
    pub invocations: [u64; 13],
    pub per_program: BTreeMap<(String, HookOp), u64>,
    pub filtered: u64,
    pub faults: Vec<ExtensionFault>,
    /// Field writes a handler attempted that the connection rejected at
    /// commit time.
    pub rejected_writes: u64,
}

impl RuntimeStats {
    pub fn count(&self, op: HookOp) -> u64 {
        self.invocations[op.index()]
    }

    pub fn gateable_total(&self) -> u64 {
        HookOp::ALL.iter().filter(|o| o.is_gateable()).map(|o| self.count(*o)).sum()
    }
}

pub(crate) fn reborrow<'s>(m: &'s mut Option<&mut dyn MetaOps>) -> Option<&'s mut dyn MetaOps> {
    match m {
        Some(m) => Some(&mut **m),
        None => None,
    }
}

struct Slot {
    program: Box<dyn ExtensionProgram>,
    side: Side,
}

/// Registry and dispatcher for extension programs.
#[derive(Default)]
pub struct HookRuntime {
    slots: Vec<Slot>,
    stats: RuntimeStats,
}

impl std::fmt::Debug for HookRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<_> = self.slots.iter().map(|s| (s.program.name().to_string(), s.side)).collect();
        f.debug_struct("HookRuntime").field("programs", &names).field("stats", &self.stats).finish()
    }
}

impl HookRuntime {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, program: Box<dyn ExtensionProgram>, side: Side) -> Result<ProgramHandle, HookError> {
        if self.slots.iter().any(|s| s.program.name() == program.name()) {
            return Err(HookError::DuplicateName(program.name().to_string()));
        }
        self.slots.push(Slot { program, side });
        Ok(ProgramHandle(self.slots.len() - 1))
    }

    pub fn program_name(&self, h: ProgramHandle) -> &str {
        self.slots[h.0].program.name()
    }

    /// Programs a new connection of the given role attaches to, in
    /// registration order.
    pub fn attach(&self, role: Role) -> Vec<ProgramHandle> {
        self.slots.iter().enumerate().filter(|(_, s)| s.side.covers(role)).map(|(i, _)| ProgramHandle(i)).collect()
    }

    pub fn stats(&self) -> &RuntimeStats {
        &self.stats
    }

    /// Runs `op` on every attached program whose gate is open and whose
    /// filter matches. Faulting handlers produce no output and no side
    /// effects.
    pub fn dispatch(
        &mut self,
        op: HookOp,
        attached: &[ProgramHandle],
        env: &HookEnv,
        sock: &mut dyn SockOps,
        mut meta: Option<&mut dyn MetaOps>,
        input: HookInput<'_>,
    ) -> Vec<HookOutput> {
        let mut out = Vec::new();
        for &h in attached {
            if let Some(gate) = op.gate() {
                if !sock.cb_flags().contains(gate) {
                    continue;
                }
            }
            if let Some(o) = self.invoke(h, op, env, sock, reborrow(&mut meta), input) {
                out.push(o);
            }
        }
        out
    }

    fn invoke(
        &mut self,
        h: ProgramHandle,
        op: HookOp,
        env: &HookEnv,
        sock: &mut dyn SockOps,
        meta: Option<&mut dyn MetaOps>,
        input: HookInput<'_>,
    ) -> Option<HookOutput> {
        let slot = &mut self.slots[h.0];
        if slot.program.filter().is_some_and(|f| !f.matches(env)) {
            self.stats.filtered += 1;
            return None;
        }
        self.stats.invocations[op.index()] += 1;
        *self.stats.per_program.entry((slot.program.name().to_string(), op)).or_default() += 1;
        sock.record_invocation(op);

        let name = slot.program.name().to_string();
        let (result, staged) = {
            let mut ctx = SockOpsContext {
                op,
                args: input.args,
                reply: 0,
                option_out: None,
                mptcp_out: None,
                option_in: input.option_in,
                mptcp_in: input.mptcp_in,
                env,
                program: &name,
                sock: &*sock,
                meta: meta.as_deref().map(|m| m as &dyn MetaOps),
                staged: Vec::new(),
            };
            let program = &mut slot.program;
            let r = catch_unwind(AssertUnwindSafe(|| program.handle(&mut ctx)));
            let out = HookOutput { program: h, reply: ctx.reply, option_out: ctx.option_out, mptcp_out: ctx.mptcp_out };
            (r.map(|_| out), ctx.staged)
        };
        match result {
            Ok(out) => {
                self.commit(staged, sock, meta);
                Some(out)
            }
            Err(payload) => {
                let message = payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_default();
                self.stats.faults.push(ExtensionFault { program: name, op, at: env.now, message });
                None
            }
        }
    }

    fn commit(&mut self, staged: Vec<Staged>, sock: &mut dyn SockOps, mut meta: Option<&mut dyn MetaOps>) {
        for s in staged {
            match s {
                Staged::Field(f, v) => {
                    if sock.set_field(f, v).is_err() {
                        self.stats.rejected_writes += 1;
                    }
                }
                Staged::Flags(f) => sock.set_cb_flags(f),
                Staged::Ext(k, v) => sock.ext_put(&k, v),
                Staged::MetaExt(k, v) => {
                    if let Some(m) = reborrow(&mut meta) {
                        m.ext_put(&k, v);
                    }
                }
                Staged::MetaThreshold(t) => {
                    if let Some(m) = reborrow(&mut meta) {
                        m.set_rtt_threshold(t);
                    }
                }
            }
        }
    }

    /// Extension bytes reserved for the next segment given `base_len` bytes
    /// of stack options. This is the SIZE_CALC pass run from the MSS
    /// computation; programs cannot tell it apart from the one in
    /// [`HookRuntime::build_options`].
    pub fn reserved_len(
        &mut self,
        attached: &[ProgramHandle],
        env: &HookEnv,
        sock: &mut dyn SockOps,
        meta: Option<&mut dyn MetaOps>,
        base_len: usize,
    ) -> usize {
        self.size_calc(attached, env, sock, meta, base_len).iter().map(|(_, r)| r).sum()
    }

    fn size_calc(
        &mut self,
        attached: &[ProgramHandle],
        env: &HookEnv,
        sock: &mut dyn SockOps,
        mut meta: Option<&mut dyn MetaOps>,
        base_len: usize,
    ) -> Vec<(ProgramHandle, usize)> {
        let mut total = base_len;
        let mut reservations = Vec::new();
        for &h in attached {
            if !sock.cb_flags().contains(HookFlagSet::OPTION_WRITE) {
                break;
            }
            let input = HookInput { args: [0, total as u32, 0, 0], ..Default::default() };
            let Some(o) = self.invoke(h, HookOp::OptionsSizeCalc, env, sock, reborrow(&mut meta), input) else {
                continue;
            };
            if o.reply > 0 {
                let r = o.reply as usize;
                if total + r <= MAX_OPTION_SPACE {
                    total += r;
                    reservations.push((h, r));
                }
            }
        }
        reservations
    }

    /// Two-step option build for one outgoing segment: SIZE_CALC
    /// reservations on top of `stack`, then one WRITE per reserving program,
    /// then MPTCP_OPTIONS_WRITE when `mptcp` is set. The result never exceeds
    /// the option space.
    pub fn build_options(
        &mut self,
        attached: &[ProgramHandle],
        env: &HookEnv,
        sock: &mut dyn SockOps,
        mut meta: Option<&mut dyn MetaOps>,
        stack: Vec<TcpOption>,
        mptcp: bool,
    ) -> OptionBlock {
        let mut block = OptionBlock::from_options(stack).expect("stack options fit the option space");
        if sock.cb_flags().contains(HookFlagSet::OPTION_WRITE) {
            let reservations = self.size_calc(attached, env, sock, reborrow(&mut meta), block.content_len());
            let reserved: usize = reservations.iter().map(|(_, r)| r).sum();
            let total = block.content_len() + reserved;
            for (h, r) in reservations {
                let mut written = 0;
                if sock.cb_flags().contains(HookFlagSet::OPTION_WRITE) {
                    let input = HookInput { args: [r as u32, total as u32, 0, 0], ..Default::default() };
                    if let Some(o) = self.invoke(h, HookOp::OptionsWrite, env, sock, reborrow(&mut meta), input) {
                        if let Some(opt) = o.option_out {
                            if opt.encoded_len() <= r {
                                written = opt.encoded_len();
                                block.options.push(opt);
                            }
                        }
                    }
                }
                for _ in written..r {
                    block.options.push(TcpOption::nop());
                }
            }
        }
        if mptcp && sock.cb_flags().contains(HookFlagSet::MPTCP_OPTION_WRITE) {
            for &h in attached {
                if !sock.cb_flags().contains(HookFlagSet::MPTCP_OPTION_WRITE) {
                    break;
                }
                let input = HookInput { args: [0, block.content_len() as u32, 0, 0], ..Default::default() };
                let Some(o) = self.invoke(h, HookOp::MptcpOptionsWrite, env, sock, reborrow(&mut meta), input) else {
                    continue;
                };
                if let Some(rec) = o.mptcp_out {
                    if let Ok(opt) = encode_mptcp(&rec) {
                        let _ = block.try_push(opt);
                    }
                }
            }
        }
        block
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use proptest::prelude::*;

    fn kind66(ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::OptionsSizeCalc => {
                if ctx.args[1] + 4 <= 40 {
                    ctx.reply = 4;
                }
            }
            HookOp::OptionsWrite => ctx.option_out = Some(TcpOption::new(66, vec![0, 20]).unwrap()),
            _ => {}
        }
    }

    #[test]
    fn gating_blocks_optional_ops() {
        let mut rt = HookRuntime::new();
        rt.register(prog("p", |_| {}), Side::Both).unwrap();
        let att = rt.attach(Role::Client);
        let mut sock = FakeSock::default();
        let env = env();
        rt.dispatch(HookOp::RtoFired, &att, &env, &mut sock, None, HookInput::default());
        rt.dispatch(HookOp::ParseOptions, &att, &env, &mut sock, None, HookInput::default());
        rt.build_options(&att, &env, &mut sock, None, vec![], false);
        assert_eq!(rt.stats().gateable_total(), 0);
        rt.dispatch(HookOp::TcpConnect, &att, &env, &mut sock, None, HookInput::default());
        assert_eq!(rt.stats().count(HookOp::TcpConnect), 1);
        sock.flags = HookFlagSet::RTO;
        rt.dispatch(HookOp::RtoFired, &att, &env, &mut sock, None, HookInput::default());
        assert_eq!(rt.stats().count(HookOp::RtoFired), 1);
    }

    #[test]
    fn provisional_twenty_plus_four() {
        let mut rt = HookRuntime::new();
        rt.register(prog("k66", kind66), Side::Client).unwrap();
        let att = rt.attach(Role::Client);
        let mut sock = FakeSock { flags: HookFlagSet::OPTION_WRITE, ..Default::default() };
        let stack = vec![TcpOption::new(99, vec![0; 18]).unwrap()];
        let block = rt.build_options(&att, &env(), &mut sock, None, stack, false);
        assert_eq!(block.content_len(), 24);
        assert_eq!(block.options[1], TcpOption::new(66, vec![0, 20]).unwrap());
    }

    #[test]
    fn reservation_past_budget_is_rejected() {
        let mut rt = HookRuntime::new();
        rt.register(prog("greedy", |ctx| match ctx.op {
            HookOp::OptionsSizeCalc => ctx.reply = 4,
            HookOp::OptionsWrite => ctx.option_out = Some(TcpOption::new(66, vec![0, 20]).unwrap()),
            _ => {}
        }), Side::Both)
        .unwrap();
        let att = rt.attach(Role::Server);
        let mut sock = FakeSock { flags: HookFlagSet::OPTION_WRITE, ..Default::default() };
        let stack = vec![TcpOption::new(99, vec![0; 36]).unwrap()];
        let block = rt.build_options(&att, &env(), &mut sock, None, stack.clone(), false);
        assert_eq!(block.options, stack);
        assert_eq!(rt.stats().count(HookOp::OptionsWrite), 0);
    }

    #[test]
    fn unused_reservation_becomes_nop_slack() {
        let mut rt = HookRuntime::new();
        rt.register(prog("lazy", |ctx| {
            if ctx.op == HookOp::OptionsSizeCalc {
                ctx.reply = 4;
            }
        }), Side::Both)
        .unwrap();
        let att = rt.attach(Role::Client);
        let mut sock = FakeSock { flags: HookFlagSet::OPTION_WRITE, ..Default::default() };
        let block = rt.build_options(&att, &env(), &mut sock, None, vec![TcpOption::mss(1460)], false);
        assert_eq!(block.content_len(), 8);
        assert!(block.options[1..].iter().all(|o| *o == TcpOption::nop()));
    }

    #[test]
    fn oversized_write_is_discarded() {
        let mut rt = HookRuntime::new();
        rt.register(prog("liar", |ctx| match ctx.op {
            HookOp::OptionsSizeCalc => ctx.reply = 4,
            HookOp::OptionsWrite => ctx.option_out = Some(TcpOption::new(66, vec![0; 10]).unwrap()),
            _ => {}
        }), Side::Both)
        .unwrap();
        let att = rt.attach(Role::Client);
        let mut sock = FakeSock { flags: HookFlagSet::OPTION_WRITE, ..Default::default() };
        let block = rt.build_options(&att, &env(), &mut sock, None, vec![], false);
        assert_eq!(block.content_len(), 4);
        assert!(block.options.iter().all(|o| o.kind == 1));
    }

    #[test]
    fn side_scoping_and_duplicates() {
        let mut rt = HookRuntime::new();
        rt.register(prog("c", |_| {}), Side::Client).unwrap();
        rt.register(prog("s", |_| {}), Side::Server).unwrap();
        rt.register(prog("b", |_| {}), Side::Both).unwrap();
        assert_eq!(rt.attach(Role::Client), vec![ProgramHandle(0), ProgramHandle(2)]);
        assert_eq!(rt.attach(Role::Server), vec![ProgramHandle(1), ProgramHandle(2)]);
        assert_eq!(rt.register(prog("c", |_| {}), Side::Both), Err(HookError::DuplicateName("c".into())));
    }

    #[test]
    fn two_programs_both_parse_in_order() {
        let seen = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let mut rt = HookRuntime::new();
        for name in ["first", "second"] {
            let seen = seen.clone();
            rt.register(prog(name, move |ctx| {
                let o = ctx.option_in.unwrap();
                seen.lock().unwrap().push((name, o.kind, o.encoded_len()));
            }), Side::Both)
            .unwrap();
        }
        let att = rt.attach(Role::Server);
        let mut sock = FakeSock { flags: HookFlagSet::PARSE_OPTIONS, ..Default::default() };
        let opt = TcpOption::new(66, vec![0, 20]).unwrap();
        let input = HookInput { option_in: Some(&opt), ..Default::default() };
        rt.dispatch(HookOp::ParseOptions, &att, &env(), &mut sock, None, input);
        assert_eq!(*seen.lock().unwrap(), vec![("first", 66, 4), ("second", 66, 4)]);
    }

    #[test]
    fn filter_short_circuits() {
        let mut rt = HookRuntime::new();
        let filter = ConnFilter { remote_prefix: Some((Ipv4Addr::new(192, 168, 0, 0), 16)), ..Default::default() };
        rt.register(
            Box::new(FnProgram { name: "f".into(), filter: Some(filter), f: |ctx: &mut SockOpsContext<'_>| ctx.reply = 1 }),
            Side::Both,
        )
        .unwrap();
        let att = rt.attach(Role::Client);
        let mut sock = FakeSock::default();
        let out = rt.dispatch(HookOp::TcpConnect, &att, &env(), &mut sock, None, HookInput::default());
        assert!(out.is_empty());
        assert_eq!(rt.stats().filtered, 1);
    }

    #[test]
    fn panicking_handler_leaves_no_trace() {
        let mut rt = HookRuntime::new();
        rt.register(prog("boom", |ctx| {
            ctx.set_sock_field(SockField::UserTimeoutUs, 5).unwrap();
            ctx.enable(HookFlagSet::RTO);
            ctx.reply = 4;
            panic!("handler fault");
        }), Side::Both)
        .unwrap();
        let att = rt.attach(Role::Client);
        let mut sock = FakeSock { flags: HookFlagSet::OPTION_WRITE, ..Default::default() };
        let out = rt.dispatch(HookOp::TcpConnect, &att, &env(), &mut sock, None, HookInput::default());
        assert!(out.is_empty());
        assert_eq!(sock.flags, HookFlagSet::OPTION_WRITE);
        assert!(sock.fields.is_empty());
        let block = rt.build_options(&att, &env(), &mut sock, None, vec![], false);
        assert_eq!(block.content_len(), 0);
        assert_eq!(rt.stats().faults.len(), 2);
        assert_eq!(rt.stats().faults[0].message, "handler fault");
    }

    #[test]
    fn staged_writes_commit_and_read_back() {
        let mut rt = HookRuntime::new();
        rt.register(prog("w", |ctx| {
            ctx.set_sock_field(SockField::UserTimeoutUs, 5_000_000).unwrap();
            assert_eq!(ctx.get_sock_field(SockField::UserTimeoutUs), Ok(5_000_000));
            assert_eq!(ctx.set_sock_field(SockField::Mss, 1), Err(SockFieldError::ReadOnlyField(SockField::Mss)));
            ctx.ext_put("k", vec![1]);
            assert_eq!(ctx.ext_get("k"), Some(vec![1]));
        }), Side::Both)
        .unwrap();
        let att = rt.attach(Role::Client);
        let mut sock = FakeSock::default();
        rt.dispatch(HookOp::TcpConnect, &att, &env(), &mut sock, None, HookInput::default());
        assert_eq!(sock.fields[&SockField::UserTimeoutUs], 5_000_000);
        assert_eq!(sock.ext["w/k"], vec![1]);
    }

    #[test]
    fn clearing_flag_stops_later_programs() {
        let mut rt = HookRuntime::new();
        rt.register(prog("clear", |ctx| ctx.disable(HookFlagSet::RTO)), Side::Both).unwrap();
        rt.register(prog("after", |_| {}), Side::Both).unwrap();
        let att = rt.attach(Role::Client);
        let mut sock = FakeSock { flags: HookFlagSet::RTO, ..Default::default() };
        rt.dispatch(HookOp::RtoFired, &att, &env(), &mut sock, None, HookInput::default());
        assert_eq!(rt.stats().count(HookOp::RtoFired), 1);
    }

    #[test]
    fn field_ids_resolve() {
        assert_eq!(SockField::from_id(0), Ok(SockField::UserTimeoutUs));
        assert_eq!(SockField::from_id(99), Err(SockFieldError::UnknownField(99)));
        assert!(prefix_contains(Ipv4Addr::new(10, 0, 0, 0), 8, Ipv4Addr::new(10, 9, 9, 9)));
        assert!(!prefix_contains(Ipv4Addr::new(10, 0, 0, 0), 8, Ipv4Addr::new(11, 0, 0, 1)));
        assert!(prefix_contains(Ipv4Addr::new(1, 2, 3, 4), 0, Ipv4Addr::new(9, 9, 9, 9)));
    }

    #[derive(Debug, Clone)]
    struct Pattern {
        stack: usize,
        reserve: Vec<i64>,
        write: Vec<usize>,
        mptcp: Option<usize>,
    }

    fn pattern() -> impl Strategy<Value = Pattern> {
        (
            0usize..=40,
            proptest::collection::vec(-8i64..48, 0..5),
            proptest::collection::vec(0usize..=40, 5),
            proptest::option::of(0usize..=37),
        )
            .prop_map(|(stack, reserve, write, mptcp)| Pattern { stack, reserve, write, mptcp })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn option_budget_holds_for_any_program_mix(p in pattern()) {
            let mut rt = HookRuntime::new();
            for (i, (&r, &w)) in p.reserve.iter().zip(&p.write).enumerate() {
                let m = p.mptcp;
                rt.register(prog(&format!("p{i}"), move |ctx| match ctx.op {
                    HookOp::OptionsSizeCalc => ctx.reply = r,
                    HookOp::OptionsWrite if w >= 2 => ctx.option_out = Some(TcpOption::new(200, vec![0; w - 2]).unwrap()),
                    HookOp::MptcpOptionsWrite => {
                        if let Some(n) = m { ctx.mptcp_out = Some(MptcpOptionRecord::new(0xE, vec![0; n])) }
                    }
                    _ => {}
                }), Side::Both).unwrap();
            }
            let att = rt.attach(Role::Client);
            let mut sock = FakeSock {
                flags: HookFlagSet::OPTION_WRITE | HookFlagSet::MPTCP_OPTION_WRITE,
                ..Default::default()
            };
            let stack = match p.stack {
                0 => vec![],
                1 => vec![TcpOption::nop()],
                n => vec![TcpOption::new(99, vec![0; n - 2]).unwrap()],
            };
            let block = rt.build_options(&att, &env(), &mut sock, None, stack, true);
            prop_assert!(block.content_len() <= MAX_OPTION_SPACE);
            let bytes = crate::wire::encode_options(&block).unwrap();
            prop_assert!(20 + bytes.len() <= 60);
        }
    }
}
