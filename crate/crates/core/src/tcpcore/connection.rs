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


use std::collections::BTreeMap;

use num_rational::Ratio;

use super::delack::{ack_policy, AckDecision, AckPhase, DelAckConfig};
use super::sendbuf::SendBuffer;
use super::{ConnConfig, ConnEvent, SubflowCfg, TcpError, TcpState, DUPACK_THRESHOLD, RECV_WINDOW};
use crate::cc::{self, AckSample, CcRegistry, LossKind, Window};
use crate::hookrt::{
    reborrow, HookEnv, HookFlagSet, HookInput, HookOp, HookRuntime, MetaOps, ProgramHandle, Role, SockField,
    SockFieldError, SockOps, SubflowInfo,
};
use crate::rtt::RttEstimator;
use crate::simnet::{DeviceType, SimTime};
use crate::wire::{
    decode_mptcp, decode_options, encode_mptcp, encode_options, kind, mptcp_subtype, DssMapping, Endpoint,
    MptcpOptionRecord, OptionBlock, Segment, TcpFlags, TcpOption, IP_HEADER, TCP_BASE_HEADER,
};
use crate::Controller;

/// Segments acknowledged immediately at connection start and after a
/// loss signal, standing in for the peer's slow-start phase.
pub const QUICKACK_SEGS: u32 = 16;

/// Sub-flag in the MP_JOIN record marking a backup subflow.
const MP_BACKUP_FLAG: u8 = 0x1;

/// Everything a connection may touch while handling one input.
pub struct Io<'a> {
    pub now: SimTime,
    pub rt: &'a mut HookRuntime,
    pub out: &'a mut Vec<Segment>,
    pub events: &'a mut Vec<ConnEvent>,
    pub meta: Option<&'a mut dyn MetaOps>,
}

/// Per-connection counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConnStats {
    pub segs_out: u64,
    pub pure_acks_out: u64,
    pub retransmits: u64,
    pub rto_count: u64,
    pub bytes_acked: u64,
    pub bytes_delivered: u64,
    pub dup_segs_in: u64,
    pub max_frame: usize,
    pub max_header: usize,
}

/// One end of a simulated TCP connection (or one MPTCP subflow).
pub struct Connection {
    cfg: ConnConfig,
    state: TcpState,
    local: Endpoint,
    remote: Endpoint,
    attached: Vec<ProgramHandle>,
    cb_flags: HookFlagSet,
    ext: BTreeMap<String, Vec<u8>>,
    hook_counts: [u64; 13],

    snd: SendBuffer,
    irs: u32,
    peer_mss: u16,
    win: Window<f64>,
    cwnd_clamp: Option<u32>,
    cc: Controller,
    rtt: RttEstimator<f64>,
    rto: SimTime,
    rto_deadline: Option<SimTime>,
    retries: u32,
    retrans_stamp: Option<SimTime>,
    user_timeout: Option<SimTime>,
    dupacks: u32,
    in_recovery: bool,
    recover: u64,
    dup_delivered: u64,
    inflation: u32,
    partial_seen: bool,
    delivered: u64,
    delivered_time: SimTime,
    round_end: u64,
    pacing_next: SimTime,
    pacing_deadline: Option<SimTime>,
    data_segs_in: u64,
    data_segs_out: u64,
    mss_cache: u32,
    syn_sent_at: Option<SimTime>,
    syn_retransmitted: bool,

    rcv_nxt: u64,
    ooo: BTreeMap<u64, u64>,
    unacked_segs: u32,
    delack_deadline: Option<SimTime>,
    quickack: u32,
    delack: DelAckConfig,
    handshake_ack_pending: bool,

    device: Option<DeviceType>,
    data_ack_out: u64,
    stats: ConnStats,
    error: Option<TcpError>,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("role", &self.cfg.role)
            .field("state", &self.state)
            .field("local", &self.local)
            .field("remote", &self.remote)
            .field("una", &self.snd.una())
            .field("nxt", &self.snd.nxt())
            .field("rcv_nxt", &self.rcv_nxt)
            .field("cwnd", &self.win.cwnd)
            .field("cc", &self.cc.name())
            .finish()
    }
}

fn seq_add(base: u32, off: u64) -> u32 {
    base.wrapping_add(off as u32)
}

/// Unwraps a 32-bit wire value against a 64-bit reference offset.
fn unwrap_seq(base: u32, reference: u64, wire: u32) -> u64 {
    let ref_wire = seq_add(base, reference);
    let delta = wire.wrapping_sub(ref_wire) as i32;
    (reference as i64 + i64::from(delta)).max(0) as u64
}

fn round_up4(n: usize) -> usize {
    n.div_ceil(4) * 4
}

fn secs(t: SimTime) -> f64 {
    t.as_secs_f64()
}

impl Connection {
    fn new(cfg: ConnConfig, local: Endpoint, remote: Endpoint, rt: &HookRuntime) -> Self {
        let cc = cc::create::<f64>(&cfg.cc).unwrap_or_else(|_| cc::create::<f64>("cubic").expect("cubic ships"));
        let rtt = RttEstimator::new(secs(cfg.rto_initial), secs(cfg.rto_min), secs(cfg.rto_max));
        // DSS rides on every subflow data segment
        let dss_room = if cfg.subflow.is_some() { round_up4(DssMapping::ENCODED_LEN) as u32 } else { 0 };
        Connection {
            state: TcpState::Closed,
            local,
            remote,
            attached: rt.attach(cfg.role),
            cb_flags: HookFlagSet::empty(),
            ext: BTreeMap::new(),
            hook_counts: [0; 13],
            snd: SendBuffer::new(),
            irs: 0,
            peer_mss: cfg.mss,
            win: Window::new(f64::from(cfg.initial_cwnd)),
            cwnd_clamp: None,
            cc,
            rtt,
            rto: cfg.rto_initial,
            rto_deadline: None,
            retries: 0,
            retrans_stamp: None,
            user_timeout: None,
            dupacks: 0,
            in_recovery: false,
            recover: 0,
            dup_delivered: 0,
            inflation: 0,
            partial_seen: false,
            delivered: 0,
            delivered_time: SimTime::ZERO,
            round_end: 0,
            pacing_next: SimTime::ZERO,
            pacing_deadline: None,
            data_segs_in: 0,
            data_segs_out: 0,
            mss_cache: u32::from(cfg.mss) - dss_room,
            syn_sent_at: None,
            syn_retransmitted: false,
            rcv_nxt: 0,
            ooo: BTreeMap::new(),
            unacked_segs: 0,
            delack_deadline: None,
            quickack: QUICKACK_SEGS,
            delack: cfg.delack,
            handshake_ack_pending: false,
            device: None,
            data_ack_out: 0,
            stats: ConnStats::default(),
            error: None,
            cfg,
        }
    }

    /// Active open: dispatches TCP_CONNECT and sends the SYN.
    pub fn connect(cfg: ConnConfig, local: Endpoint, remote: Endpoint, io: &mut Io<'_>) -> Self {
        let mut c = Connection::new(cfg, local, remote, io.rt);
        c.hook(HookOp::TcpConnect, io, HookInput::default());
        if c.cfg.subflow.is_some() {
            c.hook(HookOp::MptcpSubflowAdded, io, HookInput::default());
        }
        c.set_state(TcpState::SynSent, io);
        c.send_syn(io);
        c
    }

    /// Passive open from a received SYN; answers with a SYN-ACK.
    pub fn accept(
        cfg: ConnConfig,
        local: Endpoint,
        remote: Endpoint,
        syn: &Segment,
        ingress: Option<DeviceType>,
        io: &mut Io<'_>,
    ) -> Self {
        let mut c = Connection::new(cfg, local, remote, io.rt);
        c.irs = syn.seq;
        c.device = ingress;
        if let Ok(opts) = decode_options(&syn.options) {
            for o in &opts {
                if o.kind == kind::MSS && o.payload.len() == 2 {
                    c.peer_mss = u16::from_be_bytes([o.payload[0], o.payload[1]]).min(c.cfg.mss);
                }
            }
        }
        c.set_state(TcpState::SynRcvd, io);
        c.send_syn(io);
        c
    }

    // ----- accessors -----

    pub fn state(&self) -> TcpState {
        self.state
    }

    pub fn role(&self) -> Role {
        self.cfg.role
    }

    pub fn local(&self) -> Endpoint {
        self.local
    }

    pub fn remote(&self) -> Endpoint {
        self.remote
    }

    pub fn config(&self) -> &ConnConfig {
        &self.cfg
    }

    pub fn subflow(&self) -> Option<SubflowCfg> {
        self.cfg.subflow
    }

    pub fn device(&self) -> Option<DeviceType> {
        self.device
    }

    pub fn error(&self) -> Option<&TcpError> {
        self.error.as_ref()
    }

    pub fn stats(&self) -> &ConnStats {
        &self.stats
    }

    pub fn hook_count(&self, op: HookOp) -> u64 {
        self.hook_counts[op.index()]
    }

    pub fn cb_flags_now(&self) -> HookFlagSet {
        self.cb_flags
    }

    pub fn cc_name(&self) -> &'static str {
        self.cc.name()
    }

    pub fn cwnd(&self) -> f64 {
        self.win.cwnd
    }

    pub fn ssthresh(&self) -> f64 {
        self.win.ssthresh
    }

    pub fn cwnd_clamp(&self) -> Option<u32> {
        self.cwnd_clamp
    }

    /// cwnd after the clamp, in segments.
    pub fn effective_cwnd(&self) -> f64 {
        match self.cwnd_clamp {
            Some(c) => self.win.cwnd.min(f64::from(c)),
            None => self.win.cwnd,
        }
    }

    pub fn srtt(&self) -> Option<SimTime> {
        self.rtt.srtt().map(SimTime::from_secs_f64)
    }

    pub fn min_rtt(&self) -> Option<SimTime> {
        self.rtt.min_rtt().map(SimTime::from_secs_f64)
    }

    pub fn rto(&self) -> SimTime {
        self.rto
    }

    pub fn user_timeout(&self) -> Option<SimTime> {
        self.user_timeout
    }

    pub fn delack_config(&self) -> DelAckConfig {
        self.delack
    }

    pub fn mss_cache(&self) -> u32 {
        self.mss_cache
    }

    pub fn data_segs_in(&self) -> u64 {
        self.data_segs_in
    }

    pub fn data_segs_out(&self) -> u64 {
        self.data_segs_out
    }

    pub fn bytes_in_flight(&self) -> u64 {
        self.snd.bytes_in_flight()
    }

    pub fn segs_in_flight(&self) -> u32 {
        self.snd.in_flight()
    }

    pub fn unsent(&self) -> u64 {
        self.snd.unsent()
    }

    pub fn all_acked(&self) -> bool {
        self.snd.all_acked()
    }

    pub fn rcv_nxt(&self) -> u64 {
        self.rcv_nxt
    }

    /// Room for another scheduler chunk: synchronized, nothing unsent and
    /// window space left.
    pub fn can_take_data(&self) -> bool {
        self.state.is_synchronized() && self.snd.unsent() == 0 && f64::from(self.snd.in_flight()) < self.effective_cwnd()
    }

    /// Earliest pending timer.
    pub fn next_deadline(&self) -> Option<SimTime> {
        [self.rto_deadline, self.delack_deadline, self.pacing_deadline].into_iter().flatten().min()
    }

    // ----- application interface -----

    /// Queues `bytes` of application data.
    pub fn send(&mut self, bytes: u64, io: &mut Io<'_>) -> Result<(), TcpError> {
        if self.state == TcpState::Closed {
            return Err(self.error.clone().unwrap_or(TcpError::ConnectionClosed));
        }
        self.snd.push(bytes);
        self.try_send(io);
        Ok(())
    }

    /// Queues a chunk carrying an MPTCP data-sequence mapping.
    pub fn send_mapped(&mut self, len: u64, dsn: u64, io: &mut Io<'_>) -> Result<(), TcpError> {
        if self.state == TcpState::Closed {
            return Err(self.error.clone().unwrap_or(TcpError::ConnectionClosed));
        }
        self.snd.push_mapped(len, dsn);
        self.try_send(io);
        Ok(())
    }

    /// Data ACK this subflow advertises in its DSS records.
    pub fn set_data_ack(&mut self, data_ack: u64) {
        self.data_ack_out = data_ack;
    }

    /// Local close without a FIN exchange.
    pub fn close(&mut self, io: &mut Io<'_>) {
        self.finish(None, io);
    }

    // ----- hook plumbing -----

    fn env(&self, now: SimTime, is_syn: bool, is_handshake_ack: bool) -> HookEnv {
        HookEnv {
            now,
            role: self.cfg.role,
            local: self.local,
            remote: self.remote,
            is_syn,
            is_handshake_ack,
            subflow: self.cfg.subflow.map(|s| SubflowInfo {
                id: s.subflow_id,
                is_master: !s.join,
                backup: s.backup,
                device: self.device,
            }),
        }
    }

    fn hook(&mut self, op: HookOp, io: &mut Io<'_>, input: HookInput<'_>) {
        self.hook_env(op, io, input, false, false);
    }

    fn hook_env(&mut self, op: HookOp, io: &mut Io<'_>, input: HookInput<'_>, is_syn: bool, hs_ack: bool) {
        if let Some(gate) = op.gate() {
            if !self.cb_flags.contains(gate) {
                return;
            }
        }
        let attached = std::mem::take(&mut self.attached);
        let env = self.env(io.now, is_syn, hs_ack);
        io.rt.dispatch(op, &attached, &env, self, reborrow(&mut io.meta), input);
        self.attached = attached;
    }

    fn set_state(&mut self, s: TcpState, io: &mut Io<'_>) {
        if self.state == s {
            return;
        }
        let old = self.state;
        self.state = s;
        io.events.push(ConnEvent::StateChanged(s));
        let input = HookInput { args: [old.code() as u32, s.code() as u32, 0, 0], ..Default::default() };
        self.hook(HookOp::StateChange, io, input);
    }

    fn finish(&mut self, err: Option<TcpError>, io: &mut Io<'_>) {
        if self.state == TcpState::Closed && self.syn_sent_at.is_none() {
            return;
        }
        self.error = err.clone();
        self.rto_deadline = None;
        self.delack_deadline = None;
        self.pacing_deadline = None;
        self.syn_sent_at = None;
        self.set_state(TcpState::Closed, io);
        io.events.push(ConnEvent::Closed(err));
    }

    // ----- option building -----

    fn mptcp_handshake_record(&self) -> Option<MptcpOptionRecord> {
        let s = self.cfg.subflow?;
        Some(if s.join {
            let mut r = MptcpOptionRecord::new(mptcp_subtype::MP_JOIN, s.token().to_be_bytes().to_vec());
            if s.backup {
                r.flags |= MP_BACKUP_FLAG;
            }
            r
        } else {
            MptcpOptionRecord::new(mptcp_subtype::MP_CAPABLE, s.key.to_be_bytes().to_vec())
        })
    }

    fn stack_options(&self, flags: TcpFlags, hs_ack: bool, dss: Option<DssMapping>) -> Vec<TcpOption> {
        let mut v = Vec::new();
        if flags.contains(TcpFlags::SYN) {
            v.push(TcpOption::mss(self.cfg.mss));
        }
        if flags.contains(TcpFlags::SYN) || hs_ack {
            if let Some(r) = self.mptcp_handshake_record() {
                v.push(encode_mptcp(&r).expect("handshake record fits"));
            }
        } else if let Some(d) = dss {
            v.push(encode_mptcp(&d.to_record()).expect("DSS fits"));
        }
        v
    }

    fn dss_for(&self, off: Option<u64>, len: u32) -> Option<DssMapping> {
        self.cfg.subflow?;
        let (data_seq, data_len) = match off.and_then(|o| self.snd.mapping_at(o)) {
            Some((dsn, _)) => (dsn, len as u16),
            None => (0, 0),
        };
        Some(DssMapping { data_seq, data_ack: self.data_ack_out, data_len })
    }

    /// Base MSS less the padded size of stack options and extension
    /// reservations for a data segment.
    pub fn current_mss(&mut self, io: &mut Io<'_>) -> u32 {
        let stack = self.stack_options(TcpFlags::ACK, false, self.dss_for(None, 0));
        let stack_len: usize = stack.iter().map(|o| o.encoded_len()).sum();
        let mut reserved = 0;
        if self.cb_flags.contains(HookFlagSet::OPTION_WRITE) {
            let attached = std::mem::take(&mut self.attached);
            let env = self.env(io.now, false, false);
            reserved = io.rt.reserved_len(&attached, &env, self, reborrow(&mut io.meta), stack_len);
            self.attached = attached;
        }
        let base = u32::from(self.cfg.mss.min(self.peer_mss));
        self.mss_cache = base.saturating_sub(round_up4(stack_len + reserved) as u32).max(1);
        self.mss_cache
    }

    /// Builds, encodes and queues one segment. Returns the payload length
    /// actually carried, which may be below `want` when options grew.
    fn emit(&mut self, io: &mut Io<'_>, flags: TcpFlags, seq: u32, data_off: Option<u64>, want: u32, hs_ack: bool) -> u32 {
        let is_syn = flags.contains(TcpFlags::SYN);
        let stack = self.stack_options(flags, hs_ack, self.dss_for(data_off, want));
        let attached = std::mem::take(&mut self.attached);
        let env = self.env(io.now, is_syn, hs_ack);
        let mptcp = self.cfg.subflow.is_some() && !is_syn;
        let mut block: OptionBlock = io.rt.build_options(&attached, &env, self, reborrow(&mut io.meta), stack, mptcp);
        self.attached = attached;

        let room = self.cfg.mtu.saturating_sub(IP_HEADER + TCP_BASE_HEADER + block.padded_len()) as u32;
        let payload = want.min(room);
        if payload != want {
            if let Some(d) = self.dss_for(data_off, payload) {
                for o in block.options.iter_mut() {
                    if o.kind == kind::MPTCP && o.payload.first().map(|b| b >> 4) == Some(mptcp_subtype::DSS) {
                        *o = encode_mptcp(&d.to_record()).expect("DSS fits");
                    }
                }
            }
        }
        let options = encode_options(&block).expect("option build stays within budget");
        let ack = if self.state == TcpState::SynSent && !flags.contains(TcpFlags::ACK) {
            0
        } else {
            seq_add(self.irs.wrapping_add(1), self.rcv_nxt)
        };
        let seg = Segment { src: self.local, dst: self.remote, seq, ack, flags, options, payload };
        self.stats.segs_out += 1;
        self.stats.max_frame = self.stats.max_frame.max(seg.wire_len());
        self.stats.max_header = self.stats.max_header.max(seg.header_len());
        if flags.contains(TcpFlags::ACK) {
            self.unacked_segs = 0;
            self.delack_deadline = None;
        }
        io.out.push(seg);
        payload
    }

    fn send_syn(&mut self, io: &mut Io<'_>) {
        let flags = match self.cfg.role {
            Role::Client => TcpFlags::SYN,
            Role::Server => TcpFlags::SYN | TcpFlags::ACK,
        };
        if self.syn_sent_at.is_some() {
            self.syn_retransmitted = true;
        }
        self.syn_sent_at = Some(io.now);
        self.emit(io, flags, self.cfg.iss, None, 0, false);
        self.rto_deadline = Some(io.now + self.rto);
    }

    fn send_ack(&mut self, io: &mut Io<'_>) {
        let hs = std::mem::take(&mut self.handshake_ack_pending);
        let seq = seq_add(self.cfg.iss.wrapping_add(1), self.snd.nxt());
        self.emit(io, TcpFlags::ACK, seq, None, 0, hs);
        self.stats.pure_acks_out += 1;
        io.events.push(ConnEvent::AckSent);
    }

    fn send_rst(&mut self, io: &mut Io<'_>) {
        let seq = seq_add(self.cfg.iss.wrapping_add(1), self.snd.nxt());
        let seg = Segment {
            src: self.local,
            dst: self.remote,
            seq,
            ack: seq_add(self.irs.wrapping_add(1), self.rcv_nxt),
            flags: TcpFlags::RST | TcpFlags::ACK,
            options: Vec::new(),
            payload: 0,
        };
        self.stats.segs_out += 1;
        io.out.push(seg);
    }

    // ----- sender -----

    fn pacing_rate(&self) -> Option<f64> {
        self.cc.pacing_rate(&self.win, self.rtt.srtt(), f64::from(self.mss_cache))
    }

    fn send_window(&self) -> f64 {
        self.effective_cwnd() + f64::from(self.inflation)
    }

    fn try_send(&mut self, io: &mut Io<'_>) {
        if !self.state.is_synchronized() {
            return;
        }
        loop {
            let off = self.snd.nxt();
            if off >= self.snd.app_end() || off - self.snd.una() >= RECV_WINDOW {
                break;
            }
            if f64::from(self.snd.in_flight()) >= self.send_window() {
                break;
            }
            if self.pacing_rate().is_some() && io.now < self.pacing_next {
                self.pacing_deadline = Some(self.pacing_next);
                break;
            }
            let mss = self.current_mss(io);
            let len = self.snd.next_len(off, mss);
            if len == 0 {
                break;
            }
            self.send_data(io, off, len);
        }
    }

    fn send_data(&mut self, io: &mut Io<'_>, off: u64, len: u32) {
        let seq = seq_add(self.cfg.iss.wrapping_add(1), off);
        let sent = self.emit(io, TcpFlags::ACK, seq, Some(off), len, false);
        let retrans = self.snd.record_send(off, sent, io.now, self.delivered, self.delivered_time);
        if retrans {
            self.stats.retransmits += 1;
            if self.retrans_stamp.is_none() {
                self.retrans_stamp = Some(io.now);
            }
            io.events.push(ConnEvent::Retransmit { offset: off, len: sent });
            let input = HookInput { args: [off as u32, sent, 0, 0], ..Default::default() };
            self.hook(HookOp::Retrans, io, input);
        } else {
            self.data_segs_out += 1;
            io.events.push(ConnEvent::DataSent(sent));
        }
        if let Some(rate) = self.pacing_rate() {
            if rate > 0.0 {
                let wire = (sent as usize + IP_HEADER + TCP_BASE_HEADER) as f64;
                self.pacing_next = self.pacing_next.max(io.now) + SimTime::from_secs_f64(wire / rate);
            }
        }
        if self.rto_deadline.is_none() {
            self.arm_rto(io.now);
        }
    }

    fn arm_rto(&mut self, now: SimTime) {
        let mut at = now + self.rto;
        if let (Some(uto), Some(stamp)) = (self.user_timeout, self.retrans_stamp) {
            at = at.min((stamp + uto).max(now));
        }
        self.rto_deadline = Some(at);
    }

    fn retransmit_head(&mut self, io: &mut Io<'_>) {
        let off = self.snd.una();
        let mss = self.current_mss(io);
        let len = self.snd.next_len(off, mss);
        if len > 0 {
            self.send_data(io, off, len);
        }
    }

    fn process_ack(&mut self, ack_wire: u32, seg: &Segment, io: &mut Io<'_>) {
        let ack = unwrap_seq(self.cfg.iss.wrapping_add(1), self.snd.una(), ack_wire);
        if ack > self.snd.max() {
            return;
        }
        let now = io.now;
        if ack > self.snd.una() {
            let in_flight_before = f64::from(self.snd.in_flight());
            let out = self.snd.on_ack(ack);
            // bytes already credited by duplicate ACKs are not counted twice
            let credited = self.dup_delivered.min(out.bytes);
            self.dup_delivered -= credited;
            self.delivered += out.bytes - credited;
            self.delivered_time = now;
            self.stats.bytes_acked += out.bytes;
            let mut rtt_sample = None;
            if let Some(sent_at) = out.rtt_sent_at {
                let r = now.saturating_sub(sent_at);
                self.rtt.on_sample(secs(r));
                rtt_sample = Some(r);
                io.events.push(ConnEvent::RttSample { rtt: r, srtt: self.srtt().unwrap_or(r) });
            }
            let rate = out.newest.filter(|s| !s.retransmitted).and_then(|s| {
                let interval = now.saturating_sub(s.delivered_time_at_send).max(now.saturating_sub(s.sent_at));
                (interval > SimTime::ZERO)
                    .then(|| (self.delivered - s.delivered_at_send) as f64 / interval.as_secs_f64())
            });
            let round_start = ack >= self.round_end;
            if round_start {
                self.round_end = self.snd.nxt();
            }
            self.retries = 0;
            self.retrans_stamp = None;
            self.rto = SimTime::from_secs_f64(self.rtt.rto());
            self.dupacks = 0;
            io.events.push(ConnEvent::Acked(out.bytes));

            let mss = f64::from(self.mss_cache);
            let acked_segs = (out.bytes as f64 / mss).max(f64::from(out.segments.min(1)));
            if self.in_recovery {
                if ack >= self.recover {
                    self.in_recovery = false;
                    self.inflation = 0;
                } else {
                    self.inflation = self.inflation.saturating_sub(out.segments) + 1;
                    self.retransmit_head(io);
                    if !self.partial_seen {
                        self.partial_seen = true;
                        self.arm_rto(now);
                    }
                }
            }
            if !self.in_recovery {
                let sample = AckSample {
                    now: secs(now),
                    acked_segs,
                    rtt: rtt_sample.map(secs),
                    min_rtt: self.rtt.min_rtt(),
                    in_flight: in_flight_before,
                    delivery_rate: rate,
                    mss,
                    round_start,
                };
                self.cc.on_ack(&mut self.win, &sample);
            }
            io.events.push(ConnEvent::Cwnd(self.win.cwnd));
            if self.snd.has_outstanding() {
                if !self.in_recovery || !self.partial_seen {
                    self.arm_rto(now);
                }
            } else {
                self.rto_deadline = None;
            }
        } else if ack == self.snd.una()
            && seg.payload == 0
            && !seg.flags.intersects(TcpFlags::SYN | TcpFlags::FIN)
            && self.snd.has_outstanding()
        {
            self.dupacks += 1;
            // a duplicate ACK means one more segment left the network
            if self.dup_delivered + u64::from(self.mss_cache) <= self.snd.bytes_in_flight() {
                self.dup_delivered += u64::from(self.mss_cache);
                self.delivered += u64::from(self.mss_cache);
                self.delivered_time = now;
            }
            if self.in_recovery {
                self.inflation += 1;
            } else if self.dupacks == DUPACK_THRESHOLD && self.snd.una() >= self.recover {
                self.in_recovery = true;
                self.partial_seen = false;
                self.recover = self.snd.max();
                let in_flight = f64::from(self.snd.in_flight());
                self.cc.on_loss(&mut self.win, LossKind::FastRetrans, in_flight, secs(now));
                self.win.cwnd = self.win.cwnd.max(1.0);
                self.inflation = DUPACK_THRESHOLD;
                io.events.push(ConnEvent::Cwnd(self.win.cwnd));
                self.retransmit_head(io);
                // the retransmitted head gets a full RTO
                self.arm_rto(now);
            }
        }
    }

    fn on_rto(&mut self, io: &mut Io<'_>) {
        let now = io.now;
        self.rto_deadline = None;
        match self.state {
            TcpState::SynSent | TcpState::SynRcvd => {
                self.retries += 1;
                if self.retries > self.cfg.syn_retries {
                    self.finish(Some(TcpError::HandshakeTimeout(self.cfg.syn_retries)), io);
                    return;
                }
                self.rto = (self.rto + self.rto).min(self.cfg.rto_max);
                self.send_syn(io);
                return;
            }
            s if !s.is_synchronized() => return,
            _ => {}
        }
        if !self.snd.has_outstanding() {
            return;
        }
        if let (Some(uto), Some(stamp)) = (self.user_timeout, self.retrans_stamp) {
            if now.saturating_sub(stamp) >= uto {
                self.send_rst(io);
                self.finish(Some(TcpError::UserTimeoutExpired(now.saturating_sub(stamp))), io);
                return;
            }
        }
        self.retries += 1;
        if self.retries > self.cfg.data_retries {
            self.send_rst(io);
            self.finish(Some(TcpError::RetryLimit(self.cfg.data_retries)), io);
            return;
        }
        self.stats.rto_count += 1;
        let in_flight = f64::from(self.snd.in_flight());
        self.cc.on_loss(&mut self.win, LossKind::Rto, in_flight, secs(now));
        self.win.cwnd = self.win.cwnd.max(1.0);
        self.in_recovery = false;
        self.inflation = 0;
        self.dupacks = 0;
        self.quickack = self.quickack.max(1);
        // no fast retransmit until everything sent before the timeout is acked
        self.recover = self.snd.max();
        self.snd.rewind();
        self.round_end = self.snd.una();
        self.rto = (self.rto + self.rto).min(self.cfg.rto_max);
        io.events.push(ConnEvent::Rto { rto: self.rto });
        io.events.push(ConnEvent::Cwnd(self.win.cwnd));
        self.hook(HookOp::RtoFired, io, HookInput { args: [self.retries, 0, 0, 0], ..Default::default() });
        if self.state == TcpState::Closed {
            return;
        }
        self.pacing_next = now;
        self.retransmit_head(io);
        self.try_send(io);
        self.arm_rto(now);
    }

    // ----- receiver -----

    fn parse_options(&mut self, seg: &Segment, io: &mut Io<'_>, hs_ack: bool) {
        let Ok(opts) = decode_options(&seg.options) else { return };
        let is_syn = seg.is_syn();
        for o in opts.iter().filter(|o| o.kind != kind::NOP) {
            match o.kind {
                kind::MSS => {
                    if o.payload.len() == 2 {
                        self.peer_mss = u16::from_be_bytes([o.payload[0], o.payload[1]]).min(self.cfg.mss);
                    }
                }
                kind::MPTCP => {
                    let Ok(rec) = decode_mptcp(o) else { continue };
                    if mptcp_subtype::is_known(rec.subtype) {
                        self.consume_mptcp(&rec, seg, io);
                    } else if self.cb_flags.contains(HookFlagSet::MPTCP_PARSE) {
                        let input = HookInput {
                            args: [u32::from(rec.subtype), rec.encoded_len() as u32, 0, 0],
                            mptcp_in: Some(&rec),
                            ..Default::default()
                        };
                        self.hook_env(HookOp::MptcpParseOptions, io, input, is_syn, hs_ack);
                    } else {
                        io.events.push(ConnEvent::OptionIgnored(kind::MPTCP));
                    }
                }
                k => {
                    if self.cb_flags.contains(HookFlagSet::PARSE_OPTIONS) {
                        let input = HookInput {
                            args: [u32::from(k), o.encoded_len() as u32, 0, 0],
                            option_in: Some(o),
                            ..Default::default()
                        };
                        self.hook_env(HookOp::ParseOptions, io, input, is_syn, hs_ack);
                    } else {
                        io.events.push(ConnEvent::OptionIgnored(k));
                    }
                }
            }
        }
    }

    fn consume_mptcp(&mut self, rec: &MptcpOptionRecord, seg: &Segment, io: &mut Io<'_>) {
        match rec.subtype {
            mptcp_subtype::DSS => {
                if let Some(d) = DssMapping::from_record(rec) {
                    io.events.push(ConnEvent::DataAck(d.data_ack));
                    if d.data_len > 0 && seg.payload > 0 {
                        let off = unwrap_seq(self.irs.wrapping_add(1), self.rcv_nxt, seg.seq);
                        if off + u64::from(seg.payload) > self.rcv_nxt {
                            io.events.push(ConnEvent::MappedData { dsn: d.data_seq, len: u32::from(d.data_len) });
                        }
                    }
                }
            }
            mptcp_subtype::MP_CAPABLE if rec.data.len() == 8 => {
                let key = u64::from_be_bytes(rec.data[..8].try_into().expect("length checked"));
                io.events.push(ConnEvent::PeerMptcp { key_or_token: key, join: false, backup: false });
            }
            mptcp_subtype::MP_JOIN if rec.data.len() == 4 => {
                let token = u32::from_be_bytes(rec.data[..4].try_into().expect("length checked"));
                let backup = rec.flags & MP_BACKUP_FLAG != 0;
                io.events.push(ConnEvent::PeerMptcp { key_or_token: u64::from(token), join: true, backup });
            }
            _ => {}
        }
    }

    fn process_data(&mut self, seg: &Segment, io: &mut Io<'_>) {
        let off = unwrap_seq(self.irs.wrapping_add(1), self.rcv_nxt, seg.seq);
        let end = off + u64::from(seg.payload);
        self.data_segs_in += 1;
        let phase;
        if end <= self.rcv_nxt {
            self.stats.dup_segs_in += 1;
            self.quickack = QUICKACK_SEGS;
            phase = AckPhase::Retrans;
        } else if off > self.rcv_nxt {
            let e = self.ooo.entry(off).or_insert(end);
            *e = (*e).max(end);
            self.quickack = QUICKACK_SEGS;
            phase = AckPhase::OutOfOrder;
        } else {
            let had_hole = !self.ooo.is_empty();
            let mut new_nxt = end;
            while let Some((&s, &e)) = self.ooo.iter().next() {
                if s > new_nxt {
                    break;
                }
                self.ooo.remove(&s);
                new_nxt = new_nxt.max(e);
            }
            let delivered = new_nxt - self.rcv_nxt;
            self.rcv_nxt = new_nxt;
            self.stats.bytes_delivered += delivered;
            io.events.push(ConnEvent::Delivered(delivered));
            self.unacked_segs += 1;
            phase = if had_hole {
                AckPhase::OutOfOrder
            } else if self.quickack > 0 {
                self.quickack -= 1;
                AckPhase::SlowStartPeer
            } else {
                AckPhase::Normal
            };
        }
        let decision = if phase == AckPhase::Normal || phase == AckPhase::SlowStartPeer {
            ack_policy(&self.delack, self.unacked_segs, phase, self.min_rtt())
        } else {
            AckDecision::AckNow
        };
        match decision {
            AckDecision::AckNow => self.send_ack(io),
            AckDecision::AckDelayed(t) => {
                if self.delack_deadline.is_none() {
                    self.delack_deadline = Some(io.now + t);
                }
            }
        }
    }

    /// Handles one arriving segment. `ingress` is the device type of the
    /// link it arrived on.
    pub fn on_segment(&mut self, seg: &Segment, ingress: Option<DeviceType>, io: &mut Io<'_>) {
        if self.state == TcpState::Closed {
            return;
        }
        if seg.flags.contains(TcpFlags::RST) {
            self.finish(Some(TcpError::Reset), io);
            return;
        }
        match self.state {
            TcpState::SynSent => {
                if !seg.flags.contains(TcpFlags::SYN | TcpFlags::ACK)
                    || seg.ack != self.cfg.iss.wrapping_add(1)
                {
                    return;
                }
                self.irs = seg.seq;
                self.device = ingress;
                self.handshake_sample(io.now);
                self.syn_sent_at = None;
                self.rto_deadline = None;
                self.retries = 0;
                self.set_state(TcpState::Established, io);
                io.events.push(ConnEvent::Established);
                self.hook(HookOp::ActiveEstablished, io, HookInput::default());
                if self.cfg.subflow.is_some() {
                    self.hook(HookOp::MptcpSubflowEstablished, io, HookInput::default());
                }
                self.parse_options(seg, io, false);
                self.handshake_ack_pending = true;
                self.send_ack(io);
                self.try_send(io);
            }
            TcpState::SynRcvd => {
                if seg.is_syn() {
                    // retransmitted SYN: answer again
                    self.send_syn(io);
                    return;
                }
                if !seg.flags.contains(TcpFlags::ACK) || seg.ack != self.cfg.iss.wrapping_add(1) {
                    return;
                }
                self.handshake_sample(io.now);
                self.syn_sent_at = None;
                self.rto_deadline = None;
                self.retries = 0;
                self.set_state(TcpState::Established, io);
                io.events.push(ConnEvent::Established);
                self.hook(HookOp::PassiveEstablished, io, HookInput::default());
                if self.cfg.subflow.is_some() {
                    self.hook(HookOp::MptcpSubflowEstablished, io, HookInput::default());
                }
                self.parse_options(seg, io, true);
                if seg.payload > 0 {
                    self.process_data(seg, io);
                }
                self.try_send(io);
            }
            s if s.is_synchronized() => {
                if seg.is_syn() {
                    // duplicate SYN-ACK after our third ACK was lost
                    if self.cfg.role == Role::Client {
                        self.send_ack(io);
                    }
                    return;
                }
                self.parse_options(seg, io, false);
                if self.state == TcpState::Closed {
                    return;
                }
                if seg.flags.contains(TcpFlags::ACK) {
                    self.process_ack(seg.ack, seg, io);
                }
                if seg.payload > 0 {
                    self.process_data(seg, io);
                }
                self.try_send(io);
            }
            _ => {}
        }
    }

    fn handshake_sample(&mut self, now: SimTime) {
        if let (Some(t), false) = (self.syn_sent_at, self.syn_retransmitted) {
            self.rtt.on_sample(secs(now.saturating_sub(t)));
            self.rto = SimTime::from_secs_f64(self.rtt.rto());
        } else {
            self.rto = self.cfg.rto_initial;
        }
    }

    /// Fires every expired timer.
    pub fn on_timer(&mut self, io: &mut Io<'_>) {
        let now = io.now;
        if self.delack_deadline.is_some_and(|t| t <= now) {
            self.delack_deadline = None;
            if self.unacked_segs > 0 {
                self.send_ack(io);
            }
        }
        if self.pacing_deadline.is_some_and(|t| t <= now) {
            self.pacing_deadline = None;
            self.try_send(io);
        }
        if self.rto_deadline.is_some_and(|t| t <= now) {
            self.on_rto(io);
        }
    }
}

impl SockOps for Connection {
    fn get_field(&self, f: SockField) -> Result<u64, SockFieldError> {
        let us = |t: Option<SimTime>| t.map_or(0, |t| t.as_nanos() / 1_000);
        Ok(match f {
            SockField::UserTimeoutUs => us(self.user_timeout),
            SockField::CcAlgorithmId => u64::from(CcRegistry::shipped().reverse(self.cc.name()).unwrap_or(0)),
            SockField::InitialCwnd => u64::from(self.cfg.initial_cwnd),
            SockField::CwndClamp => self.cwnd_clamp.map_or(0, u64::from),
            SockField::DelackFracNum => {
                self.delack.timeout_frac_min_rtt.map_or(0, |r| u64::from(r.numer() * 128 / r.denom()))
            }
            SockField::DelackQuickThresh => u64::from(self.delack.immediate_ack_threshold),
            SockField::SrttUs => us(self.srtt()),
            SockField::MinRttUs => us(self.min_rtt()),
            SockField::Mss => u64::from(self.mss_cache),
            SockField::SndCwnd => self.win.cwnd.floor() as u64,
            SockField::DataSegsIn => self.data_segs_in,
            SockField::DataSegsOut => self.data_segs_out,
            SockField::State => self.state.code(),
        })
    }

    fn check_field(&self, f: SockField, v: u64) -> Result<(), SockFieldError> {
        if !f.is_writable() {
            return Err(SockFieldError::ReadOnlyField(f));
        }
        let bad = SockFieldError::InvalidValue { field: f, value: v };
        match f {
            SockField::CcAlgorithmId => {
                let id = u8::try_from(v).map_err(|_| bad.clone())?;
                CcRegistry::shipped().lookup(id).map(|_| ()).map_err(|_| bad)
            }
            SockField::InitialCwnd => {
                if self.data_segs_out > 0 {
                    Err(SockFieldError::IllegalPhase(f))
                } else if v == 0 || v > 65_535 {
                    Err(bad)
                } else {
                    Ok(())
                }
            }
            SockField::CwndClamp if v > u64::from(u32::MAX) => Err(bad),
            SockField::DelackFracNum if v > 255 => Err(bad),
            SockField::DelackQuickThresh if v == 0 || v > 255 => Err(bad),
            _ => Ok(()),
        }
    }

    fn set_field(&mut self, f: SockField, v: u64) -> Result<(), SockFieldError> {
        self.check_field(f, v)?;
        match f {
            SockField::UserTimeoutUs => self.user_timeout = (v > 0).then(|| SimTime::from_micros(v)),
            SockField::CcAlgorithmId => {
                let name = CcRegistry::shipped().lookup(v as u8).expect("checked");
                if name != self.cc.name() {
                    self.cc = cc::create::<f64>(name).expect("registry names are creatable");
                }
            }
            SockField::InitialCwnd => {
                self.cfg.initial_cwnd = v as u32;
                self.win.cwnd = v as f64;
            }
            SockField::CwndClamp => self.cwnd_clamp = (v > 0).then_some(v as u32),
            SockField::DelackFracNum => {
                self.delack.timeout_frac_min_rtt = (v > 0).then(|| Ratio::new(v as u32, 128));
            }
            SockField::DelackQuickThresh => self.delack.immediate_ack_threshold = v as u32,
            _ => unreachable!("check_field rejects read-only fields"),
        }
        Ok(())
    }

    fn cb_flags(&self) -> HookFlagSet {
        self.cb_flags
    }

    fn set_cb_flags(&mut self, flags: HookFlagSet) {
        self.cb_flags = flags;
    }

    fn ext_get(&self, key: &str) -> Option<Vec<u8>> {
        self.ext.get(key).cloned()
    }

    fn ext_put(&mut self, key: &str, value: Vec<u8>) {
        self.ext.insert(key.to_string(), value);
    }

    fn record_invocation(&mut self, op: HookOp) {
        self.hook_counts[op.index()] += 1;
    }
}
