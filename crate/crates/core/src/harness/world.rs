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


//! The simulated world: hosts with their hook runtimes, links, the
//! connections and MPTCP metas, and the application workloads, all driven
//! by one event queue.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::apps::Manifest;
use super::metrics::MetricsLog;
use super::scenario::{AppSpec, ConnKind, Scenario, TransferDir};
use crate::extensions;
use crate::hookrt::{ExtensionFault, ExtensionProgram, HookOp, HookRuntime, MetaOps, Role, Side};
use crate::mptcp::{MetaConnection, SubflowView};
use crate::simnet::{label_hash, DeviceType, Direction, EventHandle, EventQueue, Link, SimTime, TxOutcome};
use crate::tcpcore::{ConnConfig, ConnEvent, Connection, Io, SubflowCfg, TcpError};
use crate::wire::{decode_mptcp, decode_options, kind, mptcp_subtype, Endpoint, Segment, TcpFlags};

/// Extra programs loaded on every host, for tests and experiments that
/// need handlers not shipped in [`crate::extensions`].
pub type ProgramFactory<'a> = &'a dyn Fn() -> Vec<(Box<dyn ExtensionProgram>, Side)>;

/// Result of one run.
#[derive(Debug)]
pub struct RunOutput {
    pub log: MetricsLog,
    /// Event trace lines (`t=<ns> host=<name> kind=<event> …`); empty
    /// unless the scenario asks for it.
    pub trace: Vec<String>,
    pub faults: Vec<ExtensionFault>,
}

const CLIENT: usize = 0;
const SERVER: usize = 1;
/// Stand-in for an endless transfer.
const UNBOUNDED: u64 = 1 << 50;
const MP_BACKUP_FLAG: u8 = 0x1;

#[derive(Debug)]
enum Ev {
    LinkDone { link: usize, dir: Direction },
    Arrive { link: usize, dir: Direction, seg: Segment },
    Timer { slot: usize },
    Start { app: usize },
    Join { chan: usize, sub: usize },
    Tick { app: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum End {
    Tcp(usize),
    Meta(usize),
}

#[derive(Debug, Default)]
struct Channel {
    app: usize,
    cid: u32,
    ends: [Option<End>; 2],
    delivered: [u64; 2],
    backlog: [u64; 2],
    /// Server key learned from the MP_CAPABLE answer.
    peer_key: Option<u64>,
    busy: bool,
    req_end: u64,
    resp_end: u64,
    server_wait: VecDeque<(u64, u64)>,
    client_wait: VecDeque<(u64, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ObjState {
    Waiting,
    Fetching,
    Done,
}

#[derive(Debug)]
enum Work {
    Transfer { dir: TransferDir, bytes: Option<u64>, fct: bool },
    Multi { manifest: Manifest, request_bytes: u64, state: Vec<ObjState> },
    Periodic { dir: TransferDir, interval: SimTime, chunk: u64 },
}

#[derive(Debug)]
struct App {
    spec: usize,
    start: SimTime,
    channels: Vec<usize>,
    done: bool,
    work: Work,
}

#[derive(Debug, Clone, PartialEq)]
struct Snapshot {
    cc: &'static str,
    clamp: Option<u32>,
    uto: Option<SimTime>,
    iw: u32,
    delack: (u64, u32),
}

impl Snapshot {
    fn of(c: &Connection) -> Self {
        let d = c.delack_config();
        Snapshot {
            cc: c.cc_name(),
            clamp: c.cwnd_clamp(),
            uto: c.user_timeout(),
            iw: c.config().initial_cwnd,
            delack: (d.timeout_frac_min_rtt.map_or(0, |r| u64::from(r.numer() * 128 / r.denom())), d.immediate_ack_threshold),
        }
    }
}

#[derive(Debug)]
struct Slot {
    conn: Connection,
    host: usize,
    side: usize,
    chan: usize,
    meta: Option<usize>,
    subflow: Option<u32>,
    timer: Option<(SimTime, EventHandle)>,
    first_flight: Option<u64>,
    acked_any: bool,
    snap: Snapshot,
    last_cwnd: f64,
}

#[derive(Debug)]
struct MetaSlot {
    meta: MetaConnection,
    chan: usize,
    side: usize,
    slots: Vec<usize>,
}

struct Host {
    name: String,
    rt: HookRuntime,
}

struct LinkSlot {
    link: Link,
    name: String,
}

pub struct World<'s> {
    sc: &'s Scenario,
    q: EventQueue<Ev>,
    rng: ChaCha8Rng,
    hosts: Vec<Host>,
    links: Vec<LinkSlot>,
    /// (src addr, dst addr) → link and direction.
    routes: HashMap<(Ipv4Addr, Ipv4Addr), (usize, Direction)>,
    /// (local, remote) → slot.
    demux: HashMap<(Endpoint, Endpoint), usize>,
    listeners: HashMap<(usize, u16), usize>,
    tokens: HashMap<u32, usize>,
    slots: Vec<Slot>,
    metas: Vec<MetaSlot>,
    chans: Vec<Channel>,
    apps: Vec<App>,
    next_port: u16,
    log: MetricsLog,
    trace: Option<Vec<String>>,
}

fn flags_str(f: TcpFlags) -> String {
    let mut s = String::new();
    for (flag, c) in [(TcpFlags::SYN, 'S'), (TcpFlags::ACK, 'A'), (TcpFlags::FIN, 'F'), (TcpFlags::RST, 'R')] {
        if f.contains(flag) {
            s.push(c);
        }
    }
    s
}

fn opts_str(seg: &Segment) -> String {
    match decode_options(&seg.options) {
        Ok(o) => o.iter().filter(|o| o.kind != kind::NOP).map(|o| o.dump()).collect::<Vec<_>>().join(";"),
        Err(_) => "malformed".into(),
    }
}

fn close_code(e: &Option<TcpError>) -> f64 {
    match e {
        None => 0.0,
        Some(TcpError::HandshakeTimeout(_)) => 1.0,
        Some(TcpError::UserTimeoutExpired(_)) => 2.0,
        Some(TcpError::RetryLimit(_)) => 3.0,
        Some(TcpError::Reset) => 4.0,
        Some(TcpError::ConnectionClosed) => 5.0,
    }
}

fn ms(t: SimTime) -> f64 {
    t.as_nanos() as f64 / 1e6
}

impl<'s> World<'s> {
    pub fn new(sc: &'s Scenario, extra: Option<ProgramFactory<'_>>) -> Self {
        let mut hosts: Vec<Host> = sc.hosts.iter().map(|h| Host { name: h.name.clone(), rt: HookRuntime::new() }).collect();
        for h in &mut hosts {
            for e in &sc.extensions {
                let prog = extensions::build(e).expect("validated scenario");
                if h.rt.register(prog, e.side).is_err() {
                    // duplicate names are a config mistake; keep the first
                    continue;
                }
            }
            if let Some(f) = extra {
                for (p, side) in f() {
                    let _ = h.rt.register(p, side);
                }
            }
        }
        let mut routes = HashMap::new();
        let links = (0..sc.links.len())
            .map(|i| {
                let (a, b) = sc.link_addrs(i);
                routes.insert((a, b), (i, Direction::AtoB));
                routes.insert((b, a), (i, Direction::BtoA));
                LinkSlot { link: Link::new(sc.link_spec(i), sc.seed), name: sc.links[i].name.clone() }
            })
            .collect();
        let mut log = MetricsLog::new(&sc.name, sc.seed, sc.duration());
        log.select(&sc.metrics);
        let mut w = World {
            sc,
            q: EventQueue::new(),
            rng: ChaCha8Rng::seed_from_u64(sc.seed ^ label_hash("stack")),
            hosts,
            links,
            routes,
            demux: HashMap::new(),
            listeners: HashMap::new(),
            tokens: HashMap::new(),
            slots: Vec::new(),
            metas: Vec::new(),
            chans: Vec::new(),
            apps: Vec::new(),
            next_port: 40000,
            log,
            trace: sc.trace.then(Vec::new),
        };
        for (i, c) in sc.connections.iter().enumerate() {
            let work = match &c.app {
                AppSpec::Bulk { direction, bytes } => Work::Transfer { dir: *direction, bytes: *bytes, fct: false },
                AppSpec::Flow { direction, bytes } => Work::Transfer { dir: *direction, bytes: Some(*bytes), fct: true },
                AppSpec::MultiObject { request_bytes, .. } => {
                    let manifest = sc.manifest(i).expect("multi-object app");
                    let n = manifest.objects.len();
                    Work::Multi { manifest, request_bytes: *request_bytes, state: vec![ObjState::Waiting; n] }
                }
                AppSpec::Periodic { direction, interval_ms, chunk } => Work::Periodic {
                    dir: *direction,
                    interval: SimTime::from_secs_f64(interval_ms / 1e3),
                    chunk: *chunk,
                },
            };
            let start = SimTime::from_secs_f64(c.start_s);
            w.apps.push(App { spec: i, start, channels: Vec::new(), done: false, work });
            let server = sc.host_index(&c.server).expect("validated");
            w.listeners.insert((server, c.port), i);
            w.q.schedule(start, Ev::Start { app: i }).expect("start in the future");
        }
        w
    }

    pub fn run(mut self) -> RunOutput {
        let end = self.sc.duration();
        while let Some((_, ev)) = self.q.pop_until(end) {
            self.handle(ev);
            self.pump_metas();
        }
        self.finish(end)
    }

    // ----- bookkeeping -----

    fn now(&self) -> SimTime {
        self.q.now()
    }

    fn trace_line(&mut self, host: &str, kind: &str, rest: String) {
        let now = self.now();
        if let Some(t) = &mut self.trace {
            t.push(format!("t={} host={} kind={} {}", now.as_nanos(), host, kind, rest).trim_end().to_string());
        }
    }

    fn record(&mut self, slot: usize, metric: &str, value: f64) {
        let s = &self.slots[slot];
        let (host, cid, sf) = (s.host, self.chans[s.chan].cid, s.subflow);
        let now = self.q.now();
        self.log.push(now, &self.hosts[host].name, Some(cid), sf, metric, value);
    }

    fn record_chan(&mut self, chan: usize, side: usize, metric: &str, value: f64) {
        let c = &self.chans[chan];
        let spec = &self.sc.connections[self.apps[c.app].spec];
        let host = if side == CLIENT { &spec.client } else { &spec.server };
        let now = self.q.now();
        self.log.push(now, host, Some(c.cid), None, metric, value);
    }

    fn schedule(&mut self, at: SimTime, ev: Ev) -> EventHandle {
        let at = at.max(self.now());
        self.q.schedule(at, ev).expect("never in the past")
    }

    // ----- connection plumbing -----

    fn with_conn<R>(&mut self, s: usize, f: impl FnOnce(&mut Connection, &mut Io<'_>) -> R) -> R {
        let now = self.q.now();
        let mut out = Vec::new();
        let mut events = Vec::new();
        let r = {
            let slot = &mut self.slots[s];
            let rt = &mut self.hosts[slot.host].rt;
            let meta: Option<&mut dyn MetaOps> = match slot.meta {
                Some(m) => Some(&mut self.metas[m].meta),
                None => None,
            };
            let mut io = Io { now, rt, out: &mut out, events: &mut events, meta };
            f(&mut slot.conn, &mut io)
        };
        self.after(s, out, events);
        r
    }

    fn after(&mut self, s: usize, out: Vec<Segment>, events: Vec<ConnEvent>) {
        for seg in out {
            self.transmit(s, seg);
        }
        for ev in events {
            self.on_event(s, ev);
        }
        let snap = Snapshot::of(&self.slots[s].conn);
        let old = std::mem::replace(&mut self.slots[s].snap, snap.clone());
        if snap != old {
            if snap.cc != old.cc {
                let id = crate::cc::CcRegistry::shipped().reverse(snap.cc).map_or(0.0, f64::from);
                self.record(s, "cc_id", id);
            }
            if snap.clamp != old.clamp {
                self.record(s, "cwnd_clamp", snap.clamp.map_or(0.0, f64::from));
            }
            if snap.uto != old.uto {
                self.record(s, "user_timeout_ms", snap.uto.map_or(0.0, ms));
            }
            if snap.iw != old.iw {
                self.record(s, "iw", f64::from(snap.iw));
            }
            if snap.delack != old.delack {
                self.record(s, "delack_frac", snap.delack.0 as f64);
                self.record(s, "delack_quick", f64::from(snap.delack.1));
            }
        }
        self.sync_timer(s);
    }

    fn sync_timer(&mut self, s: usize) {
        let want = self.slots[s].conn.next_deadline();
        let have = self.slots[s].timer.map(|(t, _)| t);
        if want == have {
            return;
        }
        if let Some((_, h)) = self.slots[s].timer.take() {
            self.q.cancel(h);
        }
        if let Some(t) = want {
            let h = self.schedule(t, Ev::Timer { slot: s });
            self.slots[s].timer = Some((t, h));
        }
    }

    fn transmit(&mut self, s: usize, seg: Segment) {
        let host = self.hosts[self.slots[s].host].name.clone();
        let Some(&(link, dir)) = self.routes.get(&(seg.src.addr, seg.dst.addr)) else {
            self.trace_line(&host, "noroute", format!("dst={}", seg.dst.addr));
            return;
        };
        if self.trace.is_some() {
            let sl = &self.slots[s];
            let line = format!(
                "conn={} sf={} link={} flags={} seq={} ack={} len={} opts={}",
                self.chans[sl.chan].cid,
                sl.subflow.map_or("-".to_string(), |i| i.to_string()),
                self.links[link].name,
                flags_str(seg.flags),
                seg.seq,
                seg.ack,
                seg.payload,
                opts_str(&seg)
            );
            self.trace_line(&host, "tx", line);
        }
        let now = self.now();
        match self.links[link].link.transmit(dir, seg, now) {
            TxOutcome::Dropped => self.link_drop(link, dir, "tx"),
            TxOutcome::Queued => {}
            TxOutcome::Started(end) => {
                self.schedule(end, Ev::LinkDone { link, dir });
            }
        }
    }

    fn link_label(&self, link: usize, dir: Direction) -> String {
        let d = if dir == Direction::AtoB { "ab" } else { "ba" };
        format!("{}:{d}", self.links[link].name)
    }

    fn link_drop(&mut self, link: usize, dir: Direction, at: &str) {
        let label = self.link_label(link, dir);
        let now = self.now();
        self.log.push(now, &label, None, None, "drop", 1.0);
        self.trace_line(&label, "drop", format!("at={at}"));
    }

    fn on_event(&mut self, s: usize, ev: ConnEvent) {
        let now = self.now();
        match ev {
            ConnEvent::StateChanged(st) => {
                let host = self.hosts[self.slots[s].host].name.clone();
                let cid = self.chans[self.slots[s].chan].cid;
                self.trace_line(&host, "state", format!("conn={cid} state={st:?}"));
            }
            ConnEvent::Established => {
                self.record(s, "established", 1.0);
                self.on_established(s);
            }
            ConnEvent::Closed(err) => {
                self.record(s, "closed", close_code(&err));
                let host = self.hosts[self.slots[s].host].name.clone();
                let cid = self.chans[self.slots[s].chan].cid;
                let why = err.map_or("none".to_string(), |e| e.to_string().replace(' ', "_"));
                self.trace_line(&host, "closed", format!("conn={cid} error={why}"));
            }
            ConnEvent::Acked(n) => {
                self.record(s, "bytes_acked", n as f64);
                let sl = &mut self.slots[s];
                if !sl.acked_any && n > 0 {
                    sl.acked_any = true;
                    let ff = sl.first_flight.unwrap_or(0) as f64;
                    self.record(s, "first_flight_segs", ff);
                }
            }
            ConnEvent::Delivered(n) => {
                self.record(s, "delivered", n as f64);
                let sl = &self.slots[s];
                if sl.meta.is_none() {
                    let (chan, side) = (sl.chan, sl.side);
                    self.chans[chan].delivered[side] += n;
                    self.on_delivered(chan, side);
                }
            }
            ConnEvent::RttSample { rtt, srtt } => {
                self.record(s, "rtt_ms", ms(rtt));
                self.record(s, "srtt_ms", ms(srtt));
                let sl = &self.slots[s];
                if let (Some(m), Some(id)) = (sl.meta, sl.subflow) {
                    if self.metas[m].meta.on_meta_ack_rtt(id, srtt, now) {
                        let (chan, side) = (self.metas[m].chan, self.metas[m].side);
                        self.record_chan(chan, side, "backup_activated", 1.0);
                        let host = self.hosts[self.slots[s].host].name.clone();
                        self.trace_line(&host, "backup_activated", format!("srtt_ns={}", srtt.as_nanos()));
                    }
                }
            }
            ConnEvent::Cwnd(c) => {
                if c != self.slots[s].last_cwnd {
                    self.slots[s].last_cwnd = c;
                    self.record(s, "cwnd", c);
                }
            }
            ConnEvent::Retransmit { len, .. } => self.record(s, "retransmit", f64::from(len)),
            ConnEvent::Rto { rto } => self.record(s, "rto", ms(rto)),
            ConnEvent::AckSent => self.record(s, "ack_sent", 1.0),
            ConnEvent::DataSent(n) => {
                self.record(s, "data_sent", f64::from(n));
                let sl = &mut self.slots[s];
                if !sl.acked_any {
                    *sl.first_flight.get_or_insert(0) += 1;
                }
            }
            ConnEvent::MappedData { dsn, len } => {
                let Some(m) = self.slots[s].meta else { return };
                let n = self.metas[m].meta.on_mapped(dsn, u64::from(len));
                let ack = self.metas[m].meta.data_ack();
                for &x in &self.metas[m].slots {
                    self.slots[x].conn.set_data_ack(ack);
                }
                if n > 0 {
                    let (chan, side) = (self.metas[m].chan, self.metas[m].side);
                    self.record_chan(chan, side, "meta_delivered", n as f64);
                    self.chans[chan].delivered[side] += n;
                    self.on_delivered(chan, side);
                }
            }
            ConnEvent::DataAck(a) => {
                if let Some(m) = self.slots[s].meta {
                    self.metas[m].meta.on_data_ack(a);
                }
            }
            ConnEvent::PeerMptcp { key_or_token, join: false, .. } => {
                let sl = &self.slots[s];
                if sl.side == CLIENT && sl.subflow == Some(0) {
                    self.chans[sl.chan].peer_key = Some(key_or_token);
                }
            }
            ConnEvent::PeerMptcp { .. } => {}
            ConnEvent::OptionIgnored(k) => self.record(s, "option_ignored", f64::from(k)),
        }
    }

    fn on_established(&mut self, s: usize) {
        let (chan, side, meta, sub) = {
            let sl = &self.slots[s];
            (sl.chan, sl.side, sl.meta, sl.subflow)
        };
        if let (Some(m), Some(id)) = (meta, sub) {
            self.metas[m].meta.mark_established(id);
            if side == CLIENT && id == 0 {
                let spec = &self.sc.connections[self.apps[self.chans[chan].app].spec];
                let now = self.now();
                for (j, sf) in spec.subflows.iter().enumerate().skip(1) {
                    self.schedule(now + SimTime::from_secs_f64(sf.delay_s), Ev::Join { chan, sub: j });
                }
            }
        }
    }

    // ----- endpoints -----

    fn iss(&mut self) -> u32 {
        self.rng.random()
    }

    fn conn_config(&mut self, app: usize, role: Role) -> ConnConfig {
        let spec = &self.sc.connections[self.apps[app].spec];
        let (cc, iw, thr) = (spec.cc.clone(), spec.iw, spec.delack_threshold);
        let mut cfg = ConnConfig::new(role, self.iss());
        cfg.cc = cc;
        cfg.initial_cwnd = iw;
        if let Some(t) = thr {
            cfg.delack.immediate_ack_threshold = t;
        }
        cfg
    }

    /// Client and server endpoints of a path over `link`.
    fn endpoints(&mut self, app: usize, link: usize) -> (Endpoint, Endpoint) {
        let spec = &self.sc.connections[self.apps[app].spec];
        let ci = self.sc.host_index(&spec.client).expect("validated");
        let si = self.sc.host_index(&spec.server).expect("validated");
        let (a, b) = self.sc.link_addrs(link);
        let client_is_a = self.sc.links[link].a == spec.client;
        let (caddr, saddr) = if client_is_a { (a, b) } else { (b, a) };
        let port = self.next_port;
        self.next_port = self.next_port.wrapping_add(1).max(1024);
        (
            Endpoint { host: ci as u32, addr: caddr, port },
            Endpoint { host: si as u32, addr: saddr, port: spec.port },
        )
    }

    fn new_slot(&mut self, conn: Connection, host: usize, side: usize, chan: usize, meta: Option<usize>, subflow: Option<u32>) -> usize {
        let snap = Snapshot::of(&conn);
        let key = (conn.local(), conn.remote());
        self.slots.push(Slot {
            conn,
            host,
            side,
            chan,
            meta,
            subflow,
            timer: None,
            first_flight: None,
            acked_any: false,
            snap,
            last_cwnd: f64::NAN,
        });
        let s = self.slots.len() - 1;
        self.demux.insert(key, s);
        s
    }

    /// Opens a connection (or the master subflow) and registers the slot.
    fn open(&mut self, chan: usize, link: usize, meta: Option<(usize, SubflowCfg)>) -> usize {
        let app = self.chans[chan].app;
        let (local, remote) = self.endpoints(app, link);
        let mut cfg = self.conn_config(app, Role::Client);
        cfg.subflow = meta.map(|(_, c)| c);
        let host = local.host as usize;
        let s = self.slots.len();
        if let Some((m, c)) = meta {
            let id = self.metas[m].meta.add_subflow(s, c.backup);
            debug_assert_eq!(id, c.subflow_id);
            self.metas[m].slots.push(s);
        }
        let now = self.now();
        let mut out = Vec::new();
        let mut events = Vec::new();
        let conn = {
            let rt = &mut self.hosts[host].rt;
            let meta: Option<&mut dyn MetaOps> = match meta {
                Some((m, _)) => Some(&mut self.metas[m].meta),
                None => None,
            };
            let mut io = Io { now, rt, out: &mut out, events: &mut events, meta };
            Connection::connect(cfg.clone(), local, remote, &mut io)
        };
        let slot = self.new_slot(conn, host, CLIENT, chan, meta.map(|(m, _)| m), cfg.subflow.map(|c| c.subflow_id));
        debug_assert_eq!(slot, s);
        self.after(s, out, events);
        s
    }

    fn start_app(&mut self, app: usize) {
        let spec_i = self.apps[app].spec;
        let spec = &self.sc.connections[spec_i];
        let n = match &spec.app {
            AppSpec::MultiObject { connections, .. } => *connections,
            _ => 1,
        };
        let kind = spec.kind;
        for _ in 0..n {
            let chan = self.chans.len();
            self.chans.push(Channel { app, cid: chan as u32, ..Default::default() });
            self.apps[app].channels.push(chan);
            match kind {
                ConnKind::Tcp => {
                    let link = self.sc.conn_link(&self.sc.connections[spec_i]).expect("validated");
                    let s = self.open(chan, link, None);
                    self.set_end(chan, CLIENT, End::Tcp(s));
                }
                ConnKind::Mptcp => {
                    let key = self.rng.random::<u64>();
                    let sched = self.sc.connections[spec_i].scheduler;
                    self.metas.push(MetaSlot { meta: MetaConnection::new(key, Role::Client, sched), chan, side: CLIENT, slots: Vec::new() });
                    let m = self.metas.len() - 1;
                    self.set_end(chan, CLIENT, End::Meta(m));
                    let link = self.sc.link_index(&self.sc.connections[spec_i].subflows[0].link).expect("validated");
                    let cfg = SubflowCfg { key, subflow_id: 0, join: false, backup: false };
                    self.open(chan, link, Some((m, cfg)));
                }
            }
        }
        let now = self.now();
        match &self.apps[app].work {
            Work::Transfer { dir, bytes, .. } => {
                let (side, b) = (if *dir == TransferDir::Download { SERVER } else { CLIENT }, bytes.unwrap_or(UNBOUNDED));
                let chan = self.apps[app].channels[0];
                self.chan_send(chan, side, b);
            }
            Work::Multi { .. } => self.multi_dispatch(app),
            Work::Periodic { .. } => {
                self.schedule(now, Ev::Tick { app });
            }
        }
    }

    fn set_end(&mut self, chan: usize, side: usize, end: End) {
        self.chans[chan].ends[side] = Some(end);
        let backlog = std::mem::take(&mut self.chans[chan].backlog[side]);
        if backlog > 0 {
            self.chan_send(chan, side, backlog);
        }
    }

    fn chan_send(&mut self, chan: usize, side: usize, bytes: u64) {
        match self.chans[chan].ends[side] {
            None => self.chans[chan].backlog[side] += bytes,
            Some(End::Tcp(s)) => {
                let _ = self.with_conn(s, |c, io| c.send(bytes, io));
            }
            Some(End::Meta(m)) => self.metas[m].meta.submit(bytes),
        }
    }

    fn join(&mut self, chan: usize, sub: usize) {
        let Some(End::Meta(m)) = self.chans[chan].ends[CLIENT] else { return };
        let Some(peer) = self.chans[chan].peer_key else { return };
        let spec = &self.sc.connections[self.apps[self.chans[chan].app].spec];
        let sf = &spec.subflows[sub];
        let link = self.sc.link_index(&sf.link).expect("validated");
        let cfg = SubflowCfg { key: peer, subflow_id: self.metas[m].meta.next_subflow_id(), join: true, backup: sf.backup };
        self.open(chan, link, Some((m, cfg)));
    }

    /// Passive open. MPTCP SYNs either create a meta (MP_CAPABLE) or join
    /// the meta whose token they carry (MP_JOIN).
    fn accept(&mut self, host: usize, seg: &Segment, device: DeviceType) {
        let Some(&app) = self.listeners.get(&(host, seg.dst.port)) else {
            self.trace_line(&self.hosts[host].name.clone(), "refused", format!("port={}", seg.dst.port));
            return;
        };
        let Some(&peer_slot) = self.demux.get(&(seg.src, seg.dst)) else { return };
        let chan = self.slots[peer_slot].chan;
        let mut mp = None;
        if let Ok(opts) = decode_options(&seg.options) {
            for o in opts.iter().filter(|o| o.kind == kind::MPTCP) {
                if let Ok(r) = decode_mptcp(o) {
                    if r.subtype == mptcp_subtype::MP_CAPABLE && r.data.len() == 8 {
                        mp = Some((false, 0u32, false));
                    } else if r.subtype == mptcp_subtype::MP_JOIN && r.data.len() == 4 {
                        let token = u32::from_be_bytes(r.data[..4].try_into().expect("length checked"));
                        mp = Some((true, token, r.flags & MP_BACKUP_FLAG != 0));
                    }
                }
            }
        }
        let is_mptcp = self.sc.connections[self.apps[app].spec].kind == ConnKind::Mptcp;
        let mut cfg = self.conn_config(app, Role::Server);
        let s = self.slots.len();
        let meta = match (is_mptcp, mp) {
            (true, Some((false, _, _))) => {
                let key = self.rng.random::<u64>();
                let sched = self.sc.connections[self.apps[app].spec].scheduler;
                let mut meta = MetaConnection::new(key, Role::Server, sched);
                let id = meta.add_subflow(s, false);
                self.metas.push(MetaSlot { meta, chan, side: SERVER, slots: vec![s] });
                let m = self.metas.len() - 1;
                self.tokens.insert(key as u32, m);
                cfg.subflow = Some(SubflowCfg { key, subflow_id: id, join: false, backup: false });
                Some(m)
            }
            (true, Some((true, token, backup))) => {
                let Some(&m) = self.tokens.get(&token) else {
                    let name = self.hosts[host].name.clone();
                    self.trace_line(&name, "unknown_token", format!("token={token:#x}"));
                    return;
                };
                let id = self.metas[m].meta.add_subflow(s, backup);
                self.metas[m].slots.push(s);
                let key = self.metas[m].meta.key();
                cfg.subflow = Some(SubflowCfg { key, subflow_id: id, join: true, backup });
                Some(m)
            }
            _ => None,
        };
        let now = self.now();
        let mut out = Vec::new();
        let mut events = Vec::new();
        let conn = {
            let rt = &mut self.hosts[host].rt;
            let meta: Option<&mut dyn MetaOps> = match meta {
                Some(m) => Some(&mut self.metas[m].meta),
                None => None,
            };
            let mut io = Io { now, rt, out: &mut out, events: &mut events, meta };
            Connection::accept(cfg.clone(), seg.dst, seg.src, seg, Some(device), &mut io)
        };
        self.new_slot(conn, host, SERVER, chan, meta, cfg.subflow.map(|c| c.subflow_id));
        self.after(s, out, events);
        let first = cfg.subflow.is_none_or(|c| !c.join);
        if first {
            let end = meta.map_or(End::Tcp(s), End::Meta);
            self.set_end(chan, SERVER, end);
        }
    }

    fn pump_metas(&mut self) {
        for m in 0..self.metas.len() {
            if self.metas[m].meta.pending() > 0 {
                self.pump(m);
            }
        }
    }

    /// Hands pending meta data to subflows chosen by the scheduler.
    fn pump(&mut self, m: usize) {
        while self.metas[m].meta.pending() > 0 {
            let views: Vec<SubflowView> = self.metas[m]
                .slots
                .iter()
                .enumerate()
                .map(|(id, &s)| {
                    let c = &self.slots[s].conn;
                    SubflowView { id: id as u32, srtt: c.srtt(), can_take: c.can_take_data() }
                })
                .collect();
            let picks = match self.metas[m].meta.pick(&views) {
                Ok(p) if !p.is_empty() => p,
                _ => return,
            };
            let first = self.metas[m].slots[picks[0] as usize];
            let mss = u64::from(self.slots[first].conn.mss_cache());
            let Some((dsn, len)) = self.metas[m].meta.take_chunk(mss) else { return };
            for id in picks {
                let s = self.metas[m].slots[id as usize];
                let _ = self.with_conn(s, |c, io| c.send_mapped(len, dsn, io));
            }
        }
    }

    // ----- applications -----

    fn on_delivered(&mut self, chan: usize, side: usize) {
        let app = self.chans[chan].app;
        let now = self.now();
        let start = self.apps[app].start;
        match &self.apps[app].work {
            &Work::Transfer { dir, bytes: Some(b), fct } => {
                let recv = if dir == TransferDir::Download { CLIENT } else { SERVER };
                if side == recv && !self.apps[app].done && self.chans[chan].delivered[side] >= b {
                    self.apps[app].done = true;
                    if fct {
                        self.record_chan(chan, side, "fct_ms", ms(now - start));
                    }
                }
            }
            Work::Multi { .. } => {
                if side == SERVER {
                    while let Some(&(end, size)) = self.chans[chan].server_wait.front() {
                        if self.chans[chan].delivered[SERVER] < end {
                            break;
                        }
                        self.chans[chan].server_wait.pop_front();
                        self.chan_send(chan, SERVER, size);
                    }
                } else {
                    let mut finished = Vec::new();
                    while let Some(&(end, obj)) = self.chans[chan].client_wait.front() {
                        if self.chans[chan].delivered[CLIENT] < end {
                            break;
                        }
                        self.chans[chan].client_wait.pop_front();
                        finished.push(obj);
                    }
                    if finished.is_empty() {
                        return;
                    }
                    self.chans[chan].busy = !self.chans[chan].client_wait.is_empty();
                    for obj in finished {
                        if let Work::Multi { state, .. } = &mut self.apps[app].work {
                            state[obj] = ObjState::Done;
                        }
                        self.record_chan(chan, CLIENT, "object_done_ms", ms(now - start));
                    }
                    let all = matches!(&self.apps[app].work, Work::Multi { state, .. } if state.iter().all(|s| *s == ObjState::Done));
                    if all && !self.apps[app].done {
                        self.apps[app].done = true;
                        self.record_chan(chan, CLIENT, "fct_ms", ms(now - start));
                    } else {
                        self.multi_dispatch(app);
                    }
                }
            }
            _ => {}
        }
    }

    /// Requests every ready object on an idle connection.
    fn multi_dispatch(&mut self, app: usize) {
        loop {
            let Work::Multi { manifest, state, request_bytes } = &self.apps[app].work else { return };
            let ready = (0..state.len()).find(|&i| {
                state[i] == ObjState::Waiting && manifest.objects[i].deps.iter().all(|&d| state[d] == ObjState::Done)
            });
            let Some(obj) = ready else { return };
            let Some(&chan) = self.apps[app].channels.iter().find(|&&c| !self.chans[c].busy) else { return };
            let (size, req) = (manifest.objects[obj].size, *request_bytes);
            if let Work::Multi { state, .. } = &mut self.apps[app].work {
                state[obj] = ObjState::Fetching;
            }
            let c = &mut self.chans[chan];
            c.busy = true;
            c.req_end += req;
            c.resp_end += size;
            c.server_wait.push_back((c.req_end, size));
            c.client_wait.push_back((c.resp_end, obj));
            self.chan_send(chan, CLIENT, req);
        }
    }

    fn tick(&mut self, app: usize) {
        let Work::Periodic { dir, interval, chunk } = self.apps[app].work else { return };
        let side = if dir == TransferDir::Download { SERVER } else { CLIENT };
        for chan in self.apps[app].channels.clone() {
            self.chan_send(chan, side, chunk);
        }
        let next = self.now() + interval;
        if next < self.sc.duration() {
            self.schedule(next, Ev::Tick { app });
        }
    }

    // ----- events -----

    fn handle(&mut self, ev: Ev) {
        let now = self.now();
        match ev {
            Ev::LinkDone { link, dir } => {
                let (done, next) = self.links[link].link.finish_service(dir, now);
                if let Some((seg, at)) = done {
                    self.schedule(at, Ev::Arrive { link, dir, seg });
                }
                if let Some(end) = next {
                    self.schedule(end, Ev::LinkDone { link, dir });
                }
            }
            Ev::Arrive { link, dir, seg } => {
                if !self.links[link].link.arrive(dir, &seg, now) {
                    self.link_drop(link, dir, "rx");
                    return;
                }
                let device = self.links[link].link.device();
                self.deliver(seg, device);
            }
            Ev::Timer { slot } => {
                self.slots[slot].timer = None;
                self.with_conn(slot, |c, io| c.on_timer(io));
            }
            Ev::Start { app } => self.start_app(app),
            Ev::Join { chan, sub } => self.join(chan, sub),
            Ev::Tick { app } => self.tick(app),
        }
    }

    fn deliver(&mut self, seg: Segment, device: DeviceType) {
        let host = seg.dst.host as usize;
        if self.trace.is_some() {
            let line = format!(
                "src={}:{} flags={} seq={} ack={} len={} opts={}",
                seg.src.addr,
                seg.src.port,
                flags_str(seg.flags),
                seg.seq,
                seg.ack,
                seg.payload,
                opts_str(&seg)
            );
            let name = self.hosts[host].name.clone();
            self.trace_line(&name, "rx", line);
        }
        match self.demux.get(&(seg.dst, seg.src)) {
            Some(&s) => self.with_conn(s, |c, io| c.on_segment(&seg, Some(device), io)),
            None if seg.is_syn() && !seg.flags.contains(TcpFlags::ACK) => self.accept(host, &seg, device),
            None => {}
        }
    }

    fn finish(mut self, end: SimTime) -> RunOutput {
        for s in 0..self.slots.len() {
            for op in HookOp::ALL {
                let n = self.slots[s].conn.hook_count(op) as f64;
                self.record(s, &format!("hook.{}", op.name()), n);
            }
            let st = self.slots[s].conn.stats().clone();
            let (dsi, dso) = (self.slots[s].conn.data_segs_in(), self.slots[s].conn.data_segs_out());
            for (k, v) in [
                ("segs_out", st.segs_out as f64),
                ("pure_acks_out", st.pure_acks_out as f64),
                ("retransmits", st.retransmits as f64),
                ("max_frame", st.max_frame as f64),
                ("max_header", st.max_header as f64),
                ("data_segs_in", dsi as f64),
                ("data_segs_out", dso as f64),
            ] {
                self.record(s, k, v);
            }
        }
        let mut faults = Vec::new();
        let mut by_host = BTreeMap::new();
        for h in &self.hosts {
            let st = h.rt.stats();
            by_host.insert(
                h.name.clone(),
                [
                    ("runtime.gateable", st.gateable_total() as f64),
                    ("runtime.faults", st.faults.len() as f64),
                    ("runtime.filtered", st.filtered as f64),
                    ("runtime.rejected_writes", st.rejected_writes as f64),
                ],
            );
            faults.extend(st.faults.iter().cloned());
        }
        for (host, vals) in by_host {
            for (k, v) in vals {
                self.log.push(end, &host, None, None, k, v);
            }
        }
        for i in 0..self.links.len() {
            for dir in [Direction::AtoB, Direction::BtoA] {
                let st = self.links[i].link.stats(dir);
                let label = self.link_label(i, dir);
                self.log.push(end, &label, None, None, "link.delivered_bytes", st.delivered_bytes as f64);
                self.log.push(end, &label, None, None, "link.dropped", st.dropped as f64);
            }
        }
        RunOutput { log: self.log, trace: self.trace.unwrap_or_default(), faults }
    }
}
