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

//! Single-path connection behavior, driven through small scenarios.

use std::sync::{Arc, Mutex};

use proptest::prelude::*;

use tcpext::harness::{self, Filter, MetricsLog, RunOutput, Scenario};
use tcpext::hookrt::{SockField, SockFieldError};
use tcpext::{ExtensionProgram, HookFlagSet, HookOp, Side, SockOpsContext, TcpOption};

struct Path<'a> {
    rate_mbps: f64,
    delay_ms: f64,
    loss: f64,
    extra: &'a str,
}

const UP_100K: &str = r#"{ model = "flow", direction = "upload", bytes = 100000 }"#;

const FAST: Path<'static> = Path { rate_mbps: 100.0, delay_ms: 10.0, loss: 0.0, extra: "" };

fn scenario(path: &Path<'_>, app: &str, duration_s: f64, tail: &str) -> Scenario {
    let text = format!(
        r#"
name = "stack"
seed = 1
duration_s = {duration_s}
trace = true

[[host]]
name = "client"

[[host]]
name = "server"

[[link]]
name = "path"
a = "client"
b = "server"
rate_mbps = {rate}
delay_ms = {delay}
queue_cap = 200
loss = {loss}
{extra}

[[connection]]
client = "client"
server = "server"
app = {app}
{tail}
"#,
        rate = path.rate_mbps,
        delay = path.delay_ms,
        loss = path.loss,
        extra = path.extra,
    );
    Scenario::parse(&text).unwrap_or_else(|e| panic!("{e}\n{text}"))
}

fn client() -> Filter {
    Filter::host("client")
}

fn server() -> Filter {
    Filter::host("server")
}

fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.split(' ').find_map(|w| w.strip_prefix(key)?.strip_prefix('='))
}

/// (time ns, payload length, flags) of every segment `host` sent.
fn sent(out: &RunOutput, host: &str) -> Vec<(u64, u32, String)> {
    out.trace
        .iter()
        .filter(|l| field(l, "host") == Some(host) && field(l, "kind") == Some("tx"))
        .map(|l| {
            let t = field(l, "t").unwrap().parse().unwrap();
            let len = field(l, "len").unwrap().parse().unwrap();
            (t, len, field(l, "flags").unwrap().to_string())
        })
        .collect()
}

fn received(out: &RunOutput, host: &str) -> Vec<(u64, u32)> {
    out.trace
        .iter()
        .filter(|l| field(l, "host") == Some(host) && field(l, "kind") == Some("rx"))
        .map(|l| (field(l, "t").unwrap().parse().unwrap(), field(l, "len").unwrap().parse().unwrap()))
        .collect()
}

fn only(log: &MetricsLog, metric: &str, f: &Filter) -> f64 {
    let v = log.values(metric, f);
    assert_eq!(v.len(), 1, "{metric}: {v:?}");
    v[0]
}

fn with(sc: &Scenario, make: impl Fn() -> Vec<(Box<dyn ExtensionProgram>, Side)>) -> RunOutput {
    harness::run_with(sc, &make)
}

#[test]
fn handshake_takes_one_round_trip() {
    let sc = scenario(&Path { delay_ms: 40.0, ..FAST }, r#"{ model = "flow", bytes = 1000 }"#, 2.0, "");
    let out = harness::run(&sc);
    let t = out.log.first("established", &client()).expect("established").t as f64 / 1e6;
    // two tiny frames at 100 Mbps add a few microseconds
    assert!((80.0..80.1).contains(&t), "established at {t} ms");
    assert_eq!(out.log.values("established", &server()).len(), 1);
}

#[test]
fn blackholed_syn_times_out() {
    let path = Path { extra: "blackhole = [{ start_s = 0 }]", ..FAST };
    let sc = scenario(&path, r#"{ model = "flow", bytes = 1000 }"#, 600.0, "");
    let out = harness::run(&sc);
    assert_eq!(only(&out.log, "closed", &client()), 1.0);
    assert!(out.log.values("established", &client()).is_empty());
    let syns = sent(&out, "client").iter().filter(|s| s.2 == "S").count();
    assert!(syns > 1, "SYN sent {syns} times");
}

struct Noop;

impl ExtensionProgram for Noop {
    fn name(&self) -> &str {
        "noop"
    }

    fn handle(&mut self, _ctx: &mut SockOpsContext<'_>) {}
}

#[test]
fn established_ops_fire_once_per_side() {
    let sc = scenario(&FAST, r#"{ model = "flow", bytes = 10000 }"#, 2.0, "");
    let out = with(&sc, || vec![(Box::new(Noop) as Box<dyn ExtensionProgram>, Side::Both)]);
    assert_eq!(only(&out.log, "hook.active_established", &client()), 1.0);
    assert_eq!(only(&out.log, "hook.passive_established", &server()), 1.0);
    assert_eq!(only(&out.log, "hook.passive_established", &client()), 0.0);
    // nothing enabled the gated ops
    assert_eq!(only(&out.log, "hook.options_write", &client()), 0.0);
}

#[test]
fn first_flight_is_ten_segments_by_default() {
    let sc = scenario(&FAST, UP_100K, 2.0, "");
    let out = harness::run(&sc);
    assert_eq!(only(&out.log, "first_flight_segs", &client()), 10.0);
    let data: Vec<_> = sent(&out, "client").into_iter().filter(|s| s.1 > 0).collect();
    let first = data[0].0;
    assert_eq!(data.iter().filter(|s| s.0 < first + 5_000_000).count(), 10);
}

/// Reserves `reserve` bytes and writes an option of `len` bytes on every
/// segment after the handshake.
struct Reserve {
    reserve: i64,
    len: usize,
}

impl ExtensionProgram for Reserve {
    fn name(&self) -> &str {
        "reserve"
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::ActiveEstablished => ctx.enable(HookFlagSet::OPTION_WRITE),
            HookOp::OptionsSizeCalc => ctx.reply = self.reserve,
            HookOp::OptionsWrite => {
                ctx.option_out = Some(TcpOption { kind: 253, payload: vec![7; self.len - 2] })
            }
            _ => {}
        }
    }
}

fn payload_with_reservation(reserve: i64, len: usize) -> u32 {
    let sc = scenario(&FAST, UP_100K, 2.0, "");
    let out = with(&sc, || vec![(Box::new(Reserve { reserve, len }) as Box<dyn ExtensionProgram>, Side::Client)]);
    sent(&out, "client").iter().map(|s| s.1).max().unwrap()
}

#[test]
fn reserved_option_bytes_come_out_of_the_payload() {
    assert_eq!(payload_with_reservation(0, 2), 1460);
    assert_eq!(payload_with_reservation(4, 4), 1456);
    // three bytes are padded to four
    assert_eq!(payload_with_reservation(3, 3), 1456);
}

#[test]
fn oversized_reservation_is_rejected() {
    assert_eq!(payload_with_reservation(44, 44), 1460);
}

/// Enables option parsing on the server and keeps every option it sees.
struct Parser {
    seen: Arc<Mutex<Vec<TcpOption>>>,
}

impl ExtensionProgram for Parser {
    fn name(&self) -> &str {
        "parser"
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::PassiveEstablished => ctx.enable(HookFlagSet::PARSE_OPTIONS),
            HookOp::ParseOptions => {
                if let Some(o) = ctx.option_in {
                    self.seen.lock().unwrap().push(o.clone());
                }
            }
            _ => {}
        }
    }
}

#[test]
fn parse_hook_sees_the_peer_option() {
    let sc = scenario(
        &FAST,
        r#"{ model = "multi_object", objects = [{ size = 20000 }] }"#,
        2.0,
        "[[extension]]\nprogram = \"appendix\"\nside = \"client\"",
    );
    let seen = Arc::new(Mutex::new(Vec::new()));
    with(&sc, || vec![(Box::new(Parser { seen: seen.clone() }) as Box<dyn ExtensionProgram>, Side::Server)]);
    let seen = seen.lock().unwrap();
    assert!(!seen.is_empty());
    assert!(seen.iter().all(|o| o.kind == 66 && o.payload == [0x00, 0x14]), "{seen:?}");
}

/// Gap between each data segment the server receives and its next ACK,
/// for segments after the start-up phase.
fn ack_gaps(chunk: u64) -> Vec<(u32, u64)> {
    let app = format!(r#"{{ model = "periodic", direction = "upload", interval_ms = 300, chunk = {chunk} }}"#);
    let sc = scenario(&FAST, &app, 12.0, "");
    let out = harness::run(&sc);
    let acks: Vec<u64> = sent(&out, "server").iter().map(|s| s.0).collect();
    let rx = received(&out, "server");
    rx.iter()
        .filter(|r| r.1 > 0 && r.0 > 8_000_000_000)
        .map(|r| (r.1, acks.iter().find(|&&t| t >= r.0).map_or(u64::MAX, |t| t - r.0)))
        .collect()
}

#[test]
fn lone_segment_is_acked_after_the_delack_timeout() {
    let gaps = ack_gaps(1000);
    assert!(!gaps.is_empty());
    for (_, g) in gaps {
        assert_eq!(g, 40_000_000);
    }
}

#[test]
fn second_segment_is_acked_at_once() {
    let gaps = ack_gaps(2920);
    assert!(!gaps.is_empty());
    // the first of each pair waits for the second, which is acked on arrival
    for pair in gaps.chunks(2) {
        assert!(pair[0].1 > 0 && pair[0].1 < 1_000_000, "{pair:?}");
        assert_eq!(pair[1].1, 0, "{pair:?}");
    }
}

/// Counts RTO firings seen through the hook.
struct RtoWatch {
    fired: Arc<Mutex<u32>>,
}

impl ExtensionProgram for RtoWatch {
    fn name(&self) -> &str {
        "rto-watch"
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::ActiveEstablished => ctx.enable(HookFlagSet::RTO),
            HookOp::RtoFired => *self.fired.lock().unwrap() += 1,
            _ => {}
        }
    }
}

#[test]
fn rto_hook_sees_each_firing() {
    let path = Path { extra: "blackhole = [{ start_s = 1 }]", ..FAST };
    let sc = scenario(&path, r#"{ model = "bulk", direction = "upload" }"#, 30.0, "");
    let fired = Arc::new(Mutex::new(0));
    let out = with(&sc, || vec![(Box::new(RtoWatch { fired: fired.clone() }) as Box<dyn ExtensionProgram>, Side::Client)]);
    let rtos = out.log.values("rto", &client());
    assert!(rtos.len() >= 5);
    assert_eq!(*fired.lock().unwrap() as usize, rtos.len());
    // exponential backoff
    assert!(rtos.windows(2).all(|w| w[1] >= w[0]), "{rtos:?}");
}

#[test]
fn without_user_timeout_retries_run_out() {
    let path = Path { extra: "blackhole = [{ start_s = 1 }]", ..FAST };
    let sc = scenario(&path, r#"{ model = "bulk", direction = "upload" }"#, 3000.0, "");
    let out = harness::run(&sc);
    assert_eq!(only(&out.log, "closed", &client()), 3.0);
    let t = out.log.first("closed", &client()).unwrap().t as f64 / 1e9;
    // well past any user timeout in the scenarios
    assert!(t > 60.0, "closed at {t} s");
}

/// Writes a socket field once established and reads fields back from
/// later option-size hooks.
struct Fields {
    set: (SockField, u64),
    /// Set again once data has gone out.
    late: Option<(SockField, u64)>,
    seen: Arc<Mutex<Vec<Result<u64, SockFieldError>>>>,
}

impl ExtensionProgram for Fields {
    fn name(&self) -> &str {
        "fields"
    }

    fn handle(&mut self, ctx: &mut SockOpsContext<'_>) {
        match ctx.op {
            HookOp::ActiveEstablished => {
                let r = ctx.set_sock_field(self.set.0, self.set.1).map(|()| 0);
                self.seen.lock().unwrap().push(r);
                ctx.enable(HookFlagSet::OPTION_WRITE);
            }
            HookOp::OptionsSizeCalc => {
                let mut seen = self.seen.lock().unwrap();
                if seen.len() == 1 {
                    seen.push(ctx.get_sock_field(self.set.0));
                }
                match self.late {
                    Some((f, v)) if ctx.get_sock_field(SockField::DataSegsOut).unwrap_or(0) > 0 => {
                        seen.push(ctx.set_sock_field(f, v).map(|()| 0));
                        self.late = None;
                    }
                    _ => {}
                }
            }
            _ => {}
        }
    }
}

fn fields(set: (SockField, u64), late: Option<(SockField, u64)>) -> (RunOutput, Vec<Result<u64, SockFieldError>>) {
    let sc = scenario(&FAST, r#"{ model = "flow", direction = "upload", bytes = 200000 }"#, 2.0, "");
    let seen = Arc::new(Mutex::new(Vec::new()));
    let out = with(&sc, || {
        vec![(Box::new(Fields { set, late, seen: seen.clone() }) as Box<dyn ExtensionProgram>, Side::Client)]
    });
    let seen = seen.lock().unwrap().clone();
    (out, seen)
}

#[test]
fn user_timeout_reads_back() {
    let (_, seen) = fields((SockField::UserTimeoutUs, 5_000_000), None);
    assert_eq!(seen[..2], [Ok(0), Ok(5_000_000)]);
}

#[test]
fn initial_cwnd_before_data_sets_the_first_flight() {
    let (out, seen) = fields((SockField::InitialCwnd, 20), None);
    assert_eq!(seen[..2], [Ok(0), Ok(20)]);
    assert_eq!(only(&out.log, "first_flight_segs", &client()), 20.0);
}

#[test]
fn initial_cwnd_after_data_is_rejected() {
    let (out, seen) = fields((SockField::UserTimeoutUs, 1_000_000), Some((SockField::InitialCwnd, 20)));
    assert_eq!(seen.len(), 3, "{seen:?}");
    assert_eq!(seen[2], Err(SockFieldError::IllegalPhase(SockField::InitialCwnd)));
    assert_eq!(only(&out.log, "first_flight_segs", &client()), 10.0);
}

#[test]
fn same_seed_same_log() {
    let path = Path { loss: 0.01, ..FAST };
    let sc = scenario(&path, r#"{ model = "flow", bytes = 500000 }"#, 10.0, "");
    let (a, b) = (harness::run(&sc), harness::run(&sc));
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    assert_eq!(a.trace, b.trace);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lossy_transfer_delivers_every_byte(
        loss in 0.0f64..0.05,
        seed in 0u64..1000,
        bytes in 1u64..300_000,
        upload in any::<bool>(),
        cc in prop::sample::select(vec!["newreno", "cubic", "vegas", "bbr"]),
    ) {
        let dir = if upload { "upload" } else { "download" };
        let app = format!(r#"{{ model = "flow", direction = "{dir}", bytes = {bytes} }}"#);
        let mut sc = scenario(&Path { loss, rate_mbps: 10.0, ..FAST }, &app, 300.0, &format!("cc = \"{cc}\""));
        sc.seed = seed;
        sc.trace = false;
        let out = harness::run(&sc);
        let (tx, rx) = if upload { (client(), server()) } else { (server(), client()) };
        prop_assert_eq!(out.log.sum("delivered", &rx), bytes as f64);
        prop_assert!(out.log.first("fct_ms", &rx).is_some());
        prop_assert!(only(&out.log, "max_frame", &tx) <= 1500.0);
        for v in out.log.values("srtt_ms", &tx) {
            prop_assert!(v.is_finite() && v > 0.0);
        }
    }
}
