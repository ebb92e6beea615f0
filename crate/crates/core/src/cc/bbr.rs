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

use std::collections::VecDeque;

use super::{AckSample, CongestionControl, LossKind, Window};
use crate::scalar::Scalar;

const STARTUP_GAIN: f64 = 2.885;
const PROBE_CWND_GAIN: f64 = 2.0;
const PROBE_GAINS: [f64; 8] = [1.25, 0.75, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
const BW_WINDOW_ROUNDS: u64 = 10;
const MIN_RTT_WINDOW_SECS: f64 = 10.0;
const FULL_BW_GROWTH: f64 = 1.25;
const FULL_BW_ROUNDS: u32 = 3;
const MIN_CWND: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BbrMode {
    Startup,
    Drain,
    ProbeBw,
}

/// Model-based controller: windowed-max delivery rate and windowed-min RTT
/// drive a paced sending rate and a cwnd of gain·BDP. There is no PROBE_RTT
/// phase.
#[derive(Debug, Clone)]
pub struct BbrLite<T> {
    mode: BbrMode,
    round: u64,
    bw_samples: VecDeque<(u64, T)>,
    min_rtt: Option<(T, T)>,
    full_bw: T,
    full_bw_rounds: u32,
    cycle_index: usize,
    cycle_start: T,
    pacing_gain: T,
    cwnd_gain: T,
}

impl<T: Scalar> Default for BbrLite<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> BbrLite<T> {
    pub const NAME: &'static str = "bbr";

    pub fn new() -> Self {
        BbrLite {
            mode: BbrMode::Startup,
            round: 0,
            bw_samples: VecDeque::new(),
            min_rtt: None,
            full_bw: T::zero(),
            full_bw_rounds: 0,
            cycle_index: 0,
            cycle_start: T::zero(),
            pacing_gain: T::lit(STARTUP_GAIN),
            cwnd_gain: T::lit(STARTUP_GAIN),
        }
    }

    pub fn mode(&self) -> BbrMode {
        self.mode
    }

    /// Bottleneck bandwidth estimate, bytes per second.
    pub fn btl_bw(&self) -> Option<T> {
        self.bw_samples.iter().map(|(_, b)| *b).fold(None, |m, b| Some(m.map_or(b, |m: T| m.max(b))))
    }

    pub fn min_rtt(&self) -> Option<T> {
        self.min_rtt.map(|(r, _)| r)
    }

    /// Bandwidth-delay product in segments.
    pub fn bdp_segments(&self, mss: T) -> Option<T> {
        Some(self.btl_bw()? * self.min_rtt()? / mss)
    }

    fn update_model(&mut self, ack: &AckSample<T>) {
        if ack.round_start {
            self.round += 1;
        }
        if let Some(rate) = ack.delivery_rate {
            if rate.is_finite() && rate > T::zero() {
                self.bw_samples.push_back((self.round, rate));
            }
        }
        let horizon = self.round.saturating_sub(BW_WINDOW_ROUNDS);
        while self.bw_samples.len() > 1 && self.bw_samples.front().is_some_and(|(r, _)| *r < horizon) {
            self.bw_samples.pop_front();
        }
        if let Some(rtt) = ack.rtt {
            let expired = self.min_rtt.is_some_and(|(_, at)| ack.now - at > T::lit(MIN_RTT_WINDOW_SECS));
            if expired || self.min_rtt.is_none_or(|(m, _)| rtt <= m) {
                self.min_rtt = Some((rtt, ack.now));
            }
        }
    }

    fn check_full_bw(&mut self, round_start: bool) {
        if !round_start {
            return;
        }
        let Some(bw) = self.btl_bw() else { return };
        if bw >= self.full_bw * T::lit(FULL_BW_GROWTH) {
            self.full_bw = bw;
            self.full_bw_rounds = 0;
        } else {
            self.full_bw_rounds += 1;
        }
    }

    fn enter_probe_bw(&mut self, now: T) {
        self.mode = BbrMode::ProbeBw;
        self.cwnd_gain = T::lit(PROBE_CWND_GAIN);
        // Start on a cruise phase so the first probe does not immediately follow the drain.
        self.cycle_index = 2;
        self.cycle_start = now;
        self.pacing_gain = T::lit(PROBE_GAINS[self.cycle_index]);
    }

    fn advance_cycle(&mut self, ack: &AckSample<T>) {
        let Some(min_rtt) = self.min_rtt() else { return };
        let gain = PROBE_GAINS[self.cycle_index];
        let bdp = self.bdp_segments(ack.mss).unwrap_or(T::zero());
        let elapsed = ack.now - self.cycle_start > min_rtt;
        let drained_early = gain < 1.0 && ack.in_flight <= bdp;
        if elapsed || drained_early {
            self.cycle_index = (self.cycle_index + 1) % PROBE_GAINS.len();
            self.cycle_start = ack.now;
            self.pacing_gain = T::lit(PROBE_GAINS[self.cycle_index]);
        }
    }
}

impl<T: Scalar> CongestionControl<T> for BbrLite<T> {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn on_ack(&mut self, w: &mut Window<T>, ack: &AckSample<T>) {
        self.update_model(ack);
        match self.mode {
            BbrMode::Startup => {
                self.check_full_bw(ack.round_start);
                if self.full_bw_rounds >= FULL_BW_ROUNDS {
                    self.mode = BbrMode::Drain;
                    self.pacing_gain = T::lit(1.0 / STARTUP_GAIN);
                }
            }
            BbrMode::Drain => {
                if self.bdp_segments(ack.mss).is_some_and(|bdp| ack.in_flight <= bdp) {
                    self.enter_probe_bw(ack.now);
                }
            }
            BbrMode::ProbeBw => self.advance_cycle(ack),
        }
        match self.bdp_segments(ack.mss) {
            Some(bdp) => {
                let target = (bdp * self.cwnd_gain).max(T::lit(MIN_CWND));
                w.cwnd = if self.mode == BbrMode::Startup { (w.cwnd + ack.acked_segs).min(target.max(w.cwnd)) } else { target };
            }
            None => w.cwnd = w.cwnd + ack.acked_segs,
        }
        w.floor_cwnd();
    }

    fn on_loss(&mut self, w: &mut Window<T>, kind: LossKind, _in_flight: T, _now: T) {
        if kind == LossKind::Rto {
            w.cwnd = T::lit(MIN_CWND);
        }
    }

    fn pacing_rate(&self, w: &Window<T>, srtt: Option<T>, mss: T) -> Option<T> {
        match self.btl_bw() {
            Some(bw) => Some(bw * self.pacing_gain),
            None => srtt.map(|rtt| T::lit(STARTUP_GAIN) * w.cwnd * mss / rtt),
        }
    }

    fn in_slow_start(&self, _w: &Window<T>) -> bool {
        self.mode == BbrMode::Startup
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Drives the controller against a fluid bottleneck of `rate` bytes/s
    /// and propagation RTT `base`, one ACK per segment.
    fn fluid_run(cc: &mut BbrLite<f64>, w: &mut Window<f64>, rate: f64, base: f64, secs: f64) -> f64 {
        let mss = 1000.0;
        let mut now = 0.0;
        let mut next_round = 0.0;
        while now < secs {
            let pacing = cc.pacing_rate(w, Some(base), mss).unwrap_or(rate);
            let send_rate = pacing.min(w.cwnd * mss / base);
            let delivered = send_rate.min(rate);
            let in_flight = w.cwnd.min(pacing * base / mss);
            let queue = (in_flight - rate * base / mss).max(0.0);
            let rtt = base + queue * mss / rate;
            now += mss / delivered;
            let round_start = now >= next_round;
            if round_start {
                next_round = now + rtt;
            }
            let ack = AckSample {
                now,
                acked_segs: 1.0,
                rtt: Some(rtt),
                min_rtt: Some(base),
                in_flight,
                delivery_rate: Some(delivered),
                mss,
                round_start,
            };
            cc.on_ack(w, &ack);
        }
        w.cwnd
    }

    #[test]
    fn converges_to_probe_bw_near_bdp() {
        let mut cc = BbrLite::<f64>::new();
        let mut w = Window::new(10.0);
        fluid_run(&mut cc, &mut w, 1e6, 0.08, 20.0);
        assert_eq!(cc.mode(), BbrMode::ProbeBw);
        let bw = cc.btl_bw().unwrap();
        assert!((bw - 1e6).abs() / 1e6 < 0.05, "bw {bw}");
        // cwnd = 2·BDP = 2·80 segments
        assert!((w.cwnd - 160.0).abs() < 10.0, "cwnd {}", w.cwnd);
    }

    #[test]
    fn isolated_loss_keeps_window() {
        let mut cc = BbrLite::<f64>::new();
        let mut w = Window::new(10.0);
        fluid_run(&mut cc, &mut w, 1e6, 0.08, 10.0);
        let before = w.cwnd;
        cc.on_loss(&mut w, LossKind::FastRetrans, before, 10.0);
        assert!((w.cwnd - before).abs() <= 0.1 * before);
        cc.on_loss(&mut w, LossKind::Rto, before, 10.0);
        assert_eq!(w.cwnd, MIN_CWND);
    }

    #[test]
    fn startup_paces_above_cwnd_rate() {
        let cc = BbrLite::<f64>::new();
        let w = Window::new(10.0);
        let rate = cc.pacing_rate(&w, Some(0.1), 1000.0).unwrap();
        assert!((rate - STARTUP_GAIN * 10.0 * 1000.0 / 0.1).abs() < 1e-6);
    }
}
