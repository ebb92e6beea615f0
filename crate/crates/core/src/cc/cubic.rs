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

use super::{AckSample, CongestionControl, LossKind, Window};
use crate::scalar::Scalar;

const HYSTART_LOW_WINDOW: f64 = 16.0;
const HYSTART_MIN_SAMPLES: u32 = 8;

/// CUBIC with fast convergence, a Reno-friendly region and delay-based
/// HyStart slow-start exit.
#[derive(Debug, Clone)]
pub struct Cubic<T> {
    c: T,
    beta: T,
    fast_convergence: bool,
    w_max: T,
    epoch_start: Option<T>,
    origin: T,
    k: T,
    w_est: T,
    hystart: HyStart<T>,
}

#[derive(Debug, Clone, Default)]
struct HyStart<T> {
    delay_min: Option<T>,
    round_min: Option<T>,
    samples: u32,
}

impl<T: Scalar> HyStart<T> {
    /// Returns true when the current round's RTT has grown enough to leave
    /// slow start.
    fn on_sample(&mut self, rtt: T, round_start: bool, cwnd: T) -> bool {
        if round_start {
            self.round_min = None;
            self.samples = 0;
        }
        self.delay_min = Some(self.delay_min.map_or(rtt, |m| m.min(rtt)));
        if self.samples < HYSTART_MIN_SAMPLES {
            self.round_min = Some(self.round_min.map_or(rtt, |m| m.min(rtt)));
            self.samples += 1;
        }
        if cwnd < T::lit(HYSTART_LOW_WINDOW) || self.samples < HYSTART_MIN_SAMPLES {
            return false;
        }
        let (Some(base), Some(cur)) = (self.delay_min, self.round_min) else { return false };
        let thresh = (base * T::lit(0.125)).max(T::lit(0.004)).min(T::lit(0.016));
        cur >= base + thresh
    }
}

impl<T: Scalar> Default for Cubic<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Cubic<T> {
    pub const NAME: &'static str = "cubic";

    pub fn new() -> Self {
        Cubic {
            c: T::lit(0.4),
            beta: T::lit(0.7),
            fast_convergence: true,
            w_max: T::zero(),
            epoch_start: None,
            origin: T::zero(),
            k: T::zero(),
            w_est: T::zero(),
            hystart: HyStart { delay_min: None, round_min: None, samples: 0 },
        }
    }

    pub fn w_max(&self) -> T {
        self.w_max
    }

    pub fn k(&self) -> T {
        self.k
    }

    /// Starts a congestion-avoidance epoch at `now` from window `cwnd`.
    pub fn begin_epoch(&mut self, now: T, cwnd: T) {
        self.epoch_start = Some(now);
        if cwnd < self.w_max {
            self.k = ((self.w_max - cwnd) / self.c).cbrt();
            self.origin = self.w_max;
        } else {
            self.k = T::zero();
            self.origin = cwnd;
        }
        self.w_est = cwnd;
    }

    /// W(t) = C·(t − K)³ + origin, with t measured from the epoch start.
    pub fn window_at(&self, t: T) -> T {
        let d = t - self.k;
        self.c * d * d * d + self.origin
    }

    fn reno_alpha(&self) -> T {
        T::lit(3.0) * (T::one() - self.beta) / (T::one() + self.beta)
    }
}

impl<T: Scalar> CongestionControl<T> for Cubic<T> {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn on_ack(&mut self, w: &mut Window<T>, ack: &AckSample<T>) {
        if w.in_slow_start() {
            if let Some(rtt) = ack.rtt {
                if self.hystart.on_sample(rtt, ack.round_start, w.cwnd) {
                    w.ssthresh = w.cwnd;
                    return;
                }
            }
            w.cwnd = (w.cwnd + ack.acked_segs).min(w.ssthresh.max(w.cwnd));
            return;
        }
        if self.epoch_start.is_none() {
            self.begin_epoch(ack.now, w.cwnd);
        }
        let epoch = self.epoch_start.expect("epoch set above");
        let t = ack.now - epoch + ack.min_rtt.unwrap_or_else(T::zero);
        let mut target = self.window_at(t).min(w.cwnd * T::lit(1.5));
        self.w_est = self.w_est + self.reno_alpha() * ack.acked_segs / w.cwnd;
        if self.w_est > target {
            target = self.w_est;
        }
        if target > w.cwnd {
            // at most one segment per two acked
            let per_seg = ((target - w.cwnd) / w.cwnd).min(T::lit(0.5));
            w.cwnd = w.cwnd + per_seg * ack.acked_segs;
        } else {
            w.cwnd = w.cwnd + T::lit(0.01) * ack.acked_segs / w.cwnd;
        }
    }

    fn on_loss(&mut self, w: &mut Window<T>, kind: LossKind, _in_flight: T, _now: T) {
        self.epoch_start = None;
        self.w_max = if w.cwnd < self.w_max && self.fast_convergence {
            w.cwnd * (T::one() + self.beta) / T::lit(2.0)
        } else {
            w.cwnd
        };
        w.ssthresh = (w.cwnd * self.beta).max(T::lit(2.0));
        w.cwnd = match kind {
            LossKind::FastRetrans => w.ssthresh,
            LossKind::Rto => T::one(),
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cc::testutil::ack;

    #[test]
    fn multiplicative_decrease() {
        let mut cc = Cubic::<f64>::new();
        let mut w = Window::new(100.0);
        cc.on_loss(&mut w, LossKind::FastRetrans, 100.0, 0.0);
        assert!((w.cwnd - 70.0).abs() < 1e-9);
        assert_eq!(cc.w_max(), 100.0);
    }

    #[test]
    fn curve_returns_to_w_max_at_k() {
        let mut cc = Cubic::<f64>::new();
        let mut w = Window::new(100.0);
        cc.on_loss(&mut w, LossKind::FastRetrans, 100.0, 0.0);
        cc.begin_epoch(0.0, w.cwnd);
        // K = cbrt((100 - 70) / 0.4) = cbrt(75)
        let k = 75f64.cbrt();
        assert!((cc.k() - k).abs() < 1e-12);
        assert!((cc.window_at(k) - 100.0).abs() < 1e-9);
        assert!((cc.window_at(0.0) - 70.0).abs() < 1e-9);
        // concave before K, convex after
        assert!(cc.window_at(k - 1.0) < 100.0 && cc.window_at(k + 1.0) > 100.0);
    }

    #[test]
    fn fast_convergence_lowers_w_max() {
        let mut cc = Cubic::<f64>::new();
        let mut w = Window::new(100.0);
        cc.on_loss(&mut w, LossKind::FastRetrans, 100.0, 0.0);
        w.cwnd = 80.0;
        cc.on_loss(&mut w, LossKind::FastRetrans, 80.0, 1.0);
        assert!((cc.w_max() - 68.0).abs() < 1e-9);
    }

    #[test]
    fn avoidance_tracks_curve() {
        let mut cc = Cubic::<f64>::new();
        let mut w = Window::new(100.0);
        cc.on_loss(&mut w, LossKind::FastRetrans, 100.0, 0.0);
        let k = 75f64.cbrt();
        // ACK once per 10 ms for K seconds at 70..100 segments per 100 ms RTT
        let mut t = 0.0;
        while t < k {
            t += 0.01;
            let a = ack(t, w.cwnd / 10.0, Some(0.1));
            cc.on_ack(&mut w, &a);
        }
        assert!(w.cwnd > 95.0 && w.cwnd < 106.0, "cwnd {}", w.cwnd);
    }

    #[test]
    fn hystart_exits_on_delay_growth() {
        let mut cc = Cubic::<f64>::new();
        let mut w = Window::new(10.0);
        let mut a = ack(0.0, 1.0, Some(0.08));
        for _ in 0..20 {
            cc.on_ack(&mut w, &a);
        }
        assert!(w.in_slow_start());
        a.round_start = true;
        a.rtt = Some(0.1);
        cc.on_ack(&mut w, &a);
        a.round_start = false;
        for _ in 0..10 {
            cc.on_ack(&mut w, &a);
        }
        assert!(!w.in_slow_start());
    }
}
