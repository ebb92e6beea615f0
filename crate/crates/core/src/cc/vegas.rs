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

use super::{halved_ssthresh, AckSample, CongestionControl, LossKind, Window};
use crate::scalar::Scalar;

/// Vegas: once per round, compare expected and actual rates and hold the
/// number of queued segments between alpha and beta.
#[derive(Debug, Clone)]
pub struct Vegas<T> {
    alpha: T,
    beta: T,
    gamma: T,
    base_rtt: Option<T>,
    round_min: Option<T>,
}

impl<T: Scalar> Default for Vegas<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Vegas<T> {
    pub const NAME: &'static str = "vegas";

    pub fn new() -> Self {
        Vegas { alpha: T::lit(2.0), beta: T::lit(4.0), gamma: T::one(), base_rtt: None, round_min: None }
    }

    /// Estimated segments queued in the network: cwnd·(1 − base/rtt).
    pub fn queued_estimate(cwnd: T, base_rtt: T, rtt: T) -> T {
        let expected = cwnd / base_rtt;
        let actual = cwnd / rtt;
        (expected - actual) * base_rtt
    }

    pub fn base_rtt(&self) -> Option<T> {
        self.base_rtt
    }

    fn end_round(&mut self, w: &mut Window<T>) {
        let (Some(base), Some(rtt)) = (self.base_rtt, self.round_min.take()) else { return };
        let diff = Self::queued_estimate(w.cwnd, base, rtt);
        if w.in_slow_start() {
            if diff > self.gamma {
                let target = w.cwnd * base / rtt;
                w.cwnd = w.cwnd.min(target + T::one());
                w.ssthresh = (w.cwnd - T::one()).max(T::lit(2.0));
            }
        } else if diff > self.beta {
            w.cwnd = w.cwnd - T::one();
            w.ssthresh = w.ssthresh.min((w.cwnd - T::one()).max(T::lit(2.0)));
        } else if diff < self.alpha {
            w.cwnd = w.cwnd + T::one();
        }
        w.floor_cwnd();
    }
}

impl<T: Scalar> CongestionControl<T> for Vegas<T> {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn on_ack(&mut self, w: &mut Window<T>, ack: &AckSample<T>) {
        if ack.round_start {
            self.end_round(w);
        }
        if let Some(rtt) = ack.rtt {
            self.base_rtt = Some(self.base_rtt.map_or(rtt, |b| b.min(rtt)));
            self.round_min = Some(self.round_min.map_or(rtt, |m| m.min(rtt)));
        }
        if w.in_slow_start() {
            w.cwnd = (w.cwnd + ack.acked_segs).min(w.ssthresh.max(w.cwnd));
        }
    }

    fn on_loss(&mut self, w: &mut Window<T>, kind: LossKind, in_flight: T, _now: T) {
        self.round_min = None;
        w.ssthresh = halved_ssthresh(in_flight);
        w.cwnd = match kind {
            LossKind::FastRetrans => w.ssthresh,
            LossKind::Rto => T::one(),
        };
    }
}
