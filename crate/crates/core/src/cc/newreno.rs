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

use std::marker::PhantomData;

use super::{halved_ssthresh, AckSample, CongestionControl, LossKind, Window};
use crate::scalar::Scalar;

/// Slow start doubling plus one segment per RTT in avoidance.
#[derive(Debug, Clone, Default)]
pub struct NewReno<T> {
    _t: PhantomData<T>,
}

impl<T: Scalar> NewReno<T> {
    pub const NAME: &'static str = "newreno";

    pub fn new() -> Self {
        NewReno { _t: PhantomData }
    }
}

impl<T: Scalar> CongestionControl<T> for NewReno<T> {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn on_ack(&mut self, w: &mut Window<T>, ack: &AckSample<T>) {
        let mut acked = ack.acked_segs;
        if w.in_slow_start() {
            let room = w.ssthresh - w.cwnd;
            let used = acked.min(room);
            w.cwnd = w.cwnd + used;
            acked = acked - used;
        }
        if acked > T::zero() {
            w.cwnd = w.cwnd + acked / w.cwnd;
        }
    }

    fn on_loss(&mut self, w: &mut Window<T>, kind: LossKind, in_flight: T, _now: T) {
        w.ssthresh = halved_ssthresh(in_flight);
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
    fn slow_start_doubles_per_window() {
        let mut cc = NewReno::<f64>::new();
        let mut w = Window::new(10.0);
        for _ in 0..10 {
            cc.on_ack(&mut w, &ack(0.0, 1.0, Some(0.08)));
        }
        assert_eq!(w.cwnd, 20.0);
    }

    #[test]
    fn avoidance_adds_one_per_window() {
        let mut cc = NewReno::<f64>::new();
        let mut w = Window { cwnd: 20.0, ssthresh: 10.0 };
        for _ in 0..20 {
            cc.on_ack(&mut w, &ack(0.0, 1.0, None));
        }
        assert!((w.cwnd - 21.0).abs() < 0.05);
    }

    #[test]
    fn rto_collapses_window() {
        let mut cc = NewReno::<f64>::new();
        let mut w = Window::new(64.0);
        cc.on_loss(&mut w, LossKind::Rto, 64.0, 1.0);
        assert_eq!((w.cwnd, w.ssthresh), (1.0, 32.0));
        let mut w = Window::new(64.0);
        cc.on_loss(&mut w, LossKind::FastRetrans, 64.0, 1.0);
        assert_eq!((w.cwnd, w.ssthresh), (32.0, 32.0));
    }
}
