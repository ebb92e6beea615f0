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

//! Smoothed RTT and retransmission timeout estimation (RFC 6298), in seconds.

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct RttEstimator<T> {
    srtt: Option<T>,
    rttvar: T,
    min_rtt: Option<T>,
    latest: Option<T>,
    rto_min: T,
    rto_max: T,
    initial_rto: T,
    granularity: T,
}

impl<T: Scalar> RttEstimator<T> {
    pub fn new(initial_rto: T, rto_min: T, rto_max: T) -> Self {
        RttEstimator {
            srtt: None,
            rttvar: T::zero(),
            min_rtt: None,
            latest: None,
            rto_min,
            rto_max,
            initial_rto,
            granularity: T::lit(0.001),
        }
    }

    /// Folds one RTT sample into the estimate. Non-positive or non-finite
    /// samples are ignored.
    pub fn on_sample(&mut self, rtt: T) {
        if !(rtt > T::zero()) || !rtt.is_finite() {
            return;
        }
        self.latest = Some(rtt);
        self.min_rtt = Some(self.min_rtt.map_or(rtt, |m| m.min(rtt)));
        match self.srtt {
            None => {
                self.srtt = Some(rtt);
                self.rttvar = rtt * T::lit(0.5);
            }
            Some(srtt) => {
                let err = (srtt - rtt).abs();
                self.rttvar = self.rttvar * T::lit(0.75) + err * T::lit(0.25);
                self.srtt = Some(srtt * T::lit(0.875) + rtt * T::lit(0.125));
            }
        }
    }

    pub fn srtt(&self) -> Option<T> {
        self.srtt
    }

    pub fn rttvar(&self) -> T {
        self.rttvar
    }

    pub fn min_rtt(&self) -> Option<T> {
        self.min_rtt
    }

    pub fn latest(&self) -> Option<T> {
        self.latest
    }

    /// Un-backed-off RTO: srtt + max(G, 4·rttvar), clamped to [rto_min, rto_max].
    pub fn rto(&self) -> T {
        match self.srtt {
            None => self.initial_rto,
            Some(srtt) => {
                let rto = srtt + self.granularity.max(self.rttvar * T::lit(4.0));
                rto.max(self.rto_min).min(self.rto_max)
            }
        }
    }

    pub fn rto_max(&self) -> T {
        self.rto_max
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est<T: Scalar>() -> RttEstimator<T> {
        RttEstimator::new(T::lit(1.0), T::lit(0.2), T::lit(120.0))
    }

    #[test]
    fn first_sample_initializes() {
        let mut e = est::<f64>();
        assert_eq!(e.rto(), 1.0);
        e.on_sample(0.08);
        assert_eq!(e.srtt(), Some(0.08));
        assert!((e.rttvar() - 0.04).abs() < 1e-12);
        // 0.08 + 4·0.04 = 0.24
        assert!((e.rto() - 0.24).abs() < 1e-12);
    }

    #[test]
    fn ewma_update_matches_hand_arithmetic() {
        let mut e = est::<f64>();
        e.on_sample(0.1);
        e.on_sample(0.2);
        // rttvar = 0.75·0.05 + 0.25·0.1 = 0.0625; srtt = 0.875·0.1 + 0.125·0.2 = 0.1125
        assert!((e.rttvar() - 0.0625).abs() < 1e-12);
        assert!((e.srtt().unwrap() - 0.1125).abs() < 1e-12);
        assert_eq!(e.min_rtt(), Some(0.1));
    }

    #[test]
    fn rto_floor_and_generic_f32() {
        let mut e = est::<f32>();
        for _ in 0..50 {
            e.on_sample(0.01);
        }
        assert_eq!(e.rto(), 0.2);
        e.on_sample(-1.0);
        e.on_sample(f32::NAN);
        assert_eq!(e.latest(), Some(0.01));
    }
}
