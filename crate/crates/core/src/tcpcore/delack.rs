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


use num_rational::Ratio;

use crate::simnet::SimTime;

/// Lowest delayed-ACK timeout reachable once a min-RTT fraction is set.
pub const DELACK_FLOOR: SimTime = SimTime::from_millis(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelAckConfig {
    pub timeout_min: SimTime,
    pub timeout_max: SimTime,
    /// Timeout as a fraction of the receiver's min RTT.
    pub timeout_frac_min_rtt: Option<Ratio<u32>>,
    pub immediate_ack_threshold: u32,
}

impl Default for DelAckConfig {
    fn default() -> Self {
        DelAckConfig {
            timeout_min: SimTime::from_millis(40),
            timeout_max: SimTime::from_millis(200),
            timeout_frac_min_rtt: None,
            immediate_ack_threshold: 2,
        }
    }
}

impl DelAckConfig {
    /// Delayed-ACK timeout for the given min RTT. A configured fraction
    /// replaces the fixed lower bound with [`DELACK_FLOOR`].
    pub fn effective_timeout(&self, min_rtt: Option<SimTime>) -> SimTime {
        match (self.timeout_frac_min_rtt, min_rtt) {
            (Some(frac), Some(rtt)) => {
                let ns = u128::from(rtt.as_nanos()) * u128::from(*frac.numer()) / u128::from(*frac.denom());
                SimTime(ns as u64).max(DELACK_FLOOR).min(self.timeout_max)
            }
            _ => self.timeout_min.min(self.timeout_max),
        }
    }
}

/// Receiver-side phase that decides whether the configured strategy
/// applies or ACKs go out immediately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckPhase {
    Normal,
    SlowStartPeer,
    OutOfOrder,
    Retrans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckDecision {
    AckNow,
    AckDelayed(SimTime),
}

pub fn ack_policy(cfg: &DelAckConfig, unacked_segs: u32, phase: AckPhase, min_rtt: Option<SimTime>) -> AckDecision {
    if phase != AckPhase::Normal || unacked_segs >= cfg.immediate_ack_threshold.max(1) {
        AckDecision::AckNow
    } else {
        AckDecision::AckDelayed(cfg.effective_timeout(min_rtt))
    }
}
