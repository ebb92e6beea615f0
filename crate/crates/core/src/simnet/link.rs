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

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimTime;
use crate::wire::Segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DeviceType {
    Wifi,
    Cellular,
    #[default]
    Wired,
}

impl DeviceType {
    pub fn code(self) -> u64 {
        match self {
            DeviceType::Wifi => 1,
            DeviceType::Cellular => 2,
            DeviceType::Wired => 3,
        }
    }
}

/// Direction of travel on a duplex link: `AtoB` leaves endpoint A.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    AtoB,
    BtoA,
}

impl Direction {
    fn index(self) -> usize {
        match self {
            Direction::AtoB => 0,
            Direction::BtoA => 1,
        }
    }
}

/// Interval during which every segment on the link is dropped; `end: None`
/// is permanent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blackhole {
    pub start: SimTime,
    pub end: Option<SimTime>,
}

impl Blackhole {
    fn covers(&self, t: SimTime) -> bool {
        t >= self.start && self.end.is_none_or(|e| t < e)
    }
}

/// Scheduled change of the one-way propagation delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayChange {
    pub at: SimTime,
    pub delay: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub label: String,
    /// Bytes per second, each direction.
    pub rate: f64,
    pub prop_delay: SimTime,
    /// Packets waiting behind the one being serialized.
    pub queue_cap: usize,
    pub device: DeviceType,
    pub loss_prob: f64,
    pub blackholes: Vec<Blackhole>,
    pub delay_changes: Vec<DelayChange>,
}

impl LinkSpec {
    pub fn new(label: &str, rate_bps: f64, prop_delay: SimTime) -> Self {
        LinkSpec {
            label: label.to_string(),
            rate: rate_bps / 8.0,
            prop_delay,
            queue_cap: 100,
            device: DeviceType::Wired,
            loss_prob: 0.0,
            blackholes: Vec::new(),
            delay_changes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub transmitted: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub delivered_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TxOutcome {
    Dropped,
    Queued,
    /// The transmitter was idle; serialization ends at the given time.
    Started(SimTime),
}

#[derive(Debug, Default)]
struct Pipe {
    waiting: VecDeque<(Segment, SimTime)>,
    in_service: Option<Segment>,
    last_delivery: SimTime,
    stats: LinkStats,
}

/// Duplex link: one drop-tail FIFO and transmitter per direction.
#[derive(Debug)]
pub struct Link {
    pub spec: LinkSpec,
    pipes: [Pipe; 2],
    rng: ChaCha8Rng,
}

impl Link {
    pub fn new(spec: LinkSpec, scenario_seed: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(scenario_seed ^ super::label_hash(&spec.label));
        Link { spec, pipes: [Pipe::default(), Pipe::default()], rng }
    }

    pub fn device(&self) -> DeviceType {
        self.spec.device
    }

    pub fn stats(&self, dir: Direction) -> LinkStats {
        self.pipes[dir.index()].stats
    }

    pub fn queue_len(&self, dir: Direction) -> usize {
        self.pipes[dir.index()].waiting.len()
    }

    /// Segments accepted but not yet delivered or dropped.
    pub fn in_pipe(&self, dir: Direction) -> u64 {
        let s = self.stats(dir);
        s.transmitted - s.delivered - s.dropped
    }

    pub fn prop_delay_at(&self, t: SimTime) -> SimTime {
        self.spec
            .delay_changes
            .iter()
            .filter(|c| c.at <= t)
            .max_by_key(|c| c.at)
            .map_or(self.spec.prop_delay, |c| c.delay)
    }

    pub fn blackholed(&self, t: SimTime) -> bool {
        self.spec.blackholes.iter().any(|b| b.covers(t))
    }

    pub fn serialization(&self, seg: &Segment) -> SimTime {
        SimTime::transmission(seg.wire_len(), self.spec.rate)
    }

    /// Offers a segment to the transmitter in `dir`.
    pub fn transmit(&mut self, dir: Direction, seg: Segment, now: SimTime) -> TxOutcome {
        let blackholed = self.blackholed(now);
        let lost = self.spec.loss_prob > 0.0 && self.rng.random::<f64>() < self.spec.loss_prob;
        let ser = self.serialization(&seg);
        let cap = self.spec.queue_cap;
        let pipe = &mut self.pipes[dir.index()];
        pipe.stats.transmitted += 1;
        if blackholed || lost {
            pipe.stats.dropped += 1;
            return TxOutcome::Dropped;
        }
        if pipe.in_service.is_none() {
            pipe.in_service = Some(seg);
            return TxOutcome::Started(now + ser);
        }
        if pipe.waiting.len() >= cap {
            pipe.stats.dropped += 1;
            return TxOutcome::Dropped;
        }
        pipe.waiting.push_back((seg, now));
        TxOutcome::Queued
    }

    /// Serialization of the head segment finished. Returns the segment with
    /// its delivery time and, if another segment started, its finish time.
    pub fn finish_service(&mut self, dir: Direction, now: SimTime) -> (Option<(Segment, SimTime)>, Option<SimTime>) {
        let delay = self.prop_delay_at(now);
        let rate = self.spec.rate;
        let pipe = &mut self.pipes[dir.index()];
        let done = pipe.in_service.take().map(|seg| {
            let at = (now + delay).max(pipe.last_delivery);
            pipe.last_delivery = at;
            (seg, at)
        });
        let next = pipe.waiting.pop_front().map(|(seg, _)| {
            let end = now + SimTime::transmission(seg.wire_len(), rate);
            pipe.in_service = Some(seg);
            end
        });
        (done, next)
    }

    /// Final delivery check: segments arriving inside a blackhole are lost.
    pub fn arrive(&mut self, dir: Direction, seg: &Segment, now: SimTime) -> bool {
        let blackholed = self.blackholed(now);
        let pipe = &mut self.pipes[dir.index()];
        if blackholed {
            pipe.stats.dropped += 1;
            false
        } else {
            pipe.stats.delivered += 1;
            pipe.stats.delivered_bytes += seg.wire_len() as u64;
            true
        }
    }
}
