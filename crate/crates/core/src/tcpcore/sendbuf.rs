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

use crate::simnet::SimTime;

/// Transmission record for one segment's worth of stream bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentSeg {
    pub len: u32,
    pub sent_at: SimTime,
    pub retransmitted: bool,
    /// Connection-wide delivered byte count when this segment was sent.
    pub delivered_at_send: u64,
    pub delivered_time_at_send: SimTime,
}

/// What a cumulative ACK released.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AckOutcome {
    pub bytes: u64,
    pub segments: u32,
    /// Send time of the newest fully acknowledged never-retransmitted segment.
    pub rtt_sent_at: Option<SimTime>,
    /// Newest fully acknowledged segment, for rate sampling.
    pub newest: Option<SentSeg>,
}

/// Sender-side stream bookkeeping over 64-bit stream offsets.
///
/// `una ≤ nxt ≤ max ≤ app_end`. After a timeout `nxt` rewinds to `una` and
/// the range up to `max` is resent segment by segment.
#[derive(Debug, Clone, Default)]
pub struct SendBuffer {
    app_end: u64,
    una: u64,
    nxt: u64,
    max: u64,
    sent: BTreeMap<u64, SentSeg>,
    /// MPTCP data-sequence mappings: stream offset → (len, dsn).
    mappings: BTreeMap<u64, (u64, u64)>,
    in_flight: u32,
}

impl SendBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn una(&self) -> u64 {
        self.una
    }

    pub fn nxt(&self) -> u64 {
        self.nxt
    }

    pub fn max(&self) -> u64 {
        self.max
    }

    pub fn app_end(&self) -> u64 {
        self.app_end
    }

    /// Segments sent in `[una, nxt)`.
    pub fn in_flight(&self) -> u32 {
        self.in_flight
    }

    pub fn bytes_in_flight(&self) -> u64 {
        self.nxt - self.una
    }

    /// Bytes queued by the application that were never sent.
    pub fn unsent(&self) -> u64 {
        self.app_end - self.max
    }

    pub fn all_acked(&self) -> bool {
        self.una == self.app_end
    }

    pub fn has_outstanding(&self) -> bool {
        self.una < self.max
    }

    pub fn push(&mut self, len: u64) {
        self.app_end += len;
    }

    pub fn push_mapped(&mut self, len: u64, dsn: u64) {
        if len == 0 {
            return;
        }
        self.mappings.insert(self.app_end, (len, dsn));
        self.app_end += len;
    }

    /// Data-sequence number of `off` and the bytes left in its mapping.
    pub fn mapping_at(&self, off: u64) -> Option<(u64, u64)> {
        let (&start, &(len, dsn)) = self.mappings.range(..=off).next_back()?;
        (off < start + len).then(|| (dsn + (off - start), start + len - off))
    }

    pub fn entry(&self, off: u64) -> Option<&SentSeg> {
        self.sent.get(&off)
    }

    /// Length of the next segment at `off` under a payload limit: the
    /// recorded length for a resend, else whatever the app and the mapping
    /// allow.
    pub fn next_len(&self, off: u64, limit: u32) -> u32 {
        if let Some(s) = self.sent.get(&off) {
            return s.len.min(limit);
        }
        let mut avail = self.app_end.saturating_sub(off);
        if let Some((_, rem)) = self.mapping_at(off) {
            avail = avail.min(rem);
        }
        avail.min(u64::from(limit)) as u32
    }

    /// Records a transmission of `[off, off+len)`. Returns true for a
    /// retransmission.
    pub fn record_send(&mut self, off: u64, len: u32, now: SimTime, delivered: u64, delivered_time: SimTime) -> bool {
        let retrans = match self.sent.get(&off).copied() {
            Some(old) => {
                if old.len > len {
                    let rest = SentSeg { len: old.len - len, ..old };
                    self.sent.insert(off + u64::from(len), rest);
                    if off + u64::from(len) < self.nxt {
                        self.in_flight += 1;
                    }
                }
                true
            }
            None => false,
        };
        self.sent.insert(
            off,
            SentSeg {
                len,
                sent_at: now,
                retransmitted: retrans,
                delivered_at_send: delivered,
                delivered_time_at_send: delivered_time,
            },
        );
        if off == self.nxt {
            self.nxt += u64::from(len);
            self.in_flight += 1;
            self.max = self.max.max(self.nxt);
        }
        retrans
    }

    /// Rewinds for go-back-N after a timeout.
    pub fn rewind(&mut self) {
        self.nxt = self.una;
        self.in_flight = 0;
    }

    /// Applies a cumulative ACK at stream offset `ack`.
    pub fn on_ack(&mut self, ack: u64) -> AckOutcome {
        let ack = ack.min(self.max);
        let mut out = AckOutcome::default();
        if ack <= self.una {
            return out;
        }
        while let Some((&start, &seg)) = self.sent.iter().next() {
            if start >= ack {
                break;
            }
            self.sent.remove(&start);
            let end = start + u64::from(seg.len);
            let counted = start < self.nxt;
            if end > ack {
                let rest = SentSeg { len: (end - ack) as u32, ..seg };
                self.sent.insert(ack, rest);
                if counted && ack >= self.nxt {
                    self.in_flight -= 1;
                }
                break;
            }
            if counted {
                self.in_flight -= 1;
            }
            out.segments += 1;
            if !seg.retransmitted {
                out.rtt_sent_at = Some(seg.sent_at);
            }
            out.newest = Some(seg);
        }
        out.bytes = ack - self.una;
        self.una = ack;
        if self.nxt < ack {
            self.nxt = ack;
        }
        while let Some((&start, &(len, _))) = self.mappings.iter().next() {
            if start + len > ack {
                break;
            }
            self.mappings.remove(&start);
        }
        out
    }

    #[cfg(test)]
    fn recount(&self) -> u32 {
        self.sent.range(self.una..self.nxt).count() as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const T0: SimTime = SimTime::ZERO;

    #[test]
    fn send_and_ack_in_order() {
        let mut b = SendBuffer::new();
        b.push(3000);
        assert_eq!(b.next_len(0, 1460), 1460);
        assert!(!b.record_send(0, 1460, T0, 0, T0));
        assert!(!b.record_send(1460, 1460, T0, 0, T0));
        assert_eq!(b.next_len(2920, 1460), 80);
        b.record_send(2920, 80, T0, 0, T0);
        assert_eq!(b.in_flight(), 3);
        let o = b.on_ack(2920);
        assert_eq!((o.bytes, o.segments), (2920, 2));
        assert_eq!(o.rtt_sent_at, Some(T0));
        assert_eq!(b.in_flight(), 1);
        b.on_ack(3000);
        assert!(b.all_acked());
    }

    #[test]
    fn karn_skips_retransmitted() {
        let mut b = SendBuffer::new();
        b.push(1460);
        b.record_send(0, 1460, T0, 0, T0);
        b.rewind();
        assert!(b.record_send(0, 1460, SimTime::from_secs(1), 0, T0));
        let o = b.on_ack(1460);
        assert_eq!(o.rtt_sent_at, None);
    }

    #[test]
    fn shorter_resend_splits() {
        let mut b = SendBuffer::new();
        b.push(1460);
        b.record_send(0, 1460, T0, 0, T0);
        b.rewind();
        b.record_send(0, 1000, T0, 0, T0);
        assert_eq!(b.entry(1000).unwrap().len, 460);
        assert_eq!(b.next_len(1000, 1460), 460);
        b.record_send(1000, 460, T0, 0, T0);
        assert_eq!(b.in_flight(), 2);
    }

    #[test]
    fn mappings_bound_segments() {
        let mut b = SendBuffer::new();
        b.push_mapped(1000, 5000);
        b.push_mapped(1000, 9000);
        assert_eq!(b.mapping_at(0), Some((5000, 1000)));
        assert_eq!(b.mapping_at(1500), Some((9500, 500)));
        assert_eq!(b.next_len(0, 1460), 1000);
        assert_eq!(b.mapping_at(2000), None);
    }

    proptest! {
        #[test]
        fn in_flight_counter_matches_recount(ops in proptest::collection::vec((0u8..4, 1u32..2000), 1..200)) {
            let mut b = SendBuffer::new();
            b.push(1 << 30);
            for (op, x) in ops {
                match op {
                    0 | 1 => {
                        let off = b.nxt();
                        let len = b.next_len(off, x.min(1460));
                        b.record_send(off, len, T0, 0, T0);
                    }
                    2 => {
                        let span = b.max() - b.una();
                        if span > 0 {
                            b.on_ack(b.una() + u64::from(x) % (span + 1));
                        }
                    }
                    _ => b.rewind(),
                }
                prop_assert_eq!(b.in_flight(), b.recount());
                prop_assert!(b.una() <= b.nxt() && b.nxt() <= b.max());
            }
        }
    }
}
