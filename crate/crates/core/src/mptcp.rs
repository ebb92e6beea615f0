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


//! MPTCP-lite meta connection: subflow bookkeeping, data-level sequence
//! space, the default scheduler with backup semantics and the control block
//! reachable from MPTCP hook programs.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::hookrt::{MetaOps, Role};
use crate::simnet::SimTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MptcpError {
    #[error("no usable subflow")]
    NoUsableSubflow,
    #[error("unknown token {0:#x}")]
    UnknownToken(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    LowestRtt,
    Redundant,
}

/// Meta-level record of one subflow. `conn` is the owner's index of the
/// subflow's connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubflowSlot {
    pub id: u32,
    pub conn: usize,
    pub backup: bool,
    pub established: bool,
}

impl SubflowSlot {
    pub fn is_master(&self) -> bool {
        self.id == 0
    }
}

/// Scheduler's view of a subflow at decision time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubflowView {
    pub id: u32,
    pub srtt: Option<SimTime>,
    pub can_take: bool,
}

#[derive(Debug, Clone)]
pub struct MetaConnection {
    key: u64,
    role: Role,
    subflows: Vec<SubflowSlot>,
    scheduler: Scheduler,
    submitted: u64,
    scheduled: u64,
    backups_active: bool,
    activated_at: Option<SimTime>,
    rtt_threshold: Option<SimTime>,
    ext: BTreeMap<String, Vec<u8>>,
    /// Received DSN ranges beyond the contiguous prefix.
    rcv_ranges: BTreeMap<u64, u64>,
    data_ack: u64,
    peer_data_ack: u64,
}

impl MetaConnection {
    pub fn new(key: u64, role: Role, scheduler: Scheduler) -> Self {
        MetaConnection {
            key,
            role,
            subflows: Vec::new(),
            scheduler,
            submitted: 0,
            scheduled: 0,
            backups_active: false,
            activated_at: None,
            rtt_threshold: None,
            ext: BTreeMap::new(),
            rcv_ranges: BTreeMap::new(),
            data_ack: 0,
            peer_data_ack: 0,
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn token(&self) -> u32 {
        self.key as u32
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn scheduler(&self) -> Scheduler {
        self.scheduler
    }

    /// Adds a subflow; the first one is the master (id 0), later ones get
    /// ids in creation order.
    pub fn add_subflow(&mut self, conn: usize, backup: bool) -> u32 {
        let id = self.subflows.len() as u32;
        self.subflows.push(SubflowSlot { id, conn, backup, established: false });
        id
    }

    pub fn next_subflow_id(&self) -> u32 {
        self.subflows.len() as u32
    }

    pub fn subflows(&self) -> &[SubflowSlot] {
        &self.subflows
    }

    pub fn subflow(&self, id: u32) -> Option<&SubflowSlot> {
        self.subflows.get(id as usize)
    }

    pub fn subflow_by_conn(&self, conn: usize) -> Option<&SubflowSlot> {
        self.subflows.iter().find(|s| s.conn == conn)
    }

    pub fn mark_established(&mut self, id: u32) {
        if let Some(s) = self.subflows.get_mut(id as usize) {
            s.established = true;
        }
    }

    pub fn backups_active(&self) -> bool {
        self.backups_active
    }

    pub fn activated_at(&self) -> Option<SimTime> {
        self.activated_at
    }

    /// Turns every backup subflow into a regular one. One-way.
    pub fn activate_backups(&mut self, now: SimTime) -> bool {
        if self.backups_active {
            return false;
        }
        self.backups_active = true;
        self.activated_at = Some(now);
        true
    }

    fn usable(&self, s: &SubflowSlot) -> bool {
        s.established && (!s.backup || self.backups_active)
    }

    // ----- sender -----

    pub fn submit(&mut self, bytes: u64) {
        self.submitted += bytes;
    }

    pub fn submitted(&self) -> u64 {
        self.submitted
    }

    /// Bytes submitted but not yet handed to any subflow.
    pub fn pending(&self) -> u64 {
        self.submitted - self.scheduled
    }

    /// Subflows that should carry the next chunk, in preference order.
    pub fn pick(&self, views: &[SubflowView]) -> Result<Vec<u32>, MptcpError> {
        let mut usable: Vec<&SubflowView> = views
            .iter()
            .filter(|v| self.subflows.get(v.id as usize).is_some_and(|s| self.usable(s)))
            .collect();
        if usable.is_empty() {
            return Err(MptcpError::NoUsableSubflow);
        }
        usable.retain(|v| v.can_take);
        usable.sort_by_key(|v| (v.srtt.unwrap_or(SimTime::MAX), v.id));
        Ok(match self.scheduler {
            Scheduler::LowestRtt => usable.first().map(|v| vec![v.id]).unwrap_or_default(),
            Scheduler::Redundant => usable.iter().map(|v| v.id).collect(),
        })
    }

    /// Claims the next chunk of at most `max_len` bytes: (dsn, len).
    pub fn take_chunk(&mut self, max_len: u64) -> Option<(u64, u64)> {
        let len = self.pending().min(max_len);
        if len == 0 {
            return None;
        }
        let dsn = self.scheduled;
        self.scheduled += len;
        Some((dsn, len))
    }

    pub fn on_data_ack(&mut self, data_ack: u64) {
        self.peer_data_ack = self.peer_data_ack.max(data_ack.min(self.scheduled));
    }

    pub fn peer_data_ack(&self) -> u64 {
        self.peer_data_ack
    }

    /// Smoothed-RTT check run whenever a subflow's srtt is updated.
    /// Returns true when this sample activated the backups.
    pub fn on_meta_ack_rtt(&mut self, subflow: u32, srtt: SimTime, now: SimTime) -> bool {
        let Some(threshold) = self.rtt_threshold else { return false };
        let Some(s) = self.subflows.get(subflow as usize) else { return false };
        if s.backup || srtt <= threshold {
            return false;
        }
        self.activate_backups(now)
    }

    // ----- receiver -----

    /// Records a mapped arrival and returns the bytes that became
    /// contiguous at the data level.
    pub fn on_mapped(&mut self, dsn: u64, len: u64) -> u64 {
        let end = dsn + len;
        if end <= self.data_ack {
            return 0;
        }
        let start = dsn.max(self.data_ack);
        let e = self.rcv_ranges.entry(start).or_insert(end);
        *e = (*e).max(end);
        let before = self.data_ack;
        while let Some((&s, &e)) = self.rcv_ranges.iter().next() {
            if s > self.data_ack {
                break;
            }
            self.rcv_ranges.remove(&s);
            self.data_ack = self.data_ack.max(e);
        }
        self.data_ack - before
    }

    pub fn data_ack(&self) -> u64 {
        self.data_ack
    }
}

impl MetaOps for MetaConnection {
    fn joins_established(&self) -> usize {
        self.subflows.iter().filter(|s| !s.is_master() && s.established).count()
    }

    fn rtt_threshold(&self) -> Option<SimTime> {
        self.rtt_threshold
    }

    fn set_rtt_threshold(&mut self, t: Option<SimTime>) {
        self.rtt_threshold = t.filter(|t| *t > SimTime::ZERO);
    }

    fn ext_get(&self, key: &str) -> Option<Vec<u8>> {
        self.ext.get(key).cloned()
    }

    fn ext_put(&mut self, key: &str, value: Vec<u8>) {
        self.ext.insert(key.to_string(), value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta_with(backup: &[bool]) -> MetaConnection {
        let mut m = MetaConnection::new(0xABCD, Role::Server, Scheduler::LowestRtt);
        for (i, b) in backup.iter().enumerate() {
            let id = m.add_subflow(i, *b);
            m.mark_established(id);
        }
        m
    }

    fn view(id: u32, ms: u64) -> SubflowView {
        SubflowView { id, srtt: Some(SimTime::from_millis(ms)), can_take: true }
    }

    #[test]
    fn prefers_lowest_rtt_until_full() {
        let m = meta_with(&[false, false]);
        assert_eq!(m.pick(&[view(0, 100), view(1, 20)]).unwrap(), vec![1]);
        let full = SubflowView { can_take: false, ..view(1, 20) };
        assert_eq!(m.pick(&[view(0, 100), full]).unwrap(), vec![0]);
    }

    #[test]
    fn backup_excluded_until_activated() {
        let mut m = meta_with(&[false, true]);
        let busy = SubflowView { can_take: false, ..view(0, 20) };
        assert_eq!(m.pick(&[busy, view(1, 10)]).unwrap(), Vec::<u32>::new());
        m.activate_backups(SimTime::from_secs(1));
        assert_eq!(m.pick(&[busy, view(1, 10)]).unwrap(), vec![1]);
        assert!(!m.activate_backups(SimTime::from_secs(2)));
        assert_eq!(m.activated_at(), Some(SimTime::from_secs(1)));
    }

    #[test]
    fn no_usable_subflow() {
        let mut m = MetaConnection::new(1, Role::Client, Scheduler::LowestRtt);
        m.add_subflow(0, false);
        assert_eq!(m.pick(&[view(0, 10)]), Err(MptcpError::NoUsableSubflow));
    }

    #[test]
    fn threshold_crossing_activates_once() {
        let mut m = meta_with(&[false, true]);
        assert!(!m.on_meta_ack_rtt(0, SimTime::from_millis(500), SimTime::ZERO));
        m.set_rtt_threshold(Some(SimTime::from_millis(100)));
        assert!(!m.on_meta_ack_rtt(0, SimTime::from_millis(30), SimTime::ZERO));
        assert!(!m.on_meta_ack_rtt(1, SimTime::from_millis(300), SimTime::ZERO));
        assert!(m.on_meta_ack_rtt(0, SimTime::from_millis(101), SimTime::from_secs(3)));
        assert!(!m.on_meta_ack_rtt(0, SimTime::from_millis(30), SimTime::from_secs(4)));
        assert!(m.backups_active());
    }

    #[test]
    fn master_and_join_ids() {
        let m = meta_with(&[false, true, false]);
        assert!(m.subflows()[0].is_master());
        assert_eq!(m.subflows().iter().map(|s| s.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(m.joins_established(), 2);
    }

    #[test]
    fn chunks_cover_submission() {
        let mut m = meta_with(&[false]);
        m.submit(3000);
        assert_eq!(m.take_chunk(1436), Some((0, 1436)));
        assert_eq!(m.take_chunk(1436), Some((1436, 1436)));
        assert_eq!(m.take_chunk(1436), Some((2872, 128)));
        assert_eq!(m.take_chunk(1436), None);
    }

    proptest! {
        #[test]
        fn reassembly_is_exact_for_any_arrival_order(
            lens in proptest::collection::vec(1u64..2000, 1..60),
            perm_seed in any::<u64>(),
            dups in proptest::collection::vec(any::<prop::sample::Index>(), 0..20),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut chunks = Vec::new();
            let mut dsn = 0;
            for l in &lens {
                chunks.push((dsn, *l));
                dsn += l;
            }
            for d in &dups {
                chunks.push(chunks[d.index(lens.len())]);
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
            chunks.shuffle(&mut rng);
            let mut m = MetaConnection::new(1, Role::Server, Scheduler::LowestRtt);
            let total: u64 = chunks.iter().map(|(d, l)| m.on_mapped(*d, *l)).sum();
            prop_assert_eq!(total, dsn);
            prop_assert_eq!(m.data_ack(), dsn);
        }
    }
}
