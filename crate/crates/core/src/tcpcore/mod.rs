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


//! Sans-IO TCP connection: handshake, sequence bookkeeping, RTT/RTO,
//! retransmission, delayed acknowledgements and the hook seams.

mod connection;
mod delack;
mod sendbuf;

pub use connection::{Connection, Io};
pub use delack::{ack_policy, AckDecision, AckPhase, DelAckConfig};
pub use sendbuf::{SendBuffer, SentSeg};

use thiserror::Error;

use crate::hookrt::Role;
use crate::simnet::SimTime;

pub const DEFAULT_MSS: u16 = 1460;
pub const DEFAULT_MTU: usize = 1500;
pub const DEFAULT_IW: u32 = 10;
pub const RTO_MIN: SimTime = SimTime::from_millis(200);
pub const RTO_INITIAL: SimTime = SimTime::from_secs(1);
pub const RTO_MAX: SimTime = SimTime::from_secs(120);
pub const SYN_RETRIES: u32 = 6;
pub const DATA_RETRIES: u32 = 15;
pub const RECV_WINDOW: u64 = 64 << 20;
pub const DUPACK_THRESHOLD: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TcpState {
    Listen,
    SynSent,
    SynRcvd,
    Established,
    CloseWait,
    FinWait,
    Closed,
}

impl TcpState {
    pub fn code(self) -> u64 {
        self as u64
    }

    pub fn is_synchronized(self) -> bool {
        matches!(self, TcpState::Established | TcpState::CloseWait | TcpState::FinWait)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TcpError {
    #[error("handshake timed out after {0} SYN retransmissions")]
    HandshakeTimeout(u32),
    #[error("user timeout expired with data unacknowledged for {0}")]
    UserTimeoutExpired(SimTime),
    #[error("retransmission limit of {0} reached")]
    RetryLimit(u32),
    #[error("connection reset by peer")]
    Reset,
    #[error("connection is closed")]
    ConnectionClosed,
}

/// MPTCP identity of a subflow, used to emit the handshake options.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubflowCfg {
    pub key: u64,
    pub subflow_id: u32,
    pub join: bool,
    pub backup: bool,
}

impl SubflowCfg {
    pub fn token(&self) -> u32 {
        self.key as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnConfig {
    pub role: Role,
    pub iss: u32,
    pub mss: u16,
    pub mtu: usize,
    pub initial_cwnd: u32,
    pub cc: String,
    pub delack: DelAckConfig,
    pub rto_min: SimTime,
    pub rto_initial: SimTime,
    pub rto_max: SimTime,
    pub syn_retries: u32,
    pub data_retries: u32,
    pub subflow: Option<SubflowCfg>,
}

impl ConnConfig {
    pub fn new(role: Role, iss: u32) -> Self {
        ConnConfig {
            role,
            iss,
            mss: DEFAULT_MSS,
            mtu: DEFAULT_MTU,
            initial_cwnd: DEFAULT_IW,
            cc: "cubic".to_string(),
            delack: DelAckConfig::default(),
            rto_min: RTO_MIN,
            rto_initial: RTO_INITIAL,
            rto_max: RTO_MAX,
            syn_retries: SYN_RETRIES,
            data_retries: DATA_RETRIES,
            subflow: None,
        }
    }
}

/// Things a connection reports to its owner.
#[derive(Debug, Clone, PartialEq)]
pub enum ConnEvent {
    StateChanged(TcpState),
    Established,
    Closed(Option<TcpError>),
    /// Cumulative ACK advanced by this many bytes.
    Acked(u64),
    /// In-order bytes handed to the application.
    Delivered(u64),
    RttSample { rtt: SimTime, srtt: SimTime },
    Cwnd(f64),
    Retransmit { offset: u64, len: u32 },
    /// Retransmission timeout fired; `rto` is the backed-off timeout now armed.
    Rto { rto: SimTime },
    AckSent,
    /// Data segment sent (first transmission) with its payload length.
    DataSent(u32),
    /// MPTCP data arrived with its data-sequence mapping.
    MappedData { dsn: u64, len: u32 },
    /// Peer's MPTCP data ACK.
    DataAck(u64),
    /// MPTCP handshake option seen from the peer.
    PeerMptcp { key_or_token: u64, join: bool, backup: bool },
    /// Unknown option with no interested program.
    OptionIgnored(u8),
}
