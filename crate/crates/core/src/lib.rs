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

//! A miniature TCP/MPTCP stack running inside a deterministic discrete-event
//! network simulator, with a programmable option-extension hook runtime.
//!
//! Extension programs register against hook ops (connection establishment,
//! RTO, option size calculation, option write, option parse, MPTCP subflow
//! events) and act on connections only through a restricted context. The
//! `extensions` module ships the six protocol extensions (user timeout,
//! congestion-control request, initial-window request, delayed-ACK tuning,
//! MPTCP bandwidth cap and MPTCP delay threshold) and `harness` runs declarative
//! scenarios that exercise them.
//!
//! Numeric code that does not depend on simulator time (congestion
//! controllers, RTT estimation) is generic over [`Scalar`]; the stack itself
//! runs on `f64` through the aliases below.

pub mod cc;
pub mod extensions;
pub mod harness;
pub mod hookrt;
pub mod mptcp;
pub mod rtt;
pub mod scalar;
pub mod simnet;
pub mod tcpcore;
pub mod wire;

pub use scalar::Scalar;

/// Scalar type used by the running stack.
pub type Real = f64;
/// Congestion controller as installed on a connection.
pub type Controller = Box<dyn cc::CongestionControl<Real>>;
pub type RttEstimator = rtt::RttEstimator<Real>;
pub type NewReno = cc::NewReno<Real>;
pub type Cubic = cc::Cubic<Real>;
pub type Vegas = cc::Vegas<Real>;
pub type BbrLite = cc::BbrLite<Real>;
pub type CcWindow = cc::Window<Real>;
pub type AckSample = cc::AckSample<Real>;

pub use simnet::SimTime;
pub use wire::{OptionBlock, Segment, TcpOption};
pub use tcpcore::{Connection, DelAckConfig};
pub use harness::{run_scenario, MetricsLog, Scenario};
pub use hookrt::{ExtensionProgram, HookFlagSet, HookOp, HookRuntime, Side, SockOpsContext};
