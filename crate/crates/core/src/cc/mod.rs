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

//! Pluggable congestion controllers and the integer-ID registry used by the
//! congestion-control request option.
//!
//! Windows are in segments and times in seconds; the controllers are generic
//! over the scalar type.

mod bbr;
mod cubic;
mod newreno;
mod vegas;

use std::collections::BTreeMap;
use std::fmt::Debug;

use thiserror::Error;

pub use bbr::{BbrLite, BbrMode};
pub use cubic::Cubic;
pub use newreno::NewReno;
pub use vegas::Vegas;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CcError {
    #[error("unknown congestion control id {0}")]
    UnknownCcId(u8),
    #[error("unknown congestion control name {0:?}")]
    UnknownCcName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Rto,
    FastRetrans,
}

/// Congestion window and slow-start threshold, in segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<T> {
    pub cwnd: T,
    pub ssthresh: T,
}

impl<T: Scalar> Window<T> {
    pub fn new(initial_cwnd: T) -> Self {
        Window { cwnd: initial_cwnd, ssthresh: T::infinity() }
    }

    pub fn in_slow_start(&self) -> bool {
        self.cwnd < self.ssthresh
    }

    pub(crate) fn floor_cwnd(&mut self) {
        if !(self.cwnd >= T::one()) {
            self.cwnd = T::one();
        }
    }
}

/// What the connection tells its controller on every cumulative ACK that
/// advances the left edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AckSample<T> {
    pub now: T,
    pub acked_segs: T,
    pub rtt: Option<T>,
    pub min_rtt: Option<T>,
    /// Segments still in flight after this ACK.
    pub in_flight: T,
    /// Delivery-rate sample in bytes per second.
    pub delivery_rate: Option<T>,
    pub mss: T,
    /// This ACK closes a round trip.
    pub round_start: bool,
}

pub trait CongestionControl<T: Scalar>: Debug + Send {
    fn name(&self) -> &'static str;

    fn on_ack(&mut self, w: &mut Window<T>, ack: &AckSample<T>);

    fn on_loss(&mut self, w: &mut Window<T>, kind: LossKind, in_flight: T, now: T);

    /// Pacing rate in bytes per second, when the controller paces.
    fn pacing_rate(&self, _w: &Window<T>, _srtt: Option<T>, _mss: T) -> Option<T> {
        None
    }

    fn in_slow_start(&self, w: &Window<T>) -> bool {
        w.in_slow_start()
    }
}

/// Integer-ID ↔ name table shared by client and server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CcRegistry {
    entries: BTreeMap<u8, &'static str>,
}

impl Default for CcRegistry {
    fn default() -> Self {
        Self::shipped()
    }
}

impl CcRegistry {
    pub fn shipped() -> Self {
        let entries = [(1, NewReno::<f64>::NAME), (2, Cubic::<f64>::NAME), (3, Vegas::<f64>::NAME), (4, BbrLite::<f64>::NAME)]
            .into_iter()
            .collect();
        CcRegistry { entries }
    }

    pub fn lookup(&self, id: u8) -> Result<&'static str, CcError> {
        self.entries.get(&id).copied().ok_or(CcError::UnknownCcId(id))
    }

    pub fn reverse(&self, name: &str) -> Result<u8, CcError> {
        self.entries
            .iter()
            .find(|(_, n)| **n == name)
            .map(|(id, _)| *id)
            .ok_or_else(|| CcError::UnknownCcName(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.entries.keys().copied()
    }
}

/// Builds a fresh controller by name.
pub fn create<T: Scalar>(name: &str) -> Result<Box<dyn CongestionControl<T>>, CcError> {
    Ok(match name {
        NewReno::<T>::NAME => Box::new(NewReno::<T>::new()),
        Cubic::<T>::NAME => Box::new(Cubic::<T>::new()),
        Vegas::<T>::NAME => Box::new(Vegas::<T>::new()),
        BbrLite::<T>::NAME => Box::new(BbrLite::<T>::new()),
        other => return Err(CcError::UnknownCcName(other.to_string())),
    })
}

/// Standard halving used by the loss-based controllers.
pub(crate) fn halved_ssthresh<T: Scalar>(in_flight: T) -> T {
    (in_flight * T::lit(0.5)).max(T::lit(2.0))
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn ack<T: Scalar>(now: f64, acked: f64, rtt: Option<f64>) -> AckSample<T> {
        AckSample {
            now: T::lit(now),
            acked_segs: T::lit(acked),
            rtt: rtt.map(T::lit),
            min_rtt: rtt.map(T::lit),
            in_flight: T::zero(),
            delivery_rate: None,
            mss: T::lit(1460.0),
            round_start: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_is_bijective() {
        let reg = CcRegistry::shipped();
        assert_eq!(reg.lookup(2), Ok("cubic"));
        assert_eq!(reg.reverse("vegas"), Ok(3));
        assert_eq!(reg.lookup(99), Err(CcError::UnknownCcId(99)));
        assert!(reg.reverse("dctcp").is_err());
        for id in reg.ids() {
            let name = reg.lookup(id).unwrap();
            assert_eq!(reg.reverse(name), Ok(id));
            assert_eq!(create::<f64>(name).unwrap().name(), name);
        }
        assert_eq!(reg.ids().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn controllers_never_drop_below_one_segment() {
        for name in ["newreno", "cubic", "vegas", "bbr"] {
            let mut cc = create::<f64>(name).unwrap();
            let mut w = Window::new(2.0);
            for i in 0..20 {
                cc.on_loss(&mut w, LossKind::Rto, 0.5, i as f64);
                w.floor_cwnd();
                assert!(w.cwnd >= 1.0, "{name}");
            }
        }
    }
}
