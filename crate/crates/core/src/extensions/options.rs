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


//! Wire layouts of the extension options.
//!
//! The TCP-level requests use kind-254 experimental framing with their own
//! ExIDs; the MPTCP ones are kind-30 records with unassigned subtypes.

use crate::simnet::SimTime;
use crate::wire::{
    decode_experimental, encode_experimental, kind, mptcp_subtype, ExperimentalOption, MptcpOptionRecord, TcpOption,
    WireError,
};

pub const EXID_CC_REQUEST: u16 = 0xF001;
pub const EXID_IW_REQUEST: u16 = 0xF002;
pub const EXID_DELACK: u16 = 0xF003;

/// Why a received extension option was not acted on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OptionReject {
    Wire(WireError),
    WrongExid(u16),
    WrongSubtype(u8),
    BadLength(usize),
    ZeroValue,
}

impl From<WireError> for OptionReject {
    fn from(e: WireError) -> Self {
        OptionReject::Wire(e)
    }
}

fn experimental(opt: &TcpOption, exid: u16, len: usize) -> Result<Vec<u8>, OptionReject> {
    let e = decode_experimental(opt)?;
    if e.exid != exid {
        return Err(OptionReject::WrongExid(e.exid));
    }
    if e.data.len() != len {
        return Err(OptionReject::BadLength(e.data.len()));
    }
    Ok(e.data)
}

fn make_experimental(exid: u16, data: Vec<u8>) -> TcpOption {
    encode_experimental(&ExperimentalOption { exid, data }, kind::EXPERIMENTAL_2).expect("short payload fits")
}

/// User Timeout option: G bit (minutes when set) and a 15-bit value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UtoOption {
    pub minutes: bool,
    pub timeout: u16,
}

impl UtoOption {
    pub const LEN: usize = 4;

    /// Picks seconds granularity when the value fits, else minutes.
    pub fn from_duration(t: SimTime) -> Self {
        let s = (t.as_nanos() / 1_000_000_000).min(u64::from(u16::MAX));
        if s <= 0x7FFF {
            UtoOption { minutes: false, timeout: s as u16 }
        } else {
            UtoOption { minutes: true, timeout: (s / 60).min(0x7FFF) as u16 }
        }
    }

    pub fn duration(self) -> SimTime {
        let unit = if self.minutes { 60 } else { 1 };
        SimTime::from_secs(u64::from(self.timeout) * unit)
    }

    pub fn encode(self) -> TcpOption {
        let v = (u16::from(self.minutes) << 15) | (self.timeout & 0x7FFF);
        TcpOption::new(kind::USER_TIMEOUT, v.to_be_bytes().to_vec()).expect("fits")
    }

    pub fn decode(opt: &TcpOption) -> Result<Self, OptionReject> {
        if opt.kind != kind::USER_TIMEOUT {
            return Err(OptionReject::Wire(WireError::MalformedOption { offset: 0, reason: "not a UTO option" }));
        }
        if opt.payload.len() != 2 {
            return Err(OptionReject::BadLength(opt.payload.len()));
        }
        let v = u16::from_be_bytes([opt.payload[0], opt.payload[1]]);
        let o = UtoOption { minutes: v & 0x8000 != 0, timeout: v & 0x7FFF };
        if o.timeout == 0 {
            return Err(OptionReject::ZeroValue);
        }
        Ok(o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CcRequestOption {
    pub cc_id: u8,
}

impl CcRequestOption {
    pub const LEN: usize = 5;

    pub fn encode(self) -> TcpOption {
        make_experimental(EXID_CC_REQUEST, vec![self.cc_id])
    }

    pub fn decode(opt: &TcpOption) -> Result<Self, OptionReject> {
        let d = experimental(opt, EXID_CC_REQUEST, 1)?;
        Ok(CcRequestOption { cc_id: d[0] })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IwRequestOption {
    pub iw: u16,
}

impl IwRequestOption {
    pub const LEN: usize = 6;

    pub fn encode(self) -> TcpOption {
        make_experimental(EXID_IW_REQUEST, self.iw.to_be_bytes().to_vec())
    }

    pub fn decode(opt: &TcpOption) -> Result<Self, OptionReject> {
        let d = experimental(opt, EXID_IW_REQUEST, 2)?;
        let iw = u16::from_be_bytes([d[0], d[1]]);
        if iw == 0 {
            return Err(OptionReject::ZeroValue);
        }
        Ok(IwRequestOption { iw })
    }
}

/// Delayed-ACK tuning: timeout as `frac_num/128` of min RTT and the
/// segment count that forces an immediate ACK.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelAckOption {
    pub frac_num: u8,
    pub quick_thresh: u8,
}

impl DelAckOption {
    pub const LEN: usize = 6;

    pub fn encode(self) -> TcpOption {
        make_experimental(EXID_DELACK, vec![self.frac_num, self.quick_thresh])
    }

    pub fn decode(opt: &TcpOption) -> Result<Self, OptionReject> {
        let d = experimental(opt, EXID_DELACK, 2)?;
        if d[0] == 0 || d[1] == 0 {
            return Err(OptionReject::ZeroValue);
        }
        Ok(DelAckOption { frac_num: d[0], quick_thresh: d[1] })
    }
}

/// Bandwidth cap in bytes per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BwCapOption {
    pub cap: u32,
}

impl BwCapOption {
    pub fn record(self) -> MptcpOptionRecord {
        MptcpOptionRecord::new(mptcp_subtype::BW_CAP, self.cap.to_be_bytes().to_vec())
    }

    pub fn decode(r: &MptcpOptionRecord) -> Result<Self, OptionReject> {
        if r.subtype != mptcp_subtype::BW_CAP {
            return Err(OptionReject::WrongSubtype(r.subtype));
        }
        let d: [u8; 4] = r.data.as_slice().try_into().map_err(|_| OptionReject::BadLength(r.data.len()))?;
        let cap = u32::from_be_bytes(d);
        if cap == 0 {
            return Err(OptionReject::ZeroValue);
        }
        Ok(BwCapOption { cap })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RttThresholdOption {
    pub threshold_ms: u16,
}

impl RttThresholdOption {
    pub fn record(self) -> MptcpOptionRecord {
        MptcpOptionRecord::new(mptcp_subtype::RTT_THRESHOLD, self.threshold_ms.to_be_bytes().to_vec())
    }

    pub fn decode(r: &MptcpOptionRecord) -> Result<Self, OptionReject> {
        if r.subtype != mptcp_subtype::RTT_THRESHOLD {
            return Err(OptionReject::WrongSubtype(r.subtype));
        }
        let d: [u8; 2] = r.data.as_slice().try_into().map_err(|_| OptionReject::BadLength(r.data.len()))?;
        let threshold_ms = u16::from_be_bytes(d);
        if threshold_ms == 0 {
            return Err(OptionReject::ZeroValue);
        }
        Ok(RttThresholdOption { threshold_ms })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{decode_mptcp, decode_options, encode_mptcp, encode_options, OptionBlock};
    use proptest::prelude::*;

    /// Encodes through a full option block and back.
    fn through_wire(opt: TcpOption) -> TcpOption {
        let bytes = encode_options(&OptionBlock::from_options(vec![opt]).unwrap()).unwrap();
        decode_options(&bytes).unwrap().into_iter().next().unwrap()
    }

    #[test]
    fn uto_layout() {
        let o = UtoOption::from_duration(SimTime::from_secs(3)).encode();
        assert_eq!((o.kind, o.encoded_len(), o.payload.clone()), (28, 4, vec![0x00, 0x03]));
        let m = UtoOption { minutes: true, timeout: 2 };
        assert_eq!(m.encode().payload, vec![0x80, 0x02]);
        assert_eq!(m.duration(), SimTime::from_secs(120));
        let zero = TcpOption::new(28, vec![0x80, 0x00]).unwrap();
        assert_eq!(UtoOption::decode(&zero), Err(OptionReject::ZeroValue));
        assert_eq!(UtoOption::from_duration(SimTime::from_secs(40_000)), UtoOption { minutes: true, timeout: 666 });
    }

    #[test]
    fn experimental_layouts() {
        let cc = CcRequestOption { cc_id: 3 }.encode();
        assert_eq!((cc.kind, cc.payload.clone()), (254, vec![0xF0, 0x01, 3]));
        assert_eq!(cc.encoded_len(), CcRequestOption::LEN);
        let iw = IwRequestOption { iw: 40 }.encode();
        assert_eq!(iw.payload, vec![0xF0, 0x02, 0, 40]);
        assert_eq!(iw.encoded_len(), IwRequestOption::LEN);
        let d = DelAckOption { frac_num: 32, quick_thresh: 10 }.encode();
        assert_eq!(d.payload, vec![0xF0, 0x03, 32, 10]);
        assert_eq!(CcRequestOption::decode(&iw), Err(OptionReject::WrongExid(0xF002)));
        let bad = make_experimental(EXID_DELACK, vec![0, 10]);
        assert_eq!(DelAckOption::decode(&bad), Err(OptionReject::ZeroValue));
    }

    #[test]
    fn mptcp_layouts() {
        let o = encode_mptcp(&BwCapOption { cap: 100_000 }.record()).unwrap();
        assert_eq!(o.payload, vec![0xE0, 0x00, 0x01, 0x86, 0xA0]);
        let r = encode_mptcp(&RttThresholdOption { threshold_ms: 100 }.record()).unwrap();
        assert_eq!(r.payload, vec![0xD0, 0x00, 0x64]);
        assert_eq!(BwCapOption::decode(&decode_mptcp(&r).unwrap()), Err(OptionReject::WrongSubtype(0xD)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn all_six_round_trip(m in any::<bool>(), t in 1u16..0x8000, id in any::<u8>(), iw in 1u16.., f in 1u8.., q in 1u8.., cap in 1u32.., ms in 1u16..) {
            let u = UtoOption { minutes: m, timeout: t };
            prop_assert_eq!(UtoOption::decode(&through_wire(u.encode())), Ok(u));
            let c = CcRequestOption { cc_id: id };
            prop_assert_eq!(CcRequestOption::decode(&through_wire(c.encode())), Ok(c));
            let i = IwRequestOption { iw };
            prop_assert_eq!(IwRequestOption::decode(&through_wire(i.encode())), Ok(i));
            let d = DelAckOption { frac_num: f, quick_thresh: q };
            prop_assert_eq!(DelAckOption::decode(&through_wire(d.encode())), Ok(d));
            let b = BwCapOption { cap };
            let wire = through_wire(encode_mptcp(&b.record()).unwrap());
            prop_assert_eq!(BwCapOption::decode(&decode_mptcp(&wire).unwrap()), Ok(b));
            let r = RttThresholdOption { threshold_ms: ms };
            let wire = through_wire(encode_mptcp(&r.record()).unwrap());
            prop_assert_eq!(RttThresholdOption::decode(&decode_mptcp(&wire).unwrap()), Ok(r));
        }
    }
}
