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

//! Byte-exact TCP option codec, RFC 6994 experimental framing, MPTCP option
//! records and the simulated segment model.
//!
//! Option payload fields are always written in network byte order.

use std::fmt::{self, Write as _};
use std::net::Ipv4Addr;

use bitflags::bitflags;
use thiserror::Error;

/// Maximum option space in a TCP header.
pub const MAX_OPTION_SPACE: usize = 40;
/// Fixed TCP header size without options.
pub const TCP_BASE_HEADER: usize = 20;
/// IPv4 header accounted for in every frame.
pub const IP_HEADER: usize = 20;
/// Largest TCP payload an option can carry (40 - kind - length).
pub const MAX_OPTION_PAYLOAD: usize = MAX_OPTION_SPACE - 2;

pub mod kind {
    pub const EOL: u8 = 0;
    pub const NOP: u8 = 1;
    pub const MSS: u8 = 2;
    pub const USER_TIMEOUT: u8 = 28;
    pub const MPTCP: u8 = 30;
    pub const EXPERIMENTAL_1: u8 = 253;
    pub const EXPERIMENTAL_2: u8 = 254;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("option block of {0} bytes exceeds the 40-byte option space")]
    OversizeOptionBlock(usize),
    #[error("malformed option at offset {offset}: {reason}")]
    MalformedOption { offset: usize, reason: &'static str },
    #[error("option kind {0} is not an MPTCP option")]
    NotMptcpOption(u8),
    #[error("option kind {0} is not an experimental option")]
    NotExperimentalOption(u8),
    #[error("experimental options use kind 253 or 254, got {0}")]
    BadExperimentalKind(u8),
    #[error("MPTCP subtype {0} does not fit in 4 bits")]
    BadSubtype(u8),
}

/// A single TLV option.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TcpOption {
    pub kind: u8,
    pub payload: Vec<u8>,
}

impl TcpOption {
    pub fn new(kind: u8, payload: Vec<u8>) -> Result<Self, WireError> {
        let opt = TcpOption { kind, payload };
        if opt.encoded_len() > MAX_OPTION_SPACE {
            return Err(WireError::OversizeOptionBlock(opt.encoded_len()));
        }
        Ok(opt)
    }

    pub fn nop() -> Self {
        TcpOption { kind: kind::NOP, payload: Vec::new() }
    }

    pub fn mss(mss: u16) -> Self {
        TcpOption { kind: kind::MSS, payload: mss.to_be_bytes().to_vec() }
    }

    pub fn is_single_octet(&self) -> bool {
        self.kind == kind::EOL || self.kind == kind::NOP
    }

    pub fn encoded_len(&self) -> usize {
        if self.is_single_octet() {
            1
        } else {
            2 + self.payload.len()
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.kind);
        if !self.is_single_octet() {
            out.push(self.encoded_len() as u8);
            out.extend_from_slice(&self.payload);
        }
    }

    /// `kind=K len=L data=hex` line used in traces.
    pub fn dump(&self) -> String {
        let mut s = format!("kind={} len={} data=", self.kind, self.encoded_len());
        for b in &self.payload {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}

impl fmt::Display for TcpOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}

/// Ordered options destined for one segment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OptionBlock {
    pub options: Vec<TcpOption>,
}

impl OptionBlock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_options(options: Vec<TcpOption>) -> Result<Self, WireError> {
        let block = OptionBlock { options };
        block.check()?;
        Ok(block)
    }

    pub fn content_len(&self) -> usize {
        self.options.iter().map(TcpOption::encoded_len).sum()
    }

    pub fn padded_len(&self) -> usize {
        self.content_len().div_ceil(4) * 4
    }

    pub fn remaining(&self) -> usize {
        MAX_OPTION_SPACE.saturating_sub(self.content_len())
    }

    /// Appends `opt` if it fits in the remaining option space.
    pub fn try_push(&mut self, opt: TcpOption) -> Result<(), WireError> {
        let total = self.content_len() + opt.encoded_len();
        if total > MAX_OPTION_SPACE {
            return Err(WireError::OversizeOptionBlock(total));
        }
        self.options.push(opt);
        Ok(())
    }

    fn check(&self) -> Result<(), WireError> {
        let len = self.content_len();
        if len > MAX_OPTION_SPACE {
            return Err(WireError::OversizeOptionBlock(len));
        }
        Ok(())
    }
}

/// Encodes a block, padding with NOP octets to a 4-byte boundary.
pub fn encode_options(block: &OptionBlock) -> Result<Vec<u8>, WireError> {
    block.check()?;
    let mut out = Vec::with_capacity(block.padded_len());
    for opt in &block.options {
        opt.encode_into(&mut out);
    }
    out.resize(block.padded_len(), kind::NOP);
    Ok(out)
}

/// Decodes raw option bytes. NOPs are returned as options, unknown kinds are
/// preserved verbatim, and EOL stops parsing.
pub fn decode_options(raw: &[u8]) -> Result<Vec<TcpOption>, WireError> {
    if raw.len() > MAX_OPTION_SPACE {
        return Err(WireError::OversizeOptionBlock(raw.len()));
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < raw.len() {
        match raw[i] {
            kind::EOL => break,
            kind::NOP => {
                out.push(TcpOption::nop());
                i += 1;
            }
            k => {
                let Some(&len) = raw.get(i + 1) else {
                    return Err(WireError::MalformedOption { offset: i, reason: "missing length octet" });
                };
                let len = len as usize;
                if len < 2 {
                    return Err(WireError::MalformedOption { offset: i, reason: "length below 2" });
                }
                if i + len > raw.len() {
                    return Err(WireError::MalformedOption { offset: i, reason: "length runs past buffer" });
                }
                out.push(TcpOption { kind: k, payload: raw[i + 2..i + len].to_vec() });
                i += len;
            }
        }
    }
    Ok(out)
}

/// Drops trailing NOP padding from a decoded option list.
pub fn strip_padding(options: &[TcpOption]) -> &[TcpOption] {
    let end = options.iter().rposition(|o| o.kind != kind::NOP).map_or(0, |p| p + 1);
    &options[..end]
}

/// Multi-line debug dump, one option per line.
pub fn dump_options(options: &[TcpOption]) -> String {
    options.iter().map(TcpOption::dump).collect::<Vec<_>>().join("\n")
}

/// RFC 6994 experimental option: a 16-bit ExID followed by data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentalOption {
    pub exid: u16,
    pub data: Vec<u8>,
}

pub fn encode_experimental(opt: &ExperimentalOption, use_kind: u8) -> Result<TcpOption, WireError> {
    if use_kind != kind::EXPERIMENTAL_1 && use_kind != kind::EXPERIMENTAL_2 {
        return Err(WireError::BadExperimentalKind(use_kind));
    }
    let mut payload = Vec::with_capacity(2 + opt.data.len());
    payload.extend_from_slice(&opt.exid.to_be_bytes());
    payload.extend_from_slice(&opt.data);
    TcpOption::new(use_kind, payload)
}

pub fn decode_experimental(opt: &TcpOption) -> Result<ExperimentalOption, WireError> {
    if opt.kind != kind::EXPERIMENTAL_1 && opt.kind != kind::EXPERIMENTAL_2 {
        return Err(WireError::NotExperimentalOption(opt.kind));
    }
    if opt.payload.len() < 2 {
        return Err(WireError::MalformedOption { offset: 0, reason: "experimental option without ExID" });
    }
    Ok(ExperimentalOption {
        exid: u16::from_be_bytes([opt.payload[0], opt.payload[1]]),
        data: opt.payload[2..].to_vec(),
    })
}

pub mod mptcp_subtype {
    pub const MP_CAPABLE: u8 = 0x0;
    pub const MP_JOIN: u8 = 0x1;
    pub const DSS: u8 = 0x2;
    pub const RTT_THRESHOLD: u8 = 0xD;
    pub const BW_CAP: u8 = 0xE;

    pub fn is_known(subtype: u8) -> bool {
        matches!(subtype, MP_CAPABLE | MP_JOIN | DSS)
    }
}

/// An MPTCP option carried in kind 30: the high nibble of the first payload
/// byte is the subtype, the low nibble holds subtype-specific flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MptcpOptionRecord {
    pub subtype: u8,
    pub flags: u8,
    pub data: Vec<u8>,
}

impl MptcpOptionRecord {
    pub fn new(subtype: u8, data: Vec<u8>) -> Self {
        MptcpOptionRecord { subtype, flags: 0, data }
    }

    pub fn encoded_len(&self) -> usize {
        3 + self.data.len()
    }
}

pub fn encode_mptcp(record: &MptcpOptionRecord) -> Result<TcpOption, WireError> {
    if record.subtype > 0xF {
        return Err(WireError::BadSubtype(record.subtype));
    }
    let mut payload = Vec::with_capacity(1 + record.data.len());
    payload.push((record.subtype << 4) | (record.flags & 0x0F));
    payload.extend_from_slice(&record.data);
    TcpOption::new(kind::MPTCP, payload)
}

pub fn decode_mptcp(opt: &TcpOption) -> Result<MptcpOptionRecord, WireError> {
    if opt.kind != kind::MPTCP {
        return Err(WireError::NotMptcpOption(opt.kind));
    }
    let Some(&first) = opt.payload.first() else {
        return Err(WireError::MalformedOption { offset: 0, reason: "empty MPTCP option" });
    };
    Ok(MptcpOptionRecord { subtype: first >> 4, flags: first & 0x0F, data: opt.payload[1..].to_vec() })
}

/// Data-sequence signal carried on every MPTCP subflow segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DssMapping {
    pub data_seq: u64,
    pub data_ack: u64,
    pub data_len: u16,
}

impl DssMapping {
    /// Option bytes of an encoded DSS record.
    pub const ENCODED_LEN: usize = 21;

    pub fn to_record(self) -> MptcpOptionRecord {
        let mut data = Vec::with_capacity(18);
        data.extend_from_slice(&self.data_seq.to_be_bytes());
        data.extend_from_slice(&self.data_ack.to_be_bytes());
        data.extend_from_slice(&self.data_len.to_be_bytes());
        MptcpOptionRecord::new(mptcp_subtype::DSS, data)
    }

    pub fn from_record(r: &MptcpOptionRecord) -> Option<Self> {
        if r.subtype != mptcp_subtype::DSS || r.data.len() != 18 {
            return None;
        }
        Some(DssMapping {
            data_seq: u64::from_be_bytes(r.data[0..8].try_into().ok()?),
            data_ack: u64::from_be_bytes(r.data[8..16].try_into().ok()?),
            data_len: u16::from_be_bytes(r.data[16..18].try_into().ok()?),
        })
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct TcpFlags: u8 {
        const FIN = 0x01;
        const SYN = 0x02;
        const RST = 0x04;
        const ACK = 0x10;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub host: u32,
    pub addr: Ipv4Addr,
    pub port: u16,
}

/// A simulated segment. Payload is modelled by its length only; options are
/// carried encoded so the receiver always goes through the decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub seq: u32,
    pub ack: u32,
    pub flags: TcpFlags,
    pub options: Vec<u8>,
    pub payload: u32,
}

impl Segment {
    pub fn header_len(&self) -> usize {
        TCP_BASE_HEADER + self.options.len()
    }

    /// Bytes on the wire including the IP header.
    pub fn wire_len(&self) -> usize {
        IP_HEADER + self.header_len() + self.payload as usize
    }

    pub fn is_syn(&self) -> bool {
        self.flags.contains(TcpFlags::SYN)
    }

    /// Sequence space consumed: payload plus one for SYN and FIN.
    pub fn seq_len(&self) -> u32 {
        self.payload
            + u32::from(self.flags.contains(TcpFlags::SYN))
            + u32::from(self.flags.contains(TcpFlags::FIN))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encodes_kind66_option_without_padding() {
        let block = OptionBlock::from_options(vec![TcpOption::new(66, vec![0x00, 0x14]).unwrap()]).unwrap();
        assert_eq!(encode_options(&block).unwrap(), vec![0x42, 0x04, 0x00, 0x14]);
        assert_eq!(block.padded_len(), 4);
    }

    #[test]
    fn empty_block_is_empty() {
        let block = OptionBlock::new();
        assert!(encode_options(&block).unwrap().is_empty());
        assert_eq!(block.padded_len(), 0);
    }

    #[test]
    fn pads_with_trailing_nops() {
        let block = OptionBlock::from_options(vec![
            TcpOption::new(kind::USER_TIMEOUT, vec![0x00, 0x03]).unwrap(),
            TcpOption::nop(),
        ])
        .unwrap();
        assert_eq!(block.content_len(), 5);
        assert_eq!(block.padded_len(), 8);
        let bytes = encode_options(&block).unwrap();
        assert_eq!(bytes, vec![28, 4, 0, 3, 1, 1, 1, 1]);
    }

    #[test]
    fn rejects_oversize_block() {
        let block = OptionBlock {
            options: vec![TcpOption { kind: 99, payload: vec![0; 30] }, TcpOption { kind: 98, payload: vec![0; 10] }],
        };
        assert_eq!(encode_options(&block), Err(WireError::OversizeOptionBlock(44)));
        let mut ok = OptionBlock::new();
        ok.try_push(TcpOption { kind: 99, payload: vec![0; 36] }).unwrap();
        assert!(ok.try_push(TcpOption { kind: 98, payload: vec![0] }).is_err());
        assert_eq!(ok.content_len(), 38);
    }

    #[test]
    fn decodes_kind66() {
        let opts = decode_options(&[0x42, 0x04, 0x00, 0x14]).unwrap();
        assert_eq!(opts, vec![TcpOption { kind: 66, payload: vec![0x00, 0x14] }]);
    }

    #[test]
    fn eol_stops_parse() {
        let opts = decode_options(&[1, 1, 0, 66, 4, 0, 20]).unwrap();
        assert_eq!(opts, vec![TcpOption::nop(), TcpOption::nop()]);
    }

    #[test]
    fn malformed_lengths() {
        assert!(matches!(decode_options(&[66, 1, 0, 0]), Err(WireError::MalformedOption { .. })));
        assert!(matches!(decode_options(&[66, 6, 0, 0]), Err(WireError::MalformedOption { .. })));
        assert!(matches!(decode_options(&[1, 1, 1, 66]), Err(WireError::MalformedOption { .. })));
    }

    #[test]
    fn unknown_kinds_survive() {
        let opts = decode_options(&[200, 3, 7, 1]).unwrap();
        assert_eq!(opts[0], TcpOption { kind: 200, payload: vec![7] });
    }

    #[test]
    fn experimental_layout() {
        let opt = encode_experimental(&ExperimentalOption { exid: 0x0BAD, data: vec![0x01] }, 254).unwrap();
        assert_eq!(opt.kind, 254);
        assert_eq!(opt.encoded_len(), 5);
        assert_eq!(opt.payload, vec![0x0B, 0xAD, 0x01]);
        let empty = encode_experimental(&ExperimentalOption { exid: 0, data: vec![] }, 254).unwrap();
        assert_eq!(empty.encoded_len(), 4);
        assert!(encode_experimental(&ExperimentalOption { exid: 1, data: vec![] }, 30).is_err());
        assert!(encode_experimental(&ExperimentalOption { exid: 1, data: vec![0; 37] }, 253).is_err());
    }

    #[test]
    fn mptcp_records() {
        let cap = MptcpOptionRecord::new(mptcp_subtype::MP_CAPABLE, 0x1122_3344_5566_7788u64.to_be_bytes().to_vec());
        let opt = encode_mptcp(&cap).unwrap();
        assert_eq!(opt.kind, kind::MPTCP);
        // kind, len, subtype|flags, 8-byte key
        assert_eq!(opt.encoded_len(), 11);
        assert_eq!(opt.payload[0] >> 4, 0);
        assert_eq!(decode_mptcp(&opt).unwrap(), cap);

        let odd = MptcpOptionRecord::new(0xE, vec![0x64]);
        assert_eq!(decode_mptcp(&encode_mptcp(&odd).unwrap()).unwrap(), odd);
        assert_eq!(decode_mptcp(&TcpOption::new(8, vec![0; 8]).unwrap()), Err(WireError::NotMptcpOption(8)));
    }

    #[test]
    fn dss_round_trip() {
        let m = DssMapping { data_seq: 1 << 40, data_ack: 77, data_len: 1436 };
        let opt = encode_mptcp(&m.to_record()).unwrap();
        assert_eq!(opt.encoded_len(), 21);
        assert_eq!(DssMapping::from_record(&decode_mptcp(&opt).unwrap()), Some(m));
    }

    #[test]
    fn dump_format() {
        let opt = TcpOption::new(66, vec![0x00, 0x14]).unwrap();
        assert_eq!(opt.dump(), "kind=66 len=4 data=0014");
        assert_eq!(dump_options(&[TcpOption::nop(), opt]), "kind=1 len=1 data=\nkind=66 len=4 data=0014");
    }

    #[test]
    fn segment_lengths() {
        let ep = Endpoint { host: 0, addr: Ipv4Addr::new(10, 0, 0, 1), port: 1 };
        let seg = Segment { src: ep, dst: ep, seq: 0, ack: 0, flags: TcpFlags::SYN, options: vec![2, 4, 5, 180], payload: 0 };
        assert_eq!(seg.header_len(), 24);
        assert_eq!(seg.wire_len(), 44);
        assert_eq!(seg.seq_len(), 1);
    }

    /// Independent reference decoder: walks bytes with a different loop shape
    /// and returns (kind, payload) pairs.
    fn reference_decode(raw: &[u8]) -> Option<Vec<(u8, Vec<u8>)>> {
        let mut out = Vec::new();
        let mut rest = raw;
        loop {
            match rest {
                [] | [0, ..] => return Some(out),
                [1, tail @ ..] => {
                    out.push((1, vec![]));
                    rest = tail;
                }
                [k, l, ..] if *l >= 2 && (*l as usize) <= rest.len() => {
                    out.push((*k, rest[2..*l as usize].to_vec()));
                    rest = &rest[*l as usize..];
                }
                _ => return None,
            }
        }
    }

    fn arb_option() -> impl Strategy<Value = TcpOption> {
        prop_oneof![
            Just(TcpOption::nop()),
            (2u8..=255, proptest::collection::vec(any::<u8>(), 0..12))
                .prop_map(|(kind, payload)| TcpOption { kind, payload }),
        ]
    }

    fn arb_block() -> impl Strategy<Value = OptionBlock> {
        proptest::collection::vec(arb_option(), 0..8).prop_map(|opts| {
            let mut block = OptionBlock::new();
            for o in opts {
                let _ = block.try_push(o);
            }
            block
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn block_round_trip(block in arb_block()) {
            let bytes = encode_options(&block).unwrap();
            prop_assert_eq!(bytes.len(), block.padded_len());
            prop_assert!(bytes.len() <= MAX_OPTION_SPACE && bytes.len() % 4 == 0);
            let decoded = decode_options(&bytes).unwrap();
            prop_assert_eq!(strip_padding(&decoded), strip_padding(&block.options));
            let reference = reference_decode(&bytes).unwrap();
            let ours: Vec<(u8, Vec<u8>)> = decoded.into_iter().map(|o| (o.kind, o.payload)).collect();
            prop_assert_eq!(ours, reference);
        }

        #[test]
        fn decoder_never_panics(raw in proptest::collection::vec(any::<u8>(), 0..=40)) {
            let ours = decode_options(&raw);
            let reference = reference_decode(&raw);
            prop_assert_eq!(ours.is_ok(), reference.is_some());
        }

        #[test]
        fn experimental_round_trip(exid in any::<u16>(), data in proptest::collection::vec(any::<u8>(), 0..=36), k in prop_oneof![Just(253u8), Just(254u8)]) {
            let opt = ExperimentalOption { exid, data };
            let enc = encode_experimental(&opt, k).unwrap();
            prop_assert_eq!(decode_experimental(&enc).unwrap(), opt);
        }

        #[test]
        fn mptcp_round_trip(subtype in 0u8..16, flags in 0u8..16, data in proptest::collection::vec(any::<u8>(), 0..=37)) {
            let rec = MptcpOptionRecord { subtype, flags, data };
            prop_assert_eq!(decode_mptcp(&encode_mptcp(&rec).unwrap()).unwrap(), rec);
        }
    }
}
