//! 1500-byte IPv6 frames carrying the Ariadne routing extension header.
//!
//! ```text
//! IPv6 header (40) | common header (8) | [alpha (32)] | vector (180) | payload
//! ```
//!
//! The IPv6 destination is the next hop. Data and setup packets are told
//! apart by the routing type in the common header.

use crate::address::Address;
use crate::crypto::{GroupElement, GROUP_ELEMENT_LEN};
use crate::data_protocol::{
    AriadnePacketBody, CommonHeader, PacketFormat, COMMON_HEADER_LEN, NO_NEXT_HEADER, ROUTING_TYPE_DATA,
    ROUTING_TYPE_SETUP,
};
use crate::error::{Error, Result};
use crate::setup_protocol::{setup_extension_len, SetupPacketBody};

pub const FRAME_LEN: usize = 1500;
pub const IPV6_HEADER_LEN: usize = 40;
/// Experimental next-header value announcing the routing extension.
pub const NEXT_HEADER_ARIADNE: u8 = 253;
pub const DEFAULT_HOP_LIMIT: u8 = 64;

const IPV6_PAYLOAD_LEN: u16 = (FRAME_LEN - IPV6_HEADER_LEN) as u16;

#[derive(Clone, Debug, PartialEq)]
pub enum FramePacket {
    Data { header: CommonHeader, body: AriadnePacketBody },
    Setup { header: CommonHeader, body: SetupPacketBody },
}

impl FramePacket {
    pub fn header(&self) -> &CommonHeader {
        match self {
            FramePacket::Data { header, .. } | FramePacket::Setup { header, .. } => header,
        }
    }

    pub fn is_setup(&self) -> bool {
        matches!(self, FramePacket::Setup { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub src: Address,
    pub dst: Address,
    pub hop_limit: u8,
    pub packet: FramePacket,
}

/// Extension header length for data packets of `format`.
pub fn data_extension_len(format: &PacketFormat) -> usize {
    COMMON_HEADER_LEN + format.vector_len()
}

fn write_ipv6(out: &mut Vec<u8>, frame: &Frame) {
    out.extend_from_slice(&[0x60, 0, 0, 0]);
    out.extend_from_slice(&IPV6_PAYLOAD_LEN.to_be_bytes());
    out.push(NEXT_HEADER_ARIADNE);
    out.push(frame.hop_limit);
    out.extend_from_slice(frame.src.as_bytes());
    out.extend_from_slice(frame.dst.as_bytes());
}

fn check_header(header: &CommonHeader, routing_type: u8, extension_len: usize) -> Result<()> {
    if header.routing_type != routing_type {
        return Err(Error::Malformed("routing type does not match packet kind"));
    }
    if header.next_header != NO_NEXT_HEADER {
        return Err(Error::Malformed("unexpected next header in extension"));
    }
    if header.extension_len() != extension_len {
        return Err(Error::Malformed("extension length field mismatch"));
    }
    Ok(())
}

/// Serializes a frame built with the default packet formats.
pub fn encode(frame: &Frame) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(FRAME_LEN);
    write_ipv6(&mut out, frame);
    match &frame.packet {
        FramePacket::Data { header, body } => {
            let format = PacketFormat::DATA;
            check_header(header, ROUTING_TYPE_DATA, data_extension_len(&format))?;
            if body.as_bytes().len() != format.body_len() {
                return Err(Error::LengthMismatch("data body"));
            }
            out.extend_from_slice(&header.to_bytes());
            out.extend_from_slice(body.as_bytes());
        }
        FramePacket::Setup { header, body } => {
            let format = PacketFormat::SETUP;
            check_header(header, ROUTING_TYPE_SETUP, setup_extension_len(&format))?;
            if body.as_bytes().len() != format.body_len() {
                return Err(Error::LengthMismatch("setup body"));
            }
            out.extend_from_slice(&header.to_bytes());
            out.extend_from_slice(&body.alpha.0);
            out.extend_from_slice(body.as_bytes());
        }
    }
    debug_assert_eq!(out.len(), FRAME_LEN);
    Ok(out)
}

/// Parses a frame. Every accepted input re-encodes to the same bytes.
pub fn decode(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() != FRAME_LEN {
        return Err(Error::Malformed("frame must be 1500 bytes"));
    }
    if bytes[..4] != [0x60, 0, 0, 0] {
        return Err(Error::Malformed("not an IPv6 header with zero class and flow"));
    }
    if u16::from_be_bytes([bytes[4], bytes[5]]) != IPV6_PAYLOAD_LEN {
        return Err(Error::Malformed("IPv6 payload length"));
    }
    if bytes[6] != NEXT_HEADER_ARIADNE {
        return Err(Error::Malformed("IPv6 next header is not 253"));
    }
    let hop_limit = bytes[7];
    let src = Address::from_slice(&bytes[8..24]).expect("16 bytes");
    let dst = Address::from_slice(&bytes[24..40]).expect("16 bytes");
    let ext = &bytes[IPV6_HEADER_LEN..];
    let header = CommonHeader::from_bytes(ext[..COMMON_HEADER_LEN].try_into().expect("8 bytes"));
    let packet = match header.routing_type {
        ROUTING_TYPE_DATA => {
            let format = PacketFormat::DATA;
            check_header(&header, ROUTING_TYPE_DATA, data_extension_len(&format))?;
            if header.pointer as usize >= format.slots {
                return Err(Error::Malformed("pointer out of range"));
            }
            let body = AriadnePacketBody::from_bytes(ext[COMMON_HEADER_LEN..].to_vec(), &format)?;
            FramePacket::Data { header, body }
        }
        ROUTING_TYPE_SETUP => {
            let format = PacketFormat::SETUP;
            check_header(&header, ROUTING_TYPE_SETUP, setup_extension_len(&format))?;
            if header.pointer as usize >= format.slots {
                return Err(Error::Malformed("pointer out of range"));
            }
            let alpha_end = COMMON_HEADER_LEN + GROUP_ELEMENT_LEN;
            let alpha = GroupElement(ext[COMMON_HEADER_LEN..alpha_end].try_into().expect("32 bytes"));
            let body = SetupPacketBody::new(alpha, ext[alpha_end..].to_vec(), &format)?;
            FramePacket::Setup { header, body }
        }
        _ => return Err(Error::Malformed("unknown routing type")),
    };
    Ok(Frame { src, dst, hop_limit, packet })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn data_frame(r: &mut ChaCha20Rng) -> Frame {
        let format = PacketFormat::DATA;
        let mut body = vec![0u8; format.body_len()];
        r.fill_bytes(&mut body);
        Frame {
            src: Address([1; 16]),
            dst: Address([2; 16]),
            hop_limit: DEFAULT_HOP_LIMIT,
            packet: FramePacket::Data {
                header: CommonHeader::data(&format, (r.next_u32() % 5) as u8, r),
                body: AriadnePacketBody::from_bytes(body, &format).unwrap(),
            },
        }
    }

    #[test]
    fn sizes() {
        assert_eq!(data_extension_len(&PacketFormat::DATA), 188);
        assert_eq!(setup_extension_len(&PacketFormat::SETUP), 220);
        let mut r = ChaCha20Rng::seed_from_u64(1);
        let f = data_frame(&mut r);
        let bytes = encode(&f).unwrap();
        assert_eq!(bytes.len(), FRAME_LEN);
        assert_eq!(bytes[6], 253);
        assert_eq!(bytes[IPV6_HEADER_LEN + 1], 45);
        assert_eq!(decode(&bytes).unwrap(), f);
    }

    #[test]
    fn rejects_bad_frames() {
        let mut r = ChaCha20Rng::seed_from_u64(2);
        let bytes = encode(&data_frame(&mut r)).unwrap();
        assert!(decode(&bytes[..1499]).is_err());
        let mut b = bytes.clone();
        b[6] = 43;
        assert!(decode(&b).is_err());
        let mut b = bytes.clone();
        b[IPV6_HEADER_LEN + 2] = 3;
        assert!(decode(&b).is_err());
        let mut b = bytes;
        b[IPV6_HEADER_LEN + 4] = 5;
        assert!(decode(&b).is_err());
    }
}
