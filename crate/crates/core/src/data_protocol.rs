//! Data packet creation at the source and processing at relays.
//!
//! A packet's content `X` is the routing vector followed by the padded
//! payload. The source builds it backwards from the destination; each relay
//! finds its temporary keys through the encrypted pattern at the slot named
//! by the common header, checks the MAC with its own MAC field zeroed, and
//! strips one keystream layer from all of `X`. Stripping the layer also
//! blinds the relay's own element for everyone downstream.

use rand::{CryptoRng, RngCore};

use crate::address::Address;
use crate::crypto::{self, derive_temp_keys, MasterKey, Pattern, TempKeyPair, PATTERN_LEN};
use crate::error::{Error, Result};
use crate::key_reference::SessionId;
use crate::node::NodeContext;
use crate::onion;
use crate::routing_vector::{
    self, fill_vector, sample_slot_assignment, star_elements, RoutingElement, RoutingVector,
    SlotAssignment, DEFAULT_SLOTS, ELEMENT_LEN,
};

pub const COMMON_HEADER_LEN: usize = 8;
/// IPv6 "No Next Header": the padded payload is opaque.
pub const NO_NEXT_HEADER: u8 = 59;
pub const ROUTING_TYPE_DATA: u8 = 1;
pub const ROUTING_TYPE_SETUP: u8 = 2;
/// Bytes taken by the payload length prefix.
pub const LENGTH_PREFIX: usize = 2;

/// Sizes shared by every node of a deployment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PacketFormat {
    pub slots: usize,
    pub payload_len: usize,
}

impl PacketFormat {
    /// 40 (IPv6) + 188 (extension) + 1272 = 1500.
    pub const DATA: PacketFormat = PacketFormat { slots: DEFAULT_SLOTS, payload_len: 1272 };
    /// 40 (IPv6) + 220 (extension) + 1240 = 1500.
    pub const SETUP: PacketFormat = PacketFormat { slots: DEFAULT_SLOTS, payload_len: 1240 };

    pub fn vector_len(&self) -> usize {
        self.slots * ELEMENT_LEN
    }

    /// Length of the MAC'd content: vector plus padded payload.
    pub fn body_len(&self) -> usize {
        self.vector_len() + self.payload_len
    }

    pub fn max_data_len(&self) -> usize {
        self.payload_len.saturating_sub(LENGTH_PREFIX)
    }
}

/// `next_header | hdr_ext_len | routing_type | segments_left | pointer | reserved[3]`.
///
/// `hdr_ext_len` counts 4-octet units after the first 8 octets of the
/// extension header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommonHeader {
    pub next_header: u8,
    pub hdr_ext_len: u8,
    pub routing_type: u8,
    pub segments_left: u8,
    pub pointer: u8,
    pub reserved: [u8; 3],
}

impl CommonHeader {
    /// Header with fresh random reserved bytes.
    pub fn new<R: RngCore>(routing_type: u8, extension_len: usize, pointer: u8, rng: &mut R) -> Self {
        let mut reserved = [0u8; 3];
        rng.fill_bytes(&mut reserved);
        CommonHeader {
            next_header: NO_NEXT_HEADER,
            hdr_ext_len: ((extension_len - COMMON_HEADER_LEN) / 4) as u8,
            routing_type,
            segments_left: 0,
            pointer,
            reserved,
        }
    }

    pub fn data<R: RngCore>(format: &PacketFormat, pointer: u8, rng: &mut R) -> Self {
        Self::new(ROUTING_TYPE_DATA, COMMON_HEADER_LEN + format.vector_len(), pointer, rng)
    }

    pub fn to_bytes(&self) -> [u8; COMMON_HEADER_LEN] {
        let r = self.reserved;
        [
            self.next_header,
            self.hdr_ext_len,
            self.routing_type,
            self.segments_left,
            self.pointer,
            r[0],
            r[1],
            r[2],
        ]
    }

    pub fn from_bytes(b: &[u8; COMMON_HEADER_LEN]) -> Self {
        CommonHeader {
            next_header: b[0],
            hdr_ext_len: b[1],
            routing_type: b[2],
            segments_left: b[3],
            pointer: b[4],
            reserved: [b[5], b[6], b[7]],
        }
    }

    /// Length of the extension header this one announces.
    pub fn extension_len(&self) -> usize {
        COMMON_HEADER_LEN + 4 * self.hdr_ext_len as usize
    }
}

/// Routing vector followed by the padded payload.
#[derive(Clone, PartialEq, Eq)]
pub struct AriadnePacketBody {
    bytes: Vec<u8>,
    slots: usize,
}

impl AriadnePacketBody {
    pub fn from_bytes(bytes: Vec<u8>, format: &PacketFormat) -> Result<Self> {
        if bytes.len() != format.body_len() {
            return Err(Error::LengthMismatch("packet body"));
        }
        Ok(AriadnePacketBody { bytes, slots: format.slots })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn as_bytes_mut(&mut self) -> &mut [u8] {
        &mut self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn vector(&self) -> &[u8] {
        &self.bytes[..self.slots * ELEMENT_LEN]
    }

    pub fn payload(&self) -> &[u8] {
        &self.bytes[self.slots * ELEMENT_LEN..]
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn read_slot(&self, index: usize) -> Result<[u8; ELEMENT_LEN]> {
        routing_vector::read_slot(self.vector(), index)
    }
}

impl std::fmt::Debug for AriadnePacketBody {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AriadnePacketBody({} bytes, {} slots)", self.bytes.len(), self.slots)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathHop {
    pub address: Address,
    pub key: MasterKey,
}

/// Relays `N_1 .. N_n` followed by the destination `N_{n+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSpec {
    pub hops: Vec<PathHop>,
}

impl PathSpec {
    pub fn new(hops: Vec<PathHop>) -> Self {
        PathSpec { hops }
    }

    pub fn addresses(&self) -> Vec<Address> {
        self.hops.iter().map(|h| h.address).collect()
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    pub fn destination(&self) -> Option<Address> {
        self.hops.last().map(|h| h.address)
    }

    pub(crate) fn validate(&self, format: &PacketFormat) -> Result<()> {
        check_path_len(self.hops.len(), format)
    }
}

pub(crate) fn check_path_len(hops: usize, format: &PacketFormat) -> Result<()> {
    if hops == 0 {
        return Err(Error::EmptyPath);
    }
    if hops > format.slots {
        return Err(Error::PathTooLong { hops, max: format.slots });
    }
    Ok(())
}

/// A packet ready to be handed to `next_hop`.
#[derive(Clone, Debug, PartialEq)]
pub struct Outgoing<B = AriadnePacketBody> {
    pub next_hop: Address,
    pub header: CommonHeader,
    pub body: B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    BadPattern,
    BadMac,
    Replay,
    Malformed,
    /// The node could not install a new session.
    Capacity,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProcessOutcome<B = AriadnePacketBody> {
    Forward(Outgoing<B>),
    Deliver(Vec<u8>),
    Drop(DropReason),
}

impl<B> ProcessOutcome<B> {
    pub fn is_drop(&self) -> bool {
        matches!(self, ProcessOutcome::Drop(_))
    }
}

/// Frames `data` as a 2-byte big-endian length, the data, and random fill.
pub fn pad_payload<R: RngCore>(data: &[u8], payload_len: usize, rng: &mut R) -> Result<Vec<u8>> {
    let max = payload_len.saturating_sub(LENGTH_PREFIX).min(u16::MAX as usize);
    if data.len() > max {
        return Err(Error::PayloadTooLong { len: data.len(), max });
    }
    let mut out = vec![0u8; payload_len];
    out[..LENGTH_PREFIX].copy_from_slice(&(data.len() as u16).to_be_bytes());
    out[LENGTH_PREFIX..LENGTH_PREFIX + data.len()].copy_from_slice(data);
    rng.fill_bytes(&mut out[LENGTH_PREFIX + data.len()..]);
    Ok(out)
}

pub fn unpad_payload(padded: &[u8]) -> Result<Vec<u8>> {
    if padded.len() < LENGTH_PREFIX {
        return Err(Error::Malformed("payload shorter than its length prefix"));
    }
    let len = u16::from_be_bytes([padded[0], padded[1]]) as usize;
    if len > padded.len() - LENGTH_PREFIX {
        return Err(Error::Malformed("declared payload length too large"));
    }
    Ok(padded[LENGTH_PREFIX..LENGTH_PREFIX + len].to_vec())
}

/// Builds a data packet for counter `t` along `path`.
pub fn create_packet<R: RngCore + CryptoRng>(
    format: &PacketFormat,
    path: &PathSpec,
    t: u64,
    pattern: &Pattern,
    payload: &[u8],
    rng: &mut R,
) -> Result<Outgoing> {
    path.validate(format)?;
    let padded = pad_payload(payload, format.payload_len, rng)?;
    let keys: Vec<TempKeyPair> = path.hops.iter().map(|h| derive_temp_keys(&h.key, t)).collect();
    let assignment = sample_slot_assignment(path.len(), format.slots, rng)?;
    let initial = RoutingVector::random(format.slots, rng);
    let body = assemble_packet(format, &path.addresses(), &keys, pattern, &assignment, initial, padded)?;
    Ok(Outgoing {
        next_hop: path.hops[0].address,
        header: CommonHeader::data(format, assignment.positions()[0], rng),
        body,
    })
}

/// Deterministic part of packet creation: filler, then the backward layer pass.
pub fn assemble_packet(
    format: &PacketFormat,
    hop_addrs: &[Address],
    keys: &[TempKeyPair],
    pattern: &Pattern,
    assignment: &SlotAssignment,
    initial: RoutingVector,
    padded_payload: Vec<u8>,
) -> Result<AriadnePacketBody> {
    check_path_len(hop_addrs.len(), format)?;
    if keys.len() != hop_addrs.len() {
        return Err(Error::LengthMismatch("keys vs hops"));
    }
    if initial.slots() != format.slots || padded_payload.len() != format.payload_len {
        return Err(Error::LengthMismatch("vector or payload size"));
    }
    let stars = star_elements(assignment, hop_addrs, pattern)?;
    let enc: Vec<&[u8; 32]> = keys.iter().map(|k| &k.enc).collect();
    let filler = fill_vector(initial, assignment, &stars, &enc)?;
    let mut x = filler.into_bytes();
    x.extend_from_slice(&padded_payload);
    onion::wrap_layers(&mut x, assignment, &stars, keys);
    AriadnePacketBody::from_bytes(x, format)
}

/// Outcome plus the table entry that matched, for tracing.
#[derive(Clone, Debug, PartialEq)]
pub struct Processed {
    pub outcome: ProcessOutcome,
    pub matched: Option<(SessionId, u64)>,
}

pub fn process_packet(node: &mut NodeContext, header: &CommonHeader, body: AriadnePacketBody) -> ProcessOutcome {
    process_packet_traced(node, header, body).outcome
}

pub fn process_packet_traced(node: &mut NodeContext, header: &CommonHeader, mut body: AriadnePacketBody) -> Processed {
    let drop = |reason| Processed { outcome: ProcessOutcome::Drop(reason), matched: None };
    let format = node.data_format;
    let pointer = header.pointer as usize;
    if pointer >= format.slots || body.slots != format.slots || body.bytes.len() != format.body_len() {
        return drop(DropReason::Malformed);
    }
    let start = pointer * ELEMENT_LEN;
    let prefix: [u8; PATTERN_LEN] = body.bytes[start..start + PATTERN_LEN].try_into().unwrap();

    let candidates = node.table.lookup(&prefix);
    if candidates.is_empty() {
        let reason = if node.table.was_consumed(&prefix) { DropReason::Replay } else { DropReason::BadPattern };
        return drop(reason);
    }
    let mut verified = None;
    for candidate in candidates {
        if let Some(element) = onion::peel_layer(&mut body.bytes, pointer, &candidate.keys) {
            verified = Some((candidate.session, candidate.t(), element));
            break;
        }
    }
    let Some((session, t, element)) = verified else {
        return drop(DropReason::BadMac);
    };
    if node.table.consume(session, t).is_err() {
        return drop(DropReason::Replay);
    }
    let matched = Some((session, t));
    let element = RoutingElement::from_bytes(&element);

    let outcome = if element.next_addr == node.address {
        match unpad_payload(body.payload()) {
            Ok(data) => ProcessOutcome::Deliver(data),
            Err(_) => ProcessOutcome::Drop(DropReason::Malformed),
        }
    } else if element.next_slot as usize >= format.slots {
        ProcessOutcome::Drop(DropReason::Malformed)
    } else {
        ProcessOutcome::Forward(Outgoing {
            next_hop: element.next_addr,
            header: CommonHeader::data(&format, element.next_slot, &mut node.rng),
            body,
        })
    };
    Processed { outcome, matched }
}

/// Keystream bytes hop `keys` strips from the routing vector, restricted to `slot`.
pub fn header_keystream_slice(keys: &TempKeyPair, slot: usize) -> [u8; ELEMENT_LEN] {
    let mut out = [0u8; ELEMENT_LEN];
    crypto::xor_keystream(&keys.enc, ELEMENT_LEN + slot * ELEMENT_LEN, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key_reference::SessionId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        path: PathSpec,
        nodes: Vec<NodeContext>,
        sessions: Vec<SessionId>,
    }

    fn fixture(hops: usize, window: usize, rng: &mut ChaCha20Rng) -> Fixture {
        let mut path = Vec::new();
        let mut nodes = Vec::new();
        let mut sessions = Vec::new();
        for i in 0..hops {
            let address = Address([0xfd, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, i as u8 + 1]);
            let key = MasterKey::random(rng);
            let mut node = NodeContext::new(address, Pattern::default(), i as u64);
            sessions.push(node.table.register_session(key.clone(), Pattern::default(), window).unwrap());
            nodes.push(node);
            path.push(PathHop { address, key });
        }
        Fixture { path: PathSpec::new(path), nodes, sessions }
    }

    /// Walks a packet along the fixture, returning every outcome.
    fn walk(f: &mut Fixture, pkt: Outgoing) -> Vec<ProcessOutcome> {
        let mut outcomes = Vec::new();
        let mut current = pkt;
        loop {
            let idx = f.nodes.iter().position(|n| n.address == current.next_hop).unwrap();
            let out = process_packet(&mut f.nodes[idx], &current.header, current.body.clone());
            outcomes.push(out.clone());
            match out {
                ProcessOutcome::Forward(next) => current = next,
                _ => return outcomes,
            }
        }
    }

    #[test]
    fn default_payload_length() {
        assert_eq!(PacketFormat::DATA.payload_len, 1500 - 40 - 188);
        assert_eq!(PacketFormat::DATA.body_len(), 180 + 1272);
        assert_eq!(PacketFormat::SETUP.payload_len, 1500 - 40 - 220);
    }

    #[test]
    fn padding() {
        let mut r = ChaCha20Rng::seed_from_u64(1);
        let empty = pad_payload(&[], 1272, &mut r).unwrap();
        assert_eq!(empty.len(), 1272);
        assert_eq!(&empty[..2], &[0, 0]);
        assert_eq!(unpad_payload(&empty).unwrap(), Vec::<u8>::new());
        for len in 0..=1270 {
            let mut d = vec![0u8; len];
            r.fill_bytes(&mut d);
            assert_eq!(unpad_payload(&pad_payload(&d, 1272, &mut r).unwrap()).unwrap(), d);
        }
        assert_eq!(
            pad_payload(&[0; 1271], 1272, &mut r),
            Err(Error::PayloadTooLong { len: 1271, max: 1270 })
        );
        let mut bad = empty;
        bad[..2].copy_from_slice(&1271u16.to_be_bytes());
        assert!(matches!(unpad_payload(&bad), Err(Error::Malformed(_))));
    }

    #[test]
    fn header_round_trip() {
        let mut r = ChaCha20Rng::seed_from_u64(2);
        let h = CommonHeader::data(&PacketFormat::DATA, 3, &mut r);
        assert_eq!(CommonHeader::from_bytes(&h.to_bytes()), h);
        assert_eq!(h.extension_len(), 188);
        assert_eq!(h.segments_left, 0);
    }

    #[test]
    fn direct_delivery() {
        let mut r = ChaCha20Rng::seed_from_u64(3);
        let mut f = fixture(1, 4, &mut r);
        let pkt = create_packet(&PacketFormat::DATA, &f.path, 0, &Pattern::default(), b"hello", &mut r).unwrap();
        assert_eq!(walk(&mut f, pkt), vec![ProcessOutcome::Deliver(b"hello".to_vec())]);
    }

    #[test]
    fn every_path_length_delivers() {
        let mut r = ChaCha20Rng::seed_from_u64(4);
        for hops in 1..=5 {
            let mut f = fixture(hops, 8, &mut r);
            for t in 0..8 {
                let mut payload = vec![0u8; (r.next_u32() % 1271) as usize];
                r.fill_bytes(&mut payload);
                let pkt = create_packet(&PacketFormat::DATA, &f.path, t, &Pattern::default(), &payload, &mut r).unwrap();
                let outcomes = walk(&mut f, pkt);
                assert_eq!(outcomes.len(), hops);
                for (i, o) in outcomes[..hops - 1].iter().enumerate() {
                    match o {
                        ProcessOutcome::Forward(next) => assert_eq!(next.next_hop, f.path.hops[i + 1].address),
                        other => panic!("hop {i}: {other:?}"),
                    }
                }
                assert_eq!(outcomes[hops - 1], ProcessOutcome::Deliver(payload));
            }
        }
    }

    #[test]
    fn first_hop_forwards_to_successor_slot() {
        let mut r = ChaCha20Rng::seed_from_u64(5);
        let mut f = fixture(3, 4, &mut r);
        let pkt = create_packet(&PacketFormat::DATA, &f.path, 2, &Pattern::default(), b"x", &mut r).unwrap();
        let keys: Vec<_> = f.path.hops.iter().map(|h| derive_temp_keys(&h.key, 2)).collect();
        let first_pointer = pkt.header.pointer as usize;
        // the encrypted pattern at p_1 is pi encrypted under hop 1's key
        assert_eq!(
            pkt.body.read_slot(first_pointer).unwrap()[..3],
            crypto::encrypt_pattern(&keys[0].enc, &Pattern::default())
        );
        let out = process_packet(&mut f.nodes[0], &pkt.header, pkt.body);
        let ProcessOutcome::Forward(next) = out else { panic!("{out:?}") };
        assert_eq!(next.next_hop, f.path.hops[1].address);
        assert_ne!(next.header.pointer as usize, first_pointer);
        assert_eq!(
            next.body.read_slot(next.header.pointer as usize).unwrap()[..3],
            crypto::encrypt_pattern(&keys[1].enc, &Pattern::default())
        );
    }

    #[test]
    fn consecutive_counters_change_every_pattern_prefix() {
        let mut r = ChaCha20Rng::seed_from_u64(6);
        let f = fixture(5, 4, &mut r);
        let a = create_packet(&PacketFormat::DATA, &f.path, 0, &Pattern::default(), b"p", &mut r).unwrap();
        let b = create_packet(&PacketFormat::DATA, &f.path, 1, &Pattern::default(), b"p", &mut r).unwrap();
        for slot in 0..5 {
            assert_ne!(a.body.read_slot(slot).unwrap()[..3], b.body.read_slot(slot).unwrap()[..3]);
        }
    }

    #[test]
    fn layer_blinding_identity() {
        let mut r = ChaCha20Rng::seed_from_u64(7);
        let mut f = fixture(4, 4, &mut r);
        let t = 1;
        let mut pkt = create_packet(&PacketFormat::DATA, &f.path, t, &Pattern::default(), b"blind", &mut r).unwrap();
        for i in 0..3 {
            let keys = derive_temp_keys(&f.path.hops[i].key, t);
            let slot = pkt.header.pointer as usize;
            let mut plain = pkt.body.read_slot(slot).unwrap();
            crypto::xor_keystream(&keys.enc, 0, &mut plain);
            let star = RoutingElement::from_bytes(&plain).star();
            let ProcessOutcome::Forward(next) = process_packet(&mut f.nodes[i], &pkt.header, pkt.body) else {
                panic!("hop {i} dropped");
            };
            let ks = header_keystream_slice(&keys, slot);
            let expected: Vec<u8> = star.iter().zip(ks).map(|(a, b)| a ^ b).collect();
            assert_eq!(next.body.read_slot(slot).unwrap().to_vec(), expected);
            pkt = next;
        }
    }

    #[test]
    fn tampering_is_dropped_at_next_hop() {
        let mut r = ChaCha20Rng::seed_from_u64(8);
        let mut f = fixture(3, 256, &mut r);
        let len = PacketFormat::DATA.body_len() * 8;
        for t in 0..128u64 {
            let pkt = create_packet(&PacketFormat::DATA, &f.path, t, &Pattern::default(), b"garbage", &mut r).unwrap();
            let ProcessOutcome::Forward(mut next) = process_packet(&mut f.nodes[0], &pkt.header, pkt.body) else {
                panic!()
            };
            let bit = (r.next_u32() as usize) % len;
            next.body.as_bytes_mut()[bit / 8] ^= 1 << (bit % 8);
            let out = process_packet(&mut f.nodes[1], &next.header, next.body);
            assert!(
                matches!(out, ProcessOutcome::Drop(DropReason::BadMac | DropReason::BadPattern)),
                "bit {bit}: {out:?}"
            );
        }
    }

    #[test]
    fn replay_is_dropped() {
        let mut r = ChaCha20Rng::seed_from_u64(9);
        let mut f = fixture(2, 4, &mut r);
        let pkt = create_packet(&PacketFormat::DATA, &f.path, 0, &Pattern::default(), b"once", &mut r).unwrap();
        assert!(!process_packet(&mut f.nodes[0], &pkt.header, pkt.body.clone()).is_drop());
        assert_eq!(
            process_packet(&mut f.nodes[0], &pkt.header, pkt.body),
            ProcessOutcome::Drop(DropReason::Replay)
        );
        let _ = f.sessions;
    }

    #[test]
    fn out_of_window_and_unknown_are_dropped() {
        let mut r = ChaCha20Rng::seed_from_u64(10);
        let mut f = fixture(2, 4, &mut r);
        let pkt = create_packet(&PacketFormat::DATA, &f.path, 4, &Pattern::default(), b"late", &mut r).unwrap();
        assert_eq!(
            process_packet(&mut f.nodes[0], &pkt.header, pkt.body),
            ProcessOutcome::Drop(DropReason::BadPattern)
        );
        let mut bad = create_packet(&PacketFormat::DATA, &f.path, 0, &Pattern::default(), b"", &mut r).unwrap();
        bad.header.pointer = 5;
        assert_eq!(
            process_packet(&mut f.nodes[0], &bad.header, bad.body),
            ProcessOutcome::Drop(DropReason::Malformed)
        );
    }

    #[test]
    fn path_errors() {
        let mut r = ChaCha20Rng::seed_from_u64(11);
        let f = fixture(5, 1, &mut r);
        let mut long = f.path.clone();
        long.hops.push(long.hops[0].clone());
        assert_eq!(
            create_packet(&PacketFormat::DATA, &long, 0, &Pattern::default(), b"", &mut r),
            Err(Error::PathTooLong { hops: 6, max: 5 })
        );
        assert_eq!(
            create_packet(&PacketFormat::DATA, &PathSpec::new(vec![]), 0, &Pattern::default(), b"", &mut r),
            Err(Error::EmptyPath)
        );
        assert!(matches!(
            create_packet(&PacketFormat::DATA, &f.path, 0, &Pattern::default(), &[0; 1271], &mut r),
            Err(Error::PayloadTooLong { .. })
        ));
    }
}
