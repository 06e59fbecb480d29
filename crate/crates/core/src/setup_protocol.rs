//! Setup onion: the source agrees a master key with every hop of a path.
//!
//! Each hop derives `k_i = alpha_i^{x_i}` from the group element carried in
//! the packet, uses the temporary keys for `t = 0` to check and strip its
//! layer exactly as in the data protocol, re-blinds `alpha` and installs
//! `k_i` in its pattern table so that later data packets can reference it.

use rand::{CryptoRng, RngCore};

use crate::address::Address;
use crate::crypto::{
    blind, blind_factor, derive_temp_keys, dh_keygen, dh_shared, GroupElement, GroupScalar, MacTag, MasterKey,
    Pattern, TempKeyPair, GROUP_ELEMENT_LEN, MAC_LEN, PATTERN_LEN,
};
use crate::data_protocol::{
    check_path_len, pad_payload, unpad_payload, CommonHeader, DropReason, Outgoing, PacketFormat, PathHop,
    PathSpec, ProcessOutcome, COMMON_HEADER_LEN, ROUTING_TYPE_SETUP,
};
use crate::error::{Error, Result};
use crate::key_reference::SessionId;
use crate::node::NodeContext;
use crate::onion;
use crate::routing_vector::{self, fill_vector, sample_slot_assignment, RoutingVector, SlotAssignment, ELEMENT_LEN};

/// Length of the setup extension header: common header, alpha, vector.
pub fn setup_extension_len(format: &PacketFormat) -> usize {
    COMMON_HEADER_LEN + GROUP_ELEMENT_LEN + format.vector_len()
}

/// `next_addr(16) | next_slot(1) | pad(3) | mac(16)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SetupRoutingElement {
    pub next_addr: Address,
    pub next_slot: u8,
    pub pad: [u8; 3],
    pub mac: MacTag,
}

impl SetupRoutingElement {
    pub fn to_bytes(&self) -> [u8; ELEMENT_LEN] {
        let mut out = [0u8; ELEMENT_LEN];
        out[..16].copy_from_slice(self.next_addr.as_bytes());
        out[16] = self.next_slot;
        out[17..20].copy_from_slice(&self.pad);
        out[20..].copy_from_slice(&self.mac.0);
        out
    }

    pub fn from_bytes(b: &[u8; ELEMENT_LEN]) -> Self {
        let mut mac = [0u8; MAC_LEN];
        mac.copy_from_slice(&b[20..]);
        SetupRoutingElement {
            next_addr: Address::from_slice(&b[..16]).expect("16 bytes"),
            next_slot: b[16],
            pad: [b[17], b[18], b[19]],
            mac: MacTag(mac),
        }
    }

    pub fn star(&self) -> [u8; ELEMENT_LEN] {
        routing_vector::zero_mac(self.to_bytes())
    }
}

/// `alpha` followed by the MAC'd content (vector and padded payload).
#[derive(Clone, PartialEq, Eq)]
pub struct SetupPacketBody {
    pub alpha: GroupElement,
    bytes: Vec<u8>,
    slots: usize,
}

impl SetupPacketBody {
    pub fn new(alpha: GroupElement, bytes: Vec<u8>, format: &PacketFormat) -> Result<Self> {
        if bytes.len() != format.body_len() {
            return Err(Error::LengthMismatch("setup packet body"));
        }
        Ok(SetupPacketBody { alpha, bytes, slots: format.slots })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn as_bytes_mut(&mut self) -> &mut [u8] {
        &mut self.bytes
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

impl std::fmt::Debug for SetupPacketBody {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SetupPacketBody({:?}, {} bytes)", self.alpha, self.bytes.len())
    }
}

/// Data-session parameters carried to the destination.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionParams {
    pub pattern: Pattern,
    pub window: u16,
    pub nonce: [u8; 16],
}

/// Setup payload: session parameters, the source's ephemeral public key and
/// optional application data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SetupPayload {
    pub params: SessionParams,
    pub ephemeral: GroupElement,
    pub data: Vec<u8>,
}

impl SetupPayload {
    const FIXED: usize = PATTERN_LEN + 2 + 16 + GROUP_ELEMENT_LEN;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::FIXED + self.data.len());
        out.extend_from_slice(&self.params.pattern.0);
        out.extend_from_slice(&self.params.window.to_be_bytes());
        out.extend_from_slice(&self.params.nonce);
        out.extend_from_slice(&self.ephemeral.0);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < Self::FIXED {
            return Err(Error::Malformed("setup payload too short"));
        }
        let pattern = Pattern(b[..3].try_into().unwrap());
        let window = u16::from_be_bytes([b[3], b[4]]);
        let nonce = b[5..21].try_into().unwrap();
        let ephemeral = GroupElement(b[21..53].try_into().unwrap());
        Ok(SetupPayload {
            params: SessionParams { pattern, window, nonce },
            ephemeral,
            data: b[Self::FIXED..].to_vec(),
        })
    }
}

/// Source-side key material for one hop.
#[derive(Clone, Debug)]
pub struct SetupHopKeys {
    pub alpha: GroupElement,
    pub master_key: MasterKey,
    pub blind: GroupScalar,
    pub temp: TempKeyPair,
}

#[derive(Clone, Debug)]
pub struct SetupKeys {
    /// `y_t = g^{x_t}`, which is also `alpha_1`.
    pub ephemeral: GroupElement,
    pub hops: Vec<SetupHopKeys>,
}

impl SetupKeys {
    pub fn master_keys(&self) -> Vec<MasterKey> {
        self.hops.iter().map(|h| h.master_key.clone()).collect()
    }
}

/// Derives the alpha chain and master keys for a path from a fresh ephemeral key.
pub fn setup_keygen<R: RngCore + CryptoRng>(path_pubkeys: &[GroupElement], rng: &mut R) -> Result<SetupKeys> {
    let (x_t, _) = dh_keygen(rng);
    setup_keygen_with(path_pubkeys, x_t)
}

/// Same as [`setup_keygen`] with a caller-chosen ephemeral secret.
pub fn setup_keygen_with(path_pubkeys: &[GroupElement], x_t: GroupScalar) -> Result<SetupKeys> {
    if path_pubkeys.is_empty() {
        return Err(Error::EmptyPath);
    }
    let ephemeral = x_t.public();
    let mut exponent = x_t;
    let mut alpha = ephemeral;
    let mut hops = Vec::with_capacity(path_pubkeys.len());
    for y in path_pubkeys {
        let master_key = dh_shared(y, &exponent)?;
        let b = blind_factor(&alpha, &master_key);
        let temp = derive_temp_keys(&master_key, 0);
        let next_alpha = blind(&alpha, &b)?;
        exponent = exponent.mul(&b);
        hops.push(SetupHopKeys { alpha, master_key, blind: b, temp });
        alpha = next_alpha;
    }
    Ok(SetupKeys { ephemeral, hops })
}

/// Builds a setup packet along `path`; returns it with the source-side keys.
pub fn create_setup_packet<R: RngCore + CryptoRng>(
    format: &PacketFormat,
    path: &[(Address, GroupElement)],
    params: &SessionParams,
    data: &[u8],
    rng: &mut R,
) -> Result<(Outgoing<SetupPacketBody>, SetupKeys)> {
    check_path_len(path.len(), format)?;
    let pubkeys: Vec<GroupElement> = path.iter().map(|(_, y)| *y).collect();
    let addrs: Vec<Address> = path.iter().map(|(a, _)| *a).collect();
    let keys = setup_keygen(&pubkeys, rng)?;
    let payload = SetupPayload { params: params.clone(), ephemeral: keys.ephemeral, data: data.to_vec() };
    let padded = pad_payload(&payload.to_bytes(), format.payload_len, rng)?;
    let assignment = sample_slot_assignment(path.len(), format.slots, rng)?;
    let pads: Vec<[u8; 3]> = (0..path.len())
        .map(|_| {
            let mut p = [0u8; 3];
            rng.fill_bytes(&mut p);
            p
        })
        .collect();
    let initial = RoutingVector::random(format.slots, rng);
    let temps: Vec<TempKeyPair> = keys.hops.iter().map(|h| h.temp.clone()).collect();
    let bytes = assemble_setup_packet(format, &addrs, &temps, &assignment, &pads, initial, padded)?;
    let body = SetupPacketBody::new(keys.ephemeral, bytes, format)?;
    let header = CommonHeader::new(
        ROUTING_TYPE_SETUP,
        setup_extension_len(format),
        assignment.positions()[0],
        rng,
    );
    Ok((Outgoing { next_hop: addrs[0], header, body }, keys))
}

/// Deterministic part of setup packet creation; returns the MAC'd content.
pub fn assemble_setup_packet(
    format: &PacketFormat,
    hop_addrs: &[Address],
    keys: &[TempKeyPair],
    assignment: &SlotAssignment,
    pads: &[[u8; 3]],
    initial: RoutingVector,
    padded_payload: Vec<u8>,
) -> Result<Vec<u8>> {
    check_path_len(hop_addrs.len(), format)?;
    if keys.len() != hop_addrs.len() || pads.len() != hop_addrs.len() || assignment.len() != hop_addrs.len() {
        return Err(Error::LengthMismatch("setup inputs"));
    }
    if initial.slots() != format.slots || padded_payload.len() != format.payload_len {
        return Err(Error::LengthMismatch("vector or payload size"));
    }
    let stars: Vec<[u8; ELEMENT_LEN]> = (0..hop_addrs.len())
        .map(|i| {
            SetupRoutingElement {
                next_addr: routing_vector::successor_addr(hop_addrs, i),
                next_slot: assignment.successor(i),
                pad: pads[i],
                mac: MacTag::default(),
            }
            .star()
        })
        .collect();
    let enc: Vec<&[u8; 32]> = keys.iter().map(|k| &k.enc).collect();
    let mut x = fill_vector(initial, assignment, &stars, &enc)?.into_bytes();
    x.extend_from_slice(&padded_payload);
    onion::wrap_layers(&mut x, assignment, &stars, keys);
    Ok(x)
}

/// A master key installed by a setup packet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Installed {
    pub session: SessionId,
    /// The same key was already registered; setup packets carry no replay guard.
    pub duplicate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetupProcessed {
    pub outcome: ProcessOutcome<SetupPacketBody>,
    pub installed: Option<Installed>,
}

pub fn process_setup_packet(node: &mut NodeContext, header: &CommonHeader, mut body: SetupPacketBody) -> SetupProcessed {
    let drop = |reason| SetupProcessed { outcome: ProcessOutcome::Drop(reason), installed: None };
    let format = node.setup_format;
    let pointer = header.pointer as usize;
    if pointer >= format.slots || body.slots != format.slots || body.bytes.len() != format.body_len() {
        return drop(DropReason::Malformed);
    }
    let Some(secret) = node.static_secret() else {
        return drop(DropReason::Malformed);
    };
    let Ok(master_key) = dh_shared(&body.alpha, secret) else {
        return drop(DropReason::Malformed);
    };
    let temp = derive_temp_keys(&master_key, 0);
    let Some(element) = onion::peel_layer(&mut body.bytes, pointer, &temp) else {
        return drop(DropReason::BadMac);
    };
    let b = blind_factor(&body.alpha, &master_key);
    let Ok(next_alpha) = blind(&body.alpha, &b) else {
        return drop(DropReason::Malformed);
    };
    let element = SetupRoutingElement::from_bytes(&element);

    let duplicate = node.table.find_session(&master_key).is_some();
    let pattern = node.pattern;
    let window = node.window;
    let session = match node.table.register_session(master_key, pattern, window) {
        Ok(id) => id,
        Err(_) => return drop(DropReason::Capacity),
    };
    let installed = Some(Installed { session, duplicate });

    let outcome = if element.next_addr == node.address {
        match unpad_payload(body.payload()) {
            Ok(data) => ProcessOutcome::Deliver(data),
            Err(_) => ProcessOutcome::Drop(DropReason::Malformed),
        }
    } else if element.next_slot as usize >= format.slots {
        ProcessOutcome::Drop(DropReason::Malformed)
    } else {
        body.alpha = next_alpha;
        ProcessOutcome::Forward(Outgoing {
            next_hop: element.next_addr,
            header: CommonHeader::new(ROUTING_TYPE_SETUP, setup_extension_len(&format), element.next_slot, &mut node.rng),
            body,
        })
    };
    SetupProcessed { outcome, installed }
}

/// Data path over the hops of a completed setup.
pub fn data_path(addrs: &[Address], keys: &SetupKeys) -> PathSpec {
    PathSpec::new(
        addrs
            .iter()
            .zip(&keys.hops)
            .map(|(a, h)| PathHop { address: *a, key: h.master_key.clone() })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_protocol::{create_packet, process_packet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn nodes(n: usize, rng: &mut ChaCha20Rng) -> (Vec<NodeContext>, Vec<(Address, GroupElement)>) {
        let mut ns = Vec::new();
        let mut path = Vec::new();
        for i in 0..n {
            let addr = Address([0xfd, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, i as u8]);
            let node = NodeContext::new(addr, Pattern::default(), 100 + i as u64)
                .with_static_key(GroupScalar::random(rng))
                .with_window(8);
            path.push((addr, node.static_public().unwrap()));
            ns.push(node);
        }
        (ns, path)
    }

    fn params() -> SessionParams {
        SessionParams { pattern: Pattern::default(), window: 8, nonce: [7; 16] }
    }

    fn run(ns: &mut [NodeContext], pkt: Outgoing<SetupPacketBody>) -> Vec<SetupProcessed> {
        let mut out = Vec::new();
        let mut current = pkt;
        loop {
            let idx = ns.iter().position(|n| n.address == current.next_hop).unwrap();
            let res = process_setup_packet(&mut ns[idx], &current.header, current.body.clone());
            out.push(res.clone());
            match res.outcome {
                ProcessOutcome::Forward(next) => {
                    assert_ne!(next.body.alpha, current.body.alpha);
                    current = next;
                }
                _ => return out,
            }
        }
    }

    #[test]
    fn extension_length() {
        assert_eq!(setup_extension_len(&PacketFormat::SETUP), 220);
    }

    #[test]
    fn single_hop_chain_base() {
        let mut r = ChaCha20Rng::seed_from_u64(1);
        let x_t = GroupScalar::random(&mut r);
        let (x1, y1) = dh_keygen(&mut r);
        let keys = setup_keygen_with(&[y1], x_t.clone()).unwrap();
        assert_eq!(keys.hops[0].alpha, x_t.public());
        assert_eq!(keys.hops[0].master_key, dh_shared(&y1, &x_t).unwrap());
        assert_eq!(keys.hops[0].master_key, dh_shared(&x_t.public(), &x1).unwrap());
    }

    #[test]
    fn setup_installs_matching_keys_and_delivers() {
        let mut r = ChaCha20Rng::seed_from_u64(2);
        for hops in 1..=5 {
            let (mut ns, path) = nodes(hops, &mut r);
            let (pkt, keys) = create_setup_packet(&PacketFormat::SETUP, &path, &params(), b"hi", &mut r).unwrap();
            let results = run(&mut ns, pkt);
            assert_eq!(results.len(), hops);
            let ProcessOutcome::Deliver(payload) = &results[hops - 1].outcome else { panic!() };
            let payload = SetupPayload::from_bytes(payload).unwrap();
            assert_eq!(payload.params, params());
            assert_eq!(payload.ephemeral, keys.ephemeral);
            assert_eq!(payload.data, b"hi");
            for (i, res) in results.iter().enumerate() {
                let inst = res.installed.unwrap();
                assert!(!inst.duplicate);
                let rec = ns[i].table.session(inst.session).unwrap();
                assert_eq!(rec.master_key, keys.hops[i].master_key);
            }

            // data over the installed keys
            let addrs: Vec<Address> = path.iter().map(|p| p.0).collect();
            let dpath = data_path(&addrs, &keys);
            for t in 0..8 {
                let mut current = create_packet(&PacketFormat::DATA, &dpath, t, &Pattern::default(), b"d", &mut r).unwrap();
                loop {
                    let idx = ns.iter().position(|n| n.address == current.next_hop).unwrap();
                    match process_packet(&mut ns[idx], &current.header, current.body) {
                        ProcessOutcome::Forward(next) => current = next,
                        ProcessOutcome::Deliver(d) => {
                            assert_eq!(d, b"d");
                            break;
                        }
                        ProcessOutcome::Drop(reason) => panic!("t={t} {reason:?}"),
                    }
                }
            }
        }
    }

    #[test]
    fn alpha_chain_matches_product_of_blinds() {
        let mut r = ChaCha20Rng::seed_from_u64(3);
        let (mut ns, path) = nodes(5, &mut r);
        let x_t = GroupScalar::random(&mut r);
        let pubkeys: Vec<_> = path.iter().map(|p| p.1).collect();
        let keys = setup_keygen_with(&pubkeys, x_t.clone()).unwrap();
        let mut exponent = x_t;
        for (i, hop) in keys.hops.iter().enumerate() {
            assert_eq!(hop.alpha, exponent.public());
            let node_side = dh_shared(&hop.alpha, ns[i].static_secret().unwrap()).unwrap();
            assert_eq!(node_side, hop.master_key);
            exponent = exponent.mul(&hop.blind);
        }
        let _ = &mut ns;
    }

    #[test]
    fn bit_flips_are_dropped() {
        let mut r = ChaCha20Rng::seed_from_u64(4);
        let (mut ns, path) = nodes(3, &mut r);
        let bits = PacketFormat::SETUP.body_len() * 8;
        for _ in 0..64 {
            let (pkt, _) = create_setup_packet(&PacketFormat::SETUP, &path, &params(), b"", &mut r).unwrap();
            let ProcessOutcome::Forward(mut next) = process_setup_packet(&mut ns[0], &pkt.header, pkt.body).outcome
            else {
                panic!()
            };
            let bit = r.next_u32() as usize % bits;
            next.body.as_bytes_mut()[bit / 8] ^= 1 << (bit % 8);
            let res = process_setup_packet(&mut ns[1], &next.header, next.body);
            assert_eq!(res.outcome, ProcessOutcome::Drop(DropReason::BadMac));
            assert!(res.installed.is_none());
        }
    }

    #[test]
    fn wrong_private_key_is_dropped() {
        let mut r = ChaCha20Rng::seed_from_u64(5);
        let (mut ns, path) = nodes(2, &mut r);
        ns[0].set_static_key(GroupScalar::random(&mut r));
        let (pkt, _) = create_setup_packet(&PacketFormat::SETUP, &path, &params(), b"", &mut r).unwrap();
        assert_eq!(
            process_setup_packet(&mut ns[0], &pkt.header, pkt.body).outcome,
            ProcessOutcome::Drop(DropReason::BadMac)
        );
    }

    #[test]
    fn replayed_setup_installs_a_flagged_duplicate() {
        let mut r = ChaCha20Rng::seed_from_u64(6);
        let (mut ns, path) = nodes(2, &mut r);
        let (pkt, _) = create_setup_packet(&PacketFormat::SETUP, &path, &params(), b"", &mut r).unwrap();
        let first = process_setup_packet(&mut ns[0], &pkt.header, pkt.body.clone());
        let second = process_setup_packet(&mut ns[0], &pkt.header, pkt.body);
        assert!(!first.installed.unwrap().duplicate);
        assert!(second.installed.unwrap().duplicate);
        assert!(matches!(second.outcome, ProcessOutcome::Forward(_)));
    }

    #[test]
    fn invalid_alpha_is_malformed() {
        let mut r = ChaCha20Rng::seed_from_u64(7);
        let (mut ns, path) = nodes(1, &mut r);
        let (mut pkt, _) = create_setup_packet(&PacketFormat::SETUP, &path, &params(), b"", &mut r).unwrap();
        pkt.body.alpha = GroupElement([0; 32]);
        assert_eq!(
            process_setup_packet(&mut ns[0], &pkt.header, pkt.body).outcome,
            ProcessOutcome::Drop(DropReason::Malformed)
        );
    }

    #[test]
    fn element_round_trip() {
        let e = SetupRoutingElement {
            next_addr: Address([9; 16]),
            next_slot: 4,
            pad: [1, 2, 3],
            mac: MacTag([5; 16]),
        };
        assert_eq!(SetupRoutingElement::from_bytes(&e.to_bytes()), e);
        assert_eq!(e.star()[20..], [0; 16]);
        assert_eq!(e.star()[..20], e.to_bytes()[..20]);
    }
}
