//! Deterministic test vectors for the primitives and both frame kinds.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::address::Address;
use crate::crypto::{
    self, derive_temp_keys, dh_shared, encrypt_pattern, GroupScalar, MasterKey, Pattern,
};
use crate::data_protocol::{assemble_packet, pad_payload, CommonHeader, PacketFormat, ROUTING_TYPE_DATA, ROUTING_TYPE_SETUP};
use crate::error::Result;
use crate::routing_vector::{RoutingVector, SlotAssignment};
use crate::setup_protocol::{assemble_setup_packet, setup_extension_len, setup_keygen_with, SetupPacketBody};
use crate::wire::{self, data_extension_len, Frame, FramePacket, DEFAULT_HOP_LIMIT};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vector {
    pub name: String,
    pub hex: String,
}

fn v(name: impl Into<String>, bytes: &[u8]) -> Vector {
    Vector { name: name.into(), hex: hex::encode(bytes) }
}

fn counting(start: u8, len: usize) -> Vec<u8> {
    (0..len).map(|i| start.wrapping_add(i as u8)).collect()
}

pub fn golden_master_key() -> MasterKey {
    MasterKey::from_bytes(counting(0, 32).try_into().unwrap())
}

fn addr(last: u8) -> Address {
    let mut a = [0u8; 16];
    a[0] = 0xfd;
    a[15] = last;
    Address(a)
}

fn scalar(seed: u8) -> GroupScalar {
    GroupScalar::from_bytes_mod_order(counting(seed, 32).try_into().unwrap())
}

/// Every golden vector, in a fixed order.
pub fn golden_vectors() -> Result<Vec<Vector>> {
    let mut out = Vec::new();
    let master = golden_master_key();
    let pattern = Pattern::default();
    for t in [0u64, 1, 7] {
        let k = derive_temp_keys(&master, t);
        out.push(v(format!("temp_enc_t{t}"), &k.enc));
        out.push(v(format!("temp_mac_t{t}"), &k.mac));
        out.push(v(format!("keystream64_t{t}"), &crypto::keystream(&k.enc, 64)?));
        out.push(v(format!("mac_t{t}"), &crypto::mac(&k.mac, b"ariadne").0));
        out.push(v(format!("pattern_t{t}"), &encrypt_pattern(&k.enc, &pattern)));
    }
    let (x, y) = (scalar(1), scalar(2));
    out.push(v("dh_public_x", &x.public().0));
    out.push(v("dh_shared_xy", dh_shared(&y.public(), &x)?.as_bytes()));

    // data frame: 3 hops, slots (3, 0, 4)
    let format = PacketFormat::DATA;
    let addrs = [addr(1), addr(2), addr(3)];
    let keys: Vec<_> = (0..3u8)
        .map(|i| derive_temp_keys(&MasterKey::from_bytes(counting(i * 32, 32).try_into().unwrap()), 5))
        .collect();
    let assignment = SlotAssignment::new(vec![3, 0, 4], format.slots)?;
    let initial = RoutingVector::from_bytes(counting(0x80, format.vector_len()))?;
    let padded = pad_payload(b"golden payload", format.payload_len, &mut ChaCha20Rng::seed_from_u64(0))?;
    let body = assemble_packet(&format, &addrs, &keys, &pattern, &assignment, initial, padded)?;
    let header = CommonHeader {
        next_header: 59,
        hdr_ext_len: ((data_extension_len(&format) - 8) / 4) as u8,
        routing_type: ROUTING_TYPE_DATA,
        segments_left: 0,
        pointer: 3,
        reserved: [0; 3],
    };
    let frame = Frame {
        src: addr(0),
        dst: addrs[0],
        hop_limit: DEFAULT_HOP_LIMIT,
        packet: FramePacket::Data { header, body },
    };
    out.push(v("data_frame", &wire::encode(&frame)?));

    // setup frame: 2 hops, slots (1, 2)
    let format = PacketFormat::SETUP;
    let statics = [scalar(10), scalar(20)];
    let setup_keys = setup_keygen_with(&[statics[0].public(), statics[1].public()], scalar(30))?;
    let temps: Vec<_> = setup_keys.hops.iter().map(|h| h.temp.clone()).collect();
    let assignment = SlotAssignment::new(vec![1, 2], format.slots)?;
    let initial = RoutingVector::from_bytes(counting(0x40, format.vector_len()))?;
    let padded = pad_payload(b"setup", format.payload_len, &mut ChaCha20Rng::seed_from_u64(1))?;
    let bytes = assemble_setup_packet(&format, &addrs[..2], &temps, &assignment, &[[1, 2, 3], [4, 5, 6]], initial, padded)?;
    let header = CommonHeader {
        next_header: 59,
        hdr_ext_len: ((setup_extension_len(&format) - 8) / 4) as u8,
        routing_type: ROUTING_TYPE_SETUP,
        segments_left: 0,
        pointer: 1,
        reserved: [0; 3],
    };
    let frame = Frame {
        src: addr(0),
        dst: addrs[0],
        hop_limit: DEFAULT_HOP_LIMIT,
        packet: FramePacket::Setup { header, body: SetupPacketBody::new(setup_keys.ephemeral, bytes, &format)? },
    };
    out.push(v("setup_frame", &wire::encode(&frame)?));
    for (i, s) in statics.iter().enumerate() {
        out.push(v(format!("setup_static_public_{i}"), &s.public().0));
    }
    Ok(out)
}

/// Static secrets of the golden setup frame's hops.
pub fn golden_setup_secrets() -> [GroupScalar; 2] {
    [scalar(10), scalar(20)]
}

/// Master keys of the golden data frame's hops (used with `t = 5`).
pub fn golden_data_keys() -> [MasterKey; 3] {
    [0u8, 1, 2].map(|i| MasterKey::from_bytes(counting(i * 32, 32).try_into().unwrap()))
}
