//! Layer wrapping and peeling shared by data and setup packets.
//!
//! `x` is the MAC'd packet content: the routing vector followed by the
//! padded payload. Keystream byte `ELEMENT_LEN + j` covers byte `j` of `x`,
//! and bytes `[0, ELEMENT_LEN)` encrypt the hop's own element.

use crate::crypto::{self, MacTag, TempKeyPair, MAC_LEN};
use crate::routing_vector::{self, SlotAssignment, ELEMENT_LEN, MAC_OFFSET};

/// Backward pass over the hops, destination first. `stars[i]` must be hop
/// `i`'s element with a zeroed MAC, and `x` must start with the filler.
pub(crate) fn wrap_layers(
    x: &mut [u8],
    assignment: &SlotAssignment,
    stars: &[[u8; ELEMENT_LEN]],
    keys: &[TempKeyPair],
) {
    for i in (0..assignment.len()).rev() {
        crypto::xor_keystream(&keys[i].enc, ELEMENT_LEN, x);
        let tag = crypto::mac(&keys[i].mac, x);
        let mut element = stars[i];
        element[MAC_OFFSET..].copy_from_slice(&tag.0);
        crypto::xor_keystream(&keys[i].enc, 0, &mut element);
        routing_vector::write_slot(x, assignment.positions()[i] as usize, &element)
            .expect("assignment validated against the vector");
    }
}

/// Verifies and removes one layer. On success returns the decrypted element
/// and leaves `x` ready for the next hop; on MAC failure `x` is unchanged.
pub(crate) fn peel_layer(x: &mut [u8], pointer: usize, keys: &TempKeyPair) -> Option<[u8; ELEMENT_LEN]> {
    let received = routing_vector::read_slot(x, pointer).ok()?;
    let mut element = received;
    crypto::xor_keystream(&keys.enc, 0, &mut element);
    let mut tag = [0u8; MAC_LEN];
    tag.copy_from_slice(&element[MAC_OFFSET..]);
    let star = routing_vector::zero_mac(element);
    routing_vector::write_slot(x, pointer, &star).ok()?;
    if crypto::mac(&keys.mac, x) != MacTag(tag) {
        routing_vector::write_slot(x, pointer, &received).ok()?;
        return None;
    }
    crypto::xor_keystream(&keys.enc, ELEMENT_LEN, x);
    Some(element)
}
