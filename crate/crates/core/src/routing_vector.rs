//! The fixed-size routing information vector.
//!
//! The vector holds `slots` elements of [`ELEMENT_LEN`] bytes. Each hop's
//! element sits at a randomly chosen slot; slots not used by a path keep the
//! random bytes they were initialised with.

use rand::seq::index;
use rand::{CryptoRng, RngCore};

use crate::address::Address;
use crate::crypto::{self, MacTag, Pattern, MAC_LEN, PATTERN_LEN};
use crate::error::{Error, Result};

/// Serialized size of one routing element.
pub const ELEMENT_LEN: usize = 36;
/// Slot count used on the wire.
pub const DEFAULT_SLOTS: usize = 5;
/// Offset of the MAC inside every element (data and setup alike).
pub const MAC_OFFSET: usize = ELEMENT_LEN - MAC_LEN;

/// `pattern | next_addr | next_slot | mac`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoutingElement {
    pub pattern: Pattern,
    pub next_addr: Address,
    pub next_slot: u8,
    pub mac: MacTag,
}

impl RoutingElement {
    pub fn to_bytes(&self) -> [u8; ELEMENT_LEN] {
        let mut out = [0u8; ELEMENT_LEN];
        out[..PATTERN_LEN].copy_from_slice(&self.pattern.0);
        out[PATTERN_LEN..PATTERN_LEN + 16].copy_from_slice(&self.next_addr.0);
        out[PATTERN_LEN + 16] = self.next_slot;
        out[MAC_OFFSET..].copy_from_slice(&self.mac.0);
        out
    }

    pub fn from_bytes(bytes: &[u8; ELEMENT_LEN]) -> Self {
        let mut pattern = [0u8; PATTERN_LEN];
        pattern.copy_from_slice(&bytes[..PATTERN_LEN]);
        let mut mac = [0u8; MAC_LEN];
        mac.copy_from_slice(&bytes[MAC_OFFSET..]);
        RoutingElement {
            pattern: Pattern(pattern),
            next_addr: Address::from_slice(&bytes[PATTERN_LEN..PATTERN_LEN + 16]).unwrap(),
            next_slot: bytes[PATTERN_LEN + 16],
            mac: MacTag(mac),
        }
    }

    /// The element with its MAC field zeroed.
    pub fn star(&self) -> [u8; ELEMENT_LEN] {
        zero_mac(self.to_bytes())
    }
}

pub(crate) fn zero_mac(mut element: [u8; ELEMENT_LEN]) -> [u8; ELEMENT_LEN] {
    element[MAC_OFFSET..].fill(0);
    element
}

#[derive(Clone, PartialEq, Eq)]
pub struct RoutingVector {
    bytes: Vec<u8>,
}

impl RoutingVector {
    pub fn random<R: RngCore + CryptoRng>(slots: usize, rng: &mut R) -> Self {
        let mut bytes = vec![0u8; slots * ELEMENT_LEN];
        rng.fill_bytes(&mut bytes);
        RoutingVector { bytes }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.is_empty() || !bytes.len().is_multiple_of(ELEMENT_LEN) {
            return Err(Error::LengthMismatch("routing vector length"));
        }
        Ok(RoutingVector { bytes })
    }

    pub fn slots(&self) -> usize {
        self.bytes.len() / ELEMENT_LEN
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn read_slot(&self, index: usize) -> Result<[u8; ELEMENT_LEN]> {
        read_slot(&self.bytes, index)
    }

    pub fn splice_slot(mut self, index: usize, element: &[u8; ELEMENT_LEN]) -> Result<Self> {
        write_slot(&mut self.bytes, index, element)?;
        Ok(self)
    }

    pub fn write_slot(&mut self, index: usize, element: &[u8; ELEMENT_LEN]) -> Result<()> {
        write_slot(&mut self.bytes, index, element)
    }
}

impl std::fmt::Debug for RoutingVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RoutingVector({} slots)", self.slots())
    }
}

/// Reads slot `index` out of a byte region that starts with the vector.
pub(crate) fn read_slot(region: &[u8], index: usize) -> Result<[u8; ELEMENT_LEN]> {
    let start = slot_offset(region, index)?;
    Ok(region[start..start + ELEMENT_LEN].try_into().unwrap())
}

pub(crate) fn write_slot(region: &mut [u8], index: usize, element: &[u8; ELEMENT_LEN]) -> Result<()> {
    let start = slot_offset(region, index)?;
    region[start..start + ELEMENT_LEN].copy_from_slice(element);
    Ok(())
}

fn slot_offset(region: &[u8], index: usize) -> Result<usize> {
    let slots = region.len() / ELEMENT_LEN;
    if index >= slots {
        return Err(Error::SlotOutOfRange { index, slots });
    }
    Ok(index * ELEMENT_LEN)
}

/// Slot positions `p_1 .. p_{n+1}` of one packet, pairwise distinct.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotAssignment {
    positions: Vec<u8>,
}

impl SlotAssignment {
    pub fn new(positions: Vec<u8>, slots: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyPath);
        }
        if positions.len() > slots {
            return Err(Error::PathTooLong { hops: positions.len(), max: slots });
        }
        let mut seen = vec![false; slots];
        for &p in &positions {
            let p = p as usize;
            if p >= slots {
                return Err(Error::SlotOutOfRange { index: p, slots });
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::LengthMismatch("slot assignment repeats a slot"));
            }
        }
        Ok(SlotAssignment { positions })
    }

    pub fn positions(&self) -> &[u8] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Slot of hop `i`'s successor; the last hop points at its own slot.
    pub fn successor(&self, i: usize) -> u8 {
        self.positions[(i + 1).min(self.positions.len() - 1)]
    }
}

pub fn sample_slot_assignment<R: RngCore + CryptoRng>(
    n_plus_1: usize,
    slots: usize,
    rng: &mut R,
) -> Result<SlotAssignment> {
    if n_plus_1 == 0 {
        return Err(Error::EmptyPath);
    }
    if n_plus_1 > slots || slots > u8::MAX as usize {
        return Err(Error::PathTooLong { hops: n_plus_1, max: slots.min(u8::MAX as usize) });
    }
    let positions = index::sample(rng, slots, n_plus_1)
        .into_iter()
        .map(|p| p as u8)
        .collect();
    Ok(SlotAssignment { positions })
}

/// Address of hop `i`'s successor; the destination names itself.
pub(crate) fn successor_addr(addrs: &[Address], i: usize) -> Address {
    addrs[(i + 1).min(addrs.len() - 1)]
}

/// Zero-MAC data elements `r*_i` for every hop of a path.
pub fn star_elements(
    assignment: &SlotAssignment,
    hop_addrs: &[Address],
    pattern: &Pattern,
) -> Result<Vec<[u8; ELEMENT_LEN]>> {
    if hop_addrs.len() != assignment.len() {
        return Err(Error::LengthMismatch("addresses vs slot assignment"));
    }
    Ok((0..assignment.len())
        .map(|i| {
            RoutingElement {
                pattern: *pattern,
                next_addr: successor_addr(hop_addrs, i),
                next_slot: assignment.successor(i),
                mac: MacTag::default(),
            }
            .to_bytes()
        })
        .collect())
}

/// Runs the forward filler pass: for each hop in path order, write its zero-MAC
/// element at its slot, then XOR the whole vector with that hop's header
/// keystream (stream bytes `[ELEMENT_LEN, ELEMENT_LEN + len)`).
pub fn fill_vector(
    mut vector: RoutingVector,
    assignment: &SlotAssignment,
    stars: &[[u8; ELEMENT_LEN]],
    enc_keys: &[&[u8; 32]],
) -> Result<RoutingVector> {
    if stars.len() != assignment.len() || enc_keys.len() != assignment.len() {
        return Err(Error::LengthMismatch("filler inputs"));
    }
    for ((&slot, star), enc) in assignment.positions().iter().zip(stars).zip(enc_keys) {
        vector.write_slot(slot as usize, star)?;
        crypto::xor_keystream(enc, ELEMENT_LEN, &mut vector.bytes);
    }
    Ok(vector)
}

/// Builds the filler for a data packet from a fresh random vector.
pub fn build_filler<R: RngCore + CryptoRng>(
    slots: usize,
    assignment: &SlotAssignment,
    hop_addrs: &[Address],
    hop_enc_keys: &[&[u8; 32]],
    pattern: &Pattern,
    rng: &mut R,
) -> Result<RoutingVector> {
    let stars = star_elements(assignment, hop_addrs, pattern)?;
    fill_vector(RoutingVector::random(slots, rng), assignment, &stars, hop_enc_keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(5)
    }

    #[test]
    fn element_layout() {
        let e = RoutingElement {
            pattern: Pattern(*b"abc"),
            next_addr: Address([7; 16]),
            next_slot: 4,
            mac: MacTag([9; 16]),
        };
        let b = e.to_bytes();
        assert_eq!(&b[..3], b"abc");
        assert_eq!(&b[3..19], &[7; 16]);
        assert_eq!(b[19], 4);
        assert_eq!(&b[20..], &[9; 16]);
        assert_eq!(RoutingElement::from_bytes(&b), e);
        assert_eq!(&e.star()[20..], &[0; 16]);
    }

    #[test]
    fn full_occupancy_is_a_permutation() {
        let mut r = rng();
        let a = sample_slot_assignment(5, 5, &mut r).unwrap();
        let mut p = a.positions().to_vec();
        p.sort();
        assert_eq!(p, vec![0, 1, 2, 3, 4]);
        let single = sample_slot_assignment(1, 5, &mut r).unwrap();
        assert!(single.positions()[0] < 5);
        assert_eq!(
            sample_slot_assignment(6, 5, &mut r),
            Err(Error::PathTooLong { hops: 6, max: 5 })
        );
        assert_eq!(sample_slot_assignment(0, 5, &mut r), Err(Error::EmptyPath));
    }

    #[test]
    fn ordered_pairs_are_uniform() {
        // 20 ordered pairs of distinct slots, 10^4 draws: every cell within 3 sigma
        let mut r = rng();
        let draws = 10_000usize;
        let mut counts = [[0usize; 5]; 5];
        for _ in 0..draws {
            let a = sample_slot_assignment(2, 5, &mut r).unwrap();
            let p = a.positions();
            counts[p[0] as usize][p[1] as usize] += 1;
        }
        let p = 1.0 / 20.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for (i, row) in counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if i == j {
                    assert_eq!(c, 0);
                    continue;
                }
                assert!((c as f64 - mean).abs() <= 3.0 * sigma, "cell ({i},{j}) = {c}");
                chi2 += (c as f64 - mean).powi(2) / mean;
            }
        }
        // chi-square with 19 degrees of freedom, 99.9th percentile
        assert!(chi2 < 43.82, "chi2 = {chi2}");
    }

    #[test]
    fn splice_and_read() {
        let mut r = rng();
        let v = RoutingVector::random(5, &mut r);
        let orig = v.clone();
        let b = [0xAA; ELEMENT_LEN];
        let v = v.splice_slot(4, &b).unwrap();
        assert_eq!(v.read_slot(4).unwrap(), b);
        assert_eq!(v.as_bytes()[..144], orig.as_bytes()[..144]);
        let c = [0x55; ELEMENT_LEN];
        let v = v.splice_slot(4, &c).unwrap();
        assert_eq!(v.read_slot(4).unwrap(), c);
        assert_eq!(
            v.read_slot(5),
            Err(Error::SlotOutOfRange { index: 5, slots: 5 })
        );
        assert!(v.clone().splice_slot(5, &c).is_err());
        assert_eq!(v.as_bytes().len(), 180);
    }

    #[test]
    fn last_filler_write_is_covered_by_one_xor() {
        let mut r = rng();
        for hops in 1..=5 {
            let a = sample_slot_assignment(hops, 5, &mut r).unwrap();
            let addrs: Vec<Address> = (0..hops).map(|i| Address([i as u8 + 1; 16])).collect();
            let keys: Vec<[u8; 32]> = (0..hops).map(|i| [i as u8 + 40; 32]).collect();
            let key_refs: Vec<&[u8; 32]> = keys.iter().collect();
            let pattern = Pattern(*b"pat");
            let filler = build_filler(5, &a, &addrs, &key_refs, &pattern, &mut r).unwrap();
            let last = hops - 1;
            let mut bytes = filler.as_bytes().to_vec();
            crypto::xor_keystream(&keys[last], ELEMENT_LEN, &mut bytes);
            let slot = a.positions()[last] as usize;
            let elem = RoutingElement::from_bytes(&read_slot(&bytes, slot).unwrap());
            assert_eq!(elem.pattern, pattern);
            assert_eq!(elem.next_addr, addrs[last]);
            assert_eq!(elem.next_slot as usize, slot);
            assert_eq!(elem.mac, MacTag::default());
        }
    }

    #[test]
    fn unassigned_slots_look_random() {
        // byte agreement between unassigned filler slots and fresh random bytes
        let mut r = rng();
        let pattern = Pattern(*b"pat");
        let (mut equal, mut total) = (0usize, 0usize);
        for _ in 0..1000 {
            let a = sample_slot_assignment(2, 5, &mut r).unwrap();
            let addrs = [Address([1; 16]), Address([2; 16])];
            let mut keys = [[0u8; 32]; 2];
            r.fill_bytes(&mut keys[0]);
            r.fill_bytes(&mut keys[1]);
            let filler = build_filler(5, &a, &addrs, &[&keys[0], &keys[1]], &pattern, &mut r).unwrap();
            let fresh = RoutingVector::random(5, &mut r);
            for slot in (0..5u8).filter(|s| !a.positions().contains(s)) {
                let x = filler.read_slot(slot as usize).unwrap();
                let y = fresh.read_slot(slot as usize).unwrap();
                equal += x.iter().zip(&y).filter(|(a, b)| a == b).count();
                total += ELEMENT_LEN;
            }
        }
        let p = 1.0 / 256.0;
        let rate = equal as f64 / total as f64;
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        assert!((rate - p).abs() < 4.0 * sigma, "rate {rate}");
    }

    #[test]
    fn filler_is_deterministic_given_seed() {
        let build = || {
            let mut r = ChaCha20Rng::seed_from_u64(99);
            let a = sample_slot_assignment(3, 5, &mut r).unwrap();
            let addrs = [Address([1; 16]), Address([2; 16]), Address([3; 16])];
            let k = [[1u8; 32], [2u8; 32], [3u8; 32]];
            build_filler(5, &a, &addrs, &[&k[0], &k[1], &k[2]], &Pattern::default(), &mut r).unwrap()
        };
        assert_eq!(build(), build());
    }

    proptest! {
        #[test]
        fn splice_touches_only_its_slot(seed: u64, index in 0usize..5, fill: u8) {
            let mut r = ChaCha20Rng::seed_from_u64(seed);
            let v = RoutingVector::random(5, &mut r);
            let out = v.clone().splice_slot(index, &[fill; ELEMENT_LEN]).unwrap();
            prop_assert_eq!(out.as_bytes().len(), 180);
            for i in (0..5).filter(|&i| i != index) {
                prop_assert_eq!(out.read_slot(i).unwrap(), v.read_slot(i).unwrap());
            }
        }

        #[test]
        fn sampled_slots_are_distinct(seed: u64, n in 1usize..=5) {
            let mut r = ChaCha20Rng::seed_from_u64(seed);
            let a = sample_slot_assignment(n, 5, &mut r).unwrap();
            prop_assert!(SlotAssignment::new(a.positions().to_vec(), 5).is_ok());
        }
    }
}
