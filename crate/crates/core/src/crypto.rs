//! Symmetric primitives and the Diffie-Hellman group used by the protocol.
//!
//! One fixed suite:
//!
//! * key derivation: HKDF-SHA256 keyed by the master key, salted with the
//!   big-endian packet counter, expanded under the labels `ariadne-enc` and
//!   `ariadne-mac`;
//! * keystream: ChaCha20 with an all-zero nonce (every encryption key is used
//!   for a single packet), so any slice of the stream can be produced by
//!   seeking;
//! * MAC: keyed BLAKE3 truncated to 16 bytes, compared in constant time;
//! * group: ristretto255, a prime-order group built on Curve25519.

use std::fmt;

use chacha20::cipher::{KeyIvInit, StreamCipher, StreamCipherSeek};
use chacha20::ChaCha20;
use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::IsIdentity;
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256, Sha512};
use subtle::ConstantTimeEq;
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::error::{Error, Result};

pub const KEY_LEN: usize = 32;
pub const MAC_LEN: usize = 16;
pub const PATTERN_LEN: usize = 3;
pub const GROUP_ELEMENT_LEN: usize = 32;
/// Largest keystream a single call may request.
pub const KEYSTREAM_CAP: usize = 1 << 20;

const ENC_LABEL: &[u8] = b"ariadne-enc";
const MAC_LABEL: &[u8] = b"ariadne-mac";
const SHARED_KEY_CONTEXT: &str = "ariadne 2024 setup shared master key";
const BLIND_LABEL: &[u8] = b"ariadne-blind";

/// Long-lived secret shared between a source and one relay.
#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct MasterKey([u8; KEY_LEN]);

impl MasterKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        MasterKey(bytes)
    }

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; KEY_LEN];
        rng.fill_bytes(&mut bytes);
        MasterKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl PartialEq for MasterKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.ct_eq(&other.0).into()
    }
}

impl Eq for MasterKey {}

impl fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MasterKey(..)")
    }
}

/// Per-packet encryption and MAC keys for counter `t`.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct TempKeyPair {
    pub enc: [u8; KEY_LEN],
    pub mac: [u8; KEY_LEN],
    pub t: u64,
}

impl fmt::Debug for TempKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TempKeyPair").field("t", &self.t).finish_non_exhaustive()
    }
}

/// The deployment-wide byte pattern used to reference temporary keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pattern(pub [u8; PATTERN_LEN]);

impl Default for Pattern {
    fn default() -> Self {
        Pattern(*b"ARD")
    }
}

/// A truncated MAC tag. Equality is constant time.
#[derive(Clone, Copy, Default)]
pub struct MacTag(pub [u8; MAC_LEN]);

impl PartialEq for MacTag {
    fn eq(&self, other: &Self) -> bool {
        self.0.ct_eq(&other.0).into()
    }
}

impl Eq for MacTag {}

impl fmt::Debug for MacTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacTag({})", hex::encode(self.0))
    }
}

pub fn derive_temp_keys(master: &MasterKey, t: u64) -> TempKeyPair {
    let hk = Hkdf::<Sha256>::new(Some(&t.to_be_bytes()), master.as_bytes());
    let mut pair = TempKeyPair { enc: [0; KEY_LEN], mac: [0; KEY_LEN], t };
    // 32 bytes is far below the 255*32 expansion limit
    hk.expand(ENC_LABEL, &mut pair.enc).expect("valid HKDF length");
    hk.expand(MAC_LABEL, &mut pair.mac).expect("valid HKDF length");
    pair
}

fn cipher(enc: &[u8; KEY_LEN]) -> ChaCha20 {
    ChaCha20::new(enc.into(), &[0u8; 12].into())
}

/// Returns the first `len` bytes of the keystream for `enc`.
pub fn keystream(enc: &[u8; KEY_LEN], len: usize) -> Result<Vec<u8>> {
    if len > KEYSTREAM_CAP {
        return Err(Error::KeystreamTooLong(len));
    }
    let mut out = vec![0u8; len];
    cipher(enc).apply_keystream(&mut out);
    Ok(out)
}

/// XORs keystream bytes `[offset, offset + buf.len())` into `buf`.
pub fn xor_keystream(enc: &[u8; KEY_LEN], offset: usize, buf: &mut [u8]) {
    let mut c = cipher(enc);
    c.seek(offset as u64);
    c.apply_keystream(buf);
}

pub fn mac(mac_key: &[u8; KEY_LEN], msg: &[u8]) -> MacTag {
    let digest = blake3::keyed_hash(mac_key, msg);
    let mut tag = [0u8; MAC_LEN];
    tag.copy_from_slice(&digest.as_bytes()[..MAC_LEN]);
    MacTag(tag)
}

pub fn encrypt_pattern(enc: &[u8; KEY_LEN], pattern: &Pattern) -> [u8; PATTERN_LEN] {
    let mut out = pattern.0;
    xor_keystream(enc, 0, &mut out);
    out
}

/// Constant-time byte-string equality.
pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    a.ct_eq(b).into()
}

/// A secret exponent of the group.
#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct GroupScalar(Scalar);

impl GroupScalar {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        GroupScalar(Scalar::random(rng))
    }

    pub fn from_bytes_mod_order(bytes: [u8; 32]) -> Self {
        GroupScalar(Scalar::from_bytes_mod_order(bytes))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn one() -> Self {
        GroupScalar(Scalar::ONE)
    }

    /// Product of two exponents.
    pub fn mul(&self, other: &GroupScalar) -> GroupScalar {
        GroupScalar(self.0 * other.0)
    }

    /// `g^self`.
    pub fn public(&self) -> GroupElement {
        GroupElement::from_point(&(&self.0 * RISTRETTO_BASEPOINT_TABLE))
    }
}

impl PartialEq for GroupScalar {
    fn eq(&self, other: &Self) -> bool {
        self.0.ct_eq(&other.0).into()
    }
}

impl fmt::Debug for GroupScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("GroupScalar(..)")
    }
}

/// Canonical 32-byte encoding of a group element.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupElement(pub [u8; GROUP_ELEMENT_LEN]);

impl GroupElement {
    fn from_point(p: &RistrettoPoint) -> Self {
        GroupElement(p.compress().to_bytes())
    }

    /// Decodes the element, rejecting non-canonical encodings and the identity.
    pub fn decode(&self) -> Result<RistrettoPoint> {
        let point = CompressedRistretto(self.0)
            .decompress()
            .ok_or(Error::InvalidGroupElement)?;
        if point.is_identity() {
            return Err(Error::InvalidGroupElement);
        }
        Ok(point)
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement({})", hex::encode(self.0))
    }
}

pub fn dh_keygen<R: RngCore + CryptoRng>(rng: &mut R) -> (GroupScalar, GroupElement) {
    let x = GroupScalar::random(rng);
    let y = x.public();
    (x, y)
}

/// `elem^x`, hashed into a master key.
pub fn dh_shared(elem: &GroupElement, x: &GroupScalar) -> Result<MasterKey> {
    let shared = x.0 * elem.decode()?;
    if shared.is_identity() {
        return Err(Error::InvalidGroupElement);
    }
    let key = blake3::derive_key(SHARED_KEY_CONTEXT, shared.compress().as_bytes());
    Ok(MasterKey(key))
}

/// Hashes `(alpha, k)` to a non-zero exponent.
pub fn blind_factor(alpha: &GroupElement, k: &MasterKey) -> GroupScalar {
    let mut h = Sha512::new();
    h.update(BLIND_LABEL);
    h.update(alpha.0);
    h.update(k.as_bytes());
    let wide: [u8; 64] = h.finalize().into();
    let s = Scalar::from_bytes_mod_order_wide(&wide);
    // zero only with probability 2^-252
    if s == Scalar::ZERO {
        GroupScalar(Scalar::ONE)
    } else {
        GroupScalar(s)
    }
}

/// `alpha^b`.
pub fn blind(alpha: &GroupElement, b: &GroupScalar) -> Result<GroupElement> {
    Ok(GroupElement::from_point(&(b.0 * alpha.decode()?)))
}
