//! Node identities in the Kademlia address space.
//!
//! An id is an unsigned integer of `width` bits (1..=160), stored big-endian
//! and right-aligned in a 20-byte buffer. Ordering on ids of equal width is
//! numeric.

use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum supported address width in bits.
pub const MAX_ID_BITS: u32 = 160;
const ID_BYTES: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentityError {
    #[error("node id width mismatch: {0} bits vs {1} bits")]
    WidthMismatch(u32, u32),
    #[error("id width must be in 1..=160, got {0}")]
    InvalidWidth(u32),
    #[error("value does not fit in {0} bits")]
    Overflow(u32),
    #[error("a node has no bucket for its own id")]
    SelfBucket,
    #[error("cannot draw {wanted} distinct ids from a {bits}-bit space")]
    SpaceExhausted { wanted: usize, bits: u32 },
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    width: u32,
    raw: [u8; ID_BYTES],
}

/// XOR of two ids, ordered as an unsigned integer.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Distance([u8; ID_BYTES]);

impl Distance {
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|b| *b == 0)
    }

    /// Number of significant bits (0 for the zero distance).
    pub fn bit_len(&self) -> u32 {
        for (i, b) in self.0.iter().enumerate() {
            if *b != 0 {
                return (ID_BYTES - i) as u32 * 8 - b.leading_zeros();
            }
        }
        0
    }

    /// Low 128 bits of the distance.
    pub fn low_u128(&self) -> u128 {
        let mut buf = [0u8; 16];
        buf.copy_from_slice(&self.0[ID_BYTES - 16..]);
        u128::from_be_bytes(buf)
    }
}

impl NodeId {
    pub fn from_u128(value: u128, width: u32) -> Result<Self, IdentityError> {
        check_width(width)?;
        if width < 128 && value >> width != 0 {
            return Err(IdentityError::Overflow(width));
        }
        let mut raw = [0u8; ID_BYTES];
        raw[ID_BYTES - 16..].copy_from_slice(&value.to_be_bytes());
        Ok(NodeId { width, raw })
    }

    /// Builds an id from big-endian bytes; the value must fit in `width` bits.
    pub fn from_be_bytes(bytes: &[u8], width: u32) -> Result<Self, IdentityError> {
        check_width(width)?;
        if bytes.len() > ID_BYTES {
            return Err(IdentityError::Overflow(width));
        }
        let mut raw = [0u8; ID_BYTES];
        raw[ID_BYTES - bytes.len()..].copy_from_slice(bytes);
        let id = NodeId { width, raw };
        if id.as_distance().bit_len() > width {
            return Err(IdentityError::Overflow(width));
        }
        Ok(id)
    }

    /// Uniformly random id of the given width.
    pub fn random<R: Rng + ?Sized>(width: u32, rng: &mut R) -> Result<Self, IdentityError> {
        check_width(width)?;
        let mut raw = [0u8; ID_BYTES];
        rng.fill(&mut raw[..]);
        mask_to_width(&mut raw, width);
        Ok(NodeId { width, raw })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn as_bytes(&self) -> &[u8; ID_BYTES] {
        &self.raw
    }

    /// Low 128 bits of the id value.
    pub fn low_u128(&self) -> u128 {
        self.as_distance().low_u128()
    }

    /// Bit `index` counted from the most significant address bit (index 0).
    pub fn bit(&self, index: u32) -> bool {
        debug_assert!(index < self.width);
        let from_lsb = self.width - 1 - index;
        let byte = ID_BYTES - 1 - (from_lsb / 8) as usize;
        (self.raw[byte] >> (from_lsb % 8)) & 1 == 1
    }

    fn as_distance(&self) -> Distance {
        Distance(self.raw)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", self)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hex_digits = self.width.div_ceil(4) as usize;
        let full: String = self.raw.iter().map(|b| format!("{b:02x}")).collect();
        write!(f, "{}", &full[full.len() - hex_digits..])
    }
}

fn check_width(width: u32) -> Result<(), IdentityError> {
    if width == 0 || width > MAX_ID_BITS {
        Err(IdentityError::InvalidWidth(width))
    } else {
        Ok(())
    }
}

fn mask_to_width(raw: &mut [u8; ID_BYTES], width: u32) {
    let unused = MAX_ID_BITS - width;
    let full_bytes = (unused / 8) as usize;
    for b in raw.iter_mut().take(full_bytes) {
        *b = 0;
    }
    if !unused.is_multiple_of(8) {
        raw[full_bytes] &= 0xff >> (unused % 8);
    }
}

fn same_width(a: &NodeId, b: &NodeId) -> Result<(), IdentityError> {
    if a.width != b.width {
        Err(IdentityError::WidthMismatch(a.width, b.width))
    } else {
        Ok(())
    }
}

pub fn xor_distance(a: &NodeId, b: &NodeId) -> Result<Distance, IdentityError> {
    same_width(a, b)?;
    let mut out = [0u8; ID_BYTES];
    for (o, (x, y)) in out.iter_mut().zip(a.raw.iter().zip(b.raw.iter())) {
        *o = x ^ y;
    }
    Ok(Distance(out))
}

/// Number of leading address bits on which `a` and `b` agree.
pub fn shared_prefix_len(a: &NodeId, b: &NodeId) -> Result<u32, IdentityError> {
    let d = xor_distance(a, b)?;
    Ok(a.width - d.bit_len())
}

/// Index of the bucket in `self_id`'s table that holds `peer_id`.
pub fn bucket_index_of(self_id: &NodeId, peer_id: &NodeId) -> Result<usize, IdentityError> {
    let prefix = shared_prefix_len(self_id, peer_id)?;
    if prefix == self_id.width {
        return Err(IdentityError::SelfBucket);
    }
    Ok(prefix as usize)
}

/// Draws `count` distinct uniformly random ids of `width` bits.
pub fn assign_ids<R: Rng + ?Sized>(
    count: usize,
    width: u32,
    rng: &mut R,
) -> Result<Vec<NodeId>, IdentityError> {
    check_width(width)?;
    if width < 64 && (count as u128) > (1u128 << width) {
        return Err(IdentityError::SpaceExhausted { wanted: count, bits: width });
    }
    let mut seen = HashSet::with_capacity(count);
    let mut ids = Vec::with_capacity(count);
    while ids.len() < count {
        let id = NodeId::random(width, rng)?;
        if seen.insert(id) {
            ids.push(id);
        }
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn id4(v: u128) -> NodeId {
        NodeId::from_u128(v, 4).unwrap()
    }

    fn naive_prefix(a: &NodeId, b: &NodeId) -> u32 {
        let mut n = 0;
        while n < a.width() && a.bit(n) == b.bit(n) {
            n += 1;
        }
        n
    }

    #[test]
    fn xor_examples() {
        let x = id4(0b0110);
        assert!(xor_distance(&x, &x).unwrap().is_zero());
        let d = xor_distance(&id4(0b0001), &id4(0b1001)).unwrap();
        assert_eq!(d.low_u128(), 0b1000);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let a = NodeId::from_u128(1, 4).unwrap();
        let b = NodeId::from_u128(1, 5).unwrap();
        assert_eq!(xor_distance(&a, &b), Err(IdentityError::WidthMismatch(4, 5)));
        assert!(shared_prefix_len(&a, &b).is_err());
        assert!(bucket_index_of(&a, &b).is_err());
    }

    #[test]
    fn overflow_rejected() {
        assert_eq!(NodeId::from_u128(16, 4), Err(IdentityError::Overflow(4)));
        assert!(NodeId::from_u128(0, 0).is_err());
        assert!(NodeId::from_u128(0, 161).is_err());
        assert!(NodeId::from_be_bytes(&[0x01, 0x00], 8).is_err());
        assert!(NodeId::from_be_bytes(&[0xff], 8).is_ok());
    }

    #[test]
    fn prefix_examples() {
        let x = id4(0b1010);
        assert_eq!(shared_prefix_len(&x, &x).unwrap(), 4);
        assert_eq!(shared_prefix_len(&id4(0b0000), &id4(0b1000)).unwrap(), 0);
        assert_eq!(shared_prefix_len(&id4(0b0100), &id4(0b0110)).unwrap(), 2);
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(bucket_index_of(&id4(0), &id4(0b1000)).unwrap(), 0);
        assert_eq!(bucket_index_of(&id4(0), &id4(0b0001)).unwrap(), 3);
        assert_eq!(bucket_index_of(&id4(3), &id4(3)), Err(IdentityError::SelfBucket));
    }

    #[test]
    fn random_pairs_symmetric_and_match_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for width in [4u32, 16, 63, 128, 160] {
            for i in 0..10_000 {
                let a = NodeId::random(width, &mut rng).unwrap();
                let b = NodeId::random(width, &mut rng).unwrap();
                let spl = shared_prefix_len(&a, &b).unwrap();
                assert_eq!(spl, naive_prefix(&a, &b));
                if i < 1000 {
                    assert_eq!(xor_distance(&a, &b), xor_distance(&b, &a));
                    if a != b {
                        assert_eq!(bucket_index_of(&a, &b).unwrap(), bucket_index_of(&b, &a).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn wide_ids_round_trip() {
        let bytes = [0xabu8; 20];
        let id = NodeId::from_be_bytes(&bytes, 160).unwrap();
        assert_eq!(id.to_string().len(), 40);
        assert!(id.bit(0));
        let other = NodeId::from_be_bytes(&[0u8; 20], 160).unwrap();
        assert_eq!(shared_prefix_len(&id, &other).unwrap(), 0);
    }

    #[test]
    fn assign_ids_distinct_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids = assign_ids(16, 4, &mut rng).unwrap();
        let set: HashSet<_> = ids.iter().collect();
        assert_eq!(set.len(), 16);
        assert!(assign_ids(17, 4, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn prefix_len_marks_first_differing_bit(a in 0u128..(1 << 16), b in 0u128..(1 << 16)) {
            let a = NodeId::from_u128(a, 16).unwrap();
            let b = NodeId::from_u128(b, 16).unwrap();
            let k = shared_prefix_len(&a, &b).unwrap();
            if k < 16 {
                prop_assert_ne!(a.bit(k), b.bit(k));
            } else {
                prop_assert_eq!(a, b);
            }
            prop_assert_eq!(xor_distance(&a, &b).unwrap().is_zero(), a == b);
        }
    }
}
