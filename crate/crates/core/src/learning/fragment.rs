use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::model::ModelVector;

/// Wire size of one parameter (`f32`, little-endian).
pub const ELEMENT_BYTES: usize = 4;
const HEADER_BYTES: usize = 12;

/// A contiguous slice `[start, end)` of a flattened model for one epoch.
/// Carries no sender identity and no fragment count.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragment {
    pub epoch: u32,
    pub start: u32,
    pub end: u32,
    pub values: Vec<f32>,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum FragmentDecodeError {
    #[error("fragment shorter than its header")]
    Truncated,
    #[error("fragment range is empty or inverted")]
    BadRange,
    #[error("value count does not match range")]
    LengthMismatch,
}

impl Fragment {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `[epoch u32][start u32][end u32][values f32...]`, all little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.values.len() * ELEMENT_BYTES);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.start.to_le_bytes());
        out.extend_from_slice(&self.end.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FragmentDecodeError> {
        if bytes.len() < HEADER_BYTES {
            return Err(FragmentDecodeError::Truncated);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let (epoch, start, end) = (word(0), word(4), word(8));
        if start >= end {
            return Err(FragmentDecodeError::BadRange);
        }
        let body = &bytes[HEADER_BYTES..];
        if body.len() != (end - start) as usize * ELEMENT_BYTES {
            return Err(FragmentDecodeError::LengthMismatch);
        }
        let values = body
            .chunks_exact(ELEMENT_BYTES)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Fragment {
            epoch,
            start,
            end,
            values,
        })
    }

    /// Hash of range and value bytes; the epoch is the buffer's bin key.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.start.to_le_bytes());
        h.update(self.end.to_le_bytes());
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Cuts `w` into fragments of `frag_bytes / 4` elements; only the last
/// fragment may be shorter. Values are rounded to `f32`.
///
/// # Panics
/// If `frag_bytes` cannot hold one element.
pub fn fragment_model(w: &ModelVector, frag_bytes: usize, epoch: u32) -> Vec<Fragment> {
    let per = frag_bytes / ELEMENT_BYTES;
    assert!(per >= 1, "fragment size must fit one element");
    w.values
        .chunks(per)
        .enumerate()
        .map(|(i, chunk)| {
            let start = (i * per) as u32;
            Fragment {
                epoch,
                start,
                end: start + chunk.len() as u32,
                values: chunk.iter().map(|v| *v as f32).collect(),
            }
        })
        .collect()
}

/// Inverse of [`fragment_model`] for a complete, non-overlapping set.
pub fn reassemble(fragments: &[Fragment], n: usize) -> Option<ModelVector> {
    let mut out = ModelVector::zeros(n);
    let mut filled = 0;
    for f in fragments {
        let slot = out.values.get_mut(f.start as usize..f.end as usize)?;
        for (dst, v) in slot.iter_mut().zip(&f.values) {
            *dst = f64::from(*v);
        }
        filled += f.len();
    }
    (filled == n).then_some(out)
}

/// Received fragments binned by epoch, deduplicated by content hash.
#[derive(Clone, Debug, Default)]
pub struct FragmentBuffer {
    epochs: BTreeMap<u32, BTreeMap<[u8; 32], Fragment>>,
}

impl FragmentBuffer {
    /// Returns false when an identical fragment is already stored.
    pub fn insert(&mut self, fragment: Fragment) -> bool {
        let bin = self.epochs.entry(fragment.epoch).or_default();
        let key = fragment.content_hash();
        if bin.contains_key(&key) {
            return false;
        }
        bin.insert(key, fragment);
        true
    }

    pub fn len(&self, epoch: u32) -> usize {
        self.epochs.get(&epoch).map_or(0, BTreeMap::len)
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.values().all(BTreeMap::is_empty)
    }

    pub fn get(&self, epoch: u32) -> impl Iterator<Item = &Fragment> {
        self.epochs.get(&epoch).into_iter().flat_map(BTreeMap::values)
    }

    /// Removes and returns the fragments of `epoch`.
    pub fn take(&mut self, epoch: u32) -> Vec<Fragment> {
        self.epochs
            .remove(&epoch)
            .map(|b| b.into_values().collect())
            .unwrap_or_default()
    }

    /// Forgets every epoch below `epoch`.
    pub fn discard_before(&mut self, epoch: u32) {
        self.epochs = self.epochs.split_off(&epoch);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn thousand_elements_into_512_byte_fragments() {
        let w = ModelVector {
            values: (0..1000).map(f64::from).collect(),
        };
        let f = fragment_model(&w, 512, 3);
        assert_eq!(f.len(), 8);
        assert!(f[..7].iter().all(|x| x.len() == 128));
        assert_eq!(f[7].len(), 104);
        assert_eq!((f[7].start, f[7].end), (896, 1000));
        assert_eq!(reassemble(&f, 1000).unwrap(), w);
    }

    #[test]
    fn single_fragment_when_it_fits() {
        let w = ModelVector::zeros(128);
        let f = fragment_model(&w, 512, 0);
        assert_eq!(f.len(), 1);
        assert_eq!((f[0].start, f[0].end), (0, 128));
    }

    #[test]
    fn encode_round_trip_and_errors() {
        let f = Fragment {
            epoch: 7,
            start: 3,
            end: 5,
            values: vec![1.5, -2.25],
        };
        let enc = f.encode();
        assert_eq!(enc.len(), 12 + 8);
        assert_eq!(&enc[..4], &7u32.to_le_bytes());
        assert_eq!(Fragment::decode(&enc).unwrap(), f);
        assert_eq!(Fragment::decode(&enc[..5]), Err(FragmentDecodeError::Truncated));
        assert_eq!(Fragment::decode(&enc[..16]), Err(FragmentDecodeError::LengthMismatch));
    }

    #[test]
    fn buffer_dedups_within_epoch() {
        let f = Fragment {
            epoch: 1,
            start: 0,
            end: 1,
            values: vec![1.0],
        };
        let mut b = FragmentBuffer::default();
        assert!(b.insert(f.clone()));
        assert!(!b.insert(f.clone()));
        assert!(b.insert(Fragment { epoch: 2, ..f.clone() }));
        assert_eq!(b.len(1), 1);
        b.discard_before(2);
        assert_eq!(b.len(1), 0);
        assert_eq!(b.take(2).len(), 1);
        assert!(b.is_empty());
    }
}
