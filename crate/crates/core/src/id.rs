use core::fmt;

/// Opaque node identifier. Encoded on the wire as 4 big-endian bytes.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ENCODED_LEN: usize = 4;

    pub fn to_bytes(self) -> [u8; Self::ENCODED_LEN] {
        self.0.to_be_bytes()
    }

    pub fn from_bytes(bytes: [u8; Self::ENCODED_LEN]) -> Self {
        NodeId(u32::from_be_bytes(bytes))
    }

    /// Reads an id from the first four bytes of `bytes`.
    pub fn read(bytes: &[u8]) -> Option<Self> {
        let raw: [u8; 4] = bytes.get(..Self::ENCODED_LEN)?.try_into().ok()?;
        Some(Self::from_bytes(raw))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}
