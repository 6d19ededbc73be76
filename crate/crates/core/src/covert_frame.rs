//! Provisioning data hidden in the address fields of an Ethernet frame.
//!
//! A station that has not joined the home network cannot decrypt WiFi
//! traffic, but in monitor mode it can still read the cleartext source and
//! destination addresses of every frame. The gateway therefore sends frames
//! whose 12 address bytes carry a 3-byte header and a 7-byte payload chunk:
//!
//! ```text
//! src: [ header(3) | chunk[0..3] ]
//! dst: [ 0x33 0x33 | chunk[3..7] ]
//! ```
//!
//! Header bit map, MSB first across the 24 bits:
//!
//! ```text
//! byte0:  i i i i i i 1 0      id (6), locally administered, unicast
//! byte1:  f x x t t t t t      flag, fec index (2), total/2 high 5 bits
//! byte2:  t s s s s s s s      total/2 low bit, seq (7)
//! ```

use std::fmt;

use thiserror::Error;

/// Largest number of frames in one exchange.
pub const MAX_TOTAL: u8 = 126;
/// Largest pairing id that fits the 6-bit field.
pub const MAX_ID: u8 = 63;
/// Payload bytes carried by one frame.
pub const CHUNK_LEN: usize = 7;
/// Low two bits of the first source octet: locally administered, unicast.
pub const ADDR_FLAG_BITS: u8 = 0b10;
/// IPv6 multicast prefix, which access points forward onto the air.
pub const MULTICAST_PREFIX: [u8; 2] = [0x33, 0x33];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("invalid header: {0}")]
    InvalidHeader(&'static str),
    #[error("chunk must be exactly {CHUNK_LEN} bytes, got {0}")]
    ChunkLength(usize),
}

/// Why a frame was filtered out. Listeners count these and move on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum NotOurs {
    #[error("source address is not locally administered unicast")]
    AddressFlags,
    #[error("destination is not an IPv6 multicast address")]
    MulticastPrefix,
    #[error("header fields out of range")]
    Malformed,
    #[error("frame addressed to id {0}")]
    OtherId(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameHeader {
    pub id: u8,
    pub flag: bool,
    pub fec_index: u8,
    pub total: u8,
    pub seq: u8,
}

impl FrameHeader {
    pub fn new(id: u8, flag: bool, fec_index: u8, total: u8, seq: u8) -> Result<Self, FrameError> {
        let h = FrameHeader { id, flag, fec_index, total, seq };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if self.id > MAX_ID {
            return Err(FrameError::InvalidHeader("id exceeds 63"));
        }
        if self.fec_index > 3 {
            return Err(FrameError::InvalidHeader("fec index exceeds 3"));
        }
        if self.total < 2 || self.total > MAX_TOTAL {
            return Err(FrameError::InvalidHeader("total outside 2..=126"));
        }
        if !self.total.is_multiple_of(2) {
            return Err(FrameError::InvalidHeader("total must be even"));
        }
        if self.seq >= self.total {
            return Err(FrameError::InvalidHeader("seq must be below total"));
        }
        Ok(())
    }

    pub fn pack(&self) -> Result<[u8; 3], FrameError> {
        self.validate()?;
        let half = self.total >> 1;
        Ok([
            (self.id << 2) | ADDR_FLAG_BITS,
            (u8::from(self.flag) << 7) | (self.fec_index << 5) | (half >> 1),
            ((half & 0x01) << 7) | self.seq,
        ])
    }

    pub fn unpack(bytes: [u8; 3]) -> Result<Self, NotOurs> {
        if bytes[0] & 0b11 != ADDR_FLAG_BITS {
            return Err(NotOurs::AddressFlags);
        }
        let half = ((bytes[1] & 0x1f) << 1) | (bytes[2] >> 7);
        let h = FrameHeader {
            id: bytes[0] >> 2,
            flag: bytes[1] & 0x80 != 0,
            fec_index: (bytes[1] >> 5) & 0b11,
            total: half << 1,
            seq: bytes[2] & 0x7f,
        };
        h.validate().map_err(|_| NotOurs::Malformed)?;
        Ok(h)
    }
}

pub fn pack_header(h: &FrameHeader) -> Result<[u8; 3], FrameError> {
    h.pack()
}

pub fn unpack_header(bytes: [u8; 3]) -> Result<FrameHeader, NotOurs> {
    FrameHeader::unpack(bytes)
}

/// Seven payload bytes; one erasure-coded block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PayloadChunk(pub [u8; CHUNK_LEN]);

impl PayloadChunk {
    pub fn as_bytes(&self) -> &[u8; CHUNK_LEN] {
        &self.0
    }
}

impl TryFrom<&[u8]> for PayloadChunk {
    type Error = FrameError;

    fn try_from(value: &[u8]) -> Result<Self, Self::Error> {
        let bytes: [u8; CHUNK_LEN] = value.try_into().map_err(|_| FrameError::ChunkLength(value.len()))?;
        Ok(PayloadChunk(bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CovertFrame {
    pub src: [u8; 6],
    pub dst: [u8; 6],
}

impl CovertFrame {
    pub fn build(header: [u8; 3], chunk: &PayloadChunk) -> Self {
        let c = chunk.0;
        CovertFrame {
            src: [header[0], header[1], header[2], c[0], c[1], c[2]],
            dst: [MULTICAST_PREFIX[0], MULTICAST_PREFIX[1], c[3], c[4], c[5], c[6]],
        }
    }

    /// All 12 address bytes, source first.
    pub fn to_bytes(&self) -> [u8; 12] {
        let mut out = [0u8; 12];
        out[..6].copy_from_slice(&self.src);
        out[6..].copy_from_slice(&self.dst);
        out
    }

    pub fn from_bytes(bytes: [u8; 12]) -> Self {
        let mut src = [0u8; 6];
        let mut dst = [0u8; 6];
        src.copy_from_slice(&bytes[..6]);
        dst.copy_from_slice(&bytes[6..]);
        CovertFrame { src, dst }
    }

    /// Header and chunk, regardless of which id the frame is addressed to.
    pub fn decode(&self) -> Result<(FrameHeader, PayloadChunk), NotOurs> {
        if self.dst[..2] != MULTICAST_PREFIX {
            return Err(NotOurs::MulticastPrefix);
        }
        let header = FrameHeader::unpack([self.src[0], self.src[1], self.src[2]])?;
        let chunk = PayloadChunk([
            self.src[3], self.src[4], self.src[5], self.dst[2], self.dst[3], self.dst[4], self.dst[5],
        ]);
        Ok((header, chunk))
    }
}

/// Colon-separated hex, source then destination: `02:00:80:01:02:03->33:33:04:05:06:07`.
impl fmt::Display for CovertFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn addr(f: &mut fmt::Formatter<'_>, bytes: &[u8; 6]) -> fmt::Result {
            for (i, b) in bytes.iter().enumerate() {
                if i > 0 {
                    f.write_str(":")?;
                }
                write!(f, "{b:02x}")?;
            }
            Ok(())
        }
        addr(f, &self.src)?;
        f.write_str("->")?;
        addr(f, &self.dst)
    }
}

pub fn build_frame(header: [u8; 3], chunk: &PayloadChunk) -> CovertFrame {
    CovertFrame::build(header, chunk)
}

/// Parses a frame and keeps it only if it is addressed to `expected_id`.
pub fn parse_frame(frame: &CovertFrame, expected_id: u8) -> Result<(FrameHeader, PayloadChunk), NotOurs> {
    let (header, chunk) = frame.decode()?;
    if header.id != expected_id {
        return Err(NotOurs::OtherId(header.id));
    }
    Ok((header, chunk))
}
