//! The `MULUT1` binary container.
//!
//! ```text
//! 0..6    magic "MULUT1"
//! 6       version (1)
//! 7       role: 0 spatial-intermediate, 1 spatial-output, 2 channel
//! 8       q
//! 9       n
//! 10..12  m, u16 little-endian
//! 12      upscale factor r (1 if none)
//! 13      pattern id, ASCII (0 for channel tables)
//! 14..22  pattern offsets, 4 x (i8 dy, i8 dx); zero for channel tables
//! 22..64  reserved, zero
//! 64..    payload, lut_size_bytes(q, n, m) bytes
//! ```

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use thiserror::Error;

use crate::lut::{lut_size_bytes, LutTable, SamplingGrid};
use crate::pattern::Pattern;

pub const MAGIC: &[u8; 6] = b"MULUT1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: not a MULUT1 stream")]
    BadMagic,
    #[error("unsupported version {0} (expected {VERSION})")]
    Version(u8),
    #[error("length mismatch: header declares {expected} payload bytes, stream has {actual}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("invalid header: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FormatError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic => 1,
            FormatError::Version(_) => 2,
            FormatError::LengthMismatch { .. } => 3,
            FormatError::Invariant(_) => 4,
            FormatError::Io(_) => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    SpatialIntermediate = 0,
    SpatialOutput = 1,
    Channel = 2,
}

impl Role {
    pub fn from_byte(b: u8) -> Option<Role> {
        match b {
            0 => Some(Role::SpatialIntermediate),
            1 => Some(Role::SpatialOutput),
            2 => Some(Role::Channel),
            _ => None,
        }
    }

    pub fn is_spatial(self) -> bool {
        self != Role::Channel
    }
}

/// Decoded header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LutHeader {
    pub role: Role,
    pub q: u8,
    pub n: u8,
    pub m: u16,
    pub upscale: u8,
    pub pattern: Option<Pattern>,
}

impl LutHeader {
    pub fn payload_len(&self) -> u64 {
        lut_size_bytes(self.q as u32, self.n as u32, self.m as u64).unwrap_or(u64::MAX)
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..6].copy_from_slice(MAGIC);
        h[6] = VERSION;
        h[7] = self.role as u8;
        h[8] = self.q;
        h[9] = self.n;
        h[10..12].copy_from_slice(&self.m.to_le_bytes());
        h[12] = self.upscale;
        if let Some(p) = &self.pattern {
            h[13] = p.id() as u8;
            for (i, &(dy, dx)) in p.offsets().iter().enumerate() {
                h[14 + 2 * i] = dy as u8;
                h[15 + 2 * i] = dx as u8;
            }
        }
        h
    }

    pub fn decode(h: &[u8]) -> Result<Self, FormatError> {
        if h.len() < 6 || &h[..6] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        if h.len() < HEADER_LEN {
            return Err(FormatError::LengthMismatch {
                expected: HEADER_LEN as u64,
                actual: h.len() as u64,
            });
        }
        if h[6] != VERSION {
            return Err(FormatError::Version(h[6]));
        }
        let bad = |msg: String| Err(FormatError::Invariant(msg));
        let role = match Role::from_byte(h[7]) {
            Some(r) => r,
            None => return bad(format!("role byte {}", h[7])),
        };
        let (q, n) = (h[8], h[9]);
        let m = u16::from_le_bytes([h[10], h[11]]);
        let upscale = h[12];
        if q > 8 {
            return bad(format!("q={q} out of range 0..=8"));
        }
        if m == 0 {
            return bad("m=0".into());
        }
        if upscale == 0 {
            return bad("upscale r=0".into());
        }
        let pattern = match role {
            Role::Channel => {
                if n != 3 {
                    return bad(format!("channel table with n={n} (expected 3)"));
                }
                if upscale != 1 {
                    return bad(format!("channel table with r={upscale} (expected 1)"));
                }
                if h[13] != 0 || h[14..22].iter().any(|&b| b != 0) {
                    return bad("channel table carries a pattern".into());
                }
                None
            }
            _ => {
                if n != 4 {
                    return bad(format!("spatial table with n={n} (expected 4)"));
                }
                let r2 = upscale as u32 * upscale as u32;
                if m as u32 % r2 != 0 {
                    return bad(format!("m={m} is not a multiple of r^2={r2}"));
                }
                let mut offsets = [(0i8, 0i8); 4];
                for (i, o) in offsets.iter_mut().enumerate() {
                    *o = (h[14 + 2 * i] as i8, h[15 + 2 * i] as i8);
                }
                match Pattern::new(h[13] as char, offsets) {
                    Ok(p) => Some(p),
                    Err(e) => return bad(e.to_string()),
                }
            }
        };
        Ok(LutHeader {
            role,
            q,
            n,
            m,
            upscale,
            pattern,
        })
    }
}

/// A table together with the header metadata it travels with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LutFile {
    pub role: Role,
    pub upscale: u8,
    pub pattern: Option<Pattern>,
    pub table: LutTable,
}

impl LutFile {
    pub fn header(&self) -> LutHeader {
        LutHeader {
            role: self.role,
            q: self.table.grid().q(),
            n: self.table.n(),
            m: self.table.m(),
            upscale: self.upscale,
            pattern: self.pattern,
        }
    }
}

/// Serializes a table. Output is a pure function of the arguments.
pub fn write_lut(table: &LutTable, pattern: Option<&Pattern>, role: Role, upscale: u8) -> Vec<u8> {
    let header = LutHeader {
        role,
        q: table.grid().q(),
        n: table.n(),
        m: table.m(),
        upscale,
        pattern: pattern.copied(),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + table.values().len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(table.values());
    out
}

pub fn read_lut(bytes: &[u8]) -> Result<LutFile, FormatError> {
    let header = LutHeader::decode(bytes)?;
    let expected = header.payload_len();
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if expected != actual {
        return Err(FormatError::LengthMismatch { expected, actual });
    }
    let grid = SamplingGrid::new(header.q).map_err(|e| FormatError::Invariant(e.to_string()))?;
    let table = LutTable::new(header.n, header.m, grid, bytes[HEADER_LEN..].to_vec())
        .map_err(|e| FormatError::Invariant(e.to_string()))?;
    Ok(LutFile {
        role: header.role,
        upscale: header.upscale,
        pattern: header.pattern,
        table,
    })
}

impl LutFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        write_lut(&self.table, self.pattern.as_ref(), self.role, self.upscale)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        read_lut(&fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_bytes())
    }
}

/// Reads only the header of a file, plus its total payload length on disk.
pub fn read_header(path: &Path) -> Result<(LutHeader, u64), FormatError> {
    let mut f = fs::File::open(path)?;
    let mut h = Vec::with_capacity(HEADER_LEN);
    f.by_ref().take(HEADER_LEN as u64).read_to_end(&mut h)?;
    let header = LutHeader::decode(&h)?;
    let len = f.metadata()?.len();
    Ok((header, len.saturating_sub(HEADER_LEN as u64)))
}
