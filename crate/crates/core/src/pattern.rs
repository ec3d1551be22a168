//! Pixel indexing patterns of 4D spatial LUTs.
//!
//! A pattern is four `(dy, dx)` offsets from the anchor pixel. Patterns live in
//! the lower-right quadrant; the rotation ensemble reaches the other three.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub type Offset = (i8, i8);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PatternError {
    #[error("unknown pattern id {0:?}")]
    Unknown(char),
    #[error("pattern {id:?}: first offset must be the anchor (0,0)")]
    AnchorFirst { id: char },
    #[error("pattern {id:?}: offsets must be pairwise distinct")]
    Duplicate { id: char },
    #[error("pattern {id:?}: offsets must be non-negative")]
    Negative { id: char },
    #[error("pattern id must be printable ASCII, got byte {0:#04x}")]
    BadId(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pattern {
    id: char,
    offsets: [Offset; 4],
}

impl Pattern {
    pub const BUILTIN_IDS: [char; 6] = ['S', 'D', 'Y', 'E', 'H', 'O'];

    pub fn new(id: char, offsets: [Offset; 4]) -> Result<Self, PatternError> {
        if !id.is_ascii_graphic() {
            return Err(PatternError::BadId(id as u32 as u8));
        }
        if offsets[0] != (0, 0) {
            return Err(PatternError::AnchorFirst { id });
        }
        if offsets.iter().any(|&(dy, dx)| dy < 0 || dx < 0) {
            return Err(PatternError::Negative { id });
        }
        let distinct: BTreeSet<_> = offsets.iter().collect();
        if distinct.len() != 4 {
            return Err(PatternError::Duplicate { id });
        }
        Ok(Self { id, offsets })
    }

    /// One of the built-in patterns `S`, `D`, `Y`, `E`, `H`, `O`.
    pub fn builtin(id: char) -> Result<Self, PatternError> {
        let offsets = match id {
            'S' => [(0, 0), (0, 1), (1, 0), (1, 1)],
            'D' => [(0, 0), (0, 2), (2, 0), (2, 2)],
            'Y' => [(0, 0), (1, 1), (1, 2), (2, 1)],
            'E' => [(0, 0), (0, 3), (3, 0), (3, 3)],
            'H' => [(0, 0), (2, 2), (2, 3), (3, 2)],
            'O' => [(0, 0), (1, 3), (3, 1), (3, 3)],
            other => return Err(PatternError::Unknown(other)),
        };
        Self::new(id, offsets)
    }

    pub fn s() -> Self {
        Self::builtin('S').unwrap()
    }

    #[inline]
    pub fn id(&self) -> char {
        self.id
    }

    #[inline]
    pub fn offsets(&self) -> &[Offset; 4] {
        &self.offsets
    }

    /// Bounding window `(rows, cols)` of the offsets.
    pub fn window(&self) -> (usize, usize) {
        let rows = self.offsets.iter().map(|o| o.0).max().unwrap_or(0) as usize + 1;
        let cols = self.offsets.iter().map(|o| o.1).max().unwrap_or(0) as usize + 1;
        (rows, cols)
    }

    /// Largest absolute offset along either axis.
    pub fn reach(&self) -> usize {
        self.offsets
            .iter()
            .map(|&(dy, dx)| dy.unsigned_abs().max(dx.unsigned_abs()) as usize)
            .max()
            .unwrap_or(0)
    }

    /// Offsets as seen from the unrotated image when the block runs on the
    /// image turned `quarter_turns` times counter-clockwise.
    pub fn rotated_offsets(&self, quarter_turns: u8) -> [(isize, isize); 4] {
        self.offsets
            .map(|(dy, dx)| rotate_offset((dy as isize, dx as isize), quarter_turns))
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.id, self.offsets)
    }
}

/// Maps an offset taken in an image rotated `k` quarter turns counter-clockwise
/// back into the original image's frame.
#[inline]
pub fn rotate_offset((dy, dx): (isize, isize), k: u8) -> (isize, isize) {
    match k & 3 {
        0 => (dy, dx),
        1 => (dx, -dy),
        2 => (-dy, -dx),
        _ => (-dx, dy),
    }
}
