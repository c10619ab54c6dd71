use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of permanent teeth, and therefore channels in every mask stack.
pub const NUM_TEETH: usize = 32;

/// A permanent tooth in FDI two-digit notation: quadrant 1..=4, position 1..=8.
///
/// Quadrants run clockwise from the patient's upper right (1) through upper
/// left (2), lower left (3) and lower right (4). Positions count outward from
/// the midline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct FdiCode(u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    /// Mirror left-right (swaps columns).
    Horizontal,
    /// Mirror top-bottom (swaps rows).
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToothKind {
    Incisor,
    Canine,
    Premolar,
    Molar,
}

impl ToothKind {
    pub const ALL: [ToothKind; 4] = [
        ToothKind::Incisor,
        ToothKind::Canine,
        ToothKind::Premolar,
        ToothKind::Molar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToothKind::Incisor => "incisor",
            ToothKind::Canine => "canine",
            ToothKind::Premolar => "premolar",
            ToothKind::Molar => "molar",
        }
    }
}

impl FdiCode {
    pub fn new(code: u32) -> Result<Self> {
        let quadrant = code / 10;
        let position = code % 10;
        if (1..=4).contains(&quadrant) && (1..=8).contains(&position) {
            Ok(FdiCode(code as u8))
        } else {
            Err(Error::InvalidFdi(code))
        }
    }

    pub fn from_parts(quadrant: u8, position: u8) -> Result<Self> {
        Self::new(quadrant as u32 * 10 + position as u32)
    }

    /// Inverse of [`FdiCode::channel`].
    pub fn from_channel(channel: usize) -> Result<Self> {
        if channel >= NUM_TEETH {
            return Err(Error::InvalidFdi(channel as u32));
        }
        Ok(FdiCode(((channel / 8 + 1) * 10 + channel % 8 + 1) as u8))
    }

    /// All 32 codes in channel order.
    pub fn all() -> impl Iterator<Item = FdiCode> {
        (0..NUM_TEETH).map(|c| FdiCode::from_channel(c).unwrap())
    }

    pub fn code(self) -> u32 {
        self.0 as u32
    }

    pub fn quadrant(self) -> u8 {
        self.0 / 10
    }

    pub fn position(self) -> u8 {
        self.0 % 10
    }

    /// Channel index `(quadrant - 1) * 8 + (position - 1)`.
    pub fn channel(self) -> usize {
        (self.quadrant() as usize - 1) * 8 + (self.position() as usize - 1)
    }

    pub fn kind(self) -> ToothKind {
        match self.position() {
            1 | 2 => ToothKind::Incisor,
            3 => ToothKind::Canine,
            4 | 5 => ToothKind::Premolar,
            _ => ToothKind::Molar,
        }
    }

    pub fn is_upper(self) -> bool {
        self.quadrant() <= 2
    }

    /// Label of the same anatomy after mirroring the image along `axis`.
    pub fn flip(self, axis: FlipAxis) -> FdiCode {
        let q = match (axis, self.quadrant()) {
            (FlipAxis::Horizontal, 1) => 2,
            (FlipAxis::Horizontal, 2) => 1,
            (FlipAxis::Horizontal, 3) => 4,
            (FlipAxis::Horizontal, _) => 3,
            (FlipAxis::Vertical, 1) => 4,
            (FlipAxis::Vertical, 4) => 1,
            (FlipAxis::Vertical, 2) => 3,
            (FlipAxis::Vertical, _) => 2,
        };
        FdiCode(q * 10 + self.position())
    }
}

/// Channel index of a raw two-digit code, rejecting anything outside the 32 permanent teeth.
pub fn channel_of_fdi(code: u32) -> Result<usize> {
    FdiCode::new(code).map(FdiCode::channel)
}

impl TryFrom<u32> for FdiCode {
    type Error = Error;

    fn try_from(code: u32) -> Result<Self> {
        FdiCode::new(code)
    }
}

impl From<FdiCode> for u32 {
    fn from(fdi: FdiCode) -> u32 {
        fdi.code()
    }
}

impl fmt::Display for FdiCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
