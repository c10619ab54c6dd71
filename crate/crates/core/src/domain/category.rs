use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the ten radiograph categories of the source corpus.
///
/// Categories 1-4 show all 32 teeth with or without restorations and
/// appliances, 5 contains dental implants, 6 has supernumerary teeth, and
/// 7-10 mirror 1-4 with missing teeth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct RadiographCategory(u8);

// (all 32 teeth, restoration, appliance, total images, images used)
const TABLE: [(bool, bool, bool, u32, u32); 10] = [
    (true, true, true, 73, 24),
    (true, true, false, 220, 72),
    (true, false, true, 45, 15),
    (true, false, false, 140, 32),
    (false, false, false, 120, 37),
    (false, false, false, 170, 30),
    (false, true, true, 115, 33),
    (false, true, false, 457, 140),
    (false, false, true, 45, 7),
    (false, false, false, 115, 35),
];

impl RadiographCategory {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=10).contains(&id) {
            Ok(RadiographCategory(id))
        } else {
            Err(Error::InvalidCategory(id))
        }
    }

    pub fn all() -> impl Iterator<Item = RadiographCategory> {
        (1..=10).map(RadiographCategory)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    fn row(self) -> (bool, bool, bool, u32, u32) {
        TABLE[self.0 as usize - 1]
    }

    pub fn has_32_teeth(self) -> bool {
        self.row().0
    }

    pub fn has_restoration(self) -> bool {
        self.row().1
    }

    pub fn has_appliance(self) -> bool {
        self.row().2
    }

    pub fn has_implant(self) -> bool {
        self.0 == 5
    }

    pub fn supernumerary(self) -> bool {
        self.0 == 6
    }

    /// Implant and supernumerary images, held out of the second test set.
    pub fn is_critical(self) -> bool {
        self.has_implant() || self.supernumerary()
    }

    /// Images of this category in the full source collection.
    pub fn corpus_count(self) -> u32 {
        self.row().3
    }

    /// Images of this category that carry tooth annotations (425 in total).
    pub fn used_count(self) -> u32 {
        self.row().4
    }

    /// Used-image proportions, indexed by `id - 1`.
    pub fn default_mix() -> [f64; 10] {
        let total: u32 = TABLE.iter().map(|r| r.4).sum();
        let mut mix = [0.0; 10];
        for (w, r) in mix.iter_mut().zip(TABLE.iter()) {
            *w = r.4 as f64 / total as f64;
        }
        mix
    }
}

impl TryFrom<u8> for RadiographCategory {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        RadiographCategory::new(id)
    }
}

impl From<RadiographCategory> for u8 {
    fn from(c: RadiographCategory) -> u8 {
        c.0
    }
}
