//! Fixed-width bit vector naming a subset of the model pool.
//!
//! Bit `i` (value `1 << i`) marks pool model `i`. The textual form is a
//! binary literal written most-significant digit first, so `0b0110101` over a
//! 7-model pool selects models 0, 2, 4 and 5.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Largest pool the mask representation supports.
pub const MAX_POOL: usize = 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnsembleMask {
    bits: u64,
    pool_size: u8,
}

impl EnsembleMask {
    /// Builds a mask over a pool of `pool_size` models. Requires at least two members.
    pub fn new(bits: u64, pool_size: usize) -> Result<Self> {
        let mask = Self::new_unchecked(bits, pool_size)?;
        if mask.size() < 2 {
            return Err(Error::InvalidMask(format!(
                "{mask} has {} member(s), at least 2 required",
                mask.size()
            )));
        }
        Ok(mask)
    }

    /// Like [`EnsembleMask::new`] but allows fewer than two members.
    ///
    /// Single-model "ensembles" are useful when evaluating base models through
    /// the same combiner machinery.
    pub fn new_unchecked(bits: u64, pool_size: usize) -> Result<Self> {
        if pool_size == 0 || pool_size > MAX_POOL {
            return Err(Error::InvalidMask(format!(
                "pool size {pool_size} outside 1..={MAX_POOL}"
            )));
        }
        if bits >> pool_size != 0 {
            return Err(Error::InvalidMask(format!(
                "bits {bits:#b} reference models beyond pool size {pool_size}"
            )));
        }
        Ok(Self {
            bits,
            pool_size: pool_size as u8,
        })
    }

    pub fn from_members(members: &[usize], pool_size: usize) -> Result<Self> {
        let mut bits = 0u64;
        for &i in members {
            if i >= pool_size {
                return Err(Error::InvalidMask(format!(
                    "member {i} outside pool of {pool_size}"
                )));
            }
            bits |= 1 << i;
        }
        Self::new(bits, pool_size)
    }

    /// All models of the pool.
    pub fn full(pool_size: usize) -> Result<Self> {
        Self::new(low_bits(pool_size), pool_size)
    }

    pub fn parse(text: &str, pool_size: usize) -> Result<Self> {
        let digits = text.trim();
        let digits = digits
            .strip_prefix("0b")
            .or_else(|| digits.strip_prefix("0B"))
            .unwrap_or(digits);
        if digits.is_empty() || digits.len() > MAX_POOL {
            return Err(Error::InvalidMask(format!("cannot parse `{text}`")));
        }
        let bits = u64::from_str_radix(digits, 2)
            .map_err(|_| Error::InvalidMask(format!("cannot parse `{text}` as binary")))?;
        Self::new(bits, pool_size)
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size as usize
    }

    /// Number of members (m).
    pub fn size(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn contains(&self, model: usize) -> bool {
        model < 64 && self.bits & (1 << model) != 0
    }

    /// Member indices in ascending order.
    pub fn members(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size());
        let mut rest = self.bits;
        while rest != 0 {
            out.push(rest.trailing_zeros() as usize);
            rest &= rest - 1;
        }
        out
    }

    /// Lexicographic order on the ascending member lists.
    pub fn lex_cmp(&self, other: &Self) -> Ordering {
        let (mut a, mut b) = (self.bits, other.bits);
        loop {
            match (a == 0, b == 0) {
                (true, true) => return Ordering::Equal,
                (true, false) => return Ordering::Less,
                (false, true) => return Ordering::Greater,
                (false, false) => {
                    let (ia, ib) = (a.trailing_zeros(), b.trailing_zeros());
                    if ia != ib {
                        return ia.cmp(&ib);
                    }
                    a &= a - 1;
                    b &= b - 1;
                }
            }
        }
    }
}

pub(crate) fn low_bits(n: usize) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// Ranking order shared by every search: higher score first, then fewer
/// members, then lexicographically smaller member list.
pub fn rank_order(a_score: f64, a: &EnsembleMask, b_score: f64, b: &EnsembleMask) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a.size().cmp(&b.size()))
        .then_with(|| a.lex_cmp(b))
}

impl fmt::Display for EnsembleMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0b{:0width$b}", self.bits, width = self.pool_size as usize)
    }
}

impl FromStr for EnsembleMask {
    type Err = Error;

    /// Pool size is taken from the number of digits.
    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim().trim_start_matches("0b").trim_start_matches("0B");
        let mask = Self::parse(s, digits.len())?;
        Ok(mask)
    }
}

impl Serialize for EnsembleMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EnsembleMask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let digits = text.trim_start_matches("0b");
        Self::new_unchecked(
            u64::from_str_radix(digits, 2).map_err(serde::de::Error::custom)?,
            digits.len(),
        )
        .map_err(serde::de::Error::custom)
    }
}
