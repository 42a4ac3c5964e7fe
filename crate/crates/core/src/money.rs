//! Exact currency arithmetic.
//!
//! Amounts are integer counts of pico-dollars (1e-12 USD). Provider rates are
//! quoted per million tokens with at most six decimals, so a per-token rate is
//! always a whole number of pico-dollars and every cost this crate computes is
//! exact.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const PICOS_PER_DOLLAR: u64 = 1_000_000_000_000;
const SCALE_DIGITS: usize = 12;

/// An exact, non-negative USD amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Usd(u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MoneyError {
    #[error("invalid currency amount {0:?}")]
    Invalid(String),
    #[error("currency amount {0:?} has more precision than 1e-12 USD")]
    TooPrecise(String),
    #[error("currency amount {0:?} overflows")]
    Overflow(String),
}

impl Usd {
    pub const ZERO: Usd = Usd(0);

    pub const fn from_picos(picos: u64) -> Self {
        Usd(picos)
    }

    pub const fn picos(self) -> u64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn checked_add(self, other: Usd) -> Option<Usd> {
        self.0.checked_add(other.0).map(Usd)
    }

    /// Lossy conversion for display and plotting only.
    pub fn to_f64(self) -> f64 {
        self.0 as f64 / PICOS_PER_DOLLAR as f64
    }

    /// Plain decimal rendering with `digits` fractional digits, truncated.
    pub fn format_fixed(self, digits: usize) -> String {
        let whole = self.0 / PICOS_PER_DOLLAR;
        let frac = format!("{:012}", self.0 % PICOS_PER_DOLLAR);
        if digits == 0 {
            return whole.to_string();
        }
        let digits = digits.min(SCALE_DIGITS);
        format!("{whole}.{}", &frac[..digits])
    }
}

impl fmt::Display for Usd {
    /// Shortest exact decimal, at least two fractional digits: `0.00195`, `1.50`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / PICOS_PER_DOLLAR;
        let frac = format!("{:012}", self.0 % PICOS_PER_DOLLAR);
        let trimmed = frac.trim_end_matches('0');
        let shown = if trimmed.len() < 2 { &frac[..2] } else { trimmed };
        write!(f, "{whole}.{shown}")
    }
}

impl FromStr for Usd {
    type Err = MoneyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw = s.trim().trim_start_matches('$');
        let invalid = || MoneyError::Invalid(s.to_string());
        if raw.is_empty() {
            return Err(invalid());
        }
        let (whole, frac) = match raw.split_once('.') {
            Some((w, f)) => (w, f),
            None => (raw, ""),
        };
        if whole.is_empty() && frac.is_empty() {
            return Err(invalid());
        }
        if !whole.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(invalid());
        }
        let frac_trimmed = frac.trim_end_matches('0');
        if frac_trimmed.len() > SCALE_DIGITS {
            return Err(MoneyError::TooPrecise(s.to_string()));
        }
        let whole: u64 = if whole.is_empty() {
            0
        } else {
            whole.parse().map_err(|_| MoneyError::Overflow(s.to_string()))?
        };
        let frac_picos: u64 = if frac_trimmed.is_empty() {
            0
        } else {
            format!("{frac_trimmed:0<12}").parse().map_err(|_| invalid())?
        };
        whole
            .checked_mul(PICOS_PER_DOLLAR)
            .and_then(|w| w.checked_add(frac_picos))
            .map(Usd)
            .ok_or_else(|| MoneyError::Overflow(s.to_string()))
    }
}

impl Add for Usd {
    type Output = Usd;
    fn add(self, rhs: Usd) -> Usd {
        Usd(self.0 + rhs.0)
    }
}

impl AddAssign for Usd {
    fn add_assign(&mut self, rhs: Usd) {
        self.0 += rhs.0;
    }
}

impl Mul<u64> for Usd {
    type Output = Usd;
    fn mul(self, rhs: u64) -> Usd {
        Usd(self.0 * rhs)
    }
}

impl Sum for Usd {
    fn sum<I: Iterator<Item = Usd>>(iter: I) -> Usd {
        iter.fold(Usd::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a Usd> for Usd {
    fn sum<I: Iterator<Item = &'a Usd>>(iter: I) -> Usd {
        iter.copied().sum()
    }
}

// Serialized as a decimal string so JSON readers never see a binary float.
impl Serialize for Usd {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Usd {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A price per token, stored as whole pico-dollars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenRate(u64);

impl TokenRate {
    /// Builds a per-token rate from a price per million tokens, e.g. `0.15`.
    pub fn per_million(price: Usd) -> Result<Self, MoneyError> {
        if !price.picos().is_multiple_of(1_000_000) {
            return Err(MoneyError::TooPrecise(price.to_string()));
        }
        Ok(TokenRate(price.picos() / 1_000_000))
    }

    pub fn parse_per_million(s: &str) -> Result<Self, MoneyError> {
        Self::per_million(s.parse()?)
    }

    pub const fn from_picos_per_token(picos: u64) -> Self {
        TokenRate(picos)
    }

    pub const fn picos_per_token(self) -> u64 {
        self.0
    }

    pub fn per_token(self) -> Usd {
        Usd(self.0)
    }

    pub fn per_million_tokens(self) -> Usd {
        Usd(self.0 * 1_000_000)
    }

    pub fn cost(self, tokens: u64) -> Usd {
        Usd(self.0 * tokens)
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }
}

impl Serialize for TokenRate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(&self.per_million_tokens())
    }
}

impl<'de> Deserialize<'de> for TokenRate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        TokenRate::parse_per_million(&s).map_err(serde::de::Error::custom)
    }
}
