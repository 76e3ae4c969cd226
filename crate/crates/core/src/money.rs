//! Fixed-point currency with two fractional digits.
//!
//! Prices and amounts cross API boundaries as `Money`. Internal arithmetic
//! that needs more precision goes through [`Exact`] and is rounded half away
//! from zero when converted back.

use std::fmt;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Exact rational currency value, in whole currency units.
pub type Exact = Ratio<i128>;

/// Currency amount in hundredths of a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(i64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid currency amount {0:?}")]
pub struct ParseMoneyError(pub String);

impl Money {
    pub const ZERO: Money = Money(0);

    pub const fn from_cents(cents: i64) -> Self {
        Money(cents)
    }

    pub const fn from_units(units: i64) -> Self {
        Money(units * 100)
    }

    pub const fn cents(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }

    pub fn exact(self) -> Exact {
        Ratio::new(self.0 as i128, 100)
    }

    /// Rounds an exact value to cents, half away from zero.
    pub fn from_exact(value: Exact) -> Self {
        let scaled = value * Ratio::from_integer(100);
        let numer = *scaled.numer();
        let denom = *scaled.denom();
        // Ratio keeps the denominator positive.
        let q = numer / denom;
        let r = numer % denom;
        let rounded = if 2 * r.abs() >= denom {
            q + numer.signum()
        } else {
            q
        };
        Money(rounded as i64)
    }

    pub fn max(self, other: Money) -> Money {
        if self >= other {
            self
        } else {
            other
        }
    }

    pub fn min(self, other: Money) -> Money {
        if self <= other {
            self
        } else {
            other
        }
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

impl FromStr for Money {
    type Err = ParseMoneyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseMoneyError(s.to_string());
        let t = s.trim();
        let (neg, body) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t.strip_prefix('+').unwrap_or(t)),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err());
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
        {
            return Err(err());
        }
        let int: i128 = if int_part.is_empty() {
            0
        } else {
            int_part.parse().map_err(|_| err())?
        };
        let mut exact = Ratio::from_integer(int);
        if !frac_part.is_empty() {
            let digits: i128 = frac_part.parse().map_err(|_| err())?;
            let scale = 10i128
                .checked_pow(frac_part.len() as u32)
                .ok_or_else(err)?;
            exact += Ratio::new(digits, scale);
        }
        if neg {
            exact = -exact;
        }
        let m = Money::from_exact(exact);
        Ok(m)
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Int(i64),
            Float(f64),
        }
        match Repr::deserialize(d)? {
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Int(i) => Ok(Money::from_units(i)),
            Repr::Float(f) => format!("{f}").parse().map_err(serde::de::Error::custom),
        }
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl SubAssign for Money {
    fn sub_assign(&mut self, rhs: Money) {
        self.0 -= rhs.0;
    }
}

impl Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, |a, b| a + b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        assert_eq!("70".parse::<Money>().unwrap(), Money::from_cents(7000));
        assert_eq!("68.0".parse::<Money>().unwrap(), Money::from_cents(6800));
        assert_eq!("16.665".parse::<Money>().unwrap(), Money::from_cents(1667));
        assert_eq!("-0.005".parse::<Money>().unwrap(), Money::from_cents(-1));
        assert_eq!(Money::from_cents(-150).to_string(), "-1.50");
        assert_eq!(Money::from_cents(5).to_string(), "0.05");
        assert!("7x".parse::<Money>().is_err());
        assert!("".parse::<Money>().is_err());
        assert!(".".parse::<Money>().is_err());
    }

    #[test]
    fn half_away_from_zero() {
        assert_eq!(Money::from_exact(Ratio::new(50, 3)), Money::from_cents(1667));
        assert_eq!(Money::from_exact(Ratio::new(1, 200)), Money::from_cents(1));
        assert_eq!(Money::from_exact(Ratio::new(-1, 200)), Money::from_cents(-1));
        assert_eq!(Money::from_exact(Ratio::new(1, 300)), Money::ZERO);
    }

    #[test]
    fn serde_accepts_numbers_and_strings() {
        let m: Money = serde_json::from_str("\"25.50\"").unwrap();
        assert_eq!(m, Money::from_cents(2550));
        let m: Money = serde_json::from_str("70").unwrap();
        assert_eq!(m, Money::from_units(70));
        let m: Money = serde_json::from_str("35.4").unwrap();
        assert_eq!(m, Money::from_cents(3540));
        assert_eq!(serde_json::to_string(&m).unwrap(), "\"35.40\"");
    }
}
