//! Exact decimal money and per-token prices.
//!
//! Costs are stored with six fractional digits and rendered with four in
//! human-facing tables. Prices keep full decimal precision because a single
//! token usually costs far less than a micro-dollar.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Fractional digits kept for every stored money amount.
pub const MONEY_SCALE: u32 = 6;

/// Fractional digits shown in human-readable tables.
pub const DISPLAY_SCALE: u32 = 4;

/// A non-negative dollar amount with exactly [`MONEY_SCALE`] fractional digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(Decimal);

impl Money {
    pub const ZERO: Money = Money(Decimal::ZERO);

    /// Rounds `amount` to six fractional digits (ties to even).
    pub fn from_decimal(amount: Decimal) -> Self {
        let mut d = amount.round_dp_with_strategy(MONEY_SCALE, RoundingStrategy::MidpointNearestEven);
        d.rescale(MONEY_SCALE);
        Money(d)
    }

    /// Whole micro-dollars.
    pub fn from_micros(micros: i64) -> Self {
        Money(Decimal::new(micros, MONEY_SCALE))
    }

    pub fn as_decimal(&self) -> Decimal {
        self.0
    }

    pub fn micros(&self) -> i64 {
        let scaled = self.0 * Decimal::from(1_000_000u32);
        i64::try_from(scaled.trunc()).unwrap_or(i64::MAX)
    }

    /// Divides by a positive count, rounding to six digits. Used for averages.
    pub fn div_count(&self, n: usize) -> Money {
        if n == 0 {
            return Money::ZERO;
        }
        Money::from_decimal(self.0 / Decimal::from(n as u64))
    }

    /// Four-digit rendering for tables, e.g. `$0.0003`.
    pub fn display_short(&self) -> String {
        let mut d = self.0.round_dp_with_strategy(DISPLAY_SCALE, RoundingStrategy::MidpointNearestEven);
        d.rescale(DISPLAY_SCALE);
        format!("${d}")
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}", self.0)
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

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a Money> for Money {
    fn sum<I: Iterator<Item = &'a Money>>(iter: I) -> Money {
        iter.copied().sum()
    }
}

impl FromStr for Money {
    type Err = rust_decimal::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().trim_start_matches('$');
        Decimal::from_str(s).map(Money::from_decimal)
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Money::from_str(&raw).map_err(serde::de::Error::custom)
    }
}

/// Dollars per token, exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Price(Decimal);

impl Price {
    pub const ZERO: Price = Price(Decimal::ZERO);

    pub fn per_token(d: Decimal) -> Self {
        Price(d.normalize())
    }

    /// Convenience for the usual "$X per million tokens" quoting.
    pub fn per_million(dollars: Decimal) -> Self {
        Price((dollars / Decimal::from(1_000_000u32)).normalize())
    }

    pub fn as_decimal(&self) -> Decimal {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_sign_negative() && !self.0.is_zero()
    }

    /// Exact product with a token count (not yet rounded to money scale).
    pub fn times(&self, tokens: u64) -> Decimal {
        self.0 * Decimal::from(tokens)
    }
}

impl fmt::Display for Price {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Price {
    type Err = rust_decimal::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().trim_start_matches('$');
        Decimal::from_str(s).or_else(|_| Decimal::from_scientific(s)).map(Price::per_token)
    }
}

impl Serialize for Price {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0.to_string())
    }
}

/// Accepts either a decimal string (`"0.00001"`) or a plain number. Numbers
/// go through their shortest round-trip text form so `1e-5` stays exact.
impl<'de> Deserialize<'de> for Price {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(i64),
            Float(f64),
        }
        let text = match Raw::deserialize(deserializer)? {
            Raw::Text(s) => s,
            Raw::Int(i) => i.to_string(),
            Raw::Float(f) => format!("{f:?}"),
        };
        Price::from_str(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn money_keeps_six_digits() {
        let m = Money::from_str("0.13").unwrap();
        assert_eq!(m.to_string(), "$0.130000");
        assert_eq!(m.display_short(), "$0.1300");
        assert_eq!(m.micros(), 130_000);
    }

    #[test]
    fn money_rounds_ties_to_even() {
        let m = Money::from_decimal(Decimal::from_str("0.0000005").unwrap());
        assert_eq!(m, Money::ZERO);
        let m = Money::from_decimal(Decimal::from_str("0.0000015").unwrap());
        assert_eq!(m, Money::from_micros(2));
    }

    #[test]
    fn price_parses_float_and_scientific() {
        let from_float: Price = serde_json::from_str("0.00001").unwrap();
        let from_text: Price = serde_json::from_str("\"1e-5\"").unwrap();
        assert_eq!(from_float, from_text);
        assert_eq!(from_float, Price::per_million(Decimal::from(10)));
    }

    #[test]
    fn money_serde_round_trip() {
        let m = Money::from_micros(54_321);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "\"0.054321\"");
        assert_eq!(serde_json::from_str::<Money>(&s).unwrap(), m);
    }

    #[test]
    fn average_over_runs() {
        let total = Money::from_micros(1_000_001);
        assert_eq!(total.div_count(8), Money::from_micros(125_000));
        assert_eq!(total.div_count(0), Money::ZERO);
    }
}
