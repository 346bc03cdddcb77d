//! Fixed-point scalars.
//!
//! Money and utility are stored as integer counts of 10^-9 units so that
//! budget traces and optimum comparisons are exact and reproducible. Values
//! coming from JSON as plain numbers are rounded to the nearest unit once,
//! at the boundary.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::str::FromStr;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Units per whole value (nano resolution).
pub const SCALE: i64 = 1_000_000_000;

fn div_round(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    if 2 * r >= den {
        q + 1
    } else {
        q
    }
}

fn format_fixed(units: i64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let sign = if units < 0 { "-" } else { "" };
    let abs = units.unsigned_abs();
    let whole = abs / SCALE as u64;
    let frac = abs % SCALE as u64;
    if frac == 0 {
        write!(f, "{sign}{whole}")
    } else {
        let digits = format!("{frac:09}");
        write!(f, "{sign}{whole}.{}", digits.trim_end_matches('0'))
    }
}

fn parse_fixed(s: &str) -> Result<i64, Error> {
    let bad = || Error::invalid(format!("not a decimal number: {s:?}"));
    let t = s.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    if body.is_empty() {
        return Err(bad());
    }
    let (whole, frac) = body.split_once('.').unwrap_or((body, ""));
    if whole.is_empty() && frac.is_empty() {
        return Err(bad());
    }
    if !whole.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    if frac.len() > 9 && frac[9..].chars().any(|c| c != '0') {
        return Err(Error::invalid(format!(
            "{s:?} has more precision than 1e-9"
        )));
    }
    let whole_units: i128 = if whole.is_empty() {
        0
    } else {
        whole.parse::<i128>().map_err(|_| bad())?
    };
    let mut frac_digits: String = frac.chars().take(9).collect();
    while frac_digits.len() < 9 {
        frac_digits.push('0');
    }
    let frac_units: i128 = frac_digits.parse().map_err(|_| bad())?;
    let total = whole_units * SCALE as i128 + frac_units;
    let total = if neg { -total } else { total };
    i64::try_from(total).map_err(|_| Error::invalid(format!("{s:?} out of range")))
}

fn units_from_f64(x: f64) -> Result<i64, Error> {
    if !x.is_finite() {
        return Err(Error::invalid(format!("non-finite value {x}")));
    }
    let scaled = (x * SCALE as f64).round();
    if scaled.abs() >= i64::MAX as f64 {
        return Err(Error::invalid(format!("value {x} out of range")));
    }
    Ok(scaled as i64)
}

/// An amount of money in nano-units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money(i64);

impl Money {
    pub const ZERO: Money = Money(0);
    /// Large enough to act as an unconstrained budget without overflowing sums.
    pub const UNBOUNDED: Money = Money(i64::MAX / 4);

    pub const fn from_units(units: i64) -> Self {
        Money(units)
    }

    pub const fn units(self) -> i64 {
        self.0
    }

    pub fn from_f64(x: f64) -> Result<Self, Error> {
        units_from_f64(x).map(Money)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / SCALE as f64
    }

    /// Divides by a positive integer, rounding to the nearest unit.
    pub fn div_round(self, by: u64) -> Money {
        assert!(by > 0, "division by zero");
        Money(div_round(self.0 as i128, by as i128) as i64)
    }

    pub fn times(self, n: u64) -> Money {
        Money(
            (self.0 as i128 * n as i128)
                .try_into()
                .expect("money overflow"),
        )
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        format_fixed(self.0, f)
    }
}

impl FromStr for Money {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        parse_fixed(s).map(Money)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0.checked_add(rhs.0).expect("money overflow"))
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0.checked_sub(rhs.0).expect("money overflow"))
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        *self = *self + rhs;
    }
}

impl SubAssign for Money {
    fn sub_assign(&mut self, rhs: Money) {
        *self = *self - rhs;
    }
}

impl Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl Mul<u64> for Money {
    type Output = Money;
    fn mul(self, rhs: u64) -> Money {
        self.times(rhs)
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

struct FixedVisitor;

impl Visitor<'_> for FixedVisitor {
    type Value = i64;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a decimal string or number")
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<i64, E> {
        parse_fixed(v).map_err(E::custom)
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<i64, E> {
        units_from_f64(v).map_err(E::custom)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<i64, E> {
        v.checked_mul(SCALE)
            .ok_or_else(|| E::custom("value out of range"))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<i64, E> {
        i64::try_from(v)
            .ok()
            .and_then(|v| v.checked_mul(SCALE))
            .ok_or_else(|| E::custom("value out of range"))
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(FixedVisitor).map(Money)
    }
}

/// A (proxy) utility score in nano-units. Per-query scores live in [0, 1];
/// totals over a workload may exceed 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Utility(i64);

impl Utility {
    pub const ZERO: Utility = Utility(0);
    pub const ONE: Utility = Utility(SCALE);

    pub const fn from_units(units: i64) -> Self {
        Utility(units)
    }

    pub const fn units(self) -> i64 {
        self.0
    }

    pub fn from_f64(x: f64) -> Result<Self, Error> {
        units_from_f64(x).map(Utility)
    }

    /// Rounds a fraction already known to be finite; panics otherwise.
    pub fn from_fraction(x: f64) -> Self {
        Utility::from_f64(x).expect("finite utility")
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / SCALE as f64
    }
}

impl fmt::Display for Utility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        format_fixed(self.0, f)
    }
}

impl FromStr for Utility {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        parse_fixed(s).map(Utility)
    }
}

impl Add for Utility {
    type Output = Utility;
    fn add(self, rhs: Utility) -> Utility {
        Utility(self.0 + rhs.0)
    }
}

impl Sub for Utility {
    type Output = Utility;
    fn sub(self, rhs: Utility) -> Utility {
        Utility(self.0 - rhs.0)
    }
}

impl AddAssign for Utility {
    fn add_assign(&mut self, rhs: Utility) {
        self.0 += rhs.0;
    }
}

impl Sum for Utility {
    fn sum<I: Iterator<Item = Utility>>(iter: I) -> Utility {
        iter.fold(Utility::ZERO, Add::add)
    }
}

impl Serialize for Utility {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.to_f64())
    }
}

impl<'de> Deserialize<'de> for Utility {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(FixedVisitor).map(Utility)
    }
}

/// A fraction in the open interval (0, 1), held in parts per billion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Epsilon(i64);

impl Epsilon {
    pub const DEFAULT: Epsilon = Epsilon(SCALE / 100);

    pub fn from_ppb(ppb: i64) -> Result<Self, Error> {
        if ppb <= 0 || ppb >= SCALE {
            return Err(Error::invalid(format!(
                "epsilon must lie in (0, 1), got {ppb} ppb"
            )));
        }
        Ok(Epsilon(ppb))
    }

    pub fn from_f64(x: f64) -> Result<Self, Error> {
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::invalid(format!("epsilon must lie in (0, 1), got {x}")));
        }
        Epsilon::from_ppb(units_from_f64(x)?)
    }

    pub const fn ppb(self) -> i64 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / SCALE as f64
    }
}

impl Default for Epsilon {
    fn default() -> Self {
        Epsilon::DEFAULT
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        format_fixed(self.0, f)
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.to_f64())
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let ppb = d.deserialize_any(FixedVisitor)?;
        Epsilon::from_ppb(ppb).map_err(de::Error::custom)
    }
}
