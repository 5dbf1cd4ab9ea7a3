//! Numeric back-ends shared by the geometry and network code.
//!
//! Everything that has to be decided exactly (tree membership, tube
//! intersection predicates, probabilities) runs over [`crate::Exact`].
//! Monte Carlo summaries and quadrature use `f64`.

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};

/// Ordered field used by the generic geometry routines.
pub trait Scalar:
    Clone + Debug + PartialOrd + Signed + FromPrimitive + Send + Sync + 'static
{
    fn from_big(q: &BigRational) -> Self;
    fn to_f64(&self) -> f64;

    fn half() -> Self {
        Self::one() / (Self::one() + Self::one())
    }

    fn min_of(a: Self, b: Self) -> Self {
        if a <= b {
            a
        } else {
            b
        }
    }

    fn max_of(a: Self, b: Self) -> Self {
        if a >= b {
            a
        } else {
            b
        }
    }
}

impl Scalar for f64 {
    fn from_big(q: &BigRational) -> Self {
        ratio_to_f64(q)
    }
    fn to_f64(&self) -> f64 {
        *self
    }
}

impl Scalar for f32 {
    fn from_big(q: &BigRational) -> Self {
        ratio_to_f64(q) as f32
    }
    fn to_f64(&self) -> f64 {
        *self as f64
    }
}

impl Scalar for BigRational {
    fn from_big(q: &BigRational) -> Self {
        q.clone()
    }
    fn to_f64(&self) -> f64 {
        ratio_to_f64(self)
    }
}

impl Scalar for Ratio<i64> {
    fn from_big(q: &BigRational) -> Self {
        Ratio::new(
            q.numer().to_i64().expect("numerator exceeds i64"),
            q.denom().to_i64().expect("denominator exceeds i64"),
        )
    }
    fn to_f64(&self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

impl Scalar for Ratio<i128> {
    fn from_big(q: &BigRational) -> Self {
        Ratio::new(
            q.numer().to_i128().expect("numerator exceeds i128"),
            q.denom().to_i128().expect("denominator exceeds i128"),
        )
    }
    fn to_f64(&self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

/// Nearest double to a big rational, robust to huge numerators and denominators.
pub fn ratio_to_f64(q: &BigRational) -> f64 {
    ToPrimitive::to_f64(q).unwrap_or(f64::NAN)
}

/// `n / d` as an exact rational.
pub fn q(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Integer as an exact rational.
pub fn qi(n: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// `base^exp` as an exact rational (negative exponents allowed).
pub fn qpow(base: i64, exp: i64) -> BigRational {
    let b = BigRational::from_integer(BigInt::from(base));
    if exp >= 0 {
        num_traits::pow(b, exp as usize)
    } else {
        BigRational::one() / num_traits::pow(b, (-exp) as usize)
    }
}

/// Parses `"a/b"`, `"a"` or a finite decimal like `"0.25"` into an exact rational.
pub fn parse_rational(s: &str) -> Option<BigRational> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once('/') {
        let n: BigInt = a.trim().parse().ok()?;
        let d: BigInt = b.trim().parse().ok()?;
        if d.is_zero() {
            return None;
        }
        return Some(BigRational::new(n, d));
    }
    if let Some((ip, fp)) = s.split_once('.') {
        let neg = ip.starts_with('-');
        let ip = ip.trim_start_matches('-');
        let ipn: BigInt = if ip.is_empty() {
            BigInt::zero()
        } else {
            ip.parse().ok()?
        };
        if !fp.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        let fpn: BigInt = if fp.is_empty() {
            BigInt::zero()
        } else {
            fp.parse().ok()?
        };
        let den = num_traits::pow(BigInt::from(10), fp.len());
        let v = BigRational::new(ipn * &den + fpn, den);
        return Some(if neg { -v } else { v });
    }
    let n: BigInt = s.parse().ok()?;
    Some(BigRational::from_integer(n))
}

/// Formats an exact rational as `"a/b"` (or `"a"` for integers).
pub fn fmt_rational(q: &BigRational) -> String {
    if q.denom().is_one() {
        q.numer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

/// Floor of a rational as a big integer.
pub fn floor_big(q: &BigRational) -> BigInt {
    q.floor().to_integer()
}

/// Serde adapters writing rationals as `"a/b"` strings.
pub mod rational_str {
    use num_rational::BigRational;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(q: &BigRational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::fmt_rational(q))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigRational, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_rational(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("not a rational: {s}")))
    }

    pub mod vec {
        use num_rational::BigRational;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[BigRational], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(crate::scalar::fmt_rational))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BigRational>, D::Error> {
            let v = Vec::<String>::deserialize(d)?;
            v.iter()
                .map(|s| {
                    crate::scalar::parse_rational(s)
                        .ok_or_else(|| serde::de::Error::custom(format!("not a rational: {s}")))
                })
                .collect()
        }
    }

    pub mod opt {
        use num_rational::BigRational;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(q: &Option<BigRational>, s: S) -> Result<S::Ok, S::Error> {
            match q {
                Some(q) => s.serialize_some(&crate::scalar::fmt_rational(q)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Option<BigRational>, D::Error> {
            match Option::<String>::deserialize(d)? {
                None => Ok(None),
                Some(s) => crate::scalar::parse_rational(&s)
                    .map(Some)
                    .ok_or_else(|| serde::de::Error::custom(format!("not a rational: {s}"))),
            }
        }
    }
}
