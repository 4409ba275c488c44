//! Software emulation of 8-bit floating point casts with per-tensor scaling.
//!
//! Values are kept as `f64` but rounded (nearest, ties to even) onto the grid
//! of the target format. Scaling maps the tensor's absolute maximum onto the
//! format's largest finite value before the cast.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the all-ones exponent field is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Specials {
    /// Top exponent reserved for Inf/NaN (IEEE style, e.g. e5m2).
    Ieee,
    /// Top exponent holds finite values; only all-ones mantissa there is NaN (e.g. e4m3).
    FiniteOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FloatFormat {
    pub exp_bits: u32,
    pub man_bits: u32,
    pub bias: i32,
    pub saturating: bool,
    pub specials: Specials,
}

impl FloatFormat {
    pub const E4M3: FloatFormat =
        FloatFormat { exp_bits: 4, man_bits: 3, bias: 7, saturating: true, specials: Specials::FiniteOnly };
    pub const E5M2: FloatFormat =
        FloatFormat { exp_bits: 5, man_bits: 2, bias: 15, saturating: true, specials: Specials::Ieee };
    pub const E3M4: FloatFormat =
        FloatFormat { exp_bits: 3, man_bits: 4, bias: 3, saturating: true, specials: Specials::FiniteOnly };

    pub fn new(exp_bits: u32, man_bits: u32, bias: i32, saturating: bool, specials: Specials) -> Result<Self> {
        if exp_bits + man_bits != 7 || exp_bits < 2 || man_bits < 1 {
            return Err(Error::Config(format!("e{exp_bits}m{man_bits} is not an 8-bit format")));
        }
        Ok(Self { exp_bits, man_bits, bias, saturating, specials })
    }

    /// Parses `e4m3`, `e5m2`, `e3m4`; `none` yields `None`.
    pub fn parse(name: &str) -> Result<Option<Self>> {
        match name {
            "none" => Ok(None),
            "e4m3" => Ok(Some(Self::E4M3)),
            "e5m2" => Ok(Some(Self::E5M2)),
            "e3m4" => Ok(Some(Self::E3M4)),
            other => Err(Error::Config(format!("unknown float format `{other}`"))),
        }
    }

    pub fn name(&self) -> String {
        format!("e{}m{}", self.exp_bits, self.man_bits)
    }

    /// Exponent of the smallest normal value.
    pub fn min_exponent(&self) -> i32 {
        1 - self.bias
    }

    pub fn max_exponent(&self) -> i32 {
        let top = (1i32 << self.exp_bits) - 1;
        match self.specials {
            Specials::Ieee => top - 1 - self.bias,
            Specials::FiniteOnly => top - self.bias,
        }
    }

    pub fn max_value(&self) -> f64 {
        let ulp = (-(self.man_bits as i32) as f64).exp2();
        let mantissa = match self.specials {
            Specials::Ieee => 2.0 - ulp,
            Specials::FiniteOnly => 2.0 - 2.0 * ulp,
        };
        (self.max_exponent() as f64).exp2() * mantissa
    }

    pub fn min_normal(&self) -> f64 {
        (self.min_exponent() as f64).exp2()
    }

    pub fn min_subnormal(&self) -> f64 {
        ((self.min_exponent() - self.man_bits as i32) as f64).exp2()
    }

    /// Value of a raw 8-bit code (sign, exponent, mantissa).
    pub fn decode(&self, code: u8) -> f64 {
        let man_mask = (1u32 << self.man_bits) - 1;
        let exp_mask = (1u32 << self.exp_bits) - 1;
        let c = code as u32;
        let sign = if c >> 7 == 1 { -1.0 } else { 1.0 };
        let e = (c >> self.man_bits) & exp_mask;
        let f = c & man_mask;
        if e == exp_mask {
            match self.specials {
                Specials::Ieee => return if f == 0 { sign * f64::INFINITY } else { f64::NAN },
                Specials::FiniteOnly if f == man_mask => return f64::NAN,
                Specials::FiniteOnly => {}
            }
        }
        let frac = f as f64 / (1u32 << self.man_bits) as f64;
        if e == 0 {
            sign * self.min_normal() * frac
        } else {
            sign * ((e as i32 - self.bias) as f64).exp2() * (1.0 + frac)
        }
    }

    /// Every finite value of the format, ascending, with a single zero.
    pub fn grid(&self) -> Vec<f64> {
        let mut vals: Vec<f64> = (0..=255u8).map(|c| self.decode(c)).filter(|v| v.is_finite()).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup_by(|a, b| a == b);
        vals
    }

    /// Rounds one value onto the format grid.
    pub fn round(&self, x: f64) -> f64 {
        if x.is_nan() {
            return x;
        }
        if x == 0.0 {
            return 0.0;
        }
        let max = self.max_value();
        let a = x.abs();
        let q = if a.is_infinite() {
            f64::INFINITY
        } else {
            let e = binary_exponent(a).max(self.min_exponent());
            let ulp = ((e - self.man_bits as i32) as f64).exp2();
            (a / ulp).round_ties_even() * ulp
        };
        let q = if q > max {
            if self.saturating {
                max
            } else {
                f64::INFINITY
            }
        } else {
            q
        };
        q.copysign(x)
    }
}

/// floor(log2(a)) for positive finite `a`.
fn binary_exponent(a: f64) -> i32 {
    let bits = a.to_bits();
    let raw = ((bits >> 52) & 0x7ff) as i32;
    if raw == 0 {
        // f64 subnormal; far below any 8-bit format's range
        -1074
    } else {
        raw - 1023
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledQuantizedTensor {
    /// Grid values of the format, stored as `f64`.
    pub codes: Tensor,
    pub scale: f64,
    pub format: FloatFormat,
}

/// `max_value / amax(|t|)`, or 1 for an all-zero tensor.
pub fn compute_scale(t: &Tensor, fmt: &FloatFormat) -> Result<f64> {
    t.check_finite()?;
    let amax = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if amax == 0.0 {
        return Ok(1.0);
    }
    Ok(fmt.max_value() / amax)
}

pub fn quantize(t: &Tensor, fmt: &FloatFormat, scale: f64) -> Result<ScaledQuantizedTensor> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("scale must be positive and finite, got {scale}")));
    }
    t.check_finite()?;
    Ok(ScaledQuantizedTensor { codes: t.map(|v| fmt.round(v * scale)), scale, format: *fmt })
}

pub fn dequantize(q: &ScaledQuantizedTensor) -> Tensor {
    q.codes.map(|v| v / q.scale)
}

/// Scale, cast, and cast back: the tensor a GEMM would see.
pub fn fake_quantize(t: &Tensor, fmt: &FloatFormat) -> Result<Tensor> {
    let scale = compute_scale(t, fmt)?;
    Ok(dequantize(&quantize(t, fmt, scale)?))
}
