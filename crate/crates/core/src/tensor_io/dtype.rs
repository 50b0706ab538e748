//! Element types and the 16-bit float codecs.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Storage dtype of a tensor as named in a safetensors header.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
    /// Any other header dtype (integers, bool, fp8, ...). Kept by name so the
    /// payload can be passed through verbatim.
    Unsupported(String),
}

impl DType {
    pub fn parse(name: &str) -> Self {
        match name {
            "F64" => DType::F64,
            "F32" => DType::F32,
            "F16" => DType::F16,
            "BF16" => DType::BF16,
            other => DType::Unsupported(other.to_string()),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::Unsupported(name) => name,
        }
    }

    pub fn is_float(&self) -> bool {
        !matches!(self, DType::Unsupported(_))
    }

    /// Element width in bytes when known. Unsupported dtypes that the
    /// safetensors format defines still report their width so header byte
    /// ranges can be validated.
    pub fn byte_width(&self) -> Option<usize> {
        match self {
            DType::F64 => Some(8),
            DType::F32 => Some(4),
            DType::F16 | DType::BF16 => Some(2),
            DType::Unsupported(name) => match name.as_str() {
                "I64" | "U64" => Some(8),
                "I32" | "U32" => Some(4),
                "I16" | "U16" => Some(2),
                "I8" | "U8" | "BOOL" | "F8_E4M3" | "F8_E5M2" => Some(1),
                _ => None,
            },
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for DType {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for DType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        Ok(DType::parse(&name))
    }
}

const F16_EXP: u32 = 5;
const F16_MAN: u32 = 10;
const BF16_EXP: u32 = 8;
const BF16_MAN: u32 = 7;

/// IEEE 754 binary16 to f64. Total over all bit patterns.
pub fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> F16_MAN) & 0x1f) as i32;
    let man = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * man * 2f64.powi(-24),
        0x1f if man == 0.0 => sign * f64::INFINITY,
        0x1f => f64::NAN,
        _ => sign * (1024.0 + man) * 2f64.powi(exp - 25),
    }
}

/// bfloat16 to f64: the pattern is the high half of a binary32.
pub fn bf16_to_f64(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}

/// f64 to binary16, round to nearest, ties to even. Overflow goes to ±inf.
pub fn f64_to_f16(x: f64) -> u16 {
    encode_small_float(x, F16_EXP, F16_MAN)
}

/// f64 to bfloat16, round to nearest, ties to even, rounding directly from
/// the f64 value (no intermediate binary32 rounding).
pub fn f64_to_bf16(x: f64) -> u16 {
    encode_small_float(x, BF16_EXP, BF16_MAN)
}

fn encode_small_float(x: f64, exp_bits: u32, man_bits: u32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 63) as u16) << (exp_bits + man_bits);
    let exp_max = (1u64 << exp_bits) - 1;
    let inf = (exp_max << man_bits) as u16;
    if x.is_nan() {
        return sign | inf | (1 << (man_bits - 1));
    }
    if x.is_infinite() {
        return sign | inf;
    }
    let e64 = ((bits >> 52) & 0x7ff) as i64;
    if e64 == 0 {
        // zero or f64 subnormal: far below the smallest 16-bit subnormal
        return sign;
    }
    let sig = (1u64 << 52) | (bits & ((1u64 << 52) - 1));
    let bias = (1i64 << (exp_bits - 1)) - 1;
    let target_exp = e64 - 1023 + bias;
    if target_exp >= exp_max as i64 {
        return sign | inf;
    }
    let shift = if target_exp >= 1 {
        (52 - man_bits) as i64
    } else {
        (52 - man_bits) as i64 + (1 - target_exp)
    };
    if shift >= 54 {
        return sign;
    }
    let shift = shift as u32;
    let kept = sig >> shift;
    let rem = sig & ((1u64 << shift) - 1);
    let halfway = 1u64 << (shift - 1);
    let round_up = rem > halfway || (rem == halfway && kept & 1 == 1);
    let rounded = kept + round_up as u64;
    // For normals `rounded` carries the implicit bit at position man_bits,
    // so adding (exp - 1) << man_bits assembles the field and lets a mantissa
    // carry ripple into the exponent.
    let magnitude = if target_exp >= 1 {
        (((target_exp - 1) as u64) << man_bits) + rounded
    } else {
        rounded
    };
    if magnitude >= exp_max << man_bits {
        return sign | inf;
    }
    sign | magnitude as u16
}
