//! Bit-level conversions between `f64`/`f32` and the 16-bit float formats.
//!
//! Every narrowing conversion goes through [`round_f64`], which rounds an
//! `f64` straight to the target format with round-to-nearest-even. Since every
//! `f32` is exactly representable as an `f64`, `f32 -> bf16` and `f32 -> f16`
//! are single roundings too, and the merge path can round its `f64` result to
//! a 16-bit base dtype without passing through `f32`.

/// Layout of a binary interchange format narrower than `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FloatFormat {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
}

pub const BF16: FloatFormat = FloatFormat {
    exponent_bits: 8,
    mantissa_bits: 7,
};

pub const F16: FloatFormat = FloatFormat {
    exponent_bits: 5,
    mantissa_bits: 10,
};

impl FloatFormat {
    const fn bias(self) -> i32 {
        (1 << (self.exponent_bits - 1)) - 1
    }

    const fn exponent_mask(self) -> u32 {
        ((1 << self.exponent_bits) - 1) << self.mantissa_bits
    }

    const fn sign_bit(self) -> u32 {
        1 << (self.exponent_bits + self.mantissa_bits)
    }
}

/// Rounds `value` to the nearest representable value of `format` (ties to
/// even) and returns its bit pattern.
///
/// Overflow produces a signed infinity. NaN stays NaN with its top payload
/// bits carried over; the quiet bit is set only if those bits are all zero.
pub fn round_f64(value: f64, format: FloatFormat) -> u32 {
    let m = format.mantissa_bits;
    let bits = value.to_bits();
    let sign = if bits >> 63 == 1 { format.sign_bit() } else { 0 };
    let exp_field = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);

    if exp_field == 0x7ff {
        if frac == 0 {
            return sign | format.exponent_mask();
        }
        let payload = (frac >> (52 - m)) as u32;
        let payload = if payload == 0 { 1 << (m - 1) } else { payload };
        return sign | format.exponent_mask() | payload;
    }
    if exp_field == 0 && frac == 0 {
        return sign;
    }

    // value = significand * 2^scale, significand an integer
    let (significand, scale) = if exp_field == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_field - 1075)
    };
    let magnitude_exp = (63 - significand.leading_zeros() as i32) + scale;
    let min_normal_exp = 1 - format.bias();
    let quantum_exp = magnitude_exp.max(min_normal_exp) - m as i32;

    // Target quantum is always coarser than the f64 quantum here.
    let shift = (quantum_exp - scale) as u32;
    let wide = significand as u128;
    let quanta = if shift >= 128 {
        0
    } else {
        let kept = wide >> shift;
        let rest = wide & ((1u128 << shift) - 1);
        let half = 1u128 << (shift - 1);
        if rest > half || (rest == half && kept & 1 == 1) {
            kept + 1
        } else {
            kept
        }
    };

    let base = (magnitude_exp.max(min_normal_exp) + format.bias() - 1) as u128;
    let encoded = (base << m) + quanta;
    if encoded >= format.exponent_mask() as u128 {
        return sign | format.exponent_mask();
    }
    sign | encoded as u32
}

/// Decodes a bit pattern of `format` to `f64`. Exact for every input.
pub fn decode(bits: u32, format: FloatFormat) -> f64 {
    let m = format.mantissa_bits;
    let sign = if bits & format.sign_bit() != 0 { -1.0 } else { 1.0 };
    let exp_field = ((bits & format.exponent_mask()) >> m) as i32;
    let frac = bits & ((1 << m) - 1);
    let max_field = (1 << format.exponent_bits) - 1;

    if exp_field == max_field {
        if frac == 0 {
            return sign * f64::INFINITY;
        }
        let payload = (frac as u64) << (52 - m);
        let sign_bit = if sign < 0.0 { 1u64 << 63 } else { 0 };
        return f64::from_bits(sign_bit | (0x7ffu64 << 52) | payload);
    }
    let (significand, exp) = if exp_field == 0 {
        (frac as f64, min_exp(format))
    } else {
        ((frac | (1 << m)) as f64, exp_field - format.bias())
    };
    sign * significand * 2f64.powi(exp - m as i32)
}

fn min_exp(format: FloatFormat) -> i32 {
    1 - format.bias()
}

pub fn f32_to_bf16(value: f32) -> u16 {
    if value.is_nan() {
        // `as f64` may quiet a signaling NaN, so work on the raw bits
        let high = (value.to_bits() >> 16) as u16;
        return if high & 0x7f == 0 { high | 0x40 } else { high };
    }
    round_f64(value as f64, BF16) as u16
}

/// Exact; NaN payloads are preserved bit for bit.
pub fn bf16_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

pub fn f64_to_bf16(value: f64) -> u16 {
    round_f64(value, BF16) as u16
}

pub fn f32_to_f16(value: f32) -> u16 {
    round_f64(value as f64, F16) as u16
}

pub fn f64_to_f16(value: f64) -> u16 {
    round_f64(value, F16) as u16
}

pub fn f16_to_f64(bits: u16) -> f64 {
    decode(bits as u32, F16)
}

pub fn bf16_to_f64(bits: u16) -> f64 {
    bf16_to_f32(bits) as f64
}
