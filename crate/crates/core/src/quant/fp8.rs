//! E4M3 8-bit floats: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits.
//!
//! Codes `0x7f` and `0xff` are NaN; there is no infinity. Encoding only
//! accepts `|x| ≤ 6`, the quantizer routes larger magnitudes to FP16.

use crate::error::{Error, Result};

/// Largest magnitude the quantizer codes in 8 bits.
pub const RANGE: f32 = 6.0;

const BIAS: i32 = 7;
const MIN_NORMAL_EXP: i32 = 1 - BIAS;

pub fn decode(code: u8) -> f32 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = ((code >> 3) & 0x0f) as i32;
    let man = (code & 0x07) as f32;
    if exp == 0x0f && code & 0x07 == 0x07 {
        return f32::NAN;
    }
    let mag = if exp == 0 {
        man / 8.0 * 2f32.powi(MIN_NORMAL_EXP)
    } else {
        (1.0 + man / 8.0) * 2f32.powi(exp - BIAS)
    };
    sign * mag
}

/// Round-to-nearest-even onto the E4M3 grid.
pub fn encode(x: f32) -> Result<u8> {
    if !x.is_finite() || x.abs() > RANGE {
        return Err(Error::Fp8Range(x));
    }
    let sign = if x.is_sign_negative() { 0x80u8 } else { 0 };
    let a = x.abs() as f64;
    if a == 0.0 {
        return Ok(sign);
    }
    // Binary exponent of `a`, floored at the subnormal range.
    let e = ((x.abs().to_bits() >> 23) as i32 - 127).max(MIN_NORMAL_EXP);
    let step = 2f64.powi(e - 3);
    let q = (a / step).round_ties_even() as u32;
    let code = if e == MIN_NORMAL_EXP && q < 8 {
        q as u8
    } else if q == 16 {
        (((e + 1 + BIAS) as u8) << 3) & 0x78
    } else {
        (((e + BIAS) as u8) << 3) | (q - 8) as u8
    };
    Ok(sign | code)
}

/// Every code's value, indexed by code.
pub fn decode_table() -> [f32; 256] {
    std::array::from_fn(|c| decode(c as u8))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_in_range_code_reencodes_to_itself() {
        let mut checked = 0;
        for c in 0..=255u8 {
            let v = decode(c);
            if v.is_nan() {
                assert!(c == 0x7f || c == 0xff);
                continue;
            }
            if v.abs() <= RANGE {
                assert_eq!(encode(v).unwrap(), c, "code {c:#04x} value {v}");
                checked += 1;
            } else {
                assert!(encode(v).is_err());
            }
        }
        // 6.0 is 0x4c, so codes 0x00..=0x4c and their negatives
        assert_eq!(checked, 2 * 0x4d);
    }

    #[test]
    fn known_values() {
        assert_eq!(encode(0.0).unwrap(), 0);
        assert_eq!(decode(encode(0.5).unwrap()), 0.5);
        assert_eq!(decode(encode(6.0).unwrap()), 6.0);
        assert_eq!(decode(0x01), 2f32.powi(-9));
        assert_eq!(decode(0x7e), 448.0);
        // 1.0625 lies halfway between 1.0 and 1.125; ties go to the even mantissa
        assert_eq!(decode(encode(1.0625).unwrap()), 1.0);
        assert_eq!(decode(encode(1.1875).unwrap()), 1.25);
        assert!(encode(6.0001).is_err());
        assert!(encode(f32::NAN).is_err());
    }

    #[test]
    fn relative_error_bounded_in_normal_range() {
        let mut x = 2f32.powi(MIN_NORMAL_EXP);
        while x <= RANGE {
            for v in [x, -x] {
                let r = decode(encode(v).unwrap());
                assert!(((r - v) / v).abs() <= 1.0 / 16.0 + 1e-7, "{v} -> {r}");
            }
            x *= 1.013;
        }
    }

    #[test]
    fn subnormal_error_bounded_by_half_step() {
        let step = 2f32.powi(-9);
        let mut x = 0.0f32;
        while x < 2f32.powi(MIN_NORMAL_EXP) {
            let r = decode(encode(x).unwrap());
            assert!((r - x).abs() <= step / 2.0 + 1e-9);
            x += step / 7.0;
        }
    }
}
