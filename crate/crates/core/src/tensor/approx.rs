//! Branch-free single-precision `exp` and `tanh`.
//!
//! Written as straight-line arithmetic so loops over them vectorise. Both are
//! accurate to a few ulp, which is below the noise of 32-bit training; the
//! 64-bit verification path uses libm instead.

const EXP_HI: f32 = 88.0;
/// Below this the result would be subnormal; it is flushed to exactly zero,
/// which keeps masked attention weights exactly zero.
const EXP_LO: f32 = -87.336_55;

pub fn exp_f32(x: f32) -> f32 {
    let xc = x.min(EXP_HI).max(EXP_LO);
    // x = n ln2 + r, |r| <= ln2 / 2
    let t = xc * core::f32::consts::LOG2_E + 0.5;
    let mut n = t as i32 as f32;
    n -= f32::from(u8::from(n > t));
    let r = xc - n * 0.693_359_4 - n * -2.121_944_4e-4;
    let z = r * r;
    let p = ((((1.987_569_1e-4 * r + 1.398_2e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r + 1.666_666_5e-1) * r
        + 5.000_000_1e-1;
    let y = p * z + r + 1.0;
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    if x < EXP_LO {
        0.0
    } else {
        y * scale
    }
}

/// Rational minimax approximation on the clamped range `[-7.9988, 7.9988]`,
/// where `tanh` has already saturated to 1 in single precision.
pub fn tanh_f32(x: f32) -> f32 {
    const CLAMP: f32 = 7.998_811_7;
    let x = x.min(CLAMP).max(-CLAMP);
    let x2 = x * x;
    let mut p = x2 * -2.760_768_5e-16 + 2.000_187_9e-13;
    p = x2 * p + -8.604_671_5e-11;
    p = x2 * p + 5.122_297e-8;
    p = x2 * p + 1.485_722_4e-5;
    p = x2 * p + 6.372_619_3e-4;
    p = x2 * p + 4.893_524_6e-3;
    p *= x;
    let mut q = x2 * 1.198_258_4e-6 + 1.185_347_1e-4;
    q = x2 * q + 2.268_434_6e-3;
    q = x2 * q + 4.893_525_2e-3;
    p / q
}
