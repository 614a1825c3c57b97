//! Branch-free `f32` transcendentals for elementwise kernels.
//!
//! Activation and softmax loops spend most of their time in scalar libm
//! calls, which the compiler cannot vectorize. These replacements are
//! polynomial approximations accurate to a few ulps, written without
//! branches or calls so the surrounding loops autovectorize. The `f64`
//! paths keep exact libm functions, so gradient checks and oracle
//! comparisons done in `f64` are unaffected.

/// `tanh(x)` as the rational `x * p(x^2) / q(x^2)`, with the input clamped
/// to the interval where `tanh` is not yet saturated in `f32`.
///
/// Absolute error stays below `4e-7`; in particular large inputs return a
/// value a few ulps inside `±1` instead of exactly `±1`. NaN propagates.
#[inline(always)]
pub(crate) fn tanh_f32(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311_5;
    const A1: f32 = 4.893_524_6e-3;
    const A3: f32 = 6.372_619_3e-4;
    const A5: f32 = 1.485_722_4e-5;
    const A7: f32 = 5.122_297_1e-8;
    const A9: f32 = -8.604_671_5e-11;
    const A11: f32 = 2.000_187_9e-13;
    const A13: f32 = -2.760_768_5e-16;
    const B0: f32 = 4.893_525_2e-3;
    const B2: f32 = 2.268_434_6e-3;
    const B4: f32 = 1.185_347_1e-4;
    const B6: f32 = 1.198_258_4e-6;

    let x = x.clamp(-CLAMP, CLAMP);
    let s = x * x;
    let p = A13;
    let p = p * s + A11;
    let p = p * s + A9;
    let p = p * s + A7;
    let p = p * s + A5;
    let p = p * s + A3;
    let p = p * s + A1;
    let p = p * x;
    let q = B6;
    let q = q * s + B4;
    let q = q * s + B2;
    let q = q * s + B0;
    p / q
}

/// `exp(x)` by range reduction `x = n*ln2 + r` and a degree-6 polynomial
/// for `exp(r)`, reconstructed as `2^n * exp(r)` through the exponent bits.
///
/// Relative error stays below `4e-7`. Inputs are clamped so the result
/// saturates near `2.3e38` instead of overflowing to infinity, and at the
/// smallest normal instead of producing denormals. NaN propagates.
#[inline(always)]
pub(crate) fn exp_f32(x: f32) -> f32 {
    const HI: f32 = 88.376_26;
    const LO: f32 = -87.336_544;
    const LOG2_E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // 1.5 * 2^23: adding and subtracting rounds to the nearest integer for
    // inputs well under 2^22, without needing an SSE4.1 `round`.
    const ROUND_MAGIC: f32 = 12_582_912.0;
    const P0: f32 = 1.987_569_2e-4;
    const P1: f32 = 1.398_199_9e-3;
    const P2: f32 = 8.333_452e-3;
    const P3: f32 = 4.166_579_6e-2;
    const P4: f32 = 1.666_666_5e-1;
    const P5: f32 = 5.000_000_3e-1;

    let x = x.clamp(LO, HI);
    let n = (x * LOG2_E + ROUND_MAGIC) - ROUND_MAGIC;
    // Split ln2 into a short high part and a correction so `n * ln2` is
    // subtracted almost exactly.
    let r = x - n * LN2_HI;
    let r = r - n * LN2_LO;
    let p = P0;
    let p = p * r + P1;
    let p = p * r + P2;
    let p = p * r + P3;
    let p = p * r + P4;
    let p = p * r + P5;
    let z = p * r * r + r + 1.0;
    let scale = f32::from_bits((((n as i32) + 127) << 23) as u32);
    z * scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_matches_libm_over_a_dense_sweep() {
        let mut worst = 0.0f64;
        for i in -120_000..=120_000 {
            let x = i as f32 * 1e-4;
            let got = tanh_f32(x) as f64;
            let want = (x as f64).tanh();
            worst = worst.max((got - want).abs());
        }
        assert!(worst < 4e-7, "worst absolute error {worst:e}");
    }

    #[test]
    fn tanh_saturates_and_handles_edge_inputs() {
        assert_eq!(tanh_f32(0.0), 0.0);
        assert!((tanh_f32(100.0) - 1.0).abs() < 4e-7);
        assert!((tanh_f32(-100.0) + 1.0).abs() < 4e-7);
        assert!((tanh_f32(f32::INFINITY) - 1.0).abs() < 4e-7);
        assert!((tanh_f32(f32::NEG_INFINITY) + 1.0).abs() < 4e-7);
        assert!(tanh_f32(f32::NAN).is_nan());
        for i in 0..=1000 {
            let x = i as f32 * 1e-8;
            let err = (tanh_f32(x) as f64 - (x as f64).tanh()).abs();
            assert!(err < 1e-9, "near-zero error {err:e} at {x:e}");
        }
    }

    #[test]
    fn exp_matches_libm_over_a_dense_sweep() {
        let mut worst = 0.0f64;
        for i in -870_000..=880_000 {
            let x = i as f32 * 1e-4;
            let got = exp_f32(x) as f64;
            let want = (x as f64).exp();
            let rel = ((got - want) / want).abs();
            worst = worst.max(rel);
        }
        assert!(worst < 4e-7, "worst relative error {worst:e}");
    }

    #[test]
    fn exp_saturates_and_handles_edge_inputs() {
        assert_eq!(exp_f32(0.0), 1.0);
        let sat = exp_f32(1000.0);
        assert!(sat.is_finite() && sat > 2e38);
        assert_eq!(sat, exp_f32(f32::INFINITY));
        let tiny = exp_f32(-1000.0);
        assert!(tiny >= 0.0 && tiny < 2e-38);
        assert!(exp_f32(f32::NAN).is_nan());
    }
}
