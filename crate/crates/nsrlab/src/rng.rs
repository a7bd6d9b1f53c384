//! Stateless counter-based random streams.
//!
//! Every draw is a pure function of `(seed, stream, step, coord)`, so
//! rollouts can be evaluated in any order, on any number of worker
//! threads, and resumed at any index while producing bit-identical
//! values. `stream` is the rollout (or trajectory) index, `step` the
//! time index within it, `coord` the coordinate of a vector draw.
//!
//! Uniforms map the mixed 64-bit counter to the open interval (0,1);
//! normals go through an inverse-CDF evaluation (Acklam's rational
//! approximation, then one Halley refinement against an erfc-based CDF)
//! accurate to well below 1e-9 relative error over the full reachable
//! range.

/// Step index reserved for initial-state draws, so they never collide
/// with per-step noise draws (time indices are far smaller in practice).
pub const INIT_STATE_STEP: u64 = u32::MAX as u64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixed 64-bit counter value for the given coordinates.
///
/// Each input is folded into the running hash and re-finalized, so
/// neighboring indices land in unrelated places.
#[inline]
pub fn counter_u64(seed: u64, stream: u64, step: u64, coord: u64) -> u64 {
    let mut h = mix(seed.wrapping_add(GOLDEN));
    h = mix(h ^ stream.wrapping_add(GOLDEN.wrapping_mul(3)));
    h = mix(h ^ step.wrapping_add(GOLDEN.wrapping_mul(5)));
    mix(h ^ coord.wrapping_add(GOLDEN.wrapping_mul(7)))
}

/// Maps a 64-bit word to the open interval (0,1): the top 52 bits pick
/// one of 2^52 equal bins, and the value is the bin midpoint. Midpoints
/// are exactly representable (53 significant bits), so the result can
/// never round to 0.0 or 1.0.
#[inline]
pub(crate) fn u64_to_uniform(x: u64) -> f64 {
    ((x >> 12) as f64 + 0.5) * (1.0 / 4503599627370496.0) // 2^-52
}

/// Uniform draw in the open interval (0,1).
#[inline]
pub fn uniform01(seed: u64, stream: u64, step: u64, coord: u64) -> f64 {
    u64_to_uniform(counter_u64(seed, stream, step, coord))
}

/// Standard normal draw.
#[inline]
pub fn standard_normal(seed: u64, stream: u64, step: u64, coord: u64) -> f64 {
    normal_quantile(uniform01(seed, stream, step, coord))
}

// Acklam's rational approximation to the standard normal quantile.
const A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];
const P_LOW: f64 = 0.02425;

/// Standard normal quantile (inverse CDF) for `u` in (0,1).
///
/// Acklam's approximation (raw relative error ~1.15e-9) followed by one
/// Halley refinement step, giving ~1e-13 relative error. Arguments at
/// or outside {0, 1} return +/- infinity.
pub fn normal_quantile(u: f64) -> f64 {
    if u <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if u >= 1.0 {
        return f64::INFINITY;
    }
    if u > 0.5 {
        // Exact for u >= 0.5 by Sterbenz's lemma; keeps the hard work in
        // the lower half where erfc has full relative accuracy.
        return -quantile_lower_half(1.0 - u);
    }
    quantile_lower_half(u)
}

/// Quantile for `u` in (0, 0.5]: raw Acklam estimate plus one Halley step.
fn quantile_lower_half(u: f64) -> f64 {
    let x = if u < P_LOW {
        let q = (-2.0 * u.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = u - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    // Halley refinement of Phi(x) = u. x <= 0 here, so Phi(x) is an
    // erfc evaluation at a nonnegative argument: full relative accuracy.
    let phi_cdf = 0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2);
    let pdf = (-0.5 * x * x).exp() * 0.3989422804014326779399; // 1/sqrt(2*pi)
    if pdf > 0.0 {
        let r = (phi_cdf - u) / pdf;
        x - r / (1.0 + 0.5 * x * r)
    } else {
        x
    }
}

/// Complementary error function, accurate to ~1e-13 relative error.
///
/// Positive-term confluent series for |x| <= 2 (no cancellation in the
/// sum; the 1 - erf subtraction costs at most ~1e-14 relative near the
/// crossover), modified-Lentz continued fraction beyond.
pub(crate) fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        2.0 - erfc(-x)
    } else if x <= 2.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

const FRAC_2_SQRT_PI: f64 = 1.1283791670955125739; // 2/sqrt(pi)

/// erf via `erf(x) = (2x/sqrt(pi)) e^{-x^2} sum_n (2x^2)^n / (2n+1)!!`.
fn erf_series(x: f64) -> f64 {
    let x2 = 2.0 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 1..200u32 {
        term *= x2 / (2 * n + 1) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    FRAC_2_SQRT_PI * x * (-x * x).exp() * sum
}

/// erfc via the continued fraction
/// `sqrt(pi) e^{x^2} erfc(x) = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))`,
/// evaluated with the modified Lentz algorithm.
fn erfc_cf(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0;
    for n in 1..300u32 {
        let a = if n == 1 { 1.0 } else { (n - 1) as f64 * 0.5 };
        d = x + a * d;
        if d == 0.0 {
            d = TINY;
        }
        c = x + a / c;
        if c == 0.0 {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() * f * (FRAC_2_SQRT_PI * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_map_extremes_stay_strictly_inside_unit_interval() {
        let lo = u64_to_uniform(0);
        let hi = u64_to_uniform(u64::MAX);
        assert!(lo > 0.0 && lo < 1.0);
        assert!(hi > 0.0 && hi < 1.0);
        assert_eq!(lo, (0.5f64).powi(53));
        assert_eq!(1.0 - hi, (0.5f64).powi(53));
    }

    #[test]
    fn draws_are_reproducible_and_index_sensitive() {
        let a = standard_normal(7, 3, 2, 1);
        let b = standard_normal(7, 3, 2, 1);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(standard_normal(7, 3, 2, 0).to_bits(), a.to_bits());
        assert_ne!(standard_normal(7, 3, 1, 1).to_bits(), a.to_bits());
        assert_ne!(standard_normal(7, 4, 2, 1).to_bits(), a.to_bits());
        assert_ne!(standard_normal(8, 3, 2, 1).to_bits(), a.to_bits());
    }

    // High-precision references computed offline with mpmath (40 digits).
    const ERFC_REFS: &[(f64, f64)] = &[
        (0.01, 0.9887165844441503830841),
        (0.1, 0.8875370839817151077967),
        (0.5, 0.4795001221869534623173),
        (1.0, 0.1572992070502851306588),
        (1.5, 0.03389485352468927293302),
        (2.0, 0.004677734981047265837931),
        (2.5, 0.0004069520174449589395642),
        (2.9, 0.00004109787809945883568387),
        (3.0, 0.00002209049699858544137278),
        (3.1, 0.00001164865736719959603371),
        (3.5, 7.430983723414127455237e-7),
        (4.0, 1.541725790028001885216e-8),
        (5.0, 1.537459794428034850188e-12),
        (6.0, 2.151973671249891311659e-17),
        (8.0, 1.122429717298292707997e-29),
        (10.0, 2.088487583762544757001e-45),
        (15.0, 7.212994172451206666565e-100),
        (-0.5, 1.520499877813046537683),
        (-2.0, 1.995322265018952734162),
    ];

    #[test]
    fn erfc_matches_high_precision_references() {
        for &(x, want) in ERFC_REFS {
            let got = erfc(x);
            let rel = ((got - want) / want).abs();
            assert!(rel < 5e-13, "erfc({x}) = {got}, want {want}, rel err {rel:.3e}");
        }
    }

    // References computed at the exact binary value of each f64
    // argument (the quantile is sensitive enough near 1 that decimal
    // references would be off by ~1e-10 relative).
    const QUANTILE_REFS: &[(f64, f64)] = &[
        // 2^-53: the smallest uniform the counter map can produce.
        (1.1102230246251565e-16, -8.209536151601386855631),
        (1e-16, -8.222082216130435615182),
        (1e-12, -7.034483825301131932614),
        (1e-9, -5.997807015007686861446),
        (1e-6, -4.753424308822898957339),
        (1e-4, -3.719016485455680552288),
        (1e-2, -2.326347874040841093075),
        (0.02425, -1.972961051311884837603),
        (0.025, -1.959963984540054211780),
        (0.1, -1.281551565544600435335),
        (0.3, -0.5244005127080408159695),
        (0.6, 0.2533471031357997413247),
        (0.7, 0.5244005127080406563136),
        (0.975, 1.959963984540053855604),
        (0.9999, 3.719016485455708386723),
        (0.999999999, 5.997807019601637426423),
        // 1 - 2^-53: the largest uniform the counter map can produce.
        (0.9999999999999999, 8.209536151601386855631),
    ];

    #[test]
    fn normal_quantile_beats_required_relative_accuracy() {
        for &(u, want) in QUANTILE_REFS {
            let got = normal_quantile(u);
            let rel = ((got - want) / want).abs();
            assert!(rel < 1e-12, "quantile({u}) = {got}, want {want}, rel err {rel:.3e}");
        }
        assert_eq!(normal_quantile(0.5), 0.0);
    }

    #[test]
    fn normal_quantile_is_antisymmetric_and_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for i in 1..2000 {
            let u = i as f64 / 2000.0;
            let x = normal_quantile(u);
            assert!(x > prev, "not monotone at u={u}");
            prev = x;
            let xm = normal_quantile(1.0 - u);
            assert!(
                (x + xm).abs() <= 1e-13 * x.abs().max(1.0),
                "antisymmetry violated at u={u}: {x} vs {xm}"
            );
        }
    }

    #[test]
    fn sample_moments_of_normal_stream_are_plausible() {
        let n = 200_000u64;
        let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let z = standard_normal(42, i, 0, 0);
            s1 += z;
            s2 += z * z;
            s4 += z * z * z * z;
        }
        let nf = n as f64;
        // 4 sigma bands: SE(mean)=1/sqrt(n), SE(var)~sqrt(2/n), SE(m4)~sqrt(96/n).
        assert!((s1 / nf).abs() < 4.0 / nf.sqrt());
        assert!((s2 / nf - 1.0).abs() < 4.0 * (2.0 / nf).sqrt());
        assert!((s4 / nf - 3.0).abs() < 4.0 * (96.0 / nf).sqrt());
    }
}
