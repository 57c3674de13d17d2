//! Scalar math and sampling primitives shared by the user and analyst code.
//!
//! Everything here is a pure function of its arguments or of an explicitly
//! passed [`RandomStream`]; there is no global state.
//!
//! Conventions fixed for replay:
//! - Gaussian draws use the cosine branch of Box–Muller, one draw per call
//!   (two uniforms consumed).
//! - Laplace draws use the inverse CDF, one uniform consumed.
//! - Per-user stream ids come from [`user_stream_id`], built on the
//!   SplitMix64 finalizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

// The erf/erfc rational approximations below follow FreeBSD's
// /usr/src/lib/msun/src/s_erf.c:
//
// Copyright (C) 1993 by Sun Microsystems, Inc. All rights reserved.
// Developed at SunPro, a Sun Microsystems, Inc. business.
// Permission to use, copy, modify, and distribute this
// software is freely granted, provided that this notice
// is preserved.

const ERX: f64 = 8.45062911510467529297e-01;
const EFX: f64 = 1.28379167095512586316e-01;
const EFX8: f64 = 1.02703333676410069053e+00;
const PP: [f64; 5] = [
    1.28379167095512558561e-01,
    -3.25042107247001499370e-01,
    -2.84817495755985104766e-02,
    -5.77027029648944159157e-03,
    -2.37630166566501626084e-05,
];
const QQ: [f64; 5] = [
    3.97917223959155352819e-01,
    6.50222499887672944485e-02,
    5.08130628187576562776e-03,
    1.32494738004321644526e-04,
    -3.96022827877536812320e-06,
];
const PA: [f64; 7] = [
    -2.36211856075265944077e-03,
    4.14856118683748331666e-01,
    -3.72207876035701323847e-01,
    3.18346619901161753674e-01,
    -1.10894694282396677476e-01,
    3.54783043256182359371e-02,
    -2.16637559486879084300e-03,
];
const QA: [f64; 6] = [
    1.06420880400844228286e-01,
    5.40397917702171048937e-01,
    7.18286544141962662868e-02,
    1.26171219808761642112e-01,
    1.36370839120290507362e-02,
    1.19844998467991074170e-02,
];
const RA: [f64; 8] = [
    -9.86494403484714822705e-03,
    -6.93858572707181764372e-01,
    -1.05586262253232909814e+01,
    -6.23753324503260060396e+01,
    -1.62396669462573470355e+02,
    -1.84605092906711035994e+02,
    -8.12874355063065934246e+01,
    -9.81432934416914548592e+00,
];
const SA: [f64; 8] = [
    1.96512716674392571292e+01,
    1.37657754143519042600e+02,
    4.34565877475229228821e+02,
    6.45387271733267880336e+02,
    4.29008140027567833386e+02,
    1.08635005541779435134e+02,
    6.57024977031928170135e+00,
    -6.04244152148580987438e-02,
];
const RB: [f64; 7] = [
    -9.86494292470009928597e-03,
    -7.99283237680523006574e-01,
    -1.77579549177547519889e+01,
    -1.60636384855821916062e+02,
    -6.37566443368389627722e+02,
    -1.02509513161107724954e+03,
    -4.83519191608651397019e+02,
];
const SB: [f64; 7] = [
    3.03380607434824582924e+01,
    3.25792512996573918826e+02,
    1.53672958608443695994e+03,
    3.19985821950859553908e+03,
    2.55305040643316442583e+03,
    4.74528541206955367215e+02,
    -2.24409524465858183362e+01,
];

const VERY_TINY: f64 = 2.848094538889218e-306;
const SMALL: f64 = 3.725290298461914e-9; // 2^-28

/// Horner evaluation, coefficients in ascending order.
fn poly(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// `1 + x * poly(x, coeffs)`: the denominators of the msun approximations.
fn poly1(x: f64, coeffs: &[f64]) -> f64 {
    1.0 + x * poly(x, coeffs)
}

/// erfc(x) for x >= 1.25, computed as exp(-x^2 - 0.5625 + R/S) / x.
fn erfc_tail(x: f64) -> f64 {
    if x >= 28.0 {
        return 0.0;
    }
    let s = 1.0 / (x * x);
    let (r, q) = if x < 1.0 / 0.35 {
        (poly(s, &RA), poly1(s, &SA))
    } else {
        (poly(s, &RB), poly1(s, &SB))
    };
    // Split x so that z*z is exact.
    let z = f64::from_bits(x.to_bits() & 0xffff_ffff_0000_0000);
    (-z * z - 0.5625).exp() * ((z - x) * (z + x) + r / q).exp() / x
}

/// The Gaussian error function, accurate to about one ulp.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let a = x.abs();
    let value = if a < 0.84375 {
        if a < SMALL {
            if a < VERY_TINY {
                0.125 * (8.0 * a + EFX8 * a)
            } else {
                a + EFX * a
            }
        } else {
            let z = a * a;
            a + a * (poly(z, &PP) / poly1(z, &QQ))
        }
    } else if a < 1.25 {
        let s = a - 1.0;
        ERX + poly(s, &PA) / poly1(s, &QA)
    } else if a >= 6.0 {
        1.0
    } else {
        1.0 - erfc_tail(a)
    };
    value.copysign(x)
}

/// Complementary error function `1 - erf(x)` without cancellation for large x.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let a = x.abs();
    let upper = if a < 0.84375 {
        1.0 - erf(a)
    } else if a < 1.25 {
        let s = a - 1.0;
        (1.0 - ERX) - poly(s, &PA) / poly1(s, &QA)
    } else {
        erfc_tail(a)
    };
    if x < 0.0 {
        2.0 - upper
    } else {
        upper
    }
}

/// Arguments of [`erf_inv`] are saturated to `±(1 - 2^-40)`.
pub const ERF_INV_CLAMP: f64 = 1.0 - 1.0 / (1u64 << 40) as f64;

const CENTRAL: f64 = 0.7;
const IA: [f64; 4] = [0.886226899, -1.645349621, 0.914624893, -0.140543331];
const IB: [f64; 4] = [-2.118377725, 1.442710462, -0.329097515, 0.012229801];
const IC: [f64; 4] = [-1.970840454, -1.624906493, 3.429567803, 1.641345311];
const ID: [f64; 2] = [3.543889200, 1.637067800];

/// Inverse error function.
///
/// A rational initial guess refined by two Newton steps on `erf`. The input is
/// clamped to `[-ERF_INV_CLAMP, ERF_INV_CLAMP]`, so every finite input maps to
/// a finite output; NaN propagates.
pub fn erf_inv(y: f64) -> f64 {
    if y.is_nan() {
        return f64::NAN;
    }
    let y = y.clamp(-ERF_INV_CLAMP, ERF_INV_CLAMP);
    if y == 0.0 {
        return y;
    }
    let a = y.abs();
    let mut x = if a <= CENTRAL {
        let z = a * a;
        a * poly(z, &IA) / poly1(z, &IB)
    } else {
        let z = (-((1.0 - a) / 2.0).ln()).sqrt();
        poly(z, &IC) / poly1(z, &ID)
    };
    let two_over_sqrt_pi = std::f64::consts::FRAC_2_SQRT_PI;
    for _ in 0..2 {
        // Residual erf(x) - a, taken through erfc in the tail so 1 - a stays exact.
        let residual = if x < 1.0 {
            erf(x) - a
        } else {
            (1.0 - a) - erfc(x)
        };
        x -= residual / (two_over_sqrt_pi * (-x * x).exp());
    }
    x.copysign(y)
}

/// `⌊x / 2^j⌋ mod 4` with a Euclidean (always non-negative) remainder.
pub fn floor_div_mod4(x: f64, level: i32) -> u8 {
    let q = (x / pow2(level)).floor();
    q.rem_euclid(4.0) as u8
}

/// `2^j` in floating point.
pub fn pow2(j: i32) -> f64 {
    2f64.powi(j)
}

/// Exact base-2 logarithm of a power of two, `None` otherwise.
pub fn exact_log2(x: f64) -> Option<i32> {
    if !(x.is_finite() && x > 0.0) {
        return None;
    }
    let j = x.log2().round() as i32;
    (pow2(j) == x).then_some(j)
}

/// SplitMix64 finalizer. A bijection on `u64`.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream id of one user in one trial: `splitmix64(splitmix64(trial) ^ user)`.
///
/// For a fixed trial the map is injective in `user`.
pub fn user_stream_id(trial: u64, user: u64) -> u64 {
    splitmix64(splitmix64(trial) ^ user)
}

/// Derives an independent 64-bit seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    splitmix64(parent ^ splitmix64(label).rotate_left(23))
}

/// A reproducible random stream identified by `(master_seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id mapped onto ChaCha's stream counter,
/// so distinct ids never share keystream.
#[derive(Clone, Debug)]
pub struct RandomStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        RandomStream {
            master_seed,
            stream_id,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform draw in the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Uniform integer in `0..bound`.
    pub fn below(&mut self, bound: u32) -> u32 {
        self.rng.gen_range(0..bound)
    }

    /// Raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen()
    }
}

/// Draws from `N(mu, sigma^2)`.
pub fn sample_gaussian(stream: &mut RandomStream, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let u1 = stream.uniform_open();
    let u2 = stream.uniform();
    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    Ok(mu + sigma * z)
}

/// Inverse CDF of the centered Laplace distribution with scale `b`.
pub fn laplace_quantile(u: f64, scale: f64) -> f64 {
    let centered = u - 0.5;
    if centered == 0.0 {
        return 0.0;
    }
    -scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
}

/// Draws from the centered Laplace distribution with density `exp(-|x|/b) / 2b`.
pub fn sample_laplace(stream: &mut RandomStream, scale: f64) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("laplace scale must be positive, got {scale}")));
    }
    Ok(laplace_quantile(stream.uniform_open(), scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_n 2^n x^(2n+1) / (2n+1)!!
    /// All terms are positive, so there is no cancellation.
    fn erf_series(x: f64) -> f64 {
        let ax = x.abs();
        let x2 = ax * ax;
        let mut term = ax;
        let mut sum = ax;
        for n in 1..400 {
            term *= 2.0 * x2 / (2 * n + 1) as f64;
            sum += term;
            if term < 1e-18 * sum {
                break;
            }
        }
        (std::f64::consts::FRAC_2_SQRT_PI * (-x2).exp() * sum).copysign(x)
    }

    #[test]
    fn erf_basic_values() {
        assert_eq!(erf(0.0), 0.0);
        assert!(erf(std::f64::consts::SQRT_2) < 0.96);
        assert!((erf(1.0) - erf_series(1.0)).abs() < 1e-12);
        for i in -300..=300 {
            let x = i as f64 / 100.0;
            assert!((erf(x) - erf_series(x)).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn erf_is_odd_and_increasing() {
        let mut prev = -1.0f64;
        for i in -5000..5000 {
            let x = i as f64 / 1000.0;
            let v = erf(x);
            assert_eq!(v, -erf(-x));
            assert!(v >= prev, "not monotone at {x}");
            prev = v;
        }
        // strictly increasing where erf is not saturated
        for i in -2000..2000 {
            let x = i as f64 / 1000.0;
            assert!(erf(x + 1e-3) > erf(x));
        }
    }

    #[test]
    fn erfc_matches_complement() {
        for i in -400..=400 {
            let x = i as f64 / 100.0;
            assert!((erfc(x) - (1.0 - erf(x))).abs() < 1e-15 + 1e-14 * erfc(x).abs());
        }
        assert!(erfc(10.0) > 0.0 && erfc(10.0) < 1e-40);
    }

    #[test]
    fn erf_inv_roundtrip() {
        assert_eq!(erf_inv(0.0), 0.0);
        assert!((erf_inv(erf(0.5)) - 0.5).abs() < 1e-10);
        for i in 0..10_000 {
            let y = -0.999 + 1.998 * i as f64 / 9_999.0;
            let x = erf_inv(y);
            assert!((erf(x) - y).abs() < 1e-10, "y = {y}");
            assert_eq!(erf_inv(-y), -x);
        }
    }

    #[test]
    fn erf_inv_lipschitz_bound_at_097() {
        let x = erf_inv(0.97);
        assert!(std::f64::consts::PI.sqrt() / 2.0 * (x * x).exp() < 10.0);
    }

    #[test]
    fn erf_inv_saturates() {
        let top = erf_inv(1.0);
        assert!(top.is_finite());
        assert_eq!(erf_inv(3.5), top);
        assert_eq!(erf_inv(-7.0), -top);
        assert!(erf_inv(0.9999999) < top);
    }

    #[test]
    fn floor_div_mod4_examples() {
        assert_eq!(floor_div_mod4(5.0, 0), 1);
        assert_eq!(floor_div_mod4(-1.5, 0), 2);
        assert_eq!(floor_div_mod4(16.0, 2), 0);
        // integer oracle for negative inputs
        for x in -50i64..50 {
            for j in 0..4 {
                let q = x.div_euclid(1 << j);
                assert_eq!(floor_div_mod4(x as f64, j) as i64, q.rem_euclid(4));
            }
        }
    }

    #[test]
    fn floor_div_mod4_period() {
        for i in -200..200 {
            let x = i as f64 * 0.37;
            for j in -3..5 {
                assert_eq!(floor_div_mod4(x + 4.0 * pow2(j), j), floor_div_mod4(x, j));
            }
        }
    }

    #[test]
    fn gaussian_degenerate_and_invalid() {
        let mut s = RandomStream::new(1, 2);
        let v = sample_gaussian(&mut s, 3.0, 1e-300).unwrap();
        assert!((v - 3.0).abs() < 1e-250);
        assert!(sample_gaussian(&mut s, 0.0, 0.0).is_err());
        assert!(sample_gaussian(&mut s, 0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let mut s = RandomStream::new(11, 0);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_gaussian(&mut s, 0.0, 1.0).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 5.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn laplace_median_and_invalid() {
        assert_eq!(laplace_quantile(0.5, 3.0), 0.0);
        let mut s = RandomStream::new(1, 1);
        assert!(sample_laplace(&mut s, 0.0).is_err());
        assert!(sample_laplace(&mut s, -2.0).is_err());
    }

    #[test]
    fn laplace_moments() {
        let n = 1_000_000;
        let mut s = RandomStream::new(5, 9);
        let mean_abs = (0..n).map(|_| sample_laplace(&mut s, 1.0).unwrap().abs()).sum::<f64>() / n as f64;
        assert!((mean_abs - 1.0).abs() < 0.02, "E|X| = {mean_abs}");

        let draws: Vec<f64> = (0..n).map(|_| sample_laplace(&mut s, 2.0).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 8.0).abs() < 0.03 * 8.0, "var = {var}");
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut s = RandomStream::new(42, 7);
            (0..16).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = RandomStream::new(42, 7);
            (0..16).map(|_| s.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut s = RandomStream::new(42, 8);
            (0..16).map(|_| s.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn user_stream_ids_are_injective_within_a_trial() {
        let mut ids: Vec<u64> = (0..100_000).map(|u| user_stream_id(3, u)).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100_000);
    }

    #[test]
    fn exact_log2_detects_powers() {
        assert_eq!(exact_log2(4.0), Some(2));
        assert_eq!(exact_log2(0.0625), Some(-4));
        assert_eq!(exact_log2(3.0), None);
        assert_eq!(exact_log2(-4.0), None);
    }
}
