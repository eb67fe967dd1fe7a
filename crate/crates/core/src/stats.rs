//! Shared numeric primitives: normal distribution functions, the bivariate
//! normal CDF, chi-square tail probabilities, and log-space helpers.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::erf::erfc;

const FRAC_1_2PI: f64 = 0.159_154_943_091_895_35;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Standard logistic function, stable for large |x|.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal CDF, accurate to machine precision via erfc.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal quantile (probit).
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Upper-tail probability of the chi-square distribution with `df` degrees
/// of freedom.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df).expect("df must be positive");
    (1.0 - dist.cdf(x)).clamp(0.0, 1.0)
}

/// Numerically stable log(sum(exp(x))).
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

// Gauss-Legendre abscissae/weights used by the Drezner-Wesolowsky/Genz
// bivariate normal algorithm, switched on |rho|.
const GL_6: [(f64, f64); 3] = [
    (0.171_324_492_379_170_5, -0.932_469_514_203_152_2),
    (0.360_761_573_048_138_4, -0.661_209_386_466_264_7),
    (0.467_913_934_572_690_4, -0.238_619_186_083_197_0),
];

const GL_12: [(f64, f64); 6] = [
    (0.047_175_336_386_511_77, -0.981_560_634_246_719_1),
    (0.106_939_325_995_318_3, -0.904_117_256_370_475_0),
    (0.160_078_328_543_346_4, -0.769_902_674_194_305_0),
    (0.203_167_426_723_065_9, -0.587_317_954_286_617_1),
    (0.233_492_536_538_354_7, -0.367_831_498_998_180_2),
    (0.249_147_045_813_402_9, -0.125_233_408_511_469_2),
];

const GL_20: [(f64, f64); 10] = [
    (0.017_614_007_139_152_12, -0.993_128_599_185_094_9),
    (0.040_601_429_800_386_94, -0.963_971_927_277_913_8),
    (0.062_672_048_334_109_06, -0.912_234_428_251_325_9),
    (0.083_276_741_576_704_75, -0.839_116_971_822_218_8),
    (0.101_930_119_817_240_4, -0.746_331_906_460_150_8),
    (0.118_194_531_961_518_4, -0.636_053_680_726_515_0),
    (0.131_688_638_449_176_6, -0.510_867_001_950_827_1),
    (0.142_096_109_318_382_1, -0.373_706_088_715_419_6),
    (0.149_172_986_472_603_7, -0.227_785_851_141_645_1),
    (0.152_753_387_130_725_9, -0.076_526_521_133_497_33),
];

fn gl_points(rho_abs: f64) -> &'static [(f64, f64)] {
    if rho_abs < 0.3 {
        &GL_6
    } else if rho_abs < 0.75 {
        &GL_12
    } else {
        &GL_20
    }
}

/// P(X > dh, Y > dk) for standard bivariate normal (X, Y) with correlation
/// `r`, after Drezner & Wesolowsky (1989) with Genz's refinements for |r|
/// near 1. Accurate to well below 1e-7 over r in (-1, 1).
fn bvn_upper(dh: f64, dk: f64, r: f64) -> f64 {
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let quad = gl_points(r.abs());
    let mut bvn = 0.0;

    if r.abs() <= 0.925 {
        if r.abs() > 0.0 {
            let hs = (h * h + k * k) / 2.0;
            let asr = 0.5 * r.asin();
            for &(w, x) in quad {
                for is in [-1.0, 1.0] {
                    let sn = (asr * (is * x + 1.0)).sin();
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr * FRAC_1_2PI;
        }
        bvn + normal_cdf(-h) * normal_cdf(-k)
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let a_s = (1.0 - r) * (1.0 + r);
            let mut a = a_s.sqrt();
            let b_s = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -(b_s / a_s + hk) / 2.0;
            if asr > -100.0 {
                bvn = a
                    * asr.exp()
                    * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0
                        + c * d * a_s * a_s / 5.0);
            }
            if -hk < 100.0 {
                let b = b_s.sqrt();
                bvn -= (-hk / 2.0).exp()
                    * SQRT_2PI
                    * normal_cdf(-b / a)
                    * b
                    * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
            }
            a /= 2.0;
            for &(w, x) in quad {
                for is in [-1.0, 1.0] {
                    let xi = a * (is * x + 1.0);
                    let xs = xi * xi;
                    let rs = (1.0 - xs).sqrt();
                    let asr = -(b_s / xs + hk) / 2.0;
                    if asr > -100.0 {
                        bvn += a
                            * w
                            * asr.exp()
                            * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                                - (1.0 + c * xs * (1.0 + d * xs)));
                    }
                }
            }
            bvn *= -FRAC_1_2PI;
        }
        if r > 0.0 {
            bvn + normal_cdf(-h.max(k))
        } else {
            bvn = -bvn;
            if k > h {
                bvn += if h < 0.0 {
                    normal_cdf(k) - normal_cdf(h)
                } else {
                    normal_cdf(-h) - normal_cdf(-k)
                };
            }
            bvn
        }
    }
}

/// P(X < h, Y < k) for standard bivariate normal with correlation `rho`.
pub fn bvn_cdf(h: f64, k: f64, rho: f64) -> f64 {
    debug_assert!(rho > -1.0 && rho < 1.0);
    bvn_upper(-h, -k, rho).clamp(0.0, 1.0)
}
