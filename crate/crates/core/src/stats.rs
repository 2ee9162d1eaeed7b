//! Scale-free numerical kernels: standard normal survival and its inverse,
//! Generalized Pareto exceedance, bracketed bisection and sample moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default absolute tolerance of [`find_root_bracketed`].
pub const ROOT_TOL: f64 = 1e-10;
const ROOT_MAX_ITER: usize = 400;

// Cody's rational Chebyshev coefficients for erf/erfc.
const ERF_A: [f64; 5] = [
    3.161_123_743_870_565_6e0,
    1.138_641_541_510_501_6e2,
    3.774_852_376_853_020_2e2,
    3.209_377_589_138_469_5e3,
    1.857_777_061_846_031_5e-1,
];
const ERF_B: [f64; 4] = [
    2.360_129_095_234_412_1e1,
    2.440_246_379_344_441_7e2,
    1.282_616_526_077_372_3e3,
    2.844_236_833_439_170_6e3,
];
const ERF_C: [f64; 9] = [
    5.641_884_969_886_700_9e-1,
    8.883_149_794_388_375_9e0,
    6.611_919_063_714_163e1,
    2.986_351_381_974_001_3e2,
    8.819_522_212_417_691e2,
    1.712_047_612_634_070_6e3,
    2.051_078_377_826_071_5e3,
    1.230_339_354_797_997_2e3,
    2.153_115_354_744_038_5e-8,
];
const ERF_D: [f64; 8] = [
    1.574_492_611_070_983_5e1,
    1.176_939_508_913_125e2,
    5.371_811_018_620_098_6e2,
    1.621_389_574_566_690_2e3,
    3.290_799_235_733_459_6e3,
    4.362_619_090_143_247e3,
    3.439_367_674_143_721_6e3,
    1.230_339_354_803_749_4e3,
];
const ERF_P: [f64; 6] = [
    3.053_266_349_612_323_4e-1,
    3.603_448_999_498_044_4e-1,
    1.257_817_261_112_292_5e-1,
    1.608_378_514_874_227_7e-2,
    6.587_491_615_298_378e-4,
    1.631_538_713_730_209_8e-2,
];
const ERF_Q: [f64; 5] = [
    2.568_520_192_289_822_4e0,
    1.872_952_849_923_467_3e0,
    5.279_051_029_514_284e-1,
    6.051_834_131_244_132e-2,
    2.335_204_976_268_691_8e-3,
];

/// Complementary error function (Cody's rational approximations).
pub fn erfc<T: Scalar>(x: T) -> T {
    let l = T::lit;
    let y = x.abs();
    if y <= l(0.468_75) {
        let ysq = if y > l(1.11e-16) { y * y } else { T::zero() };
        let mut num = l(ERF_A[4]) * ysq;
        let mut den = ysq;
        for i in 0..3 {
            num = (num + l(ERF_A[i])) * ysq;
            den = (den + l(ERF_B[i])) * ysq;
        }
        return T::one() - x * (num + l(ERF_A[3])) / (den + l(ERF_B[3]));
    }
    let tail = if y <= l(4.0) {
        let mut num = l(ERF_C[8]) * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + l(ERF_C[i])) * y;
            den = (den + l(ERF_D[i])) * y;
        }
        let r = (num + l(ERF_C[7])) / (den + l(ERF_D[7]));
        scaled_gauss(y) * r
    } else if y >= l(26.543) {
        T::zero()
    } else {
        let ysq = T::one() / (y * y);
        let mut num = l(ERF_P[5]) * ysq;
        let mut den = ysq;
        for i in 0..4 {
            num = (num + l(ERF_P[i])) * ysq;
            den = (den + l(ERF_Q[i])) * ysq;
        }
        let r = ysq * (num + l(ERF_P[4])) / (den + l(ERF_Q[4]));
        let r = (T::FRAC_2_SQRT_PI() / l(2.0) - r) / y;
        scaled_gauss(y) * r
    };
    if x < T::zero() {
        l(2.0) - tail
    } else {
        tail
    }
}

// exp(-y^2) split to limit cancellation.
fn scaled_gauss<T: Scalar>(y: T) -> T {
    let sixteen = T::lit(16.0);
    let ysq = (y * sixteen).trunc() / sixteen;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp()
}

/// Standard normal density.
pub fn std_normal_pdf<T: Scalar>(x: T) -> T {
    (-(x * x) / T::lit(2.0)).exp() / (T::TAU()).sqrt()
}

/// `P(Z >= x)` for `Z ~ N(0, 1)`.
pub fn std_normal_survival<T: Scalar>(x: T) -> T {
    erfc(x / T::SQRT_2()) / T::lit(2.0)
}

/// Standard normal quantile (Wichura's AS 241).
pub fn std_normal_quantile<T: Scalar>(p: T) -> Result<T> {
    if !(p > T::zero() && p < T::one()) {
        return Err(Error::domain(format!("normal quantile needs p in (0, 1), got {p}")));
    }
    let l = T::lit;
    let q = p - l(0.5);
    if q.abs() <= l(0.425) {
        let r = l(0.180_625) - q * q;
        let num = poly(
            r,
            &[
                3.387_132_872_796_366_6,
                1.331_416_678_917_843_8e2,
                1.971_590_950_306_551_4e3,
                1.373_169_376_550_946e4,
                4.592_195_393_154_987e4,
                6.726_577_092_700_87e4,
                3.343_057_558_358_813e4,
                2.509_080_928_730_122_7e3,
            ],
        );
        let den = poly(
            r,
            &[
                1.0,
                4.231_333_070_160_091e1,
                6.871_870_074_920_579e2,
                5.394_196_021_424_751e3,
                2.121_379_430_158_659_7e4,
                3.930_789_580_009_271e4,
                2.872_908_573_572_194_3e4,
                5.226_495_278_852_854_5e3,
            ],
        );
        return Ok(q * num / den);
    }
    let r = if q < T::zero() { p } else { T::one() - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= l(5.0) {
        let r = r - l(1.6);
        poly(
            r,
            &[
                1.423_437_110_749_683_5,
                4.630_337_846_156_545,
                5.769_497_221_460_691,
                3.647_848_324_763_204_5,
                1.270_458_252_452_368_4,
                2.417_807_251_774_506e-1,
                2.272_384_498_926_918_4e-2,
                7.745_450_142_783_414e-4,
            ],
        ) / poly(
            r,
            &[
                1.0,
                2.053_191_626_637_759,
                1.676_384_830_183_803_8,
                6.897_673_349_851e-1,
                1.481_039_764_274_800_8e-1,
                1.519_866_656_361_645_7e-2,
                5.475_938_084_995_345e-4,
                1.050_750_071_644_416_8e-9,
            ],
        )
    } else {
        let r = r - l(5.0);
        poly(
            r,
            &[
                6.657_904_643_501_103,
                5.463_784_911_164_114,
                1.784_826_539_917_291_3,
                2.965_605_718_285_048_7e-1,
                2.653_218_952_657_612_4e-2,
                1.242_660_947_388_078_4e-3,
                2.711_555_568_743_487_6e-5,
                2.010_334_399_292_288e-7,
            ],
        ) / poly(
            r,
            &[
                1.0,
                5.998_322_065_558_88e-1,
                1.369_298_809_227_358e-1,
                1.487_536_129_085_061_5e-2,
                7.868_691_311_456_133e-4,
                1.846_318_317_510_054_8e-5,
                1.421_511_758_316_446e-7,
                2.044_263_103_389_939_7e-15,
            ],
        )
    };
    Ok(if q < T::zero() { -val } else { val })
}

fn poly<T: Scalar>(x: T, coeffs: &[f64]) -> T {
    coeffs.iter().rev().fold(T::zero(), |acc, &c| acc * x + T::lit(c))
}

/// Inverse of [`std_normal_survival`]: the `x` with `P(Z >= x) = eps`.
pub fn std_normal_survival_inv<T: Scalar>(eps: T) -> Result<T> {
    if !(eps > T::zero() && eps < T::one()) {
        return Err(Error::domain(format!("survival inverse needs eps in (0, 1), got {eps}")));
    }
    let mut x = -std_normal_quantile(eps)?;
    // One Newton step on S(x) - eps.
    let dens = std_normal_pdf(x);
    if dens > T::min_positive_value() {
        x = x + (std_normal_survival(x) - eps) / dens;
    }
    Ok(x)
}

/// Generalized Pareto tail of an accumulation shock; the scale grows
/// linearly with the portfolio size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdTail<T> {
    shape: T,
    scale: T,
}

impl<T: Scalar> GpdTail<T> {
    pub fn new(shape: T, scale: T) -> Result<Self> {
        if !(shape > T::zero() && shape < T::one()) {
            return Err(Error::domain(format!("GPD shape must lie in (0, 1), got {shape}")));
        }
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(Error::domain(format!("GPD scale must be positive, got {scale}")));
        }
        Ok(Self { shape, scale })
    }

    pub fn shape(&self) -> T {
        self.shape
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    /// Quantile of the shock for a portfolio of `n` policies at upper-tail
    /// probability `u` (inverse of [`gpd_exceedance`]).
    pub fn upper_quantile(&self, u: T, n: u64) -> T {
        let ns = T::from_u64(n).unwrap_or_else(T::max_value) * self.scale;
        ns / self.shape * (u.powf(-self.shape) - T::one())
    }
}

/// `P(A_n >= t) = (1 + shape * t / (n * scale))^(-1/shape)`.
pub fn gpd_exceedance<T: Scalar>(t: T, tail: &GpdTail<T>, n: u64) -> Result<T> {
    if !(t >= T::zero()) {
        return Err(Error::domain(format!("exceedance threshold must be >= 0, got {t}")));
    }
    if n == 0 {
        return Err(Error::domain("portfolio size must be >= 1"));
    }
    let ns = T::from_u64(n).unwrap_or_else(T::max_value) * tail.scale;
    Ok((T::one() + tail.shape * t / ns).powf(-T::one() / tail.shape))
}

/// Bisection on a sign-changing bracket. Stops once the bracket is narrower
/// than `tol`, an exact zero is hit, or floating-point resolution is exhausted.
pub fn find_root_bracketed<T, F>(f: F, lo: T, hi: T, tol: T) -> Result<T>
where
    T: Scalar,
    F: Fn(T) -> T,
{
    let (mut lo, mut hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo.is_nan() || f_hi.is_nan() {
        return Err(Error::domain("function is NaN at a bracket end"));
    }
    if f_lo == T::zero() {
        return Ok(lo);
    }
    if f_hi == T::zero() {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::Bracket {
            lo: lo.to_f64().unwrap_or(f64::NAN),
            hi: hi.to_f64().unwrap_or(f64::NAN),
            f_lo: f_lo.to_f64().unwrap_or(f64::NAN),
            f_hi: f_hi.to_f64().unwrap_or(f64::NAN),
        });
    }
    let two = T::lit(2.0);
    for _ in 0..ROOT_MAX_ITER {
        let mid = lo + (hi - lo) / two;
        if hi - lo <= tol || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        let f_mid = f(mid);
        if f_mid.is_nan() {
            return Err(Error::domain("function is NaN inside the bracket"));
        }
        if f_mid == T::zero() {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Convergence {
        iterations: ROOT_MAX_ITER,
        width: (hi - lo).to_f64().unwrap_or(f64::NAN),
    })
}

/// Arithmetic mean; `None` on an empty slice.
pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Sample standard deviation with the `n - 1` divisor (0 for a single value).
pub fn sample_sd(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Some(0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Pearson correlation; `None` when either side is constant or lengths differ.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let mx = mean(xs)?;
    let my = mean(ys)?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// `log(mean(exp(v)))` without overflow.
pub fn log_mean_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return f64::NEG_INFINITY;
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + (s / v.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    // Composite Simpson of the density from x to max(x, 0) + 12; the tail beyond is < 1e-32.
    fn survival_by_quadrature(x: f64) -> f64 {
        let (a, b) = (x, x.max(0.0) + 12.0);
        let n = 40_000;
        let h = (b - a) / n as f64;
        let mut s = std_normal_pdf(a) + std_normal_pdf(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * std_normal_pdf(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn survival_at_zero_is_half() {
        assert_eq!(std_normal_survival(0.0_f64), 0.5);
    }

    #[test]
    fn survival_matches_quadrature_oracle() {
        let mut x = -8.0;
        while x <= 8.0 {
            let oracle = survival_by_quadrature(x);
            assert_abs_diff_eq!(std_normal_survival(x), oracle, epsilon = 1e-12);
            x += 0.37;
        }
        assert_abs_diff_eq!(std_normal_survival(2.575_829_3_f64), 0.005, epsilon = 1e-6);
        assert_abs_diff_eq!(survival_by_quadrature(2.575_829_3), 0.005, epsilon = 1e-6);
    }

    #[test]
    fn survival_inverse_known_points() {
        assert_abs_diff_eq!(std_normal_survival_inv(0.5_f64).unwrap(), 0.0, epsilon = 1e-14);
        // Frozen from bisection of the quadrature oracle on [0, 8].
        let by_bisection = find_root_bracketed(|x| survival_by_quadrature(x) - 0.005, 0.0, 8.0, 1e-12).unwrap();
        assert_abs_diff_eq!(by_bisection, 2.575_829_303_548_9, epsilon = 1e-9);
        assert_abs_diff_eq!(std_normal_survival_inv(0.005_f64).unwrap(), by_bisection, epsilon = 1e-9);
        for eps in [0.001, 0.01, 0.1] {
            let x = std_normal_survival_inv(eps).unwrap();
            assert_abs_diff_eq!(std_normal_survival(x), eps, epsilon = 1e-10);
        }
    }

    #[test]
    fn survival_inverse_rejects_out_of_range() {
        for bad in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(matches!(std_normal_survival_inv(bad), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn f32_kernels_agree_with_f64() {
        for x in [-3.0_f32, -1.0, 0.3, 1.7, 4.5] {
            let a = std_normal_survival(x) as f64;
            let b = std_normal_survival(x as f64);
            assert!((a - b).abs() < 1e-6);
        }
        let z: f32 = std_normal_survival_inv(0.005_f32).unwrap();
        assert!((z - 2.575_829).abs() < 1e-4);
    }

    #[test]
    fn gpd_closed_forms() {
        let tail = GpdTail::new(0.5, 1.0).unwrap();
        assert_eq!(gpd_exceedance(0.0, &tail, 1).unwrap(), 1.0);
        assert_abs_diff_eq!(gpd_exceedance(2.0, &tail, 1).unwrap(), 0.25, epsilon = 1e-15);

        // t = theta / a with theta = 0.4, a = 2.4: 1 + 0.5 * (1/6) / 0.003 = 1 + 250/9,
        // so the value is (9/259)^2 exactly in rationals.
        let study = GpdTail::new(0.5, 0.003).unwrap();
        let exact = (9.0_f64 / 259.0).powi(2);
        assert_abs_diff_eq!(gpd_exceedance(0.4 / 2.4, &study, 1).unwrap(), exact, epsilon = 1e-15);
        assert!(gpd_exceedance(-1.0, &study, 1).is_err());
        assert!(GpdTail::new(1.0, 0.1).is_err());
        assert!(GpdTail::new(0.5, 0.0).is_err());
    }

    #[test]
    fn gpd_quantile_inverts_exceedance() {
        let tail = GpdTail::new(0.5, 0.003).unwrap();
        for u in [0.9, 0.5, 0.01, 1e-4] {
            let t = tail.upper_quantile(u, 250);
            assert_abs_diff_eq!(gpd_exceedance(t, &tail, 250).unwrap(), u, epsilon = 1e-12);
        }
    }

    #[test]
    fn bisection_examples() {
        let r = find_root_bracketed(|x: f64| x - 1.0, 0.0, 2.0, ROOT_TOL).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = ROOT_TOL);
        let r = find_root_bracketed(|x: f64| x * x - 2.0, 0.0, 2.0, ROOT_TOL).unwrap();
        assert_abs_diff_eq!(r, 2f64.sqrt(), epsilon = ROOT_TOL);
        let r = find_root_bracketed(|x: f64| std_normal_survival(x) - 0.005, 0.0, 8.0, ROOT_TOL).unwrap();
        assert_abs_diff_eq!(r, std_normal_survival_inv(0.005).unwrap(), epsilon = 1e-9);
        assert!(matches!(
            find_root_bracketed(|x: f64| x * x + 1.0, -1.0, 1.0, ROOT_TOL),
            Err(Error::Bracket { .. })
        ));
    }

    #[test]
    fn moments_of_single_value() {
        assert_eq!(mean(&[3.5]), Some(3.5));
        assert_eq!(sample_sd(&[3.5]), Some(0.0));
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    proptest! {
        #[test]
        fn survival_symmetry(x in -8.0f64..8.0) {
            prop_assert!((std_normal_survival(x) + std_normal_survival(-x) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn survival_strictly_decreasing(x in -8.0f64..8.0, dx in 1e-3f64..1.0) {
            prop_assert!(std_normal_survival(x + dx) < std_normal_survival(x));
        }

        #[test]
        fn survival_inverse_round_trip(eps in 1e-9f64..0.999_999) {
            let x = std_normal_survival_inv(eps).unwrap();
            prop_assert!((std_normal_survival(x) - eps).abs() <= 1e-10);
        }

        #[test]
        fn survival_inverse_decreasing(a in 1e-6f64..0.99, d in 1e-6f64..0.009) {
            prop_assert!(std_normal_survival_inv(a + d).unwrap() < std_normal_survival_inv(a).unwrap());
        }

        #[test]
        fn gpd_monotone(t in 0.0f64..10.0, dt in 1e-3f64..5.0, n in 1u64..1000) {
            let tail = GpdTail::new(0.5, 0.003).unwrap();
            let a = gpd_exceedance(t, &tail, n).unwrap();
            prop_assert!(gpd_exceedance(t + dt, &tail, n).unwrap() < a);
            if t > 0.0 {
                prop_assert!(gpd_exceedance(t, &tail, n + 1).unwrap() > a);
            }
            prop_assert!(a > 0.0 && a <= 1.0);
        }

        #[test]
        fn bisection_idempotent(c in 0.1f64..50.0) {
            let f = |x: f64| x * x * x - c;
            let r = find_root_bracketed(f, 0.0, 10.0, ROOT_TOL).unwrap();
            let again = find_root_bracketed(f, r - ROOT_TOL, r + ROOT_TOL, ROOT_TOL).unwrap();
            prop_assert!((again - r).abs() <= ROOT_TOL);
        }
    }
}
