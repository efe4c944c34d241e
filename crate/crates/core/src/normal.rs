//! Standard normal distribution function and its inverse.

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_677_94;

/// Standard normal CDF `Φ(x)` (Cody's rational Chebyshev approximations),
/// accurate to a few ulps in relative terms including the lower tail.
pub fn cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x.is_infinite() {
        return if x > 0.0 { 1.0 } else { 0.0 };
    }
    let y = x.abs();
    if y <= 0.674_489_75 {
        let xsq = if y > f64::EPSILON * 0.5 { x * x } else { 0.0 };
        let mut num = CA[4] * xsq;
        let mut den = xsq;
        for i in 0..3 {
            num = (num + CA[i]) * xsq;
            den = (den + CB[i]) * xsq;
        }
        return 0.5 + x * (num + CA[3]) / (den + CB[3]);
    }
    let tail = if y <= 32f64.sqrt() {
        let mut num = CC[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + CC[i]) * y;
            den = (den + CD[i]) * y;
        }
        gauss_tail(y) * (num + CC[7]) / (den + CD[7])
    } else {
        let xsq = 1.0 / (x * x);
        let mut num = CP[5] * xsq;
        let mut den = xsq;
        for i in 0..4 {
            num = (num + CP[i]) * xsq;
            den = (den + CQ[i]) * xsq;
        }
        let r = xsq * (num + CP[4]) / (den + CQ[4]);
        gauss_tail(y) * (FRAC_1_SQRT_2PI - r) / y
    };
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// `exp(−y²/2)` split to avoid cancellation in the exponent.
fn gauss_tail(y: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq * 0.5).exp() * (-del * 0.5).exp()
}

const CA: [f64; 5] = [
    2.235_252_035_460_683_928_7,
    161.028_231_068_555_878_81,
    1_067.689_485_460_370_958_2,
    18_154.981_253_343_561_249,
    0.065_682_337_918_207_449_113,
];
const CB: [f64; 4] = [
    47.202_581_904_688_241_87,
    976.098_551_737_776_693_22,
    10_260.932_208_618_978_205,
    45_507.789_335_026_729_956,
];
const CC: [f64; 9] = [
    0.398_941_512_088_134_667_64,
    8.883_149_794_388_375_941_2,
    93.506_656_132_177_855_979,
    597.270_276_394_800_262_26,
    2_494.537_585_290_372_671_1,
    6_848.190_450_536_282_332_6,
    11_602.651_437_647_350_124,
    9_842.714_838_383_978_021_8,
    1.076_557_677_372_019_231_7e-8,
];
const CD: [f64; 8] = [
    22.266_688_044_328_115_691,
    235.387_901_782_624_998_61,
    1_519.377_599_407_554_805,
    6_485.558_298_266_760_755,
    18_615.571_640_885_098_091,
    34_900.952_721_145_977_266,
    38_912.003_286_093_271_411,
    19_685.429_676_859_990_727,
];
const CP: [f64; 6] = [
    0.215_898_534_057_956_99,
    0.127_401_161_160_247_363_9,
    0.022_235_277_870_649_807,
    0.001_421_619_193_227_893_466,
    2.911_287_495_116_879_2e-5,
    0.023_073_441_764_940_173_03,
];
const CQ: [f64; 5] = [
    1.284_260_096_144_911_21,
    0.468_238_212_480_865_118,
    0.065_988_137_868_928_551_5,
    0.003_782_396_332_027_582_44,
    7.297_515_550_839_662_05e-5,
];

/// Standard normal quantile `Φ⁻¹(p)` (Wichura's AS 241, PPND16).
///
/// Returns `-∞`/`+∞` at `p = 0`/`p = 1` and NaN outside `[0, 1]`.
pub fn quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly1(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly1(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly1(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

#[inline]
fn poly(c: &[f64; 8], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

#[inline]
fn poly1(c: &[f64; 7], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k) * x + 1.0
}

const A: [f64; 8] = [
    3.387_132_872_796_366_608,
    133.141_667_891_784_377_45,
    1_971.590_950_306_551_442_7,
    13_731.693_765_509_461_125,
    45_921.953_931_549_871_457,
    67_265.770_927_008_700_853,
    33_430.575_583_588_128_105,
    2_509.080_928_730_122_672_7,
];
const B: [f64; 7] = [
    42.313_330_701_600_911_252,
    687.187_007_492_057_908_3,
    5_394.196_021_424_751_107_7,
    21_213.794_301_586_595_867,
    39_307.895_800_092_710_61,
    28_729.085_735_721_942_674,
    5_226.495_278_852_545_925,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_577_34,
    4.630_337_846_156_545_295_9,
    5.769_497_221_460_691_405_5,
    3.647_848_324_763_204_605_04,
    1.270_458_252_452_368_382_58,
    0.241_780_725_177_450_611_77,
    0.022_723_844_989_269_184_583_3,
    7.745_450_142_783_414_076_4e-4,
];
const D: [f64; 7] = [
    2.053_191_626_637_758_821_87,
    1.676_384_830_183_803_849_4,
    0.689_767_334_985_100_004_55,
    0.148_103_976_427_480_074_59,
    0.015_198_666_563_616_457_196_6,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103_777_2,
    5.463_784_911_164_114_369_9,
    1.784_826_539_917_291_335_8,
    0.296_560_571_828_504_891_23,
    0.026_532_189_526_576_123_093,
    0.001_242_660_947_388_078_438_6,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const F: [f64; 7] = [
    0.599_832_206_555_887_937_69,
    0.136_929_880_922_735_805_31,
    0.014_875_361_290_850_614_852_5,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

#[cfg(test)]
mod tests {
    use super::*;

    use statrs::function::erf::erfc;

    /// `Φ(x)` at 40 significant digits (mpmath `ncdf`).
    const CDF_REFERENCE: [(f64, f64); 13] = [
        (-37.5, 4.6053530095819548438e-308),
        (-20.0, 2.7536241186062336951e-89),
        (-8.3, 5.2055697448902540246e-17),
        (-5.0, 2.8665157187919391167e-7),
        (-1.959963984540054, 0.025000000000000010876),
        (-0.5, 0.30853753872598689636),
        (-0.1, 0.46017216272297101633),
        (0.3, 0.61791142218895263307),
        (0.67, 0.74857110490468989845),
        (1.0, 0.84134474606854294859),
        (2.5, 0.99379033467422386483),
        (5.5, 0.99999998101043753411),
        (8.0, 0.9999999999999993779),
    ];

    #[test]
    fn cdf_matches_high_precision_reference() {
        for (x, expected) in CDF_REFERENCE {
            let rel = (cdf(x) - expected).abs() / expected;
            assert!(rel < 1e-14, "Φ({x}) = {:e}, expected {expected:e}", cdf(x));
        }
        assert_eq!(cdf(f64::NEG_INFINITY), 0.0);
        assert_eq!(cdf(f64::INFINITY), 1.0);
    }

    /// Bisection on the CDF: an inversion route independent of AS 241.
    fn bisect_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0f64, 40.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let below = if p < 0.5 {
                cdf(mid) < p
            } else {
                // use the upper tail to keep relative precision near 1
                cdf(-mid) > 1.0 - p
            };
            if below {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_matches_bisection_oracle() {
        let mut p = 1e-8;
        let mut worst = 0.0f64;
        while p < 1.0 - 1e-8 {
            for q in [p, 1.0 - p] {
                worst = worst.max((quantile(q) - bisect_quantile(q)).abs());
            }
            p *= 1.37;
        }
        for k in 1..1000 {
            let q = k as f64 / 1000.0;
            worst = worst.max((quantile(q) - bisect_quantile(q)).abs());
        }
        assert!(worst <= 1e-9, "max abs error {worst:e}");
    }

    #[test]
    fn reference_values() {
        assert_eq!(quantile(0.5), 0.0);
        assert!((quantile(0.975) - 1.959964).abs() <= 1e-6);
        assert!((quantile(0.975) - bisect_quantile(0.975)).abs() <= 1e-12);
        assert!((quantile(0.3) + quantile(0.7)).abs() < 1e-15);
        assert_eq!(quantile(0.0), f64::NEG_INFINITY);
        assert_eq!(quantile(1.0), f64::INFINITY);
        assert!(quantile(1.5).is_nan());
        assert!((cdf(0.0) - 0.5).abs() < 1e-16);
        // statrs' erfc as a loose cross-check
        for x in [-3.0, -1.0, 0.2, 2.0] {
            assert!((cdf(x) - 0.5 * erfc(-x / std::f64::consts::SQRT_2)).abs() < 1e-10);
        }
        assert!((cdf(1.959963984540054) - 0.975).abs() < 1e-14);
    }
}
