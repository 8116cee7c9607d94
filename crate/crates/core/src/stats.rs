//! Sample moments, Kolmogorov-Smirnov distances and OLS trends.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Sample moments. `std` uses the `n − 1` denominator; skew and excess
/// kurtosis use biased central moments `m_k = Σ(x − x̄)ᵏ / n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub skew: f64,
    pub excess_kurtosis: f64,
}

pub fn moments(xs: &[f64]) -> Result<MomentStats> {
    let n = xs.len();
    if n < 4 {
        return Err(Error::usage(format!("moments need at least 4 values, got {n}")));
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    if m2 == 0.0 || xs.iter().all(|&x| x == xs[0]) {
        return Err(Error::Degenerate("all values are equal".into()));
    }
    let std = (m2 / (nf - 1.0)).sqrt();
    let (m2, m3, m4) = (m2 / nf, m3 / nf, m4 / nf);
    Ok(MomentStats {
        n,
        mean,
        std,
        skew: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
    })
}

/// Sampling standard deviation of the excess kurtosis of `n` normal draws.
pub fn excess_kurtosis_se(n: usize) -> f64 {
    let n = n as f64;
    (24.0 * n * (n - 1.0).powi(2) / ((n - 3.0) * (n - 2.0) * (n + 3.0) * (n + 5.0))).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// What a sample is compared against.
pub enum KsReference<'a> {
    Cdf(&'a dyn Fn(f64) -> f64),
    Sample(&'a [f64]),
}

/// Kolmogorov-Smirnov sup-distance between the empirical CDF of `xs` and
/// the reference.
pub fn ks_statistic(xs: &[f64], reference: KsReference<'_>) -> Result<f64> {
    match reference {
        KsReference::Cdf(cdf) => ks_one_sample(xs, cdf),
        KsReference::Sample(ys) => ks_two_sample(xs, ys),
    }
}

pub fn ks_one_sample(xs: &[f64], cdf: &dyn Fn(f64) -> f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::usage("ks statistic of an empty sample"));
    }
    let sorted = sorted(xs)?;
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(d.clamp(0.0, 1.0))
}

pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::usage("ks statistic of an empty sample"));
    }
    let (a, b) = (sorted(xs)?, sorted(ys)?);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        // step past every copy of the smaller value in both samples
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::usage("NaN in sample"));
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Ok(v)
}

/// OLS fit `y = intercept + slope·x` with a 95% interval on the slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Trend {
    pub slope: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Trend {
    pub fn contains_zero(&self) -> bool {
        self.ci_low <= 0.0 && 0.0 <= self.ci_high
    }
}

pub fn trend_slope(xs: &[f64], ys: &[f64]) -> Result<Trend> {
    if xs.len() != ys.len() {
        return Err(Error::usage("trend needs equally long x and y"));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::usage(format!("trend needs at least 3 points, got {n}")));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::usage("trend x values have no spread"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let se = (sse / (nf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 2.0)
        .map_err(|e| Error::usage(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(Trend {
        slope,
        intercept,
        ci_low: slope - t * se,
        ci_high: slope + t * se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn two_point_law() {
        let xs: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let m = moments(&xs).unwrap();
        assert!(m.skew.abs() < 1e-15);
        assert!((m.excess_kurtosis + 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_and_short_inputs() {
        assert!(matches!(moments(&[3.0; 10]), Err(Error::Degenerate(_))));
        assert!(matches!(moments(&[1.0, 2.0, 3.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn reference_normal_moments() {
        let m = moments(&normals(1_000_000, 1)).unwrap();
        assert!(m.skew.abs() < 0.01, "{m:?}");
        assert!(m.excess_kurtosis.abs() < 0.02, "{m:?}");
        assert!((m.std - 1.0).abs() < 0.005);
    }

    #[test]
    fn kurtosis_spread_at_500() {
        let ks: Vec<f64> = (0..1000)
            .map(|s| moments(&normals(500, 100 + s)).unwrap().excess_kurtosis)
            .collect();
        let spread = moments(&ks).unwrap().std;
        assert!((spread - 0.2).abs() < 0.03, "{spread}");
        assert!((excess_kurtosis_se(500) - 0.21801).abs() < 1e-4);
    }

    #[test]
    fn ks_against_own_cdf() {
        let xs = normals(100_000, 2);
        let d = ks_statistic(&xs, KsReference::Cdf(&normal_cdf)).unwrap();
        assert!(d < 0.01, "{d}");
    }

    #[test]
    fn ks_shifted_normal() {
        let xs = normals(10_000, 3);
        let shifted = |x: f64| normal_cdf(x - 1.0);
        let d = ks_statistic(&xs, KsReference::Cdf(&shifted)).unwrap();
        // sup |Φ(x) − Φ(x − 1)| sits at x = 1/2
        let exact = normal_cdf(0.5) - normal_cdf(-0.5);
        assert!((d - exact).abs() < 0.02, "{d} vs {exact}");
        assert!((exact - 0.3829).abs() < 1e-4);
    }

    #[test]
    fn ks_identical_and_empty() {
        let xs = normals(50, 4);
        assert_eq!(ks_two_sample(&xs, &xs).unwrap(), 0.0);
        assert!(ks_two_sample(&[], &xs).is_err());
        assert!(ks_one_sample(&[], &normal_cdf).is_err());
    }

    #[test]
    fn ks_two_sample_disjoint_is_one() {
        assert_eq!(ks_two_sample(&[0.0, 1.0], &[5.0, 6.0, 7.0]).unwrap(), 1.0);
    }

    #[test]
    fn normal_cdf_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-11);
    }

    #[test]
    fn trend_constant_and_exact() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let t = trend_slope(&xs, &[4.0; 10]).unwrap();
        assert_eq!(t.slope, 0.0);
        assert!(t.contains_zero());
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let t = trend_slope(&xs, &ys).unwrap();
        assert!((t.slope - 2.0).abs() < 1e-12);
        assert!(t.ci_high - t.ci_low < 1e-9);
    }

    #[test]
    fn trend_noisy_line() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let noise = normals(100, 5);
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| x + e).collect();
        let t = trend_slope(&xs, &ys).unwrap();
        assert!(t.ci_low <= 1.0 && 1.0 <= t.ci_high, "{t:?}");
    }

    #[test]
    fn trend_errors() {
        assert!(trend_slope(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(trend_slope(&[1.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn shape_moments_are_affine_invariant(
            seed in 0u64..1000,
            a in prop_oneof![-50.0f64..-0.1, 0.1f64..50.0],
            b in -100.0f64..100.0,
        ) {
            let xs: Vec<f64> = normals(64, seed).iter().map(|x| x.exp()).collect();
            let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let (mx, my) = (moments(&xs).unwrap(), moments(&ys).unwrap());
            prop_assert!((my.skew - a.signum() * mx.skew).abs() < 1e-8);
            prop_assert!((my.excess_kurtosis - mx.excess_kurtosis).abs() < 1e-8);
        }

        #[test]
        fn two_sample_ks_is_symmetric_and_bounded(s1 in 0u64..500, s2 in 500u64..1000, n in 1usize..60, m in 1usize..60) {
            let (x, y) = (normals(n, s1), normals(m, s2));
            let d = ks_two_sample(&x, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, ks_two_sample(&y, &x).unwrap());
        }
    }
}
