//! Shared statistics primitives: moments, Welch's t-test, Pearson
//! correlation, percentile bootstrap.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {0} samples")]
    TooFewSamples(usize),
    #[error("baseline mean is zero; relative effect undefined")]
    ZeroBaseline,
    #[error("zero variance; statistic undefined")]
    ZeroVariance,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Percentile bootstrap CI for the mean.
pub fn bootstrap_ci(
    samples: &[f64],
    n_boot: usize,
    level: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::TooFewSamples(2));
    }
    let n = samples.len();
    let mut means = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut total = 0.0;
        for _ in 0..n {
            total += samples[rng.random_range(0..n)];
        }
        means.push(total / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    let lo_idx = ((alpha * n_boot as f64).floor() as usize).min(n_boot - 1);
    let hi_idx = (((1.0 - alpha) * n_boot as f64).ceil() as usize).saturating_sub(1).min(n_boot - 1);
    Ok((means[lo_idx], means[hi_idx]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub significant: bool,
}

/// Welch's two-tailed t-test (unequal variances).
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64), StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::TooFewSamples(2));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (variance(a), variance(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 <= 0.0 {
        // Both samples constant.
        return if ma == mb {
            Ok((0.0, (na + nb - 2.0).max(1.0), 1.0))
        } else {
            Ok((f64::INFINITY, (na + nb - 2.0).max(1.0), 0.0))
        };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0)).max(f64::MIN_POSITIVE);
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid dof");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, df, p.clamp(0.0, 1.0)))
}

/// Welch tests with Bonferroni adjustment `p_adj = min(1, m * p)`.
pub fn t_test_bonferroni(
    groups: &[(Vec<f64>, Vec<f64>)],
    family_size: usize,
    alpha: f64,
) -> Result<Vec<TTestResult>, StatsError> {
    let mut out = Vec::with_capacity(groups.len());
    for (a, b) in groups {
        let (t, df, p_raw) = welch_t_test(a, b)?;
        let p_adjusted = (p_raw * family_size as f64).min(1.0);
        out.push(TTestResult { t, df, p_raw, p_adjusted, significant: p_adjusted < alpha });
    }
    Ok(out)
}

/// Relative percent change of `a` against baseline `b`.
pub fn effect_size(mean_a: f64, mean_b: f64) -> Result<f64, StatsError> {
    if mean_b == 0.0 {
        return Err(StatsError::ZeroBaseline);
    }
    Ok(100.0 * (mean_a - mean_b) / mean_b.abs())
}

/// Pearson correlation; None when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx <= 1e-300 || vy <= 1e-300 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn bootstrap_constant_samples_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (lo, hi) = bootstrap_ci(&[3.0; 12], 500, 0.95, &mut rng).unwrap();
        assert_eq!(lo, 3.0);
        assert_eq!(hi, 3.0);
    }

    #[test]
    fn bootstrap_wider_level_nests() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..40).map(|i| (i as f64 * 0.77).sin() * 2.0 + 1.0).collect();
        let mut r1 = rng.clone();
        let (lo95, hi95) = bootstrap_ci(&xs, 1000, 0.95, &mut r1).unwrap();
        let (lo99, hi99) = bootstrap_ci(&xs, 1000, 0.99, &mut rng).unwrap();
        assert!(lo99 <= lo95 && hi99 >= hi95);
    }

    #[test]
    fn bootstrap_rejects_single_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            bootstrap_ci(&[1.0], 100, 0.95, &mut rng),
            Err(StatsError::TooFewSamples(2))
        );
    }

    #[test]
    fn bootstrap_coverage_on_normal_data() {
        // ~95% of 95% CIs over N(0,1) samples should cover 0.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let trials = 1000;
        let mut covered = 0;
        for _ in 0..trials {
            let xs: Vec<f64> = (0..30).map(|_| normal.sample(&mut rng)).collect();
            let (lo, hi) = bootstrap_ci(&xs, 1000, 0.95, &mut rng).unwrap();
            if lo <= 0.0 && 0.0 <= hi {
                covered += 1;
            }
        }
        let rate = covered as f64 / trials as f64;
        assert!((rate - 0.95).abs() < 0.03, "coverage {rate}");
    }

    #[test]
    fn welch_identical_samples_not_significant() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        let res = t_test_bonferroni(&[(xs.clone(), xs)], 1, 0.05).unwrap();
        assert_eq!(res[0].t, 0.0);
        assert!((res[0].p_raw - 1.0).abs() < 1e-12);
        assert!(!res[0].significant);
    }

    #[test]
    fn welch_separated_samples_significant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n0 = Normal::new(0.0, 1.0).unwrap();
        let n5 = Normal::new(5.0, 1.0).unwrap();
        let a: Vec<f64> = (0..30).map(|_| n0.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..30).map(|_| n5.sample(&mut rng)).collect();
        let res = t_test_bonferroni(&[(a, b)], 10, 0.05).unwrap();
        assert!(res[0].p_adjusted < 0.001, "p_adj {}", res[0].p_adjusted);
        assert!(res[0].significant);
    }

    #[test]
    fn bonferroni_identity_at_family_one() {
        let a = vec![1.0, 2.0, 3.0];
        let b = vec![1.5, 2.5, 3.5];
        let res = t_test_bonferroni(&[(a, b)], 1, 0.05).unwrap();
        assert_eq!(res[0].p_raw, res[0].p_adjusted);
    }

    #[test]
    fn bonferroni_clamps_at_one() {
        let a = vec![1.0, 2.0, 3.0];
        let res = t_test_bonferroni(&[(a.clone(), a)], 1000, 0.05).unwrap();
        assert_eq!(res[0].p_adjusted, 1.0);
    }

    #[test]
    fn zero_variance_equal_means_p_one() {
        let (t, _, p) = welch_t_test(&[2.0, 2.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(t, 0.0);
        assert_eq!(p, 1.0);
        let (_, _, p) = welch_t_test(&[2.0, 2.0], &[3.0, 3.0]).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn effect_size_examples() {
        assert!((effect_size(0.24, 0.27).unwrap() + 11.11111111111111).abs() < 1e-9);
        assert_eq!(effect_size(0.5, 0.5).unwrap(), 0.0);
        assert!((effect_size(0.745, 0.684).unwrap() - 8.918128654970757).abs() < 1e-9);
        assert_eq!(effect_size(1.0, 0.0), Err(StatsError::ZeroBaseline));
    }

    #[test]
    fn pearson_endpoints() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&xs, &[1.0, 1.0, 1.0, 1.0]), None);
    }

    #[test]
    fn pearson_null_distribution_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut big = 0;
        let reps = 200;
        for _ in 0..reps {
            let xs: Vec<f64> = (0..200).map(|_| normal.sample(&mut rng)).collect();
            let ys: Vec<f64> = (0..200).map(|_| normal.sample(&mut rng)).collect();
            if pearson(&xs, &ys).unwrap().abs() >= 0.2 {
                big += 1;
            }
        }
        assert!(big <= 2, "independent columns correlated too often: {big}/{reps}");
    }
}
