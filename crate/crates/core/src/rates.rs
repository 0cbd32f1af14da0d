//! Log-log regression of mean-square RVE deviations against `ε/η`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RatePoint {
    /// `ln(ε/η_l)`.
    pub x: f64,
    /// `ln δ_l²`, with `δ_l²` the mean squared Frobenius deviation from the reference.
    pub y: f64,
    /// Delta-method standard error of `y`.
    pub y_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateEstimate {
    pub beta: f64,
    pub ln_c: f64,
    pub stderr_beta: f64,
    pub points: Vec<RatePoint>,
}

/// Unweighted mean of the per-level empirical means.
///
/// `levels[l][j]` is sample `j` of level `l`, a vector of tensor entries.
pub fn pooled_reference(levels: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    if levels.is_empty() || levels.iter().any(|l| l.is_empty()) {
        return Err(Error::param("pooled reference needs at least one sample per level"));
    }
    let width = levels[0][0].len();
    let mut out = vec![0.0; width];
    for level in levels {
        let n = level.len() as f64;
        let mut mean = vec![0.0; width];
        for s in level {
            if s.len() != width {
                return Err(Error::Dimension("samples of differing width".into()));
            }
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for (o, m) in out.iter_mut().zip(&mean) {
            *o += m / n;
        }
    }
    let l = levels.len() as f64;
    for o in &mut out {
        *o /= l;
    }
    Ok(out)
}

/// Ordinary least squares `y = beta x + ln_c`; returns `(beta, ln_c, stderr_beta)`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::DegenerateRegression(format!("need at least 2 points, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateRegression("all abscissae coincide".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let beta = sxy / sxx;
    let ln_c = my - beta * mx;
    let stderr = if n > 2 {
        let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - ln_c - beta * a).powi(2)).sum();
        (ssr / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok((beta, ln_c, stderr))
}

/// Fits `ln δ_l² ≈ β ln(ε/η_l) + ln C` on the given levels.
pub fn estimate_beta(levels: &[Vec<Vec<f64>>], reference: &[f64], epsilon: f64, eta: &[f64]) -> Result<RateEstimate> {
    if levels.len() != eta.len() {
        return Err(Error::Dimension(format!("{} sample sets for {} RVE sizes", levels.len(), eta.len())));
    }
    if levels.len() < 2 || levels.iter().any(|l| l.len() < 2) {
        return Err(Error::param("rate estimation needs at least 2 levels with at least 2 samples each"));
    }
    if !(epsilon > 0.0) || eta.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::param("epsilon and eta must be positive"));
    }
    let mut points = Vec::with_capacity(levels.len());
    for (l, samples) in levels.iter().enumerate() {
        let d2: Vec<f64> = samples
            .iter()
            .map(|s| s.iter().zip(reference).map(|(a, r)| (a - r) * (a - r)).sum())
            .collect();
        let m = d2.len() as f64;
        let msd = d2.iter().sum::<f64>() / m;
        if !(msd > 0.0) {
            return Err(Error::DegenerateRegression(format!("zero mean-square deviation at level {}", l + 1)));
        }
        let var = d2.iter().map(|v| (v - msd) * (v - msd)).sum::<f64>() / (m - 1.0);
        points.push(RatePoint {
            x: (epsilon / eta[l]).ln(),
            y: msd.ln(),
            y_err: (var / m).sqrt() / msd,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    let (beta, ln_c, stderr_beta) = ols(&xs, &ys)?;
    Ok(RateEstimate {
        beta,
        ln_c,
        stderr_beta,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manufactured(c: f64, beta: f64, eps: f64, eta: &[f64]) -> Vec<Vec<Vec<f64>>> {
        eta.iter()
            .map(|e| {
                let d = (c * (eps / e).powf(beta)).sqrt();
                vec![vec![1.0 + d], vec![1.0 - d]]
            })
            .collect()
    }

    #[test]
    fn recovers_noiseless_power_law() {
        let eta = [0.125, 0.25, 0.5, 1.0];
        let eps = 0.01;
        let c = 1.059f64.exp();
        let levels = manufactured(c, 1.53, eps, &eta);
        let r = estimate_beta(&levels, &[1.0], eps, &eta).unwrap();
        assert!((r.beta - 1.53).abs() < 1e-10);
        assert!((r.ln_c - 1.059).abs() < 1e-10);
        assert!(r.stderr_beta < 1e-8);
    }

    #[test]
    fn flat_deviations_give_zero_slope() {
        let levels = vec![vec![vec![0.0], vec![2.0]], vec![vec![0.0], vec![2.0]]];
        let r = estimate_beta(&levels, &[1.0], 0.01, &[0.1, 0.2]).unwrap();
        assert!(r.beta.abs() < 1e-14);
        assert_eq!(r.stderr_beta, 0.0);
    }

    #[test]
    fn zero_deviation_is_degenerate() {
        let levels = vec![vec![vec![1.0], vec![1.0]], vec![vec![0.0], vec![2.0]]];
        assert!(matches!(
            estimate_beta(&levels, &[1.0], 0.01, &[0.1, 0.2]),
            Err(Error::DegenerateRegression(_))
        ));
    }

    #[test]
    fn pooled_reference_is_mean_of_means() {
        let r = pooled_reference(&[vec![vec![0.0], vec![2.0]], vec![vec![3.0]]]).unwrap();
        assert_eq!(r, vec![2.0]);
        let r = pooled_reference(&[vec![vec![4.0]; 3], vec![vec![4.0]; 7]]).unwrap();
        assert_eq!(r, vec![4.0]);
        assert!(pooled_reference(&[vec![vec![1.0]], vec![]]).is_err());
    }

    #[test]
    fn four_level_reference_counts_are_accepted() {
        let counts = [2000, 1000, 300, 140];
        let levels: Vec<Vec<Vec<f64>>> = counts.iter().map(|&m| vec![vec![1.0, 0.0, 0.0, 1.0]; m]).collect();
        assert_eq!(pooled_reference(&levels).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn scaling_shifts_intercept_only(k in 0.1f64..10.0, beta in 0.2f64..3.0) {
            let eta = [0.125, 0.25, 0.5];
            let a = estimate_beta(&manufactured(2.0, beta, 0.01, &eta), &[1.0], 0.01, &eta).unwrap();
            let b = estimate_beta(&manufactured(2.0 * k * k, beta, 0.01, &eta), &[1.0], 0.01, &eta).unwrap();
            prop_assert!((a.beta - b.beta).abs() < 1e-9);
            prop_assert!((b.ln_c - a.ln_c - (k * k).ln()).abs() < 1e-9);
        }
    }
}
