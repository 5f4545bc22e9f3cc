//! Least squares, residual percentiles, and the Gaussian helpers used
//! by the correlated-aspect generator.

use super::DatagenError;

/// Result of an ordinary least squares fit with intercept.
#[derive(Clone, Debug)]
pub struct OlsFit {
    /// `[intercept, b_1, .., b_k]`.
    pub coefficients: Vec<f64>,
    /// Absolute prediction errors `|prediction - target|`, per row.
    pub residuals: Vec<f64>,
    /// True when the normal equations were near-singular and a ridge
    /// term was added to make the solve well-posed.
    pub ridge_applied: bool,
}

/// Fits `target ~ 1 + features` by the normal equations. A rank-deficient
/// design falls back to a small ridge penalty and is flagged.
pub fn ols_fit(features: &[Vec<f64>], target: &[f64]) -> Result<OlsFit, DatagenError> {
    let n = features.len();
    if n == 0 || n != target.len() {
        return Err(DatagenError::BadConfig {
            what: format!("ols_fit: {n} feature rows for {} targets", target.len()),
        });
    }
    let k = features[0].len();
    if features.iter().any(|row| row.len() != k) {
        return Err(DatagenError::BadConfig {
            what: "ols_fit: ragged feature rows".into(),
        });
    }
    let p = k + 1; // intercept column prepended
    if n <= p {
        return Err(DatagenError::BadConfig {
            what: format!("ols_fit: need more than {p} rows, got {n}"),
        });
    }

    // Normal equations: (X'X) beta = X'y with X = [1 | features].
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (row, &y) in features.iter().zip(target) {
        let xrow: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for i in 0..p {
            xty[i] += xrow[i] * y;
            for j in 0..p {
                xtx[i][j] += xrow[i] * xrow[j];
            }
        }
    }

    let (coefficients, ridge_applied) = match solve(xtx.clone(), xty.clone()) {
        Some(beta) => (beta, false),
        None => {
            let scale = (0..p).map(|i| xtx[i][i]).fold(0.0f64, f64::max).max(1.0);
            let mut ridged = xtx;
            for (i, row) in ridged.iter_mut().enumerate() {
                row[i] += 1e-6 * scale;
            }
            let beta = solve(ridged, xty).ok_or_else(|| DatagenError::BadConfig {
                what: "ols_fit: singular design even after ridge".into(),
            })?;
            (beta, true)
        }
    };

    let residuals = features
        .iter()
        .zip(target)
        .map(|(row, &y)| {
            let pred = coefficients[0]
                + row
                    .iter()
                    .zip(&coefficients[1..])
                    .map(|(x, b)| x * b)
                    .sum::<f64>();
            (pred - y).abs()
        })
        .collect();

    Ok(OlsFit {
        coefficients,
        residuals,
        ridge_applied,
    })
}

/// Gaussian elimination with partial pivoting; `None` if a pivot is
/// numerically zero.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let p = b.len();
    let scale = a
        .iter()
        .flat_map(|r| r.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(1.0);
    for col in 0..p {
        let pivot_row = (col..p)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot_row][col].abs() < 1e-10 * scale {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..p {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for j in col..p {
                    a[row][j] -= f * a[col][j];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; p];
    for col in (0..p).rev() {
        let mut s = b[col];
        for j in col + 1..p {
            s -= a[col][j] * x[j];
        }
        x[col] = s / a[col][col];
    }
    Some(x)
}

/// Environment assignment derived from residual percentiles.
#[derive(Clone, Debug)]
pub struct EnvAssignment {
    /// Bucket per row, in input order: bucket `i` collects rows at or
    /// below the `i`-th percentile threshold; rows above the last
    /// threshold land in bucket `boundaries.len()` (the held-out pool).
    pub buckets: Vec<usize>,
    /// Residual value at each percentile boundary (nearest rank).
    pub thresholds: Vec<f64>,
    /// True when a threshold value is shared by several rows, in which
    /// case every tied row lands in the lower bucket.
    pub boundary_ties: bool,
}

/// Buckets rows by residual percentile using the nearest-rank method:
/// the `p`-th percentile of `n` sorted values is the value at rank
/// `ceil(p/100 * n)`. With boundaries `[25, 50]`, rows at or below the
/// 25th percentile form bucket 0, rows in (25th, 50th] form bucket 1,
/// and the rest form bucket 2.
pub fn assign_environments(
    residuals: &[f64],
    boundaries: &[f64],
) -> Result<EnvAssignment, DatagenError> {
    if residuals.is_empty() {
        return Err(DatagenError::BadConfig {
            what: "assign_environments: residuals are empty".into(),
        });
    }
    if boundaries.is_empty()
        || boundaries
            .iter()
            .any(|p| !(0.0..=100.0).contains(p) || p.is_nan())
        || boundaries.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(DatagenError::BadConfig {
            what: format!("assign_environments: bad percentile boundaries {boundaries:?}"),
        });
    }
    let n = residuals.len();
    let mut sorted = residuals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let thresholds: Vec<f64> = boundaries
        .iter()
        .map(|p| {
            let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
            sorted[rank.min(n) - 1]
        })
        .collect();
    let buckets: Vec<usize> = residuals
        .iter()
        .map(|r| thresholds.iter().filter(|t| r > t).count())
        .collect();
    let boundary_ties = thresholds
        .iter()
        .any(|t| residuals.iter().filter(|r| *r == t).count() > 1);
    Ok(EnvAssignment {
        buckets,
        thresholds,
        boundary_ties,
    })
}

/// A standard normal draw via Box-Muller (two uniforms, one output kept;
/// deterministic for a deterministic generator).
pub fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf polynomial
/// (absolute error below 1.5e-7), ample for mapping latent scores into
/// the unit interval.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}
