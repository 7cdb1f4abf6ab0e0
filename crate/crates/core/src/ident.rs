//! Ridge regression from subject height to identity parameters.
//!
//! The design is `[height, 1]`; only the slope is penalized, so the intercept
//! absorbs the mean identity. Ridge strength is chosen by exact
//! leave-one-out cross-validation through the hat matrix.

use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `[height_m, identity...]` training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySample {
    pub height: f64,
    pub identity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub samples: usize,
    pub loocv_error: f64,
    /// LOOCV error per grid entry; `None` where the design was singular.
    pub grid: Vec<(f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRegressor {
    pub input_dim: usize,
    /// One `[slope, intercept]` row per identity parameter.
    pub weights: Vec<[f64; 2]>,
    pub ridge_lambda: f64,
    pub training_meta: TrainingMeta,
}

/// 13 log-spaced values from 1e-4 to 1e2.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..13).map(|k| 10f64.powf(-4.0 + 0.5 * k as f64)).collect()
}

fn validate(samples: &[IdentitySample]) -> Result<usize> {
    if samples.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 samples, got {}",
            samples.len()
        )));
    }
    let d = samples[0].identity.len();
    for (i, s) in samples.iter().enumerate() {
        if s.identity.len() != d {
            return Err(Error::DimensionMismatch {
                what: format!("identity of sample {i}"),
                expected: d,
                got: s.identity.len(),
            });
        }
        if !s.height.is_finite() || s.identity.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("sample {i} is not finite")));
        }
    }
    Ok(d)
}

fn normal_matrix(samples: &[IdentitySample], lambda: f64) -> Result<Matrix2<f64>> {
    let (mut shh, mut sh) = (0.0, 0.0);
    for s in samples {
        shh += s.height * s.height;
        sh += s.height;
    }
    let n = samples.len() as f64;
    let m = Matrix2::new(shh + lambda, sh, sh, n);
    let det = m.determinant();
    if !(det > 1e-12 * m[(0, 0)] * m[(1, 1)]) {
        return Err(Error::DegenerateDesign { lambda });
    }
    Ok(m)
}

/// Closed-form fit: one `[slope, intercept]` per identity parameter.
fn solve_weights(samples: &[IdentitySample], d: usize, lambda: f64) -> Result<(Matrix2<f64>, Vec<[f64; 2]>)> {
    let inv = normal_matrix(samples, lambda)?
        .try_inverse()
        .ok_or(Error::DegenerateDesign { lambda })?;
    let weights = (0..d)
        .map(|j| {
            let mut xty = Vector2::zeros();
            for s in samples {
                xty += Vector2::new(s.height, 1.0) * s.identity[j];
            }
            let w = inv * xty;
            [w[0], w[1]]
        })
        .collect();
    Ok((inv, weights))
}

/// Exact leave-one-out mean squared error (over samples and parameters).
pub fn loocv_error(samples: &[IdentitySample], lambda: f64) -> Result<f64> {
    let d = validate(samples)?;
    let (inv, w) = solve_weights(samples, d, lambda)?;
    let mut acc = 0.0;
    for s in samples {
        let x = Vector2::new(s.height, 1.0);
        let leverage = x.dot(&(inv * x));
        let denom = 1.0 - leverage;
        if !(denom.abs() > 1e-12) {
            return Err(Error::DegenerateDesign { lambda });
        }
        for (j, wj) in w.iter().enumerate() {
            let r = s.identity[j] - (wj[0] * s.height + wj[1]);
            acc += (r / denom).powi(2);
        }
    }
    Ok(acc / (samples.len() * d) as f64)
}

pub fn fit_ridge_loocv(samples: &[IdentitySample], lambda_grid: &[f64]) -> Result<IdentityRegressor> {
    let d = validate(samples)?;
    if lambda_grid.is_empty() {
        return Err(Error::InvalidInput("lambda grid is empty".into()));
    }
    if let Some(l) = lambda_grid.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda {l} is not a non-negative number")));
    }
    let mut grid = Vec::with_capacity(lambda_grid.len());
    let mut best: Option<(f64, f64)> = None;
    let mut first_err = None;
    for &lambda in lambda_grid {
        match loocv_error(samples, lambda) {
            Ok(e) => {
                grid.push((lambda, Some(e)));
                let better = match best {
                    None => true,
                    Some((bl, be)) => e < be || (e == be && lambda > bl),
                };
                if better {
                    best = Some((lambda, e));
                }
            }
            Err(err @ Error::DegenerateDesign { .. }) => {
                log::warn!("lambda {lambda}: {err}");
                grid.push((lambda, None));
                first_err.get_or_insert(err);
            }
            Err(e) => return Err(e),
        }
    }
    let Some((lambda, err)) = best else {
        return Err(first_err.unwrap_or(Error::DegenerateDesign { lambda: lambda_grid[0] }));
    };
    let (_, weights) = solve_weights(samples, d, lambda)?;
    Ok(IdentityRegressor {
        input_dim: 1,
        weights,
        ridge_lambda: lambda,
        training_meta: TrainingMeta {
            samples: samples.len(),
            loocv_error: err,
            grid,
        },
    })
}

impl IdentityRegressor {
    pub fn identity_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn predict(&self, height: f64) -> Result<Vec<f64>> {
        predict_identity(self, height)
    }
}

pub fn predict_identity(reg: &IdentityRegressor, height: f64) -> Result<Vec<f64>> {
    if !(height > 0.0) {
        return Err(Error::NonPositiveHeight(height));
    }
    Ok(reg.weights.iter().map(|w| w[0] * height + w[1]).collect())
}

/// Reads a `height_m,i0,i1,...` table.
pub fn read_training_csv(path: impl AsRef<Path>) -> Result<Vec<IdentitySample>> {
    let path = path.as_ref();
    let inner = || -> Result<Vec<IdentitySample>> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.get(0) != Some("height_m") {
            return Err(Error::Parse("first column must be height_m".into()));
        }
        let mut out = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("row {}: bad number '{s}'", row + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            out.push(IdentitySample {
                height: vals[0],
                identity: vals[1..].to_vec(),
            });
        }
        Ok(out)
    };
    inner().map_err(|e| e.in_file(path))
}

pub fn write_training_csv(path: impl AsRef<Path>, samples: &[IdentitySample]) -> Result<()> {
    let path = path.as_ref();
    let inner = || -> Result<()> {
        let d = samples.first().map_or(0, |s| s.identity.len());
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["height_m".to_string()];
        header.extend((0..d).map(|i| format!("i{i}")));
        w.write_record(&header)?;
        for s in samples {
            let mut rec = vec![s.height.to_string()];
            rec.extend(s.identity.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    };
    inner().map_err(|e| e.in_file(path))
}

/// Brute-force leave-one-out error: `n` independent refits. Used as an
/// oracle for [`loocv_error`].
pub fn loocv_error_brute_force(samples: &[IdentitySample], lambda: f64) -> Result<f64> {
    let d = validate(samples)?;
    let n = samples.len();
    let mut acc = 0.0;
    for i in 0..n {
        // fit without sample i using a generic dense solve
        let rest: Vec<&IdentitySample> = samples
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .map(|(_, s)| s)
            .collect();
        let x = DMatrix::from_fn(n - 1, 2, |r, c| if c == 0 { rest[r].height } else { 1.0 });
        let y = DMatrix::from_fn(n - 1, d, |r, c| rest[r].identity[c]);
        let mut a = x.transpose() * &x;
        a[(0, 0)] += lambda;
        let w = a
            .lu()
            .solve(&(x.transpose() * y))
            .ok_or(Error::DegenerateDesign { lambda })?;
        for j in 0..d {
            let pred = w[(0, j)] * samples[i].height + w[(1, j)];
            acc += (samples[i].identity[j] - pred).powi(2);
        }
    }
    Ok(acc / (n * d) as f64)
}
