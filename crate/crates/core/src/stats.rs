//! Sample statistics used by the ensemble diagnostics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::summation::pairwise_sum;
use crate::{Error, Result};

fn need(xs: &[f64], needed: usize) -> Result<()> {
    if xs.len() < needed {
        return Err(Error::InsufficientSamples { needed, have: xs.len() });
    }
    Ok(())
}

pub fn mean(xs: &[f64]) -> Result<f64> {
    need(xs, 1)?;
    Ok(pairwise_sum(xs) / xs.len() as f64)
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> Result<f64> {
    need(xs, 2)?;
    let m = mean(xs)?;
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    Ok(pairwise_sum(&sq) / (xs.len() - 1) as f64)
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> Result<f64> {
    Ok((variance(xs)? / xs.len() as f64).sqrt())
}

/// Mean and standard error in one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn of(xs: &[f64]) -> Result<Self> {
        Ok(Self { mean: mean(xs)?, se: std_error(xs)? })
    }
}

fn central_moment(xs: &[f64], m: f64, p: i32) -> f64 {
    let v: Vec<f64> = xs.iter().map(|x| (x - m).powi(p)).collect();
    pairwise_sum(&v) / xs.len() as f64
}

/// Moment skewness `m₃ / m₂^{3/2}`.
pub fn skewness(xs: &[f64]) -> Result<f64> {
    need(xs, 3)?;
    let m = mean(xs)?;
    let m2 = central_moment(xs, m, 2);
    if m2 == 0.0 {
        return Err(Error::Domain("skewness of a constant sample".into()));
    }
    Ok(central_moment(xs, m, 3) / m2.powf(1.5))
}

/// Moment excess kurtosis `m₄ / m₂² − 3`.
pub fn excess_kurtosis(xs: &[f64]) -> Result<f64> {
    need(xs, 4)?;
    let m = mean(xs)?;
    let m2 = central_moment(xs, m, 2);
    if m2 == 0.0 {
        return Err(Error::Domain("kurtosis of a constant sample".into()));
    }
    Ok(central_moment(xs, m, 4) / (m2 * m2) - 3.0)
}

/// Sample covariance and the standard error of that estimate, taken as the
/// standard error of the mean of the centered products.
pub fn covariance(xs: &[f64], ys: &[f64]) -> Result<Estimate> {
    if xs.len() != ys.len() {
        return Err(Error::Shape { expected: xs.len(), got: ys.len() });
    }
    need(xs, 3)?;
    let (mx, my) = (mean(xs)?, mean(ys)?);
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let n = xs.len() as f64;
    let cov = pairwise_sum(&prods) / (n - 1.0);
    let se = std_error(&prods)?;
    Ok(Estimate { mean: cov, se })
}

/// Ordinary least squares fit `y ≈ a + b x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Half-width of the 95% confidence interval of the slope.
    pub slope_half_width: f64,
}

pub fn ols(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::Shape { expected: xs.len(), got: ys.len() });
    }
    need(xs, 2)?;
    let (mx, my) = (mean(xs)?, mean(ys)?);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Design("regressor has no spread".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let dof = xs.len() as f64 - 2.0;
    let slope_half_width = if dof > 0.0 {
        let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        let se = (rss / dof / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, dof)
            .map_err(|e| Error::Domain(e.to_string()))?
            .inverse_cdf(0.975);
        t * se
    } else {
        f64::INFINITY
    };
    Ok(LinearFit { slope, intercept, slope_half_width })
}
