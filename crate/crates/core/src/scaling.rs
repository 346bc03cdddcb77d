//! Model-specific utility scaling functions `rho(b)`: the relative utility a
//! model keeps when a query is served in a batch of size `b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalingFn {
    Constant,
    /// Knots are `(batch size, u(b) / u(1))`, strictly increasing in `b`,
    /// the first at `b = 1`.
    PiecewiseLinear { knots: Vec<(u32, f64)> },
    /// `1 - alpha * (b - 1)^beta`.
    PowerLaw { alpha: f64, beta: f64 },
}

impl Default for ScalingFn {
    fn default() -> Self {
        ScalingFn::Constant
    }
}

impl ScalingFn {
    /// Evaluates `rho(b)`, clamped to [0, 1]. Always 1 at `b <= 1`.
    pub fn evaluate(&self, b: u32) -> f64 {
        if b <= 1 {
            return 1.0;
        }
        let raw = match self {
            ScalingFn::Constant => 1.0,
            ScalingFn::PowerLaw { alpha, beta } => 1.0 - alpha * f64::from(b - 1).powf(*beta),
            ScalingFn::PiecewiseLinear { knots } => interpolate(knots, b),
        };
        raw.clamp(0.0, 1.0)
    }

    pub fn is_constant(&self) -> bool {
        match self {
            ScalingFn::Constant => true,
            ScalingFn::PowerLaw { alpha, .. } => *alpha == 0.0,
            ScalingFn::PiecewiseLinear { knots } => knots.iter().all(|&(_, r)| r >= 1.0),
        }
    }
}

fn interpolate(knots: &[(u32, f64)], b: u32) -> f64 {
    match knots.iter().position(|&(kb, _)| kb >= b) {
        None => knots.last().map_or(1.0, |&(_, r)| r),
        Some(i) if knots[i].0 == b || i == 0 => knots[i].1,
        Some(i) => {
            let (b0, r0) = knots[i - 1];
            let (b1, r1) = knots[i];
            let t = f64::from(b - b0) / f64::from(b1 - b0);
            r0 + t * (r1 - r0)
        }
    }
}

fn check_samples(samples: &[(u32, f64)]) -> Result<f64> {
    let Some(&(b0, u1)) = samples.first() else {
        return Err(Error::invalid("no scaling samples"));
    };
    if b0 != 1 {
        return Err(Error::invalid("scaling samples must include batch size 1 first"));
    }
    if samples.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::invalid("scaling sample batch sizes must be strictly increasing"));
    }
    if samples.iter().any(|&(_, u)| !u.is_finite() || u < 0.0) {
        return Err(Error::invalid("scaling sample utilities must be finite and nonnegative"));
    }
    if u1 <= 0.0 {
        return Err(Error::UtilityCollapse { batch_size: 1 });
    }
    Ok(u1)
}

/// Piecewise-linear interpolation of sampled mean utilities, normalized by
/// the utility at `b = 1`. Sampled points reproduce their ratio exactly;
/// batch sizes past the last sample keep the last ratio.
pub fn fit_scaling_piecewise(samples: &[(u32, f64)]) -> Result<ScalingFn> {
    let u1 = check_samples(samples)?;
    let knots = samples
        .iter()
        .map(|&(b, u)| (b, if b == 1 { 1.0 } else { u / u1 }))
        .collect();
    Ok(ScalingFn::PiecewiseLinear { knots })
}

const RATIO_EPS: f64 = 1e-12;

/// Least-squares fit of `rho(b) = 1 - alpha (b - 1)^beta` to the sampled
/// ratios `u(b) / u(1)`.
///
/// A log-domain linear regression over the points with `rho < 1` gives the
/// starting point; Levenberg-Marquardt then minimizes the squared ratio
/// residuals over all samples. Noiseless data is recovered by the first
/// stage alone.
pub fn fit_scaling_power_law(samples: &[(u32, f64)]) -> Result<ScalingFn> {
    let u1 = check_samples(samples)?;
    if samples.len() < 3 {
        return Err(Error::invalid("power-law fit needs at least 3 samples"));
    }
    let points: Vec<(f64, f64)> = samples[1..]
        .iter()
        .map(|&(b, u)| (f64::from(b - 1), u / u1))
        .collect();

    if points.iter().all(|&(_, r)| (r - 1.0).abs() <= RATIO_EPS) {
        return Ok(ScalingFn::PowerLaw { alpha: 0.0, beta: 1.0 });
    }

    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|&&(_, r)| r < 1.0 - RATIO_EPS)
        .map(|&(x, r)| (x.ln(), (1.0 - r).ln()))
        .collect();

    let (mut alpha, mut beta) = match logs.len() {
        0 => (0.0, 1.0),
        1 => {
            let (lx, ly) = logs[0];
            (ly.exp() / lx.exp(), 1.0)
        }
        _ => {
            let n = logs.len() as f64;
            let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
            let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
            let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            if sxx > 0.0 {
                let beta = sxy / sxx;
                ((my - beta * mx).exp(), beta)
            } else {
                (my.exp(), 1.0)
            }
        }
    };

    refine_power_law(&points, &mut alpha, &mut beta);
    Ok(ScalingFn::PowerLaw { alpha, beta })
}

fn power_law_sse(points: &[(f64, f64)], alpha: f64, beta: f64) -> f64 {
    points
        .iter()
        .map(|&(x, r)| (r - (1.0 - alpha * x.powf(beta))).powi(2))
        .sum()
}

fn refine_power_law(points: &[(f64, f64)], alpha: &mut f64, beta: &mut f64) {
    let mut lambda = 1e-3;
    let mut sse = power_law_sse(points, *alpha, *beta);
    for _ in 0..200 {
        if sse < 1e-28 {
            break;
        }
        // normal equations J^T J d = J^T e for residual e = r - f
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(x, r) in points {
            let p = x.powf(*beta);
            let f = 1.0 - *alpha * p;
            let e = r - f;
            let da = -p;
            let db = -*alpha * p * x.ln();
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * e;
            gb += db * e;
        }
        let a11 = jaa * (1.0 + lambda);
        let a22 = jbb * (1.0 + lambda);
        let det = a11 * a22 - jab * jab;
        if det.abs() < f64::MIN_POSITIVE {
            break;
        }
        let step_a = (ga * a22 - gb * jab) / det;
        let step_b = (a11 * gb - jab * ga) / det;
        let (na, nb) = (*alpha + step_a, *beta + step_b);
        let new_sse = power_law_sse(points, na, nb);
        if new_sse.is_finite() && new_sse < sse {
            *alpha = na;
            *beta = nb;
            let improvement = sse - new_sse;
            sse = new_sse;
            lambda = (lambda / 10.0).max(1e-12);
            if improvement < 1e-30 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
}
