//! Segment Gaussian model of the quality score and the perception
//! characteristics distance (PCD) derived from it.
//!
//! Within each change-point segment the score at `x_i` is modeled as
//! `N(f(x_i), σ_seg²)`. The PCD for thresholds `(y_t, p_t)` is the largest
//! observed distance whose exceedance probability `P(y > y_t)` is strictly
//! above `p_t`; mPCD averages PCD over a threshold grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::DistanceSeries;
use crate::error::{Error, Result};
use crate::spline_fit::FittedCurve;
use crate::variance_changepoint::SigmaMode;

/// `P(Z > z)` for a standard normal `Z`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// `Φ(z)`.
pub fn normal_cdf(z: f64) -> f64 {
    normal_sf(-z)
}

/// `P(y > y_t)` for `y ~ N(mu, sigma²)`; a point mass when `sigma == 0`.
pub fn tail_probability(mu: f64, sigma: f64, y_t: f64) -> f64 {
    if sigma > 0.0 {
        normal_sf((y_t - mu) / sigma)
    } else if mu > y_t {
        1.0
    } else {
        0.0
    }
}

/// Sample standard deviation (denominator `n − 1`), 0 for a single value.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Fitted curve plus piecewise-constant standard deviation between change points.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentModel {
    series: DistanceSeries,
    curve: FittedCurve,
    boundaries: Vec<usize>,
    sigmas: Vec<f64>,
    mu: Vec<f64>,
    segment_of: Vec<usize>,
}

fn validate_boundaries(n: usize, boundaries: &[usize]) -> Result<()> {
    let mut prev = 0;
    for &b in boundaries {
        if b <= prev || b >= n {
            return Err(Error::InvalidConfig(format!(
                "change point {b} invalid for a series of {n} points \
                 (need strictly increasing values in 1..={})",
                n.saturating_sub(1)
            )));
        }
        prev = b;
    }
    Ok(())
}

/// 1-based inclusive segment ranges `[1, τ₁], [τ₁+1, τ₂], …, [τ_M+1, n]`.
pub fn segment_ranges(n: usize, boundaries: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 1;
    for &b in boundaries {
        out.push((start, b));
        start = b + 1;
    }
    out.push((start, n));
    out
}

/// Estimates one σ per segment delimited by `changepoints` (1-based, change
/// after each listed index).
pub fn build_segment_model(
    series: &DistanceSeries,
    curve: &FittedCurve,
    changepoints: &[usize],
    mode: SigmaMode,
) -> Result<SegmentModel> {
    let n = series.len();
    validate_boundaries(n, changepoints)?;
    let mu = curve.evaluate_many(series.x())?;
    let values: Vec<f64> = match mode {
        SigmaMode::SegmentRaw => series.y().to_vec(),
        SigmaMode::SegmentResidual => series.y().iter().zip(&mu).map(|(y, m)| y - m).collect(),
    };
    let sigmas = segment_ranges(n, changepoints)
        .into_iter()
        .map(|(a, b)| sample_std(&values[a - 1..b]))
        .collect();
    SegmentModel::assemble(
        series.clone(),
        curve.clone(),
        changepoints.to_vec(),
        sigmas,
        mu,
    )
}

impl SegmentModel {
    /// Rebuilds a model from stored change points and σ values.
    pub fn from_parts(
        series: DistanceSeries,
        curve: FittedCurve,
        boundaries: Vec<usize>,
        sigmas: Vec<f64>,
    ) -> Result<Self> {
        validate_boundaries(series.len(), &boundaries)?;
        let mu = curve.evaluate_many(series.x())?;
        Self::assemble(series, curve, boundaries, sigmas, mu)
    }

    fn assemble(
        series: DistanceSeries,
        curve: FittedCurve,
        boundaries: Vec<usize>,
        sigmas: Vec<f64>,
        mu: Vec<f64>,
    ) -> Result<Self> {
        if sigmas.len() != boundaries.len() + 1 {
            return Err(Error::InvalidConfig(format!(
                "{} sigmas for {} segments",
                sigmas.len(),
                boundaries.len() + 1
            )));
        }
        if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidConfig(
                "segment sigmas must be finite and >= 0".into(),
            ));
        }
        let mut segment_of = Vec::with_capacity(series.len());
        for (k, (a, b)) in segment_ranges(series.len(), &boundaries)
            .into_iter()
            .enumerate()
        {
            segment_of.extend(std::iter::repeat_n(k, b - a + 1));
        }
        Ok(Self {
            series,
            curve,
            boundaries,
            sigmas,
            mu,
            segment_of,
        })
    }

    pub fn series(&self) -> &DistanceSeries {
        &self.series
    }

    pub fn curve(&self) -> &FittedCurve {
        &self.curve
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// `f(x_i)` at every observed distance.
    pub fn means(&self) -> &[f64] {
        &self.mu
    }

    pub fn segments(&self) -> Vec<(usize, usize)> {
        segment_ranges(self.series.len(), &self.boundaries)
    }

    /// σ of the segment containing 0-based point `i`.
    pub fn sigma_at_index(&self, i: usize) -> f64 {
        self.sigmas[self.segment_of[i]]
    }

    /// σ at an arbitrary distance: the segment of the last observed point at
    /// or before `x` (the first segment left of the data).
    pub fn sigma_at(&self, x: f64) -> f64 {
        let j = self.series.x().partition_point(|&v| v <= x);
        self.sigma_at_index(j.saturating_sub(1))
    }
}

/// `P(y_i > y_t)` for 0-based point `i` of the model's series.
pub fn exceedance_probability(model: &SegmentModel, i: usize, y_t: f64) -> f64 {
    tail_probability(model.mu[i], model.sigma_at_index(i), y_t)
}

fn check_threshold(what: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{what} must lie in (0, 1), got {v}"
        )))
    }
}

/// Where PCD candidates are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PcdDomain {
    /// The observed distances `x_i`.
    #[default]
    Observed,
    /// An evenly spaced grid of `resolution` points over the curve domain,
    /// with `μ = f(x)` and σ from the enclosing segment.
    Dense { resolution: usize },
}

/// `max { x_i : P(y_i > y_t) > p_t }` over observed points, `None` when no
/// point qualifies.
pub fn compute_pcd(model: &SegmentModel, y_t: f64, p_t: f64) -> Result<Option<f64>> {
    compute_pcd_in(model, y_t, p_t, PcdDomain::Observed)
}

pub fn compute_pcd_in(
    model: &SegmentModel,
    y_t: f64,
    p_t: f64,
    domain: PcdDomain,
) -> Result<Option<f64>> {
    check_threshold("y_t", y_t)?;
    check_threshold("p_t", p_t)?;
    match domain {
        PcdDomain::Observed => {
            let x = model.series.x();
            Ok((0..x.len())
                .rev()
                .find(|&i| exceedance_probability(model, i, y_t) > p_t)
                .map(|i| x[i]))
        }
        PcdDomain::Dense { resolution } => {
            let xs = dense_grid(model.curve.domain(), resolution)?;
            for &x in xs.iter().rev() {
                let mu = model.curve.evaluate(x)?;
                if tail_probability(mu, model.sigma_at(x), y_t) > p_t {
                    return Ok(Some(x));
                }
            }
            Ok(None)
        }
    }
}

/// `resolution` evenly spaced points over `[lo, hi]`, endpoints included.
pub fn dense_grid((lo, hi): (f64, f64), resolution: usize) -> Result<Vec<f64>> {
    if resolution < 2 {
        return Err(Error::InvalidConfig(format!(
            "resolution must be at least 2, got {resolution}"
        )));
    }
    let step = (hi - lo) / (resolution - 1) as f64;
    Ok((0..resolution)
        .map(|i| {
            if i + 1 == resolution {
                hi
            } else {
                lo + i as f64 * step
            }
        })
        .collect())
}

/// Threshold values for `y_t` (rows) and `p_t` (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    y_values: Vec<f64>,
    p_values: Vec<f64>,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        let axis: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        Self {
            y_values: axis.clone(),
            p_values: axis,
        }
    }
}

impl ThresholdGrid {
    pub fn new(y_values: Vec<f64>, p_values: Vec<f64>) -> Result<Self> {
        for (name, axis) in [("y_t", &y_values), ("p_t", &p_values)] {
            if axis.is_empty() {
                return Err(Error::Empty("threshold grid axis"));
            }
            for &v in axis.iter() {
                check_threshold(name, v)?;
            }
            if axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidConfig(format!(
                    "{name} grid must be strictly increasing"
                )));
            }
        }
        Ok(Self { y_values, p_values })
    }

    /// Same axis for both thresholds.
    pub fn square(axis: Vec<f64>) -> Result<Self> {
        Self::new(axis.clone(), axis)
    }

    /// Parses `LO:STEP:HI` into an inclusive axis. Values are rounded to 12
    /// decimals so `0.1:0.1:0.9` yields exactly `0.1, 0.2, …, 0.9`.
    pub fn parse_axis(spec: &str) -> Result<Vec<f64>> {
        let bad = || Error::InvalidConfig(format!("grid `{spec}` is not LO:STEP:HI"));
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [lo, step, hi] = parts[..] else {
            return Err(bad());
        };
        if !(lo.is_finite() && hi.is_finite() && step.is_finite()) || step <= 0.0 || hi < lo {
            return Err(bad());
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        Ok((0..count)
            .map(|k| ((lo + k as f64 * step) * 1e12).round() / 1e12)
            .collect())
    }

    pub fn y_values(&self) -> &[f64] {
        &self.y_values
    }

    pub fn p_values(&self) -> &[f64] {
        &self.p_values
    }

    pub fn cells(&self) -> usize {
        self.y_values.len() * self.p_values.len()
    }
}

/// PCD over a threshold grid; `values[row][col]` holds `y_values[row]`,
/// `p_values[col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcdSurface {
    pub grid: ThresholdGrid,
    pub values: Vec<Vec<Option<f64>>>,
    pub mpcd: f64,
}

impl PcdSurface {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row][col]
    }

    /// Largest defined cell, 0 when every cell is absent.
    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .flatten()
            .fold(0.0, |a: f64, &b| a.max(b))
    }
}

pub fn compute_pcd_surface(model: &SegmentModel, grid: &ThresholdGrid) -> Result<PcdSurface> {
    compute_pcd_surface_in(model, grid, PcdDomain::Observed)
}

/// Cells are evaluated in parallel and collected in row-major order.
pub fn compute_pcd_surface_in(
    model: &SegmentModel,
    grid: &ThresholdGrid,
    domain: PcdDomain,
) -> Result<PcdSurface> {
    let cols = grid.p_values.len();
    let flat: Vec<Option<f64>> = (0..grid.cells())
        .into_par_iter()
        .map(|c| {
            compute_pcd_in(
                model,
                grid.y_values[c / cols],
                grid.p_values[c % cols],
                domain,
            )
        })
        .collect::<Result<_>>()?;
    let values: Vec<Vec<Option<f64>>> = flat.chunks(cols).map(<[_]>::to_vec).collect();
    let mpcd = mean_pcd(&values)?;
    Ok(PcdSurface {
        grid: grid.clone(),
        values,
        mpcd,
    })
}

/// Mean over all cells in row-major order, absent cells counted as 0 m.
pub fn mean_pcd(values: &[Vec<Option<f64>>]) -> Result<f64> {
    let cells: usize = values.iter().map(Vec::len).sum();
    if cells == 0 {
        return Err(Error::Empty("PCD surface has no cells"));
    }
    let mut total = 0.0;
    for row in values {
        for cell in row {
            total += cell.unwrap_or(0.0);
        }
    }
    Ok(total / cells as f64)
}

/// Mean IoU × confidence over the series.
pub fn mean_quality_score(series: &DistanceSeries) -> f64 {
    series.y().iter().sum::<f64>() / series.len() as f64
}
