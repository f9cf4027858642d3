//! Synthetic heteroscedastic score series with planted variance changes, and
//! brute-force reference implementations used to cross-check the pipeline.
//!
//! The reference routines deliberately avoid the production code paths: the
//! SIC scan recomputes every sum from scratch, and the PCD scan uses its own
//! normal tail evaluation and segment lookup.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_model::DistanceSeries;
use crate::error::{Error, Result};
use crate::pcd_metric::SegmentModel;
use crate::spline_fit::{BoundaryKnots, FittedCurve, KnotPlacement, SplineConfig};
use crate::variance_changepoint::ZERO_VARIANCE_FLOOR;

/// Mean score as a function of distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MeanKind {
    Constant {
        c: f64,
    },
    /// `a + b·x`
    Linear {
        a: f64,
        b: f64,
    },
    /// `top / (1 + exp((x − midpoint) / scale))`, a score that holds up at
    /// short range and falls off past `midpoint`.
    Logistic {
        top: f64,
        midpoint: f64,
        scale: f64,
    },
}

impl MeanKind {
    pub fn at(&self, x: f64) -> f64 {
        match *self {
            MeanKind::Constant { c } => c,
            MeanKind::Linear { a, b } => a + b * x,
            MeanKind::Logistic {
                top,
                midpoint,
                scale,
            } => top / (1.0 + ((x - midpoint) / scale).exp()),
        }
    }

    /// Parses `constant:C`, `linear:A,B` or `logistic:TOP,MID,SCALE`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidConfig(format!(
                "mean `{spec}` is not constant:C, linear:A,B or logistic:TOP,MID,SCALE"
            ))
        };
        let (kind, args) = spec.split_once(':').ok_or_else(bad)?;
        let args: Vec<f64> = args
            .split(',')
            .map(|a| a.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match (kind.trim(), args.as_slice()) {
            ("constant", &[c]) => Ok(MeanKind::Constant { c }),
            ("linear", &[a, b]) => Ok(MeanKind::Linear { a, b }),
            ("logistic", &[top, midpoint, scale]) => Ok(MeanKind::Logistic {
                top,
                midpoint,
                scale,
            }),
            _ => Err(bad()),
        }
    }
}

/// Description of a synthetic series. Also the schema of the TOML config
/// file accepted by `pcd synth --config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub mean: MeanKind,
    /// Planted change positions in meters; a point with `x <= b` lies left
    /// of boundary `b`.
    #[serde(default)]
    pub boundaries: Vec<f64>,
    pub segment_sigmas: Vec<f64>,
    pub n: usize,
    pub x_range: (f64, f64),
    #[serde(default)]
    pub seed: u64,
}

/// Planted truth returned alongside a generated series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boundaries: Vec<f64>,
    /// 1-based change indices: the number of points at or left of each boundary.
    pub change_indices: Vec<usize>,
    pub sigmas: Vec<f64>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n < 2 {
            return bad(format!("synthetic series needs n >= 2, got {}", self.n));
        }
        let (lo, hi) = self.x_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi && lo >= 0.0) {
            return bad(format!(
                "x range [{lo}, {hi}] must be finite, non-negative and increasing"
            ));
        }
        if self.boundaries.iter().any(|b| !(*b > lo && *b < hi)) {
            return bad("boundaries must lie strictly inside the x range".into());
        }
        if self.boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return bad("boundaries must be strictly increasing".into());
        }
        if self.segment_sigmas.len() != self.boundaries.len() + 1 {
            return bad(format!(
                "{} sigmas for {} segments",
                self.segment_sigmas.len(),
                self.boundaries.len() + 1
            ));
        }
        if self
            .segment_sigmas
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return bad("sigmas must be finite and non-negative".into());
        }
        if let MeanKind::Logistic { scale, .. } = self.mean {
            if !(scale > 0.0 && scale.is_finite()) {
                return bad("logistic scale must be positive".into());
            }
        }
        Ok(())
    }

    /// Evenly spaced distances over the x range, endpoints included.
    pub fn distances(&self) -> Vec<f64> {
        let (lo, hi) = self.x_range;
        let step = (hi - lo) / (self.n - 1) as f64;
        (0..self.n)
            .map(|i| {
                if i + 1 == self.n {
                    hi
                } else {
                    lo + i as f64 * step
                }
            })
            .collect()
    }

    /// Boundary position halfway between the `index`-th and `index+1`-th
    /// points (1-based), so the planted change index is exactly `index`.
    pub fn boundary_after_index(n: usize, x_range: (f64, f64), index: usize) -> f64 {
        let step = (x_range.1 - x_range.0) / (n - 1) as f64;
        x_range.0 + (index as f64 - 0.5) * step
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("synth config: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Draws the series. Each segment has its own random stream derived from
/// the seed, so a segment's noise does not depend on how many segments
/// precede it.
pub fn generate(spec: &SynthSpec) -> Result<(DistanceSeries, GroundTruth)> {
    spec.validate()?;
    let x = spec.distances();
    let mut y = Vec::with_capacity(spec.n);
    let mut streams: Vec<Option<ChaCha8Rng>> = vec![None; spec.segment_sigmas.len()];
    for &xi in &x {
        let seg = spec.boundaries.iter().filter(|&&b| b < xi).count();
        let sigma = spec.segment_sigmas[seg];
        let rng = streams[seg].get_or_insert_with(|| {
            let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
            r.set_stream(seg as u64);
            r
        });
        let z: f64 = StandardNormal.sample(rng);
        let noise = if sigma > 0.0 { sigma * z } else { 0.0 };
        y.push((spec.mean.at(xi) + noise).clamp(0.0, 1.0));
    }
    let change_indices = spec
        .boundaries
        .iter()
        .map(|&b| x.iter().filter(|&&xi| xi <= b).count())
        .collect();
    let series = DistanceSeries::new(x, y)?;
    Ok((
        series,
        GroundTruth {
            boundaries: spec.boundaries.clone(),
            change_indices,
            sigmas: spec.segment_sigmas.clone(),
        },
    ))
}

/// Writes a series as a precomputed-schema detection log (`iou = y`,
/// `confidence = 1`).
pub fn series_to_precomputed_csv(series: &DistanceSeries) -> String {
    let mut out = String::from("frame_id,distance_m,iou,confidence\n");
    for (i, (x, y)) in series.points().enumerate() {
        let _ = writeln!(out, "s{:06},{x:?},{y:?},1", i + 1);
    }
    out
}

/// `erfc` from the Maclaurin series of `erf` for `|x| < 2` and a Lentz
/// continued fraction beyond.
pub fn reference_erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - reference_erfc(-x);
    }
    if x < 2.0 {
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut k = 0.0;
        loop {
            k += 1.0;
            term *= -x2 / k;
            let add = term / (2.0 * k + 1.0);
            sum += add;
            if add.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        return 1.0 - sum * 2.0 / std::f64::consts::PI.sqrt();
    }
    if x > 27.0 {
        return 0.0;
    }
    // erfc(x) = exp(−x²)/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + …))))
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = x + a / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / std::f64::consts::PI.sqrt() / f
}

/// `P(Z > z)` through [`reference_erfc`].
pub fn reference_normal_sf(z: f64) -> f64 {
    0.5 * reference_erfc(z / 2f64.sqrt())
}

/// Literal PCD definition: visit every observed point and keep the largest
/// qualifying distance.
pub fn brute_force_pcd(model: &SegmentModel, y_t: f64, p_t: f64) -> Option<f64> {
    let series = model.series();
    let mut best: Option<f64> = None;
    for (i, (x, _)) in series.points().enumerate() {
        let position = i + 1;
        let segment = model.boundaries().iter().filter(|&&b| b < position).count();
        let sigma = model.sigmas()[segment];
        let mu = model.curve().evaluate(x).ok()?;
        let p = if sigma > 0.0 {
            reference_normal_sf((y_t - mu) / sigma)
        } else if mu > y_t {
            1.0
        } else {
            0.0
        };
        if p > p_t {
            best = Some(best.map_or(x, |b: f64| b.max(x)));
        }
    }
    best
}

/// Naive `O(n²)` scan returning `(T_n, τ̂)`; every candidate split recomputes
/// both side variances from scratch.
pub fn brute_force_sic_scan(residuals: &[f64], min_segment: usize) -> (f64, usize) {
    let n = residuals.len();
    let log_var = |s: &[f64]| {
        let mut ss = 0.0;
        for r in s {
            ss += r * r;
        }
        if ss > 0.0 {
            (ss / s.len() as f64).ln()
        } else {
            ZERO_VARIANCE_FLOOR.ln()
        }
    };
    let l0 = n as f64 * log_var(residuals);
    let mut best = (f64::INFINITY, 0);
    for tau in min_segment..=n.saturating_sub(min_segment) {
        let l =
            tau as f64 * log_var(&residuals[..tau]) + (n - tau) as f64 * log_var(&residuals[tau..]);
        if l - l0 < best.0 {
            best = (l - l0, tau);
        }
    }
    ((n as f64).ln() - best.0, best.1)
}

/// Two-pass sample standard deviation.
pub fn brute_force_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().fold(0.0, |a, v| a + v) / n;
    (values.iter().fold(0.0, |a, v| a + (v - mean).powi(2)) / (n - 1.0)).sqrt()
}

/// Single-segment model with `μ(x) = 1 − x/200` at `x = 0, 1, …, 200`.
///
/// The curve is an exact piecewise-linear spline with a knot at 100, so
/// `μ(100) = 0.5` exactly and the PCD at `y_t = p_t = 0.5` is 99 m.
pub fn linear_reference_model(sigma: f64) -> Result<SegmentModel> {
    let x: Vec<f64> = (0..=200).map(f64::from).collect();
    let y: Vec<f64> = x.iter().map(|v| 1.0 - v / 200.0).collect();
    let series = DistanceSeries::new(x, y)?;
    let config = SplineConfig {
        num_basis: 3,
        degree: 1,
        lambda: 0.0,
        knot_placement: KnotPlacement::Uniform,
        boundary_knots: BoundaryKnots::Extended,
    };
    let curve = FittedCurve::from_parts(
        config,
        vec![-100.0, 0.0, 100.0, 200.0, 300.0],
        vec![1.0, 0.5, 0.0],
        (0.0, 200.0),
    )?;
    SegmentModel::from_parts(series, curve, vec![], vec![sigma])
}
