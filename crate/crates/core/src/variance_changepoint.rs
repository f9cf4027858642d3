//! Variance change points in the residuals of the fitted mean curve.
//!
//! A single change is tested with the Schwarz-information-criterion
//! statistic `T_n = log n − min_τ { l(τ) − l₀ }`, where
//! `l(τ) = τ·log σ̂₁²(τ) + (n−τ)·log σ̂₂²(τ)` and `l₀ = n·log σ̂²`, against the
//! Gumbel-type asymptotic critical value. All change points are found by
//! binary segmentation.

use serde::{Deserialize, Serialize};

use crate::data_model::DistanceSeries;
use crate::error::{Error, Result};
use crate::spline_fit::FittedCurve;

/// Smallest window on which the asymptotic constants are used; they involve
/// `log log log n`, which is only real for `n > e^e`.
pub const MIN_TEST_WINDOW: usize = 20;

/// Variance used in place of an exactly zero sum of squares.
pub const ZERO_VARIANCE_FLOOR: f64 = 1e-12;

/// Source of the per-segment standard deviation in the segment model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// Standard deviation of the segment's raw scores.
    #[default]
    SegmentRaw,
    /// Standard deviation of the segment's residuals from the fitted curve.
    SegmentResidual,
}

/// How observations are centred before the split likelihood is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Centering {
    /// `r_i = y_i − f(x_i)`.
    #[default]
    PerPoint,
    /// Every observation centred on the curve value at the candidate split,
    /// `y_i − f(x_τ)`; the no-change likelihood is centred on `f(x_n)`.
    Literal,
}

/// Form of the rejection rule applied to `T_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionRule {
    /// `a_n·log n·√(T_n − log n) − b_n·log n > c_α`: the Gumbel limit of the
    /// likelihood-ratio statistic `λ_n = T_n − log n`.
    #[default]
    LikelihoodRatio,
    /// `a_n·(log n)^{1/2}·T_n − b_n·log n > c_α`, applied to `T_n` as is.
    /// Rejects far above the nominal level on homoscedastic data.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangePointTest {
    pub alpha: f64,
    pub min_segment: usize,
    pub sigma_mode: SigmaMode,
    pub centering: Centering,
    pub rule: RejectionRule,
}

impl Default for ChangePointTest {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            min_segment: 5,
            sigma_mode: SigmaMode::SegmentRaw,
            centering: Centering::PerPoint,
            rule: RejectionRule::LikelihoodRatio,
        }
    }
}

impl ChangePointTest {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "significance level must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.min_segment < 2 {
            return Err(Error::InvalidConfig(format!(
                "minimum segment length must be at least 2, got {}",
                self.min_segment
            )));
        }
        Ok(())
    }

    /// Shortest window the test is run on.
    pub fn min_window(&self) -> usize {
        (2 * self.min_segment).max(MIN_TEST_WINDOW)
    }
}

fn side_term(count: usize, sum_sq: f64) -> f64 {
    let var = if sum_sq > 0.0 {
        sum_sq / count as f64
    } else {
        ZERO_VARIANCE_FLOOR
    };
    count as f64 * var.ln()
}

/// `l(τ)` for a split after the first `tau` residuals (`1 ≤ tau ≤ n−1`).
pub fn split_log_likelihood(residuals: &[f64], tau: usize) -> Result<f64> {
    let n = residuals.len();
    if tau == 0 || tau >= n {
        return Err(Error::InvalidConfig(format!(
            "split point {tau} outside 1..={}",
            n.saturating_sub(1)
        )));
    }
    let (left, right) = residuals.split_at(tau);
    let ss = |s: &[f64]| s.iter().map(|r| r * r).sum::<f64>();
    Ok(side_term(tau, ss(left)) + side_term(n - tau, ss(right)))
}

/// `l₀ = n·log(Σ r_i² / n)`.
pub fn null_log_likelihood(residuals: &[f64]) -> f64 {
    side_term(residuals.len(), residuals.iter().map(|r| r * r).sum())
}

/// `T_n` and the minimizing split (1-based count of points left of the change).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SicStatistic {
    pub t_n: f64,
    pub tau_hat: usize,
}

fn check_scan_length(n: usize, min_segment: usize) -> Result<()> {
    if min_segment == 0 {
        return Err(Error::InvalidConfig(
            "minimum segment length must be positive".into(),
        ));
    }
    if n < 2 * min_segment {
        return Err(Error::InsufficientData {
            what: "change-point scan",
            needed: 2 * min_segment,
            got: n,
        });
    }
    Ok(())
}

/// Scans `τ ∈ [min_segment, n − min_segment]` for the minimum of `l(τ) − l₀`.
pub fn sic_statistic(residuals: &[f64], min_segment: usize) -> Result<SicStatistic> {
    let n = residuals.len();
    check_scan_length(n, min_segment)?;

    // separate forward and backward accumulations keep each side a sum of
    // non-negative terms, so an all-zero side is exactly zero
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + residuals[i] * residuals[i];
    }
    let l0 = side_term(n, suffix[0]);

    let mut prefix = 0.0;
    let mut best = SicStatistic {
        t_n: f64::NEG_INFINITY,
        tau_hat: 0,
    };
    let mut best_diff = f64::INFINITY;
    for (i, r) in residuals.iter().enumerate().take(n - min_segment) {
        prefix += r * r;
        let tau = i + 1;
        if tau < min_segment {
            continue;
        }
        let diff = side_term(tau, prefix) + side_term(n - tau, suffix[tau]) - l0;
        if diff < best_diff {
            best_diff = diff;
            best.tau_hat = tau;
        }
    }
    best.t_n = (n as f64).ln() - best_diff;
    Ok(best)
}

/// Same scan with every observation centred on the curve value at the
/// candidate split.
pub fn sic_statistic_literal(
    y: &[f64],
    fitted: &[f64],
    min_segment: usize,
) -> Result<SicStatistic> {
    let n = y.len();
    if fitted.len() != n {
        return Err(Error::InvalidSeries(
            "scores and fitted values differ in length".into(),
        ));
    }
    check_scan_length(n, min_segment)?;
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for i in 0..n {
        s1[i + 1] = s1[i] + y[i];
        s2[i + 1] = s2[i] + y[i] * y[i];
    }
    let centred = |from: usize, to: usize, c: f64| {
        let k = (to - from) as f64;
        let ss = (s2[to] - s2[from]) - 2.0 * c * (s1[to] - s1[from]) + k * c * c;
        side_term(to - from, ss.max(0.0))
    };
    let l0 = centred(0, n, fitted[n - 1]);
    let mut best = SicStatistic {
        t_n: f64::NEG_INFINITY,
        tau_hat: 0,
    };
    let mut best_diff = f64::INFINITY;
    for tau in min_segment..=n - min_segment {
        let c = fitted[tau - 1];
        let diff = centred(0, tau, c) + centred(tau, n, c) - l0;
        if diff < best_diff {
            best_diff = diff;
            best.tau_hat = tau;
        }
    }
    best.t_n = (n as f64).ln() - best_diff;
    Ok(best)
}

/// Constants of the asymptotic rejection rule for a window of `n` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalValues {
    pub n: usize,
    pub a_n: f64,
    pub b_n: f64,
    pub c_alpha: f64,
}

/// `a_n = √(2 log log n) / log n`,
/// `b_n = (2 log log n + ½ log log log n − log Γ(½)) / log n`,
/// `c_α = −log(−log(1−α) / 2)`.
pub fn critical_threshold(n: usize, alpha: f64) -> Result<CriticalValues> {
    if n < MIN_TEST_WINDOW {
        return Err(Error::InsufficientData {
            what: "critical values (raise the minimum segment length or window)",
            needed: MIN_TEST_WINDOW,
            got: n,
        });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "significance level must lie in (0, 1), got {alpha}"
        )));
    }
    let log_n = (n as f64).ln();
    let loglog = log_n.ln();
    let log_gamma_half = 0.5 * std::f64::consts::PI.ln();
    Ok(CriticalValues {
        n,
        a_n: (2.0 * loglog).sqrt() / log_n,
        b_n: (2.0 * loglog + 0.5 * loglog.ln() - log_gamma_half) / log_n,
        c_alpha: -(-(-alpha).ln_1p() / 2.0).ln(),
    })
}

impl CriticalValues {
    /// Left-hand side of the rejection inequality for `T_n` under `rule`.
    pub fn statistic(&self, t_n: f64, rule: RejectionRule) -> f64 {
        let log_n = (self.n as f64).ln();
        match rule {
            RejectionRule::LikelihoodRatio => {
                let lr = (t_n - log_n).max(0.0);
                self.a_n * log_n * lr.sqrt() - self.b_n * log_n
            }
            RejectionRule::Literal => self.a_n * log_n.sqrt() * t_n - self.b_n * log_n,
        }
    }

    pub fn rejects(&self, t_n: f64, rule: RejectionRule) -> bool {
        self.statistic(t_n, rule) > self.c_alpha
    }
}

/// One accepted change point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// 1-based index `τ`; the change lies between `τ` and `τ + 1`.
    pub index: usize,
    /// `x_τ` in meters.
    pub distance: f64,
    pub t_n: f64,
    /// Left-hand side of the rejection inequality.
    pub statistic: f64,
    /// `c_α`.
    pub threshold: f64,
    /// 1-based inclusive window the test was run on.
    pub window_start: usize,
    pub window_end: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChangePointResult {
    pub detections: Vec<Detection>,
}

impl ChangePointResult {
    pub fn indices(&self) -> Vec<usize> {
        self.detections.iter().map(|d| d.index).collect()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.detections.iter().map(|d| d.distance).collect()
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// `y_i − f(x_i)` for every point of the series.
pub fn residuals(series: &DistanceSeries, curve: &FittedCurve) -> Result<Vec<f64>> {
    series
        .points()
        .map(|(x, y)| curve.evaluate(x).map(|f| y - f))
        .collect()
}

struct Scan<'a> {
    x: &'a [f64],
    y: &'a [f64],
    fitted: Vec<f64>,
    residuals: Vec<f64>,
    test: ChangePointTest,
}

impl<'a> Scan<'a> {
    fn new(
        series: &'a DistanceSeries,
        curve: &FittedCurve,
        test: &ChangePointTest,
    ) -> Result<Self> {
        test.validate()?;
        let fitted = curve.evaluate_many(series.x())?;
        let residuals = series.y().iter().zip(&fitted).map(|(y, f)| y - f).collect();
        Ok(Self {
            x: series.x(),
            y: series.y(),
            fitted,
            residuals,
            test: *test,
        })
    }

    /// Tests the 1-based inclusive window `[lo, hi]`.
    fn test_window(&self, lo: usize, hi: usize) -> Result<Option<Detection>> {
        if lo == 0 || hi > self.x.len() || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "window [{lo}, {hi}] outside 1..={}",
                self.x.len()
            )));
        }
        let len = hi - lo + 1;
        if len < self.test.min_window() {
            log::debug!(
                "window [{lo}, {hi}] has {len} points, below the minimum of {}; not tested",
                self.test.min_window()
            );
            return Ok(None);
        }
        let range = lo - 1..hi;
        let sic = match self.test.centering {
            Centering::PerPoint => sic_statistic(&self.residuals[range], self.test.min_segment)?,
            Centering::Literal => sic_statistic_literal(
                &self.y[range.clone()],
                &self.fitted[range],
                self.test.min_segment,
            )?,
        };
        let crit = critical_threshold(len, self.test.alpha)?;
        let statistic = crit.statistic(sic.t_n, self.test.rule);
        if !statistic.is_finite() || statistic <= crit.c_alpha {
            return Ok(None);
        }
        let index = lo - 1 + sic.tau_hat;
        Ok(Some(Detection {
            index,
            distance: self.x[index - 1],
            t_n: sic.t_n,
            statistic,
            threshold: crit.c_alpha,
            window_start: lo,
            window_end: hi,
        }))
    }

    fn segment(&self, lo: usize, hi: usize) -> Result<Vec<Detection>> {
        let Some(found) = self.test_window(lo, hi)? else {
            return Ok(Vec::new());
        };
        let tau = found.index;
        let (left, right) = rayon::join(|| self.segment(lo, tau), || self.segment(tau + 1, hi));
        let mut all = left?;
        all.push(found);
        all.extend(right?);
        Ok(all)
    }
}

/// Tests a single change in the 1-based inclusive window `[lo, hi]`.
///
/// Windows shorter than `max(2·min_segment, 20)` are not tested and yield
/// `None`.
pub fn detect_single(
    series: &DistanceSeries,
    curve: &FittedCurve,
    test: &ChangePointTest,
    lo: usize,
    hi: usize,
) -> Result<Option<Detection>> {
    Scan::new(series, curve, test)?.test_window(lo, hi)
}

/// Binary segmentation over the whole series.
pub fn detect_all(
    series: &DistanceSeries,
    curve: &FittedCurve,
    test: &ChangePointTest,
) -> Result<ChangePointResult> {
    let scan = Scan::new(series, curve, test)?;
    let mut detections = scan.segment(1, series.len())?;
    detections.sort_by_key(|d| d.index);
    Ok(ChangePointResult { detections })
}
