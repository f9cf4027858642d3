//! Penalized B-spline (P-spline) estimate of the mean score as a function of
//! distance.
//!
//! The fit minimizes `Σ (y_i − Σ_j β_j B_j(x_i))² + λ Σ (Δ²β_j)²` over the
//! coefficients of a degree-`p` B-spline basis with `K` functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::DistanceSeries;
use crate::error::{Error, Result};

/// Diagonal ridge added when the normal equations fail to factorize.
pub const SINGULAR_RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KnotPlacement {
    /// Equally spaced interior knots over `[x_min, x_max]`.
    #[default]
    Uniform,
    /// Interior knots at empirical quantiles of the training distances.
    Quantile,
}

/// How the knot vector continues past the ends of the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKnots {
    /// Knots keep their spacing beyond the domain (the usual P-spline
    /// construction). With uniform placement the Greville abscissae are
    /// equispaced, so affine trends carry no second-difference penalty.
    #[default]
    Extended,
    /// Boundary knots repeated `degree + 1` times; the basis interpolates
    /// the first and last coefficients at the domain ends.
    Clamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub num_basis: usize,
    pub degree: usize,
    pub lambda: f64,
    pub knot_placement: KnotPlacement,
    pub boundary_knots: BoundaryKnots,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            num_basis: 10,
            degree: 3,
            lambda: 0.6,
            knot_placement: KnotPlacement::Uniform,
            boundary_knots: BoundaryKnots::Extended,
        }
    }
}

impl SplineConfig {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_basis < 4 {
            return Err(Error::InvalidConfig(format!(
                "number of basis functions must be at least 4, got {}",
                self.num_basis
            )));
        }
        if self.num_basis <= self.degree {
            return Err(Error::InvalidConfig(format!(
                "number of basis functions ({}) must exceed the degree ({})",
                self.num_basis, self.degree
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "penalty weight must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// A B-spline basis on a fixed knot vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    knots: Vec<f64>,
    degree: usize,
}

impl BSplineBasis {
    /// Builds the knot vector for training distances `x` (sorted ascending).
    pub fn for_data(x: &[f64], config: &SplineConfig) -> Result<Self> {
        config.validate()?;
        if x.is_empty() {
            return Err(Error::Empty("no distances to build a basis on"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("basis distances"));
        }
        let (lo, hi) = (x[0], x[x.len() - 1]);
        if hi <= lo {
            return Err(Error::InsufficientData {
                what: "basis domain (distinct distances)",
                needed: 2,
                got: 1,
            });
        }
        let p = config.degree;
        let k = config.num_basis;
        let segments = k - p;
        let h = (hi - lo) / segments as f64;

        let interior: Vec<f64> = match config.knot_placement {
            KnotPlacement::Uniform => (1..segments).map(|i| lo + i as f64 * h).collect(),
            KnotPlacement::Quantile => {
                let mut sorted = x.to_vec();
                sorted.sort_by(f64::total_cmp);
                (1..segments)
                    .map(|i| quantile(&sorted, i as f64 / segments as f64).clamp(lo, hi))
                    .collect()
            }
        };

        let mut knots = Vec::with_capacity(k + p + 1);
        match config.boundary_knots {
            BoundaryKnots::Extended => {
                knots.extend((1..=p).rev().map(|j| lo - j as f64 * h));
                knots.push(lo);
                knots.extend(&interior);
                knots.push(hi);
                knots.extend((1..=p).map(|j| hi + j as f64 * h));
            }
            BoundaryKnots::Clamped => {
                knots.extend(std::iter::repeat_n(lo, p + 1));
                knots.extend(&interior);
                knots.extend(std::iter::repeat_n(hi, p + 1));
            }
        }
        Self::from_knots(knots, p)
    }

    pub fn from_knots(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if knots.len() < 2 * degree + 2 {
            return Err(Error::InvalidConfig(format!(
                "knot vector of length {} too short for degree {degree}",
                knots.len()
            )));
        }
        if knots.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("knot vector"));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidConfig(
                "knot vector must be non-decreasing".into(),
            ));
        }
        let basis = Self { knots, degree };
        let (lo, hi) = basis.domain();
        if hi <= lo {
            return Err(Error::InvalidConfig(
                "knot vector has an empty domain".into(),
            ));
        }
        Ok(basis)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// `[t_p, t_K]`, the interval on which the basis sums to one.
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.num_basis()])
    }

    /// Knot span `s` with `t_s <= x < t_{s+1}`; the right end belongs to the
    /// last non-empty span.
    fn span(&self, x: f64) -> Result<usize> {
        let (lo, hi) = self.domain();
        if !x.is_finite() {
            return Err(Error::NonFinite("evaluation point"));
        }
        if x < lo || x > hi {
            return Err(Error::OutsideDomain { x, lo, hi });
        }
        let p = self.degree;
        let last = self.num_basis() - 1;
        if x >= hi {
            let mut s = last;
            while s > p && self.knots[s] >= self.knots[s + 1] {
                s -= 1;
            }
            return Ok(s);
        }
        // upper bound among t_p..=t_K, then step back onto the span start
        let idx = self.knots[p..=last + 1].partition_point(|&t| t <= x) + p;
        Ok(idx - 1)
    }

    /// Non-zero basis values at `x`, returned with the index of the first one.
    pub fn nonzero(&self, x: f64) -> Result<(usize, Vec<f64>)> {
        let s = self.span(x)?;
        let p = self.degree;
        let t = &self.knots;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        Ok((s - p, n))
    }

    /// Full row `(B_1(x), …, B_K(x))`.
    pub fn row(&self, x: f64) -> Result<Vec<f64>> {
        let mut row = vec![0.0; self.num_basis()];
        let (first, vals) = self.nonzero(x)?;
        row[first..first + vals.len()].copy_from_slice(&vals);
        Ok(row)
    }

    pub fn design_matrix(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(x.len(), self.num_basis());
        for (i, &xi) in x.iter().enumerate() {
            let (first, vals) = self.nonzero(xi)?;
            for (j, v) in vals.into_iter().enumerate() {
                m[(i, first + j)] = v;
            }
        }
        Ok(m)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Design matrix `B` with `B[i][j] = B_j(x_i)` for the knot vector derived
/// from `x` and `config`.
pub fn build_basis(x: &[f64], config: &SplineConfig) -> Result<DMatrix<f64>> {
    BSplineBasis::for_data(x, config)?.design_matrix(x)
}

/// Second-order difference operator `D₂`, shape `(K − 2) × K`.
pub fn second_difference_matrix(k: usize) -> DMatrix<f64> {
    let rows = k.saturating_sub(2);
    let mut d = DMatrix::zeros(rows, k);
    for r in 0..rows {
        d[(r, r)] = 1.0;
        d[(r, r + 1)] = -2.0;
        d[(r, r + 2)] = 1.0;
    }
    d
}

/// `Σ_j (β_j − 2β_{j−1} + β_{j−2})²`.
pub fn roughness(coefficients: &[f64]) -> f64 {
    coefficients
        .windows(3)
        .map(|w| {
            let d = w[2] - 2.0 * w[1] + w[0];
            d * d
        })
        .sum()
}

/// Smooth mean curve `f(x) = Σ_j β_j B_j(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCurve {
    config: SplineConfig,
    basis: BSplineBasis,
    coefficients: Vec<f64>,
    domain: (f64, f64),
}

impl FittedCurve {
    /// Reassembles a curve from stored parts, e.g. a cached report.
    pub fn from_parts(
        config: SplineConfig,
        knot_vector: Vec<f64>,
        coefficients: Vec<f64>,
        domain: (f64, f64),
    ) -> Result<Self> {
        let basis = BSplineBasis::from_knots(knot_vector, config.degree)?;
        if coefficients.len() != basis.num_basis() {
            return Err(Error::InvalidConfig(format!(
                "{} coefficients for {} basis functions",
                coefficients.len(),
                basis.num_basis()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("spline coefficients"));
        }
        let (lo, hi) = basis.domain();
        if !(domain.0 >= lo && domain.1 <= hi && domain.0 <= domain.1) {
            return Err(Error::InvalidConfig(format!(
                "domain [{}, {}] not inside knot span [{lo}, {hi}]",
                domain.0, domain.1
            )));
        }
        Ok(Self {
            config,
            basis,
            coefficients,
            domain,
        })
    }

    pub fn config(&self) -> &SplineConfig {
        &self.config
    }

    pub fn basis(&self) -> &BSplineBasis {
        &self.basis
    }

    pub fn knot_vector(&self) -> &[f64] {
        self.basis.knots()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// `[x_min, x_max]` of the training series.
    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    /// `f(x)`; points outside the training domain take the nearest endpoint value.
    pub fn evaluate(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFinite("evaluation point"));
        }
        let x = x.clamp(self.domain.0, self.domain.1);
        let (first, vals) = self.basis.nonzero(x)?;
        Ok(vals
            .iter()
            .zip(&self.coefficients[first..])
            .map(|(b, c)| b * c)
            .sum())
    }

    pub fn evaluate_many(&self, x: &[f64]) -> Result<Vec<f64>> {
        x.iter().map(|&v| self.evaluate(v)).collect()
    }

    /// Value of the penalized objective at arbitrary coefficients.
    pub fn objective(&self, series: &DistanceSeries, coefficients: &[f64]) -> Result<f64> {
        let mut rss = 0.0;
        for (x, y) in series.points() {
            let (first, vals) = self.basis.nonzero(x)?;
            let f: f64 = vals
                .iter()
                .zip(&coefficients[first..])
                .map(|(b, c)| b * c)
                .sum();
            rss += (y - f) * (y - f);
        }
        Ok(rss + self.config.lambda * roughness(coefficients))
    }
}

/// Normal-equation system `(BᵀB + λD₂ᵀD₂) β = Bᵀy` for a series.
pub struct NormalEquations {
    pub basis: BSplineBasis,
    pub design: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    pub lhs: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl NormalEquations {
    pub fn assemble(series: &DistanceSeries, config: &SplineConfig) -> Result<Self> {
        config.validate()?;
        let basis = BSplineBasis::for_data(series.x(), config)?;
        let design = basis.design_matrix(series.x())?;
        let y = DVector::from_column_slice(series.y());
        let d = second_difference_matrix(basis.num_basis());
        let gram = design.transpose() * &design;
        let lhs = &gram + (d.transpose() * &d) * config.lambda;
        let rhs = design.transpose() * y;
        Ok(Self {
            basis,
            design,
            gram,
            lhs,
            rhs,
        })
    }

    pub fn solve(&self) -> Result<DVector<f64>> {
        solve_symmetric(&self.lhs, &self.rhs)
    }
}

/// Solves a symmetric positive semi-definite system. Falls back to a small
/// diagonal ridge and then to the SVD minimum-norm solution when the
/// Cholesky factorization breaks down.
fn solve_symmetric(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
    if let Some(ch) = a.clone().cholesky() {
        let sol = ch.solve(b);
        if finite(&sol) {
            return Ok(sol);
        }
    }
    let n = a.nrows();
    let ridged = a + DMatrix::identity(n, n) * SINGULAR_RIDGE;
    if let Some(ch) = ridged.cholesky() {
        let sol = ch.solve(b);
        if finite(&sol) {
            log::debug!("normal equations singular; solved with diagonal ridge");
            return Ok(sol);
        }
    }
    let svd = a.clone().svd(true, true);
    let eps = f64::EPSILON * n as f64 * svd.singular_values.max();
    let sol = svd
        .solve(b, eps)
        .map_err(|e| Error::Numerical(format!("minimum-norm solve failed: {e}")))?;
    if finite(&sol) {
        Ok(sol)
    } else {
        Err(Error::Numerical(
            "normal equations have no finite solution".into(),
        ))
    }
}

/// Fits the penalized spline to a series (needs at least 4 points).
pub fn fit_penalized(series: &DistanceSeries, config: &SplineConfig) -> Result<FittedCurve> {
    config.validate()?;
    if series.len() < 4 {
        return Err(Error::InsufficientData {
            what: "spline fit",
            needed: 4,
            got: series.len(),
        });
    }
    if series.y().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let eq = NormalEquations::assemble(series, config)?;
    let beta = eq.solve()?;
    Ok(FittedCurve {
        config: *config,
        basis: eq.basis,
        coefficients: beta.iter().copied().collect(),
        domain: (series.x_min(), series.x_max()),
    })
}

/// Information criterion used to pick the penalty weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
}

/// Effective degrees of freedom `tr(B (BᵀB + λD₂ᵀD₂)⁻¹ Bᵀ)` and the residual
/// sum of squares of the fit.
pub fn fit_diagnostics(series: &DistanceSeries, config: &SplineConfig) -> Result<(f64, f64)> {
    let eq = NormalEquations::assemble(series, config)?;
    let beta = eq.solve()?;
    let k = eq.basis.num_basis();
    // tr(B A⁻¹ Bᵀ) = tr(A⁻¹ BᵀB), one column of A⁻¹ BᵀB at a time
    let mut edf = 0.0;
    for j in 0..k {
        let col = solve_symmetric(&eq.lhs, &eq.gram.column(j).into_owned())?;
        edf += col[j];
    }
    let fitted = &eq.design * beta;
    let rss: f64 = series
        .y()
        .iter()
        .zip(fitted.iter())
        .map(|(y, f)| (y - f) * (y - f))
        .sum();
    Ok((edf, rss))
}

/// Criterion value `n·ln(RSS/n) + c·edf` with `c = 2` (AIC) or `ln n` (BIC).
pub fn criterion_value(
    series: &DistanceSeries,
    config: &SplineConfig,
    criterion: Criterion,
) -> Result<f64> {
    let (edf, rss) = fit_diagnostics(series, config)?;
    let n = series.len() as f64;
    let weight = match criterion {
        Criterion::Aic => 2.0,
        Criterion::Bic => n.ln(),
    };
    Ok(n * (rss / n).max(f64::MIN_POSITIVE).ln() + weight * edf)
}

/// Picks the candidate penalty minimizing the criterion; ties go to the
/// larger (smoother) candidate.
pub fn select_lambda(
    series: &DistanceSeries,
    base: &SplineConfig,
    candidates: &[f64],
    criterion: Criterion,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Empty("no penalty candidates"));
    }
    let mut best: Option<(f64, f64)> = None;
    for &lambda in candidates {
        let score = criterion_value(series, &base.with_lambda(lambda), criterion)?;
        best = match best {
            Some((bl, bs)) if score > bs || (score == bs && lambda <= bl) => Some((bl, bs)),
            _ => Some((lambda, score)),
        };
    }
    Ok(best.map(|b| b.0).expect("candidates is non-empty"))
}
