//! End-to-end evaluation and the machine-readable outputs behind the `pcd`
//! command-line tool.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::{build_series, parse_detection_log, DistanceSeries, Schema};
use crate::error::{Error, Result};
use crate::pcd_metric::{
    build_segment_model, compute_pcd_in, compute_pcd_surface_in, dense_grid, mean_quality_score,
    tail_probability, PcdDomain, PcdSurface, SegmentModel, ThresholdGrid,
};
use crate::spline_fit::{fit_penalized, FittedCurve, SplineConfig};
use crate::variance_changepoint::{detect_all, ChangePointTest, Detection};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything that determines an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub input: String,
    /// `None` infers the schema from the header line.
    pub schema: Option<Schema>,
    pub spline: SplineConfig,
    pub change_point: ChangePointTest,
    pub y_t: f64,
    pub p_t: f64,
    pub grid: ThresholdGrid,
    pub pcd_domain: PcdDomain,
}

impl EvaluateConfig {
    pub fn new(input: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            schema: None,
            spline: SplineConfig::default(),
            change_point: ChangePointTest::default(),
            y_t: 0.5,
            p_t: 0.5,
            grid: ThresholdGrid::default(),
            pcd_domain: PcdDomain::Observed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub schema: Schema,
    pub records: usize,
    pub detected_records: usize,
    /// Distinct distances after merging duplicates.
    pub n: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub mean_quality_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub knot_vector: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub domain: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    /// 1-based inclusive point range.
    pub start: usize,
    pub end: usize,
    pub x_start: f64,
    pub x_end: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcdAtThreshold {
    pub y_t: f64,
    pub p_t: f64,
    /// `None` when no distance qualifies.
    pub pcd_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tool_version: String,
    pub config: EvaluateConfig,
    pub input: InputSummary,
    pub fit: FitSummary,
    pub change_points: Vec<Detection>,
    pub segments: Vec<SegmentSummary>,
    pub pcd: PcdAtThreshold,
    pub surface: PcdSurface,
    /// Mean PCD over the grid in meters; cells with no qualifying distance count as 0.
    pub mpcd: f64,
    pub warnings: Vec<String>,
}

/// Intermediate artifacts of a run, kept for traces.
pub struct Evaluation {
    pub report: EvaluationReport,
    pub model: SegmentModel,
}

/// Reads `config.input` and runs the full pipeline.
pub fn run_evaluate(config: &EvaluateConfig) -> Result<Evaluation> {
    let file = File::open(Path::new(&config.input))?;
    run_evaluate_from(BufReader::new(file), config)
}

/// parse → series → spline fit → change points → segment model → PCD,
/// surface and mPCD.
pub fn run_evaluate_from<R: Read>(source: R, config: &EvaluateConfig) -> Result<Evaluation> {
    config.spline.validate()?;
    config.change_point.validate()?;
    // re-validates thresholds and grid after deserialization
    let grid = ThresholdGrid::new(
        config.grid.y_values().to_vec(),
        config.grid.p_values().to_vec(),
    )?;

    let (schema, records) = parse_detection_log(source, config.schema)?;
    if records.is_empty() {
        return Err(Error::Schema {
            line: 2,
            message: "log has a header but no records".into(),
        });
    }
    let series = build_series(&records)?;
    let mut warnings = Vec::new();

    let curve = fit_penalized(&series, &config.spline)?;
    let min_window = config.change_point.min_window();
    if series.len() < min_window {
        warnings.push(format!(
            "series has {} points; the change-point test needs at least {min_window}, \
             so the data is treated as a single segment",
            series.len()
        ));
    }
    let changes = detect_all(&series, &curve, &config.change_point)?;
    let model = build_segment_model(
        &series,
        &curve,
        &changes.indices(),
        config.change_point.sigma_mode,
    )?;

    let pcd_m = compute_pcd_in(&model, config.y_t, config.p_t, config.pcd_domain)?;
    let surface = compute_pcd_surface_in(&model, &grid, config.pcd_domain)?;
    let absent = surface
        .values
        .iter()
        .flatten()
        .filter(|c| c.is_none())
        .count();
    if absent > 0 {
        warnings.push(format!(
            "{absent} of {} threshold cells have no qualifying distance; they count as 0 m in mPCD",
            grid.cells()
        ));
    }
    let single_point = model.segments().iter().filter(|(a, b)| a == b).count();
    if single_point > 0 {
        warnings.push(format!(
            "{single_point} segment(s) hold a single point; their sigma is 0"
        ));
    }

    let report = EvaluationReport {
        tool_version: TOOL_VERSION.to_owned(),
        config: EvaluateConfig {
            schema: Some(schema),
            ..config.clone()
        },
        input: InputSummary {
            schema,
            records: records.len(),
            detected_records: records.iter().filter(|r| r.detected).count(),
            n: series.len(),
            x_min: series.x_min(),
            x_max: series.x_max(),
            mean_quality_score: mean_quality_score(&series),
        },
        fit: FitSummary {
            knot_vector: curve.knot_vector().to_vec(),
            coefficients: curve.coefficients().to_vec(),
            domain: curve.domain(),
        },
        change_points: changes.detections,
        segments: segment_summaries(&model),
        pcd: PcdAtThreshold {
            y_t: config.y_t,
            p_t: config.p_t,
            pcd_m,
        },
        mpcd: surface.mpcd,
        surface,
        warnings,
    };
    Ok(Evaluation { report, model })
}

fn segment_summaries(model: &SegmentModel) -> Vec<SegmentSummary> {
    let x = model.series().x();
    model
        .segments()
        .into_iter()
        .zip(model.sigmas())
        .map(|((start, end), &sigma)| SegmentSummary {
            start,
            end,
            x_start: x[start - 1],
            x_end: x[end - 1],
            sigma,
        })
        .collect()
}

impl EvaluationReport {
    /// Rebuilds the fitted curve stored in the report.
    pub fn curve(&self) -> Result<FittedCurve> {
        FittedCurve::from_parts(
            self.config.spline,
            self.fit.knot_vector.clone(),
            self.fit.coefficients.clone(),
            self.fit.domain,
        )
    }

    /// Rebuilds the segment model for `series`, which must be the series the
    /// report was computed from.
    pub fn segment_model(&self, series: &DistanceSeries) -> Result<SegmentModel> {
        if series.len() != self.input.n
            || series.x_min() != self.input.x_min
            || series.x_max() != self.input.x_max
        {
            return Err(Error::InvalidConfig(format!(
                "input series ({} points over [{}, {}]) does not match the cached fit \
                 ({} points over [{}, {}])",
                series.len(),
                series.x_min(),
                series.x_max(),
                self.input.n,
                self.input.x_min,
                self.input.x_max
            )));
        }
        let boundaries = self.change_points.iter().map(|d| d.index).collect();
        let sigmas = self.segments.iter().map(|s| s.sigma).collect();
        SegmentModel::from_parts(series.clone(), self.curve()?, boundaries, sigmas)
    }
}

/// PCD surface from a cached report and its input series.
pub fn surface_from_cache(
    report: &EvaluationReport,
    series: &DistanceSeries,
    grid: &ThresholdGrid,
    domain: PcdDomain,
) -> Result<PcdSurface> {
    compute_pcd_surface_in(&report.segment_model(series)?, grid, domain)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Json,
    CsvSummary,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn surface_rows(out: &mut String, surface: &PcdSurface) {
    out.push_str("y_t,p_t,pcd_m\n");
    for (r, &y_t) in surface.grid.y_values().iter().enumerate() {
        for (c, &p_t) in surface.grid.p_values().iter().enumerate() {
            let _ = writeln!(out, "{y_t},{p_t},{}", fmt_opt(surface.values[r][c]));
        }
    }
}

/// Serializes a report. The CSV summary is a block of `# key,value` scalar
/// lines, a column header, and one row per threshold cell (empty PCD for
/// absent cells).
pub fn emit_report(report: &EvaluationReport, format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        OutputFormat::CsvSummary => {
            let cps: Vec<String> = report
                .change_points
                .iter()
                .map(|d| d.distance.to_string())
                .collect();
            let sigmas: Vec<String> = report
                .segments
                .iter()
                .map(|s| s.sigma.to_string())
                .collect();
            let scalars: [(&str, String); 13] = [
                ("tool_version", report.tool_version.clone()),
                ("input", report.config.input.clone()),
                ("schema", report.input.schema.to_string()),
                ("n", report.input.n.to_string()),
                ("x_min", report.input.x_min.to_string()),
                ("x_max", report.input.x_max.to_string()),
                (
                    "mean_quality_score",
                    report.input.mean_quality_score.to_string(),
                ),
                ("change_points", cps.join(";")),
                ("segment_sigmas", sigmas.join(";")),
                ("y_t", report.pcd.y_t.to_string()),
                ("p_t", report.pcd.p_t.to_string()),
                ("pcd_m", fmt_opt(report.pcd.pcd_m)),
                ("mpcd", report.mpcd.to_string()),
            ];
            let mut out = String::new();
            for (k, v) in scalars {
                let _ = writeln!(out, "# {k},{v}");
            }
            surface_rows(&mut out, &report.surface);
            Ok(out)
        }
    }
}

pub fn emit_surface(surface: &PcdSurface, format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(surface)?;
            s.push('\n');
            Ok(s)
        }
        OutputFormat::CsvSummary => {
            let mut out = format!("# mpcd,{}\n", surface.mpcd);
            surface_rows(&mut out, surface);
            Ok(out)
        }
    }
}

/// Plot trace: `kind,x,f_x,sigma_x,p_exceed` with `kind = curve` rows on an
/// even grid of `resolution` points and one `change_point` row per detected
/// change (at `x_τ`).
pub fn emit_curve_trace(model: &SegmentModel, y_t: f64, resolution: usize) -> Result<String> {
    let curve = model.curve();
    let xs = dense_grid(curve.domain(), resolution)?;
    let mut out = String::from("kind,x,f_x,sigma_x,p_exceed\n");
    let mut row = |kind: &str, x: f64| -> Result<()> {
        let f = curve.evaluate(x)?;
        let sigma = model.sigma_at(x);
        let p = tail_probability(f, sigma, y_t);
        let _ = writeln!(out, "{kind},{x},{f},{sigma},{p}");
        Ok(())
    };
    for &x in &xs {
        row("curve", x)?;
    }
    let x = model.series().x();
    for &b in model.boundaries() {
        row("change_point", x[b - 1])?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::RAW_BOXES_HEADER;
    use crate::synth_oracle::{
        brute_force_pcd, generate, series_to_precomputed_csv, MeanKind, SynthSpec,
    };

    fn linear_log(sigma: f64) -> String {
        let spec = SynthSpec {
            mean: MeanKind::Linear {
                a: 1.0,
                b: -1.0 / 200.0,
            },
            boundaries: vec![],
            segment_sigmas: vec![sigma],
            n: 201,
            x_range: (0.0, 200.0),
            seed: 42,
        };
        series_to_precomputed_csv(&generate(&spec).unwrap().0)
    }

    fn eval(text: &str) -> Evaluation {
        run_evaluate_from(text.as_bytes(), &EvaluateConfig::new("mem")).unwrap()
    }

    #[test]
    fn linear_synthetic_end_to_end() {
        let ev = eval(&linear_log(0.05));
        let r = &ev.report;
        assert!(r.change_points.is_empty());
        assert_eq!(r.segments.len(), 1);
        assert_eq!(r.pcd.pcd_m, brute_force_pcd(&ev.model, 0.5, 0.5));
        // P > 0.5 ⇔ f(x) > 0.5, so the PCD sits where the fitted line crosses 0.5
        let pcd = r.pcd.pcd_m.unwrap();
        assert!((90.0..=110.0).contains(&pcd), "{pcd}");
        assert_eq!(r.surface.values.len(), 9);
        assert_eq!(r.mpcd, r.surface.mpcd);
        assert_eq!(r.config.schema, Some(Schema::Precomputed));
    }

    #[test]
    fn noiseless_linear_end_to_end() {
        let ev = eval(&linear_log(0.0));
        let pcd = ev.report.pcd.pcd_m.unwrap();
        assert!(pcd == 99.0 || pcd == 100.0, "{pcd}");
        assert_eq!(ev.report.pcd.pcd_m, brute_force_pcd(&ev.model, 0.5, 0.5));
    }

    #[test]
    fn perfect_detector() {
        let mut text = RAW_BOXES_HEADER.join(",");
        text.push('\n');
        for i in 0..40 {
            let _ = writeln!(text, "f{i},{},10,10,50,60,10,10,50,60,1.0", 5 + 3 * i);
        }
        let r = eval(&text).report;
        assert_eq!(r.input.mean_quality_score, 1.0);
        assert_eq!(r.input.detected_records, 40);
        for row in &r.surface.values {
            for cell in row {
                assert_eq!(*cell, Some(r.input.x_max));
            }
        }
        assert_eq!(r.mpcd, r.input.x_max);
    }

    #[test]
    fn empty_input_is_a_line_one_error() {
        let err = run_evaluate_from("".as_bytes(), &EvaluateConfig::new("mem"))
            .err()
            .unwrap();
        assert!(matches!(err, Error::Schema { line: 1, .. }));
        let err = run_evaluate_from(
            "frame_id,distance_m,iou,confidence\n".as_bytes(),
            &EvaluateConfig::new("mem"),
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Schema { .. }));
    }

    #[test]
    fn short_series_warns_instead_of_failing() {
        let text = "frame_id,distance_m,iou,confidence\n\
                    a,1,0.9,0.9\nb,2,0.8,0.9\nc,3,0.7,0.9\nd,4,0.5,0.9\ne,5,0.2,0.9\n";
        let r = eval(text).report;
        assert!(r.change_points.is_empty());
        assert!(r.warnings.iter().any(|w| w.contains("single segment")));
    }

    #[test]
    fn json_round_trip_and_keys() {
        let r = eval(&linear_log(0.05)).report;
        let text = emit_report(&r, OutputFormat::Json).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value["mpcd"].is_number());
        for key in [
            "tool_version",
            "config",
            "input",
            "fit",
            "change_points",
            "segments",
            "pcd",
            "surface",
            "warnings",
        ] {
            assert!(value.get(key).is_some(), "{key}");
        }
        let back: EvaluationReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_summary_row_count() {
        let r = eval(&linear_log(0.05)).report;
        let text = emit_report(&r, OutputFormat::CsvSummary).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let header_lines = lines.iter().filter(|l| l.starts_with('#')).count() + 1;
        assert_eq!(lines.len(), 81 + header_lines);
        assert!(lines.iter().any(|l| l.starts_with("# mpcd,")));
    }

    #[test]
    fn trace_matches_curve() {
        let ev = eval(&linear_log(0.05));
        let text = emit_curve_trace(&ev.model, 0.5, 50).unwrap();
        let mut curve_rows = 0;
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let x: f64 = cols[1].parse().unwrap();
            let f: f64 = cols[2].parse().unwrap();
            assert!((ev.model.curve().evaluate(x).unwrap() - f).abs() < 1e-12);
            curve_rows += usize::from(cols[0] == "curve");
        }
        assert_eq!(curve_rows, 50);
        assert!(emit_curve_trace(&ev.model, 0.5, 1).is_err());
    }

    #[test]
    fn trace_markers_and_constant_fit() {
        let text = "frame_id,distance_m,iou,confidence\n".to_owned()
            + &(0..30)
                .map(|i| format!("f{i},{i},0.6,1\n"))
                .collect::<String>();
        let ev = eval(&text);
        let trace = emit_curve_trace(&ev.model, 0.5, 10).unwrap();
        for line in trace.lines().skip(1) {
            let f: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            assert!((f - 0.6).abs() < 1e-9);
        }

        let spec = SynthSpec {
            mean: MeanKind::Constant { c: 0.5 },
            boundaries: vec![SynthSpec::boundary_after_index(300, (0.0, 300.0), 150)],
            segment_sigmas: vec![0.02, 0.2],
            n: 300,
            x_range: (0.0, 300.0),
            seed: 1,
        };
        let ev = eval(&series_to_precomputed_csv(&generate(&spec).unwrap().0));
        let trace = emit_curve_trace(&ev.model, 0.5, 20).unwrap();
        let markers = trace
            .lines()
            .filter(|l| l.starts_with("change_point,"))
            .count();
        assert_eq!(markers, ev.report.change_points.len());
        assert!(markers >= 1);
    }

    #[test]
    fn cached_surface_matches_eval() {
        let text = linear_log(0.05);
        let ev = eval(&text);
        let (_, recs) = parse_detection_log(text.as_bytes(), None).unwrap();
        let series = build_series(&recs).unwrap();
        let s = surface_from_cache(
            &ev.report,
            &series,
            &ThresholdGrid::default(),
            PcdDomain::Observed,
        )
        .unwrap();
        assert_eq!(s, ev.report.surface);
        let other = DistanceSeries::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert!(surface_from_cache(
            &ev.report,
            &other,
            &ThresholdGrid::default(),
            PcdDomain::Observed
        )
        .is_err());
    }
}
