//! Detection logs, IoU and the IoU × confidence quality score, and the
//! distance-sorted series every statistical stage consumes.

use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values this far outside `[0, 1]` are treated as float noise and clamped.
pub const UNIT_INTERVAL_TOLERANCE: f64 = 1e-9;

/// Axis-aligned box in pixel coordinates, normalized so `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    /// Builds a box from two opposite corners in any order.
    ///
    /// Swapped corners are normalized; a box with zero width or height is
    /// rejected. A missing detection is `None` at the call site, never a
    /// degenerate box.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        let (lx, hx) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
        let (ly, hy) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
        if hx - lx <= 0.0 || hy - ly <= 0.0 {
            return Err(invalid("non-positive width or height"));
        }
        Ok(Self {
            x1: lx,
            y1: ly,
            x2: hx,
            y2: hy,
        })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Intersection over union of two valid boxes, in `[0, 1]`.
pub fn compute_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Checks that `value` lies in `[0, 1]`, clamping float noise up to
/// [`UNIT_INTERVAL_TOLERANCE`].
pub fn unit_interval(what: &'static str, value: f64) -> Result<f64> {
    if !(-UNIT_INTERVAL_TOLERANCE..=1.0 + UNIT_INTERVAL_TOLERANCE).contains(&value) {
        return Err(Error::OutOfUnitInterval { what, value });
    }
    Ok(value.clamp(0.0, 1.0))
}

/// Quality score `y = IoU × confidence`.
pub fn compute_quality_score(iou: f64, confidence: f64) -> Result<f64> {
    let iou = unit_interval("iou", iou)?;
    let confidence = unit_interval("confidence", confidence)?;
    Ok(iou * confidence)
}

/// One frame of a detection log.
///
/// Records parsed from the precomputed schema carry no boxes; `iou` is then
/// the logged value. A missing prediction has `iou = 0` and `quality_score = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub frame_id: String,
    pub distance_m: f64,
    pub gt_box: Option<BoundingBox>,
    pub pred_box: Option<BoundingBox>,
    pub iou: f64,
    pub confidence: f64,
    pub quality_score: f64,
    /// Whether the detector produced a prediction for this frame.
    pub detected: bool,
}

/// CSV layout of a detection log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schema {
    RawBoxes,
    Precomputed,
}

pub const RAW_BOXES_HEADER: [&str; 11] = [
    "frame_id",
    "distance_m",
    "gt_x1",
    "gt_y1",
    "gt_x2",
    "gt_y2",
    "pred_x1",
    "pred_y1",
    "pred_x2",
    "pred_y2",
    "confidence",
];

pub const PRECOMPUTED_HEADER: [&str; 4] = ["frame_id", "distance_m", "iou", "confidence"];

impl Schema {
    pub fn header(self) -> &'static [&'static str] {
        match self {
            Schema::RawBoxes => &RAW_BOXES_HEADER,
            Schema::Precomputed => &PRECOMPUTED_HEADER,
        }
    }

    /// Identifies the schema whose header matches `fields` exactly.
    pub fn from_header<S: AsRef<str>>(fields: &[S]) -> Option<Self> {
        [Schema::RawBoxes, Schema::Precomputed]
            .into_iter()
            .find(|schema| header_matches(schema.header(), fields))
    }
}

fn header_matches<S: AsRef<str>>(expected: &[&str], fields: &[S]) -> bool {
    expected.len() == fields.len()
        && expected
            .iter()
            .zip(fields)
            .all(|(want, got)| *want == got.as_ref())
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::RawBoxes => "raw-boxes",
            Schema::Precomputed => "precomputed",
        })
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw-boxes" => Ok(Schema::RawBoxes),
            "precomputed" => Ok(Schema::Precomputed),
            other => Err(Error::UnknownSchema(other.to_owned())),
        }
    }
}

/// Parses a detection log. With `schema = None` the schema is inferred from
/// the header line.
pub fn parse_detection_log<R: Read>(
    source: R,
    schema: Option<Schema>,
) -> Result<(Schema, Vec<DetectionRecord>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut rows = reader.records();

    let header = match rows.next() {
        None => {
            return Err(Error::Schema {
                line: 1,
                message: "missing header line".into(),
            })
        }
        Some(row) => row.map_err(|e| csv_error(e, 1))?,
    };
    let header: Vec<&str> = header
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if i == 0 {
                f.trim_start_matches('\u{feff}')
            } else {
                f
            }
        })
        .collect();
    let schema = match schema {
        Some(s) if header_matches(s.header(), &header) => s,
        Some(s) => {
            return Err(Error::Schema {
                line: 1,
                message: format!(
                    "header does not match schema {s}: expected `{}`",
                    s.header().join(",")
                ),
            })
        }
        None => Schema::from_header(&header).ok_or_else(|| Error::Schema {
            line: 1,
            message: format!("header `{}` matches no known schema", header.join(",")),
        })?,
    };

    let mut records = Vec::new();
    for row in rows {
        let row = row.map_err(|e| csv_error(e, 0))?;
        let line = row.position().map_or(0, |p| p.line());
        let fields: Vec<&str> = row.iter().collect();
        if fields.len() != schema.header().len() {
            return Err(Error::Schema {
                line,
                message: format!(
                    "expected {} fields, found {}",
                    schema.header().len(),
                    fields.len()
                ),
            });
        }
        let row = Row {
            line,
            fields: &fields,
            names: schema.header(),
        };
        records.push(match schema {
            Schema::RawBoxes => row.raw_boxes()?,
            Schema::Precomputed => row.precomputed()?,
        });
    }
    Ok((schema, records))
}

fn csv_error(err: csv::Error, fallback_line: u64) -> Error {
    let line = err.position().map_or(fallback_line, |p| p.line());
    Error::Schema {
        line,
        message: err.to_string(),
    }
}

struct Row<'a> {
    line: u64,
    fields: &'a [&'a str],
    names: &'static [&'static str],
}

impl Row<'_> {
    fn err(&self, col: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            field: self.names[col].to_owned(),
            message: message.into(),
        }
    }

    fn is_empty(&self, col: usize) -> bool {
        self.fields[col].is_empty()
    }

    fn number(&self, col: usize) -> Result<f64> {
        let raw = self.fields[col];
        if raw.is_empty() {
            return Err(self.err(col, "missing value"));
        }
        let v: f64 = raw
            .parse()
            .map_err(|_| self.err(col, format!("`{raw}` is not a number")))?;
        if !v.is_finite() {
            return Err(self.err(col, format!("`{raw}` is not finite")));
        }
        Ok(v)
    }

    fn unit(&self, col: usize) -> Result<f64> {
        let v = self.number(col)?;
        unit_interval(self.names[col], v).map_err(|e| self.err(col, e.to_string()))
    }

    fn distance(&self) -> Result<f64> {
        let d = self.number(1)?;
        if d < 0.0 {
            return Err(self.err(1, format!("distance {d} is negative")));
        }
        Ok(d)
    }

    fn frame_id(&self) -> String {
        self.fields[0].to_owned()
    }

    fn bbox(&self, first: usize) -> Result<BoundingBox> {
        let c: Vec<f64> = (first..first + 4)
            .map(|i| self.number(i))
            .collect::<Result<_>>()?;
        BoundingBox::new(c[0], c[1], c[2], c[3]).map_err(|e| self.err(first, e.to_string()))
    }

    fn raw_boxes(&self) -> Result<DetectionRecord> {
        let distance_m = self.distance()?;
        let gt = self.bbox(2)?;
        let empty = (6..10).filter(|&i| self.is_empty(i)).count();
        let pred = match empty {
            4 => None,
            0 => Some(self.bbox(6)?),
            _ => {
                let col = (6..10).find(|&i| self.is_empty(i)).unwrap_or(6);
                return Err(self.err(col, "prediction box is partially specified"));
            }
        };
        let (iou, confidence) = match &pred {
            Some(p) => (compute_iou(p, &gt), self.unit(10)?),
            None if self.is_empty(10) => (0.0, 0.0),
            None => (0.0, self.unit(10)?),
        };
        Ok(DetectionRecord {
            frame_id: self.frame_id(),
            distance_m,
            gt_box: Some(gt),
            pred_box: pred,
            iou,
            confidence,
            quality_score: if pred.is_some() {
                iou * confidence
            } else {
                0.0
            },
            detected: pred.is_some(),
        })
    }

    fn precomputed(&self) -> Result<DetectionRecord> {
        let distance_m = self.distance()?;
        let detected = !self.is_empty(2);
        let iou = if detected { self.unit(2)? } else { 0.0 };
        let confidence = if detected || !self.is_empty(3) {
            self.unit(3)?
        } else {
            0.0
        };
        Ok(DetectionRecord {
            frame_id: self.frame_id(),
            distance_m,
            gt_box: None,
            pred_box: None,
            iou,
            confidence,
            quality_score: if detected { iou * confidence } else { 0.0 },
            detected,
        })
    }
}

/// Distance-sorted `(x, y)` observations with strictly increasing `x` and
/// `y` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSeries {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl DistanceSeries {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvalidSeries(format!(
                "{} distances but {} scores",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::Empty("series needs at least one point"));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("series"));
        }
        if let Some(w) = x.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSeries(format!(
                "distances not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        if let Some(&v) = y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfUnitInterval {
                what: "quality score",
                value: v,
            });
        }
        Ok(Self { x, y })
    }

    pub fn from_points(points: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            points.iter().map(|p| p.0).collect(),
            points.iter().map(|p| p.1).collect(),
        )
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x_min(&self) -> f64 {
        self.x[0]
    }

    pub fn x_max(&self) -> f64 {
        self.x[self.x.len() - 1]
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.x.iter().copied().zip(self.y.iter().copied())
    }
}

/// Sorts records by distance and averages the scores of records sharing a
/// distance, so the series holds one observation per distinct distance.
pub fn build_series(records: &[DetectionRecord]) -> Result<DistanceSeries> {
    if records.is_empty() {
        return Err(Error::Empty("no detection records"));
    }
    let mut pairs: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.distance_m, r.quality_score))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut x = Vec::with_capacity(pairs.len());
    let mut y = Vec::with_capacity(pairs.len());
    for group in pairs.chunk_by(|a, b| a.0 == b.0) {
        let sum: f64 = group.iter().map(|p| p.1).sum();
        x.push(group[0].0);
        y.push((sum / group.len() as f64).clamp(0.0, 1.0));
    }
    DistanceSeries::new(x, y)
}
