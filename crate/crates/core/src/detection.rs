//! Ingestion of externally produced object detections and the dynamic-class
//! policy.
//!
//! The detection file is JSON lines, one record per frame:
//!
//! ```text
//! {"timestamp": 1305031102.175304, "detections": [{"label": "person", "confidence": 0.72, "bbox": [x, y, w, h]}]}
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in full-resolution pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Integer pixel rectangle `[x0, x1) x [y0, y1)`, guaranteed non-empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    /// Clamps to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clamp(&self, width: usize, height: usize) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        if x1 > x0 && y1 > y0 {
            Some(BBox::new(x0, y0, x1 - x0, y1 - y0))
        } else {
            None
        }
    }

    /// Pixels whose index range overlaps the box (outward rounding).
    pub fn to_pixel_rect(&self, width: usize, height: usize) -> Option<PixelRect> {
        let b = self.clamp(width, height)?;
        let x0 = b.x.floor() as usize;
        let y0 = b.y.floor() as usize;
        let x1 = ((b.x + b.w).ceil() as usize).min(width);
        let y1 = ((b.y + b.h).ceil() as usize).min(height);
        (x1 > x0 && y1 > y0).then_some(PixelRect { x0, y0, x1, y1 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionSet {
    pub timestamp: f64,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn empty(timestamp: f64) -> Self {
        DetectionSet {
            timestamp,
            detections: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

#[derive(Deserialize)]
struct RawDetection {
    label: String,
    confidence: f64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct RawRecord {
    timestamp: f64,
    detections: Vec<RawDetection>,
}

/// Parses a JSON-lines detection stream.
///
/// Boxes are clamped to `width x height`; detections with nothing left after
/// clamping are dropped. Unknown fields are ignored.
pub fn parse_detections<R: BufRead>(
    reader: R,
    width: usize,
    height: usize,
    source_name: &str,
) -> Result<Vec<DetectionSet>> {
    let mut sets = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
        if !raw.timestamp.is_finite() {
            return Err(Error::parse(source_name, lineno, "non-finite timestamp"));
        }
        let mut detections = Vec::with_capacity(raw.detections.len());
        for d in raw.detections {
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(Error::parse(
                    source_name,
                    lineno,
                    format!("confidence {} outside [0, 1]", d.confidence),
                ));
            }
            let [x, y, w, h] = d.bbox;
            if !(x.is_finite() && y.is_finite() && w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())
            {
                return Err(Error::parse(
                    source_name,
                    lineno,
                    format!("invalid bbox {:?}", d.bbox),
                ));
            }
            if let Some(bbox) = BBox::new(x, y, w, h).clamp(width, height) {
                detections.push(Detection {
                    label: d.label,
                    confidence: d.confidence,
                    bbox,
                });
            }
        }
        sets.push(DetectionSet {
            timestamp: raw.timestamp,
            detections,
        });
    }
    Ok(sets)
}

pub fn read_detections(path: &Path, width: usize, height: usize) -> Result<Vec<DetectionSet>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_detections(
        std::io::BufReader::new(file),
        width,
        height,
        &path.display().to_string(),
    )
}

/// Serializes one record per line in the format [`parse_detections`] reads.
pub fn write_detections(sets: &[DetectionSet]) -> String {
    let mut out = String::new();
    for s in sets {
        let dets: Vec<_> = s
            .detections
            .iter()
            .map(|d| {
                serde_json::json!({
                    "label": d.label,
                    "confidence": d.confidence,
                    "bbox": [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
                })
            })
            .collect();
        let rec = serde_json::json!({ "timestamp": s.timestamp, "detections": dets });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}

/// Which labels count as moving, and the minimum confidence to act on.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicPolicy {
    pub dynamic_classes: BTreeSet<String>,
    pub min_confidence: f64,
}

impl Default for DynamicPolicy {
    fn default() -> Self {
        DynamicPolicy {
            dynamic_classes: BTreeSet::from(["person".to_string()]),
            min_confidence: 0.0,
        }
    }
}

impl DynamicPolicy {
    pub fn new<I, S>(classes: I, min_confidence: f64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let dynamic_classes: BTreeSet<String> = classes.into_iter().map(Into::into).collect();
        if dynamic_classes.is_empty() {
            return Err(Error::Config("dynamic_classes must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&min_confidence) {
            return Err(Error::Config(format!(
                "min_confidence {min_confidence} outside [0, 1]"
            )));
        }
        Ok(DynamicPolicy {
            dynamic_classes,
            min_confidence,
        })
    }

    pub fn is_dynamic(&self, d: &Detection) -> bool {
        self.dynamic_classes.contains(&d.label) && d.confidence >= self.min_confidence
    }
}

/// Boxes of the detections the policy marks as dynamic, in input order.
pub fn select_dynamic(ds: &DetectionSet, policy: &DynamicPolicy) -> Vec<BBox> {
    ds.detections
        .iter()
        .filter(|d| policy.is_dynamic(d))
        .map(|d| d.bbox)
        .collect()
}

/// Detection set whose timestamp is nearest to `timestamp` within `max_dt`.
pub fn find_for_timestamp(sets: &[DetectionSet], timestamp: f64, max_dt: f64) -> Option<&DetectionSet> {
    sets.iter()
        .filter(|s| (s.timestamp - timestamp).abs() <= max_dt)
        .min_by(|a, b| {
            (a.timestamp - timestamp)
                .abs()
                .total_cmp(&(b.timestamp - timestamp).abs())
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Object and confidence rows of the can-opener frame.
    const CAN_OPENER_FRAME: &str = concat!(
        r#"{"timestamp": 1.0, "detections": ["#,
        r#"{"label": "Cup", "confidence": 0.77, "bbox": [10, 10, 20, 20]},"#,
        r#"{"label": "Bottom", "confidence": 0.66, "bbox": [40, 10, 20, 20]},"#,
        r#"{"label": "Bowl", "confidence": 0.47, "bbox": [70, 10, 20, 20]},"#,
        r#"{"label": "Bottle", "confidence": 0.76, "bbox": [100, 10, 20, 20]},"#,
        r#"{"label": "person", "confidence": 0.37, "bbox": [10, 50, 40, 60]},"#,
        r#"{"label": "person", "confidence": 0.72, "bbox": [80, 50, 40, 60]}"#,
        "]}\n"
    );

    fn parse(text: &str) -> Result<Vec<DetectionSet>> {
        parse_detections(text.as_bytes(), 160, 120, "dets.jsonl")
    }

    #[test]
    fn parses_table_frame() {
        let sets = parse(CAN_OPENER_FRAME).unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].len(), 6);
        assert_eq!(sets[0].detections[1].label, "Bottom");
    }

    #[test]
    fn selects_both_people_without_threshold() {
        let sets = parse(CAN_OPENER_FRAME).unwrap();
        let boxes = select_dynamic(&sets[0], &DynamicPolicy::default());
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0], BBox::new(10.0, 50.0, 40.0, 60.0));
        assert_eq!(boxes[1], BBox::new(80.0, 50.0, 40.0, 60.0));

        let strict = DynamicPolicy::new(["person"], 0.5).unwrap();
        let boxes = select_dynamic(&sets[0], &strict);
        assert_eq!(boxes, vec![BBox::new(80.0, 50.0, 40.0, 60.0)]);
    }

    #[test]
    fn labels_are_case_sensitive() {
        let sets = parse(CAN_OPENER_FRAME).unwrap();
        let policy = DynamicPolicy::new(["Person"], 0.0).unwrap();
        assert!(select_dynamic(&sets[0], &policy).is_empty());
    }

    #[test]
    fn empty_and_out_of_image() {
        let sets = parse("{\"timestamp\": 2.0, \"detections\": []}\n").unwrap();
        assert!(sets[0].is_empty());
        assert!(select_dynamic(&sets[0], &DynamicPolicy::default()).is_empty());

        let sets = parse(
            "{\"timestamp\": 2.0, \"detections\": [{\"label\": \"person\", \"confidence\": 0.9, \"bbox\": [500, 500, 10, 10]}]}",
        )
        .unwrap();
        assert!(sets[0].is_empty());
    }

    #[test]
    fn clamping_and_unknown_fields() {
        let sets = parse(
            "{\"timestamp\": 2.0, \"frame\": 7, \"detections\": [{\"label\": \"person\", \"confidence\": 0.9, \"bbox\": [-5, 100, 20, 50], \"track\": 3}]}",
        )
        .unwrap();
        assert_eq!(sets[0].detections[0].bbox, BBox::new(0.0, 100.0, 15.0, 20.0));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"timestamp\": 1.0, \"detections\": []}\n{\"timestamp\": oops}\n";
        let err = parse(text).unwrap_err();
        assert!(err.to_string().starts_with("dets.jsonl:2:"), "{err}");
        let bad_conf = "{\"timestamp\": 1.0, \"detections\": [{\"label\": \"a\", \"confidence\": 1.5, \"bbox\": [0,0,1,1]}]}";
        assert!(parse(bad_conf).is_err());
    }

    #[test]
    fn write_then_parse() {
        let sets = parse(CAN_OPENER_FRAME).unwrap();
        let again = parse(&write_detections(&sets)).unwrap();
        assert_eq!(sets, again);
    }

    #[test]
    fn pixel_rect_rounds_outward() {
        let r = BBox::new(1.5, 2.0, 2.0, 1.2).to_pixel_rect(10, 10).unwrap();
        assert_eq!(r, PixelRect { x0: 1, y0: 2, x1: 4, y1: 4 });
        assert!(BBox::new(20.0, 0.0, 5.0, 5.0).to_pixel_rect(10, 10).is_none());
    }

    #[test]
    fn empty_policy_rejected() {
        assert!(DynamicPolicy::new(Vec::<String>::new(), 0.0).is_err());
    }
}
