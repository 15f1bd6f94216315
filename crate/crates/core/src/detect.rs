//! Turning head outputs into ranked, de-duplicated detections.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bbox::{iou, BBox, Detection};
use crate::error::{Error, Result};
use crate::head::{decode_box, sigmoid, HeadOutput};

/// A detection plus the cell that produced it, for deterministic ordering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub det: Detection,
    pub level: u8,
    pub row: usize,
    pub col: usize,
}

impl Candidate {
    fn rank(&self, other: &Self) -> Ordering {
        other
            .det
            .score
            .total_cmp(&self.det.score)
            .then(self.level.cmp(&other.level))
            .then(self.row.cmp(&other.row))
            .then(self.col.cmp(&other.col))
            .then(self.det.bbox.class_id.cmp(&other.det.bbox.class_id))
    }
}

/// Every `(cell, class)` of image `b` whose score exceeds `score_thresh`.
pub fn candidates(pred: &HeadOutput, b: usize, score_thresh: f64) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for (&level, o) in pred {
        let (batch, nc, gh, gw) = o.cls_logits.dims4()?;
        if b >= batch {
            return Err(Error::InvalidArgument(format!(
                "image {b} out of range for batch {batch}"
            )));
        }
        let plane = gh * gw;
        let cls = o.cls_logits.data();
        let reg = o.box_reg.data();
        for row in 0..gh {
            for col in 0..gw {
                let p = row * gw + col;
                let t = [0, 1, 2, 3].map(|k| reg[(b * 4 + k) * plane + p]);
                for c in 0..nc {
                    let score = sigmoid(cls[(b * nc + c) * plane + p]);
                    if score > score_thresh {
                        out.push(Candidate {
                            det: Detection {
                                bbox: decode_box(t, row, col, gh, gw, c),
                                score,
                            },
                            level,
                            row,
                            col,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Class-wise greedy suppression. The result is sorted by descending score
/// with ties broken by `(level, row, col, class)`.
pub fn nms(mut cands: Vec<Candidate>, iou_thresh: f64) -> Vec<Candidate> {
    cands.sort_by(|a, b| a.rank(b));
    let mut kept: Vec<Candidate> = Vec::new();
    for c in cands {
        let suppressed = kept.iter().any(|k| {
            k.det.bbox.class_id == c.det.bbox.class_id && iou(&k.det.bbox, &c.det.bbox) >= iou_thresh
        });
        if !suppressed {
            kept.push(c);
        }
    }
    kept
}

/// Detections for every image in the batch.
pub fn decode(pred: &HeadOutput, score_thresh: f64, iou_thresh: f64) -> Result<Vec<Vec<Detection>>> {
    if !(0.0..=1.0).contains(&score_thresh) || !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::InvalidArgument(format!(
            "thresholds must lie in [0,1], got score {score_thresh} iou {iou_thresh}"
        )));
    }
    let batch = match pred.values().next() {
        Some(o) => o.cls_logits.dims4()?.0,
        None => return Ok(vec![]),
    };
    (0..batch)
        .map(|b| {
            let kept = nms(candidates(pred, b, score_thresh)?, iou_thresh);
            Ok(kept.into_iter().map(|c| c.det).collect())
        })
        .collect()
}

/// One line per detection: `image_id class_id score cx cy w h`.
pub fn format_detections(dets: &[(String, Detection)]) -> String {
    let mut s = String::new();
    for (id, d) in dets {
        let b = &d.bbox;
        let _ = writeln!(s, "{id} {} {} {} {} {} {}", b.class_id, d.score, b.cx, b.cy, b.w, b.h);
    }
    s
}

pub fn parse_detections(text: &str, path: &str) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad(format!(
                "expected `image_id class_id score cx cy w h`, got {} fields",
                f.len()
            )));
        }
        let class_id: usize = f[1]
            .parse()
            .map_err(|_| bad(format!("bad class id `{}`", f[1])))?;
        let mut v = [0.0f64; 5];
        for (k, s) in f[2..].iter().enumerate() {
            v[k] = s.parse().map_err(|_| bad(format!("bad number `{s}`")))?;
            if !v[k].is_finite() {
                return Err(bad(format!("non-finite value `{s}`")));
            }
        }
        out.push((
            f[0].to_string(),
            Detection {
                bbox: BBox::new(class_id, v[1], v[2], v[3], v[4]),
                score: v[0],
            },
        ));
    }
    Ok(out)
}

pub fn write_detections(path: &Path, dets: &[(String, Detection)]) -> Result<()> {
    fs::write(path, format_detections(dets)).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<(String, Detection)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, &path.display().to_string())
}
