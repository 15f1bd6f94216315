//! Detection metrics: greedy IoU matching, all-point interpolated AP, and
//! mAP over a sweep of IoU thresholds.
//!
//! Classes with no ground-truth boxes are left out of every mean; the
//! report lists them under `excluded`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bbox::{iou, BBox, Detection, CLASS_NAMES};
use crate::error::{Error, Result};

/// `0.50, 0.55, …, upper`.
pub fn iou_thresholds(upper: f64) -> Vec<f64> {
    let steps = ((upper - 0.5) / 0.05).round() as usize;
    (0..=steps).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: iou_thresholds(0.95),
        }
    }
}

impl EvalConfig {
    /// The sweep ending at 0.90 instead of 0.95.
    pub fn upper_090() -> Self {
        Self {
            thresholds: iou_thresholds(0.90),
        }
    }
}

/// Greedy matching of one class. `ranked` holds `(image, box)` pairs in
/// descending score order; returns the true-positive flag of each.
pub fn match_ranked(ranked: &[(usize, BBox)], gts: &[Vec<BBox>], iou_thresh: f64) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|(img, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[*img].iter().enumerate() {
                if taken[*img][j] {
                    continue;
                }
                let v = iou(d, g);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[*img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Raw `(recall, precision)` after each ranked detection.
pub fn pr_points(tp: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut hits = 0usize;
    tp.iter()
        .enumerate()
        .map(|(i, &t)| {
            hits += t as usize;
            (hits as f64 / num_gt as f64, hits as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Area under the precision envelope. Zero when there are no ground-truth boxes.
pub fn ap_from_flags(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let pts = pr_points(tp, num_gt);
    let mut envelope = 0.0f64;
    let mut ap = 0.0;
    for i in (0..pts.len()).rev() {
        let (r, p) = pts[i];
        envelope = envelope.max(p);
        let prev_r = if i == 0 { 0.0 } else { pts[i - 1].0 };
        if r > prev_r {
            ap += (r - prev_r) * envelope;
        }
    }
    ap
}

/// Single-image, single-class AP. `dets` must be sorted by score, highest first.
pub fn average_precision(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> f64 {
    let ranked: Vec<(usize, BBox)> = dets.iter().map(|d| (0, d.bbox)).collect();
    let tp = match_ranked(&ranked, &[gts.to_vec()], iou_thresh);
    ap_from_flags(&tp, gts.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub num_classes: usize,
    /// AP per evaluated class, one value per threshold.
    pub per_class_ap: BTreeMap<usize, Vec<f64>>,
    /// Classes with no ground truth, left out of the means.
    pub excluded: Vec<usize>,
    pub map50: f64,
    pub map5095: f64,
    /// Raw `(recall, precision)` points per class at the first threshold.
    pub pr_curves: BTreeMap<usize, Vec<(f64, f64)>>,
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

impl EvalReport {
    pub fn class_ap50(&self, class: usize) -> Option<f64> {
        self.per_class_ap.get(&class).map(|v| v[0])
    }

    pub fn to_table(&self) -> String {
        let last = self.thresholds.last().copied().unwrap_or(0.5);
        let span = format!("AP@50:{:02}", (last * 100.0).round() as usize);
        let mut s = format!("{:<12} {:>8} {:>10}\n", "class", "AP@50", span);
        for (c, aps) in &self.per_class_ap {
            let mean = aps.iter().sum::<f64>() / aps.len() as f64;
            let _ = writeln!(s, "{:<12} {:>8.4} {:>10.4}", class_name(*c), aps[0], mean);
        }
        for c in &self.excluded {
            let _ = writeln!(s, "{:<12} {:>8} {:>10}", class_name(*c), "-", "-");
        }
        let _ = writeln!(s, "{:<12} {:>8.4} {:>10.4}", "mAP", self.map50, self.map5095);
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("class,recall,precision\n");
        for (c, pts) in &self.pr_curves {
            for (r, p) in pts {
                let _ = writeln!(s, "{},{r},{p}", class_name(*c));
            }
        }
        s
    }

    pub fn pr_svg(&self) -> String {
        const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
        let (w, h, m) = (420.0, 320.0, 40.0);
        let (pw, ph) = (w - 2.0 * m, h - 2.0 * m);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
             <rect x=\"{m}\" y=\"{m}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">recall</text>\n\
             <text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">precision</text>\n",
            w / 2.0,
            h - 8.0,
            h / 2.0,
            h / 2.0
        );
        for (k, (c, pts)) in self.pr_curves.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let coords: Vec<String> = pts
                .iter()
                .map(|(r, p)| format!("{:.2},{:.2}", m + r * pw, m + (1.0 - p) * ph))
                .collect();
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>",
                coords.join(" ")
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"11\">{}</text>",
                w - m - 70.0,
                m + 14.0 + 13.0 * k as f64,
                class_name(*c)
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.txt", self.to_table()),
            ("pr.csv", self.pr_csv()),
            ("pr.svg", self.pr_svg()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Scores every class present in `gts` at each threshold. Index `i` of
/// `dets` and `gts` refers to the same image.
pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    num_classes: usize,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "detections cover {} images, ground truth {}",
            dets.len(),
            gts.len()
        )));
    }
    if config.thresholds.is_empty() {
        return Err(Error::Config("no IoU thresholds".into()));
    }
    let check = |c: usize| {
        if c >= num_classes {
            Err(Error::UnknownClass {
                class_id: c,
                num_classes,
            })
        } else {
            Ok(())
        }
    };
    for b in gts.iter().flatten() {
        check(b.class_id)?;
    }
    for d in dets.iter().flatten() {
        check(d.bbox.class_id)?;
    }

    let mut report = EvalReport {
        thresholds: config.thresholds.clone(),
        num_classes,
        per_class_ap: BTreeMap::new(),
        excluded: vec![],
        map50: 0.0,
        map5095: 0.0,
        pr_curves: BTreeMap::new(),
    };
    for c in 0..num_classes {
        let class_gts: Vec<Vec<BBox>> = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.class_id == c).copied().collect())
            .collect();
        let num_gt: usize = class_gts.iter().map(Vec::len).sum();
        if num_gt == 0 {
            report.excluded.push(c);
            continue;
        }
        let mut ranked: Vec<(usize, f64, BBox)> = dets
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| {
                ds.iter()
                    .filter(|d| d.bbox.class_id == c)
                    .map(move |d| (i, d.score, d.bbox))
            })
            .collect();
        // stable: equal scores keep image order
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let ranked: Vec<(usize, BBox)> = ranked.into_iter().map(|(i, _, b)| (i, b)).collect();
        let aps: Vec<f64> = config
            .thresholds
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let tp = match_ranked(&ranked, &class_gts, t);
                if k == 0 {
                    report.pr_curves.insert(c, pr_points(&tp, num_gt));
                }
                ap_from_flags(&tp, num_gt)
            })
            .collect();
        report.per_class_ap.insert(c, aps);
    }
    let n = report.per_class_ap.len();
    if n > 0 {
        let nt = config.thresholds.len() as f64;
        report.map50 = report.per_class_ap.values().map(|v| v[0]).sum::<f64>() / n as f64;
        report.map5095 = report
            .per_class_ap
            .values()
            .map(|v| v.iter().sum::<f64>() / nt)
            .sum::<f64>()
            / n as f64;
    }
    Ok(report)
}

/// Groups `(image_id, detection)` pairs by the given image order. Ids not in
/// `ids` are an error.
pub fn group_detections(ids: &[String], dets: &[(String, Detection)]) -> Result<Vec<Vec<Detection>>> {
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut out = vec![Vec::new(); ids.len()];
    for (id, d) in dets {
        let i = index
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("detection for unknown image `{id}`")))?;
        out[*i].push(*d);
    }
    Ok(out)
}
