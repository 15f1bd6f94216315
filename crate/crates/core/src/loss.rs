//! Target assignment and the detection loss.
//!
//! Each ground-truth box goes to one cell: the level is
//! `round(log2(sqrt(w·h·H·W))) − 1` clamped to the available levels, and the
//! cell is the one containing the box center. When two boxes land on the
//! same cell the larger one is kept.
//!
//! The loss is
//!
//! ```text
//! cls = mean over every (image, level, cell, class) of BCE(logit, onehot)
//! box = Σ_positive smoothL1(σ(t0)−ox, σ(t1)−oy, t2−ln w, t3−ln h) / max(1, npos)
//! total = cls_weight·cls + box_weight·box
//! ```

use std::collections::BTreeMap;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::head::{box_targets, cell_of, sigmoid, HeadOutput, LevelOutput};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub box_weight: f64,
    /// Multiplies the cross-entropy of positive class entries.
    pub pos_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 1.0,
            box_weight: 5.0,
            pos_weight: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub gh: usize,
    pub gw: usize,
    /// `(B, num_classes, gh, gw)` one-hot.
    pub cls: Tensor,
    /// `(B, 4, gh, gw)`: in-cell offsets then log sizes.
    pub boxes: Tensor,
    /// Box area at positive cells, `None` elsewhere; indexed `(b·gh + row)·gw + col`.
    pub positive: Vec<Option<f64>>,
}

impl LevelTargets {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|p| p.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub levels: BTreeMap<u8, LevelTargets>,
}

impl Targets {
    pub fn num_positive(&self) -> usize {
        self.levels.values().map(|t| t.num_positive()).sum()
    }
}

/// Level a box of normalized size `w × h` is assigned to on an
/// `image_h × image_w` input.
pub fn assign_level(b: &BBox, image_h: usize, image_w: usize, levels: &[u8]) -> u8 {
    let side = (b.w * b.h * image_h as f64 * image_w as f64).sqrt().max(1e-12);
    let ideal = side.log2().round() - 1.0;
    let lo = *levels.first().expect("at least one level") as f64;
    let hi = *levels.last().expect("at least one level") as f64;
    ideal.clamp(lo, hi) as u8
}

/// `gts[b]` are the boxes of image `b`; `grid[l]` is `(gh, gw)` of level `l`.
pub fn assign_targets(
    gts: &[Vec<BBox>],
    grid: &BTreeMap<u8, (usize, usize)>,
    image_size: (usize, usize),
    num_classes: usize,
) -> Result<Targets> {
    let batch = gts.len().max(1);
    let level_list: Vec<u8> = grid.keys().copied().collect();
    if level_list.is_empty() {
        return Err(Error::InvalidArgument("assign_targets needs at least one level".into()));
    }
    let mut levels: BTreeMap<u8, LevelTargets> = grid
        .iter()
        .map(|(&l, &(gh, gw))| {
            (
                l,
                LevelTargets {
                    gh,
                    gw,
                    cls: Tensor::zeros(&[batch, num_classes, gh, gw]),
                    boxes: Tensor::zeros(&[batch, 4, gh, gw]),
                    positive: vec![None; batch * gh * gw],
                },
            )
        })
        .collect();
    for (b, boxes) in gts.iter().enumerate() {
        for gt in boxes {
            if gt.class_id >= num_classes {
                return Err(Error::UnknownClass {
                    class_id: gt.class_id,
                    num_classes,
                });
            }
            let l = assign_level(gt, image_size.0, image_size.1, &level_list);
            let t = levels.get_mut(&l).expect("assigned level exists");
            let (gh, gw) = (t.gh, t.gw);
            let (row, col) = cell_of(gt, gh, gw);
            let idx = (b * gh + row) * gw + col;
            let area = gt.area();
            if matches!(t.positive[idx], Some(a) if a >= area) {
                continue;
            }
            t.positive[idx] = Some(area);
            let plane = gh * gw;
            let p = row * gw + col;
            let cls = t.cls.data_mut();
            for c in 0..num_classes {
                cls[(b * num_classes + c) * plane + p] = if c == gt.class_id { 1.0 } else { 0.0 };
            }
            let enc = box_targets(gt, row, col, gh, gw);
            let bx = t.boxes.data_mut();
            for (k, v) in enc.iter().enumerate() {
                bx[(b * 4 + k) * plane + p] = *v;
            }
        }
    }
    Ok(Targets { levels })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub cls: f64,
    pub boxes: f64,
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `-(w·y·ln σ(z) + (1 - y)·ln(1 - σ(z)))` and its derivative in `z`.
fn bce_with_logits(z: f64, y: f64, w: f64) -> (f64, f64) {
    let loss = w * y * softplus(-z) + (1.0 - y) * softplus(z);
    let s = sigmoid(z);
    (loss, w * y * (s - 1.0) + (1.0 - y) * s)
}

fn check_level(l: u8, out: &LevelOutput, t: &LevelTargets) -> Result<()> {
    if out.cls_logits.shape() != t.cls.shape() || out.box_reg.shape() != t.boxes.shape() {
        return Err(Error::shape(
            "compute_loss",
            format!(
                "level {l}: prediction {:?}/{:?} vs targets {:?}/{:?}",
                out.cls_logits.shape(),
                out.box_reg.shape(),
                t.cls.shape(),
                t.boxes.shape()
            ),
        ));
    }
    Ok(())
}

/// Loss value and its gradient w.r.t. every head output.
pub fn loss_and_grad(
    pred: &HeadOutput,
    targets: &Targets,
    config: &LossConfig,
) -> Result<(LossValue, HeadOutput)> {
    if pred.keys().ne(targets.levels.keys()) {
        return Err(Error::shape(
            "compute_loss",
            format!(
                "prediction levels {:?} differ from target levels {:?}",
                pred.keys().collect::<Vec<_>>(),
                targets.levels.keys().collect::<Vec<_>>()
            ),
        ));
    }
    let cls_count: usize = pred.values().map(|o| o.cls_logits.len()).sum();
    let npos = targets.num_positive().max(1) as f64;
    let mut cls_sum = 0.0;
    let mut box_sum = 0.0;
    let mut grads = HeadOutput::new();
    for (l, out) in pred {
        let t = &targets.levels[l];
        check_level(*l, out, t)?;
        let mut d_cls = out.cls_logits.zeros_like();
        let cls_scale = config.cls_weight / cls_count as f64;
        for ((z, y), g) in out
            .cls_logits
            .data()
            .iter()
            .zip(t.cls.data())
            .zip(d_cls.data_mut())
        {
            let (v, dv) = bce_with_logits(*z, *y, config.pos_weight);
            cls_sum += v;
            *g = cls_scale * dv;
        }

        let mut d_box = out.box_reg.zeros_like();
        let plane = t.gh * t.gw;
        let box_scale = config.box_weight / npos;
        let reg = out.box_reg.data();
        let tgt = t.boxes.data();
        let db = d_box.data_mut();
        for (idx, pos) in t.positive.iter().enumerate() {
            if pos.is_none() {
                continue;
            }
            let (b, p) = (idx / plane, idx % plane);
            for k in 0..4 {
                let i = (b * 4 + k) * plane + p;
                let (u, du_dt) = if k < 2 {
                    let s = sigmoid(reg[i]);
                    (s, s * (1.0 - s))
                } else {
                    (reg[i], 1.0)
                };
                let (v, dv) = smooth_l1(u - tgt[i]);
                box_sum += v;
                db[i] = box_scale * dv * du_dt;
            }
        }
        grads.insert(
            *l,
            LevelOutput {
                cls_logits: d_cls,
                box_reg: d_box,
            },
        );
    }
    let cls = cls_sum / cls_count as f64;
    let boxes = box_sum / npos;
    Ok((
        LossValue {
            total: config.cls_weight * cls + config.box_weight * boxes,
            cls,
            boxes,
        },
        grads,
    ))
}

pub fn compute_loss(pred: &HeadOutput, targets: &Targets, config: &LossConfig) -> Result<LossValue> {
    Ok(loss_and_grad(pred, targets, config)?.0)
}
