//! Normalized boxes and detections.

use crate::error::{Error, Result};

/// Six defect classes, in id order.
pub const CLASS_NAMES: [&str; 6] = [
    "Inkiness",
    "Vitium",
    "Crease",
    "Defaced",
    "Patch",
    "Signature",
];

/// Axis-aligned box in image-normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

impl BBox {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            class_id,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_corners(class_id: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(class_id, (x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Checks the ranges a stored annotation must satisfy.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_id >= num_classes {
            return Err(Error::UnknownClass {
                class_id: self.class_id,
                num_classes,
            });
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.cx) && unit(self.cy)) {
            return Err(Error::InvalidArgument(format!(
                "box center ({}, {}) outside [0,1]",
                self.cx, self.cy
            )));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "box size {}x{} outside (0,1]",
                self.w, self.h
            )));
        }
        Ok(())
    }

    /// The box intersected with the unit square.
    pub fn clamped(&self) -> BBox {
        let (x0, y0, x1, y1) = self.corners();
        let c = |v: f64| v.clamp(0.0, 1.0);
        BBox::from_corners(self.class_id, c(x0), c(y0), c(x1), c(y1))
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax1 - ax0).max(0.0) * (ay1 - ay0).max(0.0);
    let area_b = (bx1 - bx0).max(0.0) * (by1 - by0).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}
