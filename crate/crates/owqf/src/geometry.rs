//! Normalized center-size boxes and overlap measures.
//!
//! All coordinates live in [0, 1]. Construction clamps: centers into the
//! unit interval, sides into [1e-4, 1], so downstream area and union
//! denominators are never zero. Box refinement happens in logit space:
//! deltas add to the logit of each coordinate and a sigmoid squashes back,
//! which keeps every update inside the unit interval without hard clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SIDE: f64 = 1e-4;

/// Pulled-in bound so logits stay finite for coordinates at 0 or 1.
const LOGIT_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDelta {
    pub dcx: f64,
    pub dcy: f64,
    pub dw: f64,
    pub dh: f64,
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Box {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Box {
            cx: cx.clamp(0.0, 1.0),
            cy: cy.clamp(0.0, 1.0),
            w: w.clamp(MIN_SIDE, 1.0),
            h: h.clamp(MIN_SIDE, 1.0),
        }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Box::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)` with `x1 <= x2`, `y1 <= y2`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn logits(&self) -> [f64; 4] {
        [logit(self.cx), logit(self.cy), logit(self.w), logit(self.h)]
    }

    pub fn from_logits(l: &[f64]) -> Self {
        Box::new(sigmoid(l[0]), sigmoid(l[1]), sigmoid(l[2]), sigmoid(l[3]))
    }
}

pub fn iou(a: &Box, b: &Box) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

pub fn giou(a: &Box, b: &Box) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclose = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (enclose - union) / enclose
}

/// Mean absolute difference over the four center-size coordinates.
pub fn l1(a: &Box, b: &Box) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Logit-space update: each coordinate moves by `delta` in logit space and
/// is squashed back through a sigmoid, then re-clamped by construction.
pub fn apply_delta(b: &Box, d: &BoxDelta) -> Result<Box> {
    for (name, v) in [("dcx", d.dcx), ("dcy", d.dcy), ("dw", d.dw), ("dh", d.dh)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("box delta {name} is {v}")));
        }
    }
    Ok(Box::new(
        sigmoid(logit(b.cx) + d.dcx),
        sigmoid(logit(b.cy) + d.dcy),
        sigmoid(logit(b.w) + d.dw),
        sigmoid(logit(b.h) + d.dh),
    ))
}
