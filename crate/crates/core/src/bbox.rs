use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Axis-aligned box, top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct BoxXywh {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXywh {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoxXywh { x, y, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXywh {
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BoxXywh::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0) || !self.is_finite()
    }

    pub fn require_nondegenerate(&self) -> Result<()> {
        if self.is_degenerate() {
            return Err(invalid!("degenerate box {:?}", self));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BoxXywh) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x.max(other.x)).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    /// Intersection with `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BoxXywh {
        let x1 = self.x.clamp(0.0, width);
        let y1 = self.y.clamp(0.0, height);
        let x2 = self.x2().clamp(0.0, width);
        let y2 = self.y2().clamp(0.0, height);
        BoxXywh::from_corners(x1, y1, x2, y2)
    }

    pub fn scaled(&self, s: f64) -> BoxXywh {
        BoxXywh::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }
}
