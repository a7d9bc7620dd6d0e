//! Axis-aligned box arithmetic.
//!
//! A [`BBox`] is the closed region `[xmin, xmax] × [ymin, ymax]` in pixel
//! coordinates. Width is `xmax - xmin`; there is no "+1 pixel" correction.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum BoxError {
    #[error("non-finite coordinate in box ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("negative coordinate in box ({0}, {1}, {2}, {3})")]
    Negative(f64, f64, f64, f64),
    #[error("empty or inverted box ({0}, {1}, {2}, {3}): need xmin < xmax and ymin < ymax")]
    Degenerate(f64, f64, f64, f64),
}

/// Axis-aligned rectangle with strictly positive area and finite,
/// non-negative coordinates. Invalid boxes cannot be constructed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self, BoxError> {
        if !(xmin.is_finite() && ymin.is_finite() && xmax.is_finite() && ymax.is_finite()) {
            return Err(BoxError::NonFinite(xmin, ymin, xmax, ymax));
        }
        if xmin < 0.0 || ymin < 0.0 || xmax < 0.0 || ymax < 0.0 {
            return Err(BoxError::Negative(xmin, ymin, xmax, ymax));
        }
        if xmin >= xmax || ymin >= ymax {
            return Err(BoxError::Degenerate(xmin, ymin, xmax, ymax));
        }
        Ok(Self {
            xmin,
            ymin,
            xmax,
            ymax,
        })
    }

    #[inline]
    pub fn xmin(&self) -> f64 {
        self.xmin
    }

    #[inline]
    pub fn ymin(&self) -> f64 {
        self.ymin
    }

    #[inline]
    pub fn xmax(&self) -> f64 {
        self.xmax
    }

    #[inline]
    pub fn ymax(&self) -> f64 {
        self.ymax
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    /// Coordinates as `[xmin, ymin, xmax, ymax]`.
    #[inline]
    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the overlap region; zero when the boxes are disjoint or
    /// only share an edge.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over Union, in `[0, 1]`.
    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    /// Shift by `(dx, dy)`. Fails if the result leaves the non-negative quadrant.
    pub fn translated(&self, dx: f64, dy: f64) -> Result<BBox, BoxError> {
        BBox::new(
            self.xmin + dx,
            self.ymin + dy,
            self.xmax + dx,
            self.ymax + dy,
        )
    }

    /// Multiply every coordinate by `s`.
    pub fn scaled(&self, s: f64) -> Result<BBox, BoxError> {
        BBox::new(self.xmin * s, self.ymin * s, self.xmax * s, self.ymax * s)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.xmin, self.ymin, self.xmax, self.ymax
        )
    }
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

/// Intersection over Union of two boxes.
///
/// Returns exactly `1.0` for identical boxes and `0.0` for boxes whose
/// interiors do not overlap.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    // union >= max(area) >= inter, so the ratio stays in [0, 1] up to rounding
    (inter / union).clamp(0.0, 1.0)
}
