//! Box algebra in continuous image pixel coordinates.
//!
//! Boxes are stored in corner format `(x1, y1, x2, y2)`. The `xywh` form only
//! appears at file boundaries (COCO annotations and results).

use core::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box coordinates must be finite")]
    NonFinite,
    #[error("box corners out of order: ({x1}, {y1}, {x2}, {y2})")]
    Inverted { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("negative width or height in xywh box ({w}, {h})")]
    NegativeSize { w: f64, h: f64 },
    #[error("image extent must be at least 1x1, got {width}x{height}")]
    EmptyExtent { width: u32, height: u32 },
    #[error("expansion factor must be positive and finite, got {0}")]
    InvalidFactor(f64),
    #[error("expanded box collapses to zero width or height after clipping")]
    DegenerateExpansion,
}

/// Axis-aligned box, corner format.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if w < 0.0 || h < 0.0 {
            return Err(GeometryError::NegativeSize { w, h });
        }
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let BBox { x1, y1, x2, y2 } = *self;
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x2 < x1 || y2 < y1 {
            return Err(GeometryError::Inverted { x1, y1, x2, y2 });
        }
        Ok(())
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

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// Lexicographic order over `(x1, y1, x2, y2)`; the tie-breaker used by
    /// proposal ranking, NMS and evaluation.
    pub fn lex_cmp(&self, other: &BBox) -> Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

/// Image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageExtent {
    pub width: u32,
    pub height: u32,
}

impl ImageExtent {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyExtent { width, height });
        }
        Ok(ImageExtent { width, height })
    }

    pub fn full_box(&self) -> BBox {
        BBox {
            x1: 0.0,
            y1: 0.0,
            x2: f64::from(self.width),
            y2: f64::from(self.height),
        }
    }

    pub fn contains(&self, b: &BBox) -> bool {
        b.x1 >= 0.0
            && b.y1 >= 0.0
            && b.x2 <= f64::from(self.width)
            && b.y2 <= f64::from(self.height)
    }
}

/// IoU together with a flag raised when both boxes have zero area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub iou: f64,
    pub degenerate: bool,
}

/// Intersection over union, checked. Zero union yields `iou = 0` with the
/// `degenerate` flag set.
pub fn iou_checked(a: &BBox, b: &BBox) -> Result<Overlap, GeometryError> {
    a.validate()?;
    b.validate()?;
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    let inter = if iw > 0.0 && ih > 0.0 { iw * ih } else { 0.0 };
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(Overlap {
            iou: 0.0,
            degenerate: true,
        });
    }
    Ok(Overlap {
        iou: (inter / union).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Intersection over union of two valid boxes; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Clamp all coordinates into `[0, width] x [0, height]`.
pub fn clip_box(b: &BBox, bounds: ImageExtent) -> BBox {
    let w = f64::from(bounds.width);
    let h = f64::from(bounds.height);
    BBox {
        x1: b.x1.clamp(0.0, w),
        y1: b.y1.clamp(0.0, h),
        x2: b.x2.clamp(0.0, w),
        y2: b.y2.clamp(0.0, h),
    }
}

/// Scale width and height by `factor` about the box center, then clip.
pub fn expand_box(b: &BBox, factor: f64, bounds: ImageExtent) -> Result<BBox, GeometryError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(GeometryError::InvalidFactor(factor));
    }
    let expanded = if factor == 1.0 {
        *b
    } else {
        let (cx, cy) = b.center();
        let hw = b.width() * factor * 0.5;
        let hh = b.height() * factor * 0.5;
        BBox {
            x1: cx - hw,
            y1: cy - hh,
            x2: cx + hw,
            y2: cy + hh,
        }
    };
    let clipped = clip_box(&expanded, bounds);
    if clipped.width() <= 0.0 || clipped.height() <= 0.0 {
        return Err(GeometryError::DegenerateExpansion);
    }
    Ok(clipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxFormat {
    /// `(x1, y1, x2, y2)`
    Corner,
    /// `(x, y, width, height)`
    Xywh,
}

/// Convert raw coordinates between corner and xywh layouts.
pub fn convert(coords: [f64; 4], from: BoxFormat, to: BoxFormat) -> Result<[f64; 4], GeometryError> {
    let b = match from {
        BoxFormat::Corner => BBox::new(coords[0], coords[1], coords[2], coords[3])?,
        BoxFormat::Xywh => BBox::from_xywh(coords[0], coords[1], coords[2], coords[3])?,
    };
    Ok(match to {
        BoxFormat::Corner => [b.x1, b.y1, b.x2, b.y2],
        BoxFormat::Xywh => b.to_xywh(),
    })
}
