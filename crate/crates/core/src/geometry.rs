//! Coordinate-space-aware rectangles and the resize/crop transforms used to
//! move boxes between a source frame, a cropped region and detector inputs.
//!
//! Boxes are corner-form (`x_min, y_min, x_max, y_max`) in continuous pixel
//! coordinates. Every transform clamps its output to the target space, and a
//! box that collapses to zero area under clamping is reported as `None`
//! rather than as an error.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("frame size must be at least 1x1, got {width}x{height}")]
    EmptyFrame { width: u32, height: u32 },
    #[error("non-finite box coordinate")]
    NonFinite,
    #[error("degenerate box ({x_min}, {y_min}, {x_max}, {y_max}): min must be strictly below max")]
    Degenerate {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("padding ratio {0} must be finite and non-negative")]
    BadPadding(f64),
}

/// Pixel dimensions of an image or detector input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 2]", into = "[u32; 2]")]
pub struct FrameSize {
    width: u32,
    height: u32,
}

impl FrameSize {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyFrame { width, height });
        }
        Ok(Self { width, height })
    }

    pub const fn width(&self) -> u32 {
        self.width
    }

    pub const fn height(&self) -> u32 {
        self.height
    }

    /// The whole frame as a box.
    pub fn full_box(&self) -> BBox {
        BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: self.width as f64,
            y_max: self.height as f64,
        }
    }
}

impl TryFrom<[u32; 2]> for FrameSize {
    type Error = GeometryError;

    fn try_from([w, h]: [u32; 2]) -> Result<Self, Self::Error> {
        FrameSize::new(w, h)
    }
}

impl From<FrameSize> for [u32; 2] {
    fn from(s: FrameSize) -> Self {
        [s.width, s.height]
    }
}

impl fmt::Display for FrameSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Axis-aligned box with strictly positive width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(GeometryError::Degenerate {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from center form (as used by some annotation formats and
    /// by the tracker state).
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
        )
    }

    /// Like [`BBox::new`] but returns `None` for empty or non-finite input.
    pub fn non_empty(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Option<Self> {
        Self::new(x_min, y_min, x_max, y_max).ok()
    }

    pub const fn x_min(&self) -> f64 {
        self.x_min
    }
    pub const fn y_min(&self) -> f64 {
        self.y_min
    }
    pub const fn x_max(&self) -> f64 {
        self.x_max
    }
    pub const fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Intersection with `other`, `None` when they do not overlap.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::non_empty(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
    }

    /// Clips to `[0, width] x [0, height]` of `space`.
    pub fn clamp_to(&self, space_w: f64, space_h: f64) -> Option<BBox> {
        BBox::non_empty(
            self.x_min.clamp(0.0, space_w),
            self.y_min.clamp(0.0, space_h),
            self.x_max.clamp(0.0, space_w),
            self.y_max.clamp(0.0, space_h),
        )
    }

    /// True when `other` lies inside `self`, allowing `tol` slack per edge.
    pub fn contains(&self, other: &BBox, tol: f64) -> bool {
        other.x_min >= self.x_min - tol
            && other.y_min >= self.y_min - tol
            && other.x_max <= self.x_max + tol
            && other.y_max <= self.y_max + tol
    }

    /// Grows the box by `ratio` of its size on every side, clipped to the
    /// frame.
    pub fn padded(&self, ratio: f64, frame: FrameSize) -> Result<BBox, GeometryError> {
        if !(ratio.is_finite() && ratio >= 0.0) {
            return Err(GeometryError::BadPadding(ratio));
        }
        let dx = self.width() * ratio;
        let dy = self.height() * ratio;
        BBox::new(
            self.x_min - dx,
            self.y_min - dy,
            self.x_max + dx,
            self.y_max + dy,
        )?
        .clamp_to(frame.width as f64, frame.height as f64)
        .ok_or(GeometryError::Degenerate {
            x_min: self.x_min,
            y_min: self.y_min,
            x_max: self.x_max,
            y_max: self.y_max,
        })
    }

    /// Smallest box on the integer pixel grid that covers `self`, clipped to
    /// the frame. Used before cutting pixels so the crop transform and the
    /// pixel crop agree exactly.
    pub fn snap_to_pixels(&self, frame: FrameSize) -> Option<BBox> {
        BBox::non_empty(
            libm::floor(self.x_min),
            libm::floor(self.y_min),
            libm::ceil(self.x_max),
            libm::ceil(self.y_max),
        )?
        .clamp_to(frame.width as f64, frame.height as f64)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from([a, b, c, d]: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(a, b, c, d)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    match a.intersection(b) {
        None => 0.0,
        Some(inter) => {
            let i = inter.area();
            let u = a.area() + b.area() - i;
            (i / u).clamp(0.0, 1.0)
        }
    }
}

/// Side of the windscreen the driver sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriverSide {
    Left,
    /// Right-hand-drive vehicles (UK).
    #[default]
    Right,
}

/// The horizontal `fraction` of the windscreen nearest the driver, full
/// height.
pub fn driver_side_region(
    windscreen: &BBox,
    side: DriverSide,
    fraction: f64,
) -> Result<BBox, GeometryError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(GeometryError::BadFraction(fraction));
    }
    let span = fraction * windscreen.width();
    let (x_min, x_max) = match side {
        DriverSide::Right => (windscreen.x_max - span, windscreen.x_max),
        DriverSide::Left => (windscreen.x_min, windscreen.x_min + span),
    };
    BBox::new(x_min, windscreen.y_min, x_max, windscreen.y_max)
}

/// One step of a coordinate mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Per-axis scaling from one image size to another.
    Resize { from: FrameSize, to: FrameSize },
    /// Cut `region` out of the source; the target space is the region's
    /// extent with its origin at the region's top-left corner.
    Crop { region: BBox },
}

impl Transform {
    pub fn resize(from: FrameSize, to: FrameSize) -> Self {
        Transform::Resize { from, to }
    }

    pub fn crop(region: BBox) -> Self {
        Transform::Crop { region }
    }

    /// Extent of the target space.
    pub fn target_extent(&self) -> (f64, f64) {
        match self {
            Transform::Resize { to, .. } => (to.width as f64, to.height as f64),
            Transform::Crop { region } => (region.width(), region.height()),
        }
    }

    /// Extent of the source space, if the transform pins one down. A crop
    /// only knows its region, not the size of the image it was cut from.
    pub fn source_extent(&self) -> Option<(f64, f64)> {
        match self {
            Transform::Resize { from, .. } => Some((from.width as f64, from.height as f64)),
            Transform::Crop { .. } => None,
        }
    }

    /// Maps a source-space box into the target space. `None` means the box
    /// has no area left inside the target.
    pub fn apply(&self, b: &BBox) -> Option<BBox> {
        match self {
            Transform::Resize { from, to } => {
                let sx = to.width as f64 / from.width as f64;
                let sy = to.height as f64 / from.height as f64;
                BBox::non_empty(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy)?
                    .clamp_to(to.width as f64, to.height as f64)
            }
            Transform::Crop { region } => BBox::non_empty(
                b.x_min - region.x_min,
                b.y_min - region.y_min,
                b.x_max - region.x_min,
                b.y_max - region.y_min,
            )?
            .clamp_to(region.width(), region.height()),
        }
    }

    /// Maps a target-space box back into the source space.
    pub fn invert(&self, b: &BBox) -> Option<BBox> {
        match self {
            Transform::Resize { from, to } => {
                let sx = from.width as f64 / to.width as f64;
                let sy = from.height as f64 / to.height as f64;
                BBox::non_empty(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy)?
                    .clamp_to(from.width as f64, from.height as f64)
            }
            Transform::Crop { region } => {
                let local = b.clamp_to(region.width(), region.height())?;
                BBox::non_empty(
                    local.x_min + region.x_min,
                    local.y_min + region.y_min,
                    local.x_max + region.x_min,
                    local.y_max + region.y_min,
                )
            }
        }
    }
}

/// An ordered sequence of transforms, applied first to last.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformChain {
    steps: Vec<Transform>,
}

impl TransformChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn then(mut self, t: Transform) -> Self {
        self.steps.push(t);
        self
    }

    pub fn push(&mut self, t: Transform) {
        self.steps.push(t);
    }

    pub fn steps(&self) -> &[Transform] {
        &self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn apply(&self, b: &BBox) -> Option<BBox> {
        self.steps.iter().try_fold(*b, |acc, t| t.apply(&acc))
    }

    pub fn invert(&self, b: &BBox) -> Option<BBox> {
        self.steps.iter().rev().try_fold(*b, |acc, t| t.invert(&acc))
    }
}

impl From<Transform> for TransformChain {
    fn from(t: Transform) -> Self {
        TransformChain { steps: alloc::vec![t] }
    }
}
