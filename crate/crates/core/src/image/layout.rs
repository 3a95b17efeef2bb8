use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use super::raster::PixelRect;

/// Normalized bounding box in canvas coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    /// Grid cells `[floor(x_min·W), ceil(x_max·W)) x [floor(y_min·H), ceil(y_max·H))`,
    /// clamped to the grid.
    pub fn cells(&self, width: u32, height: u32) -> PixelRect {
        let lo = |v: f64, n: u32| libm::floor(v * n as f64).clamp(0.0, n as f64) as u32;
        let hi = |v: f64, n: u32| libm::ceil(v * n as f64).clamp(0.0, n as f64) as u32;
        PixelRect { x0: lo(self.x_min, width), y0: lo(self.y_min, height), x1: hi(self.x_max, width), y1: hi(self.y_max, height) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub scene_index: usize,
    pub character_id: String,
    pub bbox: BBox,
    pub z_order: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayoutViolation {
    NotFinite,
    XMinNotBelowXMax { x_min: f64, x_max: f64 },
    YMinNotBelowYMax { y_min: f64, y_max: f64 },
    OutOfBounds { coordinate: String, value: f64 },
    AreaBelowMinimum { area: f64, min_area: f64 },
}

impl fmt::Display for LayoutViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutViolation::NotFinite => write!(f, "coordinates must be finite"),
            LayoutViolation::XMinNotBelowXMax { x_min, x_max } => write!(f, "x_min ({x_min}) >= x_max ({x_max})"),
            LayoutViolation::YMinNotBelowYMax { y_min, y_max } => write!(f, "y_min ({y_min}) >= y_max ({y_max})"),
            LayoutViolation::OutOfBounds { coordinate, value } => write!(f, "{coordinate} = {value} lies outside [0, 1]"),
            LayoutViolation::AreaBelowMinimum { area, min_area } => write!(f, "area {area} is below the minimum {min_area}"),
        }
    }
}

/// Checks coordinate order, [0, 1] bounds and minimum area. Reports every
/// violation found.
pub fn validate_layout(layout: &Layout, min_area: f64) -> Result<(), Vec<LayoutViolation>> {
    validate_bbox(&layout.bbox, min_area)
}

pub fn validate_bbox(b: &BBox, min_area: f64) -> Result<(), Vec<LayoutViolation>> {
    let mut v = Vec::new();
    let coords = [("x_min", b.x_min), ("y_min", b.y_min), ("x_max", b.x_max), ("y_max", b.y_max)];
    if coords.iter().any(|(_, c)| !c.is_finite()) {
        v.push(LayoutViolation::NotFinite);
        return Err(v);
    }
    if b.x_min >= b.x_max {
        v.push(LayoutViolation::XMinNotBelowXMax { x_min: b.x_min, x_max: b.x_max });
    }
    if b.y_min >= b.y_max {
        v.push(LayoutViolation::YMinNotBelowYMax { y_min: b.y_min, y_max: b.y_max });
    }
    for (name, c) in coords {
        if !(0.0..=1.0).contains(&c) {
            v.push(LayoutViolation::OutOfBounds { coordinate: name.into(), value: c });
        }
    }
    let area = b.area();
    if area < min_area {
        v.push(LayoutViolation::AreaBelowMinimum { area, min_area });
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
