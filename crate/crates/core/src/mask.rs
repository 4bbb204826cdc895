//! Bounding boxes and binary spatial masks over attention grids.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::RealArray;
use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn full() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x0, self.y0, self.x1, self.y1];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0) {
            return Err(Error::validation(alloc::format!(
                "box coordinates must lie in [0,1]: {self:?}"
            )));
        }
        if self.x0 > self.x1 || self.y0 > self.y1 {
            return Err(Error::validation(alloc::format!(
                "box corners out of order: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Normalizes a pixel-space box, clamping it to the image.
    pub fn from_pixels(x0: f64, y0: f64, x1: f64, y1: f64, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::validation("image dimensions must be positive"));
        }
        let (x0, x1) = (x0.min(x1), x0.max(x1));
        let (y0, y1) = (y0.min(y1), y0.max(y1));
        Self::new(
            (x0 / width).clamp(0.0, 1.0),
            (y0 / height).clamp(0.0, 1.0),
            (x1 / width).clamp(0.0, 1.0),
            (y1 / height).clamp(0.0, 1.0),
        )
    }
}

/// Binary `(h × w)` mask with at least one active cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMask {
    values: RealArray,
    source_box: Option<BBox>,
}

impl SpatialMask {
    pub fn new(values: RealArray, source_box: Option<BBox>) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::shape("spatial mask", values.shape(), &[0, 0]));
        }
        if values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::validation("mask entries must be 0 or 1"));
        }
        if !values.data().contains(&1.0) {
            return Err(Error::validation("mask must have at least one active cell"));
        }
        Ok(Self { values, source_box })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self {
            values: RealArray::filled(&[h, w], 1.0),
            source_box: None,
        }
    }

    pub fn values(&self) -> &RealArray {
        &self.values
    }

    pub fn source_box(&self) -> Option<&BBox> {
        self.source_box.as_ref()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    /// Number of cells, i.e. the token count of the grid it gates.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Whether the row-major token `q` is inside the mask.
    pub fn is_active(&self, q: usize) -> bool {
        self.values.data()[q] == 1.0
    }

    pub fn active_count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Cellwise union of masks on the same grid.
    pub fn union(masks: &[SpatialMask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::config("union of zero masks"))?;
        let mut data = first.values.data().to_vec();
        for m in &masks[1..] {
            if m.grid() != first.grid() {
                return Err(Error::shape(
                    "mask union",
                    first.values.shape(),
                    m.values.shape(),
                ));
            }
            for (d, &v) in data.iter_mut().zip(m.values.data()) {
                *d = d.max(v);
            }
        }
        Self::new(RealArray::new(first.values.shape(), data)?, None)
    }
}

/// Rasterizes `bbox` onto an `h × w` grid.
///
/// A cell is active iff its center lies in the half-open box
/// `[x0,x1) × [y0,y1)`. Along any axis where no cell center falls inside the
/// box, the single row or column containing the box center is used instead, so
/// a degenerate box lights exactly the cell under its center.
pub fn rasterize_mask(bbox: &BBox, h: usize, w: usize) -> Result<SpatialMask> {
    bbox.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::validation("mask grid extents must be at least 1"));
    }
    let (cx, cy) = bbox.center();
    let cols = axis_cells(bbox.x0, bbox.x1, cx, w);
    let rows = axis_cells(bbox.y0, bbox.y1, cy, h);
    let mut data = vec![0.0; h * w];
    for r in rows.clone() {
        for c in cols.clone() {
            data[r * w + c] = 1.0;
        }
    }
    SpatialMask::new(RealArray::from_parts(vec![h, w], data), Some(*bbox))
}

fn axis_cells(lo: f64, hi: f64, center: f64, n: usize) -> core::ops::Range<usize> {
    let inside: Vec<usize> = (0..n)
        .filter(|&i| {
            let c = (i as f64 + 0.5) / n as f64;
            lo <= c && c < hi
        })
        .collect();
    match (inside.first(), inside.last()) {
        (Some(&a), Some(&b)) => a..b + 1,
        _ => {
            let i = (libm::floor(center * n as f64) as usize).min(n - 1);
            i..i + 1
        }
    }
}
