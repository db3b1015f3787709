//! Axis-aligned regions. Membership is cell-center-in-closed-rectangle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridMeta;
use crate::scalar::Real;

/// Closed rectangle in grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellRect<T: Real> {
    pub row_min: T,
    pub row_max: T,
    pub col_min: T,
    pub col_max: T,
}

impl<T: Real> CellRect<T> {
    pub fn new(row_min: T, row_max: T, col_min: T, col_max: T) -> Self {
        CellRect {
            row_min,
            row_max,
            col_min,
            col_max,
        }
    }

    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (r, c) = (T::from_usize_lossy(row), T::from_usize_lossy(col));
        r >= self.row_min && r <= self.row_max && c >= self.col_min && c <= self.col_max
    }

    /// All grid cells whose centers lie in the rectangle, row-major.
    pub fn cells(&self, meta: &GridMeta<T>) -> Vec<(usize, usize)> {
        let Some((r0, r1)) = index_span(self.row_min, self.row_max, meta.height_cells) else {
            return Vec::new();
        };
        let Some((c0, c1)) = index_span(self.col_min, self.col_max, meta.width_cells) else {
            return Vec::new();
        };
        (r0..=r1)
            .flat_map(|r| (c0..=c1).map(move |c| (r, c)))
            .collect()
    }
}

fn index_span<T: Real>(lo: T, hi: T, len: usize) -> Option<(usize, usize)> {
    let lo = lo.ceil().max(T::zero());
    let hi = hi.floor().min(T::from_usize_lossy(len - 1));
    if lo > hi {
        return None;
    }
    Some((lo.to_usize()?, hi.to_usize()?))
}

/// Named rectangle in meters relative to the ego vehicle. `forward` runs along
/// increasing rows and `lateral` along increasing columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    pub forward_min: f64,
    pub forward_max: f64,
    pub lateral_min: f64,
    pub lateral_max: f64,
}

impl RegionSpec {
    /// The 10 m deep, 20 m wide area directly ahead of the ego vehicle.
    pub fn ahead_10x20() -> Self {
        RegionSpec {
            name: "ahead_10x20".into(),
            forward_min: 0.0,
            forward_max: 10.0,
            lateral_min: -10.0,
            lateral_max: 10.0,
        }
    }

    pub fn to_cell_rect<T: Real>(&self, meta: &GridMeta<T>) -> CellRect<T> {
        let (r0, c0) = meta.meters_to_grid(T::lit(self.forward_min), T::lit(self.lateral_min));
        let (r1, c1) = meta.meters_to_grid(T::lit(self.forward_max), T::lit(self.lateral_max));
        CellRect::new(r0, r1, c0, c1)
    }

    pub fn validate<T: Real>(&self, meta: &GridMeta<T>) -> Result<()> {
        if !(self.forward_min < self.forward_max && self.lateral_min < self.lateral_max) {
            return Err(Error::validation(
                format!("region {}", self.name),
                "requires forward_min < forward_max and lateral_min < lateral_max",
            ));
        }
        if self.to_cell_rect(meta).cells(meta).is_empty() {
            return Err(Error::validation(
                format!("region {}", self.name),
                "does not intersect the grid",
            ));
        }
        Ok(())
    }
}
