//! Regular rectangular grid over the planar lon/lat domain and the mapping
//! from observation coordinates to grid cells.
//!
//! The latent field describes cell averages on an `n_x` by `n_y` grid. The
//! flat stacking convention is column-wise with the y-index fastest:
//! cell `(i, j)` (row `i` along y, column `j` along x) has flat index
//! `j * n_y + i`. Everything downstream (operator assembly, Kronecker
//! products) assumes this convention.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Regular grid discretizing the bounded domain `[x_min, x_max] x [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub h_x: f64,
    pub h_y: f64,
    /// Cell area `h_x * h_y`.
    pub cell_area: f64,
}

/// Flat index of a grid cell under the fixed stacking convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellIndex(pub usize);

/// Builds a grid, checking extents and minimum cell counts.
pub fn build_grid(
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    n_x: usize,
    n_y: usize,
) -> Result<Grid> {
    if !(x_max > x_min) || !(y_max > y_min) {
        return Err(Error::InvalidGrid(format!(
            "degenerate extents [{x_min}, {x_max}] x [{y_min}, {y_max}]"
        )));
    }
    if n_x < 3 || n_y < 3 {
        return Err(Error::InvalidGrid(format!(
            "cell counts must be at least 3, got {n_x} x {n_y}"
        )));
    }
    let h_x = (x_max - x_min) / n_x as f64;
    let h_y = (y_max - y_min) / n_y as f64;
    Ok(Grid {
        x_min,
        x_max,
        y_min,
        y_max,
        n_x,
        n_y,
        h_x,
        h_y,
        cell_area: h_x * h_y,
    })
}

impl Grid {
    pub fn n_cells(&self) -> usize {
        self.n_x * self.n_y
    }

    /// Flat index of cell `(i, j)`: y-index `i` fastest.
    pub fn flat(&self, i: usize, j: usize) -> usize {
        j * self.n_y + i
    }

    /// Inverse of [`Grid::flat`].
    pub fn ij(&self, flat: usize) -> (usize, usize) {
        (flat % self.n_y, flat / self.n_y)
    }

    /// Center of the cell with the given flat index.
    pub fn cell_center(&self, flat: usize) -> (f64, f64) {
        let (i, j) = self.ij(flat);
        (
            self.x_min + (j as f64 + 0.5) * self.h_x,
            self.y_min + (i as f64 + 0.5) * self.h_y,
        )
    }
}

/// Locates the cell containing a point. Points on shared interior edges go
/// to the cell with the larger index along that axis; the domain's max edge
/// maps inward so every in-domain point has exactly one cell.
pub fn locate_cell(grid: &Grid, point: (f64, f64)) -> Result<CellIndex> {
    let (x, y) = point;
    if !(x >= grid.x_min && x <= grid.x_max && y >= grid.y_min && y <= grid.y_max) {
        return Err(Error::OutOfDomain { x, y });
    }
    let j = (((x - grid.x_min) / grid.h_x).floor() as usize).min(grid.n_x - 1);
    let i = (((y - grid.y_min) / grid.h_y).floor() as usize).min(grid.n_y - 1);
    Ok(CellIndex(grid.flat(i, j)))
}

/// The observation matrix E: one row per location, a single entry equal to 1
/// at the flat index of the containing cell. Stored as the cell index per row.
#[derive(Debug, Clone)]
pub struct SelectionMatrix {
    pub cells: Vec<usize>,
    pub n_cols: usize,
}

pub fn selection_matrix(grid: &Grid, locations: &[(f64, f64)]) -> Result<SelectionMatrix> {
    let cells = locations
        .iter()
        .map(|&p| locate_cell(grid, p).map(|c| c.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectionMatrix {
        cells,
        n_cols: grid.n_cells(),
    })
}
