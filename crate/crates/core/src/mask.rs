//! Binary masks over the patch grid.

use serde::{Deserialize, Serialize};

use crate::codec::Point2D;
use crate::error::{Error, Result};

/// A binary mask laid out row-major over a `rows x cols` grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

/// Run-length form used in proposal files: alternating run lengths over the
/// row-major cell order, starting with a (possibly zero-length) run of unset
/// cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub dims: [usize; 2],
    pub rle: Vec<usize>,
}

impl Mask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: vec![false; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: vec![true; rows * cols],
        }
    }

    pub fn from_cells(rows: usize, cols: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask of {rows}x{cols} needs {} cells, got {}",
                rows * cols,
                cells.len()
            )));
        }
        Ok(Self { rows, cols, cells })
    }

    /// Mask with the axis-aligned block `[row0, row0+h) x [col0, col0+w)` set.
    pub fn from_block(rows: usize, cols: usize, row0: usize, col0: usize, h: usize, w: usize) -> Self {
        let mut mask = Self::empty(rows, cols);
        for r in row0..(row0 + h).min(rows) {
            for c in col0..(col0 + w).min(cols) {
                mask.set(r, c, true);
            }
        }
        mask
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.cells[row * self.cols + col] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    /// Row-major indices of set cells.
    pub fn set_indices(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect()
    }

    /// Normalized coordinates of the center of cell `index`.
    pub fn cell_center(&self, index: usize) -> Point2D {
        let row = index / self.cols;
        let col = index % self.cols;
        Point2D::new_unchecked(
            (col as f64 + 0.5) / self.cols as f64,
            (row as f64 + 0.5) / self.rows as f64,
        )
    }

    /// Cell containing a normalized point; coordinates of exactly 1.0 fall in
    /// the last row/column.
    pub fn cell_of(&self, p: Point2D) -> (usize, usize) {
        let col = ((p.x * self.cols as f64) as usize).min(self.cols - 1);
        let row = ((p.y * self.rows as f64) as usize).min(self.rows - 1);
        (row, col)
    }

    pub fn contains_point(&self, p: Point2D) -> bool {
        let (r, c) = self.cell_of(p);
        self.get(r, c)
    }

    fn check_same_grid(&self, other: &Mask) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "mask grids differ: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        self.check_same_grid(other)?;
        Ok(self.cells.iter().zip(&other.cells).filter(|(a, b)| **a && **b).count())
    }

    pub fn union_count(&self, other: &Mask) -> Result<usize> {
        self.check_same_grid(other)?;
        Ok(self.cells.iter().zip(&other.cells).filter(|(a, b)| **a || **b).count())
    }

    /// Intersection over union; two empty masks have IoU 1.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        let inter = self.intersection_count(other)?;
        let union = self.union_count(other)?;
        if union == 0 {
            return Ok(1.0);
        }
        Ok(inter as f64 / union as f64)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.cells.iter().zip(&other.cells).all(|(a, b)| !*a || *b)
    }

    /// Morphological dilation with a `(2r+1) x (2r+1)` square element.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let mut out = Mask::empty(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.get(r, c) {
                    continue;
                }
                let r0 = r.saturating_sub(radius);
                let r1 = (r + radius).min(self.rows - 1);
                let c0 = c.saturating_sub(radius);
                let c1 = (c + radius).min(self.cols - 1);
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        out.set(rr, cc, true);
                    }
                }
            }
        }
        out
    }

    pub fn to_rle(&self) -> RleMask {
        let mut rle = Vec::new();
        let mut current = false;
        let mut run = 0usize;
        for &cell in &self.cells {
            if cell == current {
                run += 1;
            } else {
                rle.push(run);
                current = cell;
                run = 1;
            }
        }
        rle.push(run);
        RleMask {
            dims: [self.rows, self.cols],
            rle,
        }
    }

    pub fn from_rle(rle: &RleMask) -> Result<Self> {
        let [rows, cols] = rle.dims;
        if rows == 0 || cols == 0 {
            return Err(Error::Shape("mask dims must be positive".into()));
        }
        let total: usize = rle.rle.iter().sum();
        if total != rows * cols {
            return Err(Error::Shape(format!(
                "run lengths sum to {total}, grid has {} cells",
                rows * cols
            )));
        }
        let mut cells = Vec::with_capacity(total);
        let mut value = false;
        for &run in &rle.rle {
            cells.extend(std::iter::repeat_n(value, run));
            value = !value;
        }
        Ok(Self { rows, cols, cells })
    }
}
