use crate::error::{Error, Result};

/// Uniform rectangular grid of square cells in one or two dimensions.
///
/// Cell values are stored x-fastest: index `i + nx * j`.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformGrid {
    dim: usize,
    origin: [f64; 2],
    cells: [usize; 2],
    h: f64,
}

impl UniformGrid {
    pub fn new(origin: &[f64], cells: &[usize], h: f64) -> Result<Self> {
        let dim = cells.len();
        if !(1..=2).contains(&dim) || origin.len() != dim {
            return Err(Error::Dimension(format!(
                "grid needs matching origin/cells of dimension 1 or 2, got {} and {}",
                origin.len(),
                dim
            )));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::param(format!("cell width must be positive, got {h}")));
        }
        if cells.contains(&0) {
            return Err(Error::param("grid needs at least one cell per dimension"));
        }
        let mut o = [0.0; 2];
        let mut c = [1usize; 2];
        o[..dim].copy_from_slice(origin);
        c[..dim].copy_from_slice(cells);
        Ok(Self {
            dim,
            origin: o,
            cells: c,
            h,
        })
    }

    /// Box `[0, extent]^dim` split into `n` cells per dimension.
    pub fn unit_box(dim: usize, extent: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("grid needs at least one cell per dimension"));
        }
        Self::new(&vec![0.0; dim], &vec![n; dim], extent / n as f64)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.dim]
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells[..self.dim]
    }

    pub fn nx(&self) -> usize {
        self.cells[0]
    }

    /// Cells along the second axis; 1 for a one-dimensional grid.
    pub fn ny(&self) -> usize {
        self.cells[1]
    }

    pub fn len(&self) -> usize {
        self.cells[0] * self.cells[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.cells[axis] as f64 * self.h
    }

    pub fn cell_measure(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|a| self.extent(a)).product()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.cells[0] * j
    }

    /// Cell center; the second coordinate is 0 in 1D.
    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        let x = self.origin[0] + (i as f64 + 0.5) * self.h;
        let y = if self.dim == 2 {
            self.origin[1] + (j as f64 + 0.5) * self.h
        } else {
            0.0
        };
        [x, y]
    }

    pub fn centers(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.cells[1]).flat_map(move |j| (0..self.cells[0]).map(move |i| self.center(i, j)))
    }

    /// Sub-grid of the first `n` cells per dimension, sharing this grid's origin.
    pub fn crop(&self, n: usize) -> Result<Self> {
        if n == 0 || self.cells().iter().any(|&c| n > c) {
            return Err(Error::Dimension(format!(
                "cannot crop {:?} cells to {n} per dimension",
                self.cells()
            )));
        }
        Self::new(self.origin(), &vec![n; self.dim], self.h)
    }

    /// Cheap fingerprint used to key cached decompositions.
    pub fn fingerprint(&self) -> u64 {
        let mut words = vec![self.dim as u64, self.cells[0] as u64, self.cells[1] as u64];
        words.push(self.h.to_bits());
        words.push(self.origin[0].to_bits());
        words.push(self.origin[1].to_bits());
        crate::field::mix_words(&words)
    }
}
