//! Coarse RGB rasters used as the "image" of a synthetic scene.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// `cells_h x cells_w` grid of RGB values in `[0, 1]`; one cell spans
/// `cell_px x cell_px` pixels of the nominal image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    cells_h: usize,
    cells_w: usize,
    cell_px: f64,
    rgb: Vec<f64>,
}

impl Raster {
    pub fn new(cells_h: usize, cells_w: usize, cell_px: f64) -> Result<Self> {
        if cells_h == 0 || cells_w == 0 || !(cell_px > 0.0) {
            return Err(Error::InvalidArgument(format!("raster {cells_h}x{cells_w} @ {cell_px}px")));
        }
        Ok(Self { cells_h, cells_w, cell_px, rgb: vec![0.0; cells_h * cells_w * 3] })
    }

    pub fn from_rgb(cells_h: usize, cells_w: usize, cell_px: f64, rgb: Vec<f64>) -> Result<Self> {
        let mut r = Self::new(cells_h, cells_w, cell_px)?;
        if rgb.len() != r.rgb.len() {
            return Err(Error::Shape(format!("raster expects {} values, got {}", r.rgb.len(), rgb.len())));
        }
        r.rgb = rgb;
        Ok(r)
    }

    pub fn cells_h(&self) -> usize {
        self.cells_h
    }

    pub fn cells_w(&self) -> usize {
        self.cells_w
    }

    pub fn cell_px(&self) -> f64 {
        self.cell_px
    }

    pub fn width_px(&self) -> f64 {
        self.cells_w as f64 * self.cell_px
    }

    pub fn height_px(&self) -> f64 {
        self.cells_h as f64 * self.cell_px
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.cells_w + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.cells_w + col) * 3;
        self.rgb[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rgb
    }

    /// Center of cell `(row, col)` in pixels, as `(x, y)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        ((col as f64 + 0.5) * self.cell_px, (row as f64 + 0.5) * self.cell_px)
    }

    /// `(cells_h * cells_w) x 3` matrix, row-major over cells.
    pub fn to_mat<T: Scalar>(&self) -> Mat<T> {
        Mat::from_f64(self.cells_h * self.cells_w, 3, &self.rgb).expect("raster buffer size is fixed")
    }
}
