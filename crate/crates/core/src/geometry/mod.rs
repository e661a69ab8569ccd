//! Acquisition geometry, images, sinograms and the matched projector pair.

mod projector;

pub use projector::{as_dense_matrix, back_project, forward_project, Projector};

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square pixel grid centred on the rotation axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageGrid {
    pub n: usize,
    pub pixel_size: f64,
}

/// Physical width used when only a pixel count is given (think centimetres:
/// phantom intensities in `[0, 1]` then read as attenuation per cm).
pub const DEFAULT_FIELD_OF_VIEW: f64 = 20.0;

impl ImageGrid {
    pub fn new(n: usize, pixel_size: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Geometry(format!("image side {} < 2", n)));
        }
        if !(pixel_size > 0.0) || !pixel_size.is_finite() {
            return Err(Error::Geometry(format!("pixel size {} must be positive", pixel_size)));
        }
        Ok(Self { n, pixel_size })
    }

    /// Grid of side `n` spanning [`DEFAULT_FIELD_OF_VIEW`].
    pub fn with_default_fov(n: usize) -> Result<Self> {
        Self::new(n, DEFAULT_FIELD_OF_VIEW / n as f64)
    }

    pub fn numel(&self) -> usize {
        self.n * self.n
    }

    pub fn width(&self) -> f64 {
        self.n as f64 * self.pixel_size
    }

    /// Physical centre of pixel `(row, col)`; rows run top to bottom (y up).
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let c = (self.n as f64 - 1.0) / 2.0;
        (
            (col as f64 - c) * self.pixel_size,
            (c - row as f64) * self.pixel_size,
        )
    }
}

/// 2D attenuation map.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    grid: ImageGrid,
    data: Tensor,
}

impl Image {
    pub fn new(grid: ImageGrid, data: Vec<f64>) -> Result<Self> {
        let data = Tensor::new(vec![grid.n, grid.n], data)?;
        Ok(Self { grid, data })
    }

    pub(crate) fn from_raw(grid: ImageGrid, data: Vec<f64>) -> Self {
        Self {
            grid,
            data: Tensor::from_raw(vec![grid.n, grid.n], data),
        }
    }

    pub fn zeros(grid: ImageGrid) -> Self {
        Self::from_raw(grid, vec![0.0; grid.numel()])
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn n(&self) -> usize {
        self.grid.n
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.data.data_mut()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data.into_data()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data.data()[row * self.grid.n + col]
    }
}

/// Post-log line integrals, `[n_views × n_det]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    n_views: usize,
    n_det: usize,
    data: Tensor,
}

impl Sinogram {
    pub fn new(n_views: usize, n_det: usize, data: Vec<f64>) -> Result<Self> {
        let data = Tensor::new(vec![n_views, n_det], data)?;
        Ok(Self {
            n_views,
            n_det,
            data,
        })
    }

    pub(crate) fn from_raw(n_views: usize, n_det: usize, data: Vec<f64>) -> Self {
        Self {
            n_views,
            n_det,
            data: Tensor::from_raw(vec![n_views, n_det], data),
        }
    }

    pub fn zeros_for(g: &ScanGeometry) -> Self {
        Self::from_raw(g.n_views(), g.n_det, vec![0.0; g.n_rays()])
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn n_det(&self) -> usize {
        self.n_det
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.data.data_mut()
    }

    pub fn view(&self, k: usize) -> &[f64] {
        &self.data.data()[k * self.n_det..(k + 1) * self.n_det]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data.into_data()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Beam {
    Parallel,
    Fan,
}

impl std::str::FromStr for Beam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Beam::Parallel),
            "fan" => Ok(Beam::Fan),
            other => Err(Error::Config(format!("unknown beam type '{}'", other))),
        }
    }
}

impl std::fmt::Display for Beam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Beam::Parallel => "parallel",
            Beam::Fan => "fan",
        })
    }
}

/// Fan-beam source and detector distances from the rotation centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FanDistances {
    pub src_to_center: f64,
    pub det_to_center: f64,
}

impl FanDistances {
    /// Source at twice the image half-width, detector mirrored on the far side.
    pub fn default_for(grid: &ImageGrid) -> Self {
        let d = grid.width();
        Self {
            src_to_center: d,
            det_to_center: d,
        }
    }
}

/// Full description of an acquisition; defines the projector `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanGeometry {
    pub beam: Beam,
    pub angles: Vec<f64>,
    pub n_det: usize,
    pub det_pitch: f64,
    /// Zero for parallel beam.
    pub src_to_center: f64,
    /// Zero for parallel beam.
    pub det_to_center: f64,
    pub grid: ImageGrid,
}

/// Detector count scaled from 800 elements at 512 pixels.
pub fn default_detector_count(n: usize) -> usize {
    ((800 * n) as f64 / 512.0).ceil().max(2.0) as usize
}

/// Equispaced full-circle acquisition.
///
/// `n_det` defaults to [`default_detector_count`]; fan distances default to
/// [`FanDistances::default_for`]. The detector pitch is chosen so the whole
/// image (including the half-pixel interpolation margin) is covered.
pub fn make_geometry(
    beam: Beam,
    n_views: usize,
    n_det: Option<usize>,
    grid: ImageGrid,
    distances: Option<FanDistances>,
) -> Result<ScanGeometry> {
    if n_views == 0 {
        return Err(Error::Geometry("at least one view is required".into()));
    }
    let n_det = n_det.unwrap_or_else(|| default_detector_count(grid.n));
    let angles = (0..n_views)
        .map(|k| 2.0 * PI * k as f64 / n_views as f64)
        .collect();
    let (src, det) = match beam {
        Beam::Parallel => (0.0, 0.0),
        Beam::Fan => {
            let d = distances.unwrap_or_else(|| FanDistances::default_for(&grid));
            (d.src_to_center, d.det_to_center)
        }
    };
    let mut g = ScanGeometry {
        beam,
        angles,
        n_det,
        det_pitch: 1.0,
        src_to_center: src,
        det_to_center: det,
        grid,
    };
    g.det_pitch = g.covering_pitch();
    g.validate()?;
    Ok(g)
}

impl ScanGeometry {
    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn n_rays(&self) -> usize {
        self.angles.len() * self.n_det
    }

    pub fn with_det_pitch(mut self, pitch: f64) -> Result<Self> {
        self.det_pitch = pitch;
        self.validate()?;
        Ok(self)
    }

    /// Radius of the disc outside which no pixel has interpolation support.
    fn support_radius(&self) -> f64 {
        std::f64::consts::SQRT_2 * (self.grid.n as f64 + 1.0) / 2.0 * self.grid.pixel_size
    }

    /// Smallest pitch whose detector covers the whole image support.
    fn covering_pitch(&self) -> f64 {
        let r = self.support_radius();
        let half_width = match self.beam {
            Beam::Parallel => r,
            Beam::Fan => {
                let rs = self.src_to_center;
                let sin_a = (r / rs).min(0.999);
                let tan_a = sin_a / (1.0 - sin_a * sin_a).sqrt();
                (rs + self.det_to_center) * tan_a
            }
        };
        let pitch = 2.0 * half_width / (self.n_det as f64 - 1.0).max(1.0);
        match self.beam {
            Beam::Parallel => pitch.max(self.grid.pixel_size),
            Beam::Fan => pitch,
        }
    }

    /// Detector spacing as seen at the rotation centre.
    pub fn effective_pitch(&self) -> f64 {
        match self.beam {
            Beam::Parallel => self.det_pitch,
            Beam::Fan => {
                self.det_pitch * self.src_to_center / (self.src_to_center + self.det_to_center)
            }
        }
    }

    /// Offset of detector element `j` from the detector centre.
    pub fn det_offset(&self, j: usize) -> f64 {
        (j as f64 - (self.n_det as f64 - 1.0) / 2.0) * self.det_pitch
    }

    pub fn validate(&self) -> Result<()> {
        if self.angles.is_empty() {
            return Err(Error::Geometry("angle list is empty".into()));
        }
        if self.n_det < 2 {
            return Err(Error::Geometry(format!("{} detectors; need at least 2", self.n_det)));
        }
        if !(self.det_pitch > 0.0) || !self.det_pitch.is_finite() {
            return Err(Error::Geometry(format!("detector pitch {} must be positive", self.det_pitch)));
        }
        let two_pi = 2.0 * PI;
        if self.angles.iter().any(|&a| !(0.0..two_pi).contains(&a)) {
            return Err(Error::Geometry("view angles must lie in [0, 2π)".into()));
        }
        if self.angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Geometry("view angles must be strictly increasing".into()));
        }
        ImageGrid::new(self.grid.n, self.grid.pixel_size)?;
        if self.beam == Beam::Fan {
            let min_src = self.grid.width() / std::f64::consts::SQRT_2;
            if !(self.src_to_center > min_src) {
                return Err(Error::Geometry(format!(
                    "source distance {} lies inside the image (needs > {:.4})",
                    self.src_to_center, min_src
                )));
            }
            if !(self.det_to_center >= 0.0) {
                return Err(Error::Geometry("detector distance must be nonnegative".into()));
            }
        }
        Ok(())
    }

    pub fn check_image(&self, img: &Image) -> Result<()> {
        if img.grid() != self.grid {
            return Err(Error::Geometry(format!(
                "image grid {}x{} @ {} does not match geometry grid {}x{} @ {}",
                img.n(),
                img.n(),
                img.grid().pixel_size,
                self.grid.n,
                self.grid.n,
                self.grid.pixel_size
            )));
        }
        Ok(())
    }

    pub fn check_sinogram(&self, s: &Sinogram) -> Result<()> {
        if s.n_views() != self.n_views() || s.n_det() != self.n_det {
            return Err(Error::Geometry(format!(
                "sinogram {}x{} does not match geometry {}x{}",
                s.n_views(),
                s.n_det(),
                self.n_views(),
                self.n_det
            )));
        }
        Ok(())
    }
}
