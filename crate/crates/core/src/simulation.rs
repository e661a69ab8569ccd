//! Ellipse phantoms and physics-based noisy sinograms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Image, ImageGrid, Projector, ScanGeometry, Sinogram};

/// Ellipse in normalised coordinates: the image spans `[-1, 1]²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Counter-clockwise rotation in radians.
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Sum of ellipse indicator functions, clipped to `[0, 1]` when rendered.
#[derive(Clone, Debug, PartialEq)]
pub struct EllipsePhantom {
    pub ellipses: Vec<Ellipse>,
}

impl EllipsePhantom {
    /// Unclipped intensity at a normalised point.
    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        self.ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.intensity)
            .sum()
    }

    /// Point-samples every pixel centre.
    pub fn render(&self, grid: ImageGrid) -> Image {
        let half = grid.width() / 2.0;
        let n = grid.n;
        let mut data = vec![0.0; n * n];
        data.par_chunks_mut(n).enumerate().for_each(|(row, out)| {
            for (col, px) in out.iter_mut().enumerate() {
                let (x, y) = grid.pixel_center(row, col);
                *px = self.value_at(x / half, y / half).clamp(0.0, 1.0);
            }
        });
        Image::from_raw(grid, data)
    }

    /// Same phantom rotated counter-clockwise about the origin.
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            ellipses: self
                .ellipses
                .iter()
                .map(|e| Ellipse {
                    cx: c * e.cx - s * e.cy,
                    cy: s * e.cx + c * e.cy,
                    angle: e.angle + angle,
                    ..*e
                })
                .collect(),
        }
    }

    /// The ten-ellipse Shepp-Logan head with the contrast-enhanced
    /// intensities that keep values inside `[0, 1]`.
    pub fn shepp_logan() -> Self {
        const TABLE: [[f64; 6]; 10] = [
            // intensity, a, b, cx, cy, angle (degrees)
            [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
            [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
            [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
            [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
            [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
            [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
            [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
            [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
            [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
            [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
        ];
        Self {
            ellipses: TABLE
                .iter()
                .map(|r| Ellipse {
                    intensity: r[0],
                    a: r[1],
                    b: r[2],
                    cx: r[3],
                    cy: r[4],
                    angle: r[5].to_radians(),
                })
                .collect(),
        }
    }

    /// 3 to 8 ellipses drawn from `seed`: a soft-tissue body followed by
    /// smaller inclusions of either sign.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(3..=8);
        let mut ellipses = Vec::with_capacity(count);
        ellipses.push(Ellipse {
            cx: rng.random_range(-0.05..0.05),
            cy: rng.random_range(-0.05..0.05),
            a: rng.random_range(0.55..0.85),
            b: rng.random_range(0.55..0.85),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity: rng.random_range(0.15..0.35),
        });
        for _ in 1..count {
            let r: f64 = rng.random_range(0.0..0.45);
            let t: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            ellipses.push(Ellipse {
                cx: r * t.cos(),
                cy: r * t.sin(),
                a: rng.random_range(0.04..0.3),
                b: rng.random_range(0.04..0.3),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                intensity: rng.random_range(-0.15..0.6),
            });
        }
        Self { ellipses }
    }
}

fn check_size(grid: &ImageGrid) -> Result<()> {
    if grid.n < 16 {
        return Err(Error::invalid(format!("phantom side {} < 16", grid.n)));
    }
    Ok(())
}

pub fn shepp_logan(grid: ImageGrid) -> Result<Image> {
    check_size(&grid)?;
    Ok(EllipsePhantom::shepp_logan().render(grid))
}

pub fn random_phantom(grid: ImageGrid, seed: u64) -> Result<Image> {
    check_size(&grid)?;
    Ok(EllipsePhantom::random(seed).render(grid))
}

/// Transmission noise: Poisson photon counts at `i0` incident photons per
/// bin plus zero-mean Gaussian electronic noise of std `sigma_e` (counts).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub i0: f64,
    pub sigma_e: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(i0: f64, sigma_e: f64, seed: u64) -> Result<Self> {
        if !(i0 > 0.0) || !i0.is_finite() {
            return Err(Error::invalid(format!("photon intensity {} must be positive", i0)));
        }
        if !(sigma_e >= 0.0) || !sigma_e.is_finite() {
            return Err(Error::invalid(format!("electronic noise std {} must be >= 0", sigma_e)));
        }
        Ok(Self { i0, sigma_e, seed })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Noise {
    /// The `I0 → ∞` limit: clean line integrals.
    Noiseless,
    Poisson(NoiseSpec),
}

/// Mean above which Poisson counts use the normal approximation.
pub const NORMAL_APPROX_MEAN: f64 = 1e3;

/// Poisson draw by CDF inversion, walking log-probabilities so large means do
/// not underflow.
fn poisson_inversion(mean: f64, u: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    let ln_mean = mean.ln();
    let mut log_p = -mean;
    let mut cdf = log_p.exp();
    let mut k = 0u64;
    let cap = (mean + 40.0 * mean.sqrt() + 40.0) as u64;
    while cdf < u && k < cap {
        k += 1;
        log_p += ln_mean - (k as f64).ln();
        cdf += log_p.exp();
    }
    k as f64
}

/// Photon count of one detector bin. The random stream is keyed by
/// `(seed, bin)` so bins can be simulated in any order.
pub fn sample_counts(mean: f64, sigma_e: f64, seed: u64, bin: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(bin);
    let photons = if mean > NORMAL_APPROX_MEAN {
        let z: f64 = rng.sample(StandardNormal);
        mean + mean.sqrt() * z
    } else {
        let u: f64 = rng.random();
        poisson_inversion(mean, u)
    };
    if sigma_e > 0.0 {
        let e: f64 = rng.sample(StandardNormal);
        photons + sigma_e * e
    } else {
        photons
    }
}

/// Post-log sinogram `ln(I0 / max(N, 1))` of `img`.
pub fn simulate_sinogram(img: &Image, projector: &Projector, noise: Noise) -> Result<Sinogram> {
    if img.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("phantom has negative attenuation"));
    }
    let clean = projector.forward(img)?;
    let ns = match noise {
        Noise::Noiseless => return Ok(clean),
        Noise::Poisson(ns) => ns,
    };
    let counts: Vec<f64> = clean
        .data()
        .par_iter()
        .enumerate()
        .map(|(bin, &y)| sample_counts(ns.i0 * (-y).exp(), ns.sigma_e, ns.seed, bin as u64))
        .collect();
    let clipped = counts.iter().filter(|&&c| c < 1.0).count();
    if 2 * clipped > counts.len() {
        return Err(Error::invalid(format!(
            "{} of {} bins received fewer than one photon at I0 = {}",
            clipped,
            counts.len(),
            ns.i0
        )));
    }
    let data = counts.iter().map(|&c| (ns.i0 / c.max(1.0)).ln()).collect();
    let g: &ScanGeometry = projector.geometry();
    Ok(Sinogram::from_raw(g.n_views(), g.n_det, data))
}
