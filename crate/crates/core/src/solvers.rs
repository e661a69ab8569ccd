//! Soft-thresholding, conjugate gradients and the HQS-CG reconstructor.
//!
//! The split model is
//!
//! ```text
//! ½‖Pu − Y‖² + λ‖z‖₁ + ½ Σᵢ γᵢ ‖Wᵢu − zᵢ‖²
//! ```
//!
//! minimised alternately: `u` by CG on `(PᵀP + Σγᵢ WᵢᵀWᵢ) u = PᵀY + Σγᵢ Wᵢᵀzᵢ`,
//! then `z = T_t(Wu)` with the soft-threshold `T`.
//!
//! The arithmetic in [`cg_solve`] and [`hqs_cg`] is ordered so that the
//! differentiable replay in `network` reproduces it bit for bit.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::autodiff::shrink;
use crate::error::{Error, Result};
use crate::framelet::{w_apply_raw, w_adjoint_weighted_raw, FrameCoeffs, HIGHPASS_CHANNELS};
use crate::geometry::{Image, Projector, Sinogram};
use crate::linear::LinearOperator;
use crate::tensor::{dot, norm, Tensor};

/// How the per-layer soft-threshold level is derived from the schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ThresholdMode {
    /// `t = λ_k / γ_k`, the exact `z`-minimiser of the split objective.
    #[default]
    Ratio,
    /// `t = λ_k`: the schedule drives the threshold directly.
    Direct,
}

impl FromStr for ThresholdMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(Self::Ratio),
            "direct" => Ok(Self::Direct),
            other => Err(Error::Config(format!("unknown threshold mode '{}'", other))),
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ratio => "ratio",
            Self::Direct => "direct",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HqsParams {
    pub lambda0: f64,
    pub d_lambda: f64,
    pub lambda_floor: f64,
    pub gamma0: f64,
    pub d_gamma: f64,
    pub gamma_floor: f64,
    /// Outer iteration cap.
    pub k_max: usize,
    /// CG iterations per outer step.
    pub inner_iters: usize,
    /// CG stops early once `‖r‖ ≤ cg_tol·‖b‖`.
    pub cg_tol: f64,
    /// Outer stop: `‖u⁺ − u‖ / ‖u⁺‖ ≤ rel_tol`.
    pub rel_tol: f64,
    pub early_stop: bool,
    pub threshold_mode: ThresholdMode,
}

impl Default for HqsParams {
    fn default() -> Self {
        Self {
            lambda0: 0.005,
            d_lambda: 0.0008,
            lambda_floor: 1e-6,
            gamma0: 0.01,
            d_gamma: 0.02,
            gamma_floor: 1e-4,
            k_max: 200,
            inner_iters: 5,
            cg_tol: 0.0,
            rel_tol: 3e-4,
            early_stop: true,
            threshold_mode: ThresholdMode::Ratio,
        }
    }
}

impl HqsParams {
    /// Settings for a fixed number of layers with no early stop.
    pub fn truncated(layers: usize, inner_iters: usize) -> Self {
        Self {
            k_max: layers,
            inner_iters,
            early_stop: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_floor", self.lambda_floor),
            ("gamma_floor", self.gamma_floor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{} must be positive, got {}", name, v)));
            }
        }
        let nonneg = [
            ("lambda0", self.lambda0),
            ("d_lambda", self.d_lambda),
            ("gamma0", self.gamma0),
            ("d_gamma", self.d_gamma),
            ("cg_tol", self.cg_tol),
            ("rel_tol", self.rel_tol),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{} must be finite and >= 0, got {}", name, v)));
            }
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        Ok(())
    }

    /// `(λ_k, γ_k)` for outer step `k` (zero-based).
    pub fn schedule(&self, k: usize) -> (f64, f64) {
        schedule(self, k)
    }

    pub fn threshold(&self, k: usize) -> f64 {
        let (l, g) = self.schedule(k);
        match self.threshold_mode {
            ThresholdMode::Ratio => l / g,
            ThresholdMode::Direct => l,
        }
    }

    /// Weight on `‖z‖₁` for which [`threshold`](Self::threshold) is the exact
    /// `z`-minimiser at step `k`.
    pub fn l1_weight(&self, k: usize) -> f64 {
        let (_, g) = self.schedule(k);
        self.threshold(k) * g
    }
}

pub fn schedule(p: &HqsParams, k: usize) -> (f64, f64) {
    let k = k as f64;
    (
        (p.lambda0 - k * p.d_lambda).max(p.lambda_floor),
        (p.gamma0 - k * p.d_gamma).max(p.gamma_floor),
    )
}

/// Channelwise soft-threshold. `t` holds one level per highpass channel or a
/// single shared level.
pub fn soft_threshold(c: &FrameCoeffs, t: &[f64]) -> Result<FrameCoeffs> {
    if t.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid(format!("negative or NaN threshold in {:?}", t)));
    }
    if t.len() != 1 && t.len() != HIGHPASS_CHANNELS {
        return Err(Error::shape(format!(
            "expected 1 or {} thresholds, got {}",
            HIGHPASS_CHANNELS,
            t.len()
        )));
    }
    let plane = c.n() * c.n();
    let data = c
        .channels
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| shrink(v, if t.len() == 1 { t[0] } else { t[i / plane] }))
        .collect();
    Ok(FrameCoeffs {
        channels: Tensor::from_raw(c.channels.shape().to_vec(), data),
        lowpass: c.lowpass.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    /// Productive iterations performed.
    pub iterations: usize,
    /// `‖r‖` at the start and after every iteration.
    pub residual_norms: Vec<f64>,
}

/// Conjugate gradients on a symmetric positive semidefinite `a`, at most
/// `max_iter` steps from `x0`, stopping once `‖r‖ ≤ tol·‖b‖`. A zero
/// curvature direction also ends the run.
pub fn cg_solve(
    a: &dyn LinearOperator,
    b: &[f64],
    x0: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<CgOutcome> {
    let n = a.input_len();
    if b.len() != n || x0.len() != n || a.output_len() != n {
        return Err(Error::shape(format!(
            "CG needs a square operator matching b ({}) and x0 ({}), operator is {}→{}",
            b.len(),
            x0.len(),
            n,
            a.output_len()
        )));
    }
    let b_norm = norm(b);
    let mut x = x0.to_vec();
    let ax = a.apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut residual_norms = vec![rr.sqrt()];
    let mut iterations = 0;
    for _ in 0..max_iter {
        if rr.sqrt() <= tol * b_norm {
            break;
        }
        let ap = a.apply(&p);
        let pap = dot(&p, &ap);
        if pap == 0.0 {
            break;
        }
        let alpha = rr / pap;
        if !alpha.is_finite() || pap < 0.0 {
            return Err(Error::NonFinite(format!(
                "CG step size {} (pᵀAp = {}); operator is not positive semidefinite or data are corrupt",
                alpha, pap
            )));
        }
        for i in 0..n {
            x[i] = x[i] + alpha * p[i];
        }
        for i in 0..n {
            r[i] = r[i] - alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        iterations += 1;
        residual_norms.push(rr.sqrt());
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("CG iterate left the finite range".into()));
    }
    Ok(CgOutcome {
        x,
        iterations,
        residual_norms,
    })
}

/// `PᵀP + Σᵢ γᵢ WᵢᵀWᵢ`, self-adjoint.
pub struct HqsSystem {
    projector: Arc<Projector>,
    gammas: [f64; HIGHPASS_CHANNELS],
}

impl HqsSystem {
    pub fn new(projector: Arc<Projector>, gammas: [f64; HIGHPASS_CHANNELS]) -> Self {
        Self { projector, gammas }
    }

    fn n(&self) -> usize {
        self.projector.geometry().grid.n
    }
}

impl LinearOperator for HqsSystem {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.n(), self.n()]
    }
    fn output_shape(&self) -> Vec<usize> {
        vec![self.n(), self.n()]
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = self.projector.back_raw(&self.projector.forward_raw(x));
        let reg = w_adjoint_weighted_raw(&w_apply_raw(x, n), n, &self.gammas);
        for (o, r) in out.iter_mut().zip(reg) {
            *o += r;
        }
        out
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.apply(y)
    }
}

/// Split objective at `(u, z)` with one `γ` shared by all channels.
pub fn objective(
    projector: &Projector,
    y: &Sinogram,
    u: &[f64],
    z: &[f64],
    l1_weight: f64,
    gamma: f64,
) -> f64 {
    let n = projector.geometry().grid.n;
    let pu = projector.forward_raw(u);
    let fid: f64 = pu.iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let wu = w_apply_raw(u, n);
    let l1: f64 = z.iter().map(|v| v.abs()).sum();
    let coupling: f64 = wu.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * fid + l1_weight * l1 + 0.5 * gamma * coupling
}

#[derive(Clone, Debug)]
pub struct HqsRun {
    pub image: Image,
    /// `u¹, u², …` after every outer step.
    pub iterates: Vec<Image>,
    /// Split objective at `(uᵏ, zᵏ)` after every outer step, evaluated with
    /// that step's `λ` and `γ`.
    pub objective: Vec<f64>,
    pub converged: bool,
}

/// HQS-CG from an FBP start. `u0` overrides the starting image.
pub fn hqs_cg(y: &Sinogram, projector: &Arc<Projector>, p: &HqsParams) -> Result<HqsRun> {
    let g = projector.geometry();
    let u0 = crate::analytic::fbp(y, g)?;
    hqs_cg_from(y, projector, p, u0)
}

pub fn hqs_cg_from(
    y: &Sinogram,
    projector: &Arc<Projector>,
    p: &HqsParams,
    u0: Image,
) -> Result<HqsRun> {
    p.validate()?;
    let g = projector.geometry();
    g.check_sinogram(y)?;
    g.check_image(&u0)?;
    let grid = g.grid;
    let n = grid.n;
    let pty = projector.back_raw(y.data());
    let mut u = u0.into_data();
    let mut z = w_apply_raw(&u, n);
    let mut iterates = Vec::new();
    let mut objective_trace = Vec::new();
    let mut converged = false;

    for k in 0..p.k_max {
        let (_, gamma) = p.schedule(k);
        let gammas = [gamma; HIGHPASS_CHANNELS];
        let t = p.threshold(k);
        let syn = w_adjoint_weighted_raw(&z, n, &gammas);
        let b: Vec<f64> = pty.iter().zip(&syn).map(|(a, c)| a + c).collect();
        let system = HqsSystem::new(Arc::clone(projector), gammas);
        let next = cg_solve(&system, &b, &u, p.inner_iters, p.cg_tol)?.x;
        z = w_apply_raw(&next, n).into_iter().map(|v| shrink(v, t)).collect();

        let diff: f64 = next
            .iter()
            .zip(&u)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let size = norm(&next);
        u = next;
        objective_trace.push(objective(projector, y, &u, &z, p.l1_weight(k), gamma));
        iterates.push(Image::from_raw(grid, u.clone()));
        if p.early_stop && (diff == 0.0 || diff <= p.rel_tol * size) {
            converged = true;
            break;
        }
    }
    Ok(HqsRun {
        image: Image::from_raw(grid, u),
        iterates,
        objective: objective_trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::fbp;
    use crate::geometry::{make_geometry, Beam, ImageGrid};
    use crate::linear::{adjoint_mismatch, DenseMatrix, Identity};
    use crate::metrics::psnr;
    use crate::simulation::shepp_logan;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_values() {
        let p = HqsParams::default();
        assert_eq!(p.schedule(0), (0.005, 0.01));
        let expect = [0.0042, 0.0034, 0.0026, 0.0018, 0.0010];
        for (k, e) in expect.iter().enumerate() {
            let (l, g) = p.schedule(k + 1);
            assert!((l - e).abs() < 1e-15, "k={} λ={}", k + 1, l);
            assert_eq!(g, p.gamma_floor);
        }
        assert_eq!(p.schedule(50).0, p.lambda_floor);
        assert!((p.threshold(0) - 0.5).abs() < 1e-15);
        let direct = HqsParams {
            threshold_mode: ThresholdMode::Direct,
            ..p
        };
        assert_eq!(direct.threshold(0), 0.005);
    }

    fn coeffs(values: Vec<f64>) -> FrameCoeffs {
        let n = 1;
        FrameCoeffs {
            channels: Tensor::new(vec![values.len() / (n * n), n, n], values).unwrap(),
            lowpass: None,
        }
    }

    #[test]
    fn soft_threshold_formula() {
        let c = coeffs(vec![1.2, -0.3, -0.9, 0.5, 0.0, 2.0, -2.0, 0.1]);
        let t0 = soft_threshold(&c, &[0.0]).unwrap();
        assert_eq!(t0.channels, c.channels);
        let t = soft_threshold(&c, &[0.5]).unwrap();
        let d = t.channels.data();
        assert!((d[0] - 0.7).abs() < 1e-15);
        assert_eq!(d[1], 0.0);
        assert!((d[2] + 0.4).abs() < 1e-15);
        let per = soft_threshold(&c, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(per.channels.data()[5], 1.0);
        assert_eq!(per.channels.data()[6], -1.0);
        assert!(soft_threshold(&c, &[-0.1]).is_err());
        assert!(soft_threshold(&c, &[0.1, 0.2]).is_err());
    }

    /// `argmin_z λ|z| + ½(z − x)²` over a grid on [−3, 3].
    fn brute_prox(lambda: f64, x: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=60_000 {
            let z = -3.0 + i as f64 * 1e-4;
            let f = lambda * z.abs() + 0.5 * (z - x) * (z - x);
            if f < best.0 {
                best = (f, z);
            }
        }
        best.1
    }

    #[test]
    fn soft_threshold_is_the_l1_prox() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let lambda = rng.random_range(0.0..1.5);
            let x = rng.random_range(-2.5..2.5);
            assert!((shrink(x, lambda) - brute_prox(lambda, x)).abs() <= 1e-4);
        }
    }

    proptest! {
        #[test]
        fn soft_threshold_nonexpansive(
            x in prop::collection::vec(-5.0f64..5.0, 8),
            y in prop::collection::vec(-5.0f64..5.0, 8),
            t in 0.0f64..3.0,
        ) {
            let tx = soft_threshold(&coeffs(x.clone()), &[t]).unwrap();
            let ty = soft_threshold(&coeffs(y.clone()), &[t]).unwrap();
            let d_out: f64 = tx.channels.data().iter().zip(ty.channels.data()).map(|(a, b)| (a - b).powi(2)).sum();
            let d_in: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(d_out.sqrt() <= d_in.sqrt() + 1e-12);
        }
    }

    fn random_spd(dim: usize, shift: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
        let m: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = DenseMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                let mut s = 0.0;
                for k in 0..dim {
                    s += m[k * dim + i] * m[k * dim + j];
                }
                a.set(i, j, s + if i == j { shift } else { 0.0 });
            }
        }
        a
    }

    fn direct_solve(a: &DenseMatrix, b: &[f64]) -> Vec<f64> {
        let n = a.rows();
        let m = DMatrix::from_row_slice(n, n, a.data());
        m.lu().solve(&DVector::from_column_slice(b)).unwrap().as_slice().to_vec()
    }

    #[test]
    fn cg_identity_one_step() {
        let op = Identity::new(&[7]);
        let b: Vec<f64> = (0..7).map(|i| i as f64 - 2.5).collect();
        let out = cg_solve(&op, &b, &[0.0; 7], 10, 0.0).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.x, b);
    }

    #[test]
    fn cg_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_spd(12, 12.0, &mut rng);
        let b: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = cg_solve(&a, &b, &[0.0; 12], 12, 0.0).unwrap();
        let x = direct_solve(&a, &b);
        let err = norm(&out.x.iter().zip(&x).map(|(p, q)| p - q).collect::<Vec<_>>()) / norm(&x);
        assert!(err < 1e-8, "{}", err);
        for w in out.residual_norms.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn cg_exact_start_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_spd(6, 6.0, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = a.matvec(&x);
        let out = cg_solve(&a, &b, &x, 10, 1e-10).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x, x);
    }

    #[test]
    fn cg_energy_error_decreases_on_ill_conditioned_systems() {
        // ‖r‖ may grow on badly conditioned systems; the A-norm error never does.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let a = random_spd(10, 0.05, &mut rng);
            let b: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x_star = direct_solve(&a, &b);
            let mut prev = f64::INFINITY;
            for l in 0..=10 {
                let x = cg_solve(&a, &b, &[0.0; 10], l, 0.0).unwrap().x;
                let e: Vec<f64> = x.iter().zip(&x_star).map(|(p, q)| p - q).collect();
                let energy = dot(&e, &a.matvec(&e));
                assert!(energy <= prev * (1.0 + 1e-9) + 1e-18);
                prev = energy;
            }
        }
    }

    #[test]
    fn cg_rejects_bad_input() {
        let op = Identity::new(&[3]);
        assert!(cg_solve(&op, &[1.0; 4], &[0.0; 3], 3, 0.0).is_err());
        let mut neg = DenseMatrix::zeros(2, 2);
        neg.set(0, 0, -1.0);
        neg.set(1, 1, -1.0);
        assert!(cg_solve(&neg, &[1.0, 1.0], &[0.0, 0.0], 3, 0.0).is_err());
    }

    fn setup(n: usize, views: usize) -> (Arc<Projector>, Image, Sinogram) {
        let grid = ImageGrid::with_default_fov(n).unwrap();
        let g = make_geometry(Beam::Parallel, views, None, grid, None).unwrap();
        let proj = Arc::new(Projector::new(&g).unwrap());
        let ph = shepp_logan(grid).unwrap();
        let y = proj.forward(&ph).unwrap();
        (proj, ph, y)
    }

    #[test]
    fn system_operator_is_self_adjoint_psd() {
        let grid = ImageGrid::new(12, 1.0).unwrap();
        let g = make_geometry(Beam::Fan, 9, None, grid, None).unwrap();
        let proj = Arc::new(Projector::new(&g).unwrap());
        let sys = HqsSystem::new(proj, [0.3; HIGHPASS_CHANNELS]);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..5 {
            let x: Vec<f64> = (0..144).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..144).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(adjoint_mismatch(&sys, &x, &y) < 1e-12);
            let ax = sys.apply(&x);
            let ay = sys.apply(&y);
            assert!((dot(&ax, &y) - dot(&x, &ay)).abs() < 1e-10 * (1.0 + dot(&ax, &y).abs()));
            assert!(dot(&x, &ax) > 0.0);
        }
    }

    #[test]
    fn zero_sinogram_gives_zero_image() {
        let (proj, _, y) = setup(16, 12);
        let zero = Sinogram::zeros_for(proj.geometry());
        let run = hqs_cg(&zero, &proj, &HqsParams::default()).unwrap();
        assert!(run.image.data().iter().all(|&v| v == 0.0));
        assert!(run.converged);
        let _ = y;
    }

    #[test]
    fn hqs_improves_on_fbp() {
        let (proj, ph, y) = setup(64, 60);
        let base = psnr(&fbp(&y, proj.geometry()).unwrap(), &ph, None).unwrap();
        let p = HqsParams {
            inner_iters: 10,
            ..HqsParams::default()
        };
        let run = hqs_cg(&y, &proj, &p).unwrap();
        let got = psnr(&run.image, &ph, None).unwrap();
        assert!(got > base, "hqs {} vs fbp {}", got, base);
    }

    #[test]
    fn objective_nonincreasing_with_fixed_weights() {
        let (proj, _, y) = setup(32, 30);
        let p = HqsParams {
            d_lambda: 0.0,
            d_gamma: 0.0,
            k_max: 8,
            inner_iters: 200,
            cg_tol: 1e-12,
            early_stop: false,
            ..HqsParams::default()
        };
        let run = hqs_cg(&y, &proj, &p).unwrap();
        for w in run.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "{:?}", run.objective);
        }
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let (proj, _, y) = setup(32, 24);
        let p = HqsParams::truncated(4, 5);
        let run_in = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| hqs_cg(&y, &proj, &p).unwrap().image)
        };
        let a = run_in(1);
        let b = run_in(4);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_runs_exactly_k_layers() {
        let (proj, _, y) = setup(16, 10);
        let run = hqs_cg(&y, &proj, &HqsParams::truncated(6, 3)).unwrap();
        assert_eq!(run.iterates.len(), 6);
        assert!(!run.converged);
    }
}
