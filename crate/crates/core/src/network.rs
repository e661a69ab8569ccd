//! The unrolled reconstruction network: truncated HQS-CG whose CG warm start
//! in every layer is refined by a small residual CNN,
//!
//! ```text
//! u^{k+1,0} = u^{k,L} + CNN_k(u^{k,L})
//! ```
//!
//! Everything is recorded on an autodiff [`Tape`], including the unrolled CG
//! iterations, so training backpropagates through the solver. With all-zero
//! CNN weights the forward pass reproduces [`crate::solvers::hqs_cg`] bit for
//! bit.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analytic::fbp;
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::framelet::{FrameletOp, WeightedSynthesisOp, HIGHPASS_CHANNELS};
use crate::geometry::{Image, Projector, Sinogram};
use crate::io;
use crate::metrics::{dynamic_range, GaussianValid, K1, K2};
use crate::simulation::{simulate_sinogram, Noise};
use crate::solvers::{HqsParams, HqsSystem, ThresholdMode};
use crate::tensor::{norm, Tensor};

/// Shape of one layer's CNN: `depth` 3×3 convolutions `1 → width → … → 1`
/// with a PReLU after all but the last.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitializerSpec {
    pub depth: usize,
    pub width: usize,
    pub kernel: usize,
    /// One weight set reused by every layer.
    pub shared: bool,
}

impl Default for InitializerSpec {
    fn default() -> Self {
        Self {
            depth: 6,
            width: 8,
            kernel: 3,
            shared: false,
        }
    }
}

impl InitializerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.width < 1 {
            return Err(Error::Config(format!(
                "initializer depth {} and width {} must be positive",
                self.depth, self.width
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    fn channels(&self, i: usize) -> (usize, usize) {
        let c_in = if i == 0 { 1 } else { self.width };
        let c_out = if i + 1 == self.depth { 1 } else { self.width };
        (c_in, c_out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    /// `[c_out × c_in × k × k]`
    pub kernel: Tensor,
    /// `[c_out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub convs: Vec<ConvWeights>,
    /// One `[width]` slope vector per hidden activation.
    pub slopes: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitializerWeights {
    pub spec: InitializerSpec,
    /// One entry per unrolled layer, or a single entry when `spec.shared`.
    pub layers: Vec<LayerWeights>,
}

pub const PRELU_INIT: f64 = 0.25;

impl InitializerWeights {
    /// All-zero weights and slopes: every CNN outputs zero.
    pub fn zeros(spec: InitializerSpec, layers: usize) -> Result<Self> {
        spec.validate()?;
        let count = if spec.shared { 1 } else { layers };
        let k = spec.kernel;
        let layers = (0..count)
            .map(|_| LayerWeights {
                convs: (0..spec.depth)
                    .map(|i| {
                        let (ci, co) = spec.channels(i);
                        ConvWeights {
                            kernel: Tensor::zeros(&[co, ci, k, k]),
                            bias: Tensor::zeros(&[co]),
                        }
                    })
                    .collect(),
                slopes: (1..spec.depth).map(|_| Tensor::zeros(&[spec.width])).collect(),
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// Kernels uniform in `±1/√fan_in`, zero biases, PReLU slopes 0.25 and a
    /// zero final convolution, so the network starts as plain HQS-CG.
    pub fn init(spec: InitializerSpec, layers: usize, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(spec, layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut w.layers {
            let last = layer.convs.len() - 1;
            for conv in &mut layer.convs[..last] {
                let s = conv.kernel.shape();
                let bound = 1.0 / ((s[1] * s[2] * s[3]) as f64).sqrt();
                for v in conv.kernel.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
            for a in &mut layer.slopes {
                a.data_mut().fill(PRELU_INIT);
            }
        }
        Ok(w)
    }

    pub fn for_layer(&self, k: usize) -> &LayerWeights {
        if self.spec.shared {
            &self.layers[0]
        } else {
            &self.layers[k]
        }
    }

    /// Every trainable tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            for c in &l.convs {
                out.push(&c.kernel);
                out.push(&c.bias);
            }
            out.extend(l.slopes.iter());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            for c in &mut l.convs {
                out.push(&mut c.kernel);
                out.push(&mut c.bias);
            }
            out.extend(l.slopes.iter_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    /// Checks that the layer count and every tensor shape match `spec`.
    pub fn check(&self, layers: usize) -> Result<()> {
        let reference = Self::zeros(self.spec, layers)?;
        if reference.layers.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "weights hold {} layer sets, configuration needs {}",
                self.layers.len(),
                reference.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&reference.layers) {
            if a.convs.len() != b.convs.len() || a.slopes.len() != b.slopes.len() {
                return Err(Error::shape("initializer depth does not match its spec"));
            }
        }
        for (a, b) in self.tensors().iter().zip(reference.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "weight tensor {:?} where {:?} is expected",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaInvConfig {
    /// `k_max` is the number of unrolled layers, `inner_iters` the CG steps
    /// per layer.
    pub hqs: HqsParams,
    pub initializer: InitializerSpec,
    pub mu1: f64,
    pub mu2: f64,
}

impl Default for MetaInvConfig {
    fn default() -> Self {
        Self {
            hqs: HqsParams::truncated(6, 5),
            initializer: InitializerSpec::default(),
            mu1: 1.1,
            mu2: 1.0,
        }
    }
}

impl MetaInvConfig {
    pub fn layers(&self) -> usize {
        self.hqs.k_max
    }

    pub fn validate(&self) -> Result<()> {
        self.hqs.validate()?;
        self.initializer.validate()?;
        if !(self.mu1 >= 0.0 && self.mu2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got mu1={} mu2={}",
                self.mu1, self.mu2
            )));
        }
        Ok(())
    }
}

/// Tape handles for one layer's weights.
#[derive(Clone, Debug)]
pub struct LayerNodes {
    convs: Vec<(NodeId, NodeId)>,
    slopes: Vec<NodeId>,
}

/// Tape handles for all weights, in [`InitializerWeights::tensors`] order.
#[derive(Clone, Debug)]
pub struct WeightNodes {
    layers: Vec<LayerNodes>,
    shared: bool,
}

impl WeightNodes {
    /// Records the weights as parameters (`trainable`) or constants.
    pub fn record(tape: &mut Tape, w: &InitializerWeights, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = w
            .layers
            .iter()
            .map(|l| LayerNodes {
                convs: l.convs.iter().map(|c| (leaf(&c.kernel), leaf(&c.bias))).collect(),
                slopes: l.slopes.iter().map(&mut leaf).collect(),
            })
            .collect();
        Self {
            layers,
            shared: w.spec.shared,
        }
    }

    fn for_layer(&self, k: usize) -> &LayerNodes {
        if self.shared {
            &self.layers[0]
        } else {
            &self.layers[k]
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for l in &self.layers {
            for &(k, b) in &l.convs {
                out.push(k);
                out.push(b);
            }
            out.extend(l.slopes.iter().copied());
        }
        out
    }
}

/// `u + CNN(u)` for an `[n × n]` node.
pub fn cg_init_forward(tape: &mut Tape, u: NodeId, w: &LayerNodes) -> Result<NodeId> {
    let shape = tape.value(u).shape().to_vec();
    let &[h, wd] = shape.as_slice() else {
        return Err(Error::shape(format!("initializer expects an image, got {:?}", shape)));
    };
    let mut x = tape.reshape(u, vec![1, h, wd])?;
    let last = w.convs.len() - 1;
    for (i, &(k, b)) in w.convs.iter().enumerate() {
        x = tape.conv2d(x, k, b)?;
        if i < last {
            x = tape.prelu(x, w.slopes[i])?;
        }
    }
    let delta = tape.reshape(x, shape)?;
    tape.add(u, delta)
}

/// Precomputed per-problem data: `PᵀY` and the FBP start.
pub struct Problem {
    pub projector: Arc<Projector>,
    pub pty: Tensor,
    pub fbp: Image,
}

impl Problem {
    pub fn new(y: &Sinogram, projector: Arc<Projector>) -> Result<Self> {
        let g = projector.geometry();
        g.check_sinogram(y)?;
        let n = g.grid.n;
        let pty = Tensor::from_raw(vec![n, n], projector.back_raw(y.data()));
        let fbp = fbp(y, g)?;
        Ok(Self {
            projector,
            pty,
            fbp,
        })
    }
}

/// Unrolled CG on the tape; same operation order as
/// [`crate::solvers::cg_solve`].
fn cg_on_tape(
    tape: &mut Tape,
    a: Arc<dyn crate::linear::LinearOperator>,
    b: NodeId,
    x0: NodeId,
    iters: usize,
    tol: f64,
) -> Result<NodeId> {
    let b_norm = norm(tape.value(b).data());
    let ax = tape.linear(Arc::clone(&a), x0)?;
    let mut r = tape.sub(b, ax)?;
    let mut p = r;
    let mut x = x0;
    let mut rr = tape.dot(r, r)?;
    for _ in 0..iters {
        if tape.value(rr).item().sqrt() <= tol * b_norm {
            break;
        }
        let ap = tape.linear(Arc::clone(&a), p)?;
        let pap = tape.dot(p, ap)?;
        let pap_v = tape.value(pap).item();
        if pap_v == 0.0 {
            break;
        }
        let alpha = tape.div(rr, pap)?;
        let alpha_v = tape.value(alpha).item();
        if !alpha_v.is_finite() || pap_v < 0.0 {
            return Err(Error::NonFinite(format!(
                "CG step size {} inside the network (pᵀAp = {})",
                alpha_v, pap_v
            )));
        }
        let step = tape.scale_by(p, alpha)?;
        x = tape.add(x, step)?;
        let dr = tape.scale_by(ap, alpha)?;
        r = tape.sub(r, dr)?;
        let rr_new = tape.dot(r, r)?;
        let beta = tape.div(rr_new, rr)?;
        let keep = tape.scale_by(p, beta)?;
        p = tape.add(r, keep)?;
        rr = rr_new;
    }
    Ok(x)
}

/// Runs every layer and returns the `K` layer outputs `u^{1,L}, …, u^{K,L}`.
pub fn metainv_forward(
    tape: &mut Tape,
    problem: &Problem,
    cfg: &MetaInvConfig,
    weights: &WeightNodes,
) -> Result<Vec<NodeId>> {
    cfg.validate()?;
    let p = &cfg.hqs;
    let n = problem.projector.geometry().grid.n;
    let w_op = FrameletOp::arc(n);
    let pty = tape.constant(problem.pty.clone());
    let mut u = tape.constant(problem.fbp.tensor().clone());
    let mut z = tape.linear(Arc::clone(&w_op), u)?;
    let mut outputs = Vec::with_capacity(cfg.layers());
    for k in 0..cfg.layers() {
        let (_, gamma) = p.schedule(k);
        let gammas = [gamma; HIGHPASS_CHANNELS];
        let t = p.threshold(k);
        let u_init = cg_init_forward(tape, u, weights.for_layer(k))?;
        let syn = tape.linear(Arc::new(WeightedSynthesisOp::new(n, gammas)), z)?;
        let b = tape.add(pty, syn)?;
        let system = Arc::new(HqsSystem::new(Arc::clone(&problem.projector), gammas));
        u = cg_on_tape(tape, system, b, u_init, p.inner_iters, p.cg_tol)?;
        if !tape.value(u).all_finite() {
            return Err(Error::NonFinite(format!("layer {} produced non-finite values", k + 1)));
        }
        let wu = tape.linear(Arc::clone(&w_op), u)?;
        z = tape.soft_threshold(wu, vec![t])?;
        outputs.push(u);
    }
    Ok(outputs)
}

/// Inference: the `K` layer outputs as images.
pub fn reconstruct(
    y: &Sinogram,
    projector: &Arc<Projector>,
    cfg: &MetaInvConfig,
    weights: &InitializerWeights,
) -> Result<Vec<Image>> {
    weights.check(cfg.layers())?;
    let problem = Problem::new(y, Arc::clone(projector))?;
    let mut tape = Tape::new();
    let nodes = WeightNodes::record(&mut tape, weights, false);
    let outs = metainv_forward(&mut tape, &problem, cfg, &nodes)?;
    let grid = projector.geometry().grid;
    outs.into_iter()
        .map(|id| Image::new(grid, tape.value(id).data().to_vec()))
        .collect()
}

/// Single-scale SSIM of node `x` against a fixed reference, on the tape.
pub fn ssim_node(tape: &mut Tape, x: NodeId, gt: &Image, peak: f64) -> Result<NodeId> {
    let n = gt.n();
    let g: Arc<dyn crate::linear::LinearOperator> = Arc::new(GaussianValid::new(n));
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let gt_data = gt.data();
    let gt_sq: Vec<f64> = gt_data.iter().map(|v| v * v).collect();
    let my_v = g.apply(gt_data);
    let eyy_v = g.apply(&gt_sq);
    let m = GaussianValid::new(n).out_side();
    let my = tape.constant(Tensor::from_raw(vec![m, m], my_v.clone()));
    let vy_v: Vec<f64> = eyy_v.iter().zip(&my_v).map(|(e, mu)| e - mu * mu).collect();
    let vy = tape.constant(Tensor::from_raw(vec![m, m], vy_v));
    let y = tape.constant(gt.tensor().clone());

    let mx = tape.linear(Arc::clone(&g), x)?;
    let xx = tape.square(x);
    let exx = tape.linear(Arc::clone(&g), xx)?;
    let xy = tape.mul(x, y)?;
    let exy = tape.linear(Arc::clone(&g), xy)?;
    let mx2 = tape.square(mx);
    let vx = tape.sub(exx, mx2)?;
    let mxy = tape.mul(mx, my)?;
    let cov = tape.sub(exy, mxy)?;

    let my2 = tape.square(my);
    let lum_num = tape.scale(mxy, 2.0);
    let lum_num = tape.add_scalar(lum_num, c1);
    let lum_den = tape.add(mx2, my2)?;
    let lum_den = tape.add_scalar(lum_den, c1);
    let lum = tape.div(lum_num, lum_den)?;
    let con_num = tape.scale(cov, 2.0);
    let con_num = tape.add_scalar(con_num, c2);
    let con_den = tape.add(vx, vy)?;
    let con_den = tape.add_scalar(con_den, c2);
    let con = tape.div(con_num, con_den)?;
    let s = tape.mul(lum, con)?;
    Ok(tape.mean(s))
}

/// `Σ_k μ₁‖u_k − gt‖₂ + μ₂(1 − SSIM(u_k, gt))`. SSIM uses the dynamic range
/// of `gt` as its peak (1 for a flat reference).
pub fn loss(tape: &mut Tape, outputs: &[NodeId], gt: &Image, mu1: f64, mu2: f64) -> Result<NodeId> {
    let range = dynamic_range(gt.data());
    let peak = if range > 0.0 { range } else { 1.0 };
    let target = tape.constant(gt.tensor().clone());
    let mut total: Option<NodeId> = None;
    for &u in outputs {
        let d = tape.sub(u, target)?;
        let sq = tape.square(d);
        let ss = tape.sum(sq);
        let l2 = tape.sqrt(ss);
        let mut term = tape.scale(l2, mu1);
        if mu2 != 0.0 {
            let s = ssim_node(tape, u, gt, peak)?;
            let neg = tape.scale(s, -mu2);
            let l_ssim = tape.add_scalar(neg, mu2);
            term = tape.add(term, l_ssim)?;
        }
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::invalid("loss needs at least one layer output"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Reshuffle the sample order every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("ADAM needs betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(w: &InitializerWeights) -> Self {
        let zeros: Vec<Vec<f64>> = w.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update. `grads` follows
/// [`InitializerWeights::tensors`] order.
pub fn adam_step(
    w: &mut InitializerWeights,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut params = w.tensors_mut();
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "{} gradients and {} moment buffers for {} tensors",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if grads[i].len() != p.len() {
            return Err(Error::shape(format!(
                "gradient {} has {} entries for a tensor of {}",
                i,
                grads[i].len(),
                p.len()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One training example: ground truth, scanner and noise model.
#[derive(Clone)]
pub struct Sample {
    pub phantom: Image,
    pub projector: Arc<Projector>,
    pub noise: Noise,
}

/// Loss and weight gradients for one simulated problem.
pub fn loss_and_grads(
    problem: &Problem,
    gt: &Image,
    cfg: &MetaInvConfig,
    w: &InitializerWeights,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let nodes = WeightNodes::record(&mut tape, w, true);
    let outs = metainv_forward(&mut tape, problem, cfg, &nodes)?;
    let l = loss(&mut tape, &outs, gt, cfg.mu1, cfg.mu2)?;
    let value = tape.value(l).item();
    let grads = tape.backward(l)?;
    let g = nodes
        .ids()
        .into_iter()
        .map(|id| grads.get(id).expect("parameters always have gradients").data().to_vec())
        .collect();
    Ok((value, g))
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub weights: InitializerWeights,
    /// Mean sample loss per epoch, each sample evaluated with the weights
    /// current when it was visited.
    pub epoch_loss: Vec<f64>,
}

/// ADAM training over `dataset`. Sinograms are simulated once per sample.
/// Samples inside a batch are evaluated in parallel and their gradients
/// summed in sample order, so results do not depend on the thread count.
pub fn train(
    dataset: &[Sample],
    cfg: &MetaInvConfig,
    tc: &TrainConfig,
    init: InitializerWeights,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    cfg.validate()?;
    tc.validate()?;
    init.check(cfg.layers())?;
    let problems = dataset
        .par_iter()
        .map(|s| {
            let y = simulate_sinogram(&s.phantom, &s.projector, s.noise)?;
            Problem::new(&y, Arc::clone(&s.projector))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut w = init;
    let mut state = AdamState::new(&w);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut epoch_loss = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        if tc.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sample_loss = vec![0.0; dataset.len()];
        for batch in order.chunks(tc.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| loss_and_grads(&problems[i], &dataset[i].phantom, cfg, &w))
                .collect::<Vec<_>>();
            let mut sum: Option<Vec<Vec<f64>>> = None;
            for (&i, r) in batch.iter().zip(results) {
                let (l, g) = r.map_err(|e| match e {
                    Error::NonFinite(msg) => {
                        Error::Divergence(format!("epoch {}, sample {}: {}", epoch + 1, i, msg))
                    }
                    other => other,
                })?;
                if !l.is_finite() || g.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "epoch {}, sample {}: loss {} or its gradient is not finite",
                        epoch + 1,
                        i,
                        l
                    )));
                }
                sample_loss[i] = l;
                sum = Some(match sum {
                    None => g,
                    Some(mut acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += y;
                            }
                        }
                        acc
                    }
                });
            }
            let mut grads = sum.expect("batches are nonempty");
            let inv = 1.0 / batch.len() as f64;
            for v in grads.iter_mut().flatten() {
                *v *= inv;
            }
            adam_step(&mut w, &grads, &mut state, tc)?;
        }
        // Summed in dataset order so the log does not depend on the shuffle.
        epoch_loss.push(sample_loss.iter().sum::<f64>() / dataset.len() as f64);
    }
    Ok(TrainReport {
        weights: w,
        epoch_loss,
    })
}

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MINVWGHT";

/// Weights plus the reconstruction settings they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: MetaInvConfig,
    pub weights: InitializerWeights,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        let s = &self.weights.spec;
        w.write_all(&CHECKPOINT_MAGIC)?;
        io::put_u32(w, io::FORMAT_VERSION)?;
        for v in [c.layers(), c.hqs.inner_iters, s.depth, s.width, s.kernel] {
            io::put_u32(w, v as u32)?;
        }
        io::put_u32(w, s.shared as u32)?;
        io::put_u32(w, (c.hqs.threshold_mode == ThresholdMode::Direct) as u32)?;
        let h = &c.hqs;
        for v in [
            h.lambda0,
            h.d_lambda,
            h.lambda_floor,
            h.gamma0,
            h.d_gamma,
            h.gamma_floor,
            h.cg_tol,
            c.mu1,
            c.mu2,
        ] {
            io::put_f64(w, v)?;
        }
        let tensors = self.weights.tensors();
        io::put_u32(w, tensors.len() as u32)?;
        for t in tensors {
            io::write_tensor_body(w, t)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        io::expect_header(r, &CHECKPOINT_MAGIC, "weight checkpoint")?;
        let mut ints = [0usize; 5];
        for v in &mut ints {
            *v = io::get_u32(r)? as usize;
        }
        let [layers, inner, depth, width, kernel] = ints;
        let shared = io::get_u32(r)? != 0;
        let direct = io::get_u32(r)? != 0;
        let mut f = [0.0; 9];
        for v in &mut f {
            *v = io::get_f64(r)?;
        }
        let hqs = HqsParams {
            lambda0: f[0],
            d_lambda: f[1],
            lambda_floor: f[2],
            gamma0: f[3],
            d_gamma: f[4],
            gamma_floor: f[5],
            cg_tol: f[6],
            threshold_mode: if direct {
                ThresholdMode::Direct
            } else {
                ThresholdMode::Ratio
            },
            ..HqsParams::truncated(layers, inner)
        };
        let config = MetaInvConfig {
            hqs,
            initializer: InitializerSpec {
                depth,
                width,
                kernel,
                shared,
            },
            mu1: f[7],
            mu2: f[8],
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut weights = InitializerWeights::zeros(config.initializer, layers)
            .map_err(|e| Error::Format(e.to_string()))?;
        let count = io::get_u32(r)? as usize;
        let slots = weights.tensors_mut();
        if count != slots.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, its header implies {}",
                count,
                slots.len()
            )));
        }
        for slot in slots {
            let t = io::read_tensor_body(r)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor shape {:?} where {:?} is expected",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
