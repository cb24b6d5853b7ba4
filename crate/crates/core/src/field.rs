//! Dual-head neural signed-distance field.
//!
//! A ReLU multilayer perceptron maps a normalized point to two outputs: a
//! linear distance head ψ and a logistic uncertainty head w. The forward pass
//! carries three tangent columns per sample alongside the primal one, so the
//! input gradient ∇ψ comes out of the same matrix products and losses that
//! depend on it can be differentiated exactly with respect to the parameters.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::sampler::{curvature_thresholds, InterpolationParams, Sampler, SamplerConfig, TrainingSample};

pub const NET_MAGIC: &[u8; 4] = b"CNET";
pub const NET_VERSION: u32 = 1;

/// Radius (in normalized coordinates) of the sphere the untrained field approximates.
pub const INIT_RADIUS: f64 = 0.5;

/// Columns evaluated per chunk in primal-only batch evaluation.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter());
        out.extend(l.bias.iter());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralField {
    layers: Vec<Layer>,
    center: Vector3<f64>,
    scale: f64,
    seed: u64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `layers` linear maps: `layers − 1` hidden ReLU layers of `width` units and a
/// 2-unit output layer. Deterministic per seed.
pub fn init_network(layers: usize, width: usize, seed: u64) -> Result<NeuralField> {
    if layers < 2 {
        return Err(Error::invalid(format!("need at least 2 layers, got {layers}")));
    }
    if width == 0 {
        return Err(Error::invalid("width must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = vec![3];
    sizes.extend(std::iter::repeat_n(width, layers - 1));
    sizes.push(2);
    let mut out = Vec::with_capacity(layers);
    for (i, pair) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let mut weights = Array2::zeros((fan_out, fan_in));
        let mut bias = Array1::zeros(fan_out);
        if i + 1 < layers {
            let dist = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("positive std");
            weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
        } else {
            // distance row: ψ ≈ r − |q| (positive inside); uncertainty row: near 0.5
            let psi = Normal::new(-(std::f64::consts::PI / fan_in as f64).sqrt(), 1e-4).expect("positive std");
            let unc = Normal::new(0.0, 0.01 / (fan_in as f64).sqrt()).expect("positive std");
            for j in 0..fan_in {
                weights[[0, j]] = psi.sample(&mut rng);
                weights[[1, j]] = unc.sample(&mut rng);
            }
            bias[0] = INIT_RADIUS;
        }
        out.push(Layer { weights, bias });
    }
    Ok(NeuralField {
        layers: out,
        center: Vector3::zeros(),
        scale: 1.0,
        seed,
    })
}

/// Result of a forward pass that also carries input tangents.
struct Tape {
    batch: usize,
    /// Stacked inputs and post-activation outputs of every hidden layer,
    /// each `rows × 4B` laid out as `[primal | ∂/∂q₀ | ∂/∂q₁ | ∂/∂q₂]`.
    acts: Vec<Array2<f64>>,
    /// Raw output of the last layer, `2 × 4B`.
    out: Array2<f64>,
}

impl Tape {
    fn psi_pre(&self, j: usize) -> f64 {
        self.out[[0, j]]
    }

    fn logit(&self, j: usize) -> f64 {
        self.out[[1, j]]
    }

    fn grad(&self, j: usize) -> Vector3<f64> {
        let b = self.batch;
        Vector3::new(self.out[[0, j + b]], self.out[[0, j + 2 * b]], self.out[[0, j + 3 * b]])
    }
}

impl NeuralField {
    /// Builds a network from explicit layers (`out × in` weights). The first
    /// layer must take 3 inputs and the last must produce 2 outputs.
    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("no layers"));
        }
        if layers[0].weights.ncols() != 3 || layers[layers.len() - 1].weights.nrows() != 2 {
            return Err(Error::invalid("network must map 3 inputs to 2 outputs"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::invalid(format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && l.weights.ncols() != layers[i - 1].weights.nrows() {
                return Err(Error::invalid(format!("layer {i}: input size mismatch")));
            }
        }
        Ok(NeuralField {
            layers,
            center: Vector3::zeros(),
            scale: 1.0,
            seed,
        })
    }

    /// Evaluates the network at `(p − center) / scale` and rescales the
    /// distance by `scale`, so ψ stays in meters and ∇ψ is unchanged.
    pub fn with_normalization(mut self, center: Vector3<f64>, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("normalization must be finite with positive scale"));
        }
        self.center = center;
        self.scale = scale;
        Ok(self)
    }

    /// Normalization covering the bounding box of `grid`.
    pub fn fit_to_grid(self, grid: &VoxelGrid) -> Result<Self> {
        let (lo, hi) = grid.bounds();
        let half = 0.5 * (hi - lo);
        self.with_normalization(0.5 * (lo + hi), half.max())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn width(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Positions of the uncertainty-head row (weights and bias) in
    /// [`NeuralField::parameters`].
    pub fn uncertainty_parameter_indices(&self) -> Vec<usize> {
        let mut offset = 0;
        for l in &self.layers[..self.layers.len() - 1] {
            offset += l.weights.len() + l.bias.len();
        }
        let last = &self.layers[self.layers.len() - 1];
        let fan_in = last.weights.ncols();
        let mut idx: Vec<usize> = (offset + fan_in..offset + 2 * fan_in).collect();
        idx.push(offset + last.weights.len() + 1);
        idx
    }

    pub fn parameters(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x = *it.next().unwrap());
        }
        Ok(())
    }

    fn normalized(&self, points: &[Vector3<f64>]) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((3, points.len()));
        for (j, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite(format!("input point {j}")));
            }
            let q = (p - self.center) / self.scale;
            x[[0, j]] = q.x;
            x[[1, j]] = q.y;
            x[[2, j]] = q.z;
        }
        Ok(x)
    }

    /// `(ψ, w)` for every point.
    pub fn forward_batch(&self, points: &[Vector3<f64>]) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let mut a = self.normalized(chunk)?;
            for (i, l) in self.layers.iter().enumerate() {
                let mut z = l.weights.dot(&a);
                z += &l.bias.view().insert_axis(Axis(1));
                if i + 1 < self.layers.len() {
                    z.mapv_inplace(|v| v.max(0.0));
                }
                a = z;
            }
            for j in 0..chunk.len() {
                out.push((self.scale * a[[0, j]], sigmoid(a[[1, j]])));
            }
        }
        Ok(out)
    }

    pub fn forward(&self, p: &Vector3<f64>) -> Result<(f64, f64)> {
        Ok(self.forward_batch(std::slice::from_ref(p))?[0])
    }

    fn forward_tape(&self, points: &[Vector3<f64>]) -> Result<Tape> {
        let b = points.len();
        let mut input = Array2::zeros((3, 4 * b));
        input.slice_mut(s![.., ..b]).assign(&self.normalized(points)?);
        for k in 0..3 {
            input.slice_mut(s![k, (k + 1) * b..(k + 2) * b]).fill(1.0);
        }
        let mut acts = vec![input];
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.weights.dot(&acts[i]);
            {
                let mut primal = z.slice_mut(s![.., ..b]);
                primal += &l.bias.view().insert_axis(Axis(1));
            }
            if i == last {
                return Ok(Tape { batch: b, acts, out: z });
            }
            relu_stacked(&mut z, b);
            acts.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Exact gradient of ψ with respect to `p` (ReLU derivative 0 at the kink).
    pub fn input_gradient(&self, p: &Vector3<f64>) -> Result<Vector3<f64>> {
        Ok(self.input_gradients(std::slice::from_ref(p))?[0])
    }

    pub fn input_gradients(&self, points: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let tape = self.forward_tape(chunk)?;
            out.extend((0..chunk.len()).map(|j| tape.grad(j)));
        }
        Ok(out)
    }

    /// Backpropagates output sensitivities. `d_psi_pre` and `d_logit` are per
    /// primal column; `d_grad` holds the sensitivity to each input-gradient
    /// component. The uncertainty head's sensitivity stops at the trunk.
    fn backward(&self, tape: &Tape, d_psi_pre: &[f64], d_grad: &[Vector3<f64>], d_logit: &[f64]) -> Gradients {
        let b = tape.batch;
        let last = self.layers.len() - 1;
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();

        let mut d = Array2::zeros((2, 4 * b));
        for j in 0..b {
            d[[0, j]] = d_psi_pre[j];
            d[[1, j]] = d_logit[j];
            for k in 0..3 {
                d[[0, j + (k + 1) * b]] = d_grad[j][k];
            }
        }
        for i in (0..=last).rev() {
            let prev = &tape.acts[i];
            grads[i].weights = d.dot(&prev.t());
            grads[i].bias = d.slice(s![.., ..b]).sum_axis(Axis(1));
            if i == 0 {
                break;
            }
            if i == last {
                d.row_mut(1).fill(0.0);
            }
            let mut dp = self.layers[i].weights.t().dot(&d);
            mask_stacked(&mut dp, prev.view(), b);
            d = dp;
        }
        Gradients { layers: grads }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Binary checkpoint: magic, version, layer count, layer sizes,
    /// normalization (f64), seed, then row-major f32 weights and biases.
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(NET_MAGIC)?;
        out.write_all(&NET_VERSION.to_le_bytes())?;
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        out.write_all(&3u32.to_le_bytes())?;
        for l in &self.layers {
            out.write_all(&(l.weights.nrows() as u32).to_le_bytes())?;
        }
        for c in self.center.iter().chain(std::iter::once(&self.scale)) {
            out.write_all(&c.to_le_bytes())?;
        }
        out.write_all(&self.seed.to_le_bytes())?;
        for l in &self.layers {
            for v in l.weights.iter().chain(l.bias.iter()) {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != NET_MAGIC {
            return Err(Error::format("not a network checkpoint"));
        }
        let version = read_u32(input)?;
        if version != NET_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let n = read_u32(input)? as usize;
        if n == 0 || n > 1024 {
            return Err(Error::format(format!("bad layer count {n}")));
        }
        let sizes: Vec<usize> = (0..=n).map(|_| read_u32(input).map(|v| v as usize)).collect::<Result<_>>()?;
        if sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
            return Err(Error::format("bad layer size"));
        }
        let center = Vector3::new(read_f64(input)?, read_f64(input)?, read_f64(input)?);
        let scale = read_f64(input)?;
        let mut seed = [0u8; 8];
        input.read_exact(&mut seed).map_err(truncated)?;
        let mut layers = Vec::with_capacity(n);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut weights = Array2::zeros((fan_out, fan_in));
            let mut bias = Array1::zeros(fan_out);
            for v in weights.iter_mut().chain(bias.iter_mut()) {
                *v = read_f32(input)? as f64;
            }
            layers.push(Layer { weights, bias });
        }
        NeuralField::from_layers(layers, u64::from_le_bytes(seed))?.with_normalization(center, scale)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("truncated checkpoint")
    } else {
        Error::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}

/// ReLU on the primal block; tangent blocks are masked by the primal sign.
fn relu_stacked(z: &mut Array2<f64>, b: usize) {
    for mut row in z.rows_mut() {
        let (primal, rest) = row.as_slice_mut().expect("standard layout").split_at_mut(b);
        for (j, v) in primal.iter_mut().enumerate() {
            if *v <= 0.0 {
                *v = 0.0;
                rest[j] = 0.0;
                rest[j + b] = 0.0;
                rest[j + 2 * b] = 0.0;
            }
        }
    }
}

/// Zeroes sensitivities wherever the forward activation was inactive.
fn mask_stacked(d: &mut Array2<f64>, act: ArrayView2<f64>, b: usize) {
    Zip::from(d.rows_mut()).and(act.rows()).for_each(|mut drow, arow| {
        for j in 0..b {
            if arow[j] <= 0.0 {
                for k in 0..4 {
                    drow[j + k * b] = 0.0;
                }
            }
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Distance, normal, uncertainty and Eikonal terms on interpolated targets.
    #[default]
    Full,
    /// Geometric term replaced by `|ψ|` at extracted surface points.
    PointCloud,
    /// Geometric term replaced by the pulled-point distance; normal and
    /// Eikonal terms disabled.
    NeuralPull,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub tau_n: f64,
    pub tau_w: f64,
    pub tau_e: f64,
    pub mode: LossMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tau_n: 1.0,
            tau_w: 1.0,
            tau_e: 0.1,
            mode: LossMode::Full,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_n", self.tau_n), ("tau_w", self.tau_w), ("tau_e", self.tau_e)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Weights actually applied (neural-pull forces τ_n = τ_e = 0).
    pub fn effective(&self) -> LossWeights {
        match self.mode {
            LossMode::NeuralPull => LossWeights {
                tau_n: 0.0,
                tau_e: 0.0,
                ..*self
            },
            _ => *self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_x: f64,
    pub l_n: f64,
    pub l_w: f64,
    pub l_e: f64,
    pub total: f64,
}

/// Loss terms over `batch` and their exact parameter gradients.
///
/// `l_x` and `l_n` average over samples with positive target uncertainty,
/// `l_w` and `l_e` over all samples.
pub fn loss_and_grads(net: &NeuralField, batch: &[TrainingSample], weights: &LossWeights) -> Result<(LossReport, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    weights.validate()?;
    let tau = weights.effective();
    let n = batch.len();
    let mut points: Vec<Vector3<f64>> = batch.iter().map(|s| s.position).collect();
    let observed: Vec<usize> = (0..n).filter(|&i| batch[i].weight > 0.0).collect();
    // surface points evaluated as extra columns in point-cloud mode
    let mut extra: Vec<usize> = Vec::new();
    if tau.mode == LossMode::PointCloud {
        for &i in &observed {
            if let Some(x) = batch[i].surface_point {
                extra.push(i);
                points.push(x);
            }
        }
    }
    let tape = net.forward_tape(&points)?;
    let total_cols = points.len();
    let mut d_psi = vec![0.0; total_cols];
    let mut d_grad = vec![Vector3::zeros(); total_cols];
    let mut d_logit = vec![0.0; total_cols];
    let mut report = LossReport::default();
    let scale = net.scale;

    let n_obs = observed.len();
    if n_obs > 0 {
        let inv = 1.0 / n_obs as f64;
        for &i in &observed {
            let s = &batch[i];
            let psi = scale * tape.psi_pre(i);
            let u = tape.grad(i);
            let un = u.norm();
            match tau.mode {
                LossMode::Full => {
                    let r = psi - s.psi;
                    report.l_x += r.abs() * inv;
                    d_psi[i] += sgn(r) * inv;
                }
                LossMode::PointCloud => {}
                LossMode::NeuralPull => {
                    if let (Some(x), true) = (s.surface_point, un > 0.0) {
                        let nh = u / un;
                        let r = x - s.position + nh * psi;
                        let rn = r.norm();
                        report.l_x += rn * inv;
                        if rn > 0.0 {
                            let rh = r / rn;
                            d_psi[i] += rh.dot(&nh) * inv;
                            let dn = rh * psi;
                            d_grad[i] += (dn - nh * nh.dot(&dn)) / un * inv;
                        }
                    }
                }
            }
            if un > 0.0 {
                let nh = u / un;
                let c = nh.dot(&s.gradient);
                report.l_n += (1.0 - c) * inv;
                d_grad[i] += -(s.gradient - nh * c) / un * (tau.tau_n * inv);
            } else {
                report.l_n += inv;
            }
        }
        if !extra.is_empty() {
            let inv = 1.0 / extra.len() as f64;
            for k in 0..extra.len() {
                let col = n + k;
                let psi = scale * tape.psi_pre(col);
                report.l_x += psi.abs() * inv;
                d_psi[col] += sgn(psi) * inv;
            }
        }
    }
    let inv = 1.0 / n as f64;
    for (i, s) in batch.iter().enumerate() {
        let w = sigmoid(tape.logit(i));
        let e = w - s.weight;
        report.l_w += e.abs() * inv;
        d_logit[i] = tau.tau_w * sgn(e) * w * (1.0 - w) * inv;
        let u = tape.grad(i);
        let r = u.norm_squared() - 1.0;
        report.l_e += r.abs() * inv;
        d_grad[i] += u * (2.0 * sgn(r) * tau.tau_e * inv);
    }
    report.total = report.l_x + tau.tau_n * report.l_n + tau.tau_w * report.l_w + tau.tau_e * report.l_e;
    if !report.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    // ψ = scale · ψ_pre
    d_psi.iter_mut().for_each(|d| *d *= scale);
    let grads = net.backward(&tape, &d_psi, &d_grad, &d_logit);
    Ok((report, grads))
}

/// Adaptive-moment optimizer over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step_scaled(params, grads, lr, None);
    }

    /// Like [`Adam::step`] with a per-parameter learning-rate multiplier.
    pub fn step_scaled(&mut self, params: &mut [f64], grads: &[f64], lr: f64, scale: Option<&[f64]>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let lr_i = scale.map_or(lr, |s| lr * s[i]);
            params[i] -= lr_i * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per epoch; split as `m` per curvature class plus `m_unobs`.
    pub batch: usize,
    /// Defaults to `batch / 4`.
    pub m: Option<usize>,
    /// Defaults to `batch / 4`.
    pub m_unobs: Option<usize>,
    pub lr: f64,
    /// Learning rate multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    /// Learning-rate multiplier for the uncertainty head.
    pub uncertainty_lr_scale: f64,
    /// Defaults to a quarter of `epochs`.
    pub decay_every: Option<usize>,
    pub loss: LossWeights,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10_000,
            batch: 10_000,
            m: None,
            m_unobs: None,
            lr: 1e-4,
            lr_decay: 0.5,
            uncertainty_lr_scale: 10.0,
            decay_every: None,
            loss: LossWeights::default(),
            seed: 0,
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn per_stratum(&self) -> usize {
        self.m.unwrap_or(self.batch / 4)
    }

    pub fn unobserved(&self) -> usize {
        self.m_unobs.unwrap_or(self.batch / 4)
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let every = self.decay_every.unwrap_or(self.epochs / 4).max(1);
        self.lr * self.lr_decay.powi((epoch / every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.uncertainty_lr_scale.is_finite() && self.uncertainty_lr_scale > 0.0) {
            return Err(Error::config("uncertainty_lr_scale", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", "must be in (0, 1]"));
        }
        if self.epochs > 0 && 3 * self.per_stratum() + self.unobserved() == 0 {
            return Err(Error::config("batch", "no samples per epoch"));
        }
        self.loss.validate()?;
        self.sampler.validate()
    }

    /// Seed of the sample batch drawn at `epoch`.
    pub fn batch_seed(&self, epoch: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<LossReport>,
    /// True when the callback asked to stop before the last epoch.
    pub stopped_early: bool,
}

pub fn train(net: &mut NeuralField, grid: &VoxelGrid, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(net, grid, config, |_, _, _| true)
}

/// One stratified batch and one optimizer step per epoch. `callback` runs
/// after every step and may return `false` to stop.
pub fn train_with<F>(net: &mut NeuralField, grid: &VoxelGrid, config: &TrainConfig, mut callback: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &NeuralField, &LossReport) -> bool,
{
    config.validate()?;
    let mut outcome = TrainOutcome::default();
    if config.epochs == 0 {
        return Ok(outcome);
    }
    let sc = &config.sampler;
    let thresholds = curvature_thresholds(grid, sc.q_lo, sc.q_hi, sc.threshold_method)?;
    let sampler = Sampler::new(
        grid,
        thresholds,
        InterpolationParams {
            weight_saturation: sc.weight_saturation,
        },
    );
    let mut params = net.parameters();
    let mut adam = Adam::new(params.len());
    let mut lr_scale = vec![1.0; params.len()];
    for i in net.uncertainty_parameter_indices() {
        lr_scale[i] = config.uncertainty_lr_scale;
    }
    for epoch in 0..config.epochs {
        let batch = sampler.batch(config.per_stratum(), config.unobserved(), sc.mode, config.batch_seed(epoch))?;
        let (report, grads) = loss_and_grads(net, &batch, &config.loss).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
            e => e,
        })?;
        if !report.total.is_finite() {
            return Err(Error::Diverged { epoch, loss: report.total });
        }
        adam.step_scaled(&mut params, &grads.flatten(), config.learning_rate(epoch), Some(&lr_scale));
        net.set_parameters(&params)?;
        outcome.history.push(report);
        if epoch % 100 == 0 {
            log::debug!("epoch {epoch}: total {:.6} l_x {:.6} l_e {:.6}", report.total, report.l_x, report.l_e);
        }
        if !callback(epoch, net, &report) {
            outcome.stopped_early = epoch + 1 < config.epochs;
            break;
        }
    }
    Ok(outcome)
}

/// CSV loss history: `epoch,l_X,l_N,l_W,l_E,total`.
pub fn write_loss_history(history: &[LossReport], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,l_X,l_N,l_W,l_E,total")?;
    for (e, r) in history.iter().enumerate() {
        writeln!(out, "{e},{:?},{:?},{:?},{:?},{:?}", r.l_x, r.l_n, r.l_w, r.l_e, r.total)?;
    }
    out.flush()?;
    Ok(())
}
