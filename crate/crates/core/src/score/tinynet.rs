//! A small multilayer perceptron noise predictor with hand-written reverse
//! mode differentiation and an Adam trainer.
//!
//! The input of the first layer is the flattened sample concatenated with a
//! sinusoidal embedding of the time. Hidden layers apply the configured
//! activation; the output layer is linear and has the sample's dimension.
//! Parameters are stored as `f32`, layer by layer, weights (row-major,
//! `out × in`) followed by biases, then the per-element branch.
//!
//! The optional per-element branch is a one-hidden-layer ReLU network
//! g(x_i, t) shared by every element and added to the MLP output. It gives
//! each pixel a cheap nonlinear denoising path that the bottlenecked MLP
//! cannot provide.

use num_traits::Float;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diffusion::{diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::score::{check_batch, ScoreModel};
use crate::tensor::Tensor;

pub const DEFAULT_TIME_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Tanh,
}

impl Activation {
    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Silu => 2,
            Activation::Tanh => 3,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Silu,
            3 => Activation::Tanh,
            _ => return None,
        })
    }

    fn apply<R: Real>(self, z: R) -> R {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(R::zero()),
            Activation::Silu => z / (R::one() + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative<R: Real>(self, z: R) -> R {
        match self {
            Activation::Identity => R::one(),
            Activation::Relu => {
                if z > R::zero() {
                    R::one()
                } else {
                    R::zero()
                }
            }
            Activation::Silu => {
                let s = R::one() / (R::one() + (-z).exp());
                s * (R::one() + z * (R::one() - s))
            }
            Activation::Tanh => {
                let th = z.tanh();
                R::one() - th * th
            }
        }
    }
}

/// Layer layout of a [`TinyNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    /// Flattened sample dimension (input and output width).
    pub dim: usize,
    /// Width of the sinusoidal time embedding; even, may be 0.
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Sample channels (1 for plain images, 2 for image + mask); informational.
    pub channels: usize,
    /// Fixed linear skip around the network, when set.
    pub skip: Option<Skip>,
    /// Hidden width of the per-element branch; 0 disables it.
    pub pointwise: usize,
}

/// Per-element data statistics for the skip ε̂ = c₁(x − aμ) + c₂F(x, t), with
/// a = √ᾱ_t, s = √(1−ᾱ_t), c₁ = s/(a²σ² + s²) and c₂ = aσ/√(a²σ² + s²).
/// c₁ is the least-squares linear predictor of ε for data of mean μ and
/// variance σ², and c₂ scales F's target to unit variance, so the network
/// only has to learn what a per-element linear filter cannot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skip {
    pub mean: f64,
    pub std: f64,
}

impl Skip {
    /// Statistics pooled over all elements of `data`.
    pub fn from_data(data: &[Tensor]) -> Result<Self> {
        let n: usize = data.iter().map(|t| t.len()).sum();
        if n < 2 {
            return Err(Error::EmptyDataset);
        }
        let mean = data.iter().flat_map(|t| t.data()).sum::<f64>() / n as f64;
        let var = data.iter().flat_map(|t| t.data()).map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(Self { mean, std: var.sqrt().max(1e-3) })
    }

    /// (c₁, c₂) at cumulative signal fraction ᾱ.
    pub fn coefficients(&self, alpha_bar: f64) -> (f64, f64) {
        let (a2, s2) = (alpha_bar, 1.0 - alpha_bar);
        let denom = a2 * self.std * self.std + s2;
        (s2.sqrt() / denom, alpha_bar.sqrt() * self.std / denom.sqrt())
    }
}

impl Architecture {
    pub fn mlp(dim: usize, hidden: Vec<usize>) -> Self {
        Self { dim, time_dim: DEFAULT_TIME_DIM, hidden, activation: Activation::Silu, channels: 1, skip: None, pointwise: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::InvalidConfig("time embedding width must be even".into()));
        }
        if self.channels == 0 || self.dim % self.channels != 0 {
            return Err(Error::InvalidConfig("channel count must divide the dimension".into()));
        }
        if let Some(sk) = self.skip {
            if !(sk.mean.is_finite() && sk.std > 0.0 && sk.std.is_finite()) {
                return Err(Error::InvalidConfig("skip statistics must be finite with positive std".into()));
            }
        }
        Ok(())
    }

    /// `(in, out)` of every layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.dim + self.time_dim];
        widths.extend(&self.hidden);
        widths.push(self.dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn mlp_param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Branch layout: value weights (h), time weights (h × time_dim),
    /// hidden biases (h), output weights (h), output bias.
    pub fn pointwise_param_count(&self) -> usize {
        match self.pointwise {
            0 => 0,
            h => h * (self.time_dim + 3) + 1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.mlp_param_count() + self.pointwise_param_count()
    }
}

/// Sinusoidal embedding of a continuous time: `[sin(t ω_i)..., cos(t ω_i)...]`
/// with ω_i = 10000^(−i / half).
pub fn sinusoidal_embedding(t: f64, width: usize, out: &mut [f64]) {
    let half = width / 2;
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
}

/// Floating-point element the network can be evaluated in.
pub trait Real: Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static {
    /// C ← α·A·B + β·C with arbitrary strides (see `matrixmultiply`).
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite cast")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// c (n×m) ← a (n×k) · bᵀ where b is m×k; c is accumulated into when `acc`.
fn mul_abt<R: Real>(n: usize, k: usize, m: usize, a: &[R], b: &[R], c: &mut [R], acc: bool) {
    assert!(a.len() >= n * k && b.len() >= m * k && c.len() >= n * m);
    let beta = if acc { R::one() } else { R::zero() };
    // SAFETY: lengths checked above; row-major strides.
    unsafe {
        R::gemm(n, k, m, R::one(), a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta, c.as_mut_ptr(), m as isize, 1)
    }
}

/// c (m×k) += aᵀ · b where a is n×m and b is n×k.
fn mul_atb_acc<R: Real>(n: usize, m: usize, k: usize, a: &[R], b: &[R], c: &mut [R]) {
    assert!(a.len() >= n * m && b.len() >= n * k && c.len() >= m * k);
    // SAFETY: lengths checked above.
    unsafe {
        R::gemm(m, n, k, R::one(), a.as_ptr(), 1, m as isize, b.as_ptr(), k as isize, 1, R::one(), c.as_mut_ptr(), k as isize, 1)
    }
}

/// c (n×k) ← a (n×m) · b (m×k).
fn mul_ab<R: Real>(n: usize, m: usize, k: usize, a: &[R], b: &[R], c: &mut [R]) {
    assert!(a.len() >= n * m && b.len() >= m * k && c.len() >= n * k);
    // SAFETY: lengths checked above.
    unsafe {
        R::gemm(n, m, k, R::one(), a.as_ptr(), m as isize, 1, b.as_ptr(), k as isize, 1, R::zero(), c.as_mut_ptr(), k as isize, 1)
    }
}

struct Pass<R> {
    /// Input to every layer.
    inputs: Vec<Vec<R>>,
    /// Pre-activation output of every hidden layer.
    pre: Vec<Vec<R>>,
    out: Vec<R>,
    /// Per-row scale c₂ applied to the network output (1 without skip).
    out_scale: Vec<R>,
}

/// `abars[r]` is ᾱ at `times[r]`; only read when the architecture has a skip.
fn forward<R: Real>(arch: &Architecture, params: &[R], x: &[R], times: &[f64], abars: &[f64]) -> Pass<R> {
    let n = times.len();
    let shapes = arch.layer_shapes();
    let (d, td) = (arch.dim, arch.time_dim);
    let in0 = d + td;
    let mut input = vec![R::zero(); n * in0];
    let mut emb = vec![0.0; td];
    for r in 0..n {
        let row = &mut input[r * in0..(r + 1) * in0];
        row[..d].copy_from_slice(&x[r * d..(r + 1) * d]);
        sinusoidal_embedding(times[r], td, &mut emb);
        for (o, e) in row[d..].iter_mut().zip(&emb) {
            *o = R::of(*e);
        }
    }

    let mut inputs = Vec::with_capacity(shapes.len());
    let mut pre = Vec::with_capacity(shapes.len() - 1);
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let mut z = vec![R::zero(); n * fan_out];
        for row in z.chunks_mut(fan_out) {
            row.copy_from_slice(b);
        }
        mul_abt(n, fan_in, fan_out, &input, w, &mut z, true);
        inputs.push(input);
        if l + 1 == shapes.len() {
            if arch.pointwise > 0 {
                pointwise_forward(arch, &params[offset..], &inputs[0], n, &mut z);
            }
            let mut out_scale = vec![R::one(); n];
            if let Some(sk) = arch.skip {
                for r in 0..n {
                    let (c1, c2) = sk.coefficients(abars[r]);
                    let shift = R::of(abars[r].sqrt() * sk.mean);
                    let (c1, c2) = (R::of(c1), R::of(c2));
                    out_scale[r] = c2;
                    for (o, &xi) in z[r * d..(r + 1) * d].iter_mut().zip(&x[r * d..(r + 1) * d]) {
                        *o = c1 * (xi - shift) + c2 * *o;
                    }
                }
            }
            return Pass { inputs, pre, out: z, out_scale };
        }
        input = z.iter().map(|&v| arch.activation.apply(v)).collect();
        pre.push(z);
    }
    unreachable!("architecture has at least one layer")
}

struct Branch<'a, R> {
    wx: &'a [R],
    we: &'a [R],
    b1: &'a [R],
    wo: &'a [R],
    bo: R,
}

fn split_branch<R: Real>(h: usize, td: usize, p: &[R]) -> Branch<'_, R> {
    let (wx, rest) = p.split_at(h);
    let (we, rest) = rest.split_at(h * td);
    let (b1, rest) = rest.split_at(h);
    let (wo, rest) = rest.split_at(h);
    Branch { wx, we, b1, wo, bo: rest[0] }
}

/// Per-row hidden bias b₁ + W_e·emb(t) of the branch.
fn branch_row_bias<R: Real>(br: &Branch<'_, R>, emb: &[R], bias: &mut [R]) {
    let td = emb.len();
    for (j, b) in bias.iter_mut().enumerate() {
        *b = br.b1[j] + br.we[j * td..(j + 1) * td].iter().zip(emb).map(|(&w, &e)| w * e).sum::<R>();
    }
}

/// Adds g(x_i, t) to every element of `z`. Hidden activations are not kept;
/// the backward pass recomputes them.
fn pointwise_forward<R: Real>(arch: &Architecture, p: &[R], input0: &[R], n: usize, z: &mut [R]) {
    let (d, td, h) = (arch.dim, arch.time_dim, arch.pointwise);
    let br = split_branch(h, td, p);
    let in0 = d + td;
    let mut bias = vec![R::zero(); h];
    for r in 0..n {
        let row = &input0[r * in0..(r + 1) * in0];
        branch_row_bias(&br, &row[d..], &mut bias);
        for (o, &xi) in z[r * d..(r + 1) * d].iter_mut().zip(&row[..d]) {
            let mut g = br.bo;
            for j in 0..h {
                let a = br.wx[j] * xi + bias[j];
                if a > R::zero() {
                    g = g + br.wo[j] * a;
                }
            }
            *o = *o + g;
        }
    }
}

/// Accumulates the branch gradient into `grads` given ∂L/∂F in `delta`.
fn pointwise_backward<R: Real>(arch: &Architecture, p: &[R], input0: &[R], delta: &[R], grads: &mut [R]) {
    let (d, td, h) = (arch.dim, arch.time_dim, arch.pointwise);
    let br = split_branch(h, td, p);
    let in0 = d + td;
    let n = delta.len() / d;
    let (gwx, rest) = grads.split_at_mut(h);
    let (gwe, rest) = rest.split_at_mut(h * td);
    let (gb1, rest) = rest.split_at_mut(h);
    let (gwo, gbo) = rest.split_at_mut(h);
    let mut bias = vec![R::zero(); h];
    let mut gbias = vec![R::zero(); h];
    for r in 0..n {
        let row = &input0[r * in0..(r + 1) * in0];
        let emb = &row[d..];
        branch_row_bias(&br, emb, &mut bias);
        gbias.iter_mut().for_each(|g| *g = R::zero());
        for (&dl, &xi) in delta[r * d..(r + 1) * d].iter().zip(&row[..d]) {
            gbo[0] = gbo[0] + dl;
            for j in 0..h {
                let a = br.wx[j] * xi + bias[j];
                if a > R::zero() {
                    gwo[j] = gwo[j] + dl * a;
                    let da = dl * br.wo[j];
                    gwx[j] = gwx[j] + da * xi;
                    gbias[j] = gbias[j] + da;
                }
            }
        }
        for j in 0..h {
            gb1[j] = gb1[j] + gbias[j];
            for (g, &e) in gwe[j * td..(j + 1) * td].iter_mut().zip(emb) {
                *g = *g + gbias[j] * e;
            }
        }
    }
}

fn backward<R: Real>(arch: &Architecture, params: &[R], pass: &Pass<R>, d_out: Vec<R>) -> Vec<R> {
    let shapes = arch.layer_shapes();
    let n = d_out.len() / arch.dim;
    let mut grads = vec![R::zero(); params.len()];
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for &(i, o) in &shapes {
        offsets.push(off);
        off += i * o + o;
    }
    let mut delta = d_out;
    if arch.skip.is_some() {
        for (row, &c2) in delta.chunks_mut(arch.dim).zip(&pass.out_scale) {
            row.iter_mut().for_each(|g| *g = *g * c2);
        }
    }
    if arch.pointwise > 0 {
        let m = arch.mlp_param_count();
        pointwise_backward(arch, &params[m..], &pass.inputs[0], &delta, &mut grads[m..]);
    }
    for l in (0..shapes.len()).rev() {
        let (fan_in, fan_out) = shapes[l];
        let off = offsets[l];
        {
            let (gw, gb) = grads[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            mul_atb_acc(n, fan_out, fan_in, &delta, &pass.inputs[l], gw);
            for row in delta.chunks(fan_out) {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g = *g + *v;
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &params[off..off + fan_in * fan_out];
        let mut d_in = vec![R::zero(); n * fan_in];
        mul_ab(n, fan_out, fan_in, &delta, w, &mut d_in);
        for (g, &z) in d_in.iter_mut().zip(&pass.pre[l - 1]) {
            *g = *g * arch.activation.derivative(z);
        }
        delta = d_in;
    }
    grads
}

/// Mean squared error over all elements and its parameter gradient.
fn mse_objective<R: Real>(arch: &Architecture, params: &[R], x: &[R], times: &[f64], abars: &[f64], target: &[R]) -> (f64, Vec<R>) {
    let pass = forward(arch, params, x, times, abars);
    let scale = 1.0 / pass.out.len() as f64;
    let mut loss = 0.0;
    let two_scale = R::of(2.0 * scale);
    let d_out: Vec<R> = pass
        .out
        .iter()
        .zip(target)
        .map(|(&p, &e)| {
            let r = p - e;
            loss += r.as_f64() * r.as_f64();
            two_scale * r
        })
        .collect();
    let grads = backward(arch, params, &pass, d_out);
    (loss * scale, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    arch: Architecture,
    params: Vec<f32>,
}

impl TinyNet {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let params = vec![0.0; arch.param_count()];
        Ok(Self { arch, params })
    }

    /// Gaussian fan-in initialisation (std 1/√fan_in), zero biases, and an
    /// output layer scaled down by 10.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let mut rng = substream(seed, "tinynet-init");
        let shapes = net.arch.layer_shapes();
        let last = shapes.len() - 1;
        let mut off = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let std = (1.0 / fan_in as f64).sqrt() * if l == last { 0.1 } else { 1.0 };
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = (std * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
            off += fan_in * fan_out + fan_out;
        }
        // branch: unit value weights, hidden biases spread over the data
        // range so the ReLU kinks start at different values, small output
        let (h, td) = (net.arch.pointwise, net.arch.time_dim);
        if h > 0 {
            let p = &mut net.params[off..];
            let we_std = if td > 0 { (1.0 / td as f64).sqrt() } else { 0.0 };
            for j in 0..h {
                p[j] = rng.sample::<f64, _>(StandardNormal) as f32;
                for k in 0..td {
                    p[h + j * td + k] = (we_std * rng.sample::<f64, _>(StandardNormal)) as f32;
                }
                p[h + h * td + j] = rng.gen_range(-1.0f32..1.0);
                p[2 * h + h * td + j] = (0.1 / (h as f64).sqrt() * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
        Ok(net)
    }

    pub fn from_params(arch: Architecture, params: Vec<f32>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch { expected: arch.param_count(), got: params.len() });
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Forward pass over `x` rows at a single time.
    pub fn forward(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        let n = check_batch(x, self.arch.dim)?;
        let xf: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();
        let pass = forward(&self.arch, &self.params, &xf, &vec![t; n], &vec![schedule.alpha_bar_at(t); n]);
        Tensor::new(x.shape().to_vec(), pass.out.iter().map(|&v| v as f64).collect())
    }

    /// MSE of predictions against `target` with the gradient, evaluated in
    /// `f64` at `params` (defaults to the network's own parameters).
    pub fn objective_f64(
        &self,
        params: Option<&[f64]>,
        x: &Tensor,
        times: &[f64],
        target: &Tensor,
        schedule: &NoiseSchedule,
    ) -> Result<(f64, Vec<f64>)> {
        let n = check_batch(x, self.arch.dim)?;
        if n != times.len() || target.len() != x.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: target.len() });
        }
        let own: Vec<f64>;
        let p = match params {
            Some(p) => p,
            None => {
                own = self.params.iter().map(|&v| v as f64).collect();
                &own
            }
        };
        let abars: Vec<f64> = times.iter().map(|&t| schedule.alpha_bar_at(t)).collect();
        Ok(mse_objective(&self.arch, p, x.data(), times, &abars, target.data()))
    }

    /// Trains on `dataset` with Adam and returns the trained network and a
    /// report. Each step draws a batch of (item, t ~ U{1..T}, ε ~ N(0, I)).
    pub fn train(&self, dataset: &[Tensor], schedule: &NoiseSchedule, config: &TrainConfig) -> Result<(TinyNet, TrainReport)> {
        train(self, dataset, schedule, config)
    }
}

impl ScoreModel for TinyNet {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn predict_noise_batch(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        schedule.check_time(t)?;
        let out = self.forward(x, t, schedule)?;
        if !out.all_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Exponential moving average of the weights, when set.
    pub ema_decay: Option<f64>,
    pub validation_size: usize,
    /// Record the running training loss every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 1000,
            batch: 64,
            seed: 0,
            clip_norm: 1.0,
            ema_decay: None,
            validation_size: 256,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
    /// `(step, mean training loss since the previous entry)`.
    pub curve: Vec<(usize, f64)>,
}

impl TrainReport {
    pub fn improvement(&self) -> f64 {
        self.initial_validation_loss - self.final_validation_loss
    }
}

struct NoisyBatch {
    x: Vec<f32>,
    times: Vec<f64>,
    abars: Vec<f64>,
    eps: Vec<f32>,
}

fn draw_batch(dataset: &[Tensor], schedule: &NoiseSchedule, size: usize, rng: &mut Rng) -> Result<NoisyBatch> {
    let d = dataset[0].len();
    let mut x = Vec::with_capacity(size * d);
    let mut eps_all = Vec::with_capacity(size * d);
    let mut times = Vec::with_capacity(size);
    for _ in 0..size {
        let item = &dataset[rng.gen_range(0..dataset.len())];
        let t = rng.gen_range(1..=schedule.steps());
        let eps = Tensor::randn(item.shape(), rng);
        let xt = diffuse(item, t, &eps, schedule)?;
        x.extend(xt.data().iter().map(|&v| v as f32));
        eps_all.extend(eps.data().iter().map(|&v| v as f32));
        times.push(t as f64);
    }
    let abars = times.iter().map(|&t| schedule.alpha_bar_at(t)).collect();
    Ok(NoisyBatch { x, times, abars, eps: eps_all })
}

fn validation_loss(arch: &Architecture, params: &[f32], batch: &NoisyBatch) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    let d = arch.dim;
    // chunked to bound memory
    for (xs, ((ts, ab), es)) in batch.x.chunks(256 * d).zip(batch.times.chunks(256).zip(batch.abars.chunks(256)).zip(batch.eps.chunks(256 * d))) {
        let pass = forward(arch, params, xs, ts, ab);
        total += pass.out.iter().zip(es).map(|(p, e)| ((p - e) as f64).powi(2)).sum::<f64>();
        count += pass.out.len();
    }
    total / count as f64
}

fn train(net: &TinyNet, dataset: &[Tensor], schedule: &NoiseSchedule, cfg: &TrainConfig) -> Result<(TinyNet, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let arch = net.arch.clone();
    if let Some(bad) = dataset.iter().find(|x| x.len() != arch.dim) {
        return Err(Error::DimensionMismatch { expected: arch.dim, got: bad.len() });
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("batch and learning rate must be positive".into()));
    }
    let mut val_rng = substream(cfg.seed, "validation");
    let val = draw_batch(dataset, schedule, cfg.validation_size.max(1), &mut val_rng)?;
    let initial = validation_loss(&arch, &net.params, &val);

    let mut params = net.params.clone();
    let mut ema = cfg.ema_decay.map(|_| params.clone());
    let mut m = vec![0f32; params.len()];
    let mut v = vec![0f32; params.len()];
    let (b1, b2, eps_adam) = (0.9f64, 0.999f64, 1e-8f64);
    let mut rng = substream(cfg.seed, "train");
    let mut curve = Vec::new();
    let mut running = 0.0;
    let mut running_n = 0usize;

    for step in 1..=cfg.steps {
        let batch = draw_batch(dataset, schedule, cfg.batch, &mut rng)?;
        let (loss, mut grads) = mse_objective(&arch, &params, &batch.x, &batch.times, &batch.abars, &batch.eps);
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        let norm = grads.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        if norm > cfg.clip_norm {
            let s = (cfg.clip_norm / norm) as f32;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        let bc1 = 1.0 - b1.powi(step as i32);
        let bc2 = 1.0 - b2.powi(step as i32);
        let step_size = (cfg.lr * bc2.sqrt() / bc1) as f32;
        let eps_hat = (eps_adam * bc2.sqrt()) as f32;
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        for ((p, g), (mi, vi)) in params.iter_mut().zip(&grads).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = b1f * *mi + (1.0 - b1f) * g;
            *vi = b2f * *vi + (1.0 - b2f) * g * g;
            *p -= step_size * *mi / (vi.sqrt() + eps_hat);
        }
        if let (Some(e), Some(decay)) = (ema.as_mut(), cfg.ema_decay) {
            let d = decay as f32;
            for (ev, p) in e.iter_mut().zip(&params) {
                *ev = d * *ev + (1.0 - d) * p;
            }
        }
        running += loss;
        running_n += 1;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps) {
            let mean = running / running_n as f64;
            log::debug!("step {step}: loss {mean:.5}");
            curve.push((step, mean));
            running = 0.0;
            running_n = 0;
        }
    }

    let final_params = ema.unwrap_or(params);
    let final_loss = validation_loss(&arch, &final_params, &val);
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step: cfg.steps, loss: final_loss });
    }
    let trained = TinyNet { arch, params: final_params };
    Ok((trained, TrainReport { initial_validation_loss: initial, final_validation_loss: final_loss, curve }))
}
