//! Convolutional encoder/decoder with residual blocks, and the pixel
//! likelihoods used for the reconstruction term.

use std::collections::BTreeMap;
use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::quantizer::{self, Codebook, LatentGrid, Quantized, QuantizerError};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Fixed standard deviation of the Gaussian pixel likelihood; with
/// `σ² = 1/2` the negative log-likelihood is the squared error plus a
/// constant.
pub const GAUSSIAN_SIGMA: f32 = std::f32::consts::FRAC_1_SQRT_2;

const DOWN_KERNEL: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("input {got:?} does not match model input {expected:?}")]
    Input { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Likelihood {
    /// Gaussian with fixed σ = [`GAUSSIAN_SIGMA`]; decoder emits C means.
    Gaussian,
    /// Discretised logistic over 256 levels; decoder emits C means and C
    /// log-scales.
    Logistic,
}

impl Likelihood {
    pub fn as_str(self) -> &'static str {
        match self {
            Likelihood::Gaussian => "gaussian",
            Likelihood::Logistic => "logistic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(Likelihood::Gaussian),
            "logistic" => Some(Likelihood::Logistic),
            _ => None,
        }
    }

    pub fn output_channels(self, in_channels: usize) -> usize {
        match self {
            Likelihood::Gaussian => in_channels,
            Likelihood::Logistic => 2 * in_channels,
        }
    }
}

/// Topology and hyperparameters of the autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    /// Channels inside each residual block (3×3 conv output).
    pub residual_hidden: usize,
    /// Number of stride-2 4×4 convolutions in the encoder (and transposed
    /// convolutions in the decoder).
    pub stages: usize,
    pub residual_blocks: usize,
    pub embedding_dim: usize,
    pub codebook_size: usize,
    pub beta: f32,
    pub gamma: f32,
    pub ema: bool,
    pub likelihood: Likelihood,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            in_channels: 1,
            height: 28,
            width: 28,
            hidden: 256,
            residual_hidden: 256,
            stages: 2,
            residual_blocks: 2,
            embedding_dim: 64,
            codebook_size: 512,
            beta: quantizer::DEFAULT_BETA,
            gamma: quantizer::DEFAULT_GAMMA,
            ema: false,
            likelihood: Likelihood::Gaussian,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Spec(m));
        if !matches!(self.in_channels, 1 | 3) {
            return bad(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        if self.stages == 0 {
            return bad("stages must be at least 1".into());
        }
        let f = 1usize << self.stages;
        if self.height == 0 || self.width == 0 || self.height % f != 0 || self.width % f != 0 {
            return bad(format!(
                "input {}×{} is not divisible by 2^{} = {f}",
                self.height, self.width, self.stages
            ));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("residual_hidden", self.residual_hidden),
            ("embedding_dim", self.embedding_dim),
            ("codebook_size", self.codebook_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    /// Spatial size of the latent grid.
    pub fn latent_shape(&self) -> (usize, usize) {
        (self.height >> self.stages, self.width >> self.stages)
    }

    pub fn data_dims(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// Named parameter table with a deterministic (sorted) iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        )
    }
}

/// Parameter name → tape handle for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.0.get(name).copied()
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.0.insert(name.into(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

impl Index<&str> for Bound {
    type Output = Var;
    fn index(&self, name: &str) -> &Var {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}

/// He-normal kernel with `std = sqrt(2 / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(shape: [usize; 4], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f32 = StandardNormal.sample(rng);
        z * std
    })
}

fn add_conv<R: Rng + ?Sized>(
    p: &mut Params,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    rng: &mut R,
) {
    p.insert(
        format!("{name}.weight"),
        he_normal([out_ch, in_ch, k, k], in_ch * k * k, rng),
    );
    p.insert(format!("{name}.bias"), Tensor::zeros([out_ch]));
}

/// Transposed-conv kernels are stored `[in, out, k, k]`.
fn add_conv_transpose<R: Rng + ?Sized>(
    p: &mut Params,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    rng: &mut R,
) {
    let fan_in = (in_ch * k * k / (stride * stride)).max(1);
    p.insert(
        format!("{name}.weight"),
        he_normal([in_ch, out_ch, k, k], fan_in, rng),
    );
    p.insert(format!("{name}.bias"), Tensor::zeros([out_ch]));
}

fn add_residual<R: Rng + ?Sized>(p: &mut Params, name: &str, ch: usize, inner: usize, rng: &mut R) {
    add_conv(p, &format!("{name}.conv3"), inner, ch, 3, rng);
    add_conv(p, &format!("{name}.conv1"), ch, inner, 1, rng);
}

fn conv(
    tape: &mut Tape,
    b: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> std::result::Result<Var, TensorError> {
    let y = tape.conv2d(x, b[&format!("{name}.weight")[..]], stride, pad)?;
    tape.add_bias(y, b[&format!("{name}.bias")[..]])
}

fn conv_transpose(
    tape: &mut Tape,
    b: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> std::result::Result<Var, TensorError> {
    let y = tape.conv_transpose2d(x, b[&format!("{name}.weight")[..]], stride, pad)?;
    tape.add_bias(y, b[&format!("{name}.bias")[..]])
}

/// `x + conv1x1(relu(conv3x3(relu(x))))`.
pub fn residual_block(
    tape: &mut Tape,
    b: &Bound,
    name: &str,
    x: Var,
) -> std::result::Result<Var, TensorError> {
    let h = tape.relu(x)?;
    let h = conv(tape, b, &format!("{name}.conv3"), h, 1, 1)?;
    let h = tape.relu(h)?;
    let h = conv(tape, b, &format!("{name}.conv1"), h, 1, 0)?;
    tape.add(x, h)
}

/// Builds the parameter table for `spec`.
pub fn init_params<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Params {
    let mut p = Params::new();
    let (h, r) = (spec.hidden, spec.residual_hidden);
    for i in 0..spec.stages {
        let in_ch = if i == 0 { spec.in_channels } else { h };
        add_conv(&mut p, &format!("enc.down{i}"), h, in_ch, DOWN_KERNEL, rng);
    }
    for j in 0..spec.residual_blocks {
        add_residual(&mut p, &format!("enc.res{j}"), h, r, rng);
    }
    add_conv(&mut p, "enc.proj", spec.embedding_dim, h, 1, rng);

    add_conv(&mut p, "dec.proj", h, spec.embedding_dim, 3, rng);
    for j in 0..spec.residual_blocks {
        add_residual(&mut p, &format!("dec.res{j}"), h, r, rng);
    }
    let out = spec.likelihood.output_channels(spec.in_channels);
    for i in 0..spec.stages {
        let out_ch = if i + 1 == spec.stages { out } else { h };
        add_conv_transpose(&mut p, &format!("dec.up{i}"), h, out_ch, DOWN_KERNEL, 2, rng);
    }
    p
}

/// Encoder: strided 4×4 convolutions, residual stack, 1×1 projection to D.
pub fn encode(spec: &ModelSpec, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape();
    if shape.len() != 4 || shape[1..] != spec.input_shape() {
        return Err(ModelError::Input {
            expected: spec.input_shape().to_vec(),
            got: shape.to_vec(),
        });
    }
    let mut h = x;
    for i in 0..spec.stages {
        h = conv(tape, b, &format!("enc.down{i}"), h, 2, 1)?;
        h = tape.relu(h)?;
    }
    for j in 0..spec.residual_blocks {
        h = residual_block(tape, b, &format!("enc.res{j}"), h)?;
    }
    h = tape.relu(h)?;
    Ok(conv(tape, b, "enc.proj", h, 1, 0)?)
}

/// Decoder: 3×3 projection, residual stack, stride-2 transposed convolutions.
/// Returns the likelihood parameters (N×C or N×2C at input resolution).
pub fn decode(spec: &ModelSpec, tape: &mut Tape, b: &Bound, z_q: Var) -> Result<Var> {
    let (lh, lw) = spec.latent_shape();
    let shape = tape.value(z_q).shape();
    if shape.len() != 4 || shape[1..] != [spec.embedding_dim, lh, lw] {
        return Err(ModelError::Input {
            expected: vec![spec.embedding_dim, lh, lw],
            got: shape.to_vec(),
        });
    }
    let mut h = conv(tape, b, "dec.proj", z_q, 1, 1)?;
    for j in 0..spec.residual_blocks {
        h = residual_block(tape, b, &format!("dec.res{j}"), h)?;
    }
    h = tape.relu(h)?;
    for i in 0..spec.stages {
        h = conv_transpose(tape, b, &format!("dec.up{i}"), h, 2, 1)?;
        if i + 1 < spec.stages {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Gaussian negative log-likelihood with fixed `sigma`, averaged over the
/// batch: `Σ_pixels (x−μ)²/(2σ²) + ½ln(2πσ²)` per image.
pub fn gaussian_nll(tape: &mut Tape, mean: Var, x: &Tensor, sigma: f32) -> Result<Var> {
    let n = x.shape()[0].max(1);
    let pixels = x.numel() / n;
    let target = tape.constant(x.clone());
    let diff = tape.sub(mean, target)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    let var = sigma as f64 * sigma as f64;
    let scaled = tape.mul_scalar(s, (1.0 / (2.0 * var * n as f64)) as f32)?;
    let log_norm = 0.5 * (2.0 * std::f64::consts::PI * var).ln();
    Ok(tape.add_scalar(scaled, (pixels as f64 * log_norm) as f32)?)
}

/// Discretised-logistic negative log-likelihood, averaged over the batch.
pub fn logistic_nll(tape: &mut Tape, params: Var, x: &Tensor) -> Result<Var> {
    let n = x.shape()[0].max(1);
    let per_pixel = tape.discretized_logistic_nll(params, x)?;
    let s = tape.sum(per_pixel)?;
    Ok(tape.mul_scalar(s, 1.0 / n as f32)?)
}

/// Reconstruction term in nats per image.
pub fn reconstruction_nll(
    tape: &mut Tape,
    likelihood: Likelihood,
    out: Var,
    x: &Tensor,
) -> Result<Var> {
    match likelihood {
        Likelihood::Gaussian => gaussian_nll(tape, out, x, GAUSSIAN_SIGMA),
        Likelihood::Logistic => logistic_nll(tape, out, x),
    }
}

/// Per-pixel mean image from decoder output.
pub fn output_mean(likelihood: Likelihood, out: &Tensor) -> Result<Tensor> {
    match likelihood {
        Likelihood::Gaussian => Ok(out.clone()),
        Likelihood::Logistic => {
            let (n, c2, h, w) = out.dims4("output_mean")?;
            let c = c2 / 2;
            let hw = h * w;
            let mut data = Vec::with_capacity(n * c * hw);
            for ni in 0..n {
                data.extend_from_slice(&out.data()[ni * c2 * hw..][..c * hw]);
            }
            Ok(Tensor::new([n, c, h, w], data)?)
        }
    }
}

/// Name of the embedding table when bound on a tape or stored in a
/// checkpoint.
pub const EMBEDDINGS: &str = "codebook.embeddings";

/// Encoder, codebook and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct VqVae {
    pub spec: ModelSpec,
    pub params: Params,
    pub codebook: Codebook,
}

/// Handles produced by one training forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub bound: Bound,
    pub embeddings: Var,
    pub z_e: Var,
    pub quantized: Quantized,
    pub out: Var,
    pub recon_nll: Var,
    pub codebook_loss: Var,
    pub commit_loss: Var,
    pub total: Var,
}

/// Evaluation outputs for a batch.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub mean: Tensor,
    pub grid: LatentGrid,
    /// Reconstruction nats per image.
    pub recon_nll: Vec<f64>,
}

impl VqVae {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec, rng);
        let codebook = Codebook::new(
            spec.codebook_size,
            spec.embedding_dim,
            spec.beta,
            spec.gamma,
            spec.ema,
            rng,
        )?;
        Ok(VqVae {
            spec,
            params,
            codebook,
        })
    }

    /// Binds network parameters and the embedding table. Embeddings only
    /// require a gradient when they are trained by the loss (EMA disabled).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (Bound, Var) {
        let bound = self.params.bind(tape, trainable);
        let emb = tape.leaf(
            self.codebook.embeddings.clone(),
            trainable && !self.codebook.ema_enabled(),
        );
        (bound, emb)
    }

    /// Full training graph: encode → quantise → decode → loss terms.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, trainable: bool) -> Result<ForwardPass> {
        let (bound, embeddings) = self.bind(tape, trainable);
        let xv = tape.constant(x.clone());
        let z_e = encode(&self.spec, tape, &bound, xv)?;
        let quantized = quantizer::quantize(tape, z_e, embeddings)?;
        let out = decode(&self.spec, tape, &bound, quantized.z_q)?;
        let recon_nll = reconstruction_nll(tape, self.spec.likelihood, out, x)?;
        let (codebook_loss, commit_loss) = quantizer::vq_loss_terms(tape, z_e, quantized.selected)?;
        let total = quantizer::total_loss(
            tape,
            recon_nll,
            codebook_loss,
            commit_loss,
            self.codebook.beta,
            self.codebook.ema_enabled(),
        )?;
        Ok(ForwardPass {
            bound,
            embeddings,
            z_e,
            quantized,
            out,
            recon_nll,
            codebook_loss,
            commit_loss,
            total,
        })
    }

    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = encode(&self.spec, &mut tape, &b, xv)?;
        Ok(tape.value(z).clone())
    }

    pub fn encode_grid(&self, x: &Tensor) -> Result<LatentGrid> {
        Ok(self.codebook.assign(&self.encode_tensor(x)?)?)
    }

    /// Decoder output (likelihood parameters) for a code grid.
    pub fn decode_grid(&self, grid: &LatentGrid) -> Result<Tensor> {
        let z_q = self.codebook.embed(grid)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let zv = tape.constant(z_q);
        let out = decode(&self.spec, &mut tape, &b, zv)?;
        Ok(tape.value(out).clone())
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Reconstruction> {
        let grid = self.encode_grid(x)?;
        let out = self.decode_grid(&grid)?;
        let mut recon_nll = Vec::with_capacity(grid.batch);
        for i in 0..grid.batch {
            let xi = x.select_batch(&[i]);
            let oi = out.select_batch(&[i]);
            let mut tape = Tape::new();
            let ov = tape.constant(oi);
            let nll = reconstruction_nll(&mut tape, self.spec.likelihood, ov, &xi)?;
            recon_nll.push(tape.value(nll).item() as f64);
        }
        Ok(Reconstruction {
            mean: output_mean(self.spec.likelihood, &out)?,
            grid,
            recon_nll,
        })
    }
}
