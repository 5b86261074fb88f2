//! Vector-quantisation bottleneck.
//!
//! Nearest-neighbour assignment against a shared `K×D` codebook, the
//! straight-through pass from decoder input back to encoder output, the two
//! codebook/commitment penalties, and the moving-average codebook update.

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Default commitment weight.
pub const DEFAULT_BETA: f32 = 0.25;
/// Default decay for the moving-average codebook update.
pub const DEFAULT_GAMMA: f32 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizerError {
    #[error("codebook is empty (K = 0)")]
    EmptyCodebook,
    #[error("vector has dimension {got}, codebook expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite encoder output")]
    NonFinite,
    #[error("moving-average update requested on a codebook without EMA state")]
    EmaDisabled,
    #[error("latent index {index} out of range for K = {k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, QuantizerError>;

/// Exponential-moving-average accumulators: per-code counts `N` and sums `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub counts: Vec<f32>,
    /// `K×D`.
    pub sums: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `K×D` embedding table.
    pub embeddings: Tensor,
    pub beta: f32,
    pub gamma: f32,
    pub ema: Option<EmaState>,
}

impl Codebook {
    /// Uniform initialisation on `[−1/K, 1/K]`. With EMA enabled the
    /// accumulators start at `N = 1`, `m = e`.
    pub fn new<R: Rng + ?Sized>(
        k: usize,
        dim: usize,
        beta: f32,
        gamma: f32,
        ema: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(QuantizerError::EmptyCodebook);
        }
        let bound = 1.0 / k as f32;
        let embeddings = Tensor::from_fn([k, dim], |_| rng.gen_range(-bound..=bound));
        Ok(Self::from_embeddings(embeddings, beta, gamma, ema))
    }

    pub fn from_embeddings(embeddings: Tensor, beta: f32, gamma: f32, ema: bool) -> Self {
        let ema = ema.then(|| EmaState {
            counts: vec![1.0; embeddings.shape()[0]],
            sums: embeddings.clone(),
        });
        Codebook {
            embeddings,
            beta,
            gamma,
            ema,
        }
    }

    pub fn k(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn ema_enabled(&self) -> bool {
        self.ema.is_some()
    }

    /// Index of the closest embedding under squared ℓ2 distance; ties go to
    /// the lowest index.
    pub fn nearest_code(&self, z: &[f32]) -> Result<usize> {
        nearest_row(&self.embeddings, z)
    }

    /// Assigns every spatial vector of a `B×D×H×W` tensor.
    pub fn assign(&self, z_e: &Tensor) -> Result<LatentGrid> {
        assign_nearest(&self.embeddings, z_e)
    }

    /// Replaces every vector of `z_e` by its nearest embedding.
    pub fn quantize_tensor(&self, z_e: &Tensor) -> Result<(Tensor, LatentGrid)> {
        let grid = self.assign(z_e)?;
        let z_q = self.embed(&grid)?;
        Ok((z_q, grid))
    }

    /// `B×D×H×W` tensor of the embeddings selected by `grid`.
    pub fn embed(&self, grid: &LatentGrid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let table = tape.constant(self.embeddings.clone());
        let out = tape.gather_rows(table, &grid.indices, (grid.batch, grid.height, grid.width))?;
        Ok(tape.value(out).clone())
    }

    /// One moving-average step using the assignments of a batch:
    ///
    /// `N ← γN + (1−γ)n`, `m ← γm + (1−γ)Σz`, `e ← m / N`.
    ///
    /// Codes that received no vectors keep decaying; if a count reaches
    /// exactly zero (only possible with γ = 0) the embedding is left as is.
    pub fn ema_update(&mut self, z_e: &Tensor, grid: &LatentGrid) -> Result<()> {
        let (k, d) = (self.k(), self.dim());
        let gamma = self.gamma;
        let Some(state) = self.ema.as_mut() else {
            return Err(QuantizerError::EmaDisabled);
        };
        let (b, zd, h, w) = z_e.dims4("ema_update")?;
        if zd != d {
            return Err(QuantizerError::Dimension {
                expected: d,
                got: zd,
            });
        }
        if (grid.batch, grid.height, grid.width) != (b, h, w) {
            return Err(TensorError::Shape {
                op: "ema_update",
                detail: format!(
                    "grid {}×{}×{} does not match encoder output {b}×{h}×{w}",
                    grid.batch, grid.height, grid.width
                ),
            }
            .into());
        }
        let hw = h * w;
        let mut counts = vec![0u64; k];
        let mut sums = vec![0.0f64; k * d];
        for bi in 0..b {
            for p in 0..hw {
                let code = grid.indices[bi * hw + p];
                counts[code] += 1;
                for di in 0..d {
                    sums[code * d + di] += z_e.data()[(bi * d + di) * hw + p] as f64;
                }
            }
        }
        let keep = gamma;
        let fresh = 1.0 - gamma;
        for i in 0..k {
            state.counts[i] = state.counts[i] * keep + counts[i] as f32 * fresh;
            let n = state.counts[i];
            for di in 0..d {
                let m = &mut state.sums.data_mut()[i * d + di];
                *m = *m * keep + sums[i * d + di] as f32 * fresh;
                if n > 0.0 {
                    self.embeddings.data_mut()[i * d + di] = *m / n;
                }
            }
        }
        Ok(())
    }
}

fn nearest_row(table: &Tensor, z: &[f32]) -> Result<usize> {
    let (k, d) = (table.shape()[0], table.shape()[1]);
    if k == 0 {
        return Err(QuantizerError::EmptyCodebook);
    }
    if z.len() != d {
        return Err(QuantizerError::Dimension {
            expected: d,
            got: z.len(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(QuantizerError::NonFinite);
    }
    let mut best = (0, f32::INFINITY);
    for (j, row) in table.data().chunks_exact(d).enumerate() {
        let dist: f32 = row.iter().zip(z).map(|(e, x)| (x - e) * (x - e)).sum();
        if dist < best.1 {
            best = (j, dist);
        }
    }
    Ok(best.0)
}

fn assign_nearest(table: &Tensor, z_e: &Tensor) -> Result<LatentGrid> {
    let (b, d, h, w) = z_e.dims4("quantize")?;
    let (k, kd) = (table.shape()[0], table.shape()[1]);
    if d != kd {
        return Err(QuantizerError::Dimension { expected: kd, got: d });
    }
    let hw = h * w;
    let mut indices = Vec::with_capacity(b * hw);
    let mut v = vec![0.0f32; d];
    for bi in 0..b {
        for p in 0..hw {
            for (di, slot) in v.iter_mut().enumerate() {
                *slot = z_e.data()[(bi * d + di) * hw + p];
            }
            indices.push(nearest_row(table, &v)?);
        }
    }
    Ok(LatentGrid {
        indices,
        batch: b,
        height: h,
        width: w,
        k,
    })
}

/// Integer code grid `batch × height × width`, entries in `[0, k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentGrid {
    pub indices: Vec<usize>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
}

impl LatentGrid {
    pub fn new(
        indices: Vec<usize>,
        batch: usize,
        height: usize,
        width: usize,
        k: usize,
    ) -> Result<Self> {
        if indices.len() != batch * height * width {
            return Err(TensorError::Length {
                shape: vec![batch, height, width],
                len: indices.len(),
                expected: batch * height * width,
            }
            .into());
        }
        if let Some(&index) = indices.iter().find(|&&i| i >= k) {
            return Err(QuantizerError::IndexOutOfRange { index, k });
        }
        Ok(LatentGrid {
            indices,
            batch,
            height,
            width,
            k,
        })
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Grid of a single batch element.
    pub fn item(&self, b: usize) -> LatentGrid {
        let n = self.positions();
        LatentGrid {
            indices: self.indices[b * n..(b + 1) * n].to_vec(),
            batch: 1,
            height: self.height,
            width: self.width,
            k: self.k,
        }
    }

    /// Concatenates grids of identical spatial shape along the batch axis.
    pub fn concat(grids: &[LatentGrid]) -> Option<LatentGrid> {
        let first = grids.first()?;
        let mut indices = Vec::new();
        for g in grids {
            if (g.height, g.width, g.k) != (first.height, first.width, first.k) {
                return None;
            }
            indices.extend_from_slice(&g.indices);
        }
        Some(LatentGrid {
            batch: indices.len() / first.positions(),
            indices,
            height: first.height,
            width: first.width,
            k: first.k,
        })
    }

    /// Rows `batch_indices` of this grid.
    pub fn select(&self, batch_indices: &[usize]) -> LatentGrid {
        let n = self.positions();
        let mut indices = Vec::with_capacity(n * batch_indices.len());
        for &b in batch_indices {
            indices.extend_from_slice(&self.indices[b * n..(b + 1) * n]);
        }
        LatentGrid {
            indices,
            batch: batch_indices.len(),
            height: self.height,
            width: self.width,
            k: self.k,
        }
    }
}

/// Output of [`quantize`].
#[derive(Debug)]
pub struct Quantized {
    /// Decoder input; equals the selected embeddings in value, and passes
    /// its gradient straight to the encoder output.
    pub z_q: Var,
    /// Selected embeddings as a differentiable function of the codebook.
    pub selected: Var,
    pub grid: LatentGrid,
}

/// Quantises an encoder output `z_e` (B×D×H×W) against the `K×D` table
/// recorded at `embeddings`.
pub fn quantize(tape: &mut Tape, z_e: Var, embeddings: Var) -> Result<Quantized> {
    let grid = assign_nearest(tape.value(embeddings), tape.value(z_e))?;
    let selected = tape.gather_rows(embeddings, &grid.indices, (grid.batch, grid.height, grid.width))?;
    let value = tape.value(selected).clone();
    let z_q = tape.straight_through(z_e, value)?;
    Ok(Quantized { z_q, selected, grid })
}

/// Codebook and commitment penalties, each the mean over latent positions
/// of a squared ℓ2 distance:
///
/// * codebook: `‖sg[z_e] − e‖²` (gradient reaches the embeddings only)
/// * commitment: `‖z_e − sg[e]‖²` (gradient reaches the encoder only)
pub fn vq_loss_terms(tape: &mut Tape, z_e: Var, selected: Var) -> Result<(Var, Var)> {
    let (b, _, h, w) = tape.value(z_e).dims4("vq_loss_terms")?;
    if tape.value(selected).shape() != tape.value(z_e).shape() {
        return Err(TensorError::Shape {
            op: "vq_loss_terms",
            detail: format!(
                "{:?} vs {:?}",
                tape.value(z_e).shape(),
                tape.value(selected).shape()
            ),
        }
        .into());
    }
    let inv_n = 1.0 / (b * h * w) as f32;

    let frozen_z = tape.stop_gradient(z_e)?;
    let diff = tape.sub(frozen_z, selected)?;
    let sq = tape.square(diff)?;
    let sum = tape.sum(sq)?;
    let codebook = tape.mul_scalar(sum, inv_n)?;

    let frozen_e = tape.stop_gradient(selected)?;
    let diff = tape.sub(z_e, frozen_e)?;
    let sq = tape.square(diff)?;
    let sum = tape.sum(sq)?;
    let commit = tape.mul_scalar(sum, inv_n)?;
    Ok((codebook, commit))
}

/// `recon + codebook + β·commit`; the codebook term is dropped when the
/// embeddings are maintained by moving averages.
pub fn total_loss(
    tape: &mut Tape,
    recon_nll: Var,
    codebook_loss: Var,
    commit_loss: Var,
    beta: f32,
    ema: bool,
) -> Result<Var> {
    let weighted = tape.mul_scalar(commit_loss, beta)?;
    let mut total = tape.add(recon_nll, weighted)?;
    if !ema {
        total = tape.add(total, codebook_loss)?;
    }
    Ok(total)
}

/// KL divergence from the one-hot posterior to a uniform prior over `K`
/// codes: `ln K` nats.
pub fn kl_to_uniform_prior(k: usize) -> f64 {
    (k as f64).ln()
}

/// Code-usage histogram and its perplexity `exp(H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookStats {
    pub histogram: Vec<u64>,
    pub perplexity: f64,
}

impl CodebookStats {
    pub fn empty(k: usize) -> Self {
        CodebookStats {
            histogram: vec![0; k],
            perplexity: 1.0,
        }
    }

    pub fn add(&mut self, grid: &LatentGrid) {
        for &i in &grid.indices {
            self.histogram[i] += 1;
        }
        self.perplexity = perplexity(&self.histogram);
    }

    pub fn total(&self) -> u64 {
        self.histogram.iter().sum()
    }
}

pub fn codebook_stats<'a>(grids: impl IntoIterator<Item = &'a LatentGrid>, k: usize) -> CodebookStats {
    let mut stats = CodebookStats::empty(k);
    for g in grids {
        for &i in &g.indices {
            stats.histogram[i] += 1;
        }
    }
    stats.perplexity = perplexity(&stats.histogram);
    stats
}

/// `exp` of the entropy of a count histogram; 1 for an empty histogram.
pub fn perplexity(histogram: &[u64]) -> f64 {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let t = total as f64;
    let entropy: f64 = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}
