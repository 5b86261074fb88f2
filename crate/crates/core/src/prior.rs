//! Autoregressive categorical prior over latent index grids.
//!
//! A stack of spatially masked convolutions in raster order: the first layer
//! (type A) cannot see the current position, later layers (type B) may see
//! the current position of the previous layer's features. Grid entries enter
//! the network as learned embeddings.

use rand::Rng;

use crate::nets::{he_normal, Bound, ModelError, Params, Result, VqVae};
use crate::quantizer::{kl_to_uniform_prior, LatentGrid};
use crate::tensor::{Tape, Tensor, Var};

pub const EMBED: &str = "prior.embed";
pub const OUT_WEIGHT: &str = "prior.out.weight";
pub const OUT_BIAS: &str = "prior.out.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Excludes the centre tap.
    A,
    /// Includes the centre tap.
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    /// Number of masked convolutions (the first is type A).
    pub layers: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
    /// Odd square window of every masked convolution.
    pub kernel_size: usize,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            height: 7,
            width: 7,
            k: 512,
            layers: 5,
            hidden: 64,
            embedding_dim: 64,
            kernel_size: 5,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Spec(m));
        if self.height == 0 || self.width == 0 {
            return bad("prior grid must be non-empty".into());
        }
        if self.k == 0 {
            return bad("prior k must be at least 1".into());
        }
        if self.layers == 0 || self.hidden == 0 || self.embedding_dim == 0 {
            return bad("prior layers, hidden and embedding_dim must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("prior kernel_size must be odd, got {}", self.kernel_size));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn mask_kind(&self, layer: usize) -> MaskKind {
        if layer == 0 {
            MaskKind::A
        } else {
            MaskKind::B
        }
    }
}

/// `[out, in, k, k]` tensor of ones on the causal taps and zeros elsewhere.
pub fn causal_mask(out_ch: usize, in_ch: usize, k: usize, kind: MaskKind) -> Tensor {
    let c = k / 2;
    Tensor::from_fn([out_ch, in_ch, k, k], |i| {
        let (r, s) = ((i / k) % k, i % k);
        let open = r < c || (r == c && (s < c || (s == c && kind == MaskKind::B)));
        if open {
            1.0
        } else {
            0.0
        }
    })
}

fn layer_name(i: usize) -> String {
    format!("prior.layer{i}")
}

fn layer_in(spec: &PriorSpec, i: usize) -> usize {
    if i == 0 {
        spec.embedding_dim
    } else {
        spec.hidden
    }
}

/// Masked-convolution prior with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Prior {
    pub spec: PriorSpec,
    pub params: Params,
}

impl Prior {
    pub fn new<R: Rng + ?Sized>(spec: PriorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = Params::new();
        let ks = spec.kernel_size;
        params.insert(
            EMBED,
            Tensor::from_fn([spec.k, spec.embedding_dim], |_| rng.gen_range(-1.0..1.0)),
        );
        for i in 0..spec.layers {
            let cin = layer_in(&spec, i);
            let mask = causal_mask(spec.hidden, cin, ks, spec.mask_kind(i));
            let open = mask.data().iter().filter(|&&m| m != 0.0).count() / spec.hidden;
            let mut w = he_normal([spec.hidden, cin, ks, ks], open.max(1), rng);
            for (v, m) in w.data_mut().iter_mut().zip(mask.data()) {
                *v *= m;
            }
            params.insert(format!("{}.weight", layer_name(i)), w);
            params.insert(format!("{}.bias", layer_name(i)), Tensor::zeros([spec.hidden]));
        }
        params.insert(
            OUT_WEIGHT,
            he_normal([spec.k, spec.hidden, 1, 1], spec.hidden, rng),
        );
        params.insert(OUT_BIAS, Tensor::zeros([spec.k]));
        Ok(Prior { spec, params })
    }

    fn check_grid(&self, grid: &LatentGrid) -> Result<()> {
        if grid.height != self.spec.height || grid.width != self.spec.width {
            return Err(ModelError::Input {
                expected: vec![self.spec.height, self.spec.width],
                got: vec![grid.height, grid.width],
            });
        }
        if grid.k != self.spec.k {
            return Err(ModelError::Spec(format!(
                "grid has K={} but the prior models K={}",
                grid.k, self.spec.k
            )));
        }
        Ok(())
    }

    /// Records the logits for `grid` on `tape`; returns a B×K×H×W var.
    pub fn logits_on(&self, tape: &mut Tape, b: &Bound, grid: &LatentGrid) -> Result<Var> {
        self.check_grid(grid)?;
        let s = &self.spec;
        let mut h = tape.gather_rows(b[EMBED], &grid.indices, (grid.batch, s.height, s.width))?;
        for i in 0..s.layers {
            if i > 0 {
                h = tape.relu(h)?;
            }
            let name = layer_name(i);
            let mask = tape.constant(causal_mask(
                s.hidden,
                layer_in(s, i),
                s.kernel_size,
                s.mask_kind(i),
            ));
            let w = tape.mul(b[&format!("{name}.weight")[..]], mask)?;
            h = tape.conv2d(h, w, 1, s.kernel_size / 2)?;
            h = tape.add_bias(h, b[&format!("{name}.bias")[..]])?;
        }
        h = tape.relu(h)?;
        let logits = tape.conv2d(h, b[OUT_WEIGHT], 1, 0)?;
        Ok(tape.add_bias(logits, b[OUT_BIAS])?)
    }

    /// Summed negative log-likelihood (nats) of every grid in the batch.
    pub fn nll_on(&self, tape: &mut Tape, b: &Bound, grid: &LatentGrid) -> Result<Var> {
        let logits = self.logits_on(tape, b, grid)?;
        Ok(tape.cross_entropy(logits, &grid.indices)?)
    }

    pub fn logits(&self, grid: &LatentGrid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let l = self.logits_on(&mut tape, &b, grid)?;
        Ok(tape.value(l).clone())
    }

    /// Negative log-likelihood in nats of each grid in the batch.
    pub fn nll_per_grid(&self, grid: &LatentGrid) -> Result<Vec<f64>> {
        let logits = self.logits(grid)?;
        let (k, hw) = (self.spec.k, self.spec.positions());
        let l = logits.data();
        Ok((0..grid.batch)
            .map(|bi| {
                (0..hw)
                    .map(|p| {
                        let at = |ki: usize| l[(bi * k + ki) * hw + p] as f64;
                        log_sum_exp((0..k).map(at)) - at(grid.indices[bi * hw + p])
                    })
                    .sum()
            })
            .collect())
    }

    /// Total negative log-likelihood in nats over the batch.
    pub fn nll(&self, grid: &LatentGrid) -> Result<f64> {
        Ok(self.nll_per_grid(grid)?.iter().sum())
    }

    /// Ancestral sampling in raster order. Each step re-runs the network on
    /// the partially filled grid; positions not yet sampled hold index 0 and
    /// cannot influence the current logits.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Result<LatentGrid> {
        let s = &self.spec;
        let hw = s.positions();
        let mut grid = LatentGrid::new(vec![0; batch * hw], batch, s.height, s.width, s.k)?;
        for p in 0..hw {
            let logits = self.logits(&grid)?;
            for bi in 0..batch {
                let row: Vec<f64> = (0..s.k)
                    .map(|ki| logits.data()[(bi * s.k + ki) * hw + p] as f64)
                    .collect();
                grid.indices[bi * hw + p] = sample_categorical(&row, rng);
            }
        }
        Ok(grid)
    }
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax probabilities of `logits`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits.iter().copied());
    logits.iter().map(|&l| (l - lse).exp()).collect()
}

/// Inverse-CDF draw from softmax(`logits`) using one uniform variate.
pub fn sample_categorical<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let probs = softmax(logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just short of 1; take the last code with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Per-image likelihood bound, averaged over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboBound {
    pub recon_nll: f64,
    pub prior_nll: f64,
    pub total: f64,
    pub bits_per_dim: f64,
}

impl ElboBound {
    /// `total = recon + prior` nats; bits/dim divides by `dims · ln 2`.
    pub fn from_parts(recon_nll: f64, prior_nll: f64, dims: usize) -> Self {
        let total = recon_nll + prior_nll;
        ElboBound {
            recon_nll,
            prior_nll,
            total,
            bits_per_dim: total / (dims as f64 * std::f64::consts::LN_2),
        }
    }
}

/// Prior nats of a whole grid under the uniform prior.
pub fn uniform_prior_nll(positions: usize, k: usize) -> f64 {
    positions as f64 * kl_to_uniform_prior(k)
}

/// Mean bound over the images of `x`, evaluated in batches. Without a prior
/// the uniform `ln K` per position is used.
pub fn elbo_bound(
    x: &Tensor,
    vqvae: &VqVae,
    prior: Option<&Prior>,
    batch_size: usize,
) -> Result<ElboBound> {
    let n = x.shape()[0];
    let (mut recon, mut prior_nats) = (0.0f64, 0.0f64);
    let (lh, lw) = vqvae.spec.latent_shape();
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
        let xb = x.select_batch(&idx);
        let r = vqvae.reconstruct(&xb)?;
        recon += r.recon_nll.iter().sum::<f64>();
        prior_nats += match prior {
            Some(p) => p.nll(&r.grid)?,
            None => idx.len() as f64 * uniform_prior_nll(lh * lw, vqvae.spec.codebook_size),
        };
    }
    let n = n.max(1) as f64;
    Ok(ElboBound::from_parts(
        recon / n,
        prior_nats / n,
        vqvae.spec.data_dims(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(h: usize, w: usize, k: usize) -> Prior {
        let spec = PriorSpec {
            height: h,
            width: w,
            k,
            layers: 3,
            hidden: 6,
            embedding_dim: 4,
            kernel_size: 3,
        };
        Prior::new(spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn masks_open_only_causal_taps() {
        let a = causal_mask(1, 1, 3, MaskKind::A);
        assert_eq!(a.data(), &[1., 1., 1., 1., 0., 0., 0., 0., 0.]);
        let b = causal_mask(1, 1, 3, MaskKind::B);
        assert_eq!(b.data(), &[1., 1., 1., 1., 1., 0., 0., 0., 0.]);
    }

    #[test]
    fn single_position_logits_ignore_the_input() {
        let p = tiny(1, 1, 4);
        let l0 = p.logits(&LatentGrid::new(vec![0], 1, 1, 1, 4).unwrap()).unwrap();
        for v in 1..4 {
            let l = p.logits(&LatentGrid::new(vec![v], 1, 1, 1, 4).unwrap()).unwrap();
            assert_eq!(l.data(), l0.data());
        }
    }

    #[test]
    fn zeroed_network_is_uniform() {
        let mut p = tiny(2, 3, 5);
        for (_, t) in p.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let grid = LatentGrid::new(vec![0, 1, 2, 3, 4, 0], 1, 2, 3, 5).unwrap();
        let want = 6.0 * 5f64.ln();
        assert!((p.nll(&grid).unwrap() - want).abs() < 1e-5);
    }

    #[test]
    fn two_way_zero_logits_cost_ln2() {
        let mut p = tiny(1, 1, 2);
        p.params.get_mut(OUT_WEIGHT).unwrap().data_mut().fill(0.0);
        let grid = LatentGrid::new(vec![0], 1, 1, 1, 2).unwrap();
        assert!((p.nll(&grid).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn rejects_mismatched_grids() {
        let p = tiny(2, 2, 3);
        assert!(p.logits(&LatentGrid::new(vec![0; 9], 1, 3, 3, 3).unwrap()).is_err());
        assert!(p.logits(&LatentGrid::new(vec![0; 4], 1, 2, 2, 4).unwrap()).is_err());
    }

    #[test]
    fn forced_logits_sample_the_argmax() {
        let mut p = tiny(2, 2, 3);
        p.params.get_mut(OUT_WEIGHT).unwrap().data_mut().fill(0.0);
        p.params
            .get_mut(OUT_BIAS)
            .unwrap()
            .data_mut()
            .copy_from_slice(&[-1e4, 1e4, -1e4]);
        let g = p.sample(&mut ChaCha8Rng::seed_from_u64(0), 3).unwrap();
        assert!(g.indices.iter().all(|&i| i == 1));
    }

    #[test]
    fn sampling_is_seeded() {
        let p = tiny(3, 3, 4);
        let a = p.sample(&mut ChaCha8Rng::seed_from_u64(9), 2).unwrap();
        let b = p.sample(&mut ChaCha8Rng::seed_from_u64(9), 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_bound_on_mnist_shape() {
        // 7×7 codes of 5 bits each over 784 pixels.
        let prior = uniform_prior_nll(49, 32);
        let b = ElboBound::from_parts(0.0, prior, 784);
        assert!((b.bits_per_dim - 0.3125).abs() < 1e-12);
    }
}
