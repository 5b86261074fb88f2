//! Optimisation loops for the autoencoder and the prior, Adam, gradient
//! routing diagnostics and dataset evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::nets::{ModelError, ModelSpec, VqVae, EMBEDDINGS};
use crate::prior::{uniform_prior_nll, ElboBound, Prior, PriorSpec};
use crate::quantizer::{perplexity, CodebookStats, LatentGrid, QuantizerError};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const DEFAULT_LR: f32 = 2e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("{0}")]
    Observer(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<QuantizerError> for TrainError {
    fn from(e: QuantizerError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Bias-corrected Adam with per-parameter moments keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Number of completed updates.
    pub t: u64,
    /// name → (first moment, second moment).
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Starts a new update; call once before the per-parameter updates.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Applies one update to `param` using moments stored under `name`.
    pub fn update(&mut self, name: &str, param: &mut [f32], grad: &[f32]) {
        assert_eq!(param.len(), grad.len(), "gradient length for `{name}`");
        assert!(self.t > 0, "Adam::update before tick");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = (1.0 - (b1 as f64).powi(self.t as i32)) as f32;
        let c2 = (1.0 - (b2 as f64).powi(self.t as i32)) as f32;
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            param[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    /// Steps between metrics records passed to the observer's `evaluate`
    /// hook; 0 disables.
    pub eval_interval: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub lr: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 5000,
            eval_interval: 500,
            checkpoint_interval: 1000,
            seed: 0,
            lr: DEFAULT_LR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// True when a checkpoint is due after completing `step`.
    pub fn checkpoint_due(&self, step: u64) -> bool {
        step == self.steps || (self.checkpoint_interval > 0 && step % self.checkpoint_interval == 0)
    }

    pub fn eval_due(&self, step: u64) -> bool {
        self.eval_interval > 0 && step % self.eval_interval == 0
    }
}

/// Serialisable position of a ChaCha generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Epoch-wise shuffled data order. The permutation for epoch `e` is drawn
/// from stream `e` of a generator seeded by the run seed, so the batch for
/// any step can be recomputed without replaying earlier steps.
#[derive(Clone, Debug)]
pub struct DataOrder {
    n: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    rng: ChaCha8Rng,
}

impl DataOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut d = DataOrder {
            n,
            seed,
            epoch: 0,
            perm: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        d.load_epoch(0);
        d
    }

    fn load_epoch(&mut self, epoch: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut perm: Vec<usize> = (0..self.n).collect();
        perm.shuffle(&mut rng);
        self.epoch = epoch;
        self.perm = perm;
        self.rng = rng;
    }

    /// Dataset indices of the batch consumed by step `step` (0-based).
    pub fn batch(&mut self, step: u64, batch_size: usize) -> Vec<usize> {
        let n = self.n as u64;
        (0..batch_size as u64)
            .map(|i| {
                let pos = step * batch_size as u64 + i;
                let epoch = pos / n;
                if epoch != self.epoch {
                    self.load_epoch(epoch);
                }
                self.perm[(pos % n) as usize]
            })
            .collect()
    }

    /// State of the shuffling generator for the current epoch.
    pub fn rng_state(&self) -> RngState {
        RngState::of(&self.rng)
    }
}

/// One line of the autoencoder metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub recon_nll: f64,
    pub codebook_loss: f64,
    pub commit_loss: f64,
    pub perplexity: f64,
    /// Milliseconds since the trainer was constructed; not reproducible.
    pub wall_ms: u64,
}

/// One line of the prior metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PriorMetrics {
    pub step: u64,
    /// Nats per latent position, averaged over the batch.
    pub prior_nll: f64,
    pub wall_ms: u64,
}

/// Hooks called by the training loops. Errors abort training.
pub trait Observer<T, M> {
    fn metrics(&mut self, _trainer: &T, _m: &M) -> std::result::Result<(), String> {
        Ok(())
    }
    fn evaluate(&mut self, _trainer: &T) -> std::result::Result<(), String> {
        Ok(())
    }
    fn checkpoint(&mut self, _trainer: &T) -> std::result::Result<(), String> {
        Ok(())
    }
    /// Called with the pre-step state when a step produces a non-finite
    /// loss or gradient.
    fn diverged(&mut self, _trainer: &T) -> std::result::Result<(), String> {
        Ok(())
    }
}

/// Observer that ignores every event.
pub struct Silent;
impl<T, M> Observer<T, M> for Silent {}

fn diverged(step: u64, e: TrainError) -> TrainError {
    match e {
        TrainError::Model(ModelError::Tensor(
            e @ (TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. }),
        ))
        | TrainError::Model(ModelError::Quantizer(QuantizerError::Tensor(
            e @ (TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. }),
        ))) => TrainError::Diverged {
            step,
            detail: e.to_string(),
        },
        TrainError::Model(ModelError::Quantizer(QuantizerError::NonFinite)) => {
            TrainError::Diverged {
                step,
                detail: "non-finite encoder output".into(),
            }
        }
        e => e,
    }
}

fn check_dataset(data: &Tensor, spec: &ModelSpec) -> Result<()> {
    if data.shape().len() != 4 || data.shape()[1..] != spec.input_shape() {
        return Err(TrainError::Data(format!(
            "images {:?} do not match model input {:?}",
            data.shape(),
            spec.input_shape()
        )));
    }
    if data.shape()[0] == 0 {
        return Err(TrainError::Data("dataset is empty".into()));
    }
    Ok(())
}

/// Parameter group of a named autoencoder parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    Decoder,
    Embeddings,
}

fn group_of(name: &str) -> Group {
    if name == EMBEDDINGS {
        Group::Embeddings
    } else if name.starts_with("enc.") {
        Group::Encoder
    } else {
        Group::Decoder
    }
}

/// Loss term whose gradient is inspected separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Reconstruction,
    Codebook,
    Commitment,
}

/// Largest absolute gradient of each loss term on each parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingReport {
    pub max_abs: BTreeMap<(Term, Group), f32>,
}

impl RoutingReport {
    /// (term, group) pairs that must receive exactly zero gradient.
    pub fn blocked() -> [(Term, Group); 5] {
        [
            (Term::Reconstruction, Group::Embeddings),
            (Term::Codebook, Group::Encoder),
            (Term::Codebook, Group::Decoder),
            (Term::Commitment, Group::Decoder),
            (Term::Commitment, Group::Embeddings),
        ]
    }

    /// Blocked pairs that nevertheless received a non-zero gradient.
    pub fn violations(&self) -> Vec<(Term, Group, f32)> {
        Self::blocked()
            .into_iter()
            .filter_map(|key| {
                let v = self.max_abs.get(&key).copied().unwrap_or(0.0);
                (v != 0.0).then_some((key.0, key.1, v))
            })
            .collect()
    }
}

/// Back-propagates each loss term on its own and records which parameter
/// groups it reaches. The embeddings are made trainable for the check even
/// when the model uses moving-average updates.
pub fn gradient_routing(model: &VqVae, x: &Tensor) -> Result<RoutingReport> {
    let mut probe = model.clone();
    probe.codebook.ema = None;
    let mut tape = Tape::new();
    let fp = probe.forward(&mut tape, x, true)?;
    let mut vars: Vec<(Group, Var)> = fp.bound.iter().map(|(n, &v)| (group_of(n), v)).collect();
    vars.push((Group::Embeddings, fp.embeddings));
    let mut max_abs = BTreeMap::new();
    for (term, loss) in [
        (Term::Reconstruction, fp.recon_nll),
        (Term::Codebook, fp.codebook_loss),
        (Term::Commitment, fp.commit_loss),
    ] {
        let grads = tape.backward(loss)?;
        for &(group, var) in &vars {
            let m = grads
                .get(var)
                .map_or(0.0, |g| g.iter().fold(0.0f32, |a, v| a.max(v.abs())));
            let e = max_abs.entry((term, group)).or_insert(0.0f32);
            *e = e.max(m);
        }
    }
    Ok(RoutingReport { max_abs })
}

/// Autoencoder, optimiser and data order for one training run.
#[derive(Clone, Debug)]
pub struct VqVaeTrainer {
    pub model: VqVae,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: u64,
    order: DataOrder,
    n_images: usize,
    started: Instant,
}

impl VqVaeTrainer {
    /// Fresh model initialised from the run seed.
    pub fn new(spec: ModelSpec, config: TrainConfig, n_images: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = VqVae::new(spec, &mut rng)?;
        Self::resume(model, Adam::new(config.lr), config, 0, n_images)
    }

    /// Continues from saved state after `step` completed steps.
    pub fn resume(
        model: VqVae,
        adam: Adam,
        config: TrainConfig,
        step: u64,
        n_images: usize,
    ) -> Result<Self> {
        config.validate()?;
        if n_images == 0 {
            return Err(TrainError::Data("dataset is empty".into()));
        }
        let mut adam = adam;
        adam.lr = config.lr;
        Ok(VqVaeTrainer {
            model,
            adam,
            order: DataOrder::new(n_images, config.seed),
            config,
            step,
            n_images,
            started: Instant::now(),
        })
    }

    pub fn rng_state(&self) -> RngState {
        self.order.rng_state()
    }

    /// One optimisation step: forward, backward, Adam, then the
    /// moving-average codebook update when enabled.
    pub fn step(&mut self, data: &Tensor) -> Result<StepMetrics> {
        check_dataset(data, &self.model.spec)?;
        if data.shape()[0] != self.n_images {
            return Err(TrainError::Data(format!(
                "trainer was built for {} images, got {}",
                self.n_images,
                data.shape()[0]
            )));
        }
        let idx = self.order.batch(self.step, self.config.batch_size);
        let x = data.select_batch(&idx);
        let next = self.step + 1;

        let mut tape = Tape::new();
        let fp = self
            .model
            .forward(&mut tape, &x, true)
            .map_err(|e| diverged(next, e.into()))?;
        let total = tape.value(fp.total).item();
        if !total.is_finite() {
            return Err(TrainError::Diverged {
                step: next,
                detail: format!("loss is {total}"),
            });
        }
        let grads = tape
            .backward(fp.total)
            .map_err(|e| diverged(next, e.into()))?;

        self.adam.tick();
        for (name, &var) in fp.bound.iter() {
            let g = grads.get(var).expect("trainable parameter has a gradient");
            let p = self.model.params.get_mut(name).expect("bound parameter exists");
            self.adam.update(name, p.data_mut(), g);
        }
        if self.model.codebook.ema_enabled() {
            let z_e = tape.value(fp.z_e).clone();
            self.model.codebook.ema_update(&z_e, &fp.quantized.grid)?;
        } else {
            let g = grads.get(fp.embeddings).expect("embeddings have a gradient");
            self.adam
                .update(EMBEDDINGS, self.model.codebook.embeddings.data_mut(), g);
        }
        self.step = next;

        let mut hist = vec![0u64; self.model.codebook.k()];
        for &i in &fp.quantized.grid.indices {
            hist[i] += 1;
        }
        Ok(StepMetrics {
            step: next,
            recon_nll: tape.value(fp.recon_nll).item() as f64,
            codebook_loss: tape.value(fp.codebook_loss).item() as f64,
            commit_loss: tape.value(fp.commit_loss).item() as f64,
            perplexity: perplexity(&hist),
            wall_ms: self.started.elapsed().as_millis() as u64,
        })
    }

    /// Trains until `config.steps`, reporting to `obs`. In debug builds the
    /// gradient routing of the loss terms is asserted on the first batch.
    pub fn run(
        &mut self,
        data: &Tensor,
        obs: &mut dyn Observer<Self, StepMetrics>,
    ) -> Result<()> {
        check_dataset(data, &self.model.spec)?;
        if cfg!(debug_assertions) && self.step < self.config.steps {
            let idx = self.order.batch(self.step, self.config.batch_size);
            let report = gradient_routing(&self.model, &data.select_batch(&idx))?;
            let bad = report.violations();
            assert!(bad.is_empty(), "gradient routing violated: {bad:?}");
        }
        while self.step < self.config.steps {
            let m = match self.step(data) {
                Ok(m) => m,
                Err(e @ TrainError::Diverged { .. }) => {
                    obs.diverged(self).map_err(TrainError::Observer)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            obs.metrics(self, &m).map_err(TrainError::Observer)?;
            if self.config.eval_due(self.step) {
                obs.evaluate(self).map_err(TrainError::Observer)?;
            }
            if self.config.checkpoint_due(self.step) {
                obs.checkpoint(self).map_err(TrainError::Observer)?;
            }
        }
        Ok(())
    }
}

/// Prior, optimiser and data order for fitting codes of a frozen
/// autoencoder.
#[derive(Clone, Debug)]
pub struct PriorTrainer {
    pub prior: Prior,
    pub adam: Adam,
    pub config: TrainConfig,
    pub step: u64,
    order: DataOrder,
    started: Instant,
}

impl PriorTrainer {
    pub fn new(spec: PriorSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let prior = Prior::new(spec, &mut rng)?;
        Ok(Self::resume(prior, Adam::new(config.lr), config, 0))
    }

    pub fn resume(prior: Prior, adam: Adam, config: TrainConfig, step: u64) -> Self {
        let mut adam = adam;
        adam.lr = config.lr;
        PriorTrainer {
            prior,
            adam,
            // Resized on the first step once the dataset size is known.
            order: DataOrder::new(1, config.seed),
            config,
            step,
            started: Instant::now(),
        }
    }

    pub fn rng_state(&self) -> RngState {
        self.order.rng_state()
    }

    /// One Adam step on the mean per-position cross-entropy of a batch.
    pub fn step(&mut self, grids: &LatentGrid) -> Result<PriorMetrics> {
        if grids.batch == 0 {
            return Err(TrainError::Data("no latent grids to fit".into()));
        }
        if self.order.n != grids.batch {
            self.order = DataOrder::new(grids.batch, self.config.seed);
        }
        let idx = self.order.batch(self.step, self.config.batch_size);
        let batch = grids.select(&idx);
        let next = self.step + 1;

        let mut tape = Tape::new();
        let bound = self.prior.params.bind(&mut tape, true);
        let nll = self
            .prior
            .nll_on(&mut tape, &bound, &batch)
            .map_err(|e| diverged(next, e.into()))?;
        let per = (batch.batch * batch.positions()) as f32;
        let loss = tape.mul_scalar(nll, 1.0 / per)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::Diverged {
                step: next,
                detail: format!("loss is {value}"),
            });
        }
        let grads = tape.backward(loss).map_err(|e| diverged(next, e.into()))?;
        self.adam.tick();
        for (name, &var) in bound.iter() {
            let g = grads.get(var).expect("trainable parameter has a gradient");
            let p = self.prior.params.get_mut(name).expect("bound parameter exists");
            self.adam.update(name, p.data_mut(), g);
        }
        self.step = next;
        Ok(PriorMetrics {
            step: next,
            prior_nll: value as f64,
            wall_ms: self.started.elapsed().as_millis() as u64,
        })
    }

    pub fn run(
        &mut self,
        grids: &LatentGrid,
        obs: &mut dyn Observer<Self, PriorMetrics>,
    ) -> Result<()> {
        while self.step < self.config.steps {
            let m = match self.step(grids) {
                Ok(m) => m,
                Err(e @ TrainError::Diverged { .. }) => {
                    obs.diverged(self).map_err(TrainError::Observer)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            obs.metrics(self, &m).map_err(TrainError::Observer)?;
            if self.config.eval_due(self.step) {
                obs.evaluate(self).map_err(TrainError::Observer)?;
            }
            if self.config.checkpoint_due(self.step) {
                obs.checkpoint(self).map_err(TrainError::Observer)?;
            }
        }
        Ok(())
    }
}

/// Encodes every image of `data` to its code grid, in batches.
pub fn encode_dataset(model: &VqVae, data: &Tensor, batch_size: usize) -> Result<LatentGrid> {
    check_dataset(data, &model.spec)?;
    let n = data.shape()[0];
    let mut grids = Vec::new();
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
        grids.push(model.encode_grid(&data.select_batch(&idx))?);
    }
    Ok(LatentGrid::concat(&grids).expect("at least one batch"))
}

/// Dataset-level summary of a trained autoencoder (and optional prior).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean squared error per pixel of the decoder mean.
    pub recon_mse: f64,
    /// Likelihood bound per dimension; uses a uniform prior when no
    /// trained prior is given.
    pub bits_per_dim: f64,
    pub perplexity: f64,
    pub n_images: usize,
    #[serde(skip)]
    pub bound: ElboBound,
    #[serde(skip)]
    pub stats: CodebookStats,
}

pub fn evaluate(
    data: &Tensor,
    model: &VqVae,
    prior: Option<&Prior>,
    batch_size: usize,
) -> Result<EvalReport> {
    check_dataset(data, &model.spec)?;
    let n = data.shape()[0];
    let (lh, lw) = model.spec.latent_shape();
    let mut stats = CodebookStats::empty(model.spec.codebook_size);
    let (mut sq, mut recon, mut prior_nats) = (0.0f64, 0.0f64, 0.0f64);
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
        let x = data.select_batch(&idx);
        let r = model.reconstruct(&x)?;
        sq += r
            .mean
            .data()
            .iter()
            .zip(x.data())
            .map(|(&m, &v)| (m as f64 - v as f64).powi(2))
            .sum::<f64>();
        recon += r.recon_nll.iter().sum::<f64>();
        prior_nats += match prior {
            Some(p) => p.nll(&r.grid)?,
            None => idx.len() as f64 * uniform_prior_nll(lh * lw, model.spec.codebook_size),
        };
        stats.add(&r.grid);
    }
    let dims = model.spec.data_dims();
    let bound = ElboBound::from_parts(recon / n as f64, prior_nats / n as f64, dims);
    Ok(EvalReport {
        recon_mse: sq / (n * dims) as f64,
        bits_per_dim: bound.bits_per_dim,
        perplexity: stats.perplexity,
        n_images: n,
        bound,
        stats,
    })
}
