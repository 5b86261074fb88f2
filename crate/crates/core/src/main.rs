use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use vqvae::io::checkpoint::{Checkpoint, Model};
use vqvae::io::config::RunConfig;
use vqvae::io::metrics::{self, MetricsLog};
use vqvae::io::{self as vio, idx, pnm, synth, Dataset, IoError};
use vqvae::nets::{output_mean, VqVae};
use vqvae::prior::Prior;
use vqvae::tensor::Tensor;
use vqvae::trainer::{
    self, Observer, PriorMetrics, PriorTrainer, StepMetrics, TrainError, VqVaeTrainer,
};

const VQVAE_CKPT: &str = "vqvae.ckpt";
const PRIOR_CKPT: &str = "prior.ckpt";
const DIVERGED_CKPT: &str = "diverged.ckpt";
const METRICS: &str = "metrics.jsonl";
const PRIOR_METRICS: &str = "prior_metrics.jsonl";
const EVAL_BATCH: usize = 100;

#[derive(Parser)]
#[command(name = "vqvae", version, about = "Discrete-latent autoencoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the autoencoder and codebook.
    TrainVqvae {
        #[arg(long)]
        config: PathBuf,
        /// IDX file, PGM/PPM file or directory of PGM/PPM images.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/vqvae.ckpt` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Fit the autoregressive prior to the codes of a trained autoencoder.
    TrainPrior {
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write original/reconstruction pairs side by side.
    Reconstruct {
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Maximum number of images to write.
        #[arg(long, default_value_t = 64)]
        limit: usize,
    },
    /// Draw code grids from the prior and decode them.
    Sample {
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print reconstruction error, bits/dim bound and code perplexity as JSON.
    Eval {
        #[arg(long)]
        vqvae: PathBuf,
        /// Without a prior the bound uses a uniform prior over codes.
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the code usage histogram and perplexity as JSON.
    CodebookStats {
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a synthetic 28×28 digit corpus in IDX format.
    MakeCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional IDX (u8, rank 1) file for the digit labels.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

/// Failure classes with their process exit codes.
enum Failure {
    Other(String),
    Config(String),
    Data(String),
    Diverged(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Diverged(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Other(m) | Failure::Config(m) | Failure::Data(m) | Failure::Diverged(m) => m,
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Failure::Diverged(e.to_string()),
            TrainError::Config(_) | TrainError::Model(vqvae::nets::ModelError::Spec(_)) => {
                Failure::Config(e.to_string())
            }
            TrainError::Data(_) | TrainError::Model(vqvae::nets::ModelError::Input { .. }) => {
                Failure::Data(e.to_string())
            }
            _ => Failure::Other(e.to_string()),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn other(e: impl std::fmt::Display) -> Failure {
    Failure::Other(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn read_config(path: &Path) -> Outcome<(RunConfig, std::collections::BTreeSet<String>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    RunConfig::parse_with_keys(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> Outcome<Dataset> {
    let d = vio::load_dataset(path).map_err(data_err)?;
    if d.is_empty() {
        return Err(Failure::Data(format!("{}: no images", path.display())));
    }
    Ok(d)
}

fn load_vqvae(path: &Path) -> Outcome<(VqVae, Checkpoint)> {
    Checkpoint::load(path)
        .and_then(|c| c.into_vqvae(path))
        .map_err(data_err)
}

fn load_prior(path: &Path) -> Outcome<Prior> {
    Checkpoint::load(path)
        .and_then(|c| c.into_prior(path))
        .map(|(p, _)| p)
        .map_err(data_err)
}

fn check_images(d: &Dataset, model: &VqVae) -> Outcome<()> {
    let (c, h, w) = d.image_shape();
    if [c, h, w] != model.spec.input_shape() {
        return Err(Failure::Data(format!(
            "{}: images are {c}×{h}×{w}, model expects {:?}",
            d.source,
            model.spec.input_shape()
        )));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Outcome<()> {
    std::fs::create_dir_all(dir).map_err(|e| other(IoError::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

fn image_ext(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

struct VqVaeSink {
    config: RunConfig,
    out: PathBuf,
    log: MetricsLog,
}

impl VqVaeSink {
    fn snapshot(&self, t: &VqVaeTrainer) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: t.step,
            rng: t.rng_state(),
            model: Model::VqVae(t.model.clone()),
            adam: Some(t.adam.clone()),
        }
    }
}

impl Observer<VqVaeTrainer, StepMetrics> for VqVaeSink {
    fn metrics(&mut self, _t: &VqVaeTrainer, m: &StepMetrics) -> Result<(), String> {
        self.log.write(m).map_err(|e| e.to_string())
    }

    fn evaluate(&mut self, t: &VqVaeTrainer) -> Result<(), String> {
        eprintln!("step {}/{}", t.step, t.config.steps);
        Ok(())
    }

    fn checkpoint(&mut self, t: &VqVaeTrainer) -> Result<(), String> {
        self.snapshot(t)
            .save(&self.out.join(VQVAE_CKPT))
            .map_err(|e| e.to_string())
    }

    fn diverged(&mut self, t: &VqVaeTrainer) -> Result<(), String> {
        let path = self.out.join(DIVERGED_CKPT);
        self.snapshot(t).save(&path).map_err(|e| e.to_string())?;
        eprintln!("diagnostic checkpoint written to {}", path.display());
        Ok(())
    }
}

fn train_vqvae(config: &Path, data: &Path, out: &Path, resume: bool) -> Outcome<()> {
    let (cfg, _) = read_config(config)?;
    cfg.model.validate().map_err(|e| Failure::Config(e.to_string()))?;
    cfg.train.validate()?;
    let ds = load_data(data)?;
    create_dir(out)?;
    let ckpt_path = out.join(VQVAE_CKPT);
    let metrics_path = out.join(METRICS);

    let mut trainer = if resume && ckpt_path.exists() {
        let (model, ckpt) = load_vqvae(&ckpt_path)?;
        if ckpt.config.model != cfg.model {
            return Err(Failure::Config(format!(
                "model settings in {} differ from the checkpoint being resumed",
                config.display()
            )));
        }
        metrics::truncate_after(&metrics_path, ckpt.step).map_err(other)?;
        let adam = ckpt.adam.unwrap_or_else(|| trainer::Adam::new(cfg.train.lr));
        eprintln!("resuming from step {}", ckpt.step);
        VqVaeTrainer::resume(model, adam, cfg.train.clone(), ckpt.step, ds.len())?
    } else {
        MetricsLog::create(&metrics_path).map_err(other)?;
        VqVaeTrainer::new(cfg.model.clone(), cfg.train.clone(), ds.len())?
    };
    check_images(&ds, &trainer.model)?;
    let mut sink = VqVaeSink {
        config: cfg,
        out: out.to_path_buf(),
        log: MetricsLog::append(&metrics_path).map_err(other)?,
    };
    trainer.run(&ds.images, &mut sink)?;
    if trainer.step == 0 || !ckpt_path.exists() {
        sink.checkpoint(&trainer).map_err(other)?;
    }
    let report = trainer::evaluate(&ds.images, &trainer.model, None, EVAL_BATCH)?;
    eprintln!(
        "done: step {} recon_mse {:.6} perplexity {:.3}",
        trainer.step, report.recon_mse, report.perplexity
    );
    Ok(())
}

struct PriorSink {
    config: RunConfig,
    out: PathBuf,
    log: MetricsLog,
}

impl PriorSink {
    fn snapshot(&self, t: &PriorTrainer) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: t.step,
            rng: t.rng_state(),
            model: Model::Prior(t.prior.clone()),
            adam: Some(t.adam.clone()),
        }
    }
}

impl Observer<PriorTrainer, PriorMetrics> for PriorSink {
    fn metrics(&mut self, _t: &PriorTrainer, m: &PriorMetrics) -> Result<(), String> {
        self.log.write(m).map_err(|e| e.to_string())
    }

    fn evaluate(&mut self, t: &PriorTrainer) -> Result<(), String> {
        eprintln!("step {}/{}", t.step, t.config.steps);
        Ok(())
    }

    fn checkpoint(&mut self, t: &PriorTrainer) -> Result<(), String> {
        self.snapshot(t)
            .save(&self.out.join(PRIOR_CKPT))
            .map_err(|e| e.to_string())
    }

    fn diverged(&mut self, t: &PriorTrainer) -> Result<(), String> {
        self.snapshot(t)
            .save(&self.out.join(DIVERGED_CKPT))
            .map_err(|e| e.to_string())
    }
}

fn train_prior(vqvae: &Path, config: &Path, data: &Path, out: &Path) -> Outcome<()> {
    let (mut cfg, keys) = read_config(config)?;
    let (model, _) = load_vqvae(vqvae)?;
    let (lh, lw) = model.spec.latent_shape();
    for (key, want) in [
        ("prior_height", lh),
        ("prior_width", lw),
        ("prior_k", model.spec.codebook_size),
    ] {
        if keys.contains(key) && cfg.get(key) != Some(want.to_string()) {
            return Err(Failure::Config(format!(
                "`{key}` must be {want} to match the autoencoder"
            )));
        }
    }
    cfg.prior.height = lh;
    cfg.prior.width = lw;
    cfg.prior.k = model.spec.codebook_size;
    // The autoencoder's own settings travel with the prior for reference.
    cfg.model = model.spec.clone();
    cfg.prior.validate().map_err(|e| Failure::Config(e.to_string()))?;
    cfg.train.validate()?;
    let ds = load_data(data)?;
    check_images(&ds, &model)?;
    create_dir(out)?;

    let grids = trainer::encode_dataset(&model, &ds.images, EVAL_BATCH)?;
    let mut t = PriorTrainer::new(cfg.prior.clone(), cfg.train.clone())?;
    let mut sink = PriorSink {
        config: cfg,
        out: out.to_path_buf(),
        log: MetricsLog::create(&out.join(PRIOR_METRICS)).map_err(other)?,
    };
    t.run(&grids, &mut sink)?;
    if t.step == 0 {
        sink.checkpoint(&t).map_err(other)?;
    }
    let nll = t.prior.nll(&grids).map_err(other)?;
    eprintln!(
        "done: prior nll {:.4} nats/position (uniform {:.4})",
        nll / (grids.batch * grids.positions()) as f64,
        (t.prior.spec.k as f64).ln()
    );
    Ok(())
}

fn reconstruct(vqvae: &Path, input: &Path, out: &Path, limit: usize) -> Outcome<()> {
    let (model, _) = load_vqvae(vqvae)?;
    let ds = load_data(input)?;
    check_images(&ds, &model)?;
    create_dir(out)?;
    let n = ds.len().min(limit);
    let (c, h, w) = ds.image_shape();
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let x = ds.images.select_batch(&idx);
        let r = model.reconstruct(&x).map_err(other)?;
        for (j, &i) in idx.iter().enumerate() {
            let mut pair = vec![0.0f32; c * h * 2 * w];
            for ci in 0..c {
                for y in 0..h {
                    let row = ((j * c + ci) * h + y) * w;
                    let dst = (ci * h + y) * 2 * w;
                    pair[dst..dst + w].copy_from_slice(&x.data()[row..row + w]);
                    pair[dst + w..dst + 2 * w].copy_from_slice(&r.mean.data()[row..row + w]);
                }
            }
            let t = Tensor::new([c, h, 2 * w], pair).map_err(other)?;
            let path = out.join(format!("recon_{i:05}.{}", image_ext(c)));
            pnm::save(&t, &path).map_err(other)?;
        }
    }
    eprintln!("wrote {n} reconstructions to {}", out.display());
    Ok(())
}

fn sample(vqvae: &Path, prior: &Path, n: usize, seed: u64, out: &Path) -> Outcome<()> {
    let (model, _) = load_vqvae(vqvae)?;
    let prior = load_prior(prior)?;
    let (lh, lw) = model.spec.latent_shape();
    if (prior.spec.height, prior.spec.width, prior.spec.k)
        != (lh, lw, model.spec.codebook_size)
    {
        return Err(Failure::Data("prior does not match the autoencoder's code grid".into()));
    }
    create_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = prior.sample(&mut rng, n).map_err(other)?;
    let decoded = model.decode_grid(&grid).map_err(other)?;
    let mean = output_mean(model.spec.likelihood, &decoded).map_err(other)?;
    let c = model.spec.in_channels;
    for i in 0..n {
        let img = mean.select_batch(&[i]);
        pnm::save(&img, &out.join(format!("sample_{i:05}.{}", image_ext(c)))).map_err(other)?;
    }
    eprintln!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn eval(vqvae: &Path, prior: Option<&Path>, data: &Path) -> Outcome<()> {
    let (model, _) = load_vqvae(vqvae)?;
    let prior = prior.map(load_prior).transpose()?;
    let ds = load_data(data)?;
    check_images(&ds, &model)?;
    let report = trainer::evaluate(&ds.images, &model, prior.as_ref(), EVAL_BATCH)?;
    println!("{}", serde_json::to_string(&report).map_err(other)?);
    Ok(())
}

#[derive(Serialize)]
struct StatsReport {
    perplexity: f64,
    used_codes: usize,
    total: u64,
    histogram: Vec<u64>,
}

fn codebook_stats(vqvae: &Path, data: &Path) -> Outcome<()> {
    let (model, _) = load_vqvae(vqvae)?;
    let ds = load_data(data)?;
    check_images(&ds, &model)?;
    let grids = trainer::encode_dataset(&model, &ds.images, EVAL_BATCH)?;
    let stats = vqvae::quantizer::codebook_stats([&grids], model.spec.codebook_size);
    let report = StatsReport {
        perplexity: stats.perplexity,
        used_codes: stats.histogram.iter().filter(|&&c| c > 0).count(),
        total: stats.total(),
        histogram: stats.histogram,
    };
    println!("{}", serde_json::to_string(&report).map_err(other)?);
    Ok(())
}

fn make_corpus(out: &Path, n: usize, seed: u64, labels: Option<&Path>) -> Outcome<()> {
    let (pixels, labs) = synth::digits(n, seed);
    idx::save(out, [n, synth::SIDE, synth::SIDE], &pixels).map_err(other)?;
    if let Some(path) = labels {
        let mut bytes = 0x0000_0801u32.to_be_bytes().to_vec();
        bytes.extend_from_slice(&(n as u32).to_be_bytes());
        bytes.extend_from_slice(&labs);
        vio::write_atomic(path, &bytes).map_err(other)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::TrainVqvae {
            config,
            data,
            out,
            resume,
        } => train_vqvae(&config, &data, &out, resume),
        Command::TrainPrior {
            vqvae,
            config,
            data,
            out,
        } => train_prior(&vqvae, &config, &data, &out),
        Command::Reconstruct {
            vqvae,
            input,
            out,
            limit,
        } => reconstruct(&vqvae, &input, &out, limit),
        Command::Sample {
            vqvae,
            prior,
            n,
            seed,
            out,
        } => sample(&vqvae, &prior, n, seed, &out),
        Command::Eval { vqvae, prior, data } => eval(&vqvae, prior.as_deref(), &data),
        Command::CodebookStats { vqvae, data } => codebook_stats(&vqvae, &data),
        Command::MakeCorpus {
            out,
            n,
            seed,
            labels,
        } => make_corpus(&out, n, seed, labels.as_deref()),
    }
}

fn main() -> ExitCode {
    let help = RunConfig::help();
    let cmd = Cli::command()
        .mut_subcommand("train-vqvae", |c| c.after_help(help.clone()))
        .mut_subcommand("train-prior", |c| c.after_help(help.clone()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
