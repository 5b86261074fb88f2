//! Flat `key = value` run configuration covering the model, prior and
//! training settings. Unknown or repeated keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{IoError, Result};
use crate::nets::{Likelihood, ModelSpec};
use crate::prior::PriorSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub prior: PriorSpec,
    pub train: TrainConfig,
}

/// `(key, description)` for every addressable setting, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("in_channels", "image channels (1 or 3)"),
    ("height", "image height"),
    ("width", "image width"),
    ("hidden", "encoder/decoder channels"),
    ("residual_hidden", "channels inside residual blocks"),
    ("stages", "stride-2 down/up-sampling stages"),
    ("residual_blocks", "residual blocks in encoder and decoder"),
    ("embedding_dim", "code vector dimension D"),
    ("codebook_size", "number of codes K"),
    ("beta", "commitment weight"),
    ("gamma", "moving-average decay for codebook updates"),
    ("ema", "update the codebook by moving averages (true/false)"),
    ("likelihood", "pixel likelihood: gaussian or logistic"),
    ("prior_height", "prior grid height (must match the latent grid)"),
    ("prior_width", "prior grid width (must match the latent grid)"),
    ("prior_k", "prior alphabet size (must match codebook_size)"),
    ("prior_layers", "masked convolution layers"),
    ("prior_hidden", "prior channels"),
    ("prior_embedding_dim", "prior input embedding dimension"),
    ("prior_kernel_size", "odd masked convolution window"),
    ("batch_size", "images (or grids) per step"),
    ("steps", "total optimisation steps"),
    ("eval_interval", "steps between evaluation hooks (0 = never)"),
    ("checkpoint_interval", "steps between checkpoints (0 = final only)"),
    ("seed", "seed for initialisation and data order"),
    ("lr", "Adam learning rate"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("invalid value `{v}` for `{key}`"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("invalid boolean `{v}` for `{key}`")),
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (m, p, t) = (&mut self.model, &mut self.prior, &mut self.train);
        match key {
            "in_channels" => m.in_channels = parse(key, v)?,
            "height" => m.height = parse(key, v)?,
            "width" => m.width = parse(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "residual_hidden" => m.residual_hidden = parse(key, v)?,
            "stages" => m.stages = parse(key, v)?,
            "residual_blocks" => m.residual_blocks = parse(key, v)?,
            "embedding_dim" => m.embedding_dim = parse(key, v)?,
            "codebook_size" => m.codebook_size = parse(key, v)?,
            "beta" => m.beta = parse(key, v)?,
            "gamma" => m.gamma = parse(key, v)?,
            "ema" => m.ema = parse_bool(key, v)?,
            "likelihood" => {
                m.likelihood = Likelihood::parse(v)
                    .ok_or_else(|| format!("unknown likelihood `{v}` (gaussian, logistic)"))?
            }
            "prior_height" => p.height = parse(key, v)?,
            "prior_width" => p.width = parse(key, v)?,
            "prior_k" => p.k = parse(key, v)?,
            "prior_layers" => p.layers = parse(key, v)?,
            "prior_hidden" => p.hidden = parse(key, v)?,
            "prior_embedding_dim" => p.embedding_dim = parse(key, v)?,
            "prior_kernel_size" => p.kernel_size = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "eval_interval" => t.eval_interval = parse(key, v)?,
            "checkpoint_interval" => t.checkpoint_interval = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Current value of `key` in the textual form accepted by [`set`].
    ///
    /// [`set`]: RunConfig::set
    pub fn get(&self, key: &str) -> Option<String> {
        let (m, p, t) = (&self.model, &self.prior, &self.train);
        Some(match key {
            "in_channels" => m.in_channels.to_string(),
            "height" => m.height.to_string(),
            "width" => m.width.to_string(),
            "hidden" => m.hidden.to_string(),
            "residual_hidden" => m.residual_hidden.to_string(),
            "stages" => m.stages.to_string(),
            "residual_blocks" => m.residual_blocks.to_string(),
            "embedding_dim" => m.embedding_dim.to_string(),
            "codebook_size" => m.codebook_size.to_string(),
            "beta" => m.beta.to_string(),
            "gamma" => m.gamma.to_string(),
            "ema" => m.ema.to_string(),
            "likelihood" => m.likelihood.as_str().to_string(),
            "prior_height" => p.height.to_string(),
            "prior_width" => p.width.to_string(),
            "prior_k" => p.k.to_string(),
            "prior_layers" => p.layers.to_string(),
            "prior_hidden" => p.hidden.to_string(),
            "prior_embedding_dim" => p.embedding_dim.to_string(),
            "prior_kernel_size" => p.kernel_size.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "steps" => t.steps.to_string(),
            "eval_interval" => t.eval_interval.to_string(),
            "checkpoint_interval" => t.checkpoint_interval.to_string(),
            "seed" => t.seed.to_string(),
            "lr" => t.lr.to_string(),
            _ => return None,
        })
    }

    /// Parses a config file, returning the settings and the set of keys it
    /// assigned explicitly.
    pub fn parse_with_keys(text: &str) -> Result<(RunConfig, BTreeSet<String>)> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| IoError::Config {
                line: i + 1,
                detail,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            cfg.set(k, v).map_err(err)?;
        }
        Ok((cfg, seen))
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        Ok(Self::parse_with_keys(text)?.0)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            writeln!(s, "{k} = {}", self.get(k).expect("listed key")).unwrap();
        }
        s
    }

    /// Help text listing every key with its default.
    pub fn help() -> String {
        let d = RunConfig::default();
        let mut s = String::from("Config keys (key = value, `#` starts a comment):\n");
        for (k, doc) in KEYS {
            writeln!(s, "  {k:<20} {doc} [default: {}]", d.get(k).unwrap()).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.model.beta = 0.1;
        c.model.ema = true;
        c.model.likelihood = Likelihood::Logistic;
        c.train.lr = 3e-4;
        c.prior.kernel_size = 7;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_key_is_addressable() {
        let c = RunConfig::default();
        for (k, _) in KEYS {
            let mut d = RunConfig::default();
            d.set(k, &c.get(k).unwrap()).unwrap();
            assert_eq!(d, c);
        }
    }

    #[test]
    fn parses_comments_and_whitespace() {
        let (c, keys) =
            RunConfig::parse_with_keys("# desk run\n hidden= 64 \n\nema = true # moving averages\n")
                .unwrap();
        assert_eq!(c.model.hidden, 64);
        assert!(c.model.ema);
        assert_eq!(keys.len(), 2);
    }

    #[test]
    fn fails_loudly() {
        for bad in ["hiden = 3", "hidden", "hidden = x", "ema = maybe", "hidden=1\nhidden=2"] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
        let e = RunConfig::parse("steps = 1\nfoo = 2").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("foo"), "{e}");
    }
}
