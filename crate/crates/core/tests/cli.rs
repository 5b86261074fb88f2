use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vqvae::io::checkpoint::Checkpoint;
use vqvae::io::metrics;

const TINY: &str = "\
hidden = 8
residual_hidden = 4
residual_blocks = 1
embedding_dim = 4
codebook_size = 8
batch_size = 8
steps = 6
checkpoint_interval = 3
eval_interval = 0
seed = 3
lr = 0.001
prior_layers = 2
prior_hidden = 8
prior_embedding_dim = 4
";

fn vqvae(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vqvae"));
    for a in args {
        c.arg(a);
    }
    c.output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        ok(vqvae(&[&"make-corpus", &"--out", &ws.path("corpus.idx"), &"--n", &"24"]));
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn train(&self, cfg: &Path, out: &str) -> Output {
        vqvae(&[&"train-vqvae", &"--config", &cfg, &"--data", &self.path("corpus.idx"), &"--out", &self.path(out)])
    }
}

fn stripped(path: &Path) -> Vec<serde_json::Value> {
    metrics::read_all(path)
        .unwrap()
        .into_iter()
        .map(|mut v| {
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn missing_flag_prints_usage() {
    let out = vqvae(&[&"train-vqvae", &"--config", &"x.cfg"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(err.contains("--data"), "{err}");
}

#[test]
fn train_help_lists_config_keys() {
    let out = ok(vqvae(&[&"train-vqvae", &"--help"]));
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["codebook_size", "beta", "checkpoint_interval", "prior_layers"] {
        assert!(text.contains(key), "{key} missing from help");
    }
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let ws = Workspace::new();
    let bad = ws.config("bad.cfg", "hidden = 8\ncodebok_size = 4\n");
    let out = ws.train(&bad, "a");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("codebok_size"));

    let tiny = ws.config("tiny.cfg", TINY);
    std::fs::write(ws.path("junk.idx"), b"not an idx file").unwrap();
    let out = vqvae(&[&"train-vqvae", &"--config", &tiny, &"--data", &ws.path("junk.idx"), &"--out", &ws.path("b")]);
    assert_eq!(out.status.code(), Some(3));
    let out = vqvae(&[&"train-vqvae", &"--config", &tiny, &"--data", &ws.path("absent.idx"), &"--out", &ws.path("b")]);
    assert_eq!(out.status.code(), Some(3));

    let small = ws.config("small.cfg", &format!("{TINY}height = 16\nwidth = 16\n"));
    let out = ws.train(&small, "c");
    assert_eq!(out.status.code(), Some(3), "image size mismatch is a data error");

    let wild = ws.config("wild.cfg", &TINY.replace("lr = 0.001", "lr = 1e30"));
    let out = ws.train(&wild, "d");
    assert_eq!(out.status.code(), Some(4));
    assert!(ws.path("d/diverged.ckpt").exists());
    Checkpoint::load(&ws.path("d/diverged.ckpt")).unwrap();
}

#[test]
fn full_pipeline() {
    let ws = Workspace::new();
    let cfg = ws.config("tiny.cfg", TINY);
    ok(ws.train(&cfg, "run"));
    let ckpt = ws.path("run/vqvae.ckpt");
    assert_eq!(Checkpoint::load(&ckpt).unwrap().step, 6);
    let rows = stripped(&ws.path("run/metrics.jsonl"));
    assert_eq!(rows.len(), 6);
    for key in ["step", "recon_nll", "codebook_loss", "commit_loss", "perplexity"] {
        assert!(rows[0].get(key).is_some(), "{key}");
    }

    ok(vqvae(&[&"train-prior", &"--vqvae", &ckpt, &"--config", &cfg, &"--data", &ws.path("corpus.idx"), &"--out", &ws.path("prior")]));
    let prior = ws.path("prior/prior.ckpt");
    assert!(prior.exists());
    assert_eq!(metrics::read_all(&ws.path("prior/prior_metrics.jsonl")).unwrap().len(), 6);

    let out = ok(vqvae(&[&"eval", &"--vqvae", &ckpt, &"--data", &ws.path("corpus.idx")]));
    let uniform: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let keys: Vec<_> = uniform.as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, ["bits_per_dim", "n_images", "perplexity", "recon_mse"]);
    assert_eq!(uniform["n_images"], 24);
    let out = ok(vqvae(&[&"eval", &"--vqvae", &ckpt, &"--prior", &prior, &"--data", &ws.path("corpus.idx")]));
    let with_prior: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(with_prior["recon_mse"], uniform["recon_mse"]);

    let out = ok(vqvae(&[&"codebook-stats", &"--vqvae", &ckpt, &"--data", &ws.path("corpus.idx")]));
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["total"], 24 * 49);
    assert_eq!(stats["histogram"].as_array().unwrap().len(), 8);

    ok(vqvae(&[&"reconstruct", &"--vqvae", &ckpt, &"--in", &ws.path("corpus.idx"), &"--out", &ws.path("recon"), &"--limit", &"5"]));
    let names: Vec<_> = std::fs::read_dir(ws.path("recon")).unwrap().collect();
    assert_eq!(names.len(), 5);
    let pair = std::fs::read(ws.path("recon/recon_00004.pgm")).unwrap();
    assert!(pair.starts_with(b"P5\n56 28\n255\n"));

    for (dir, seed) in [("s1", "7"), ("s2", "7"), ("s3", "8")] {
        ok(vqvae(&[&"sample", &"--vqvae", &ckpt, &"--prior", &prior, &"--n", &"3", &"--seed", &seed, &"--out", &ws.path(dir)]));
    }
    let read = |d: &str| -> Vec<Vec<u8>> {
        (0..3)
            .map(|i| std::fs::read(ws.path(&format!("{d}/sample_{i:05}.pgm"))).unwrap())
            .collect()
    };
    assert_eq!(read("s1"), read("s2"));
    assert_ne!(read("s1"), read("s3"));

    // A vqvae checkpoint is not a prior.
    let out = vqvae(&[&"sample", &"--vqvae", &ckpt, &"--prior", &ckpt, &"--n", &"1", &"--seed", &"0", &"--out", &ws.path("s4")]);
    assert!(!out.status.success());
}

#[test]
fn prior_grid_settings_must_match_the_autoencoder() {
    let ws = Workspace::new();
    let cfg = ws.config("tiny.cfg", TINY);
    ok(ws.train(&cfg, "run"));
    let clash = ws.config("clash.cfg", &format!("{TINY}prior_k = 9\n"));
    let out = vqvae(&[&"train-prior", &"--vqvae", &ws.path("run/vqvae.ckpt"), &"--config", &clash, &"--data", &ws.path("corpus.idx"), &"--out", &ws.path("p")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_runs_and_resumed_runs_match() {
    let ws = Workspace::new();
    let cfg = ws.config("tiny.cfg", TINY);
    ok(ws.train(&cfg, "a"));
    ok(ws.train(&cfg, "b"));
    let a = std::fs::read(ws.path("a/vqvae.ckpt")).unwrap();
    assert_eq!(a, std::fs::read(ws.path("b/vqvae.ckpt")).unwrap());

    let half = ws.config("half.cfg", &TINY.replace("steps = 6", "steps = 3"));
    ok(ws.train(&half, "c"));
    let out = ok(vqvae(&[&"train-vqvae", &"--config", &cfg, &"--data", &ws.path("corpus.idx"), &"--out", &ws.path("c"), &"--resume"]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("resuming from step 3"));
    assert_eq!(a, std::fs::read(ws.path("c/vqvae.ckpt")).unwrap());
    assert_eq!(stripped(&ws.path("a/metrics.jsonl")), stripped(&ws.path("c/metrics.jsonl")));
}
