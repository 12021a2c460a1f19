//! Flat `key=value` run configuration with dotted section prefixes:
//!
//! ```text
//! # comment
//! seed=7
//! paths.out=run1
//! train.learning_rate=1e-4
//! domain_b.sun_azimuth_deg=160
//! finetune.sizes=25,100,400
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use crater_core::net::{TrainConfig, UNetConfig};
use crater_core::post::PostParams;
use crater_core::synth::BodyParams;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Defaults to `<out>/data`.
    pub data_root: Option<PathBuf>,
    /// Defaults to `<out>/pretrain.unetw`.
    pub checkpoint: Option<PathBuf>,
    pub domain_a: BodyParams,
    pub domain_b: BodyParams,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub net: UNetConfig,
    pub train: TrainConfig,
    pub finetune_epochs: usize,
    pub finetune_sizes: Vec<usize>,
    /// Number of domain-B tiles held out for evaluation.
    pub test_size: usize,
    pub post: PostParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data_root: None,
            checkpoint: None,
            domain_a: BodyParams::domain_a(),
            domain_b: BodyParams::domain_b(),
            n_train: 500,
            n_val: 50,
            n_test: 200,
            net: UNetConfig::default(),
            train: TrainConfig::default(),
            finetune_epochs: 10,
            finetune_sizes: vec![25, 100, 400],
            test_size: 200,
            post: PostParams::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    value
        .parse()
        .with_context(|| format!("invalid value `{value}` for `{key}`"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = RunConfig::default();
        cfg.apply(&text)
            .with_context(|| format!("in config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected key=value, got `{line}`", i + 1);
            };
            self.set(k.trim(), v.trim())
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        match (section, field) {
            ("", "seed") => self.seed = parse(key, value)?,
            ("paths", "out") => self.out_dir = value.into(),
            ("paths", "data") => self.data_root = Some(value.into()),
            ("paths", "checkpoint") => self.checkpoint = Some(value.into()),
            ("domain_a" | "domain_b", f) => {
                let v = parse(key, value)?;
                let params = if section == "domain_a" { &mut self.domain_a } else { &mut self.domain_b };
                if !params.set(f, v) {
                    bail!("unknown key `{key}`");
                }
            }
            ("synth", "n_train") => self.n_train = parse(key, value)?,
            ("synth", "n_val") => self.n_val = parse(key, value)?,
            ("synth", "n_test") => self.n_test = parse(key, value)?,
            ("net", "input_size") => self.net.input_size = parse(key, value)?,
            ("net", "depth") => self.net.depth = parse(key, value)?,
            ("net", "base_channels") => self.net.base_channels = parse(key, value)?,
            ("net", "kernel_size") => self.net.kernel_size = parse(key, value)?,
            ("net", "dropout_rate") | ("train", "dropout_rate") => {
                let v = parse(key, value)?;
                self.net.dropout_rate = v;
                self.train.dropout_rate = v;
            }
            ("train", "learning_rate") => self.train.learning_rate = parse(key, value)?,
            ("train", "l2_coeff") => self.train.l2_coeff = parse(key, value)?,
            ("train", "epochs") => self.train.epochs = parse(key, value)?,
            ("train", "batch_size") => self.train.batch_size = parse(key, value)?,
            ("finetune", "epochs") => self.finetune_epochs = parse(key, value)?,
            ("finetune", "sizes") => {
                self.finetune_sizes = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            ("finetune", "test_size") => self.test_size = parse(key, value)?,
            ("post", "threshold") => self.post.threshold = parse(key, value)?,
            ("post", "r_min") => self.post.r_min = parse(key, value)?,
            ("post", "r_max") => self.post.r_max = parse(key, value)?,
            ("post", "match_prob") => self.post.match_prob = parse(key, value)?,
            ("post", "dedupe_pos") => self.post.dedupe_pos = parse(key, value)?,
            ("post", "dedupe_rad") => self.post.dedupe_rad = parse(key, value)?,
            ("post", "ring_thickness") => self.post.ring_thickness = parse(key, value)?,
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let size = self.net.input_size;
        self.net.validate()?;
        self.train.validate()?;
        self.post.validate()?;
        self.domain_a.validate(size).context("domain_a")?;
        self.domain_b.validate(size).context("domain_b")?;
        if self.finetune_sizes.is_empty() || self.finetune_sizes.contains(&0) {
            bail!("finetune.sizes must list positive counts");
        }
        if self.finetune_sizes.windows(2).any(|w| w[0] >= w[1]) {
            bail!("finetune.sizes {:?} must be strictly increasing", self.finetune_sizes);
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 || self.test_size == 0 {
            bail!("split sizes must be positive");
        }
        Ok(())
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("pretrain.unetw"))
    }

    /// Every setting in the format [`RunConfig::apply`] reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k}={v}").expect("write to String");
        kv("seed", &self.seed);
        kv("paths.out", &self.out_dir.display());
        kv("paths.data", &self.data_root().display());
        kv("paths.checkpoint", &self.checkpoint().display());
        for (name, p) in [("domain_a", &self.domain_a), ("domain_b", &self.domain_b)] {
            for (f, v) in p.fields() {
                kv(&format!("{name}.{f}"), &v);
            }
        }
        kv("synth.n_train", &self.n_train);
        kv("synth.n_val", &self.n_val);
        kv("synth.n_test", &self.n_test);
        kv("net.input_size", &self.net.input_size);
        kv("net.depth", &self.net.depth);
        kv("net.base_channels", &self.net.base_channels);
        kv("net.kernel_size", &self.net.kernel_size);
        kv("train.dropout_rate", &self.train.dropout_rate);
        kv("train.learning_rate", &self.train.learning_rate);
        kv("train.l2_coeff", &self.train.l2_coeff);
        kv("train.epochs", &self.train.epochs);
        kv("train.batch_size", &self.train.batch_size);
        kv("finetune.epochs", &self.finetune_epochs);
        let sizes: Vec<String> = self.finetune_sizes.iter().map(|n| n.to_string()).collect();
        kv("finetune.sizes", &sizes.join(","));
        kv("finetune.test_size", &self.test_size);
        kv("post.threshold", &self.post.threshold);
        kv("post.r_min", &self.post.r_min);
        kv("post.r_max", &self.post.r_max);
        kv("post.match_prob", &self.post.match_prob);
        kv("post.dedupe_pos", &self.post.dedupe_pos);
        kv("post.dedupe_rad", &self.post.dedupe_rad);
        kv("post.ring_thickness", &self.post.ring_thickness);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply("seed=9\ntrain.learning_rate=0.003\nfinetune.sizes=1, 2,5\ndomain_b.rim_contrast=0.4\n# note\n\npost.r_max=30")
            .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.finetune_sizes, vec![1, 2, 5]);
        assert_eq!(c.domain_b.rim_contrast, 0.4);
        let mut d = RunConfig::default();
        d.apply(&c.to_text()).unwrap();
        assert_eq!(c.train, d.train);
        assert_eq!(c.domain_b, d.domain_b);
        assert_eq!(c.to_text(), d.to_text());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(c.apply("train.momentum=0.9").is_err());
        assert!(c.apply("domain_a.gravity=1").is_err());
        assert!(c.apply("seed=minus one").is_err());
        assert!(c.apply("no equals sign").is_err());
    }

    #[test]
    fn sizes_must_increase() {
        let mut c = RunConfig::default();
        c.apply("finetune.sizes=100,25").unwrap();
        assert!(c.validate().is_err());
    }
}
