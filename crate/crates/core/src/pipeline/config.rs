//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kgraph::KgTrainConfig;
use crate::losses::LossConfig;
use crate::synth::WorldSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Double,
    /// Parameters are rounded through `f32` after every optimizer step.
    Single,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Double => "double",
            Precision::Single => "single",
        }
    }
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "double" => Ok(Precision::Double),
            "single" => Ok(Precision::Single),
            other => Err(format!("expected double or single, got {other:?}")),
        }
    }
}

/// Loss-term switches. `disable_ksg` wins over the per-part toggles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Use plain contrastive loss (λ ≡ 0) instead of knowledge weighting.
    pub disable_kse: bool,
    /// Drop the whole guidance loss.
    pub disable_ksg: bool,
    pub kag: bool,
    pub skr: bool,
    pub vsr: bool,
    pub sbg: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            disable_kse: false,
            disable_ksg: false,
            kag: true,
            skr: true,
            vsr: true,
            sbg: true,
        }
    }
}

impl Ablation {
    pub fn part_enabled(&self, part: usize) -> bool {
        !self.disable_ksg && [self.kag, self.skr, self.vsr, self.sbg][part]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub precision: Precision,
    pub loss: LossConfig,
    pub epsilon: f64,
    pub ablation: Ablation,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// When false the metrics `ms` column is written as 0 so repeated runs
    /// produce identical files.
    pub wall_clock: bool,
    pub kg: KgTrainConfig,
    pub world: WorldSpec,
    pub n_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Sizes that train in seconds on a laptop.
    pub fn desk() -> Self {
        Self {
            seed: 42,
            embed_dim: 64,
            hidden_dim: 64,
            batch_size: 32,
            epochs: 10,
            lr: 1e-3,
            precision: Precision::Double,
            loss: LossConfig::default(),
            epsilon: 0.1,
            ablation: Ablation::default(),
            plateau_factor: 0.5,
            plateau_patience: 3,
            wall_clock: true,
            kg: KgTrainConfig::default(),
            world: WorldSpec::default(),
            n_samples: 256,
        }
    }

    /// Published pre-training hyper-parameters.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.embed_dim = 256;
        cfg.kg.dim = 256;
        cfg.batch_size = 100;
        cfg.epochs = 50;
        cfg.lr = 5e-5;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.embed_dim < 2 || self.hidden_dim < 1 {
            return bad(format!(
                "bad model sizes {} / {}",
                self.embed_dim, self.hidden_dim
            ));
        }
        if self.batch_size < 1 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!(
                "knowledge.epsilon must lie in [0, 1], got {}",
                self.epsilon
            ));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad(format!(
                "sched.factor must lie in (0, 1], got {}",
                self.plateau_factor
            ));
        }
        self.loss.validate()
    }

    /// Every settable key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let l = &self.loss;
        let a = &self.ablation;
        let w = &self.world;
        vec![
            ("seed", self.seed.to_string()),
            ("model.embed_dim", self.embed_dim.to_string()),
            ("model.hidden_dim", self.hidden_dim.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.precision", self.precision.as_str().to_string()),
            ("loss.tau_g", l.tau_g.to_string()),
            ("loss.tau_l", l.tau_l.to_string()),
            ("loss.lambda_kag", l.lambdas[0].to_string()),
            ("loss.lambda_skr", l.lambdas[1].to_string()),
            ("loss.lambda_vsr", l.lambdas[2].to_string()),
            ("loss.lambda_sbg", l.lambdas[3].to_string()),
            ("loss.w_se", l.total_weights[0].to_string()),
            ("loss.w_sg", l.total_weights[1].to_string()),
            ("knowledge.epsilon", self.epsilon.to_string()),
            ("ablation.disable_kse", a.disable_kse.to_string()),
            ("ablation.disable_ksg", a.disable_ksg.to_string()),
            ("ablation.kag", a.kag.to_string()),
            ("ablation.skr", a.skr.to_string()),
            ("ablation.vsr", a.vsr.to_string()),
            ("ablation.sbg", a.sbg.to_string()),
            ("sched.factor", self.plateau_factor.to_string()),
            ("sched.patience", self.plateau_patience.to_string()),
            ("metrics.wall_clock", self.wall_clock.to_string()),
            ("kg.epochs", self.kg.epochs.to_string()),
            ("kg.lr", self.kg.lr.to_string()),
            ("kg.negatives", self.kg.negatives.to_string()),
            ("world.num_diseases", w.num_diseases.to_string()),
            ("world.region_count", w.region_count.to_string()),
            ("world.feature_dim", w.feature_dim.to_string()),
            ("world.overlap_rate", w.overlap_rate.to_string()),
            ("world.negation_rate", w.negation_rate.to_string()),
            ("world.noise_sigma", w.noise_sigma.to_string()),
            ("world.n_samples", self.n_samples.to_string()),
        ]
    }

    /// Sets one dotted key from its text form. The KG embedding width and
    /// all seeds follow `model.embed_dim` and `seed`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .trim()
                .parse()
                .map_err(|e| Error::Parameter(format!("{key}: cannot parse {value:?}: {e}")))
        }
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.embed_dim" => self.embed_dim = parse(key, v)?,
            "model.hidden_dim" => self.hidden_dim = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.precision" => {
                self.precision = v
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parameter(format!("{key}: {e}")))?
            }
            "loss.tau_g" => self.loss.tau_g = parse(key, v)?,
            "loss.tau_l" => self.loss.tau_l = parse(key, v)?,
            "loss.lambda_kag" => self.loss.lambdas[0] = parse(key, v)?,
            "loss.lambda_skr" => self.loss.lambdas[1] = parse(key, v)?,
            "loss.lambda_vsr" => self.loss.lambdas[2] = parse(key, v)?,
            "loss.lambda_sbg" => self.loss.lambdas[3] = parse(key, v)?,
            "loss.w_se" => self.loss.total_weights[0] = parse(key, v)?,
            "loss.w_sg" => self.loss.total_weights[1] = parse(key, v)?,
            "knowledge.epsilon" => self.epsilon = parse(key, v)?,
            "ablation.disable_kse" => self.ablation.disable_kse = parse(key, v)?,
            "ablation.disable_ksg" => self.ablation.disable_ksg = parse(key, v)?,
            "ablation.kag" => self.ablation.kag = parse(key, v)?,
            "ablation.skr" => self.ablation.skr = parse(key, v)?,
            "ablation.vsr" => self.ablation.vsr = parse(key, v)?,
            "ablation.sbg" => self.ablation.sbg = parse(key, v)?,
            "sched.factor" => self.plateau_factor = parse(key, v)?,
            "sched.patience" => self.plateau_patience = parse(key, v)?,
            "metrics.wall_clock" => self.wall_clock = parse(key, v)?,
            "kg.epochs" => self.kg.epochs = parse(key, v)?,
            "kg.lr" => self.kg.lr = parse(key, v)?,
            "kg.negatives" => self.kg.negatives = parse(key, v)?,
            "world.num_diseases" => self.world.num_diseases = parse(key, v)?,
            "world.region_count" => self.world.region_count = parse(key, v)?,
            "world.feature_dim" => self.world.feature_dim = parse(key, v)?,
            "world.overlap_rate" => self.world.overlap_rate = parse(key, v)?,
            "world.negation_rate" => self.world.negation_rate = parse(key, v)?,
            "world.noise_sigma" => self.world.noise_sigma = parse(key, v)?,
            "world.n_samples" => self.n_samples = parse(key, v)?,
            other => return Err(Error::Parameter(format!("unknown config key {other:?}"))),
        }
        self.sync();
        Ok(())
    }

    fn sync(&mut self) {
        self.kg.dim = self.embed_dim;
        self.kg.seed = self.seed;
        self.world.seed = self.seed;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync();
        self
    }

    /// Applies `key = value` lines. `#` starts a comment; an optional
    /// `[section]` header prefixes the keys that follow it.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (key, value, line) in parse_pairs(text, origin)? {
            self.set(&key, &value).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Splits config text into `(dotted key, value, line number)`.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, String, usize)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg: format!("expected key = value, found {line:?}"),
            });
        };
        let k = k.trim();
        let key = if section.is_empty() {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        out.push((key, v.trim().trim_matches('"').to_string(), n + 1));
    }
    Ok(out)
}
