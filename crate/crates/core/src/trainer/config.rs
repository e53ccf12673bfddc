//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::editops::LossWeights;
use crate::error::{Error, Result};
use crate::mapper::{MapperConfig, MapperKind};
use crate::stylegen::{BodyPart, EditKind, EditTarget, GeneratorConfig, Group};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Lookahead sync period.
    pub lookahead_k: usize,
    /// Lookahead interpolation factor.
    pub lookahead_alpha: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// `None` selects the built-in lexicon.
    pub lexicon: Option<PathBuf>,
    pub target: EditTarget,
    pub mapper: MapperKind,
    pub groups: Vec<Group>,
    pub blocks: usize,
    pub heads: usize,
    pub positional: bool,
    pub n_train: usize,
    pub n_test: usize,
    pub psi: f64,
    /// 1 runs the single-threaded reference path.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = MapperConfig::default();
        Self {
            steps: 2000,
            batch: 8,
            lr: 5e-4,
            beta1: 0.95,
            beta2: 0.9,
            eps: 1e-8,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            seed: 0,
            weights: LossWeights::default(),
            lexicon: None,
            target: EditTarget::new(BodyPart::Upper, EditKind::Texture),
            mapper: MapperKind::Attention,
            groups: Group::ALL.to_vec(),
            blocks: m.blocks,
            heads: m.heads,
            positional: m.positional,
            n_train: 2000,
            n_test: 200,
            psi: GeneratorConfig::default().psi,
            threads: 1,
        }
    }
}

pub const KEYS: [&str; 23] = [
    "steps",
    "batch",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "lookahead_k",
    "lookahead_alpha",
    "seed",
    "w_clip",
    "w_direct",
    "w_bg",
    "w_norm",
    "lexicon",
    "target",
    "mapper",
    "groups",
    "blocks",
    "heads",
    "positional",
    "n_train",
    "n_test",
    "psi",
];

fn typed<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: `{value}`")))
}

fn parse_group(s: &str) -> Result<Group> {
    Group::ALL
        .into_iter()
        .find(|g| g.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown group `{s}`")))
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = typed(key, value)?,
            "batch" => self.batch = typed(key, value)?,
            "lr" => self.lr = typed(key, value)?,
            "beta1" => self.beta1 = typed(key, value)?,
            "beta2" => self.beta2 = typed(key, value)?,
            "eps" => self.eps = typed(key, value)?,
            "lookahead_k" => self.lookahead_k = typed(key, value)?,
            "lookahead_alpha" => self.lookahead_alpha = typed(key, value)?,
            "seed" => self.seed = typed(key, value)?,
            "w_clip" => self.weights.clip = typed(key, value)?,
            "w_direct" => self.weights.direct = typed(key, value)?,
            "w_bg" => self.weights.bg = typed(key, value)?,
            "w_norm" => self.weights.norm = typed(key, value)?,
            "lexicon" => self.lexicon = (value != "builtin").then(|| PathBuf::from(value)),
            "target" => self.target = value.parse()?,
            "mapper" => {
                self.mapper = MapperKind::parse(value).ok_or_else(|| Error::Config(format!("unknown mapper `{value}`")))?
            }
            "groups" => self.groups = value.split(',').map(|s| parse_group(s.trim())).collect::<Result<_>>()?,
            "blocks" => self.blocks = typed(key, value)?,
            "heads" => self.heads = typed(key, value)?,
            "positional" => self.positional = typed(key, value)?,
            "n_train" => self.n_train = typed(key, value)?,
            "n_test" => self.n_test = typed(key, value)?,
            "psi" => self.psi = typed(key, value)?,
            "threads" => self.threads = typed(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return fail("betas must lie in (0,1)");
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive");
        }
        if self.lookahead_k == 0 || !(0.0..=1.0).contains(&self.lookahead_alpha) {
            return fail("lookahead needs k >= 1 and alpha in [0,1]");
        }
        if self.batch == 0 || self.n_train == 0 || self.n_test == 0 {
            return fail("batch, n_train and n_test must be at least 1");
        }
        if self.groups.is_empty() {
            return fail("at least one group must be trained");
        }
        if self.threads == 0 {
            return fail("threads must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.psi) {
            return fail("psi must lie in [0,1]");
        }
        self.weights.validate()?;
        self.mapper_config().validate()
    }

    pub fn mapper_config(&self) -> MapperConfig {
        MapperConfig {
            kind: self.mapper,
            blocks: self.blocks,
            heads: self.heads,
            positional: self.positional,
            ..MapperConfig::default()
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            psi: self.psi,
            ..GeneratorConfig::default()
        }
    }

    /// Canonical text form; `from_text(to_text())` reproduces `self`.
    /// `threads` is left out because it never changes results.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let groups: Vec<&str> = self.groups.iter().map(|g| g.name()).collect();
        let lexicon = self
            .lexicon
            .as_ref()
            .map_or_else(|| "builtin".to_string(), |p| p.display().to_string());
        let vals: [String; 23] = [
            self.steps.to_string(),
            self.batch.to_string(),
            self.lr.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.eps.to_string(),
            self.lookahead_k.to_string(),
            self.lookahead_alpha.to_string(),
            self.seed.to_string(),
            self.weights.clip.to_string(),
            self.weights.direct.to_string(),
            self.weights.bg.to_string(),
            self.weights.norm.to_string(),
            lexicon,
            self.target.to_string(),
            self.mapper.name().to_string(),
            groups.join(","),
            self.blocks.to_string(),
            self.heads.to_string(),
            self.positional.to_string(),
            self.n_train.to_string(),
            self.n_test.to_string(),
            self.psi.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
