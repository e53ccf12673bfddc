//! Dataset synthesis, the Adam+Lookahead optimizer, the training loop and
//! checkpoints. Only the mapper is trained; the generator and the embedding
//! are read-only and their digests are compared before and after.

mod checkpoint;
mod config;
mod optim;
#[cfg(test)]
mod tests;

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{CheckpointBundle, MAGIC, VERSION};
pub use config::TrainConfig;
pub use optim::{optimizer_step, OptimConfig, OptimState};

use crate::editops::{total_loss, EditContext, LossBreakdown, LossWeights, Original};
use crate::embednet::{self, embed_text, Lexicon, PromptEmbedding, SUBJECT};
use crate::error::{Error, Result};
use crate::mapper::{forward_groups, init_params, MapperConfig, ParamStore};
use crate::ndgrad::{Tape, Tensor};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::stylegen::{EditTarget, GeneratorParams, Group, LatentStack};

const TRAIN_STREAM: u64 = 21;
const TEST_STREAM: u64 = 22;
const BATCH_STREAM: u64 = 23;

/// One `(z, prompt)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub z: Vec<f64>,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn draw(seed: u64, stream: u64, index: usize, dim: usize, prompts: &[String]) -> Sample {
    let mut rng = stream_rng(seed, stream, index as u64);
    let z = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let prompt = prompts[rng.gen_range(0..prompts.len())].clone();
    Sample { index, z, prompt }
}

/// Train and test pairs for `target`. Each sample depends only on
/// `(seed, split, index)`; the two splits use separate streams.
pub fn build_dataset(
    seed: u64,
    n_train: usize,
    n_test: usize,
    latent_dim: usize,
    lexicon: &Lexicon,
    target: EditTarget,
) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("dataset sizes must be at least 1".into()));
    }
    let prompts = lexicon.prompts(target);
    if prompts.is_empty() {
        return Err(Error::EmptyLexicon(target.to_string()));
    }
    Ok(Dataset {
        train: (0..n_train).map(|i| draw(seed, TRAIN_STREAM, i, latent_dim, &prompts)).collect(),
        test: (0..n_test).map(|i| draw(seed, TEST_STREAM, i, latent_dim, &prompts)).collect(),
    })
}

/// `w + dw` for the configured groups.
pub fn apply_mapper<T: Scalar>(
    w: &LatentStack<T>,
    e: &Tensor<T>,
    params: &ParamStore<T>,
    cfg: &MapperConfig,
    groups: &[Group],
) -> Result<(LatentStack<T>, Tensor<T>)> {
    let delta = forward_groups(w, e, params, cfg, groups)?.delta;
    Ok((w.offset(&delta)?, delta))
}

/// Per-step log record, written as one JSON line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub clip: f64,
    pub direct: f64,
    pub bg: f64,
    pub norm: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    fn new(step: usize, b: &LossBreakdown, wall_ms: f64) -> Self {
        Self {
            step,
            clip: b.clip,
            direct: b.direct,
            bg: b.bg,
            norm: b.norm,
            total: b.total,
            wall_ms,
        }
    }
}

/// Everything fixed during a run.
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub mapper: MapperConfig,
    pub generator: GeneratorParams<T>,
    pub lexicon: Lexicon,
    pub dataset: Dataset,
    pub source: PromptEmbedding,
    pool: Option<rayon::ThreadPool>,
}

pub fn load_lexicon(cfg: &TrainConfig) -> Result<Lexicon> {
    match &cfg.lexicon {
        Some(p) => Lexicon::from_path(p),
        None => Ok(Lexicon::default()),
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = GeneratorParams::build(&config.generator_config())?;
        let lexicon = load_lexicon(config)?;
        let dataset = build_dataset(
            config.seed,
            config.n_train,
            config.n_test,
            generator.latent_dim(),
            &lexicon,
            config.target,
        )?;
        let source = embed_text(SUBJECT, &lexicon)?;
        let pool = if config.threads > 1 {
            let p = rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Some(p)
        } else {
            None
        };
        Ok(Self {
            mapper: config.mapper_config(),
            config: config.clone(),
            generator,
            lexicon,
            dataset,
            source,
            pool,
        })
    }

    pub fn init_params(&self) -> Result<ParamStore<T>> {
        init_params(&self.mapper, self.config.seed)
    }

    pub fn weights(&self) -> &LossWeights {
        &self.config.weights
    }

    /// Total loss of one sample under `params` (bound or not).
    pub fn sample_loss(&self, params: &ParamStore<T>, sample: &Sample) -> Result<(Tensor<T>, LossBreakdown)> {
        let z: Vec<T> = sample.z.iter().map(|&v| T::of(v)).collect();
        let w = self.generator.map_to_w(&z)?;
        let original = Original::new(&self.generator, &w)?;
        let prompt = embed_text(&sample.prompt, &self.lexicon)?;
        let delta = forward_groups(&original.w, &prompt.tensor(), params, &self.mapper, &self.config.groups)?.delta;
        let ctx = EditContext::new(&self.generator, &original, &delta, &prompt, &self.source, self.config.target)?;
        total_loss(&ctx, self.weights())
    }

    fn sample_grad(&self, params: &ParamStore<T>, sample: &Sample) -> Result<(ParamStore<T>, LossBreakdown)> {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (loss, parts) = self.sample_loss(&bound, sample)?;
        let g = tape.backward(&loss)?;
        Ok((bound.grads(&g), parts))
    }

    /// Batch indices for `step`.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let mut rng = stream_rng(self.config.seed, BATCH_STREAM, step as u64);
        (0..self.config.batch).map(|_| rng.gen_range(0..self.config.n_train)).collect()
    }

    /// Mean gradient and loss over the batch of `step`. Per-sample results
    /// are reduced in batch order, so the threaded path matches the serial one.
    pub fn batch_gradient(&self, params: &ParamStore<T>, step: usize) -> Result<(ParamStore<T>, LossBreakdown)> {
        let idx = self.batch_indices(step);
        let run = |i: &usize| self.sample_grad(params, &self.dataset.train[*i]);
        let results: Vec<Result<_>> = match &self.pool {
            Some(pool) => pool.install(|| idx.par_iter().map(run).collect()),
            None => idx.iter().map(run).collect(),
        };
        let inv = T::of(1.0 / idx.len() as f64);
        let mut acc: Option<Vec<Tensor<T>>> = None;
        let mut parts = Vec::with_capacity(idx.len());
        for r in results {
            let (g, p) = r?;
            parts.push(p);
            acc = Some(match acc {
                None => g.values().to_vec(),
                Some(a) => a.iter().zip(g.values()).map(|(x, y)| x.add(y)).collect::<std::result::Result<_, _>>()?,
            });
        }
        let mut grads = params.detach();
        let mean = acc
            .unwrap_or_default()
            .iter()
            .map(|t| t.scale(inv))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        grads.set_values(mean)?;
        Ok((grads, LossBreakdown::mean(&parts)))
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            lr: self.config.lr,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.eps,
            k: self.config.lookahead_k,
            alpha: self.config.lookahead_alpha,
        }
    }

    /// Frozen-module fingerprints: generator parameters and embedding.
    pub fn frozen_digests(&self) -> (String, String) {
        (
            self.generator.digest(),
            embednet::digest(&self.lexicon, &self.generator.config.render),
        )
    }

    /// Runs `config.steps` optimizer steps from fresh parameters, writing one
    /// JSON line per step to `sink`.
    pub fn run(&self, mut sink: Option<&mut dyn Write>) -> Result<TrainOutcome> {
        let frozen_before = self.frozen_digests();
        let mut params = self.init_params()?;
        let mut state = OptimState::new(&params);
        let opt = self.optim_config();
        let start = Instant::now();
        let mut log = Vec::with_capacity(self.config.steps);
        for step in 0..self.config.steps {
            let (grads, parts) = self.batch_gradient(&params, step)?;
            let rec = StepRecord::new(step, &parts, start.elapsed().as_secs_f64() * 1e3);
            let line = serde_json::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?;
            guard(step, &parts, &grads, &line)?;
            if let Some(w) = sink.as_deref_mut() {
                writeln!(w, "{line}")?;
            }
            log.push(rec);
            optimizer_step(&mut params, &grads, &mut state, &opt)?;
        }
        let frozen_after = self.frozen_digests();
        if frozen_before != frozen_after {
            return Err(Error::Config("frozen module digest changed during training".into()));
        }
        Ok(TrainOutcome {
            bundle: CheckpointBundle::new(&params, state, self.config.steps as u64, self.config.to_text()),
            log,
            generator_digest: frozen_after.0,
            embednet_digest: frozen_after.1,
        })
    }
}

/// Aborts on a non-finite loss component or gradient, keeping the step's log
/// line as the dump.
fn guard<T: Scalar>(step: usize, parts: &LossBreakdown, grads: &ParamStore<T>, line: &str) -> Result<()> {
    let bad_grad = grads.values().iter().any(|g| g.data().iter().any(|x| !x.is_finite()));
    if !parts.is_finite() || bad_grad {
        return Err(Error::NonFiniteLoss {
            step,
            detail: line.to_string(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: CheckpointBundle,
    pub log: Vec<StepRecord>,
    pub generator_digest: String,
    pub embednet_digest: String,
}

/// Trains with the `f64` reference path.
pub fn train(config: &TrainConfig, sink: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    Trainer::<f64>::new(config)?.run(sink)
}

/// Mean total loss over the first and the last `window` steps.
pub fn smoothed_endpoints(log: &[StepRecord], window: usize) -> (f64, f64) {
    let w = window.clamp(1, log.len().max(1));
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len().max(1) as f64;
    (mean(&log[..w.min(log.len())]), mean(&log[log.len().saturating_sub(w)..]))
}

/// A trained mapper ready for inference.
pub struct EditModel<T: Scalar> {
    pub config: TrainConfig,
    pub mapper: MapperConfig,
    pub params: ParamStore<T>,
    pub generator: GeneratorParams<T>,
    pub lexicon: Lexicon,
}

impl<T: Scalar> EditModel<T> {
    pub fn from_bundle(bundle: &CheckpointBundle) -> Result<Self> {
        Self::with_config(bundle, TrainConfig::from_text(&bundle.config)?)
    }

    /// Loads the bundle's weights under `config`, which must describe the
    /// same mapper architecture.
    pub fn with_config(bundle: &CheckpointBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mapper = config.mapper_config();
        Ok(Self {
            params: bundle.params_for(&mapper)?,
            generator: GeneratorParams::build(&config.generator_config())?,
            lexicon: load_lexicon(&config)?,
            mapper,
            config,
        })
    }

    /// `(w, w')` for `z` and a prompt.
    pub fn edit(&self, z: &[f64], prompt: &str) -> Result<(LatentStack<T>, LatentStack<T>)> {
        let z: Vec<T> = z.iter().map(|&v| T::of(v)).collect();
        let w = self.generator.map_to_w(&z)?;
        let e = embed_text(prompt, &self.lexicon)?;
        let (w2, _) = apply_mapper(&w, &e.tensor(), &self.params, &self.mapper, &self.config.groups)?;
        Ok((w, w2))
    }

    pub fn test_set(&self) -> Result<Vec<Sample>> {
        let c = &self.config;
        Ok(build_dataset(c.seed, 1, c.n_test, self.generator.latent_dim(), &self.lexicon, c.target)?.test)
    }
}
