//! CLIP Acc and background distance over a test set.
//!
//! The background distance stands in for a learned perceptual metric: a bank
//! of fixed random 3x3 filters with a tanh, compared only at windows lying
//! entirely outside the edit mask `M`. Raw MSE over the complement of `M` is
//! reported next to it.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::editops::{edit_mask, feature_space_edit, pixel_blend, DEFAULT_STAGES};
use crate::embednet::{cosine, embed_image, embed_text};
use crate::error::{Error, Result};
use crate::mapper::MapperKind;
use crate::ndgrad::Tensor;
use crate::rng::{normal_tensor, stream_rng};
use crate::scalar::Scalar;
use crate::stylegen::Mask;
use crate::trainer::{EditModel, Sample};

/// How the edited latent is turned into the output image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Masking {
    None,
    Feature,
    Pixel,
}

impl Masking {
    pub fn name(self) -> &'static str {
        match self {
            Masking::None => "none",
            Masking::Feature => "feature",
            Masking::Pixel => "pixel",
        }
    }
}

impl FromStr for Masking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "unmasked" => Ok(Masking::None),
            "feature" | "masked" => Ok(Masking::Feature),
            "pixel" => Ok(Masking::Pixel),
            _ => Err(Error::Config(format!("unknown masking mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodTag {
    pub mapper: MapperKind,
    pub masking: Masking,
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.mapper.name(), self.masking.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub index: usize,
    pub prompt: String,
    pub sim_original: f64,
    pub sim_edited: f64,
    pub hit: bool,
    pub bg_dist: f64,
    pub bg_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: MethodTag,
    /// Percentage of samples whose prompt is strictly closer to the output.
    pub clip_acc: f64,
    pub bg_dist: f64,
    pub bg_mse: f64,
    pub samples: Vec<EvalSample>,
}

impl EvalReport {
    pub fn from_samples(method: MethodTag, samples: Vec<EvalSample>) -> Self {
        let n = samples.len().max(1) as f64;
        let hits = samples.iter().filter(|s| s.hit).count() as f64;
        Self {
            method,
            clip_acc: 100.0 * hits / n,
            bg_dist: samples.iter().map(|s| s.bg_dist).sum::<f64>() / n,
            bg_mse: samples.iter().map(|s| s.bg_mse).sum::<f64>() / n,
            samples,
        }
    }
}

const PROBE_SEED: u64 = 0x9e_0b_e5;
const PROBE_STREAM: u64 = 31;
pub const PROBE_FILTERS: usize = 16;

/// Fixed random 3x3 filter bank.
#[derive(Debug, Clone)]
pub struct Probe {
    /// `[K, 27]`, channel-major within each window.
    filters: Vec<[f64; 27]>,
}

impl Default for Probe {
    fn default() -> Self {
        let mut rng = stream_rng(PROBE_SEED, PROBE_STREAM, 0);
        let t: Tensor<f64> = normal_tensor(&mut rng, &[PROBE_FILTERS, 27], 1.0 / 27f64.sqrt());
        let filters = t
            .data()
            .chunks_exact(27)
            .map(|c| c.try_into().expect("27 taps"))
            .collect();
        Self { filters }
    }
}

impl Probe {
    fn features(&self, img: &[f64], h: usize, w: usize, r: usize, c: usize) -> Vec<f64> {
        let mut patch = [0.0; 27];
        for ch in 0..3 {
            for dr in 0..3 {
                for dc in 0..3 {
                    patch[ch * 9 + dr * 3 + dc] = img[ch * h * w + (r + dr - 1) * w + (c + dc - 1)];
                }
            }
        }
        self.filters
            .iter()
            .map(|f| f.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>().tanh())
            .collect()
    }

    /// Mean squared feature difference over windows entirely outside `mask`.
    pub fn distance(&self, a: &[f64], b: &[f64], mask: &Mask) -> f64 {
        let (h, w) = (mask.height, mask.width);
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 1..h.saturating_sub(1) {
            for c in 1..w.saturating_sub(1) {
                let clear = (r - 1..=r + 1).all(|rr| (c - 1..=c + 1).all(|cc| !mask.get(rr, cc)));
                if !clear {
                    continue;
                }
                let fa = self.features(a, h, w, r, c);
                let fb = self.features(b, h, w, r, c);
                total += fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / PROBE_FILTERS as f64;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Mean squared pixel difference over the complement of `mask`.
pub fn masked_mse(a: &[f64], b: &[f64], mask: &Mask) -> f64 {
    let n = mask.height * mask.width;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for i in (0..n).filter(|&i| !mask.data[i]) {
            total += (a[ch * n + i] - b[ch * n + i]).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn widen<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|x| x.to_f64_lossy()).collect()
}

/// Output image and mask for one test sample.
pub fn edit_sample<T: Scalar>(model: &EditModel<T>, sample: &Sample, masking: Masking) -> Result<(Tensor<T>, Tensor<T>, Mask)> {
    let (w, w2) = model.edit(&sample.z, &sample.prompt)?;
    let target = model.config.target;
    let m = feature_space_edit(&model.generator, &w, &w2, target, &DEFAULT_STAGES)?;
    let image = match masking {
        Masking::None => m.edited.image.clone(),
        Masking::Feature => m.image,
        Masking::Pixel => pixel_blend(&m.original.image, &m.edited.image, &m.mask)?,
    };
    debug_assert_eq!(m.mask, edit_mask(&m.original, &m.edited, target)?);
    Ok((m.original.image, image, m.mask))
}

pub fn eval_sample<T: Scalar>(model: &EditModel<T>, probe: &Probe, sample: &Sample, masking: Masking) -> Result<EvalSample> {
    let (original, output, mask) = edit_sample(model, sample, masking)?;
    let text = embed_text(&sample.prompt, &model.lexicon)?.tensor::<T>();
    let sim = |img: &Tensor<T>| -> Result<f64> { Ok(cosine(&text, &embed_image(img)?.vector)?.item()?.to_f64_lossy()) };
    let sim_original = sim(&original)?;
    let sim_edited = sim(&output)?;
    let (a, b) = (widen(&original), widen(&output));
    Ok(EvalSample {
        index: sample.index,
        prompt: sample.prompt.clone(),
        sim_original,
        sim_edited,
        hit: sim_edited > sim_original,
        bg_dist: probe.distance(&a, &b, &mask),
        bg_mse: masked_mse(&a, &b, &mask),
    })
}

/// Evaluates the first `n_test` test samples (all when `None`).
pub fn evaluate<T: Scalar>(model: &EditModel<T>, n_test: Option<usize>, masking: Masking) -> Result<EvalReport> {
    let mut test = model.test_set()?;
    if let Some(n) = n_test {
        if n == 0 || n > test.len() {
            return Err(Error::Config(format!("n_test must lie in 1..={}", test.len())));
        }
        test.truncate(n);
    }
    let probe = Probe::default();
    let samples = test
        .par_iter()
        .map(|s| eval_sample(model, &probe, s, masking))
        .collect::<Result<Vec<_>>>()?;
    let method = MethodTag {
        mapper: model.mapper.kind,
        masking,
    };
    Ok(EvalReport::from_samples(method, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{train, TrainConfig};

    fn identity_model() -> EditModel<f64> {
        let cfg = TrainConfig {
            steps: 0,
            n_train: 2,
            n_test: 6,
            ..TrainConfig::default()
        };
        EditModel::from_bundle(&train(&cfg, None).unwrap().bundle).unwrap()
    }

    #[test]
    fn identity_edit_scores_nothing() {
        let model = identity_model();
        for masking in [Masking::None, Masking::Feature, Masking::Pixel] {
            let r = evaluate(&model, None, masking).unwrap();
            assert_eq!(r.samples.len(), 6);
            assert_eq!(r.clip_acc, 0.0);
            assert_eq!((r.bg_dist, r.bg_mse), (0.0, 0.0));
            assert_eq!(r.method.to_string(), format!("attention/{}", masking.name()));
        }
    }

    #[test]
    fn aggregates_recompute_from_samples() {
        let model = identity_model();
        let mut r = evaluate(&model, Some(4), Masking::None).unwrap();
        for (i, s) in r.samples.iter_mut().enumerate() {
            s.hit = i % 2 == 0;
            s.bg_dist = i as f64;
            s.bg_mse = 2.0 * i as f64;
        }
        let again = EvalReport::from_samples(r.method, r.samples.clone());
        assert_eq!(again.clip_acc, 50.0);
        assert_eq!((again.bg_dist, again.bg_mse), (1.5, 3.0));
        assert!(evaluate(&model, Some(0), Masking::None).is_err());
        assert!(evaluate(&model, Some(7), Masking::None).is_err());
    }

    #[test]
    fn probe_ignores_masked_windows() {
        let (h, w) = (6, 7);
        let n = h * w;
        let a = vec![0.2; 3 * n];
        let mut b = a.clone();
        let mut mask = Mask::filled(h, w, false);
        mask.data[2 * w + 3] = true;
        for ch in 0..3 {
            b[ch * n + 2 * w + 3] = 0.9;
        }
        let probe = Probe::default();
        assert_eq!(probe.distance(&a, &b, &mask), 0.0);
        assert_eq!(masked_mse(&a, &b, &mask), 0.0);
        let open = Mask::filled(h, w, false);
        assert!(probe.distance(&a, &b, &open) > 0.0);
        // one pixel of 3 channels out of 3n values
        assert!((masked_mse(&a, &b, &open) - 0.49 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn masking_names_parse() {
        for m in [Masking::None, Masking::Feature, Masking::Pixel] {
            assert_eq!(m.name().parse::<Masking>().unwrap(), m);
        }
        assert_eq!("masked".parse::<Masking>().unwrap(), Masking::Feature);
        assert!("blur".parse::<Masking>().is_err());
    }
}
