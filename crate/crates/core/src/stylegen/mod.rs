//! Frozen, differentiable stand-in for a style-based human generator.
//!
//! Gaussian `z` goes through a tanh mapping network, is truncated toward the
//! mean latent, and is broadcast to the `N` per-layer codes of a
//! [`LatentStack`]. Per-layer style heads read the coarse rows into body
//! proportions, the medium rows into garment shape, and the fine rows into
//! colors. A soft rasterizer then paints the avatar in three stages whose
//! feature maps can be swapped for blends (see [`render`]).

mod parse;
pub(crate) mod render;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use parse::{outside, parse, BodyPart, EditKind, EditTarget, Mask, OUTSIDE_MASS};
pub use render::{render, RegionMaps, RenderOutput, Stage, StageBlend, REGION_LABELS};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::{normal_tensor, sample_normal_vectors};
use crate::scalar::Scalar;

/// Semantic groups of the per-layer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Coarse,
    Medium,
    Fine,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Coarse, Group::Medium, Group::Fine];

    pub fn name(self) -> &'static str {
        match self {
            Group::Coarse => "coarse",
            Group::Medium => "medium",
            Group::Fine => "fine",
        }
    }
}

/// Contiguous partition of `[0, N)` into coarse, medium and fine layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub sizes: [usize; 3],
}

impl Default for GroupLayout {
    fn default() -> Self {
        Self { sizes: [4, 4, 8] }
    }
}

impl GroupLayout {
    pub fn new(coarse: usize, medium: usize, fine: usize) -> Result<Self> {
        if coarse == 0 || medium == 0 || fine == 0 {
            return Err(Error::Config("every layer group needs at least one layer".into()));
        }
        Ok(Self {
            sizes: [coarse, medium, fine],
        })
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn range(&self, g: Group) -> Range<usize> {
        let [c, m, f] = self.sizes;
        match g {
            Group::Coarse => 0..c,
            Group::Medium => c..c + m,
            Group::Fine => c + m..c + m + f,
        }
    }
}

/// The `N x D` per-layer latent codes.
#[derive(Debug, Clone)]
pub struct LatentStack<T: Scalar> {
    pub codes: Tensor<T>,
    pub layout: GroupLayout,
}

impl<T: Scalar> LatentStack<T> {
    pub fn new(codes: Tensor<T>, layout: GroupLayout) -> Result<Self> {
        if codes.rank() != 2 || codes.shape()[0] != layout.n_layers() {
            return Err(Error::ShapeMismatch {
                name: "latent codes".into(),
                expected: vec![layout.n_layers(), 0],
                got: codes.shape().to_vec(),
            });
        }
        Ok(Self { codes, layout })
    }

    pub fn n_layers(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn group(&self, g: Group) -> Result<Tensor<T>> {
        let r = self.layout.range(g);
        Ok(self.codes.narrow(0, r.start, r.len())?)
    }

    /// `w + delta` with the same layout.
    pub fn offset(&self, delta: &Tensor<T>) -> Result<Self> {
        if delta.shape() != self.codes.shape() {
            return Err(Error::ShapeMismatch {
                name: "latent residual".into(),
                expected: self.codes.shape().to_vec(),
                got: delta.shape().to_vec(),
            });
        }
        Self::new(self.codes.add(delta)?, self.layout.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Sigmoid slope applied to signed distances measured in canvas heights.
    pub softness: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 128,
            softness: 160.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub layout: GroupLayout,
    pub psi: f64,
    pub mapping_depth: usize,
    /// Scale applied to the mapping network output.
    pub latent_scale: f64,
    pub w_avg_samples: usize,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            layout: GroupLayout::default(),
            psi: 0.7,
            mapping_depth: 4,
            latent_scale: 0.05,
            w_avg_samples: 10_000,
            seed: 20_240_417,
            render: RenderConfig::default(),
        }
    }
}

impl GeneratorConfig {
    /// Small instance for finite-difference checks.
    pub fn tiny(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            layout: GroupLayout::new(1, 1, 2).expect("non-empty groups"),
            w_avg_samples: 500,
            render: RenderConfig {
                width: 16,
                height: 32,
                softness: 40.0,
            },
            ..Self::default()
        }
    }
}

/// Number of body, garment-shape and color parameters.
pub const BODY_DIM: usize = 4;
pub const GARMENT_DIM: usize = 3;
pub const COLOR_SLOTS: usize = 5;
pub const COLOR_DIM: usize = COLOR_SLOTS * 3;

/// `(lo, hi)` of torso half-width, torso length, leg offset, head radius.
pub const BODY_RANGES: [(f64, f64); BODY_DIM] = [(0.080, 0.100), (0.28, 0.36), (0.055, 0.070), (0.050, 0.065)];

/// Color slots, in row order of [`AvatarParams::colors`].
pub const COLOR_NAMES: [&str; COLOR_SLOTS] = ["upper", "lower", "skin", "hair", "background"];

const NOMINAL_COLORS: [[f64; 3]; COLOR_SLOTS] = [
    [0.30, 0.40, 0.70],
    [0.25, 0.25, 0.35],
    [0.87, 0.68, 0.55],
    [0.20, 0.14, 0.10],
    [0.92, 0.92, 0.90],
];
/// Across-sample logit spread per color slot.
const COLOR_SPREAD: [f64; COLOR_SLOTS] = [1.5, 1.5, 0.4, 0.6, 0.5];
const BODY_SPREAD: f64 = 1.0;
const GARMENT_SPREAD: f64 = 1.5;

/// Whether fine row `row` (of `fine_rows`) feeds color slot `slot`. Each fine
/// layer is specialised: with at least one row per slot, row `i` drives slot
/// `i mod 5` only; with fewer rows, slot `s` is driven by row `s mod rows`.
pub fn fine_row_drives(row: usize, slot: usize, fine_rows: usize) -> bool {
    if fine_rows >= COLOR_SLOTS {
        row % COLOR_SLOTS == slot
    } else {
        slot % fine_rows == row
    }
}

/// Frozen generator weights.
#[derive(Debug, Clone)]
pub struct GeneratorParams<T: Scalar> {
    pub config: GeneratorConfig,
    pub mapping: Vec<(Tensor<T>, Tensor<T>)>,
    /// One `[D, 4]` head per coarse layer.
    pub body_heads: Vec<Tensor<T>>,
    pub body_bias: Tensor<T>,
    /// One `[D, 3]` head per medium layer.
    pub garment_heads: Vec<Tensor<T>>,
    pub garment_bias: Tensor<T>,
    /// One `[D, 15]` head per fine layer, nonzero only on the columns of the
    /// slots that layer drives (see [`fine_row_drives`]).
    pub color_heads: Vec<Tensor<T>>,
    pub color_bias: Tensor<T>,
    pub w_avg: Tensor<T>,
    /// Stage-1 coordinate and Fourier features, `[F, H, W]`.
    pub coord_features: Tensor<T>,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

fn cast<T: Scalar>(t: &Tensor<f64>) -> Tensor<T> {
    Tensor::new(t.shape(), t.data().iter().map(|&v| T::of(v)).collect()).expect("same shape")
}

/// Seeded deterministic construction, always computed in f64 and then cast so
/// that f32 and f64 generators agree up to rounding.
struct Builder {
    cfg: GeneratorConfig,
    mapping: Vec<(Tensor<f64>, Tensor<f64>)>,
}

impl Builder {
    fn mlp(&self, z: &[f64]) -> Vec<f64> {
        let d = self.cfg.latent_dim;
        let mut h = Tensor::new(&[1, d], z.to_vec()).expect("latent shape");
        for (w, b) in &self.mapping {
            h = h.matmul(w).and_then(|x| x.add(b)).and_then(|x| x.tanh()).expect("mapping layer");
        }
        h.data().iter().map(|v| v * self.cfg.latent_scale).collect()
    }
}

impl<T: Scalar> GeneratorParams<T> {
    pub fn build(cfg: &GeneratorConfig) -> Result<Self> {
        let d = cfg.latent_dim;
        if d == 0 || cfg.mapping_depth == 0 {
            return Err(Error::Config("latent_dim and mapping_depth must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.psi) {
            return Err(Error::Config(format!("psi must lie in [0,1], got {}", cfg.psi)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gain = 1.6 / (d as f64).sqrt();
        let mapping: Vec<_> = (0..cfg.mapping_depth)
            .map(|_| (normal_tensor::<f64>(&mut rng, &[d, d], gain), normal_tensor::<f64>(&mut rng, &[d], 0.1)))
            .collect();
        let builder = Builder {
            cfg: cfg.clone(),
            mapping,
        };

        // mean latent from mapped samples on a dedicated stream
        let zs = sample_normal_vectors::<f64>(cfg.seed.wrapping_add(0xA5A5), cfg.w_avg_samples.max(1), d);
        let mut w_avg = vec![0.0; d];
        let mapped: Vec<Vec<f64>> = zs.iter().map(|z| builder.mlp(z)).collect();
        for m in &mapped {
            for (a, v) in w_avg.iter_mut().zip(m) {
                *a += v / mapped.len() as f64;
            }
        }
        let truncated: Vec<Vec<f64>> = mapped
            .iter()
            .take(2000)
            .map(|m| m.iter().zip(&w_avg).map(|(x, a)| a + cfg.psi * (x - a)).collect())
            .collect();

        // heads are rescaled so that each output logit has a fixed spread
        // over truncated samples (rows are identical for sampled latents)
        let mut make_heads = |rows: usize, outs: usize, spread: &dyn Fn(usize) -> f64, drives: &dyn Fn(usize, usize) -> bool| {
            let heads: Vec<Tensor<f64>> = (0..rows)
                .map(|r| {
                    let h = normal_tensor::<f64>(&mut rng, &[d, outs], 1.0);
                    let data = h.data().iter().enumerate().map(|(i, v)| if drives(r, i % outs) { *v } else { 0.0 }).collect();
                    Tensor::new(&[d, outs], data).expect("head shape")
                })
                .collect();
            let mut summed = vec![0.0; d * outs];
            for h in &heads {
                summed.iter_mut().zip(h.data()).for_each(|(s, v)| *s += v);
            }
            let mut scale = vec![1.0; outs];
            for (o, sc) in scale.iter_mut().enumerate() {
                let vals: Vec<f64> = truncated
                    .iter()
                    .map(|w| (0..d).map(|k| w[k] * summed[k * outs + o]).sum())
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                *sc = spread(o) / var.sqrt().max(1e-12);
            }
            let heads: Vec<Tensor<f64>> = heads
                .into_iter()
                .map(|h| {
                    let data = h.data().iter().enumerate().map(|(i, v)| v * scale[i % outs]).collect();
                    Tensor::new(&[d, outs], data).expect("head shape")
                })
                .collect();
            // bias centers the mean latent on the nominal logits
            let mut at_avg = vec![0.0; outs];
            for h in &heads {
                for (o, a) in at_avg.iter_mut().enumerate() {
                    *a += (0..d).map(|k| w_avg[k] * h.data()[k * outs + o]).sum::<f64>();
                }
            }
            (heads, at_avg)
        };
        let [nc, nm, nf] = cfg.layout.sizes;
        let (body_heads, body_at) = make_heads(nc, BODY_DIM, &|_| BODY_SPREAD, &|_, _| true);
        let (garment_heads, garment_at) = make_heads(nm, GARMENT_DIM, &|_| GARMENT_SPREAD, &|_, _| true);
        let (color_heads, color_at) = make_heads(nf, COLOR_DIM, &|o| COLOR_SPREAD[o / 3], &|r, o| {
            fine_row_drives(r, o / 3, nf)
        });
        let body_bias: Vec<f64> = body_at.iter().map(|a| -a).collect();
        let garment_bias: Vec<f64> = garment_at.iter().map(|a| -a).collect();
        let color_bias: Vec<f64> = color_at
            .iter()
            .enumerate()
            .map(|(o, a)| logit(NOMINAL_COLORS[o / 3][o % 3]) - a)
            .collect();

        Ok(Self {
            config: cfg.clone(),
            mapping: builder.mapping.iter().map(|(w, b)| (cast(w), cast(b))).collect(),
            body_heads: body_heads.iter().map(cast).collect(),
            body_bias: cast(&Tensor::vector(body_bias)),
            garment_heads: garment_heads.iter().map(cast).collect(),
            garment_bias: cast(&Tensor::vector(garment_bias)),
            color_heads: color_heads.iter().map(cast).collect(),
            color_bias: cast(&Tensor::vector(color_bias)),
            w_avg: cast(&Tensor::vector(w_avg)),
            coord_features: render::coord_features(&cfg.render),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.config.layout
    }

    /// Copy with a different truncation factor.
    pub fn with_psi(&self, psi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&psi) {
            return Err(Error::Config(format!("psi must lie in [0,1], got {psi}")));
        }
        let mut p = self.clone();
        p.config.psi = psi;
        Ok(p)
    }

    /// Standard-normal latents; sample `i` depends only on `(seed, i)`.
    pub fn sample_z(&self, seed: u64, count: usize) -> Vec<Vec<T>> {
        sample_normal_vectors(seed, count, self.latent_dim())
    }

    /// Untruncated mapping network output.
    pub fn mapping_forward(&self, z: &[T]) -> Result<Tensor<T>> {
        let d = self.latent_dim();
        if z.len() != d {
            return Err(Error::ShapeMismatch {
                name: "z".into(),
                expected: vec![d],
                got: vec![z.len()],
            });
        }
        let mut h = Tensor::new(&[1, d], z.to_vec())?;
        for (w, b) in &self.mapping {
            h = h.matmul(w)?.add(b)?.tanh()?;
        }
        Ok(h.scale(T::of(self.config.latent_scale))?.reshape(&[d])?)
    }

    /// Truncated latent `w_avg + psi (MLP(z) - w_avg)` broadcast to every layer.
    pub fn map_to_w(&self, z: &[T]) -> Result<LatentStack<T>> {
        let raw = self.mapping_forward(z)?;
        let psi = T::of(self.config.psi);
        let w = raw.sub(&self.w_avg)?.scale(psi)?.add(&self.w_avg)?;
        let n = self.config.layout.n_layers();
        let rows = Tensor::<T>::ones(&[n, 1]).mul(&w)?;
        LatentStack::new(rows, self.config.layout.clone())
    }

    fn head_sum(&self, rows: &Tensor<T>, heads: &[Tensor<T>], bias: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc = bias.reshape(&[1, bias.len()])?;
        for (i, h) in heads.iter().enumerate() {
            acc = acc.add(&rows.narrow(0, i, 1)?.matmul(h)?)?;
        }
        Ok(acc.reshape(&[bias.len()])?)
    }

    /// Per-layer style heads. Coarse rows drive the body, medium rows the
    /// garment shape, fine rows the colors.
    pub fn decode_params(&self, w: &LatentStack<T>) -> Result<AvatarParams<T>> {
        let expected = [self.config.layout.n_layers(), self.latent_dim()];
        if w.codes.shape() != expected {
            return Err(Error::ShapeMismatch {
                name: "latent codes".into(),
                expected: expected.to_vec(),
                got: w.codes.shape().to_vec(),
            });
        }
        let body_logits = self.head_sum(&w.group(Group::Coarse)?, &self.body_heads, &self.body_bias)?;
        let lo = Tensor::vector(BODY_RANGES.iter().map(|r| T::of(r.0)).collect());
        let span = Tensor::vector(BODY_RANGES.iter().map(|r| T::of(r.1 - r.0)).collect());
        let body = body_logits.sigmoid()?.mul(&span)?.add(&lo)?;
        let garment = self
            .head_sum(&w.group(Group::Medium)?, &self.garment_heads, &self.garment_bias)?
            .sigmoid()?;
        let colors = self
            .head_sum(&w.group(Group::Fine)?, &self.color_heads, &self.color_bias)?
            .sigmoid()?
            .reshape(&[COLOR_SLOTS, 3])?;
        Ok(AvatarParams { body, garment, colors })
    }

    /// Full pipeline `w -> image` without injection.
    pub fn generate(&self, w: &LatentStack<T>) -> Result<RenderOutput<T>> {
        render(&self.decode_params(w)?, self, &[])
    }

    /// SHA-256 over every frozen array, in a fixed order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor<T>| {
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        };
        for (w, b) in &self.mapping {
            feed(w);
            feed(b);
        }
        self.body_heads.iter().for_each(&mut feed);
        feed(&self.body_bias);
        self.garment_heads.iter().for_each(&mut feed);
        feed(&self.garment_bias);
        self.color_heads.iter().for_each(&mut feed);
        feed(&self.color_bias);
        feed(&self.w_avg);
        feed(&self.coord_features);
        h.update(self.config.psi.to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// Semantic avatar parameters; every field lies inside its declared range.
#[derive(Debug, Clone)]
pub struct AvatarParams<T: Scalar> {
    /// Torso half-width, torso length, leg offset, head radius (canvas heights).
    pub body: Tensor<T>,
    /// Sleeve length, pant length, skirt blend, each in `[0,1]`.
    pub garment: Tensor<T>,
    /// `[5, 3]` RGB rows in [`COLOR_NAMES`] order.
    pub colors: Tensor<T>,
}

impl<T: Scalar> AvatarParams<T> {
    pub fn from_values(body: [f64; BODY_DIM], garment: [f64; GARMENT_DIM], colors: [[f64; 3]; COLOR_SLOTS]) -> Self {
        let flat: Vec<f64> = colors.iter().flatten().copied().collect();
        Self {
            body: Tensor::from_f64(&[BODY_DIM], &body).expect("body"),
            garment: Tensor::from_f64(&[GARMENT_DIM], &garment).expect("garment"),
            colors: Tensor::from_f64(&[COLOR_SLOTS, 3], &flat).expect("colors"),
        }
    }

    /// Mid-range body, mid garment, nominal palette.
    pub fn nominal() -> Self {
        let body = BODY_RANGES.map(|(lo, hi)| 0.5 * (lo + hi));
        Self::from_values(body, [0.5, 0.5, 0.0], NOMINAL_COLORS)
    }

    pub fn with_color(&self, slot: usize, rgb: [f64; 3]) -> Self {
        let mut c = self.colors.to_f64_vec();
        c[slot * 3..slot * 3 + 3].copy_from_slice(&rgb);
        Self {
            body: self.body.detach(),
            garment: self.garment.detach(),
            colors: Tensor::from_f64(&[COLOR_SLOTS, 3], &c).expect("colors"),
        }
    }

    pub fn with_garment(&self, garment: [f64; GARMENT_DIM]) -> Self {
        Self {
            body: self.body.detach(),
            garment: Tensor::from_f64(&[GARMENT_DIM], &garment).expect("garment"),
            colors: self.colors.detach(),
        }
    }

    pub fn body_value(&self, i: usize) -> Result<Tensor<T>> {
        Ok(self.body.narrow(0, i, 1)?)
    }

    pub fn garment_value(&self, i: usize) -> Result<Tensor<T>> {
        Ok(self.garment.narrow(0, i, 1)?)
    }

    pub fn sleeve_length(&self) -> f64 {
        self.garment.data()[0].to_f64_lossy()
    }
}
