//! Training losses, mask merging, and the two masking modes used at edit time.


use serde::{Deserialize, Serialize};

use crate::embednet::{cosine, embed_image, PromptEmbedding, MIN_NORM};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;
use crate::stylegen::{outside, parse, EditTarget, GeneratorParams, LatentStack, Mask, RenderOutput, Stage, StageBlend};

/// Threshold under which an image displacement counts as no edit.
pub const DIRECTION_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub clip: f64,
    pub direct: f64,
    pub bg: f64,
    pub norm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            clip: 1.0,
            direct: 2.0,
            bg: 5.0,
            norm: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.clip, self.direct, self.bg, self.norm];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        Ok(())
    }
}

/// Per-component loss values of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clip: f64,
    pub direct: f64,
    pub bg: f64,
    pub norm: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Components combined with `weights`.
    pub fn weighted(clip: f64, direct: f64, bg: f64, norm: f64, weights: &LossWeights) -> Self {
        Self {
            clip,
            direct,
            bg,
            norm,
            total: weights.clip * clip + weights.direct * direct + weights.bg * bg + weights.norm * norm,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.clip, self.direct, self.bg, self.norm, self.total].iter().all(|v| v.is_finite())
    }

    /// Mean over a batch.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            clip: sum(|b| b.clip),
            direct: sum(|b| b.direct),
            bg: sum(|b| b.bg),
            norm: sum(|b| b.norm),
            total: sum(|b| b.total),
        }
    }
}

/// The unedited side of an edit: `G(w)`, its embedding and its outside mask.
#[derive(Debug, Clone)]
pub struct Original<T: Scalar> {
    pub w: LatentStack<T>,
    pub render: RenderOutput<T>,
    pub embedding: Tensor<T>,
}

impl<T: Scalar> Original<T> {
    pub fn new(gen: &GeneratorParams<T>, w: &LatentStack<T>) -> Result<Self> {
        let w = LatentStack::new(w.codes.detach(), w.layout.clone())?;
        let render = gen.generate(&w)?;
        let embedding = embed_image(&render.image)?.vector.detach();
        Ok(Self { w, render, embedding })
    }
}

/// Both sides of one edit `w' = w + dw`, plus the prompts.
#[derive(Debug, Clone)]
pub struct EditContext<'a, T: Scalar> {
    pub original: &'a Original<T>,
    pub delta: Tensor<T>,
    pub w_edit: LatentStack<T>,
    pub edited: RenderOutput<T>,
    pub edited_embedding: Tensor<T>,
    pub prompt: &'a PromptEmbedding,
    pub source: &'a PromptEmbedding,
    pub target: EditTarget,
}

impl<'a, T: Scalar> EditContext<'a, T> {
    pub fn new(
        gen: &GeneratorParams<T>,
        original: &'a Original<T>,
        delta: &Tensor<T>,
        prompt: &'a PromptEmbedding,
        source: &'a PromptEmbedding,
        target: EditTarget,
    ) -> Result<Self> {
        let w_edit = original.w.offset(delta)?;
        let edited = gen.generate(&w_edit)?;
        let edited_embedding = embed_image(&edited.image)?.vector;
        Ok(Self {
            original,
            delta: delta.clone(),
            w_edit,
            edited,
            edited_embedding,
            prompt,
            source,
            target,
        })
    }
}

/// `1 - cos(a, b)` for unit vectors.
pub fn clip_distance<T: Scalar>(image: &Tensor<T>, text: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(cosine(image, text)?.neg()?.add_scalar(T::one())?)
}

/// `1 - cos(E_i(G(w')), E_t(t))`.
pub fn clip_loss<T: Scalar>(ctx: &EditContext<'_, T>) -> Result<Tensor<T>> {
    clip_distance(&ctx.edited_embedding, &ctx.prompt.tensor())
}

/// `E_t(t) - E_t(t_source)`, rejecting a zero direction.
pub fn text_direction(prompt: &PromptEmbedding, source: &PromptEmbedding) -> Result<Vec<f64>> {
    let d: Vec<f64> = prompt.vector.iter().zip(&source.vector).map(|(a, b)| a - b).collect();
    if d.iter().map(|v| v * v).sum::<f64>().sqrt() <= MIN_NORM {
        return Err(Error::SourceEqualsTarget);
    }
    Ok(d)
}

/// `1 - cos(dT, dI)` for raw displacement vectors. A vanishing `dI` yields
/// the untracked constant 1.
pub fn direction_loss<T: Scalar>(dt: &[f64], di: &Tensor<T>) -> Result<Tensor<T>> {
    let ni = di.l2norm()?;
    if ni.item()?.to_f64_lossy() < DIRECTION_EPS {
        return Ok(Tensor::scalar(T::one()));
    }
    let nt = dt.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dt = Tensor::vector(dt.iter().map(|&v| T::of(v / nt)).collect());
    Ok(di.dot(&dt)?.div(&ni)?.neg()?.add_scalar(T::one())?)
}

pub fn directional_loss<T: Scalar>(ctx: &EditContext<'_, T>) -> Result<Tensor<T>> {
    let dt = text_direction(ctx.prompt, ctx.source)?;
    let di = ctx.edited_embedding.sub(&ctx.original.embedding)?;
    direction_loss(&dt, &di)
}

/// `|| keep ⊙ (a - b) ||_2` with `keep` a constant mask.
pub fn background_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, keep: &Mask) -> Result<Tensor<T>> {
    let m = keep.to_tensor::<T>();
    Ok(a.sub(b)?.mul(&m)?.l2norm()?)
}

/// Intersection of the outside-target masks of both renders.
pub fn background_mask<T: Scalar>(a: &RenderOutput<T>, b: &RenderOutput<T>, target: EditTarget) -> Result<Mask> {
    let oa = outside(&a.regions, target);
    let ob = outside(&b.regions, target);
    intersect_masks(&oa, &ob)
}

pub fn background_loss<T: Scalar>(ctx: &EditContext<'_, T>) -> Result<Tensor<T>> {
    let keep = background_mask(&ctx.original.render, &ctx.edited, ctx.target)?;
    background_distance(&ctx.original.render.image, &ctx.edited.image, &keep)
}

/// `||dw||_2`.
pub fn norm_loss<T: Scalar>(delta: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(delta.l2norm()?)
}

/// Weighted sum of the four losses, with the per-component values.
pub fn total_loss<T: Scalar>(ctx: &EditContext<'_, T>, weights: &LossWeights) -> Result<(Tensor<T>, LossBreakdown)> {
    let parts = [
        (clip_loss(ctx)?, weights.clip),
        (directional_loss(ctx)?, weights.direct),
        (background_loss(ctx)?, weights.bg),
        (norm_loss(&ctx.delta)?, weights.norm),
    ];
    let mut total = Tensor::scalar(T::zero());
    let mut vals = [0.0; 4];
    for (i, (t, w)) in parts.iter().enumerate() {
        vals[i] = t.item()?.to_f64_lossy();
        if *w != 0.0 {
            total = total.add(&t.scale(T::of(*w))?)?;
        }
    }
    let breakdown = LossBreakdown::weighted(vals[0], vals[1], vals[2], vals[3], weights);
    Ok((total, breakdown))
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch {
            name: "mask".into(),
            expected: vec![a.height, a.width],
            got: vec![b.height, b.width],
        });
    }
    Ok(())
}

/// Pixelwise union.
pub fn merge_masks(a: &Mask, b: &Mask) -> Result<Mask> {
    same_shape(a, b)?;
    Mask::new(a.height, a.width, a.data.iter().zip(&b.data).map(|(x, y)| *x || *y).collect())
}

pub fn intersect_masks(a: &Mask, b: &Mask) -> Result<Mask> {
    same_shape(a, b)?;
    Mask::new(a.height, a.width, a.data.iter().zip(&b.data).map(|(x, y)| *x && *y).collect())
}

/// Average-pools `m` onto an `h x w` grid and re-binarizes at one half.
/// The source size must be an integer multiple of the target size.
pub fn pool_mask(m: &Mask, h: usize, w: usize) -> Result<Mask> {
    if h == 0 || w == 0 || m.height % h != 0 || m.width % w != 0 {
        return Err(Error::ShapeMismatch {
            name: "pooled mask".into(),
            expected: vec![m.height, m.width],
            got: vec![h, w],
        });
    }
    let (fy, fx) = (m.height / h, m.width / w);
    let data = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let on = (0..fy)
                .flat_map(|dy| (0..fx).map(move |dx| (r * fy + dy, c * fx + dx)))
                .filter(|&(y, x)| m.get(y, x))
                .count();
            2 * on >= fy * fx
        })
        .collect();
    Mask::new(h, w, data)
}

/// Injection stages used unless configured otherwise.
pub const DEFAULT_STAGES: [Stage; 2] = [Stage::Regions, Stage::Palette];

/// Result of a masked edit, keeping the pieces for inspection.
#[derive(Debug, Clone)]
pub struct MaskedEdit<T: Scalar> {
    pub image: Tensor<T>,
    pub mask: Mask,
    pub original: RenderOutput<T>,
    pub edited: RenderOutput<T>,
}

/// `M`: union of the target parses of both renders.
pub fn edit_mask<T: Scalar>(a: &RenderOutput<T>, b: &RenderOutput<T>, target: EditTarget) -> Result<Mask> {
    merge_masks(&parse(&a.regions, target), &parse(&b.regions, target))
}

/// Renders `G(w)` and `G(w')`, merges their target parses into `M`, and
/// re-renders from `w` with `M`-blends of the `w'` feature maps at `stages`.
pub fn feature_space_edit<T: Scalar>(
    gen: &GeneratorParams<T>,
    w: &LatentStack<T>,
    w_edit: &LatentStack<T>,
    target: EditTarget,
    stages: &[Stage],
) -> Result<MaskedEdit<T>> {
    let original = gen.generate(w)?;
    let edited = gen.generate(w_edit)?;
    let mask = edit_mask(&original, &edited, target)?;
    let image = blend_features(gen, w, &edited, &mask, stages)?;
    Ok(MaskedEdit {
        image,
        mask,
        original,
        edited,
    })
}

/// Re-renders `w` with `mask`-blends of `edited`'s stage maps.
pub fn blend_features<T: Scalar>(
    gen: &GeneratorParams<T>,
    w: &LatentStack<T>,
    edited: &RenderOutput<T>,
    mask: &Mask,
    stages: &[Stage],
) -> Result<Tensor<T>> {
    let mut inject = Vec::with_capacity(stages.len());
    for &s in stages {
        if !s.injectable() {
            return Err(Error::InvalidInjectionStage(s));
        }
        let other = edited.stage(s);
        let m = pool_mask(mask, mask.height, mask.width)?;
        inject.push(StageBlend {
            stage: s,
            mask: m.to_tensor(),
            other: other.clone(),
        });
    }
    Ok(crate::stylegen::render(&gen.decode_params(w)?, gen, &inject)?.image)
}

/// `M ⊙ G(w') + (1 - M) ⊙ G(w)` in pixel space.
pub fn pixel_space_edit<T: Scalar>(
    gen: &GeneratorParams<T>,
    w: &LatentStack<T>,
    w_edit: &LatentStack<T>,
    target: EditTarget,
) -> Result<MaskedEdit<T>> {
    let original = gen.generate(w)?;
    let edited = gen.generate(w_edit)?;
    let mask = edit_mask(&original, &edited, target)?;
    let image = pixel_blend(&original.image, &edited.image, &mask)?;
    Ok(MaskedEdit {
        image,
        mask,
        original,
        edited,
    })
}

pub fn pixel_blend<T: Scalar>(base: &Tensor<T>, other: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let m = mask.to_tensor::<T>();
    Ok(other.sub(base)?.mul(&m)?.add(base)?)
}

/// Pixels within `radius` (Chebyshev) of the mask boundary, where the
/// boundary is every pixel with a 4-neighbour of the opposite value.
pub fn boundary_band(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let edge: Vec<bool> = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let v = mask.data[i];
            let differs = |rr: usize, cc: usize| mask.get(rr, cc) != v;
            (r > 0 && differs(r - 1, c)) || (r + 1 < h && differs(r + 1, c)) || (c > 0 && differs(r, c - 1)) || (c + 1 < w && differs(r, c + 1))
        })
        .collect();
    let rad = radius as isize;
    let data = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            (-rad..=rad).any(|dy| {
                (-rad..=rad).any(|dx| {
                    let (y, x) = (r + dy, c + dx);
                    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && edge[y as usize * w + x as usize]
                })
            })
        })
        .collect();
    Mask { height: h, width: w, data }
}

/// Largest image-gradient magnitude inside the `radius` band around the
/// boundary of `mask`. Gradients are forward differences summed over
/// channels in quadrature.
pub fn seam_energy<T: Scalar>(image: &Tensor<T>, mask: &Mask, radius: usize) -> f64 {
    let (h, w) = (mask.height, mask.width);
    let band = boundary_band(mask, radius);
    let px = image.data();
    let at = |ch: usize, r: usize, c: usize| px[ch * h * w + r * w + c].to_f64_lossy();
    let mut best: f64 = 0.0;
    for r in 0..h {
        for c in 0..w {
            if !band.get(r, c) {
                continue;
            }
            let mut g2 = 0.0;
            for ch in 0..3 {
                let gx = if c + 1 < w { at(ch, r, c + 1) - at(ch, r, c) } else { 0.0 };
                let gy = if r + 1 < h { at(ch, r + 1, c) - at(ch, r, c) } else { 0.0 };
                g2 += gx * gx + gy * gy;
            }
            best = best.max(g2.sqrt());
        }
    }
    best
}
