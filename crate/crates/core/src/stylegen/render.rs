//! Staged soft rasterizer.
//!
//! Stages, in order:
//! - `Coord`: constant coordinate and Fourier features `[15, H, W]`
//! - `Regions`: alpha-over composited region indicators `[7, H, W]`
//! - `Refined`: the region stack after a separable 3x3 smoothing pass
//! - `Palette`: region colors, a `[7, 3]` table expanded over pixels
//!
//! The image is `sum_r refined[r] * palette[r]` per pixel. Every stage but `Coord` can
//! be replaced by a blend before rendering continues.

use serde::{Deserialize, Serialize};

use super::{AvatarParams, GeneratorParams, RenderConfig};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

pub const REGION_LABELS: [&str; 7] = ["background", "hair", "face", "arms", "legs", "upper-clothes", "lower-clothes"];

pub(crate) const BG: usize = 0;
pub(crate) const HAIR: usize = 1;
pub(crate) const FACE: usize = 2;
pub(crate) const ARMS: usize = 3;
pub(crate) const LEGS: usize = 4;
pub(crate) const UPPER: usize = 5;
pub(crate) const LOWER: usize = 6;

/// Front-to-back drawing order of the foreground regions.
const DRAW_ORDER: [usize; 6] = [FACE, HAIR, UPPER, ARMS, LOWER, LEGS];
/// Color slot used by each region label.
const REGION_COLOR: [usize; 7] = [4, 3, 2, 2, 2, 0, 1];

pub(crate) const SHOULDER_Y: f64 = 0.19;
pub(crate) const NECK_BASE_Y: f64 = 0.175;
pub(crate) const ARM_WIDTH: f64 = 0.040;
pub(crate) const ARM_GAP: f64 = 0.004;
pub(crate) const ARM_LENGTH: f64 = 0.34;
pub(crate) const LEG_HALF_WIDTH: f64 = 0.03;
pub(crate) const FOOT_Y: f64 = 0.96;
const SLEEVE_WIDEN: f64 = 1.25;
const PANT_WIDEN: f64 = 1.3;
const SKIRT_FLARE: f64 = 0.3;
const SKIRT_MIN: f64 = 0.10;
const PANT_MIN: f64 = 0.03;
const SEAT_DROP: f64 = 0.04;
const FOURIER_OCTAVES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Coord,
    Regions,
    Refined,
    Palette,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Coord, Stage::Regions, Stage::Refined, Stage::Palette];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Coord => "coord",
            Stage::Regions => "regions",
            Stage::Refined => "refined",
            Stage::Palette => "palette",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn injectable(self) -> bool {
        self != Stage::Coord
    }
}

/// Replacement for one stage: `mask * other + (1 - mask) * F`.
#[derive(Debug, Clone)]
pub struct StageBlend<T: Scalar> {
    pub stage: Stage,
    /// `[H, W]`, broadcast over channels.
    pub mask: Tensor<T>,
    pub other: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct RegionMaps<T: Scalar> {
    /// `[7, H, W]` soft indicators; a partition of unity per pixel.
    pub soft: Tensor<T>,
    /// Argmax label per pixel, row-major.
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> RegionMaps<T> {
    pub fn from_soft(soft: Tensor<T>) -> Result<Self> {
        let s = soft.shape();
        if s.len() != 3 || s[0] != REGION_LABELS.len() {
            return Err(Error::ShapeMismatch {
                name: "region stack".into(),
                expected: vec![REGION_LABELS.len(), 0, 0],
                got: s.to_vec(),
            });
        }
        let (h, w) = (s[1], s[2]);
        let n = h * w;
        let d = soft.data();
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for r in 1..REGION_LABELS.len() {
                    if d[r * n + p] > d[best * n + p] {
                        best = r;
                    }
                }
                best as u8
            })
            .collect();
        Ok(Self {
            soft,
            labels,
            height: h,
            width: w,
        })
    }

    pub fn count(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == label).count()
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput<T: Scalar> {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<T>,
    /// Stage feature maps after any injection, indexed by [`Stage::index`].
    pub stages: Vec<Tensor<T>>,
    pub regions: RegionMaps<T>,
}

impl<T: Scalar> RenderOutput<T> {
    pub fn stage(&self, s: Stage) -> &Tensor<T> {
        &self.stages[s.index()]
    }
}

pub(crate) fn pixel_x(c: usize, cfg: &RenderConfig) -> f64 {
    ((c as f64 + 0.5) / cfg.width as f64 - 0.5) * (cfg.width as f64 / cfg.height as f64)
}

pub(crate) fn pixel_y(r: usize, cfg: &RenderConfig) -> f64 {
    (r as f64 + 0.5) / cfg.height as f64
}

pub(crate) fn coord_features<T: Scalar>(cfg: &RenderConfig) -> Tensor<T> {
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let channels = 3 + 4 * FOURIER_OCTAVES;
    let mut data = vec![T::zero(); channels * n];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (pixel_x(c, cfg), pixel_y(r, cfg));
            let p = r * w + c;
            let mut feats = vec![x, y, x.abs()];
            for o in 0..FOURIER_OCTAVES {
                let f = std::f64::consts::PI * (1 << o) as f64;
                feats.extend([(2.0 * f * x).sin(), (2.0 * f * x).cos(), (f * y).sin(), (f * y).cos()]);
            }
            for (ch, v) in feats.into_iter().enumerate() {
                data[ch * n + p] = T::of(v);
            }
        }
    }
    Tensor::new(&[channels, h, w], data).expect("coord shape")
}

/// Soft-geometry helpers. Coordinates are kept separable (`x` and `|x|` as
/// `[1, W]` rows, `y` as an `[H, 1]` column) so that axis-aligned shapes cost
/// one sigmoid per row or column; broadcasting forms the `[H, W]` maps.
struct Geo<T: Scalar> {
    x: Tensor<T>,
    y: Tensor<T>,
    ax: Tensor<T>,
    k: T,
}

fn konst<T: Scalar>(v: f64) -> Tensor<T> {
    Tensor::scalar(T::of(v))
}

fn union<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(a.add(b)?.sub(&a.mul(b)?)?)
}

impl<T: Scalar> Geo<T> {
    fn new(cfg: &RenderConfig) -> Self {
        let xs: Vec<f64> = (0..cfg.width).map(|c| pixel_x(c, cfg)).collect();
        let ys: Vec<f64> = (0..cfg.height).map(|r| pixel_y(r, cfg)).collect();
        let axs: Vec<f64> = xs.iter().map(|v| v.abs()).collect();
        Self {
            x: Tensor::from_f64(&[1, cfg.width], &xs).expect("row"),
            y: Tensor::from_f64(&[cfg.height, 1], &ys).expect("column"),
            ax: Tensor::from_f64(&[1, cfg.width], &axs).expect("row"),
            k: T::of(cfg.softness),
        }
    }

    /// Soft indicator of `d > 0`.
    fn inside(&self, d: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(d.scale(self.k)?.sigmoid()?)
    }

    /// Soft indicator of `lo < y < hi`, as an `[H, 1]` column.
    fn rows(&self, lo: &Tensor<T>, hi: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.inside(&self.y.sub(lo)?)?.mul(&self.inside(&hi.sub(&self.y)?)?)?)
    }

    /// Soft indicator of `|x| < half`, as a `[1, W]` row.
    fn centered(&self, half: &Tensor<T>) -> Result<Tensor<T>> {
        self.inside(&half.sub(&self.ax)?)
    }

    /// Pair of vertical bands mirrored about `x = 0`, centered at `|x| = center`.
    fn mirrored_band(&self, center: &Tensor<T>, half: &Tensor<T>) -> Result<Tensor<T>> {
        let off = self.ax.sub(center)?.abs()?;
        self.inside(&half.sub(&off)?)
    }

    fn disk(&self, cy: &Tensor<T>, radius: &Tensor<T>) -> Result<Tensor<T>> {
        let dy = self.y.sub(cy)?;
        let dist = self.x.square()?.add(&dy.square()?)?.sqrt()?;
        self.inside(&radius.sub(&dist)?)
    }
}

/// Unblended foreground alphas, indexed by region label.
fn alphas<T: Scalar>(geo: &Geo<T>, avatar: &AvatarParams<T>) -> Result<Vec<Option<Tensor<T>>>> {
    let thw = avatar.body_value(0)?;
    let tl = avatar.body_value(1)?;
    let leg_sep = avatar.body_value(2)?;
    let head_r = avatar.body_value(3)?;
    let sleeve = avatar.garment_value(0)?;
    let pant = avatar.garment_value(1)?;
    let skirt = avatar.garment_value(2)?;

    let shoulder = konst::<T>(SHOULDER_Y);
    let hip = tl.add(&shoulder)?;

    let cy = konst::<T>(NECK_BASE_Y).sub(&head_r)?;
    let head = geo.disk(&cy, &head_r)?;
    let neck = geo
        .centered(&konst(0.025))?
        .mul(&geo.rows(&cy, &konst(SHOULDER_Y + 0.01))?)?;
    let face = union(&head, &neck)?;

    let hair_line = cy.add(&head_r.scale(T::of(0.3))?)?;
    let hair = geo
        .disk(&cy, &head_r.scale(T::of(1.35))?)?
        .mul(&geo.inside(&hair_line.sub(&geo.y)?)?)?;

    let torso = geo.centered(&thw)?.mul(&geo.rows(&shoulder, &hip)?)?;
    let arm_center = thw.add_scalar(T::of(ARM_GAP + 0.5 * ARM_WIDTH))?;
    let arm_top = konst::<T>(SHOULDER_Y + 0.01);
    let arms = geo
        .mirrored_band(&arm_center, &konst(0.5 * ARM_WIDTH))?
        .mul(&geo.rows(&arm_top, &konst(SHOULDER_Y + 0.01 + ARM_LENGTH))?)?;
    let sleeve_end = sleeve.scale(T::of(ARM_LENGTH))?.add(&arm_top)?;
    let sleeves = geo
        .mirrored_band(&arm_center, &konst(0.5 * SLEEVE_WIDEN * ARM_WIDTH))?
        .mul(&geo.rows(&shoulder, &sleeve_end)?)?;
    let upper = union(&torso, &sleeves)?;

    let waist_top = hip.add_scalar(T::of(-0.02))?;
    let legs = geo
        .mirrored_band(&leg_sep, &konst(LEG_HALF_WIDTH))?
        .mul(&geo.rows(&waist_top, &konst(FOOT_Y))?)?;
    let rest = konst::<T>(FOOT_Y).sub(&hip)?;
    let pant_end = hip.add(&rest.add_scalar(T::of(-PANT_MIN))?.mul(&pant)?.add_scalar(T::of(PANT_MIN))?)?;
    let tubes = geo
        .mirrored_band(&leg_sep, &konst(PANT_WIDEN * LEG_HALF_WIDTH))?
        .mul(&geo.rows(&waist_top, &pant_end)?)?;
    let seat = geo
        .centered(&leg_sep.add_scalar(T::of(PANT_WIDEN * LEG_HALF_WIDTH))?)?
        .mul(&geo.rows(&waist_top, &hip.add_scalar(T::of(SEAT_DROP))?)?)?;
    let pants = union(&tubes, &seat)?;
    let skirt_end = hip.add(&rest.add_scalar(T::of(-SKIRT_MIN))?.mul(&pant)?.add_scalar(T::of(SKIRT_MIN))?)?;
    let flare = thw.add(&geo.y.sub(&hip)?.relu()?.scale(T::of(SKIRT_FLARE))?)?;
    let skirt_shape = geo
        .inside(&flare.sub(&geo.ax)?)?
        .mul(&geo.rows(&waist_top, &skirt_end)?)?;
    let lower = pants.add(&skirt_shape.sub(&pants)?.mul(&skirt)?)?;

    let mut out = vec![None; REGION_LABELS.len()];
    out[FACE] = Some(face);
    out[HAIR] = Some(hair);
    out[UPPER] = Some(upper);
    out[ARMS] = Some(arms);
    out[LOWER] = Some(lower);
    out[LEGS] = Some(legs);
    Ok(out)
}

/// Alpha-over compositing in [`DRAW_ORDER`]; background takes the remainder.
fn composite<T: Scalar>(alphas: Vec<Option<Tensor<T>>>, h: usize, w: usize) -> Result<Vec<Tensor<T>>> {
    let mut remaining = Tensor::<T>::ones(&[h, w]);
    let mut weights: Vec<Option<Tensor<T>>> = vec![None; REGION_LABELS.len()];
    for &r in &DRAW_ORDER {
        let a = alphas[r].as_ref().expect("every foreground region has an alpha");
        weights[r] = Some(a.mul(&remaining)?.reshape(&[1, h, w])?);
        remaining = remaining.sub(&remaining.mul(a)?)?;
    }
    weights[BG] = Some(remaining.reshape(&[1, h, w])?);
    Ok(weights.into_iter().map(|w| w.expect("filled")).collect())
}

/// Separable `[1, 2, 1] / 4` smoothing over both pixel axes.
fn smooth<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(x.smooth3(1)?.smooth3(2)?)
}

fn apply<T: Scalar>(stage: Stage, f: Tensor<T>, inject: &[StageBlend<T>]) -> Result<Tensor<T>> {
    let mut f = f;
    for b in inject.iter().filter(|b| b.stage == stage) {
        if b.other.shape() != f.shape() {
            return Err(Error::ShapeMismatch {
                name: format!("{} injection", stage.name()),
                expected: f.shape().to_vec(),
                got: b.other.shape().to_vec(),
            });
        }
        let keep = b.mask.neg()?.add_scalar(T::one())?;
        f = b.mask.mul(&b.other)?.add(&keep.mul(&f)?)?;
    }
    Ok(f)
}

/// Renders an avatar, optionally replacing stage maps by blends.
///
/// The `Palette` stage is held in factored form: its map is the `[7, 3]`
/// region color table, constant over pixels, and a `Palette` blend must supply
/// another table. A spatial blend of tables is applied to the colorized
/// output, which is exactly the per-pixel blend of the expanded palettes.
pub fn render<T: Scalar>(
    avatar: &AvatarParams<T>,
    gen: &GeneratorParams<T>,
    inject: &[StageBlend<T>],
) -> Result<RenderOutput<T>> {
    let cfg = &gen.config.render;
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    for b in inject {
        if !b.stage.injectable() {
            return Err(Error::InvalidInjectionStage(b.stage));
        }
        if b.mask.shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                name: "injection mask".into(),
                expected: vec![h, w],
                got: b.mask.shape().to_vec(),
            });
        }
    }

    let geo = Geo::new(cfg);
    let weights = composite(alphas(&geo, avatar)?, h, w)?;
    let refs: Vec<&Tensor<T>> = weights.iter().collect();
    let regions = apply(Stage::Regions, Tensor::concat(&refs, 0)?, inject)?;
    let refined = apply(Stage::Refined, smooth(&regions)?, inject)?;

    let rows: Vec<Tensor<T>> = REGION_COLOR
        .iter()
        .map(|&slot| avatar.colors.narrow(0, slot, 1))
        .collect::<std::result::Result<_, _>>()?;
    let row_refs: Vec<&Tensor<T>> = rows.iter().collect();
    let palette = Tensor::concat(&row_refs, 0)?;

    let flat = refined.reshape(&[REGION_LABELS.len(), n])?;
    let colorize = |table: &Tensor<T>| -> Result<Tensor<T>> {
        Ok(table.transpose()?.matmul(&flat)?.reshape(&[3, h, w])?)
    };
    let mut image = colorize(&palette)?;
    for b in inject.iter().filter(|b| b.stage == Stage::Palette) {
        if b.other.shape() != palette.shape() {
            return Err(Error::ShapeMismatch {
                name: "palette injection".into(),
                expected: palette.shape().to_vec(),
                got: b.other.shape().to_vec(),
            });
        }
        let keep = b.mask.neg()?.add_scalar(T::one())?;
        image = b.mask.mul(&colorize(&b.other)?)?.add(&keep.mul(&image)?)?;
    }

    let maps = RegionMaps::from_soft(refined.detach())?;
    Ok(RenderOutput {
        image,
        stages: vec![gen.coord_features.clone(), regions, refined, palette],
        regions: maps,
    })
}
