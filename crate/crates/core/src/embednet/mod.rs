//! Frozen joint text/image embedding over a 12-dim attribute space.
//!
//! Dims: upper RGB (0..3), lower RGB (3..6), sleeve length, pant length,
//! skirt blend, and three reserved body dims that only the neutral prompt
//! uses.
//!
//! Colors are encoded as `(c - o) / sqrt(|c - o|^2 + delta^2)` around a fixed
//! origin `o`, so that every color is close to unit length and hue differences
//! dominate cosine similarity. Shape attributes are encoded as
//! `SHAPE_SCALE * (v - 0.5)`.

mod lexicon;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;
use crate::stylegen::RenderConfig;
use crate::stylegen::render::{pixel_x, pixel_y};

pub use lexicon::{ColorLabel, Label, Lexicon, ParsedPrompt, SUBJECT};

pub const EMBED_DIM: usize = 12;
pub const UPPER_RGB: usize = 0;
pub const LOWER_RGB: usize = 3;
pub const SLEEVE: usize = 6;
pub const PANT: usize = 7;
pub const SKIRT: usize = 8;
pub const RESERVED: usize = 9;

pub const COLOR_ORIGIN: [f64; 3] = [0.7, 0.55, 0.5];
pub const COLOR_DELTA: f64 = 0.05;
pub const SHAPE_SCALE: f64 = 0.3;
/// Width of the color-similarity kernel used for length estimates.
pub const SIMILARITY_SIGMA: f64 = 0.25;
/// Norms below this cannot be normalized.
pub const MIN_NORM: f64 = 1e-8;
const RANGE_SLACK: f64 = 1e-9;

/// Canonical windows in canvas units: `(|x| lo, |x| hi, y lo, y hi)`,
/// laid out on the mean body.
const TORSO_WINDOW: [f64; 4] = [0.0, 0.05, 0.22, 0.40];
const SEAT_WINDOW: [f64; 4] = [0.0, 0.06, 0.525, 0.545];
const ARM_BAND: [f64; 4] = [0.104, 0.124, 0.20, 0.54];
const LEG_BAND: [f64; 4] = [0.0505, 0.0745, 0.54, 0.96];
const GAP_WINDOW: [f64; 4] = [0.0, 0.012, 0.565, 0.6];

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub vector: [f64; EMBED_DIM],
    pub relevance: [bool; EMBED_DIM],
    pub source_text: String,
}

impl PromptEmbedding {
    pub fn tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::vector(self.vector.iter().map(|&v| T::of(v)).collect())
    }

    pub fn is_neutral(&self) -> bool {
        self.relevance.iter().all(|r| !r)
    }
}

#[derive(Debug, Clone)]
pub struct ImageEmbedding<T: Scalar> {
    pub vector: Tensor<T>,
    /// Raw estimates laid out like the attribute dims: RGB values and
    /// lengths in `[0, 1]`, zero on the reserved dims.
    pub raw_attributes: Tensor<T>,
}

/// The stored unit vector `"a human"` maps to. It lives on the reserved
/// dims, so it is orthogonal to every image embedding.
pub fn neutral_vector() -> [f64; EMBED_DIM] {
    let mut v = [0.0; EMBED_DIM];
    let k = 1.0 / 3f64.sqrt();
    v[RESERVED..].iter_mut().for_each(|x| *x = k);
    v
}

pub fn encode_color(rgb: [f64; 3]) -> [f64; 3] {
    let d = [rgb[0] - COLOR_ORIGIN[0], rgb[1] - COLOR_ORIGIN[1], rgb[2] - COLOR_ORIGIN[2]];
    let n = (d.iter().map(|v| v * v).sum::<f64>() + COLOR_DELTA * COLOR_DELTA).sqrt();
    d.map(|v| v / n)
}

pub fn encode_shape(v: f64) -> f64 {
    SHAPE_SCALE * (v - 0.5)
}

/// Encodes raw attribute targets; irrelevant dims stay zero.
pub fn encode_attributes(target: &[f64; EMBED_DIM], relevance: &[bool; EMBED_DIM]) -> [f64; EMBED_DIM] {
    let mut out = [0.0; EMBED_DIM];
    for base in [UPPER_RGB, LOWER_RGB] {
        if relevance[base] {
            let c = encode_color([target[base], target[base + 1], target[base + 2]]);
            out[base..base + 3].copy_from_slice(&c);
        }
    }
    for d in [SLEEVE, PANT, SKIRT] {
        if relevance[d] {
            out[d] = encode_shape(target[d]);
        }
    }
    out
}

fn normalize(v: [f64; EMBED_DIM]) -> Result<[f64; EMBED_DIM]> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= MIN_NORM {
        return Err(Error::DegenerateVector(n));
    }
    Ok(v.map(|x| x / n))
}

pub fn embed_text(text: &str, lexicon: &Lexicon) -> Result<PromptEmbedding> {
    let (vector, relevance) = match lexicon.parse(text)? {
        ParsedPrompt::Neutral => (neutral_vector(), [false; EMBED_DIM]),
        ParsedPrompt::Clauses(clauses) => {
            let mut target = [0.0; EMBED_DIM];
            let mut relevance = [false; EMBED_DIM];
            for c in &clauses {
                for d in 0..EMBED_DIM {
                    if c.relevance[d] {
                        target[d] = c.target[d];
                        relevance[d] = true;
                    }
                }
            }
            (normalize(encode_attributes(&target, &relevance))?, relevance)
        }
    };
    Ok(PromptEmbedding {
        vector,
        relevance,
        source_text: text.to_string(),
    })
}

/// Dot product of two unit vectors, after checking neither is degenerate.
pub fn cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    for v in [a, b] {
        let n = v.data().iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if n <= MIN_NORM {
            return Err(Error::DegenerateVector(n));
        }
    }
    Ok(a.dot(b)?)
}

/// Row range plus one or two column ranges, all as `(start, len)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Window {
    pub rows: (usize, usize),
    pub cols: Vec<(usize, usize)>,
}

impl Window {
    fn from_canvas(spec: [f64; 4], cfg: &RenderConfig) -> Self {
        let [x_lo, x_hi, y_lo, y_hi] = spec;
        let ys: Vec<f64> = (0..cfg.height).map(|r| pixel_y(r, cfg)).collect();
        let xs: Vec<f64> = (0..cfg.width).map(|c| pixel_x(c, cfg).abs()).collect();
        let rows = runs(&within(&ys, y_lo, y_hi));
        let rows = rows.first().copied().unwrap_or((nearest(&ys, 0.5 * (y_lo + y_hi)), 1));
        let mut cols = runs(&within(&xs, x_lo, x_hi));
        if cols.is_empty() {
            let target = 0.5 * (x_lo + x_hi);
            let best = xs.iter().map(|x| (x - target).abs()).fold(f64::INFINITY, f64::min);
            let near: Vec<bool> = xs.iter().map(|x| (x - target).abs() <= best + 1e-12).collect();
            cols = runs(&near);
        }
        Self { rows, cols }
    }

    pub fn pixel_count(&self) -> usize {
        self.rows.1 * self.cols.iter().map(|c| c.1).sum::<usize>()
    }

    /// Pixels of `image [3, H, W]` inside the window, as `[3, n]`.
    pub fn gather<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let band = image.narrow(1, self.rows.0, self.rows.1)?;
        let parts = self
            .cols
            .iter()
            .map(|&(c, n)| band.narrow(2, c, n))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let joined = if refs.len() == 1 { parts[0].clone() } else { Tensor::concat(&refs, 2)? };
        Ok(joined.reshape(&[3, self.pixel_count()])?)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.rows.0..self.rows.0 + self.rows.1).contains(&r) && self.cols.iter().any(|&(s, n)| (s..s + n).contains(&c))
    }
}

fn within(v: &[f64], lo: f64, hi: f64) -> Vec<bool> {
    v.iter().map(|&x| x >= lo && x <= hi).collect()
}

fn nearest(v: &[f64], target: f64) -> usize {
    (0..v.len())
        .min_by(|&a, &b| (v[a] - target).abs().total_cmp(&(v[b] - target).abs()))
        .unwrap_or(0)
}

fn runs(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < flags.len() {
        if flags[i] {
            let start = i;
            while i < flags.len() && flags[i] {
                i += 1;
            }
            out.push((start, i - start));
        } else {
            i += 1;
        }
    }
    out
}

/// Fixed pooling windows for one canvas size.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Windows {
    pub torso: Window,
    pub seat: Window,
    pub arm: Window,
    pub legs: Window,
    pub gap: Window,
}

impl Windows {
    pub fn new(height: usize, width: usize) -> Self {
        let cfg = RenderConfig {
            width,
            height,
            ..RenderConfig::default()
        };
        Self {
            torso: Window::from_canvas(TORSO_WINDOW, &cfg),
            seat: Window::from_canvas(SEAT_WINDOW, &cfg),
            arm: Window::from_canvas(ARM_BAND, &cfg),
            legs: Window::from_canvas(LEG_BAND, &cfg),
            gap: Window::from_canvas(GAP_WINDOW, &cfg),
        }
    }

    /// Windows whose pixels feed the upper-garment estimates.
    pub fn upper(&self) -> [&Window; 2] {
        [&self.torso, &self.arm]
    }
}

fn pooled<T: Scalar>(image: &Tensor<T>, w: &Window) -> Result<Tensor<T>> {
    Ok(w.gather(image)?.mean_axis(1)?)
}

/// Mean of `exp(-|p - color|^2 / sigma^2)` over the window pixels.
fn similarity<T: Scalar>(image: &Tensor<T>, w: &Window, color: &Tensor<T>) -> Result<Tensor<T>> {
    let px = w.gather(image)?;
    let d = px.sub(&color.reshape(&[3, 1])?)?;
    let s = d
        .square()?
        .sum_axis(0)?
        .scale(T::of(-1.0 / (SIMILARITY_SIGMA * SIMILARITY_SIGMA)))?
        .exp()?;
    Ok(s.mean()?)
}

fn encode_color_tensor<T: Scalar>(c: &Tensor<T>) -> Result<Tensor<T>> {
    let o = Tensor::vector(COLOR_ORIGIN.iter().map(|&v| T::of(v)).collect());
    let d = c.sub(&o)?;
    let n = d.square()?.sum()?.add_scalar(T::of(COLOR_DELTA * COLOR_DELTA))?.sqrt()?;
    Ok(d.div(&n)?)
}

fn check_image<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::ShapeMismatch {
            name: "image".into(),
            expected: vec![3, 0, 0],
            got: s.to_vec(),
        });
    }
    let ok = image.data().iter().all(|v| {
        let v = v.to_f64_lossy();
        v >= -RANGE_SLACK && v <= 1.0 + RANGE_SLACK
    });
    if !ok {
        return Err(Error::BadImageRange);
    }
    Ok((s[1], s[2]))
}

/// Embeds an image `[3, H, W]` with values in `[0, 1]`. Differentiable in
/// the pixels.
pub fn embed_image<T: Scalar>(image: &Tensor<T>) -> Result<ImageEmbedding<T>> {
    let (h, w) = check_image(image)?;
    let win = Windows::new(h, w);
    let upper = pooled(image, &win.torso)?;
    let lower = pooled(image, &win.seat)?;
    let sleeve = similarity(image, &win.arm, &upper)?;
    let pant = similarity(image, &win.legs, &lower)?;
    let skirt = similarity(image, &win.gap, &lower)?;
    let reserved = Tensor::zeros(&[EMBED_DIM - RESERVED]);

    let raw_attributes = Tensor::concat(&[&upper, &lower, &sleeve, &pant, &skirt, &reserved], 0)?;
    let centered = |t: &Tensor<T>| -> Result<Tensor<T>> { Ok(t.add_scalar(T::of(-0.5))?.scale(T::of(SHAPE_SCALE))?) };
    let encoded = Tensor::concat(
        &[
            &encode_color_tensor(&upper)?,
            &encode_color_tensor(&lower)?,
            &centered(&sleeve)?,
            &centered(&pant)?,
            &centered(&skirt)?,
            &reserved,
        ],
        0,
    )?;
    let n = encoded.l2norm()?;
    let nv = n.item()?.to_f64_lossy();
    if nv <= MIN_NORM {
        return Err(Error::DegenerateVector(nv));
    }
    Ok(ImageEmbedding {
        vector: encoded.div(&n)?,
        raw_attributes,
    })
}

/// Hash of the lexicon, the encoding constants and the windows for `cfg`.
pub fn digest(lexicon: &Lexicon, cfg: &RenderConfig) -> String {
    let mut h = Sha256::new();
    let mut put = |v: f64| h.update(v.to_le_bytes());
    for l in lexicon.upper_shapes.iter().chain(&lexicon.lower_shapes) {
        l.target.iter().for_each(|&v| put(v));
    }
    for c in &lexicon.colors {
        c.rgb.iter().for_each(|&v| put(v));
    }
    COLOR_ORIGIN.iter().for_each(|&v| put(v));
    [COLOR_DELTA, SHAPE_SCALE, SIMILARITY_SIGMA].iter().for_each(|&v| put(v));
    for l in lexicon.upper_shapes.iter().chain(&lexicon.lower_shapes) {
        h.update(l.label.as_bytes());
    }
    for c in &lexicon.colors {
        h.update(c.label.as_bytes());
    }
    let win = Windows::new(cfg.height, cfg.width);
    for w in [&win.torso, &win.seat, &win.arm, &win.legs, &win.gap] {
        h.update(format!("{:?}", w).as_bytes());
    }
    hex::encode(h.finalize())
}
