//! Exact parser over rendered region maps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::render::{RegionMaps, ARMS, BG, LEGS, LOWER, UPPER};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BodyPart {
    Upper,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditKind {
    Shape,
    Texture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditTarget {
    pub body_part: BodyPart,
    pub edit_kind: EditKind,
}

impl EditTarget {
    pub const fn new(body_part: BodyPart, edit_kind: EditKind) -> Self {
        Self { body_part, edit_kind }
    }

    /// Region labels covered by this target.
    pub fn labels(&self) -> &'static [usize] {
        match (self.body_part, self.edit_kind) {
            (BodyPart::Upper, EditKind::Shape) => &[UPPER, ARMS],
            (BodyPart::Upper, EditKind::Texture) => &[UPPER],
            (BodyPart::Lower, EditKind::Shape) => &[LOWER, LEGS],
            (BodyPart::Lower, EditKind::Texture) => &[LOWER],
        }
    }
}

impl fmt::Display for EditTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = match self.body_part {
            BodyPart::Upper => "upper",
            BodyPart::Lower => "lower",
        };
        let kind = match self.edit_kind {
            EditKind::Shape => "shape",
            EditKind::Texture => "texture",
        };
        write!(f, "{part}-{kind}")
    }
}

impl FromStr for EditTarget {
    type Err = Error;

    /// Accepts `upper-shape`, `upper-texture`, `lower-shape`, `lower-texture`.
    fn from_str(s: &str) -> Result<Self> {
        let (part, kind) = s.split_once(['-', '_', ':']).ok_or_else(|| Error::UnknownTarget(s.into()))?;
        let body_part = match part {
            "upper" => BodyPart::Upper,
            "lower" => BodyPart::Lower,
            _ => return Err(Error::UnknownTarget(s.into())),
        };
        let edit_kind = match kind {
            "shape" => EditKind::Shape,
            "texture" | "color" => EditKind::Texture,
            _ => return Err(Error::UnknownTarget(s.into())),
        };
        Ok(Self { body_part, edit_kind })
    }
}

/// Binary `H x W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                name: "mask".into(),
                expected: vec![height, width],
                got: vec![data.len()],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: bool) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.iter().map(|b| !b).collect(),
            ..self.clone()
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let d = self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::new(&[self.height, self.width], d).expect("mask shape")
    }
}

/// Pixels parsed as one of the target labels, plus non-background pixels
/// whose soft mass over the target labels exceeds one half.
pub fn parse<T: Scalar>(regions: &RegionMaps<T>, target: EditTarget) -> Mask {
    let n = regions.height * regions.width;
    let soft = regions.soft.data();
    let half = T::of(0.5);
    let data = (0..n)
        .map(|p| {
            let label = regions.labels[p] as usize;
            if target.labels().contains(&label) {
                return true;
            }
            let mass: T = target.labels().iter().map(|&r| soft[r * n + p]).sum();
            mass > half && label != BG
        })
        .collect();
    Mask {
        height: regions.height,
        width: regions.width,
        data,
    }
}

/// Target soft mass below which a pixel counts as untouched by the target.
pub const OUTSIDE_MASS: f64 = 1e-3;

/// Pixels the target regions do not reach at all: soft target mass below
/// [`OUTSIDE_MASS`]. Always disjoint from [`parse`] for the same target.
pub fn outside<T: Scalar>(regions: &RegionMaps<T>, target: EditTarget) -> Mask {
    let n = regions.height * regions.width;
    let soft = regions.soft.data();
    let eps = T::of(OUTSIDE_MASS);
    let data = (0..n)
        .map(|p| {
            let mass: T = target.labels().iter().map(|&r| soft[r * n + p]).sum();
            mass < eps
        })
        .collect();
    Mask {
        height: regions.height,
        width: regions.width,
        data,
    }
}
