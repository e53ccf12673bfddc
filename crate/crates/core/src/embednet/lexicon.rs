//! Label lexicon and the prompt template grammar.

use std::path::Path;

use serde::Deserialize;

use super::{EMBED_DIM, LOWER_RGB, PANT, SKIRT, SLEEVE, UPPER_RGB};
use crate::error::{Error, Result};
use crate::stylegen::{BodyPart, EditKind, EditTarget};

const DEFAULT_LEXICON: &str = include_str!("../../assets/lexicon.toml");

pub const SUBJECT: &str = "a human";
const WEARING: &str = "a human wearing ";
const UPPER_SUFFIX: &str = " upper body clothes";
const LOWER_SUFFIX: &str = " lower body clothes";
const CLAUSE_SEP: &str = " and ";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UpperEntry {
    label: String,
    sleeve_length: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LowerEntry {
    label: String,
    pant_length: f64,
    skirt_blend: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ColorEntry {
    label: String,
    rgb: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconFile {
    #[serde(default)]
    upper: Vec<UpperEntry>,
    #[serde(default)]
    lower: Vec<LowerEntry>,
    #[serde(default)]
    color: Vec<ColorEntry>,
}

/// A label with its raw attribute target and relevance mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    pub label: String,
    pub target: [f64; EMBED_DIM],
    pub relevance: [bool; EMBED_DIM],
}

impl Label {
    fn new(label: String, dims: &[usize], values: &[f64]) -> Self {
        let mut target = [0.0; EMBED_DIM];
        let mut relevance = [false; EMBED_DIM];
        for (&d, &v) in dims.iter().zip(values) {
            target[d] = v;
            relevance[d] = true;
        }
        Self { label, target, relevance }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorLabel {
    pub label: String,
    pub rgb: [f64; 3],
}

impl ColorLabel {
    /// The color placed on the upper or lower RGB dims.
    pub fn on(&self, part: BodyPart) -> Label {
        let dims = match part {
            BodyPart::Upper => UPPER_RGB,
            BodyPart::Lower => LOWER_RGB,
        };
        Label::new(self.label.clone(), &[dims, dims + 1, dims + 2], &self.rgb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub upper_shapes: Vec<Label>,
    pub lower_shapes: Vec<Label>,
    pub colors: Vec<ColorLabel>,
}

/// A prompt broken into its clauses.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedPrompt {
    Neutral,
    Clauses(Vec<Label>),
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

impl Lexicon {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let file: LexiconFile = toml::from_str(s).map_err(|e| Error::Config(format!("lexicon: {e}")))?;
        let upper_shapes = file
            .upper
            .into_iter()
            .map(|e| Label::new(e.label, &[SLEEVE], &[e.sleeve_length]))
            .collect();
        let lower_shapes = file
            .lower
            .into_iter()
            .map(|e| Label::new(e.label, &[PANT, SKIRT], &[e.pant_length, e.skirt_blend]))
            .collect();
        let colors = file
            .color
            .into_iter()
            .map(|e| ColorLabel { label: e.label, rgb: e.rgb })
            .collect();
        let lex = Self {
            upper_shapes,
            lower_shapes,
            colors,
        };
        lex.validate()?;
        Ok(lex)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let shapes = self.upper_shapes.iter().chain(&self.lower_shapes);
        let names = shapes.clone().map(|l| &l.label).chain(self.colors.iter().map(|c| &c.label));
        for name in names {
            if name.trim().is_empty() || name.trim() != name || name.contains(CLAUSE_SEP) {
                return Err(Error::Config(format!("lexicon: bad label {name:?}")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Config(format!("lexicon: duplicate label {name:?}")));
            }
        }
        let values = shapes
            .flat_map(|l| l.target.to_vec())
            .chain(self.colors.iter().flat_map(|c| c.rgb));
        for v in values {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("lexicon: target {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn shapes(&self, part: BodyPart) -> &[Label] {
        match part {
            BodyPart::Upper => &self.upper_shapes,
            BodyPart::Lower => &self.lower_shapes,
        }
    }

    fn shape(&self, name: &str) -> Option<&Label> {
        self.upper_shapes.iter().chain(&self.lower_shapes).find(|l| l.label == name)
    }

    pub fn color(&self, name: &str) -> Option<&ColorLabel> {
        self.colors.iter().find(|c| c.label == name)
    }

    /// Every single-clause prompt the grammar produces for `target`.
    pub fn prompts(&self, target: EditTarget) -> Vec<String> {
        match target.edit_kind {
            EditKind::Shape => self
                .shapes(target.body_part)
                .iter()
                .map(|l| format!("{WEARING}{}", l.label))
                .collect(),
            EditKind::Texture => {
                let suffix = match target.body_part {
                    BodyPart::Upper => UPPER_SUFFIX,
                    BodyPart::Lower => LOWER_SUFFIX,
                };
                self.colors.iter().map(|c| format!("{WEARING}{}{suffix}", c.label)).collect()
            }
        }
    }

    /// Parses `"a human"`, `"a human wearing {shape}"`,
    /// `"a human wearing {color} upper|lower body clothes"`, and the combined
    /// `"a human wearing {shape} and {color} upper|lower body clothes"`.
    pub fn parse(&self, text: &str) -> Result<ParsedPrompt> {
        let t = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if t == SUBJECT {
            return Ok(ParsedPrompt::Neutral);
        }
        let rest = t
            .strip_prefix(WEARING)
            .ok_or_else(|| Error::UnparseablePrompt(text.into()))?;
        let unknown = |name: &str| Error::UnknownLabel(name.into());

        let mut clauses = Vec::new();
        match split_color_clause(rest) {
            Some((body, part)) => {
                let (shape, color) = match body.rsplit_once(CLAUSE_SEP) {
                    Some((s, c)) => (Some(s), c),
                    None => (None, body),
                };
                if let Some(s) = shape {
                    clauses.push(self.shape(s).ok_or_else(|| unknown(s))?.clone());
                }
                clauses.push(self.color(color).ok_or_else(|| unknown(color))?.on(part));
            }
            None => {
                if rest.contains(CLAUSE_SEP) && self.shape(rest).is_none() {
                    return Err(Error::UnparseablePrompt(text.into()));
                }
                clauses.push(self.shape(rest).ok_or_else(|| unknown(rest))?.clone());
            }
        }
        Ok(ParsedPrompt::Clauses(clauses))
    }
}

fn split_color_clause(s: &str) -> Option<(&str, BodyPart)> {
    match s.strip_suffix(UPPER_SUFFIX) {
        Some(n) => Some((n, BodyPart::Upper)),
        None => Some((s.strip_suffix(LOWER_SUFFIX)?, BodyPart::Lower)),
    }
}
