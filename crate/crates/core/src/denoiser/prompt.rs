//! Toy vocabulary and prompt tokenization.
//!
//! A prompt is always four tokens, `[BOS, color, shape, EOS]`; the null
//! prompt used for the unconditional branch is four `NULL` tokens.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PROMPT_LEN: usize = 4;
pub const NULL: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const COLOR_BASE: u32 = 3;
const SHAPE_BASE: u32 = COLOR_BASE + Color::ALL.len() as u32;
pub const VOCAB_SIZE: usize = SHAPE_BASE as usize + ShapeKind::ALL.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// Foreground colors. Backgrounds use a separate muted palette.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    /// RGB in `[0, 1]`.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.90, 0.12, 0.12],
            Color::Green => [0.10, 0.75, 0.20],
            Color::Blue => [0.12, 0.25, 0.92],
            Color::Yellow => [0.95, 0.85, 0.10],
        }
    }
}

/// Class of the single foreground object: one of 12 (shape, color) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    pub shape: ShapeKind,
    pub color: Color,
}

impl Label {
    pub const COUNT: usize = 12;

    pub fn index(self) -> usize {
        self.shape.id() * Color::ALL.len() + self.color.id()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Some(Self {
            shape: ShapeKind::from_id(i / Color::ALL.len())?,
            color: Color::from_id(i % Color::ALL.len())?,
        })
    }

    pub fn all() -> impl Iterator<Item = Label> {
        (0..Self::COUNT).filter_map(Self::from_index)
    }

    pub fn caption(self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.caption())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTokens {
    pub ids: [u32; PROMPT_LEN],
}

impl PromptTokens {
    pub fn null() -> Self {
        Self {
            ids: [NULL; PROMPT_LEN],
        }
    }

    pub fn for_label(label: Label) -> Self {
        Self {
            ids: [
                BOS,
                COLOR_BASE + label.color.id() as u32,
                SHAPE_BASE + label.shape.id() as u32,
                EOS,
            ],
        }
    }

    pub fn is_null(&self) -> bool {
        *self == Self::null()
    }

    /// Parse a caption such as `"red circle"` against the toy vocabulary.
    pub fn parse(caption: &str) -> Result<Self> {
        let words: Vec<String> = caption
            .split_whitespace()
            .map(|w| w.to_ascii_lowercase())
            .collect();
        if words.is_empty() {
            return Ok(Self::null());
        }
        let [color, shape] = words.as_slice() else {
            return Err(Error::Prompt(format!(
                "expected `<color> <shape>`, got {caption:?}"
            )));
        };
        let color = Color::ALL
            .into_iter()
            .find(|c| c.name() == color)
            .ok_or_else(|| Error::Prompt(format!("unknown color {color:?}")))?;
        let shape = ShapeKind::ALL
            .into_iter()
            .find(|s| s.name() == shape)
            .ok_or_else(|| Error::Prompt(format!("unknown shape {shape:?}")))?;
        Ok(Self::for_label(Label { shape, color }))
    }

    pub fn label(&self) -> Option<Label> {
        let [b, c, s, e] = self.ids;
        if b != BOS || e != EOS {
            return None;
        }
        Some(Label {
            color: Color::from_id(c.checked_sub(COLOR_BASE)? as usize)?,
            shape: ShapeKind::from_id(s.checked_sub(SHAPE_BASE)? as usize)?,
        })
    }

    pub fn caption(&self) -> String {
        self.label().map(|l| l.caption()).unwrap_or_default()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(bad) = self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::Prompt(format!(
                "token id {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(())
    }
}

/// Every caption the toy model understands.
pub fn vocabulary() -> Vec<String> {
    Label::all().map(|l| l.caption()).collect()
}
