//! Closed instruction grammar: referring-expression generation from scenes,
//! pattern parsing back into structured commands, scene grounding and the
//! fixed-length tokenizer consumed by the text encoder.

mod generate;
mod grammar;
mod parse;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generate::{generate_expression, generate_expression_for, Expression};
pub use grammar::{phrase_lexicon, Grammar, Phrase, Slot, Template, Vocab, MAX_TOKENS, PAD_ID, UNK_ID};
pub use parse::{ground, parse};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstructionError {
    #[error("no known action phrase in instruction")]
    UnknownAction,
    #[error("unknown attribute word `{0}`")]
    UnknownAttribute(String),
    #[error("instruction does not match any template")]
    MalformedStructure,
    #[error("no object matches `{0}`")]
    NoReferent(String),
    #[error("more than one object matches `{0}`")]
    AmbiguousReferent(String),
    #[error("scene has no uniquely describable object pair")]
    AmbiguousScene,
    #[error("no object pair in the scene supports {0}")]
    NoCompatiblePair(AssemblyAction),
    #[error("invalid grammar: {0}")]
    InvalidGrammar(String),
}

macro_rules! closed_vocab {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }
        }

        impl FromStr for $name {
            type Err = InstructionError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($word => Ok($name::$variant),)+
                    other => Err(InstructionError::UnknownAttribute(other.to_string())),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

closed_vocab!(
    /// Block shape names; the catalog uses the same names.
    Shape {
        Base => "base",
        Cube => "cube",
        Slab => "slab",
        Brick => "brick",
        Corner => "corner",
        Peg => "peg",
        Socket => "socket",
    }
);

closed_vocab!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Gray => "gray",
    Purple => "purple",
    Cyan => "cyan",
});

closed_vocab!(
    /// The seven assembly actions.
    AssemblyAction {
        InsertTo => "insert_to",
        CombineWith => "combine_with",
        StackOn => "stack_on",
        AssembleFront => "assemble_front",
        AssembleRight => "assemble_right",
        AssembleLeft => "assemble_left",
        AssembleBack => "assemble_back",
    }
);

impl Shape {
    pub fn block_id(self) -> u8 {
        Shape::ALL.iter().position(|s| *s == self).unwrap() as u8 + 1
    }

    pub fn from_block_id(id: u8) -> Option<Shape> {
        Shape::ALL.get((id as usize).checked_sub(1)?).copied()
    }
}

impl AssemblyAction {
    pub fn index(self) -> usize {
        AssemblyAction::ALL.iter().position(|a| *a == self).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectDescriptor {
    pub shape: Shape,
    pub color: Color,
}

impl fmt::Display for ObjectDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color, self.shape)
    }
}

/// Structured instruction: move `target` into an `action` relation with `base`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub action: AssemblyAction,
    pub target: ObjectDescriptor,
    pub base: ObjectDescriptor,
}

/// Lowercases, splits on whitespace and strips punctuation.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}
