//! Training corpora: text files or seeded synthetic text.

use std::path::Path;
use std::str::FromStr;

use super::tokenizer::{tokenize, tokenize_file};
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};

pub const CORPUS: Stream = Stream::named("corpus");

/// Fraction of a corpus held out for evaluation.
pub const HOLDOUT_FRACTION: f64 = 0.1;

/// Default size of generated corpora, in bytes.
pub const SYNTHETIC_BYTES: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Sentences from a small grammar over a fixed word list.
    Text,
    /// Mostly one repeated phrase: concentrates router traffic.
    Skew,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "skew" => Ok(Self::Skew),
            _ => Err(Error::Usage(format!("unknown synthetic corpus `{s}`; valid: text, skew"))),
        }
    }
}

const SUBJECTS: [&str; 8] = ["the cat", "a dog", "my friend", "the old man", "a bird", "the river", "our team", "she"];
const VERBS: [&str; 8] = ["sees", "likes", "finds", "follows", "carries", "paints", "hears", "builds"];
const OBJECTS: [&str; 8] = ["the red ball", "a small house", "the moon", "an apple", "the bridge", "a song", "the road", "water"];
const ENDINGS: [&str; 4] = [".", " today.", " again.", " at night."];

pub fn synthetic_text(kind: SyntheticKind, bytes: usize, seed: u64) -> String {
    let mut rng = Rng::new(seed, CORPUS);
    let mut out = String::with_capacity(bytes + 64);
    while out.len() < bytes {
        match kind {
            SyntheticKind::Text => {
                out.push_str(SUBJECTS[rng.below(SUBJECTS.len())]);
                out.push(' ');
                out.push_str(VERBS[rng.below(VERBS.len())]);
                out.push(' ');
                out.push_str(OBJECTS[rng.below(OBJECTS.len())]);
                out.push_str(ENDINGS[rng.below(ENDINGS.len())]);
                out.push(if rng.below(6) == 0 { '\n' } else { ' ' });
            }
            SyntheticKind::Skew => {
                if rng.below(10) == 0 {
                    out.push_str(OBJECTS[rng.below(OBJECTS.len())]);
                    out.push(' ');
                } else {
                    out.push_str("aaaa aaaa ");
                }
            }
        }
    }
    out.truncate(bytes);
    out
}

/// Tokens of `source`: a UTF-8 file, or `synthetic:<kind>` generated from
/// `seed`.
pub fn load_corpus(source: &Path, seed: u64) -> Result<Vec<usize>> {
    match source.to_str().and_then(|s| s.strip_prefix("synthetic:")) {
        Some(kind) => Ok(tokenize(&synthetic_text(kind.parse()?, SYNTHETIC_BYTES, seed))),
        None => tokenize_file(source),
    }
}

/// Splits off the trailing `fraction` of a stream as held-out data.
pub fn split_holdout(tokens: &[usize], fraction: f64) -> (&[usize], &[usize]) {
    let held = ((tokens.len() as f64) * fraction).round() as usize;
    tokens.split_at(tokens.len() - held.min(tokens.len()))
}
