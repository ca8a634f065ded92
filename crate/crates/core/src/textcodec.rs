//! Character-level tokenization of the symmetric prompt template.
//!
//! Both directions render as `x: {source} y: {target}`. Only the target span
//! is supervised; the prefix up to and including `"y: "` and any right padding
//! carry a false loss mask.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapgen::StringSpec;

pub const DEFAULT_MAX_LEN: usize = 32;
const PAD_SYMBOL: &str = "<pad>";
const TEMPLATE_CHARS: [char; 4] = ['x', 'y', ':', ' '];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Forward, Direction::Inverse];

    /// Orders `(a, b)` as `(source, target)` for this direction.
    pub fn orient<'a>(&self, a: &'a str, b: &'a str) -> (&'a str, &'a str) {
        match self {
            Direction::Forward => (a, b),
            Direction::Inverse => (b, a),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Inverse => "inverse",
        }
    }

    pub fn arrow(&self) -> &'static str {
        match self {
            Direction::Forward => "A->B",
            Direction::Inverse => "B->A",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "forward" | "fwd" | "a->b" => Ok(Direction::Forward),
            "inverse" | "inv" | "backward" | "b->a" => Ok(Direction::Inverse),
            other => Err(Error::config(format!("unknown direction {other:?}"))),
        }
    }
}

/// Ordered symbol table: the alphabet, then any template characters not
/// already in it, then PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, u32>,
    pad_id: u32,
}

impl Vocab {
    pub fn for_spec(spec: &StringSpec) -> Self {
        let mut symbols: Vec<char> = spec.alphabet().to_vec();
        for c in TEMPLATE_CHARS {
            if !symbols.contains(&c) {
                symbols.push(c);
            }
        }
        Self::from_symbols(symbols)
    }

    fn from_symbols(symbols: Vec<char>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        let pad_id = symbols.len() as u32;
        Vocab {
            symbols,
            index,
            pad_id,
        }
    }

    /// Number of ids including PAD.
    pub fn len(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pad_id(&self) -> u32 {
        self.pad_id
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Encoding(format!("{c:?} has no token id")))
            })
            .collect()
    }

    /// One symbol per line; the space symbol is written as `<space>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &c in &self.symbols {
            if c == ' ' {
                out.push_str("<space>");
            } else {
                out.push(c);
            }
            out.push('\n');
        }
        out.push_str(PAD_SYMBOL);
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        let mut saw_pad = false;
        for line in text.lines() {
            if saw_pad {
                return Err(Error::Decode("symbols after <pad>".into()));
            }
            match line {
                PAD_SYMBOL => saw_pad = true,
                "<space>" => symbols.push(' '),
                s if s.chars().count() == 1 => symbols.push(s.chars().next().unwrap()),
                s => return Err(Error::Decode(format!("bad vocab line {s:?}"))),
            }
        }
        if !saw_pad {
            return Err(Error::Decode("vocab has no <pad> entry".into()));
        }
        Ok(Self::from_symbols(symbols))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub input_ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub direction: Direction,
}

impl TaskInstance {
    /// Length of the rendered prompt without padding.
    pub fn content_len(&self, pad_id: u32) -> usize {
        self.input_ids
            .iter()
            .rposition(|&id| id != pad_id)
            .map_or(0, |p| p + 1)
    }

    pub fn target_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

pub fn render_prefix(source: &str) -> String {
    format!("x: {source} y: ")
}

pub fn render_prompt(a: &str, b: &str, direction: Direction) -> String {
    let (source, target) = direction.orient(a, b);
    format!("{}{target}", render_prefix(source))
}

pub fn encode_example(
    a: &str,
    b: &str,
    direction: Direction,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TaskInstance> {
    let (source, target) = direction.orient(a, b);
    let prefix = vocab.encode(&render_prefix(source))?;
    let target_ids = vocab.encode(target)?;
    let total = prefix.len() + target_ids.len();
    if total > max_len {
        return Err(Error::Encoding(format!(
            "pair ({a:?}, {b:?}) renders to {total} tokens, max_len is {max_len}"
        )));
    }
    let mut input_ids = Vec::with_capacity(max_len);
    input_ids.extend_from_slice(&prefix);
    input_ids.extend_from_slice(&target_ids);
    input_ids.resize(max_len, vocab.pad_id());
    let mut loss_mask = vec![false; max_len];
    loss_mask[prefix.len()..total].fill(true);
    Ok(TaskInstance {
        input_ids,
        loss_mask,
        direction,
    })
}

pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut out = String::with_capacity(ids.len());
    for &id in ids {
        if id == vocab.pad_id {
            continue;
        }
        let c = vocab
            .symbols
            .get(id as usize)
            .ok_or_else(|| Error::Decode(format!("unknown token id {id}")))?;
        out.push(*c);
    }
    Ok(out)
}
