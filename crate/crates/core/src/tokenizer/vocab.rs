use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TokenizerError;
use crate::elements::ElementTables;

pub type TokenId = u32;

pub const NUM_BINS: usize = 1024;
pub const SOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const ATOMS: TokenId = 2;
pub const LATTICE: TokenId = 3;
pub const FIRST_BIN: TokenId = 4;
pub const FIRST_ELEMENT: TokenId = FIRST_BIN + NUM_BINS as TokenId;

const HEADER: &str = "#materium-vocab\tv1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Sos,
    Eos,
    Atoms,
    Lattice,
    Bin(u16),
    ElementOxi { element: u8, oxidation: i8 },
}

/// Coarse token category, the unit the sequence grammar works in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Sos,
    Eos,
    Atoms,
    Lattice,
    Bin,
    Element,
}

/// Dense id layout: specials, then the 1024 shared value bins, then
/// (element, oxidation) pairs sorted by atomic number and state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pairs: Vec<(u8, i8)>,
    symbols: Vec<String>,
    index: HashMap<(u8, i8), TokenId>,
}

impl Vocabulary {
    /// Every table element contributes its listed states plus the neutral state.
    pub fn build(tables: &ElementTables) -> Result<Self, TokenizerError> {
        if tables.is_empty() {
            return Err(TokenizerError::EmptyTable);
        }
        let mut entries = Vec::new();
        for e in tables.iter() {
            let mut states = e.oxidation_states.clone();
            states.push(0);
            states.sort_unstable();
            states.dedup();
            for s in states {
                entries.push((e.atomic_number, s, e.symbol.clone()));
            }
        }
        entries.sort_by_key(|(z, s, _)| (*z, *s));
        Ok(Self::from_entries(entries))
    }

    fn from_entries(entries: Vec<(u8, i8, String)>) -> Self {
        let mut pairs = Vec::with_capacity(entries.len());
        let mut symbols = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (z, s, sym)) in entries.into_iter().enumerate() {
            index.insert((z, s), FIRST_ELEMENT + i as TokenId);
            pairs.push((z, s));
            symbols.push(sym);
        }
        Self { pairs, symbols, index }
    }

    pub fn len(&self) -> usize {
        FIRST_ELEMENT as usize + self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_element_tokens(&self) -> usize {
        self.pairs.len()
    }

    pub fn bin_id(bin: u16) -> TokenId {
        debug_assert!((bin as usize) < NUM_BINS);
        FIRST_BIN + bin as TokenId
    }

    pub fn element_id(&self, element: u8, oxidation: i8) -> Option<TokenId> {
        self.index.get(&(element, oxidation)).copied()
    }

    pub fn id(&self, token: Token) -> Option<TokenId> {
        match token {
            Token::Sos => Some(SOS),
            Token::Eos => Some(EOS),
            Token::Atoms => Some(ATOMS),
            Token::Lattice => Some(LATTICE),
            Token::Bin(b) if (b as usize) < NUM_BINS => Some(Self::bin_id(b)),
            Token::Bin(_) => None,
            Token::ElementOxi { element, oxidation } => self.element_id(element, oxidation),
        }
    }

    pub fn token(&self, id: TokenId) -> Option<Token> {
        match id {
            SOS => Some(Token::Sos),
            EOS => Some(Token::Eos),
            ATOMS => Some(Token::Atoms),
            LATTICE => Some(Token::Lattice),
            i if i < FIRST_ELEMENT => Some(Token::Bin((i - FIRST_BIN) as u16)),
            i => self
                .pairs
                .get((i - FIRST_ELEMENT) as usize)
                .map(|&(element, oxidation)| Token::ElementOxi { element, oxidation }),
        }
    }

    pub fn class(&self, id: TokenId) -> Option<TokenClass> {
        self.token(id).map(|t| match t {
            Token::Sos => TokenClass::Sos,
            Token::Eos => TokenClass::Eos,
            Token::Atoms => TokenClass::Atoms,
            Token::Lattice => TokenClass::Lattice,
            Token::Bin(_) => TokenClass::Bin,
            Token::ElementOxi { .. } => TokenClass::Element,
        })
    }

    /// Human-readable name such as `[SOS]`, `[BIN_0007]` or `[Fe|+3]`.
    pub fn name(&self, id: TokenId) -> Option<String> {
        Some(match self.token(id)? {
            Token::Sos => "[SOS]".into(),
            Token::Eos => "[EOS]".into(),
            Token::Atoms => "[ATOMS]".into(),
            Token::Lattice => "[LATTICE]".into(),
            Token::Bin(b) => format!("[BIN_{b:04}]"),
            Token::ElementOxi { oxidation, .. } => {
                let sym = &self.symbols[(id - FIRST_ELEMENT) as usize];
                if oxidation > 0 {
                    format!("[{sym}|+{oxidation}]")
                } else {
                    format!("[{sym}|{oxidation}]")
                }
            }
        })
    }

    /// Element token ids as a contiguous range.
    pub fn element_range(&self) -> std::ops::Range<TokenId> {
        FIRST_ELEMENT..self.len() as TokenId
    }

    pub fn bin_range() -> std::ops::Range<TokenId> {
        FIRST_BIN..FIRST_ELEMENT
    }

    /// One token per line, `index<TAB>name`, after a version header.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.len() * 16);
        out.push_str(HEADER);
        out.push('\n');
        for id in 0..self.len() as TokenId {
            out.push_str(&format!("{id}\t{}\n", self.name(id).expect("dense ids")));
        }
        out
    }

    pub fn from_text(text: &str, tables: &ElementTables) -> Result<Self, TokenizerError> {
        let bad = |line: usize, reason: String| TokenizerError::VocabFormat { line, reason };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == HEADER => {}
            _ => return Err(bad(1, format!("missing header `{HEADER}`"))),
        }
        let mut entries = Vec::new();
        let mut expected: TokenId = 0;
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (idx, name) = line.split_once('\t').ok_or_else(|| bad(line_no, "expected index<TAB>name".into()))?;
            let idx: TokenId = idx.parse().map_err(|_| bad(line_no, format!("bad index `{idx}`")))?;
            if idx != expected {
                return Err(bad(line_no, format!("index {idx} out of order, expected {expected}")));
            }
            expected += 1;
            if idx < FIRST_ELEMENT {
                let want = match idx {
                    SOS => "[SOS]".to_string(),
                    EOS => "[EOS]".to_string(),
                    ATOMS => "[ATOMS]".to_string(),
                    LATTICE => "[LATTICE]".to_string(),
                    b => format!("[BIN_{:04}]", b - FIRST_BIN),
                };
                if name != want {
                    return Err(bad(line_no, format!("expected `{want}`, found `{name}`")));
                }
                continue;
            }
            let inner = name
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| bad(line_no, format!("bad token name `{name}`")))?;
            let (sym, ox) = inner.split_once('|').ok_or_else(|| bad(line_no, format!("bad token name `{name}`")))?;
            let ox: i8 = ox.trim_start_matches('+').parse().map_err(|_| bad(line_no, format!("bad oxidation `{ox}`")))?;
            let z = tables.atomic_number(sym).map_err(|_| bad(line_no, format!("unknown element `{sym}`")))?;
            entries.push((z, ox, sym.to_string()));
        }
        if entries.is_empty() {
            return Err(TokenizerError::EmptyTable);
        }
        Ok(Self::from_entries(entries))
    }

    /// SHA-256 of the serialized text; checkpoints pin this.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}
