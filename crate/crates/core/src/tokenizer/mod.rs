//! Crystal ⇄ token-sequence mapping.
//!
//! A crystal is Niggli-reduced, its sites are ordered by an
//! [`OrderingStrategy`], and every continuous value is quantized into one of
//! 1024 shared value bins:
//!
//! ```text
//! [SOS] [ATOMS] [E1|ox] x1 y1 z1 … [EN|ox] xN yN zN [LATTICE] a b c α β γ [EOS]
//! ```
//!
//! Sequences therefore always have length 4N + 10.

mod grammar;
mod ordering;
mod oxidation;
mod quantize;
mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::{Crystal, CrystalError, LatticeParams, Site};

pub use grammar::{ClassSet, Expected, GrammarState, SiteLayout};
pub use ordering::{order_sites, OrderingStrategy};
pub use oxidation::assign_oxidation_states;
pub use quantize::{dequantize_frac, quantize_frac, quantize_lattice_param, LatticeParam, LatticeRanges};
pub use vocab::{Token, TokenClass, TokenId, Vocabulary, ATOMS, EOS, FIRST_BIN, FIRST_ELEMENT, LATTICE, NUM_BINS, SOS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizerError {
    #[error("element table is empty")]
    EmptyTable,
    #[error("value {0} outside the quantization range")]
    OutOfRange(f64),
    #[error("no token for element {element} with oxidation state {oxidation}")]
    UnknownElementOxi { element: u8, oxidation: i8 },
    #[error("invalid range for lattice parameter `{0}`")]
    BadRange(&'static str),
    #[error("vocabulary file line {line}: {reason}")]
    VocabFormat { line: usize, reason: String },
    #[error(transparent)]
    Crystal(#[from] CrystalError),
}

/// Malformed sequence: the grammar wanted `expected` at `position`.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[error("grammar error at position {position}: expected {expected}")]
pub struct GrammarError {
    pub position: usize,
    pub expected: Expected,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.ids
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Self { ids }
    }
}

/// Expected sequence length for `n` atoms.
pub const fn sequence_len(n_atoms: usize) -> usize {
    4 * n_atoms + 10
}

/// Result of encoding, with the canonical crystal the tokens describe.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub tokens: TokenSequence,
    /// Niggli-reduced crystal with sites in emitted order.
    pub canonical: Crystal,
    /// Per lattice parameter (a, b, c, α, β, γ): value was outside its range.
    pub clamped: [bool; 6],
}

impl Encoded {
    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|&c| c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub ranges: LatticeRanges,
    pub layout: SiteLayout,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, ranges: LatticeRanges) -> Self {
        Self { vocab, ranges, layout: SiteLayout::ElementFirst }
    }

    pub fn with_layout(mut self, layout: SiteLayout) -> Self {
        self.layout = layout;
        self
    }

    pub fn encode(&self, c: &Crystal, strategy: OrderingStrategy) -> Result<TokenSequence, TokenizerError> {
        Ok(self.encode_detailed(c, strategy)?.tokens)
    }

    pub fn encode_detailed(&self, c: &Crystal, strategy: OrderingStrategy) -> Result<Encoded, TokenizerError> {
        let reduced = c.niggli_reduced()?;
        let sites = order_sites(&reduced.sites, strategy);
        let mut ids = Vec::with_capacity(sequence_len(sites.len()));
        ids.push(SOS);
        ids.push(ATOMS);
        for s in &sites {
            let elem = self
                .vocab
                .element_id(s.element, s.oxidation_state)
                .ok_or(TokenizerError::UnknownElementOxi { element: s.element, oxidation: s.oxidation_state })?;
            let coords = [quantize_frac(s.frac[0])?, quantize_frac(s.frac[1])?, quantize_frac(s.frac[2])?]
                .map(Vocabulary::bin_id);
            match self.layout {
                SiteLayout::ElementFirst => {
                    ids.push(elem);
                    ids.extend(coords);
                }
                SiteLayout::CoordsFirst => {
                    ids.extend(coords);
                    ids.push(elem);
                }
            }
        }
        ids.push(LATTICE);
        let mut clamped = [false; 6];
        for (i, (p, v)) in LatticeParam::ALL.iter().zip(reduced.lattice.to_array()).enumerate() {
            let (bin, c) = self.ranges.quantize(*p, v);
            clamped[i] = c;
            ids.push(Vocabulary::bin_id(bin));
        }
        ids.push(EOS);
        debug_assert_eq!(ids.len(), sequence_len(sites.len()));
        Ok(Encoded { tokens: TokenSequence::new(ids), canonical: Crystal { lattice: reduced.lattice, sites }, clamped })
    }

    /// Parses a token sequence back into a crystal with bin-centre values.
    /// Never panics: any malformed input yields a positioned [`GrammarError`].
    pub fn decode(&self, tokens: &[TokenId]) -> Result<Crystal, GrammarError> {
        let mut g = GrammarState::new(self.layout);
        let mut sites = Vec::new();
        let mut pending_elem: Option<(u8, i8)> = None;
        let mut pending_coords: Vec<f64> = Vec::with_capacity(3);
        let mut lattice = Vec::with_capacity(6);

        for (pos, &id) in tokens.iter().enumerate() {
            let err = |g: &GrammarState| GrammarError { position: pos, expected: g.expected() };
            let Some(token) = self.vocab.token(id) else {
                return Err(err(&g));
            };
            let class = self.vocab.class(id).expect("token exists");
            let in_lattice = g.lattice_index().is_some();
            g.advance(class).map_err(|expected| GrammarError { position: pos, expected })?;
            match token {
                Token::ElementOxi { element, oxidation } => pending_elem = Some((element, oxidation)),
                Token::Bin(b) if in_lattice => {
                    let p = LatticeParam::ALL[lattice.len()];
                    lattice.push(self.ranges.dequantize(p, b).expect("bin < 1024"));
                }
                Token::Bin(b) => pending_coords.push(dequantize_frac(b).expect("bin < 1024")),
                _ => {}
            }
            if pending_coords.len() == 3 {
                if let Some((element, oxidation)) = pending_elem {
                    sites.push(Site::new(element, oxidation, [pending_coords[0], pending_coords[1], pending_coords[2]]));
                    pending_elem = None;
                    pending_coords.clear();
                }
            }
        }
        if !g.is_complete() {
            return Err(GrammarError { position: tokens.len(), expected: g.expected() });
        }
        let gamma_pos = tokens.len() - 2;
        let lattice = LatticeParams::from_array([lattice[0], lattice[1], lattice[2], lattice[3], lattice[4], lattice[5]])
            .map_err(|_| GrammarError { position: gamma_pos, expected: Expected::NonDegenerateCell })?;
        Crystal::new(lattice, sites).map_err(|_| GrammarError { position: gamma_pos, expected: Expected::NonDegenerateCell })
    }

    /// Pretty-prints token names separated by spaces.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&id| self.vocab.name(id).unwrap_or_else(|| format!("[?{id}]")))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::ElementTables;
    use proptest::prelude::*;

    fn tokenizer() -> Tokenizer {
        Tokenizer::new(Vocabulary::build(&ElementTables::bundled()).unwrap(), LatticeRanges::default())
    }

    fn nacl() -> Crystal {
        Crystal::new(
            LatticeParams::new(4.0, 4.2, 4.4, 89.0, 91.0, 92.0).unwrap(),
            vec![Site::new(11, 1, [0.0, 0.0, 0.0]), Site::new(17, -1, [0.5, 0.5, 0.5])],
        )
        .unwrap()
    }

    #[test]
    fn two_atoms_give_eighteen_tokens() {
        let t = tokenizer();
        let seq = t.encode(&nacl(), OrderingStrategy::LowFirst).unwrap();
        assert_eq!(seq.len(), 18);
        assert_eq!(seq.ids[0], SOS);
        assert_eq!(seq.ids[1], ATOMS);
        assert_eq!(seq.ids[10], LATTICE);
        assert_eq!(*seq.ids.last().unwrap(), EOS);
    }

    #[test]
    fn all_minimum_single_atom() {
        let t = tokenizer();
        let c = Crystal::new(LatticeParams::cubic(2.0), vec![Site::new(1, 1, [0.0; 3])]).unwrap();
        let seq = t.encode(&c, OrderingStrategy::LowFirst).unwrap();
        let bin0 = Vocabulary::bin_id(0);
        let h = t.vocab.element_id(1, 1).unwrap();
        let ninety = Vocabulary::bin_id(512);
        assert_eq!(seq.ids, vec![SOS, ATOMS, h, bin0, bin0, bin0, LATTICE, bin0, bin0, bin0, ninety, ninety, ninety, EOS]);
        assert_eq!(
            t.render(&seq.ids[..3]),
            "[SOS] [ATOMS] [H|+1]"
        );
    }

    #[test]
    fn decode_reports_positions() {
        let t = tokenizer();
        let seq = t.encode(&nacl(), OrderingStrategy::LowFirst).unwrap().ids;
        // drop the lattice section
        let mut truncated = seq[..10].to_vec();
        truncated.push(EOS);
        let e = t.decode(&truncated).unwrap_err();
        assert_eq!(e.position, 10);
        assert_eq!(e.expected, Expected::ElementOrLattice);
        // element where a bin belongs
        let mut bad = seq.clone();
        bad[3] = t.vocab.element_id(8, -2).unwrap();
        assert_eq!(t.decode(&bad).unwrap_err(), GrammarError { position: 3, expected: Expected::Bin });
        // truncation
        let e = t.decode(&seq[..15]).unwrap_err();
        assert_eq!(e, GrammarError { position: 15, expected: Expected::Bin });
        // no atoms
        let e = t.decode(&[SOS, ATOMS, LATTICE]).unwrap_err();
        assert_eq!(e, GrammarError { position: 2, expected: Expected::Element });
        // unknown id
        let e = t.decode(&[SOS, 999_999]).unwrap_err();
        assert_eq!(e.position, 1);
        assert!(t.decode(&[]).is_err());
    }

    #[test]
    fn degenerate_lattice_is_a_positioned_error() {
        let t = tokenizer();
        let h = t.vocab.element_id(1, 0).unwrap();
        let b = Vocabulary::bin_id;
        // α = β = 60°, γ = 120° has zero volume
        let ids = vec![SOS, ATOMS, h, b(0), b(0), b(0), LATTICE, b(10), b(10), b(10), b(0), b(0), b(1023), EOS];
        // bin centres are not exactly on the boundary, so check both outcomes are well-formed
        match t.decode(&ids) {
            Ok(c) => assert!(c.volume() > 0.0),
            Err(e) => assert_eq!(e.expected, Expected::NonDegenerateCell),
        }
        let ids = vec![SOS, ATOMS, h, b(0), b(0), b(0), LATTICE, b(10), b(10), b(10), b(0), b(0), b(0), EOS];
        let c = t.decode(&ids).unwrap();
        assert!(c.volume() > 0.0);
    }

    #[test]
    fn coords_first_variant_round_trips() {
        let t = tokenizer().with_layout(SiteLayout::CoordsFirst);
        let enc = t.encode_detailed(&nacl(), OrderingStrategy::Xyz).unwrap();
        assert_eq!(t.vocab.class(enc.tokens.ids[2]), Some(TokenClass::Bin));
        let back = t.decode(&enc.tokens.ids).unwrap();
        assert_eq!(back.sites.len(), 2);
        assert_eq!(back.sites[0].element, enc.canonical.sites[0].element);
    }

    #[test]
    fn unknown_element_oxi() {
        let t = tokenizer();
        let c = Crystal::new(LatticeParams::cubic(3.0), vec![Site::new(8, 3, [0.0; 3])]).unwrap();
        assert_eq!(
            t.encode(&c, OrderingStrategy::LowFirst),
            Err(TokenizerError::UnknownElementOxi { element: 8, oxidation: 3 })
        );
    }

    proptest! {
        #[test]
        fn decode_is_total(ids in proptest::collection::vec(0u32..1400, 0..60)) {
            let t = tokenizer();
            let _ = t.decode(&ids);
        }
    }
}
