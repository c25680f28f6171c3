//! Sequence grammar as an incremental state machine.
//!
//! ```text
//! SOS ATOMS (ELEM BIN BIN BIN)+ LATTICE BIN×6 EOS      element-first layout
//! SOS ATOMS (BIN BIN BIN ELEM)+ LATTICE BIN×6 EOS      coordinates-first layout
//! ```
//!
//! The same machine validates complete sequences in `decode` and produces
//! per-step masks for constrained sampling.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::vocab::TokenClass;

/// Order of the four tokens describing one atom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteLayout {
    #[default]
    ElementFirst,
    CoordsFirst,
}

/// Set of token classes, one bit per [`TokenClass`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassSet(u8);

impl ClassSet {
    pub const EMPTY: ClassSet = ClassSet(0);

    fn bit(c: TokenClass) -> u8 {
        1 << (c as u8)
    }

    pub fn only(c: TokenClass) -> Self {
        Self(Self::bit(c))
    }

    pub fn with(self, c: TokenClass) -> Self {
        Self(self.0 | Self::bit(c))
    }

    pub fn contains(self, c: TokenClass) -> bool {
        self.0 & Self::bit(c) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

/// What the grammar wanted at a failing position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expected {
    Sos,
    Atoms,
    Element,
    Bin,
    ElementOrLattice,
    BinOrLattice,
    Lattice,
    Eos,
    EndOfSequence,
    /// Grammatical lattice bins that decode to a zero-volume cell.
    NonDegenerateCell,
}

impl Expected {
    fn from_set(set: ClassSet) -> Self {
        use TokenClass as C;
        if set.is_empty() {
            Expected::EndOfSequence
        } else if set == ClassSet::only(C::Sos) {
            Expected::Sos
        } else if set == ClassSet::only(C::Atoms) {
            Expected::Atoms
        } else if set == ClassSet::only(C::Element) {
            Expected::Element
        } else if set == ClassSet::only(C::Bin) {
            Expected::Bin
        } else if set == ClassSet::only(C::Lattice) {
            Expected::Lattice
        } else if set == ClassSet::only(C::Eos) {
            Expected::Eos
        } else if set.contains(C::Element) {
            Expected::ElementOrLattice
        } else {
            Expected::BinOrLattice
        }
    }
}

impl fmt::Display for Expected {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Expected::Sos => "[SOS]",
            Expected::Atoms => "[ATOMS]",
            Expected::Element => "an element token",
            Expected::Bin => "a value bin",
            Expected::ElementOrLattice => "an element token or [LATTICE]",
            Expected::BinOrLattice => "a value bin or [LATTICE]",
            Expected::Lattice => "[LATTICE]",
            Expected::Eos => "[EOS]",
            Expected::EndOfSequence => "end of sequence",
            Expected::NonDegenerateCell => "lattice bins describing a valid cell",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Start,
    AfterSos,
    /// Between atoms; `n` atoms completed so far.
    AtomBoundary { n: usize },
    /// Inside an atom, `done` of its four tokens consumed.
    InAtom { n: usize, done: u8 },
    LatticeBins { done: u8 },
    ExpectEos,
    Done,
}

/// Incremental grammar tracker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrammarState {
    layout: SiteLayout,
    max_atoms: usize,
    phase: Phase,
}

impl GrammarState {
    pub fn new(layout: SiteLayout) -> Self {
        Self::with_max_atoms(layout, usize::MAX)
    }

    /// Forces `[LATTICE]` once `max_atoms` atoms have been emitted.
    pub fn with_max_atoms(layout: SiteLayout, max_atoms: usize) -> Self {
        Self { layout, max_atoms: max_atoms.max(1), phase: Phase::Start }
    }

    pub fn layout(&self) -> SiteLayout {
        self.layout
    }

    pub fn num_atoms(&self) -> usize {
        match self.phase {
            Phase::AtomBoundary { n } | Phase::InAtom { n, .. } => n,
            _ => 0,
        }
    }

    /// Index (0..6) of the next lattice bin, if the machine is in the lattice section.
    pub fn lattice_index(&self) -> Option<usize> {
        match self.phase {
            Phase::LatticeBins { done } => Some(done as usize),
            _ => None,
        }
    }

    /// Whether the next token is a coordinate bin.
    pub fn expects_coordinate(&self) -> bool {
        let first = self.atom_first_class();
        match self.phase {
            Phase::AtomBoundary { .. } => first == TokenClass::Bin,
            Phase::InAtom { done, .. } => match self.layout {
                SiteLayout::ElementFirst => true,
                SiteLayout::CoordsFirst => done < 3,
            },
            _ => false,
        }
    }

    fn atom_first_class(&self) -> TokenClass {
        match self.layout {
            SiteLayout::ElementFirst => TokenClass::Element,
            SiteLayout::CoordsFirst => TokenClass::Bin,
        }
    }

    pub fn allowed(&self) -> ClassSet {
        use TokenClass as C;
        match self.phase {
            Phase::Start => ClassSet::only(C::Sos),
            Phase::AfterSos => ClassSet::only(C::Atoms),
            Phase::AtomBoundary { n } => {
                if n == 0 {
                    ClassSet::only(self.atom_first_class())
                } else if n >= self.max_atoms {
                    ClassSet::only(C::Lattice)
                } else {
                    ClassSet::only(self.atom_first_class()).with(C::Lattice)
                }
            }
            Phase::InAtom { done, .. } => match (self.layout, done) {
                (SiteLayout::CoordsFirst, 3) => ClassSet::only(C::Element),
                _ => ClassSet::only(C::Bin),
            },
            Phase::LatticeBins { .. } => ClassSet::only(C::Bin),
            Phase::ExpectEos => ClassSet::only(C::Eos),
            Phase::Done => ClassSet::EMPTY,
        }
    }

    pub fn expected(&self) -> Expected {
        Expected::from_set(self.allowed())
    }

    /// Consumes one token class, or reports what was expected instead.
    pub fn advance(&mut self, class: TokenClass) -> Result<(), Expected> {
        if !self.allowed().contains(class) {
            return Err(self.expected());
        }
        self.phase = match self.phase {
            Phase::Start => Phase::AfterSos,
            Phase::AfterSos => Phase::AtomBoundary { n: 0 },
            Phase::AtomBoundary { n } => {
                if class == TokenClass::Lattice {
                    Phase::LatticeBins { done: 0 }
                } else {
                    Phase::InAtom { n, done: 1 }
                }
            }
            Phase::InAtom { n, done } => {
                if done == 3 {
                    Phase::AtomBoundary { n: n + 1 }
                } else {
                    Phase::InAtom { n, done: done + 1 }
                }
            }
            Phase::LatticeBins { done } => {
                if done == 5 {
                    Phase::ExpectEos
                } else {
                    Phase::LatticeBins { done: done + 1 }
                }
            }
            Phase::ExpectEos => Phase::Done,
            Phase::Done => unreachable!("no class is allowed after EOS"),
        };
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Minimum number of further tokens needed to reach `[EOS]`.
    pub fn min_remaining(&self) -> usize {
        match self.phase {
            Phase::Start => 14,
            Phase::AfterSos => 13,
            Phase::AtomBoundary { n: 0 } => 12,
            Phase::AtomBoundary { .. } => 8,
            Phase::InAtom { done, .. } => (4 - done as usize) + 8,
            Phase::LatticeBins { done } => (6 - done as usize) + 1,
            Phase::ExpectEos => 1,
            Phase::Done => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use TokenClass as C;

    #[test]
    fn walks_a_one_atom_sequence() {
        let mut g = GrammarState::new(SiteLayout::ElementFirst);
        assert_eq!(g.allowed(), ClassSet::only(C::Sos));
        let seq = [C::Sos, C::Atoms, C::Element, C::Bin, C::Bin, C::Bin, C::Lattice];
        for c in seq {
            g.advance(c).unwrap();
        }
        for _ in 0..6 {
            assert_eq!(g.allowed(), ClassSet::only(C::Bin));
            g.advance(C::Bin).unwrap();
        }
        assert_eq!(g.allowed(), ClassSet::only(C::Eos));
        g.advance(C::Eos).unwrap();
        assert!(g.is_complete());
        assert_eq!(g.advance(C::Bin), Err(Expected::EndOfSequence));
    }

    #[test]
    fn element_is_followed_by_bins_and_zero_atoms_rejected() {
        let mut g = GrammarState::new(SiteLayout::ElementFirst);
        g.advance(C::Sos).unwrap();
        g.advance(C::Atoms).unwrap();
        assert_eq!(g.advance(C::Lattice), Err(Expected::Element));
        g.advance(C::Element).unwrap();
        assert_eq!(g.allowed(), ClassSet::only(C::Bin));
        assert!(g.expects_coordinate());
    }

    #[test]
    fn atom_cap_forces_lattice() {
        let mut g = GrammarState::with_max_atoms(SiteLayout::ElementFirst, 1);
        for c in [C::Sos, C::Atoms, C::Element, C::Bin, C::Bin, C::Bin] {
            g.advance(c).unwrap();
        }
        assert_eq!(g.allowed(), ClassSet::only(C::Lattice));
    }

    #[test]
    fn coords_first_layout() {
        let mut g = GrammarState::new(SiteLayout::CoordsFirst);
        for c in [C::Sos, C::Atoms, C::Bin, C::Bin, C::Bin] {
            g.advance(c).unwrap();
        }
        assert_eq!(g.allowed(), ClassSet::only(C::Element));
        g.advance(C::Element).unwrap();
        assert_eq!(g.expected(), Expected::BinOrLattice);
    }
}
