//! Per-element reference data: atomic numbers, masses, common oxidation
//! states and supply-risk (HHI) scores.
//!
//! Tables are plain CSV with the header
//! `symbol,atomic_number,mass_u,oxidation_states,hhi`. Oxidation states are
//! semicolon-joined with the most common state first; an empty `hhi` cell
//! means no published value. Leading `# key: value` lines carry provenance
//! metadata and are kept on the loaded table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

/// Highest atomic number accepted anywhere in the crate.
pub const MAX_ATOMIC_NUMBER: u8 = 103;

const BUNDLED: &str = include_str!("../data/elements.csv");

#[derive(Debug, Error)]
pub enum TableError {
    #[error("element table is empty")]
    EmptyTable,
    #[error("element table line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate element symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("unknown element `{0}`")]
    UnknownElement(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementData {
    pub symbol: String,
    pub atomic_number: u8,
    pub mass_u: f64,
    /// Common oxidation states, most common first. Never contains 0.
    pub oxidation_states: Vec<i8>,
    pub hhi: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct Row {
    symbol: String,
    atomic_number: u8,
    mass_u: f64,
    oxidation_states: String,
    hhi: Option<f64>,
}

/// Element reference table, indexed by atomic number.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementTables {
    by_z: BTreeMap<u8, ElementData>,
    by_symbol: BTreeMap<String, u8>,
    /// `# key: value` metadata lines from the file header.
    pub provenance: Vec<(String, String)>,
}

impl ElementTables {
    /// The table shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_csv_str(BUNDLED).expect("bundled element table is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TableError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, TableError> {
        let mut provenance = Vec::new();
        let mut body = String::with_capacity(text.len());
        let mut first_body_line = None;
        for (i, line) in text.lines().enumerate() {
            if let Some(meta) = line.trim_start().strip_prefix('#') {
                if let Some((k, v)) = meta.split_once(':') {
                    provenance.push((k.trim().to_string(), v.trim().to_string()));
                }
                continue;
            }
            if first_body_line.is_none() {
                first_body_line = Some(i + 1);
            }
            body.push_str(line);
            body.push('\n');
        }
        let offset = first_body_line.unwrap_or(1);

        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
        let mut by_z = BTreeMap::new();
        let mut by_symbol = BTreeMap::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let line = offset + i + 1;
            let row = row.map_err(|e| TableError::Malformed { line, reason: e.to_string() })?;
            if row.atomic_number == 0 || row.atomic_number > MAX_ATOMIC_NUMBER {
                return Err(TableError::Malformed {
                    line,
                    reason: format!("atomic number {} outside 1..={MAX_ATOMIC_NUMBER}", row.atomic_number),
                });
            }
            if !(row.mass_u > 0.0) {
                return Err(TableError::Malformed { line, reason: "mass must be positive".into() });
            }
            let mut states = Vec::new();
            for s in row.oxidation_states.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let v: i8 = s.trim_start_matches('+').parse().map_err(|_| TableError::Malformed {
                    line,
                    reason: format!("bad oxidation state `{s}`"),
                })?;
                if v != 0 && !states.contains(&v) {
                    states.push(v);
                }
            }
            if by_symbol.insert(row.symbol.clone(), row.atomic_number).is_some() {
                return Err(TableError::DuplicateSymbol(row.symbol));
            }
            by_z.insert(
                row.atomic_number,
                ElementData {
                    symbol: row.symbol,
                    atomic_number: row.atomic_number,
                    mass_u: row.mass_u,
                    oxidation_states: states,
                    hhi: row.hhi,
                },
            );
        }
        if by_z.is_empty() {
            return Err(TableError::EmptyTable);
        }
        Ok(Self { by_z, by_symbol, provenance })
    }

    pub fn get(&self, z: u8) -> Option<&ElementData> {
        self.by_z.get(&z)
    }

    pub fn by_symbol(&self, symbol: &str) -> Option<&ElementData> {
        self.by_symbol.get(symbol).and_then(|z| self.by_z.get(z))
    }

    pub fn atomic_number(&self, symbol: &str) -> Result<u8, TableError> {
        self.by_symbol.get(symbol).copied().ok_or_else(|| TableError::UnknownElement(symbol.to_string()))
    }

    pub fn symbol(&self, z: u8) -> Option<&str> {
        self.by_z.get(&z).map(|e| e.symbol.as_str())
    }

    pub fn mass(&self, z: u8) -> Option<f64> {
        self.by_z.get(&z).map(|e| e.mass_u)
    }

    pub fn hhi(&self, z: u8) -> Option<f64> {
        self.by_z.get(&z).and_then(|e| e.hhi)
    }

    /// Whether `state` is 0 or one of the element's listed states.
    pub fn allows_oxidation(&self, z: u8, state: i8) -> bool {
        match self.by_z.get(&z) {
            Some(e) => state == 0 || e.oxidation_states.contains(&state),
            None => false,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ElementData> {
        self.by_z.values()
    }

    pub fn len(&self) -> usize {
        self.by_z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_z.is_empty()
    }

    pub fn metadata(&self, key: &str) -> Option<&str> {
        self.provenance.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}
