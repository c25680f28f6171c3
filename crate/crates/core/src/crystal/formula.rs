use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Crystal, CrystalError};
use crate::elements::{ElementTables, TableError};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FormulaEntry {
    pub symbol: String,
    pub element: u8,
    pub count: u32,
}

/// A composition with entries sorted alphabetically by element symbol.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Formula(pub Vec<FormulaEntry>);

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Formula {
    /// Builds a formula from per-element counts; zero counts are dropped.
    pub fn from_counts(counts: &BTreeMap<u8, u32>, tables: &ElementTables) -> Result<Self, TableError> {
        let mut entries = Vec::with_capacity(counts.len());
        for (&z, &count) in counts {
            if count == 0 {
                continue;
            }
            let symbol = tables.symbol(z).ok_or_else(|| TableError::UnknownElement(format!("Z={z}")))?;
            entries.push(FormulaEntry { symbol: symbol.to_string(), element: z, count });
        }
        entries.sort_by(|a, b| a.symbol.cmp(&b.symbol));
        Ok(Self(entries))
    }

    /// Parses strings such as `Fe1O1`, `FeO` or `Ba2Cu3O7Y`. Repeated
    /// elements are summed; the result is in canonical order but not reduced.
    pub fn parse(s: &str, tables: &ElementTables) -> Result<Self, TableError> {
        let bad = |reason: &str| TableError::Malformed { line: 0, reason: format!("formula `{s}`: {reason}") };
        let chars: Vec<char> = s.trim().chars().collect();
        if chars.is_empty() {
            return Err(bad("empty"));
        }
        let mut counts: BTreeMap<u8, u32> = BTreeMap::new();
        let mut i = 0;
        while i < chars.len() {
            if !chars[i].is_ascii_uppercase() {
                return Err(bad("expected an element symbol"));
            }
            let mut sym = chars[i].to_string();
            i += 1;
            while i < chars.len() && chars[i].is_ascii_lowercase() {
                sym.push(chars[i]);
                i += 1;
            }
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let count: u32 = if start == i {
                1
            } else {
                chars[start..i].iter().collect::<String>().parse().map_err(|_| bad("count too large"))?
            };
            if count == 0 {
                return Err(bad("zero count"));
            }
            let z = tables.atomic_number(&sym)?;
            *counts.entry(z).or_default() += count;
        }
        Self::from_counts(&counts, tables)
    }

    /// Divides all counts by their greatest common divisor.
    pub fn reduced(&self) -> Self {
        let g = self.0.iter().fold(0, |g, e| gcd(g, e.count));
        if g <= 1 {
            return self.clone();
        }
        Self(self.0.iter().map(|e| FormulaEntry { count: e.count / g, ..e.clone() }).collect())
    }

    pub fn entries(&self) -> &[FormulaEntry] {
        &self.0
    }

    pub fn pairs(&self) -> Vec<(u8, u32)> {
        self.0.iter().map(|e| (e.element, e.count)).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.0 {
            if e.count == 1 {
                write!(f, "{}", e.symbol)?;
            } else {
                write!(f, "{}{}", e.symbol, e.count)?;
            }
        }
        Ok(())
    }
}

/// Composition divided by its GCD, elements sorted alphabetically.
pub fn reduced_formula(c: &Crystal, tables: &ElementTables) -> Result<Formula, CrystalError> {
    let mut counts: BTreeMap<u8, u32> = BTreeMap::new();
    for s in &c.sites {
        *counts.entry(s.element).or_default() += 1;
    }
    let f = Formula::from_counts(&counts, tables).map_err(|_| {
        let missing = counts.keys().find(|z| tables.get(**z).is_none()).copied().unwrap_or(0);
        CrystalError::UnknownElement(missing)
    })?;
    Ok(f.reduced())
}
