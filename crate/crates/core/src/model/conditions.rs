//! Property conditions and the schema that fixes their prefix slots.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// One conditioning input. Scalars are stored after the data-io transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    BandGap,
    MagneticDensity,
    Density,
    SpaceGroup,
    Hhi,
    Formula,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::BandGap,
        Condition::MagneticDensity,
        Condition::Density,
        Condition::SpaceGroup,
        Condition::Hhi,
        Condition::Formula,
    ];

    pub const SCALARS: [Condition; 5] =
        [Condition::BandGap, Condition::MagneticDensity, Condition::Density, Condition::SpaceGroup, Condition::Hhi];

    pub fn name(self) -> &'static str {
        match self {
            Condition::BandGap => "band_gap",
            Condition::MagneticDensity => "magnetic_density",
            Condition::Density => "density",
            Condition::SpaceGroup => "space_group",
            Condition::Hhi => "hhi",
            Condition::Formula => "formula",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ModelError::UnknownCondition(s.to_string()))
    }

    pub fn is_scalar(self) -> bool {
        self != Condition::Formula
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named optional conditions for one material.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConditionSet {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    scalars: BTreeMap<Condition, f64>,
    /// (atomic number, count) pairs sorted by atomic number.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    formula: Option<Vec<(u8, u32)>>,
}

impl ConditionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, c: Condition, value: f64) -> Result<Self, ModelError> {
        self.set(c, value)?;
        Ok(self)
    }

    pub fn with_formula(mut self, pairs: &[(u8, u32)]) -> Result<Self, ModelError> {
        self.set_formula(pairs)?;
        Ok(self)
    }

    pub fn set(&mut self, c: Condition, value: f64) -> Result<(), ModelError> {
        if !c.is_scalar() {
            return Err(ModelError::InvalidCondition(format!("{c} is not a scalar condition")));
        }
        if !value.is_finite() {
            return Err(ModelError::InvalidCondition(format!("{c} value {value} is not finite")));
        }
        self.scalars.insert(c, value);
        Ok(())
    }

    /// Stores a formula, merging repeated elements and sorting by atomic number.
    pub fn set_formula(&mut self, pairs: &[(u8, u32)]) -> Result<(), ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::InvalidCondition("empty formula".into()));
        }
        let mut merged: BTreeMap<u8, u32> = BTreeMap::new();
        for &(z, n) in pairs {
            if z == 0 || n == 0 {
                return Err(ModelError::InvalidCondition(format!("formula entry ({z}, {n})")));
            }
            *merged.entry(z).or_default() += n;
        }
        self.formula = Some(merged.into_iter().collect());
        Ok(())
    }

    pub fn remove(&mut self, c: Condition) {
        if c.is_scalar() {
            self.scalars.remove(&c);
        } else {
            self.formula = None;
        }
    }

    pub fn get(&self, c: Condition) -> Option<f64> {
        self.scalars.get(&c).copied()
    }

    pub fn formula(&self) -> Option<&[(u8, u32)]> {
        self.formula.as_deref()
    }

    pub fn is_present(&self, c: Condition) -> bool {
        if c.is_scalar() {
            self.scalars.contains_key(&c)
        } else {
            self.formula.is_some()
        }
    }

    pub fn present(&self) -> Vec<Condition> {
        Condition::ALL.into_iter().filter(|&c| self.is_present(c)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.scalars.is_empty() && self.formula.is_none()
    }

    /// Drops every condition the schema does not carry.
    pub fn restricted_to(&self, schema: &[Condition]) -> ConditionSet {
        let mut out = self.clone();
        for c in Condition::ALL {
            if !schema.contains(&c) {
                out.remove(c);
            }
        }
        out
    }
}

/// Where each prefix row comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrefixSlot {
    /// Scalar slot `slot` (index among scalar schema entries) with its value.
    Scalar { slot: usize, value: f64 },
    ScalarNan { slot: usize },
    FormulaPair { element: u8, count: u32 },
    FormulaNan,
}

/// Schema order of scalar slots, and whether the schema has a formula slot.
pub fn scalar_slots(schema: &[Condition]) -> Vec<Condition> {
    schema.iter().copied().filter(|c| c.is_scalar()).collect()
}

pub fn validate_schema(schema: &[Condition]) -> Result<(), ModelError> {
    for (i, c) in schema.iter().enumerate() {
        if schema[..i].contains(c) {
            return Err(ModelError::BadConfig(format!("condition {c} listed twice")));
        }
        if *c == Condition::Formula && i + 1 != schema.len() {
            return Err(ModelError::BadConfig("formula must be the last schema entry".into()));
        }
    }
    Ok(())
}

/// Resolves a condition set into prefix slots in schema order.
pub fn prefix_slots(
    schema: &[Condition],
    cs: &ConditionSet,
    num_elements: usize,
    stoich_max: usize,
) -> Result<Vec<PrefixSlot>, ModelError> {
    for c in cs.present() {
        if !schema.contains(&c) {
            return Err(ModelError::UnknownCondition(c.name().to_string()));
        }
    }
    let mut out = Vec::with_capacity(schema.len() + 4);
    for (slot, c) in scalar_slots(schema).into_iter().enumerate() {
        out.push(match cs.get(c) {
            Some(value) => PrefixSlot::Scalar { slot, value },
            None => PrefixSlot::ScalarNan { slot },
        });
    }
    if schema.contains(&Condition::Formula) {
        match cs.formula() {
            None => out.push(PrefixSlot::FormulaNan),
            Some(pairs) => {
                for &(element, count) in pairs {
                    if element as usize > num_elements {
                        return Err(ModelError::InvalidCondition(format!("element {element} outside the formula table")));
                    }
                    if count as usize > stoich_max {
                        return Err(ModelError::StoichOutOfTable { count, max: stoich_max });
                    }
                    out.push(PrefixSlot::FormulaPair { element, count });
                }
            }
        }
    }
    Ok(out)
}
