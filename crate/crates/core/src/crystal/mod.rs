//! Periodic crystal geometry and chemistry.
//!
//! A [`Crystal`] is a cell ([`LatticeParams`]) plus an ordered list of
//! [`Site`]s in fractional coordinates. Everything here is a pure function
//! of its inputs.

mod fingerprint;
mod formula;
mod lattice;
mod niggli;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elements::{ElementTables, MAX_ATOMIC_NUMBER};

pub use fingerprint::{canonical_fingerprint, fingerprint, DEFAULT_PARAM_TOL, DEFAULT_SITE_TOL};
pub use formula::{reduced_formula, Formula};
pub use lattice::{cell_volume, frac_to_cart, lattice_matrix, LatticeMatrix, LatticeParams};
pub use niggli::{
    is_niggli_reduced, niggli_reduce, niggli_reduce_matrix, NiggliReduction, DEFAULT_MAX_STEPS, DEFAULT_TOLERANCE,
};

/// Atomic mass unit in grams.
pub const AMU_GRAMS: f64 = 1.660_539_066_60e-24;
/// One Å³ in cm³.
pub const CUBIC_ANGSTROM_CM3: f64 = 1e-24;
/// Coordinates this close below 1.0 wrap to 0.0.
pub const WRAP_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrystalError {
    #[error("angle combination gives a non-positive cell volume")]
    DegenerateCell,
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error("crystal has no sites")]
    NoSites,
    #[error("atomic number {0} outside 1..=103")]
    InvalidElement(u8),
    #[error("unknown element with atomic number {0}")]
    UnknownElement(u8),
    #[error("non-finite fractional coordinate")]
    NonFiniteCoordinate,
    #[error("oxidation state {state} not allowed for element {element}")]
    DisallowedOxidation { element: u8, state: i8 },
    #[error("Niggli reduction did not converge within {steps} steps")]
    NonConvergence { steps: usize },
}

/// Reduces a coordinate into [0, 1); values within [`WRAP_EPS`] of 1 become 0.
pub fn wrap_frac(v: f64) -> f64 {
    let r = v - v.floor();
    if r >= 1.0 - WRAP_EPS {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    /// Atomic number.
    pub element: u8,
    pub oxidation_state: i8,
    pub frac: [f64; 3],
}

impl Site {
    pub fn new(element: u8, oxidation_state: i8, frac: [f64; 3]) -> Self {
        Self { element, oxidation_state, frac }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crystal {
    pub lattice: LatticeParams,
    pub sites: Vec<Site>,
}

impl Crystal {
    /// Validates the cell and sites, wrapping every coordinate into [0, 1).
    pub fn new(lattice: LatticeParams, mut sites: Vec<Site>) -> Result<Self, CrystalError> {
        lattice.validate()?;
        if sites.is_empty() {
            return Err(CrystalError::NoSites);
        }
        for s in &mut sites {
            if s.element == 0 || s.element > MAX_ATOMIC_NUMBER {
                return Err(CrystalError::InvalidElement(s.element));
            }
            for f in &mut s.frac {
                if !f.is_finite() {
                    return Err(CrystalError::NonFiniteCoordinate);
                }
                *f = wrap_frac(*f);
            }
        }
        Ok(Self { lattice, sites })
    }

    /// Checks every site's oxidation state against the table.
    pub fn check_oxidation_states(&self, tables: &ElementTables) -> Result<(), CrystalError> {
        for s in &self.sites {
            if tables.get(s.element).is_none() {
                return Err(CrystalError::UnknownElement(s.element));
            }
            if !tables.allows_oxidation(s.element, s.oxidation_state) {
                return Err(CrystalError::DisallowedOxidation { element: s.element, state: s.oxidation_state });
            }
        }
        Ok(())
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn volume(&self) -> f64 {
        self.lattice.volume()
    }

    pub fn matrix(&self) -> Result<LatticeMatrix, CrystalError> {
        lattice_matrix(&self.lattice)
    }

    /// Niggli-reduces the cell and re-expresses the sites in the reduced basis.
    pub fn niggli_reduced(&self) -> Result<Crystal, CrystalError> {
        let m = self.matrix()?;
        let red = niggli_reduce_matrix(&m, DEFAULT_TOLERANCE, DEFAULT_MAX_STEPS)?;
        // reduced_rows = T · rows  =>  f' = T⁻ᵀ f
        let t = red.transform.map(|x| x as f64);
        let inv_t = t.try_inverse().ok_or(CrystalError::DegenerateCell)?.transpose();
        let sites = self
            .sites
            .iter()
            .map(|s| {
                let f = inv_t * nalgebra::Vector3::from(s.frac);
                Site { frac: [wrap_frac(f.x), wrap_frac(f.y), wrap_frac(f.z)], ..*s }
            })
            .collect();
        Crystal::new(red.params, sites)
    }
}

/// Mass density in g/cm³.
pub fn density(c: &Crystal, masses: &ElementTables) -> Result<f64, CrystalError> {
    let mut total = 0.0;
    for s in &c.sites {
        total += masses.mass(s.element).ok_or(CrystalError::UnknownElement(s.element))?;
    }
    Ok(total * AMU_GRAMS / (c.volume() * CUBIC_ANGSTROM_CM3))
}

/// Sum of oxidation states over all sites.
pub fn net_charge(c: &Crystal) -> i64 {
    c.sites.iter().map(|s| s.oxidation_state as i64).sum()
}
