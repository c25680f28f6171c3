use sha2::{Digest, Sha256};

use super::{wrap_frac, Crystal, CrystalError};

pub const DEFAULT_SITE_TOL: f64 = 1e-2;
pub const DEFAULT_PARAM_TOL: f64 = 1e-2;

/// Deterministic structure hash used for uniqueness and novelty.
///
/// Built from the Niggli-reduced lattice (log-quantized at `param_tol`), the
/// composition and the sorted quantized sites. Translation is removed by
/// trying every site of the lowest atomic number as the origin and keeping
/// the lexicographically smallest site list.
pub fn canonical_fingerprint(c: &Crystal, site_tol: f64, param_tol: f64) -> Result<String, CrystalError> {
    let reduced = c.niggli_reduced()?;
    let log_step = (1.0 + param_tol).ln();
    let lattice: Vec<i64> = reduced.lattice.to_array().iter().map(|v| (v.ln() / log_step).round() as i64).collect();

    let bins = (1.0 / site_tol).round().max(1.0) as i64;
    let quant = |f: f64| (f / site_tol).round() as i64 % bins;

    let mut composition: Vec<(u8, i8)> = reduced.sites.iter().map(|s| (s.element, s.oxidation_state)).collect();
    composition.sort_unstable();

    let anchor_element = composition[0].0;
    let mut best: Option<Vec<(u8, i8, [i64; 3])>> = None;
    for anchor in reduced.sites.iter().filter(|s| s.element == anchor_element) {
        let mut sites: Vec<(u8, i8, [i64; 3])> = reduced
            .sites
            .iter()
            .map(|s| {
                let q = [0, 1, 2].map(|k| quant(wrap_frac(s.frac[k] - anchor.frac[k])));
                (s.element, s.oxidation_state, q)
            })
            .collect();
        sites.sort_unstable();
        if best.as_ref().is_none_or(|b| sites < *b) {
            best = Some(sites);
        }
    }

    let mut text = format!("L{lattice:?}|C{composition:?}|S");
    for (z, ox, q) in best.unwrap_or_default() {
        text.push_str(&format!("{z}:{ox}:{}:{}:{};", q[0], q[1], q[2]));
    }
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// [`canonical_fingerprint`] with the default tolerances.
pub fn fingerprint(c: &Crystal) -> Result<String, CrystalError> {
    canonical_fingerprint(c, DEFAULT_SITE_TOL, DEFAULT_PARAM_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{LatticeParams, Site};

    fn rocksalt(cation: u8) -> Crystal {
        Crystal::new(
            LatticeParams::new(4.1, 4.3, 4.6, 88.0, 91.0, 93.0).unwrap(),
            vec![
                Site::new(cation, 1, [0.0, 0.0, 0.0]),
                Site::new(17, -1, [0.5, 0.5, 0.5]),
                Site::new(cation, 1, [0.5, 0.5, 0.0]),
                Site::new(17, -1, [0.0, 0.0, 0.5]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn permutation_invariant() {
        let c = rocksalt(11);
        let mut p = c.clone();
        p.sites.reverse();
        assert_eq!(fingerprint(&c).unwrap(), fingerprint(&p).unwrap());
    }

    #[test]
    fn absorbs_sub_tolerance_noise() {
        let c = rocksalt(11);
        let mut n = c.clone();
        for (i, s) in n.sites.iter_mut().enumerate() {
            s.frac[i % 3] = wrap_frac(s.frac[i % 3] + 1e-6);
        }
        assert_eq!(canonical_fingerprint(&c, 1e-3, 1e-2).unwrap(), canonical_fingerprint(&n, 1e-3, 1e-2).unwrap());
    }

    #[test]
    fn translation_invariant() {
        let c = rocksalt(11);
        let mut t = c.clone();
        for s in &mut t.sites {
            s.frac = [wrap_frac(s.frac[0] + 0.25), wrap_frac(s.frac[1] + 0.1), s.frac[2]];
        }
        assert_eq!(fingerprint(&c).unwrap(), fingerprint(&t).unwrap());
    }

    #[test]
    fn composition_changes_hash() {
        assert_ne!(fingerprint(&rocksalt(11)).unwrap(), fingerprint(&rocksalt(19)).unwrap());
    }
}
