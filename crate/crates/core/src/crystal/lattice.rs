use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::CrystalError;

/// Six-parameter cell description: edge lengths in Å, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Gram determinant of the unit-length cell spanned by three angles.
fn angle_gram_det(alpha: f64, beta: f64, gamma: f64) -> f64 {
    let (ca, cb, cg) = (alpha.to_radians().cos(), beta.to_radians().cos(), gamma.to_radians().cos());
    1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg
}

impl LatticeParams {
    pub fn new(a: f64, b: f64, c: f64, alpha: f64, beta: f64, gamma: f64) -> Result<Self, CrystalError> {
        let p = Self { a, b, c, alpha, beta, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn cubic(a: f64) -> Self {
        Self { a, b: a, c: a, alpha: 90.0, beta: 90.0, gamma: 90.0 }
    }

    pub fn from_array(v: [f64; 6]) -> Result<Self, CrystalError> {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.alpha, self.beta, self.gamma]
    }

    pub fn validate(&self) -> Result<(), CrystalError> {
        let v = self.to_array();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CrystalError::InvalidLattice("non-finite parameter".into()));
        }
        if self.a <= 0.0 || self.b <= 0.0 || self.c <= 0.0 {
            return Err(CrystalError::InvalidLattice("edge lengths must be positive".into()));
        }
        if v[3..].iter().any(|&ang| ang <= 0.0 || ang >= 180.0) {
            return Err(CrystalError::InvalidLattice("angles must lie strictly between 0 and 180 degrees".into()));
        }
        if angle_gram_det(self.alpha, self.beta, self.gamma) <= 0.0 {
            return Err(CrystalError::DegenerateCell);
        }
        Ok(())
    }

    /// Closed-form cell volume, a·b·c·√(1 − cos²α − cos²β − cos²γ + 2 cosα cosβ cosγ).
    pub fn volume(&self) -> f64 {
        self.a * self.b * self.c * angle_gram_det(self.alpha, self.beta, self.gamma).max(0.0).sqrt()
    }

    /// Metric in G6 form (A, B, C, ξ, η, ζ) = (a², b², c², 2bc cosα, 2ac cosβ, 2ab cosγ).
    pub fn g6(&self) -> [f64; 6] {
        let (ca, cb, cg) = (self.alpha.to_radians().cos(), self.beta.to_radians().cos(), self.gamma.to_radians().cos());
        [
            self.a * self.a,
            self.b * self.b,
            self.c * self.c,
            2.0 * self.b * self.c * ca,
            2.0 * self.a * self.c * cb,
            2.0 * self.a * self.b * cg,
        ]
    }
}

/// Cell vectors as matrix rows (row i is lattice vector i), in Å.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeMatrix(pub Matrix3<f64>);

/// Builds the cell matrix with l1 along x and l2 in the xy-plane.
pub fn lattice_matrix(p: &LatticeParams) -> Result<LatticeMatrix, CrystalError> {
    p.validate()?;
    let (ca, cb, cg) = (p.alpha.to_radians().cos(), p.beta.to_radians().cos(), p.gamma.to_radians().cos());
    let sg = p.gamma.to_radians().sin();
    let cy = (ca - cb * cg) / sg;
    let cz2 = 1.0 - cb * cb - cy * cy;
    if cz2 <= 0.0 {
        return Err(CrystalError::DegenerateCell);
    }
    Ok(LatticeMatrix(Matrix3::new(
        p.a,
        0.0,
        0.0,
        p.b * cg,
        p.b * sg,
        0.0,
        p.c * cb,
        p.c * cy,
        p.c * cz2.sqrt(),
    )))
}

/// |det(m)| in Å³.
pub fn cell_volume(m: &LatticeMatrix) -> f64 {
    m.0.determinant().abs()
}

/// r_cart = Σ fᵢ·lᵢ.
pub fn frac_to_cart(m: &LatticeMatrix, frac: [f64; 3]) -> [f64; 3] {
    let r = m.0.transpose() * Vector3::from(frac);
    [r.x, r.y, r.z]
}

impl LatticeMatrix {
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        Self(Matrix3::from_row_slice(&[
            rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0], rows[2][1], rows[2][2],
        ]))
    }

    pub fn row(&self, i: usize) -> Vector3<f64> {
        self.0.row(i).transpose()
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// Recovers lengths and pairwise angles from the rows.
    pub fn params(&self) -> LatticeParams {
        let (l1, l2, l3) = (self.row(0), self.row(1), self.row(2));
        let (a, b, c) = (l1.norm(), l2.norm(), l3.norm());
        let angle = |u: &Vector3<f64>, v: &Vector3<f64>, nu: f64, nv: f64| {
            (u.dot(v) / (nu * nv)).clamp(-1.0, 1.0).acos().to_degrees()
        };
        LatticeParams {
            a,
            b,
            c,
            alpha: angle(&l2, &l3, b, c),
            beta: angle(&l1, &l3, a, c),
            gamma: angle(&l1, &l2, a, b),
        }
    }

    pub fn volume(&self) -> f64 {
        cell_volume(self)
    }

    pub fn frac_to_cart(&self, frac: [f64; 3]) -> [f64; 3] {
        frac_to_cart(self, frac)
    }
}
