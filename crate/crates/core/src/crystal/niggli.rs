//! Niggli reduction of a lattice basis.
//!
//! Follows the Křivý–Gruber step sequence (A1–A8) with the epsilon-guarded
//! comparisons of Grosse-Kunstleve, Sauter & Adams (2004). Every step is an
//! integer unimodular change of basis applied directly to the cell vectors,
//! so the accumulated transform can be used to re-express site coordinates.

use nalgebra::{Matrix3, Vector3};

use super::lattice::{lattice_matrix, LatticeMatrix, LatticeParams};
use super::CrystalError;

pub const DEFAULT_MAX_STEPS: usize = 1000;
/// Relative tolerance; scaled by V^(2/3) to get an absolute epsilon on G6 entries.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// A reduced cell plus the integer transform `t` with `reduced_rows = t · input_rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct NiggliReduction {
    pub params: LatticeParams,
    pub matrix: LatticeMatrix,
    pub transform: Matrix3<i64>,
}

fn g6(rows: &[Vector3<f64>; 3]) -> [f64; 6] {
    let [a, b, c] = rows;
    [a.dot(a), b.dot(b), c.dot(c), 2.0 * b.dot(c), 2.0 * a.dot(c), 2.0 * a.dot(b)]
}

fn sign_with_eps(x: f64, eps: f64) -> i8 {
    if x > eps {
        1
    } else if x < -eps {
        -1
    } else {
        0
    }
}

struct Reducer {
    rows: [Vector3<f64>; 3],
    t: Matrix3<i64>,
}

impl Reducer {
    /// new_rows = m · rows
    fn apply(&mut self, m: Matrix3<i64>) {
        let old = self.rows;
        for i in 0..3 {
            self.rows[i] = old[0] * m[(i, 0)] as f64 + old[1] * m[(i, 1)] as f64 + old[2] * m[(i, 2)] as f64;
        }
        self.t = m * self.t;
    }
}

pub fn niggli_reduce(p: &LatticeParams) -> Result<LatticeParams, CrystalError> {
    Ok(niggli_reduce_matrix(&lattice_matrix(p)?, DEFAULT_TOLERANCE, DEFAULT_MAX_STEPS)?.params)
}

pub fn niggli_reduce_matrix(
    m: &LatticeMatrix,
    tolerance: f64,
    max_steps: usize,
) -> Result<NiggliReduction, CrystalError> {
    let volume = m.volume();
    if !(volume > 0.0) || !volume.is_finite() {
        return Err(CrystalError::DegenerateCell);
    }
    let eps = tolerance * volume.powf(2.0 / 3.0);
    let mut r = Reducer { rows: [m.row(0), m.row(1), m.row(2)], t: Matrix3::identity() };

    let mut steps = 0usize;
    'outer: loop {
        steps += 1;
        if steps > max_steps {
            return Err(CrystalError::NonConvergence { steps: max_steps });
        }
        let [a, b, c, xi, eta, zeta] = g6(&r.rows);

        // A1
        if a > b + eps || ((a - b).abs() <= eps && xi.abs() > eta.abs() + eps) {
            r.apply(Matrix3::new(0, -1, 0, -1, 0, 0, 0, 0, -1));
            continue;
        }
        // A2
        if b > c + eps || ((b - c).abs() <= eps && eta.abs() > zeta.abs() + eps) {
            r.apply(Matrix3::new(-1, 0, 0, 0, 0, -1, 0, -1, 0));
            continue;
        }
        let (l, mm, n) = (sign_with_eps(xi, eps), sign_with_eps(eta, eps), sign_with_eps(zeta, eps));
        if l * mm * n == 1 {
            // A3: make all three angles acute
            let f = |s: i8| if s == -1 { -1 } else { 1 };
            let d = Matrix3::from_diagonal(&Vector3::new(f(l), f(mm), f(n)));
            if d != Matrix3::identity() {
                r.apply(d);
            }
        } else {
            // A4: make all three angles obtuse (or right)
            let mut s = [1i64, 1, 1];
            let mut zero_slot = None;
            for (k, sign) in [l, mm, n].into_iter().enumerate() {
                match sign {
                    1 => s[k] = -1,
                    0 => zero_slot = Some(k),
                    _ => {}
                }
            }
            if s[0] * s[1] * s[2] < 0 {
                match zero_slot {
                    Some(k) => s[k] = -1,
                    None => return Err(CrystalError::NonConvergence { steps }),
                }
            }
            let d = Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
            if d != Matrix3::identity() {
                r.apply(d);
            }
        }
        let [a, b, _c, xi, eta, zeta] = g6(&r.rows);
        let sgn = |x: f64| if x > 0.0 { 1i64 } else { -1 };

        // A5
        if xi.abs() > b + eps || ((xi - b).abs() <= eps && 2.0 * eta < zeta - eps) || ((xi + b).abs() <= eps && zeta < -eps)
        {
            r.apply(Matrix3::new(1, 0, 0, 0, 1, 0, 0, -sgn(xi), 1));
            continue 'outer;
        }
        // A6
        if eta.abs() > a + eps || ((eta - a).abs() <= eps && 2.0 * xi < zeta - eps) || ((eta + a).abs() <= eps && zeta < -eps)
        {
            r.apply(Matrix3::new(1, 0, 0, 0, 1, 0, -sgn(eta), 0, 1));
            continue 'outer;
        }
        // A7
        if zeta.abs() > a + eps || ((zeta - a).abs() <= eps && 2.0 * xi < eta - eps) || ((zeta + a).abs() <= eps && eta < -eps)
        {
            r.apply(Matrix3::new(1, 0, 0, -sgn(zeta), 1, 0, 0, 0, 1));
            continue 'outer;
        }
        // A8
        let s = xi + eta + zeta + a + b;
        if s < -eps || (s.abs() <= eps && 2.0 * (a + eta) + zeta > eps) {
            r.apply(Matrix3::new(1, 0, 0, 0, 1, 0, 1, 1, 1));
            continue 'outer;
        }
        break;
    }

    let matrix = LatticeMatrix(Matrix3::from_rows(&[r.rows[0].transpose(), r.rows[1].transpose(), r.rows[2].transpose()]));
    Ok(NiggliReduction { params: matrix.params(), matrix, transform: r.t })
}

/// Checks the Niggli main and special conditions on a parameter set.
pub fn is_niggli_reduced(p: &LatticeParams, tolerance: f64) -> bool {
    let [a, b, c, xi, eta, zeta] = p.g6();
    let eps = tolerance * p.volume().powf(2.0 / 3.0);
    let eq = |x: f64, y: f64| (x - y).abs() <= eps;
    if a > b + eps || b > c + eps {
        return false;
    }
    let all_pos = xi > eps && eta > eps && zeta > eps;
    let all_nonpos = xi <= eps && eta <= eps && zeta <= eps;
    if !(all_pos || all_nonpos) {
        return false;
    }
    if xi.abs() > b + eps || eta.abs() > a + eps || zeta.abs() > a + eps {
        return false;
    }
    let s = xi + eta + zeta + a + b;
    if s < -eps {
        return false;
    }
    // special conditions
    if eq(a, b) && xi.abs() > eta.abs() + eps {
        return false;
    }
    if eq(b, c) && eta.abs() > zeta.abs() + eps {
        return false;
    }
    if all_pos {
        if eq(xi, b) && zeta > 2.0 * eta + eps {
            return false;
        }
        if eq(eta, a) && zeta > 2.0 * xi + eps {
            return false;
        }
        if eq(zeta, a) && eta > 2.0 * xi + eps {
            return false;
        }
    } else {
        if eq(xi, -b) && zeta.abs() > eps {
            return false;
        }
        if eq(eta, -a) && zeta.abs() > eps {
            return false;
        }
        if eq(zeta, -a) && eta.abs() > eps {
            return false;
        }
        if s.abs() <= eps && 2.0 * (a + eta) + zeta > eps {
            return false;
        }
    }
    true
}
