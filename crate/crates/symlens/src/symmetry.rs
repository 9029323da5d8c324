//! Exact group machinery: the dihedral group D4 and the discrete translation
//! torus Z_N × Z_N, acting on [`Field`]s.
//!
//! Conventions (fixed once, used everywhere):
//! - `r` is the quarter rotation with index map `out[i,j] = in[j, N−1−i]`.
//! - `s` is the flip about the vertical axis, `out[i,j] = in[i, N−1−j]`.
//! - `sr` means "apply `r` first, then `s`".
//! - `T(a,b)` shifts x by `a` columns and y by `b` rows, periodically.
//!
//! Velocity channels transform with the Jacobian of the index map, so that
//! every action commutes with the reference solver: under `r`,
//! `(v_x, v_y) → (v_y, −v_x)`; under `s`, `(v_x, v_y) → (−v_x, v_y)`;
//! translations leave components unchanged. All actions are signed
//! permutations of the field entries and therefore exact isometries.

use crate::error::Error;
use crate::field::{Field, RHO, VX, VY};
use crate::scalar::Scalar;
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum D4Element {
    E,
    R,
    R2,
    R3,
    S,
    SR,
    SR2,
    SR3,
}

impl D4Element {
    /// All eight elements in Cayley order.
    pub const ALL: [D4Element; 8] = [
        D4Element::E,
        D4Element::R,
        D4Element::R2,
        D4Element::R3,
        D4Element::S,
        D4Element::SR,
        D4Element::SR2,
        D4Element::SR3,
    ];

    /// Decompose as s^a · r^k (apply r k times, then s if a).
    fn factors(self) -> (bool, u8) {
        match self {
            D4Element::E => (false, 0),
            D4Element::R => (false, 1),
            D4Element::R2 => (false, 2),
            D4Element::R3 => (false, 3),
            D4Element::S => (true, 0),
            D4Element::SR => (true, 1),
            D4Element::SR2 => (true, 2),
            D4Element::SR3 => (true, 3),
        }
    }

    fn from_factors(s: bool, k: u8) -> Self {
        match (s, k % 4) {
            (false, 0) => D4Element::E,
            (false, 1) => D4Element::R,
            (false, 2) => D4Element::R2,
            (false, 3) => D4Element::R3,
            (true, 0) => D4Element::S,
            (true, 1) => D4Element::SR,
            (true, 2) => D4Element::SR2,
            (true, 3) => D4Element::SR3,
            _ => unreachable!(),
        }
    }

    /// Group product g·h ("apply h first, then g").
    pub fn compose(self, h: D4Element) -> D4Element {
        let (sa, ka) = self.factors();
        let (sb, kb) = h.factors();
        // s^sa r^ka · s^sb r^kb, using r^k s = s r^(4−k).
        if sb {
            D4Element::from_factors(!sa, (4 + kb - ka) % 4)
        } else {
            D4Element::from_factors(sa, (ka + kb) % 4)
        }
    }

    pub fn inverse(self) -> D4Element {
        let (s, k) = self.factors();
        if s {
            D4Element::from_factors(true, k)
        } else {
            D4Element::from_factors(false, (4 - k) % 4)
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            D4Element::E => "e",
            D4Element::R => "r",
            D4Element::R2 => "r2",
            D4Element::R3 => "r3",
            D4Element::S => "s",
            D4Element::SR => "sr",
            D4Element::SR2 => "sr2",
            D4Element::SR3 => "sr3",
        }
    }
}

/// A translation of the periodic N×N grid by `a` columns and `b` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TranslationElement {
    pub a: usize,
    pub b: usize,
    pub n: usize,
}

impl TranslationElement {
    pub fn new(a: usize, b: usize, n: usize) -> Result<Self> {
        if n == 0 || a >= n || b >= n {
            return Err(Error::config(format!(
                "translation ({a},{b}) out of range for grid {n}"
            )));
        }
        Ok(TranslationElement { a, b, n })
    }

    pub fn compose(self, other: TranslationElement) -> Result<TranslationElement> {
        if self.n != other.n {
            return Err(Error::Group(format!(
                "cannot compose translations on different grids ({} vs {})",
                self.n, other.n
            )));
        }
        Ok(TranslationElement {
            a: (self.a + other.a) % self.n,
            b: (self.b + other.b) % self.n,
            n: self.n,
        })
    }

    pub fn inverse(self) -> TranslationElement {
        TranslationElement {
            a: (self.n - self.a) % self.n,
            b: (self.n - self.b) % self.n,
            n: self.n,
        }
    }
}

/// A group element acting on fields; D4 and translations are kept separate
/// (no semidirect products).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupElement {
    D4(D4Element),
    Translate(TranslationElement),
}

impl GroupElement {
    pub fn identity_like(&self) -> bool {
        match self {
            GroupElement::D4(g) => *g == D4Element::E,
            GroupElement::Translate(t) => t.a == 0 && t.b == 0,
        }
    }

    pub fn compose(self, other: GroupElement) -> Result<GroupElement> {
        match (self, other) {
            (GroupElement::D4(g), GroupElement::D4(h)) => Ok(GroupElement::D4(g.compose(h))),
            (GroupElement::Translate(g), GroupElement::Translate(h)) => {
                Ok(GroupElement::Translate(g.compose(h)?))
            }
            _ => Err(Error::Group(
                "cannot compose a D4 element with a translation".into(),
            )),
        }
    }

    pub fn inverse(self) -> GroupElement {
        match self {
            GroupElement::D4(g) => GroupElement::D4(g.inverse()),
            GroupElement::Translate(t) => GroupElement::Translate(t.inverse()),
        }
    }

    /// Serialized name: "e", "r", ..., "sr3", or "T(a,b)".
    pub fn name(&self) -> String {
        match self {
            GroupElement::D4(g) => g.name().to_string(),
            GroupElement::Translate(t) => format!("T({},{})", t.a, t.b),
        }
    }
}

impl std::fmt::Display for GroupElement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// One quarter rotation: out[i,j] = in[j, N−1−i], (v_x, v_y) → (v_y, −v_x).
fn rotate_once<T: Scalar>(x: &Field<T>) -> Field<T> {
    let n = x.n();
    let mut out = Field::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let (si, sj) = (j, n - 1 - i);
            out.set(RHO, i, j, x.get(RHO, si, sj));
            out.set(VX, i, j, x.get(VY, si, sj));
            out.set(VY, i, j, -x.get(VX, si, sj));
        }
    }
    out
}

/// Vertical-axis flip: out[i,j] = in[i, N−1−j], v_x → −v_x.
fn flip_once<T: Scalar>(x: &Field<T>) -> Field<T> {
    let n = x.n();
    let mut out = Field::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let sj = n - 1 - j;
            out.set(RHO, i, j, x.get(RHO, i, sj));
            out.set(VX, i, j, -x.get(VX, i, sj));
            out.set(VY, i, j, x.get(VY, i, sj));
        }
    }
    out
}

fn translate<T: Scalar>(x: &Field<T>, a: usize, b: usize) -> Field<T> {
    let n = x.n();
    let mut out = Field::zeros(n);
    for c in 0..crate::field::CHANNELS {
        for i in 0..n {
            let si = (i + n - b) % n;
            for j in 0..n {
                let sj = (j + n - a) % n;
                out.set(c, i, j, x.get(c, si, sj));
            }
        }
    }
    out
}

/// Apply a group element to a field, with the scalar/vector channel rules.
pub fn apply<T: Scalar>(g: GroupElement, x: &Field<T>) -> Result<Field<T>> {
    match g {
        GroupElement::D4(d) => {
            let (s, k) = d.factors();
            let mut cur = x.clone();
            for _ in 0..k {
                cur = rotate_once(&cur);
            }
            if s {
                cur = flip_once(&cur);
            }
            Ok(cur)
        }
        GroupElement::Translate(t) => {
            if t.n != x.n() {
                return Err(Error::shape(format!(
                    "translation on grid {} applied to field of size {}",
                    t.n,
                    x.n()
                )));
            }
            Ok(translate(x, t.a, t.b))
        }
    }
}

/// Group-orbit specification for sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrbitSpec {
    /// All eight dihedral elements in Cayley order.
    D4,
    /// Horizontal translations T(a, 0), a in steps of `stride`.
    TranslateH { stride: usize },
    /// Vertical translations T(0, b).
    TranslateV { stride: usize },
    /// The strided 2D translation lattice, lexicographic in (a, b).
    TranslateGrid { stride: usize },
}

impl OrbitSpec {
    pub fn key(&self) -> &'static str {
        match self {
            OrbitSpec::D4 => "d4",
            OrbitSpec::TranslateH { .. } => "th",
            OrbitSpec::TranslateV { .. } => "tv",
            OrbitSpec::TranslateGrid { .. } => "grid",
        }
    }
}

/// Enumerate the elements of an orbit spec on an N×N grid, in the fixed
/// deterministic order used by all reports.
pub fn orbit_elements(spec: OrbitSpec, n: usize) -> Result<Vec<GroupElement>> {
    let check_stride = |stride: usize| -> Result<usize> {
        if stride == 0 || n % stride != 0 {
            Err(Error::config(format!(
                "stride {stride} does not divide grid size {n}"
            )))
        } else {
            Ok(stride)
        }
    };
    match spec {
        OrbitSpec::D4 => Ok(D4Element::ALL.iter().map(|&g| GroupElement::D4(g)).collect()),
        OrbitSpec::TranslateH { stride } => {
            let s = check_stride(stride)?;
            (0..n)
                .step_by(s)
                .map(|a| Ok(GroupElement::Translate(TranslationElement::new(a, 0, n)?)))
                .collect()
        }
        OrbitSpec::TranslateV { stride } => {
            let s = check_stride(stride)?;
            (0..n)
                .step_by(s)
                .map(|b| Ok(GroupElement::Translate(TranslationElement::new(0, b, n)?)))
                .collect()
        }
        OrbitSpec::TranslateGrid { stride } => {
            let s = check_stride(stride)?;
            let mut out = Vec::new();
            for a in (0..n).step_by(s) {
                for b in (0..n).step_by(s) {
                    out.push(GroupElement::Translate(TranslationElement::new(a, b, n)?));
                }
            }
            Ok(out)
        }
    }
}

/// The orbit of a field under a spec: (element, transformed field) pairs.
pub fn orbit<T: Scalar>(x: &Field<T>, spec: OrbitSpec) -> Result<Vec<(GroupElement, Field<T>)>> {
    orbit_elements(spec, x.n())?
        .into_iter()
        .map(|g| Ok((g, apply(g, x)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::CHANNELS;
    use rand::Rng;

    fn random_field(n: usize, seed: u64) -> Field<f64> {
        let mut rng = crate::rng::stream(seed, 99);
        let mut f = Field::zeros(n);
        for v in f.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        f
    }

    #[test]
    fn identity_is_identity() {
        let x = random_field(6, 1);
        let y = apply(GroupElement::D4(D4Element::E), &x).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn r_four_times_is_identity_exactly() {
        let x = random_field(7, 2);
        let mut y = x.clone();
        for _ in 0..4 {
            y = apply(GroupElement::D4(D4Element::R), &y).unwrap();
        }
        assert_eq!(x, y);
    }

    #[test]
    fn hand_oracle_2x2_rotation() {
        // v = (1, 0) at (i=0, j=0); under r the value lands at (i=1, j=0)
        // and the vector becomes (0, −1) (Jacobian of the index map).
        let mut x = Field::<f64>::zeros(2);
        x.set(VX, 0, 0, 1.0);
        let y = apply(GroupElement::D4(D4Element::R), &x).unwrap();
        assert_eq!(y.get(VX, 1, 0), 0.0);
        assert_eq!(y.get(VY, 1, 0), -1.0);
        // every other cell stays zero
        let nonzero: usize = y.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn full_cayley_table_matches_action_composition() {
        let x = random_field(5, 3);
        for &g in &D4Element::ALL {
            for &h in &D4Element::ALL {
                let via_table = apply(GroupElement::D4(g.compose(h)), &x).unwrap();
                let via_seq =
                    apply(GroupElement::D4(g), &apply(GroupElement::D4(h), &x).unwrap()).unwrap();
                assert_eq!(via_table, via_seq, "g={} h={}", g.name(), h.name());
            }
        }
    }

    #[test]
    fn cayley_table_spot_values() {
        use D4Element::*;
        assert_eq!(R.compose(R3), E);
        assert_eq!(S.compose(R), SR);
        assert_eq!(S.compose(S), E);
        // s·r·s = r³
        assert_eq!(S.compose(R).compose(S), R3);
        for &g in &D4Element::ALL {
            assert_eq!(g.compose(g.inverse()), E);
        }
    }

    #[test]
    fn translation_compose_mod_n() {
        let g = TranslationElement::new(3, 5, 32).unwrap();
        let h = TranslationElement::new(30, 29, 32).unwrap();
        let gh = g.compose(h).unwrap();
        assert_eq!((gh.a, gh.b), (1, 2));
        let inv = g.inverse();
        assert_eq!((inv.a, inv.b), (29, 27));
    }

    #[test]
    fn compose_matches_sequential_application() {
        let x = random_field(8, 4);
        let g = GroupElement::Translate(TranslationElement::new(3, 6, 8).unwrap());
        let h = GroupElement::Translate(TranslationElement::new(7, 5, 8).unwrap());
        let via_compose = apply(g.compose(h).unwrap(), &x).unwrap();
        let via_seq = apply(g, &apply(h, &x).unwrap()).unwrap();
        assert_eq!(via_compose, via_seq);
    }

    #[test]
    fn mixing_groups_is_an_error() {
        let g = GroupElement::D4(D4Element::R);
        let h = GroupElement::Translate(TranslationElement::new(1, 0, 4).unwrap());
        assert!(g.compose(h).is_err());
    }

    #[test]
    fn actions_are_exact_isometries() {
        let x = random_field(9, 5);
        let n0 = x.norm();
        for &g in &D4Element::ALL {
            let y = apply(GroupElement::D4(g), &x).unwrap();
            assert!((y.norm() - n0).abs() <= 1e-15 * n0);
        }
        let t = GroupElement::Translate(TranslationElement::new(4, 7, 9).unwrap());
        let y = apply(t, &x).unwrap();
        assert!((y.norm() - n0).abs() <= 1e-15 * n0);
    }

    #[test]
    fn orbit_counts_and_order() {
        let x = random_field(32, 6);
        let d4 = orbit(&x, OrbitSpec::D4).unwrap();
        assert_eq!(d4.len(), 8);
        assert_eq!(d4[0].0.name(), "e");
        assert_eq!(d4[5].0.name(), "sr");

        let th = orbit_elements(OrbitSpec::TranslateH { stride: 4 }, 32).unwrap();
        assert_eq!(th.len(), 8);
        assert_eq!(th[1].name(), "T(4,0)");

        let grid = orbit_elements(OrbitSpec::TranslateGrid { stride: 8 }, 32).unwrap();
        assert_eq!(grid.len(), 16);
        assert_eq!(grid[1].name(), "T(0,8)"); // lexicographic in (a, b)
        assert_eq!(grid[4].name(), "T(8,0)");

        assert!(orbit_elements(OrbitSpec::TranslateH { stride: 5 }, 32).is_err());
    }

    #[test]
    fn orbit_entries_norm_equal() {
        // entries are permutations of x, so norms agree to summation-order
        // rounding
        let x = random_field(8, 7);
        let n0 = x.norm();
        for (_, y) in orbit(&x, OrbitSpec::TranslateGrid { stride: 4 }).unwrap() {
            assert!((y.norm() - n0).abs() <= 1e-15 * n0);
        }
    }

    #[test]
    fn translations_shift_by_columns_and_rows() {
        let mut x = Field::<f64>::zeros(4);
        for c in 0..CHANNELS {
            x.set(c, 1, 2, 1.0 + c as f64);
        }
        let g = GroupElement::Translate(TranslationElement::new(1, 2, 4).unwrap());
        let y = apply(g, &x).unwrap();
        for c in 0..CHANNELS {
            assert_eq!(y.get(c, 3, 3), 1.0 + c as f64);
        }
    }
}
