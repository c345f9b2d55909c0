//! Polynomial mean-function basis `g(x)` and the effect-hierarchy prior
//! correlation `R = diag(r^order)`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One monomial, stored as per-dimension exponents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub exponents: Vec<u32>,
}

impl Term {
    /// Total degree of the monomial.
    pub fn order(&self) -> u32 {
        self.exponents.iter().sum()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(x)
            .filter(|(e, _)| **e > 0)
            .map(|(&e, &v)| v.powi(e as i32))
            .product()
    }
}

impl fmt::Display for Term {
    /// `"1"`, `"x1"`, `"x2^2"`, `"x1*x4"` (dimensions are 1-based).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let factors: Vec<String> = self
            .exponents
            .iter()
            .enumerate()
            .filter(|(_, e)| **e > 0)
            .map(|(j, &e)| if e == 1 { format!("x{}", j + 1) } else { format!("x{}^{e}", j + 1) })
            .collect();
        if factors.is_empty() {
            write!(f, "1")
        } else {
            write!(f, "{}", factors.join("*"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub d: usize,
    pub degree: u32,
    pub terms: Vec<Term>,
    pub active_mask: Vec<bool>,
}

impl BasisSpec {
    /// Number of active terms (columns of `G`).
    pub fn p(&self) -> usize {
        self.active_mask.iter().filter(|a| **a).count()
    }

    pub fn active_terms(&self) -> impl Iterator<Item = &Term> {
        self.terms.iter().zip(&self.active_mask).filter(|(_, a)| **a).map(|(t, _)| t)
    }

    pub fn active_labels(&self) -> Vec<String> {
        self.active_terms().map(|t| t.to_string()).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.to_string()).collect()
    }

    /// Copy of the spec with a new activity mask; the intercept always stays.
    pub fn with_mask(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.terms.len() {
            return invalid(format!(
                "mask has {} entries but the basis has {} terms",
                mask.len(),
                self.terms.len()
            ));
        }
        let mut spec = self.clone();
        spec.active_mask = mask.to_vec();
        spec.active_mask[0] = true;
        Ok(spec)
    }
}

/// Canonical ordering is graded lexicographic: intercept, linears by index,
/// then the order-2 monomials `x_i x_j` (`i <= j`) in lexicographic order,
/// e.g. `1, x1, x2, x1^2, x1*x2, x2^2` for `d = 2`.
pub fn build_basis(d: usize, degree: u32) -> Result<BasisSpec> {
    if degree > 2 {
        return invalid(format!("unsupported basis degree {degree}; use 0, 1 or 2"));
    }
    if d == 0 {
        return invalid("basis dimension must be >= 1");
    }
    let unit = |j: usize, e: u32| {
        let mut exponents = vec![0; d];
        exponents[j] = e;
        Term { exponents }
    };
    let mut terms = vec![Term { exponents: vec![0; d] }];
    if degree >= 1 {
        terms.extend((0..d).map(|j| unit(j, 1)));
    }
    if degree >= 2 {
        for i in 0..d {
            terms.push(unit(i, 2));
            for j in (i + 1)..d {
                let mut exponents = vec![0; d];
                exponents[i] = 1;
                exponents[j] = 1;
                terms.push(Term { exponents });
            }
        }
    }
    let active_mask = vec![true; terms.len()];
    Ok(BasisSpec { d, degree, terms, active_mask })
}

/// Active-term values at `x`.
pub fn eval_basis(spec: &BasisSpec, x: &[f64]) -> Result<DVector<f64>> {
    if x.len() != spec.d {
        return invalid(format!("basis expects dimension {}, got {}", spec.d, x.len()));
    }
    Ok(DVector::from_iterator(spec.p(), spec.active_terms().map(|t| t.eval(x))))
}

/// `G` with row `i` equal to `g(x_i)^T`.
pub fn design_matrix(spec: &BasisSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != spec.d {
        return invalid(format!("basis expects dimension {}, got {}", spec.d, x.ncols()));
    }
    let p = spec.p();
    let mut g = DMatrix::zeros(x.nrows(), p);
    let mut row = vec![0.0; spec.d];
    for i in 0..x.nrows() {
        row.iter_mut().enumerate().for_each(|(j, v)| *v = x[(i, j)]);
        for (t, term) in spec.active_terms().enumerate() {
            g[(i, t)] = term.eval(&row);
        }
    }
    Ok(g)
}

/// Diagonal prior correlation, entry `r^order` per active term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyR {
    pub r: f64,
    pub diag: Vec<f64>,
}

pub fn hierarchy_r(spec: &BasisSpec, r: f64) -> Result<HierarchyR> {
    if !(r > 0.0 && r < 1.0) {
        return invalid(format!("hierarchy ratio r must lie in (0, 1), got {r}"));
    }
    let diag = spec.active_terms().map(|t| r.powi(t.order() as i32)).collect();
    Ok(HierarchyR { r, diag })
}
