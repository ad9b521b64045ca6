//! Sparse multivariate polynomials stored as a power matrix plus a
//! coefficient vector, monomial enumeration and the JSON model file.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest per-variable exponent accepted by [`Polynomial::new`].
pub const MAX_EXPONENT: u8 = 10;

/// Number of monomials of total degree `<= degree` in `n_z` variables,
/// i.e. `binomial(n_z + degree, degree)`.
pub fn count_monomials(n_z: usize, degree: usize) -> Result<u64> {
    if n_z == 0 {
        return Err(Error::InvalidArgument("n_z must be at least 1".into()));
    }
    let overflow = || Error::MonomialCountOverflow { n_z, degree };
    // C(n_z + i, i) = C(n_z + i - 1, i - 1) * (n_z + i) / i, exact at every step.
    let mut acc: u128 = 1;
    for i in 1..=degree as u128 {
        let factor = (n_z as u128).checked_add(i).ok_or_else(overflow)?;
        acc = acc.checked_mul(factor).ok_or_else(overflow)? / i;
        if acc > u64::MAX as u128 {
            return Err(overflow());
        }
    }
    Ok(acc as u64)
}

/// Every monomial of total degree `<= degree` in `n_z` variables.
///
/// Rows are graded by total degree; within a degree they are sorted in
/// decreasing lexicographic order of the exponent tuple, so `z1` precedes
/// `z2` and `z1^2` precedes `z1 z2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonomialBasis {
    n_z: usize,
    degree: usize,
    powers: Vec<Vec<u8>>,
}

impl MonomialBasis {
    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn powers(&self) -> &[Vec<u8>] {
        &self.powers
    }

    pub fn len(&self) -> usize {
        self.powers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers.is_empty()
    }
}

pub fn enumerate_basis(n_z: usize, degree: usize) -> Result<MonomialBasis> {
    let count = count_monomials(n_z, degree)?;
    if degree > MAX_EXPONENT as usize {
        return Err(Error::InvalidArgument(format!(
            "degree {degree} exceeds the supported maximum {MAX_EXPONENT}"
        )));
    }
    let count = usize::try_from(count).map_err(|_| Error::MonomialCountOverflow { n_z, degree })?;
    let mut powers = Vec::with_capacity(count);
    let mut row = vec![0u8; n_z];
    for total in 0..=degree {
        push_compositions(&mut row, 0, total, &mut powers);
    }
    debug_assert_eq!(powers.len(), count);
    Ok(MonomialBasis {
        n_z,
        degree,
        powers,
    })
}

fn push_compositions(row: &mut [u8], col: usize, remaining: usize, out: &mut Vec<Vec<u8>>) {
    if col + 1 == row.len() {
        row[col] = remaining as u8;
        out.push(row.to_vec());
        row[col] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        row[col] = e as u8;
        push_compositions(row, col + 1, remaining - e, out);
    }
    row[col] = 0;
}

/// A polynomial `P(z) = sum_i c_i prod_j z_j^p_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    n_z: usize,
    powers: Vec<Vec<u8>>,
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(n_z: usize, powers: Vec<Vec<u8>>, coeffs: Vec<f64>) -> Result<Self> {
        if n_z == 0 {
            return Err(Error::InvalidArgument("n_z must be at least 1".into()));
        }
        if powers.len() != coeffs.len() {
            return Err(Error::DimensionMismatch {
                expected: powers.len(),
                got: coeffs.len(),
            });
        }
        let mut seen = HashSet::with_capacity(powers.len());
        for row in &powers {
            if row.len() != n_z {
                return Err(Error::DimensionMismatch {
                    expected: n_z,
                    got: row.len(),
                });
            }
            if let Some(&e) = row.iter().find(|&&e| e > MAX_EXPONENT) {
                return Err(Error::InvalidArgument(format!(
                    "exponent {e} exceeds the supported maximum {MAX_EXPONENT}"
                )));
            }
            if !seen.insert(row.as_slice()) {
                return Err(Error::InvalidArgument(format!("duplicate monomial {row:?}")));
            }
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("polynomial coefficients"));
        }
        Ok(Self {
            n_z,
            powers,
            coeffs,
        })
    }

    pub fn zero(n_z: usize) -> Self {
        Self {
            n_z: n_z.max(1),
            powers: Vec::new(),
            coeffs: Vec::new(),
        }
    }

    /// Polynomial over a full basis; coefficient `i` multiplies basis row `i`.
    pub fn from_basis(basis: &MonomialBasis, coeffs: Vec<f64>) -> Result<Self> {
        Self::new(basis.n_z, basis.powers.clone(), coeffs)
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn powers(&self) -> &[Vec<u8>] {
        &self.powers
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn n_terms(&self) -> usize {
        self.coeffs.len()
    }

    /// Same monomials with a different coefficient vector.
    pub fn with_coeffs(&self, coeffs: Vec<f64>) -> Result<Self> {
        Self::new(self.n_z, self.powers.clone(), coeffs)
    }

    pub fn nonzero_count(&self) -> usize {
        self.coeffs.iter().filter(|&&c| c != 0.0).count()
    }

    /// Total degree of the monomials that carry a nonzero coefficient.
    pub fn degree(&self) -> usize {
        self.powers
            .iter()
            .zip(&self.coeffs)
            .filter(|(_, &c)| c != 0.0)
            .map(|(row, _)| row.iter().map(|&e| e as usize).sum::<usize>())
            .max()
            .unwrap_or(0)
    }

    /// Largest exponent of variable `var` among nonzero terms.
    pub fn max_exponent(&self, var: usize) -> u8 {
        self.powers
            .iter()
            .zip(&self.coeffs)
            .filter(|(_, &c)| c != 0.0)
            .map(|(row, _)| row[var])
            .max()
            .unwrap_or(0)
    }

    pub fn evaluate(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.n_z {
            return Err(Error::DimensionMismatch {
                expected: self.n_z,
                got: z.len(),
            });
        }
        Ok(self.eval_unchecked(z))
    }

    pub(crate) fn eval_unchecked(&self, z: &[f64]) -> f64 {
        self.powers
            .iter()
            .zip(&self.coeffs)
            .map(|(row, &c)| c * monomial(row, z))
            .sum()
    }

    /// Row-wise evaluation of an `n_s x n_z` matrix.
    pub fn evaluate_batch(&self, z: &DMatrix<f64>) -> Result<Vec<f64>> {
        if z.nrows() > 0 && z.ncols() != self.n_z {
            return Err(Error::DimensionMismatch {
                expected: self.n_z,
                got: z.ncols(),
            });
        }
        let mut out = vec![0.0; z.nrows()];
        for (row, &c) in self.powers.iter().zip(&self.coeffs) {
            let col = monomial_column(row, z);
            for (o, v) in out.iter_mut().zip(col) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    /// Drops every term with `|c_i| <= tol`; surviving rows keep their order.
    pub fn prune(&self, tol: f64) -> Polynomial {
        let (powers, coeffs) = self
            .powers
            .iter()
            .zip(&self.coeffs)
            .filter(|(_, &c)| c.abs() > tol)
            .map(|(row, &c)| (row.clone(), c))
            .unzip();
        Polynomial {
            n_z: self.n_z,
            powers,
            coeffs,
        }
    }

    /// Human-readable form using the given variable names.
    pub fn display_with(&self, names: &[&str]) -> String {
        if self.coeffs.is_empty() {
            return "0".into();
        }
        let terms: Vec<String> = self
            .powers
            .iter()
            .zip(&self.coeffs)
            .map(|(row, c)| {
                let mono: Vec<String> = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &e)| e > 0)
                    .map(|(j, &e)| {
                        let name = names.get(j).copied().unwrap_or("z");
                        if e == 1 {
                            name.to_string()
                        } else {
                            format!("{name}^{e}")
                        }
                    })
                    .collect();
                if mono.is_empty() {
                    format!("{c:+e}")
                } else {
                    format!("{c:+e}*{}", mono.join("*"))
                }
            })
            .collect();
        terms.join(" ")
    }
}

/// `prod_j z_j^p_j` with `0^0 = 1`.
pub(crate) fn monomial(row: &[u8], z: &[f64]) -> f64 {
    row.iter()
        .zip(z)
        .filter(|(&e, _)| e > 0)
        .map(|(&e, &x)| x.powi(e as i32))
        .product()
}

/// Column of monomial values for every row of `z`.
pub(crate) fn monomial_column(row: &[u8], z: &DMatrix<f64>) -> Vec<f64> {
    let mut col = vec![1.0; z.nrows()];
    for (j, &e) in row.iter().enumerate() {
        if e == 0 {
            continue;
        }
        for (c, &x) in col.iter_mut().zip(z.column(j).iter()) {
            *c *= x.powi(e as i32);
        }
    }
    col
}

/// On-disk model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub n_z: usize,
    /// Model order: the polynomial gives `y^(n)`.
    pub n: usize,
    pub powers: Vec<Vec<u8>>,
    pub coeffs: Vec<f64>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl ModelFile {
    pub fn new(model: &Polynomial, order: usize, meta: serde_json::Value) -> Self {
        Self {
            n_z: model.n_z,
            n: order,
            powers: model.powers.clone(),
            coeffs: model.coeffs.clone(),
            meta,
        }
    }

    pub fn polynomial(&self) -> Result<Polynomial> {
        Polynomial::new(self.n_z, self.powers.clone(), self.coeffs.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.polynomial()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }
}
