//! Sparse polynomial least squares by greedy orthogonal forward selection.
//!
//! Candidate monomials are evaluated on the feature matrix and scaled to unit
//! norm. At each step every remaining candidate is orthogonalised against the
//! columns already selected; the one whose orthogonalised column is most
//! correlated with the current residual (equivalently, the one giving the
//! largest drop of the residual sum of squares) enters the model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polyalg::{enumerate_basis, monomial_column, Polynomial};
use crate::stats::rms;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const MAX_TERMS_CAP: usize = 50;
/// Orthogonalised candidates shorter than this (unit-norm start) are
/// treated as linearly dependent on the current selection.
pub const RANK_TOL: f64 = 1e-10;

/// Feature rows `z_j` and labels `l_j` of one regression problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTable {
    /// `n_s x n_z`.
    pub z: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl RegressionTable {
    pub fn new(z: DMatrix<f64>, labels: Vec<f64>, feature_names: Vec<String>) -> Result<Self> {
        if z.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: z.nrows(),
                got: labels.len(),
            });
        }
        if feature_names.len() != z.ncols() {
            return Err(Error::DimensionMismatch {
                expected: z.ncols(),
                got: feature_names.len(),
            });
        }
        if z.iter().chain(&labels).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("regression table"));
        }
        Ok(Self {
            z,
            labels,
            feature_names,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.z.ncols()
    }

    /// Stacks tables row-wise; all must share the feature layout.
    pub fn concat(tables: &[RegressionTable]) -> Result<Self> {
        let first = tables.first().ok_or(Error::Empty("table list"))?;
        let n_z = first.n_features();
        for t in tables {
            if t.n_features() != n_z {
                return Err(Error::DimensionMismatch {
                    expected: n_z,
                    got: t.n_features(),
                });
            }
        }
        let rows: usize = tables.iter().map(|t| t.n_samples()).sum();
        let mut z = DMatrix::zeros(rows, n_z);
        let mut labels = Vec::with_capacity(rows);
        let mut offset = 0;
        for t in tables {
            z.rows_mut(offset, t.n_samples()).copy_from(&t.z);
            labels.extend_from_slice(&t.labels);
            offset += t.n_samples();
        }
        Ok(Self {
            z,
            labels,
            feature_names: first.feature_names.clone(),
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            z: self.z.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub degree: usize,
    /// Minimal relative residual-RMS improvement for a new term.
    pub eps: f64,
    /// Overrides `min(n_m, n_s / 10, 50)` when set.
    pub max_terms: Option<usize>,
}

impl FitOptions {
    pub fn new(degree: usize, eps: f64) -> Self {
        Self {
            degree,
            eps,
            max_terms: None,
        }
    }
}

/// One forward-selection step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub step: usize,
    /// Row of the candidate basis that entered.
    pub monomial: usize,
    pub powers: Vec<u8>,
    /// Coefficients of the terms selected so far, in selection order.
    pub coeffs: Vec<f64>,
    pub residual_rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: Polynomial,
    pub selected_count: usize,
    pub train_residual_rms: f64,
    pub path: Vec<PathStep>,
}

pub fn fit(table: &RegressionTable, degree: usize, eps: f64) -> Result<FitReport> {
    fit_with(table, &FitOptions::new(degree, eps))
}

pub fn fit_with(table: &RegressionTable, opts: &FitOptions) -> Result<FitReport> {
    if !(opts.eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps {} must be >= 0", opts.eps)));
    }
    if table.n_samples() == 0 {
        return Err(Error::Empty("regression table"));
    }
    if table.z.iter().chain(&table.labels).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("regression table"));
    }
    let n_z = table.n_features();
    let n_s = table.n_samples();
    let basis = enumerate_basis(n_z, opts.degree)?;
    let n_m = basis.len();
    let max_terms = opts
        .max_terms
        .unwrap_or_else(|| n_m.min(n_s / 10).min(MAX_TERMS_CAP))
        .max(1)
        .min(n_m);

    let raw: Vec<Vec<f64>> = basis
        .powers()
        .iter()
        .map(|row| monomial_column(row, &table.z))
        .collect();
    let norms: Vec<f64> = raw.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut work: Vec<Vec<f64>> = raw
        .iter()
        .zip(&norms)
        .map(|(c, &nrm)| {
            if nrm > 0.0 && nrm.is_finite() {
                c.iter().map(|x| x / nrm).collect()
            } else {
                vec![0.0; n_s]
            }
        })
        .collect();
    let mut alive: Vec<bool> = norms.iter().map(|&n| n > 0.0 && n.is_finite()).collect();

    let labels = &table.labels;
    let label_sq = dot(labels, labels);
    let mut residual = labels.clone();
    let mut rss = label_sq;
    // Gram-Schmidt factors: r_cols[k] holds R's column for the k-th selected term.
    let mut r_cols: Vec<Vec<f64>> = Vec::new();
    let mut qt_labels: Vec<f64> = Vec::new();
    let mut proj: Vec<Vec<f64>> = vec![Vec::new(); n_m];
    let mut selected: Vec<usize> = Vec::new();
    let mut path = Vec::new();
    let mut improvements: Vec<f64> = Vec::new();

    while selected.len() < max_terms && rss > 1e-28 * label_sq && label_sq > 0.0 {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n_m {
            if !alive[i] {
                continue;
            }
            let nrm2 = dot(&work[i], &work[i]);
            if nrm2 < RANK_TOL * RANK_TOL {
                alive[i] = false;
                continue;
            }
            let c = dot(&work[i], &residual);
            let gain = c * c / nrm2;
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let Some((k, gain)) = best else { break };
        let new_rss = (rss - gain).max(0.0);
        if gain <= 1e-30 * label_sq {
            break;
        }
        improvements.push(1.0 - (new_rss / rss).sqrt());

        let nrm = dot(&work[k], &work[k]).sqrt();
        let q: Vec<f64> = work[k].iter().map(|x| x / nrm).collect();
        let mut r_col = proj[k].clone();
        r_col.push(nrm);
        r_cols.push(r_col);
        let coef = dot(&q, &residual);
        axpy(-coef, &q, &mut residual);
        qt_labels.push(coef);
        rss = dot(&residual, &residual);
        alive[k] = false;
        selected.push(k);

        for i in 0..n_m {
            if !alive[i] {
                continue;
            }
            // two passes keep the candidates orthogonal to working precision
            let mut c = 0.0;
            for _ in 0..2 {
                let d = dot(&q, &work[i]);
                axpy(-d, &q, &mut work[i]);
                c += d;
            }
            proj[i].push(c);
        }

        let coeffs = back_substitute(&r_cols, &qt_labels)
            .iter()
            .zip(&selected)
            .map(|(b, &i)| b / norms[i])
            .collect();
        path.push(PathStep {
            step: path.len() + 1,
            monomial: k,
            powers: basis.powers()[k].clone(),
            coeffs,
            residual_rms: (rss / n_s as f64).sqrt(),
        });
    }

    // Terms whose true contributions cancel can sit on a plateau for a few
    // steps before the residual collapses, so the path is grown to the cap
    // and then cut after the last step that still improved by `eps`.
    let keep = improvements
        .iter()
        .rposition(|&imp| imp >= opts.eps)
        .map_or(0, |i| i + 1);
    selected.truncate(keep);
    path.truncate(keep);

    let coeffs = if selected.is_empty() {
        Vec::new()
    } else {
        solve_restricted(&raw, &norms, &selected, labels)?
    };
    // keep canonical basis order in the reported model
    let mut order: Vec<usize> = (0..selected.len()).collect();
    order.sort_by_key(|&j| selected[j]);
    let powers: Vec<Vec<u8>> = order.iter().map(|&j| basis.powers()[selected[j]].clone()).collect();
    let model_coeffs: Vec<f64> = order.iter().map(|&j| coeffs[j]).collect();
    let model = Polynomial::new(n_z, powers, model_coeffs)?.prune(0.0);

    let fitted = model.evaluate_batch(&table.z)?;
    let resid: Vec<f64> = labels.iter().zip(&fitted).map(|(l, f)| l - f).collect();
    let train_residual_rms = rms(&resid);
    Ok(FitReport {
        selected_count: model.nonzero_count(),
        model,
        train_residual_rms,
        path,
    })
}

/// Least squares on the selected columns through a Householder QR of the
/// unit-norm columns; returns coefficients in original units.
fn solve_restricted(
    raw: &[Vec<f64>],
    norms: &[f64],
    selected: &[usize],
    labels: &[f64],
) -> Result<Vec<f64>> {
    let n_s = labels.len();
    let a = DMatrix::from_fn(n_s, selected.len(), |r, c| {
        raw[selected[c]][r] / norms[selected[c]]
    });
    let b = DVector::from_column_slice(labels);
    let qr = a.qr();
    let qtb = qr.q().transpose() * b;
    let beta = qr
        .r()
        .solve_upper_triangular(&qtb)
        .ok_or(Error::Singular("restricted least squares"))?;
    Ok(beta
        .iter()
        .zip(selected)
        .map(|(b, &i)| b / norms[i])
        .collect())
}

fn back_substitute(r_cols: &[Vec<f64>], rhs: &[f64]) -> Vec<f64> {
    let k = rhs.len();
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = rhs[i];
        for j in i + 1..k {
            s -= r_cols[j][i] * x[j];
        }
        x[i] = s / r_cols[i][i];
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `|l_j - P(z_j)|` for every row.
pub fn residual_summary(model: &Polynomial, table: &RegressionTable) -> Result<Vec<f64>> {
    if model.n_z() != table.n_features() {
        return Err(Error::DimensionMismatch {
            expected: table.n_features(),
            got: model.n_z(),
        });
    }
    let fitted = model.evaluate_batch(&table.z)?;
    Ok(table
        .labels
        .iter()
        .zip(fitted)
        .map(|(l, f)| (l - f).abs())
        .collect())
}
