//! Identification pipeline: regression tables from trajectories, one sparse
//! polynomial fit per candidate order, normalised error percentiles and the
//! order selection rule.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derivkit::{reconstruct_orders, trim, MAX_ORDER};
use crate::error::{Error, Result};
use crate::plant::Trajectory;
use crate::polyalg::{ModelFile, Polynomial};
use crate::sparsereg::{fit, residual_summary, FitReport, RegressionTable, DEFAULT_EPS};
use crate::stats::{median, percentile_sorted};

/// Percentile levels reported in every [`ErrorSummary`].
pub const PERCENTILES: [u32; 7] = [50, 80, 90, 95, 98, 99, 100];
/// Guard added to the median label magnitude.
pub const EPSILON: f64 = 1e-12;
pub const TRIM_QUANTILE: f64 = 0.95;
pub const MIN_TABLE_ROWS: usize = 50;
pub const DEFAULT_ETA: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    /// `q -> percentile(|e|, q) / (epsilon + median |label|)`.
    pub percentiles: BTreeMap<u32, f64>,
    pub epsilon: f64,
    pub median_abs_label: f64,
}

impl ErrorSummary {
    /// Normalised percentile at level `q`; panics for levels not in
    /// [`PERCENTILES`].
    pub fn p(&self, q: u32) -> f64 {
        self.percentiles[&q]
    }
}

pub fn percentile_summary(errors: &[f64], labels: &[f64], eps: f64) -> Result<ErrorSummary> {
    if errors.is_empty() || labels.is_empty() {
        return Err(Error::Empty("error profile"));
    }
    if errors.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: errors.len(),
        });
    }
    if errors.iter().chain(labels).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("error profile"));
    }
    let abs_labels: Vec<f64> = labels.iter().map(|l| l.abs()).collect();
    let median_abs_label = median(&abs_labels)?;
    let mut abs_err: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    abs_err.sort_by(f64::total_cmp);
    let denom = eps + median_abs_label;
    let percentiles = PERCENTILES
        .iter()
        .map(|&q| (q, percentile_sorted(&abs_err, q as f64) / denom))
        .collect();
    Ok(ErrorSummary {
        percentiles,
        epsilon: eps,
        median_abs_label,
    })
}

/// Feature names `y0 .. y{n-1}, u`.
pub fn feature_names(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("y{k}")).chain(["u".to_string()]).collect()
}

fn check_order(n: usize) -> Result<()> {
    if (1..=MAX_ORDER).contains(&n) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("order {n} outside 1..={MAX_ORDER}")))
    }
}

/// Rows `(y^(0), .., y^(n-1), u) -> y^(n)` from the reconstructed derivatives
/// of `y_noisy`, keeping samples that survive trimming at every order.
pub fn build_table(traj: &Trajectory, n: usize) -> Result<RegressionTable> {
    build_table_with(traj, n, TRIM_QUANTILE)
}

/// [`build_table`] with an explicit confidence quantile for trimming.
pub fn build_table_with(traj: &Trajectory, n: usize, trim_quantile: f64) -> Result<RegressionTable> {
    check_order(n)?;
    if traj.u.len() != traj.y_noisy.len() {
        return Err(Error::DimensionMismatch {
            expected: traj.y_noisy.len(),
            got: traj.u.len(),
        });
    }
    let est = reconstruct_orders(&traj.y_noisy, n, traj.tau)?;
    let mut keep = vec![true; traj.y_noisy.len()];
    for e in &est {
        let mut hit = vec![false; keep.len()];
        for i in trim(e, trim_quantile)? {
            hit[i] = true;
        }
        keep.iter_mut().zip(&hit).for_each(|(k, h)| *k &= *h);
    }
    let rows: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    if rows.len() < MIN_TABLE_ROWS {
        return Err(Error::TooFewSamples {
            order: n,
            got: rows.len(),
            min: MIN_TABLE_ROWS,
        });
    }
    let z = DMatrix::from_fn(rows.len(), n + 1, |r, c| {
        if c < n {
            est[c].values[rows[r]]
        } else {
            traj.u[rows[r]]
        }
    });
    let labels = rows.iter().map(|&i| est[n].values[i]).collect();
    RegressionTable::new(z, labels, feature_names(n))
}

/// Per-scenario tables stacked into one.
pub fn build_tables(trajs: &[Trajectory], n: usize) -> Result<RegressionTable> {
    build_tables_with(trajs, n, TRIM_QUANTILE)
}

pub fn build_tables_with(trajs: &[Trajectory], n: usize, trim_quantile: f64) -> Result<RegressionTable> {
    if trajs.is_empty() {
        return Err(Error::Empty("trajectory set"));
    }
    let tables = trajs
        .par_iter()
        .map(|t| build_table_with(t, n, trim_quantile))
        .collect::<Result<Vec<_>>>()?;
    RegressionTable::concat(&tables)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderCandidate {
    pub n: usize,
    pub model: Polynomial,
    pub train_summary: ErrorSummary,
    pub validation_summary: ErrorSummary,
    pub fit_report: FitReport,
}

fn summary_for(model: &Polynomial, table: &RegressionTable) -> Result<ErrorSummary> {
    let errors = residual_summary(model, table)?;
    percentile_summary(&errors, &table.labels, EPSILON)
}

/// One fit per `(n, train, validate)` triple.
pub fn fit_candidates(
    tables: &[(usize, RegressionTable, RegressionTable)],
    degree: usize,
    eps: f64,
) -> Result<Vec<OrderCandidate>> {
    tables
        .par_iter()
        .map(|(n, train, validate)| {
            if train.n_features() != n + 1 || validate.n_features() != n + 1 {
                return Err(Error::DimensionMismatch {
                    expected: n + 1,
                    got: train.n_features().min(validate.n_features()),
                });
            }
            let fit_report = fit(train, degree, eps)?;
            let model = fit_report.model.clone();
            Ok(OrderCandidate {
                n: *n,
                train_summary: summary_for(&model, train)?,
                validation_summary: summary_for(&model, validate)?,
                model,
                fit_report,
            })
        })
        .collect()
}

/// Index of the entry with minimal `p95` among those whose `p100` is within
/// `eta` of the best `p100`; ties go to the smaller `n`.
pub fn select_index(n: &[usize], p100: &[f64], p95: &[f64], eta: f64) -> Result<usize> {
    if n.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    if n.len() != p100.len() || n.len() != p95.len() {
        return Err(Error::DimensionMismatch {
            expected: n.len(),
            got: p100.len().min(p95.len()),
        });
    }
    if !(eta >= 1.0) {
        return Err(Error::InvalidArgument(format!("eta {eta} must be >= 1")));
    }
    let best_p100 = p100.iter().copied().fold(f64::INFINITY, f64::min);
    (0..n.len())
        .filter(|&i| p100[i] <= eta * best_p100)
        .min_by(|&a, &b| p95[a].total_cmp(&p95[b]).then(n[a].cmp(&n[b])))
        .ok_or(Error::NonFinite("candidate percentiles"))
}

/// Order selection on the validation summaries.
pub fn select_order(candidates: &[OrderCandidate], eta: f64) -> Result<&OrderCandidate> {
    let n: Vec<usize> = candidates.iter().map(|c| c.n).collect();
    let p100: Vec<f64> = candidates.iter().map(|c| c.validation_summary.p(100)).collect();
    let p95: Vec<f64> = candidates.iter().map(|c| c.validation_summary.p(95)).collect();
    Ok(&candidates[select_index(&n, &p100, &p95, eta)?])
}

pub fn evaluate_on_test(candidate: &OrderCandidate, test: &RegressionTable) -> Result<ErrorSummary> {
    summary_for(&candidate.model, test)
}

/// Scenario split by index: the first `train` scenarios, then `validate`,
/// then `test`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Split {
    pub train: usize,
    pub validate: usize,
    pub test: usize,
}

impl Default for Split {
    fn default() -> Self {
        Self {
            train: 25,
            validate: 15,
            test: 60,
        }
    }
}

impl Split {
    pub fn total(&self) -> usize {
        self.train + self.validate + self.test
    }

    pub fn apply<'a, T>(&self, items: &'a [T]) -> Result<(&'a [T], &'a [T], &'a [T])> {
        if self.train == 0 || self.validate == 0 {
            return Err(Error::InvalidArgument("train and validation sets must be non-empty".into()));
        }
        if items.len() < self.total() {
            return Err(Error::InvalidArgument(format!(
                "split needs {} scenarios, got {}",
                self.total(),
                items.len()
            )));
        }
        let (train, rest) = items.split_at(self.train);
        let (validate, rest) = rest.split_at(self.validate);
        Ok((train, validate, &rest[..self.test]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentifyConfig {
    pub degree: usize,
    pub eps: f64,
    pub eta: f64,
    pub orders: Vec<usize>,
    pub split: Split,
    /// Confidence quantile kept when trimming derivative estimates.
    pub trim_quantile: f64,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            eps: DEFAULT_EPS,
            eta: DEFAULT_ETA,
            orders: vec![1, 2, 3, 4],
            split: Split::default(),
            trim_quantile: TRIM_QUANTILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub rows: BTreeMap<String, usize>,
    pub train: ErrorSummary,
    pub validation: ErrorSummary,
    pub test: Option<ErrorSummary>,
    pub terms: usize,
    pub model: ModelFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub degree: usize,
    pub trim_quantile: f64,
    pub eps: f64,
    pub eta: f64,
    pub split: Split,
    pub selected_order: usize,
    /// Model file written next to the report, if any.
    pub model_file: Option<String>,
    pub orders: BTreeMap<usize, OrderReport>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn selected(&self) -> &OrderReport {
        &self.orders[&self.selected_order]
    }
}

/// Everything a run produces; `tables` holds `(train, validate, test)` per
/// order for residual dumps.
#[derive(Debug, Clone)]
pub struct Identification {
    pub report: Report,
    pub candidates: Vec<OrderCandidate>,
    pub tables: BTreeMap<usize, [RegressionTable; 3]>,
}

impl Identification {
    pub fn selected(&self) -> &OrderCandidate {
        self.candidates
            .iter()
            .find(|c| c.n == self.report.selected_order)
            .expect("selected order is one of the candidates")
    }

    pub fn selected_model_file(&self) -> ModelFile {
        let c = self.selected();
        ModelFile::new(&c.model, c.n, model_meta(&self.report, c.n))
    }
}

fn model_meta(report: &Report, n: usize) -> serde_json::Value {
    serde_json::json!({
        "degree": report.degree,
        "features": feature_names(n),
        "label": format!("y{n}"),
    })
}

/// Full identification on a scenario list: tables, candidate fits, order
/// selection on validation and test-set summaries for every order.
pub fn identify(trajs: &[Trajectory], cfg: &IdentifyConfig) -> Result<Identification> {
    if cfg.orders.is_empty() {
        return Err(Error::Empty("candidate orders"));
    }
    let mut orders = cfg.orders.clone();
    orders.sort_unstable();
    orders.dedup();
    for &n in &orders {
        check_order(n)?;
    }
    let (train, validate, test) = cfg.split.apply(trajs)?;

    let mut tables = BTreeMap::new();
    for &n in &orders {
        let built = [train, validate, test]
            .par_iter()
            .map(|set| {
                if set.is_empty() {
                    Ok(None)
                } else {
                    build_tables_with(set, n, cfg.trim_quantile).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut it = built.into_iter();
        let tr = it.next().flatten().ok_or(Error::Empty("training set"))?;
        let va = it.next().flatten().ok_or(Error::Empty("validation set"))?;
        let te = it.next().flatten();
        tables.insert(n, (tr, va, te));
    }

    let inputs: Vec<(usize, RegressionTable, RegressionTable)> = tables
        .iter()
        .map(|(n, (tr, va, _))| (*n, tr.clone(), va.clone()))
        .collect();
    let candidates = fit_candidates(&inputs, cfg.degree, cfg.eps)?;
    let selected_order = select_order(&candidates, cfg.eta)?.n;

    let mut report = Report {
        degree: cfg.degree,
        trim_quantile: cfg.trim_quantile,
        eps: cfg.eps,
        eta: cfg.eta,
        split: cfg.split,
        selected_order,
        model_file: None,
        orders: BTreeMap::new(),
    };
    let mut kept = BTreeMap::new();
    for c in &candidates {
        let (tr, va, te) = tables.remove(&c.n).expect("table for every order");
        let test_summary = te.as_ref().map(|t| evaluate_on_test(c, t)).transpose()?;
        let mut rows = BTreeMap::new();
        rows.insert("train".to_string(), tr.n_samples());
        rows.insert("validation".to_string(), va.n_samples());
        rows.insert("test".to_string(), te.as_ref().map_or(0, |t| t.n_samples()));
        report.orders.insert(
            c.n,
            OrderReport {
                rows,
                train: c.train_summary.clone(),
                validation: c.validation_summary.clone(),
                test: test_summary,
                terms: c.fit_report.selected_count,
                model: ModelFile::new(&c.model, c.n, model_meta(&report, c.n)),
            },
        );
        let empty_test = || RegressionTable::new(DMatrix::zeros(0, c.n + 1), vec![], feature_names(c.n));
        let te = match te {
            Some(t) => t,
            None => empty_test()?,
        };
        kept.insert(c.n, [tr, va, te]);
    }
    Ok(Identification {
        report,
        candidates,
        tables: kept,
    })
}

/// Residual profiles of every candidate on validation and test rows, as
/// `order,split,row,label,prediction,error`.
pub fn residual_csv(ident: &Identification) -> Result<String> {
    let mut out = String::from("order,split,row,label,prediction,error\n");
    for c in &ident.candidates {
        let sets = &ident.tables[&c.n];
        for (name, table) in [("validation", &sets[1]), ("test", &sets[2])] {
            if table.n_samples() == 0 {
                continue;
            }
            let pred = c.model.evaluate_batch(&table.z)?;
            for (i, (l, p)) in table.labels.iter().zip(&pred).enumerate() {
                let _ = writeln!(out, "{},{name},{i},{l},{p},{}", c.n, l - p);
            }
        }
    }
    Ok(out)
}

pub fn write_report(path: &Path, report: &Report) -> Result<()> {
    std::fs::write(path, report.to_json()?).map_err(|e| Error::io(path, e))
}
