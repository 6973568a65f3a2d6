//! Poisson log-link GLM: design matrices with dummy-coded fixed effects,
//! maximum likelihood by iteratively reweighted least squares, Wald tests
//! and predictions.
//!
//! The model is `ln(lambda_i) = b0 + x_i'b (+ fixed effect of i's level)`,
//! with `y_i ~ Poisson(lambda_i)`. On the canonical log link the IRLS update
//! coincides with Newton's method: `(X'WX) delta = X'(y - mu)` with
//! `W = diag(mu)`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::ingest::{Dataset, IngestError};

/// Name of the intercept column.
pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Error)]
pub enum GlmError {
    #[error(transparent)]
    Data(#[from] IngestError),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("row {row}: response `{column}` must be a non-negative integer count, got {value}")]
    InvalidResponse {
        row: usize,
        column: String,
        value: f64,
    },
    #[error("no rows left after excluding {excluded} rows with missing values")]
    EmptyDesign { excluded: usize },
    #[error("design has no estimable columns")]
    NoColumns,
    #[error("factor `{factor}` has a single level after exclusions")]
    SingleLevelFactor { factor: String },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("rate at index {index} must be positive and finite, got {value}")]
    NonPositiveRate { index: usize, value: f64 },
    #[error("separation: coefficients {columns:?} diverge (|estimate| > bound); the estimate lies at infinity")]
    Separation {
        columns: Vec<String>,
        fit: Box<FitResult>,
    },
    #[error("weighted normal equations are singular")]
    Singular,
    #[error("missing covariate `{0}`")]
    MissingCovariate(String),
    #[error("unknown level `{level}` for factor `{factor}`")]
    UnknownLevel { factor: String, level: String },
}

/// Declarative regression specification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub predictors: Vec<String>,
    pub fixed_effects: Vec<String>,
    pub include_intercept: bool,
}

impl ModelSpec {
    pub fn new<S: Into<String>>(
        response: impl Into<String>,
        predictors: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            response: response.into(),
            predictors: predictors.into_iter().map(Into::into).collect(),
            fixed_effects: Vec::new(),
            include_intercept: true,
        }
    }

    pub fn with_fixed_effects<S: Into<String>>(
        mut self,
        factors: impl IntoIterator<Item = S>,
    ) -> Self {
        self.fixed_effects = factors.into_iter().map(Into::into).collect();
        self
    }

    pub fn without_intercept(mut self) -> Self {
        self.include_intercept = false;
        self
    }

    pub fn validate(&self) -> Result<(), GlmError> {
        if self.response.is_empty() {
            return Err(GlmError::InvalidSpec("empty response name".into()));
        }
        let mut seen = BTreeSet::new();
        for p in self.predictors.iter().chain(&self.fixed_effects) {
            if *p == self.response {
                return Err(GlmError::InvalidSpec(format!(
                    "response `{p}` used as a regressor"
                )));
            }
            if !seen.insert(p.as_str()) {
                return Err(GlmError::InvalidSpec(format!("duplicate regressor `{p}`")));
            }
        }
        if !self.include_intercept && self.predictors.is_empty() && self.fixed_effects.is_empty() {
            return Err(GlmError::InvalidSpec(
                "model has neither intercept nor regressors".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnKind {
    Intercept,
    Predictor,
    FixedEffect { factor: String, level: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignColumn {
    pub name: String,
    pub kind: ColumnKind,
}

impl DesignColumn {
    pub fn intercept() -> Self {
        Self {
            name: INTERCEPT.to_string(),
            kind: ColumnKind::Intercept,
        }
    }

    pub fn predictor(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Predictor,
        }
    }

    pub fn fixed_effect(factor: &str, level: &str) -> Self {
        Self {
            name: format!("{factor}[{level}]"),
            kind: ColumnKind::FixedEffect {
                factor: factor.to_string(),
                level: level.to_string(),
            },
        }
    }

    pub fn is_fixed_effect(&self) -> bool {
        matches!(self.kind, ColumnKind::FixedEffect { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Constant,
    Collinear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub column: DesignColumn,
    pub reason: DropReason,
}

/// Dummy coding of one factor; `reference` is absorbed by the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorCoding {
    pub factor: String,
    pub reference: String,
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub spec: ModelSpec,
    pub columns: Vec<DesignColumn>,
    /// n x p, full column rank.
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    /// Dataset row index of each design row.
    pub rows: Vec<usize>,
    pub row_keys: Vec<String>,
    pub excluded_rows: usize,
    pub dropped: Vec<DroppedColumn>,
    pub factors: Vec<FactorCoding>,
}

/// Relative residual norm below which a column counts as a linear
/// combination of the columns before it.
const COLLINEARITY_TOL: f64 = 1e-9;

impl DesignMatrix {
    /// Assembles a design from raw columns, dropping constant and collinear
    /// columns in order. Row keys default to the row positions.
    pub fn from_columns(
        spec: ModelSpec,
        columns: Vec<DesignColumn>,
        data: Vec<Vec<f64>>,
        y: Vec<f64>,
    ) -> Result<Self, GlmError> {
        let n = y.len();
        for c in &data {
            if c.len() != n {
                return Err(GlmError::LengthMismatch {
                    expected: n,
                    got: c.len(),
                });
            }
        }
        for (i, &v) in y.iter().enumerate() {
            if !(v >= 0.0 && v.fract() == 0.0 && v.is_finite()) {
                return Err(GlmError::InvalidResponse {
                    row: i + 1,
                    column: spec.response.clone(),
                    value: v,
                });
            }
        }
        if n == 0 {
            return Err(GlmError::EmptyDesign { excluded: 0 });
        }
        let has_intercept = columns.iter().any(|c| c.kind == ColumnKind::Intercept);
        let (kept, dropped) = select_independent(&columns, &data, has_intercept);
        if kept.is_empty() {
            return Err(GlmError::NoColumns);
        }
        let x = DMatrix::from_fn(n, kept.len(), |i, j| data[kept[j]][i]);
        Ok(Self {
            spec,
            columns: kept.iter().map(|&j| columns[j].clone()).collect(),
            x,
            y,
            rows: (0..n).collect(),
            row_keys: (0..n).map(|i| i.to_string()).collect(),
            excluded_rows: 0,
            dropped,
            factors: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Columns are
/// visited intercept first, then fixed-effect dummies, then predictors, each
/// group in spec order; a column in the span of those visited before it is
/// dropped. A predictor that is constant within every fixed-effect level is
/// therefore the column that goes, not a dummy.
fn select_independent(
    columns: &[DesignColumn],
    data: &[Vec<f64>],
    has_intercept: bool,
) -> (Vec<usize>, Vec<DroppedColumn>) {
    let rank = |c: &DesignColumn| match c.kind {
        ColumnKind::Intercept => 0,
        ColumnKind::FixedEffect { .. } => 1,
        ColumnKind::Predictor => 2,
    };
    let mut order: Vec<usize> = (0..columns.len()).collect();
    order.sort_by_key(|&j| rank(&columns[j]));

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in order {
        let col = &data[j];
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let constant = col.windows(2).all(|w| w[0] == w[1]);
        let is_intercept = columns[j].kind == ColumnKind::Intercept;
        if norm0 == 0.0 || (constant && has_intercept && !is_intercept) {
            dropped.push((j, DropReason::Constant));
            continue;
        }
        let mut v = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= dot * qi);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= COLLINEARITY_TOL * norm0 {
            dropped.push((
                j,
                if constant {
                    DropReason::Constant
                } else {
                    DropReason::Collinear
                },
            ));
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
        kept.push(j);
    }
    kept.sort_unstable();
    dropped.sort_unstable_by_key(|d| d.0);
    let dropped = dropped
        .into_iter()
        .map(|(j, reason)| DroppedColumn {
            column: columns[j].clone(),
            reason,
        })
        .collect();
    (kept, dropped)
}

/// Expands `spec` over `d`. Rows with a missing value in any used column are
/// excluded; each factor is coded against its lexicographically first level.
pub fn build_design(d: &Dataset, spec: &ModelSpec) -> Result<DesignMatrix, GlmError> {
    spec.validate()?;
    let response = d.numeric_column(&spec.response)?;
    let predictors = spec
        .predictors
        .iter()
        .map(|p| d.numeric_column(p))
        .collect::<Result<Vec<_>, _>>()?;
    let factors = spec
        .fixed_effects
        .iter()
        .map(|f| d.text_column(f))
        .collect::<Result<Vec<_>, _>>()?;

    let rows: Vec<usize> = (0..d.len())
        .filter(|&i| {
            response[i].is_some()
                && predictors.iter().all(|c| c[i].is_some())
                && factors.iter().all(|c| c[i].is_some())
        })
        .collect();
    let excluded = d.len() - rows.len();
    if rows.is_empty() {
        return Err(GlmError::EmptyDesign { excluded });
    }

    let y: Vec<f64> = rows.iter().map(|&i| response[i].unwrap()).collect();
    let mut columns = Vec::new();
    let mut data = Vec::new();
    if spec.include_intercept {
        columns.push(DesignColumn::intercept());
        data.push(vec![1.0; rows.len()]);
    }
    for (name, col) in spec.predictors.iter().zip(&predictors) {
        columns.push(DesignColumn::predictor(name.clone()));
        data.push(rows.iter().map(|&i| col[i].unwrap()).collect());
    }
    let mut codings = Vec::new();
    for (factor, col) in spec.fixed_effects.iter().zip(&factors) {
        let levels: BTreeSet<&str> = rows.iter().map(|&i| col[i].as_deref().unwrap()).collect();
        if levels.len() < 2 {
            return Err(GlmError::SingleLevelFactor {
                factor: factor.clone(),
            });
        }
        let levels: Vec<String> = levels.into_iter().map(str::to_string).collect();
        // without an intercept the first factor keeps every level
        let skip = usize::from(spec.include_intercept || !codings.is_empty());
        for level in &levels[skip..] {
            columns.push(DesignColumn::fixed_effect(factor, level));
            data.push(
                rows.iter()
                    .map(|&i| {
                        if col[i].as_deref() == Some(level) {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            );
        }
        codings.push(FactorCoding {
            factor: factor.clone(),
            reference: levels[0].clone(),
            levels,
        });
    }

    let mut dm =
        DesignMatrix::from_columns(spec.clone(), columns, data, y).map_err(|e| match e {
            GlmError::InvalidResponse { row, column, value } => GlmError::InvalidResponse {
                row: rows[row - 1] + 1,
                column,
                value,
            },
            other => other,
        })?;
    dm.row_keys = rows.iter().map(|&i| d.records()[i].key()).collect();
    dm.rows = rows;
    dm.excluded_rows = excluded;
    dm.factors = codings;
    Ok(dm)
}

fn check_rates(lambda: &[f64]) -> Result<(), GlmError> {
    match lambda.iter().position(|&l| !(l > 0.0 && l.is_finite())) {
        Some(index) => Err(GlmError::NonPositiveRate {
            index,
            value: lambda[index],
        }),
        None => Ok(()),
    }
}

/// `sum(-lambda + y ln(lambda) - ln(y!))`.
pub fn log_likelihood(y: &[f64], lambda: &[f64]) -> Result<f64, GlmError> {
    if y.len() != lambda.len() {
        return Err(GlmError::LengthMismatch {
            expected: y.len(),
            got: lambda.len(),
        });
    }
    check_rates(lambda)?;
    Ok(poisson_ll(y, lambda))
}

fn poisson_ll(y: &[f64], mu: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let term = if y == 0.0 { 0.0 } else { y * m.ln() };
            -m + term - ln_factorial(y)
        })
        .sum()
}

fn ln_factorial(y: f64) -> f64 {
    if y < 2.0 {
        0.0
    } else {
        ln_gamma(y + 1.0)
    }
}

/// Linear predictor and rates at `beta`.
fn rates(x: &DMatrix<f64>, beta: &DVector<f64>) -> Vec<f64> {
    (x * beta).iter().map(|e| e.exp()).collect()
}

/// Log-likelihood of the design at coefficient vector `beta`.
pub fn log_likelihood_at(dm: &DesignMatrix, beta: &[f64]) -> f64 {
    let b = DVector::from_column_slice(beta);
    poisson_ll(&dm.y, &rates(&dm.x, &b))
}

/// Analytic score `X'(y - mu)` at `beta`.
pub fn score(dm: &DesignMatrix, beta: &[f64]) -> Vec<f64> {
    let b = DVector::from_column_slice(beta);
    score_vec(&dm.x, &dm.y, &rates(&dm.x, &b))
        .iter()
        .copied()
        .collect()
}

fn score_vec(x: &DMatrix<f64>, y: &[f64], mu: &[f64]) -> DVector<f64> {
    let r = DVector::from_iterator(y.len(), y.iter().zip(mu).map(|(y, m)| y - m));
    x.tr_mul(&r)
}

fn fisher_information(x: &DMatrix<f64>, mu: &[f64]) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, m) in mu.iter().enumerate() {
        let s = m.sqrt();
        xw.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    xw.tr_mul(&xw)
}

fn unit_deviance_sum(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            if y == 0.0 {
                m
            } else {
                y * (y / m).ln() - (y - m)
            }
        })
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub deviance_tolerance: f64,
    pub score_tolerance: f64,
    /// Coefficients beyond this magnitude on the log scale signal separation.
    pub separation_bound: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            deviance_tolerance: 1e-8,
            score_tolerance: 1e-6,
            separation_bound: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub columns: Vec<DesignColumn>,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub fitted: Vec<f64>,
    pub response: Vec<f64>,
    pub rows: Vec<usize>,
    pub row_keys: Vec<String>,
    pub log_likelihood: f64,
    pub aic: f64,
    pub deviance: f64,
    pub n: usize,
    /// Estimated columns excluding the intercept.
    pub k: usize,
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_score: f64,
    pub excluded_rows: usize,
    pub dropped: Vec<DroppedColumn>,
    pub factors: Vec<FactorCoding>,
    /// Columns flagged as diverging.
    pub separation: Vec<String>,
}

impl FitResult {
    pub fn has_intercept(&self) -> bool {
        self.columns.iter().any(|c| c.kind == ColumnKind::Intercept)
    }

    pub fn num_coefficients(&self) -> usize {
        self.coefficients.len()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.position(name).map(|j| self.coefficients[j])
    }

    pub fn standard_error(&self, name: &str) -> Option<f64> {
        self.position(name).map(|j| self.standard_errors[j])
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Non-intercept, non-fixed-effect columns.
    pub fn covariate_columns(&self) -> impl Iterator<Item = &DesignColumn> {
        self.columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Predictor)
    }

    pub fn fixed_effect_count(&self) -> usize {
        self.columns.iter().filter(|c| c.is_fixed_effect()).count()
    }
}

/// Fits the Poisson log-link GLM by IRLS.
///
/// The intercept starts at `ln(mean(y) + 0.1)` and every other coefficient at
/// zero. Each Newton step is halved until the log-likelihood does not
/// decrease. Converged means both the relative deviance change and the largest
/// score component are under tolerance. Non-convergence returns an `Ok` fit
/// with `converged == false`; divergence past the separation bound returns
/// [`GlmError::Separation`] carrying the flagged fit.
pub fn fit_poisson(dm: &DesignMatrix, opts: &FitOptions) -> Result<FitResult, GlmError> {
    let (n, p) = (dm.n(), dm.p());
    let x = &dm.x;
    let y = &dm.y;
    let mean_y = y.iter().sum::<f64>() / n as f64;

    let mut beta = DVector::zeros(p);
    if let Some(j) = dm
        .columns
        .iter()
        .position(|c| c.kind == ColumnKind::Intercept)
    {
        beta[j] = (mean_y + 0.1).ln();
    }
    let mut mu = rates(x, &beta);
    let mut ll = poisson_ll(y, &mu);
    let mut dev = unit_deviance_sum(y, &mu);
    let mut converged = false;
    let mut iterations = 0;
    let mut separation = Vec::new();
    let mut max_score = f64::INFINITY;

    let certain = sign_definite_zero_columns(dm);

    while iterations < opts.max_iterations {
        iterations += 1;
        let grad = score_vec(x, y, &mu);
        let info = fisher_information(x, &mu);
        let delta = solve_spd(info, &grad).ok_or(GlmError::Singular)?;

        let mut step = 1.0;
        let (new_beta, new_mu, new_ll) = loop {
            let cand = &beta + &delta * step;
            let cand_mu = rates(x, &cand);
            let cand_ll = poisson_ll(y, &cand_mu);
            // slack absorbs rounding in the likelihood near the optimum
            if (cand_ll.is_finite() && cand_ll >= ll - 1e-10 * (1.0 + ll.abs())) || step < 1e-10 {
                break (cand, cand_mu, cand_ll);
            }
            step *= 0.5;
        };
        if !new_ll.is_finite() {
            break;
        }
        let new_dev = unit_deviance_sum(y, &new_mu);
        let rel_change = (new_dev - dev).abs() / (new_dev.abs() + 0.1);
        beta = new_beta;
        mu = new_mu;
        ll = new_ll;
        dev = new_dev;

        separation = dm
            .columns
            .iter()
            .zip(beta.iter())
            .filter(|(_, b)| b.abs() > opts.separation_bound)
            .map(|(c, _)| c.name.clone())
            .collect();
        max_score = score_vec(x, y, &mu).amax();
        if !separation.is_empty() {
            break;
        }
        if rel_change < opts.deviance_tolerance && max_score < opts.score_tolerance {
            converged = true;
            break;
        }
    }

    let info = fisher_information(x, &mu);
    let standard_errors = match invert_spd(info) {
        Some(inv) => (0..p).map(|j| inv[(j, j)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; p],
    };
    for name in certain {
        if !separation.contains(&name) {
            separation.push(name);
        }
    }
    if !separation.is_empty() {
        converged = false;
    }
    let k = dm
        .columns
        .iter()
        .filter(|c| c.kind != ColumnKind::Intercept)
        .count();
    let fit = FitResult {
        spec: dm.spec.clone(),
        columns: dm.columns.clone(),
        coefficients: beta.iter().copied().collect(),
        standard_errors,
        fitted: mu,
        response: y.clone(),
        rows: dm.rows.clone(),
        row_keys: dm.row_keys.clone(),
        log_likelihood: ll,
        aic: aic_from(ll, p),
        deviance: dev,
        n,
        k,
        converged,
        iterations,
        max_abs_score: max_score,
        excluded_rows: dm.excluded_rows,
        dropped: dm.dropped.clone(),
        factors: dm.factors.clone(),
        separation: separation.clone(),
    };
    if separation.is_empty() {
        Ok(fit)
    } else {
        Err(GlmError::Separation {
            columns: separation,
            fit: Box::new(fit),
        })
    }
}

/// Columns that are non-negative (or non-positive) and see only zero counts.
/// Their score component is `-sum(c_i mu_i)`, which has no root at finite
/// coefficients, so the estimate lies at infinity.
fn sign_definite_zero_columns(dm: &DesignMatrix) -> Vec<String> {
    (0..dm.p())
        .filter(|&j| {
            let col = dm.x.column(j);
            let definite = col.iter().all(|&v| v >= 0.0) || col.iter().all(|&v| v <= 0.0);
            definite && col.iter().zip(&dm.y).all(|(c, y)| *c == 0.0 || *y == 0.0)
        })
        .map(|j| dm.columns[j].name.clone())
        .collect()
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    match a.clone().cholesky() {
        Some(c) => Some(c.solve(b)),
        None => a.lu().solve(b),
    }
}

fn invert_spd(a: DMatrix<f64>) -> Option<DMatrix<f64>> {
    match a.clone().cholesky() {
        Some(c) => Some(c.inverse()),
        None => a.try_inverse(),
    }
}

/// `2 * coefficients - 2 * log_likelihood`.
pub fn aic_from(log_likelihood: f64, coefficients: usize) -> f64 {
    2.0 * coefficients as f64 - 2.0 * log_likelihood
}

pub fn aic(fit: &FitResult) -> f64 {
    aic_from(fit.log_likelihood, fit.num_coefficients())
}

/// Covariate values for a prediction: one number per predictor and one level
/// per fixed-effect factor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub values: BTreeMap<String, f64>,
    pub levels: BTreeMap<String, String>,
}

impl Covariates {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(mut self, name: impl Into<String>, v: f64) -> Self {
        self.values.insert(name.into(), v);
        self
    }

    pub fn level(mut self, factor: impl Into<String>, level: impl Into<String>) -> Self {
        self.levels.insert(factor.into(), level.into());
        self
    }
}

pub fn linear_predictor(fit: &FitResult, x: &Covariates) -> Result<f64, GlmError> {
    for coding in &fit.factors {
        let level = x
            .levels
            .get(&coding.factor)
            .ok_or_else(|| GlmError::MissingCovariate(coding.factor.clone()))?;
        if !coding.levels.contains(level) {
            return Err(GlmError::UnknownLevel {
                factor: coding.factor.clone(),
                level: level.clone(),
            });
        }
    }
    let mut eta = 0.0;
    for (col, b) in fit.columns.iter().zip(&fit.coefficients) {
        let v = match &col.kind {
            ColumnKind::Intercept => 1.0,
            ColumnKind::Predictor => *x
                .values
                .get(&col.name)
                .ok_or_else(|| GlmError::MissingCovariate(col.name.clone()))?,
            ColumnKind::FixedEffect { factor, level } => {
                let chosen = x
                    .levels
                    .get(factor)
                    .ok_or_else(|| GlmError::MissingCovariate(factor.clone()))?;
                if chosen == level {
                    1.0
                } else {
                    0.0
                }
            }
        };
        eta += v * b;
    }
    Ok(eta)
}

/// Expected count `exp(linear predictor)`.
pub fn predict(fit: &FitResult, x: &Covariates) -> Result<f64, GlmError> {
    linear_predictor(fit, x).map(f64::exp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    /// `None` when the standard error is zero or not finite.
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    pub stars: String,
}

/// Significance marks at p < 0.05, 0.01 and 0.001.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Two-sided normal p-value of `z`.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

pub fn wald_test(name: &str, estimate: f64, std_error: f64) -> WaldTest {
    let available = std_error.is_finite() && std_error > 0.0;
    let z = available.then(|| estimate / std_error);
    let p_value = z.map(two_sided_p);
    WaldTest {
        name: name.to_string(),
        estimate,
        std_error,
        z,
        p_value,
        stars: p_value.map_or("", stars).to_string(),
    }
}

pub fn wald_tests(fit: &FitResult) -> Vec<WaldTest> {
    fit.columns
        .iter()
        .zip(fit.coefficients.iter().zip(&fit.standard_errors))
        .map(|(c, (&b, &se))| wald_test(&c.name, b, se))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub kind: ColumnKind,
    pub estimate: f64,
    pub std_error: f64,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    pub stars: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_score: f64,
    pub separation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedRow {
    pub key: String,
    pub row: usize,
    pub observed: f64,
    pub fitted: f64,
}

/// Serializable form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub spec: ModelSpec,
    pub coefficients: Vec<CoefficientRow>,
    pub log_likelihood: f64,
    pub aic: f64,
    pub deviance: f64,
    pub n: usize,
    pub k: usize,
    pub excluded_rows: usize,
    pub dropped_columns: Vec<DroppedColumn>,
    pub factors: Vec<FactorCoding>,
    pub convergence: Convergence,
    pub observations: Vec<FittedRow>,
}

impl FitResult {
    pub fn report(&self) -> FitReport {
        FitReport {
            spec: self.spec.clone(),
            coefficients: self
                .columns
                .iter()
                .zip(wald_tests(self))
                .map(|(c, w)| CoefficientRow {
                    name: w.name,
                    kind: c.kind.clone(),
                    estimate: w.estimate,
                    std_error: w.std_error,
                    z: w.z,
                    p_value: w.p_value,
                    stars: w.stars,
                })
                .collect(),
            log_likelihood: self.log_likelihood,
            aic: self.aic,
            deviance: self.deviance,
            n: self.n,
            k: self.k,
            excluded_rows: self.excluded_rows,
            dropped_columns: self.dropped.clone(),
            factors: self.factors.clone(),
            convergence: Convergence {
                converged: self.converged,
                iterations: self.iterations,
                max_abs_score: self.max_abs_score,
                separation: self.separation.clone(),
            },
            observations: (0..self.n)
                .map(|i| FittedRow {
                    key: self.row_keys[i].clone(),
                    row: self.rows[i],
                    observed: self.response[i],
                    fitted: self.fitted[i],
                })
                .collect(),
        }
    }
}

impl From<FitReport> for FitResult {
    fn from(r: FitReport) -> Self {
        let (columns, (coefficients, standard_errors)): (Vec<_>, (Vec<_>, Vec<_>)) = r
            .coefficients
            .into_iter()
            .map(|c| {
                (
                    DesignColumn {
                        name: c.name,
                        kind: c.kind,
                    },
                    (c.estimate, c.std_error),
                )
            })
            .unzip();
        FitResult {
            spec: r.spec,
            columns,
            coefficients,
            standard_errors,
            fitted: r.observations.iter().map(|o| o.fitted).collect(),
            response: r.observations.iter().map(|o| o.observed).collect(),
            rows: r.observations.iter().map(|o| o.row).collect(),
            row_keys: r.observations.iter().map(|o| o.key.clone()).collect(),
            log_likelihood: r.log_likelihood,
            aic: r.aic,
            deviance: r.deviance,
            n: r.n,
            k: r.k,
            converged: r.convergence.converged,
            iterations: r.convergence.iterations,
            max_abs_score: r.convergence.max_abs_score,
            excluded_rows: r.excluded_rows,
            dropped: r.dropped_columns,
            factors: r.factors,
            separation: r.convergence.separation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Field, ProviderRecord};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn design(columns: Vec<(&str, Vec<f64>)>, y: Vec<f64>) -> DesignMatrix {
        let n = y.len();
        let mut cols = vec![DesignColumn::intercept()];
        let mut data = vec![vec![1.0; n]];
        for (name, v) in columns {
            cols.push(DesignColumn::predictor(name));
            data.push(v);
        }
        let names: Vec<String> = cols.iter().skip(1).map(|c| c.name.clone()).collect();
        DesignMatrix::from_columns(ModelSpec::new("y", names), cols, data, y).unwrap()
    }

    fn fit(dm: &DesignMatrix) -> FitResult {
        fit_poisson(dm, &FitOptions::default()).unwrap()
    }

    fn assert_score_identities(f: &FitResult, dm: &DesignMatrix) {
        assert!(
            f.converged,
            "iters {} score {} coefs {:?}",
            f.iterations, f.max_abs_score, f.coefficients
        );
        let s = score(dm, &f.coefficients);
        assert!(s.iter().all(|v| v.abs() < 1e-6), "score {s:?}");
        if f.has_intercept() {
            let (sy, sl): (f64, f64) = (f.response.iter().sum(), f.fitted.iter().sum());
            assert!((sy - sl).abs() < 1e-6 * sy.max(1.0));
        }
        assert!(f.fitted.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn log_likelihood_examples() {
        assert_eq!(log_likelihood(&[1.0], &[1.0]).unwrap(), -1.0);
        assert_eq!(log_likelihood(&[0.0], &[2.0]).unwrap(), -2.0);
        let expected = -2.0 + 2.0 * 2f64.ln() - 2f64.ln();
        assert_relative_eq!(
            log_likelihood(&[2.0], &[2.0]).unwrap(),
            expected,
            max_relative = 1e-14
        );
        assert_relative_eq!(expected, -1.30685, epsilon = 1e-5);
        assert!(matches!(
            log_likelihood(&[1.0], &[0.0]),
            Err(GlmError::NonPositiveRate { .. })
        ));
        assert!(matches!(
            log_likelihood(&[1.0], &[1.0, 2.0]),
            Err(GlmError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn intercept_only_mle_is_log_mean() {
        let dm = design(vec![], vec![1.0, 2.0, 3.0]);
        let f = fit(&dm);
        assert_relative_eq!(f.coefficients[0], 2f64.ln(), epsilon = 1e-10);
        assert_score_identities(&f, &dm);
        assert_eq!(f.k, 0);
    }

    #[test]
    fn saturated_binary_design() {
        let dm = design(
            vec![("x", vec![0.0, 0.0, 1.0, 1.0])],
            vec![1.0, 3.0, 4.0, 8.0],
        );
        let f = fit(&dm);
        assert_relative_eq!(f.coefficients[0], 2f64.ln(), epsilon = 1e-10);
        assert_relative_eq!(f.coefficients[1], 3f64.ln(), epsilon = 1e-10);
        assert_relative_eq!(f.coefficients[1], 1.09861, epsilon = 1e-5);
        assert_score_identities(&f, &dm);
    }

    #[test]
    fn all_zero_response_is_separation() {
        let dm = design(vec![], vec![0.0, 0.0, 0.0]);
        match fit_poisson(&dm, &FitOptions::default()) {
            Err(GlmError::Separation { columns, fit }) => {
                assert_eq!(columns, vec![INTERCEPT.to_string()]);
                assert!(!fit.converged);
                assert!(fit.coefficients[0] < -15.0);
            }
            other => panic!("expected separation, got {other:?}"),
        }
    }

    #[test]
    fn zero_count_dummy_level_is_separation() {
        let dm = design(
            vec![("g", vec![0.0, 0.0, 1.0, 1.0])],
            vec![3.0, 5.0, 0.0, 0.0],
        );
        match fit_poisson(&dm, &FitOptions::default()) {
            Err(GlmError::Separation { columns, .. }) => assert_eq!(columns, vec!["g".to_string()]),
            other => panic!("expected separation, got {other:?}"),
        }
    }

    #[test]
    fn max_iterations_reports_non_convergence() {
        let dm = design(
            vec![("x", vec![0.1, 0.5, 0.9, 1.3, 2.0])],
            vec![0.0, 2.0, 1.0, 7.0, 9.0],
        );
        let opts = FitOptions {
            max_iterations: 1,
            ..FitOptions::default()
        };
        let f = fit_poisson(&dm, &opts).unwrap();
        assert!(!f.converged);
        assert_eq!(f.iterations, 1);
    }

    #[test]
    fn aic_examples() {
        assert_relative_eq!(aic_from(-223_113.400, 1), 446_228.8, epsilon = 0.05);
        assert!((aic_from(-111_570.800, 5) - 223_151.6).abs() <= 0.2);
        assert!((aic_from(-111_570.800, 5) - 223_151.7).abs() <= 0.2);
        assert_eq!(aic_from(0.0, 0), 0.0);
    }

    #[test]
    fn wald_examples() {
        let w = wald_test("a", 1.186, 0.002);
        assert_relative_eq!(w.z.unwrap(), 593.0, epsilon = 1e-9);
        assert!(w.p_value.unwrap() < 0.001);
        assert_eq!(w.stars, "***");
        let w = wald_test("price", 0.0003, 0.0002);
        assert_relative_eq!(w.z.unwrap(), 1.5, epsilon = 1e-9);
        assert!((w.p_value.unwrap() - 0.134).abs() < 5e-4);
        assert_eq!(w.stars, "");
        let w = wald_test("zero", 0.0, 1.0);
        assert_eq!(
            (w.z, w.p_value, w.stars.as_str()),
            (Some(0.0), Some(1.0), "")
        );
        let w = wald_test("bad", 1.0, 0.0);
        assert_eq!((w.z, w.p_value), (None, None));
        assert_eq!(stars(0.04), "*");
        assert_eq!(stars(0.009), "**");
    }

    fn fitted_model(intercept: f64, slope: f64) -> FitResult {
        let dm = design(vec![("x", vec![0.0, 1.0, 2.0])], vec![1.0, 2.0, 4.0]);
        let mut f = fit(&dm);
        f.coefficients = vec![intercept, slope];
        f
    }

    #[test]
    fn predict_examples() {
        let f = fitted_model(-0.122, 0.0);
        let p = predict(&f, &Covariates::new().value("x", 0.0)).unwrap();
        assert_relative_eq!(p, 0.885, epsilon = 5e-4);
        let f = fitted_model(0.3, 1.186);
        let a = predict(&f, &Covariates::new().value("x", 2.0)).unwrap();
        let b = predict(&f, &Covariates::new().value("x", 3.0)).unwrap();
        assert_relative_eq!(b / a, 3.273, epsilon = 1e-3);
        let f = fitted_model(0.0, 0.0);
        assert_eq!(
            predict(&f, &Covariates::new().value("x", 17.0)).unwrap(),
            1.0
        );
        assert!(matches!(
            predict(&f, &Covariates::new()),
            Err(GlmError::MissingCovariate(_))
        ));
    }

    fn dataset(rows: &[(&str, f64, &str, &str, u64)]) -> Dataset {
        let records = rows
            .iter()
            .map(|&(id, x, cc, twin, y)| {
                let mut r = ProviderRecord::new(id, [x, 1.0, 1.0, 50.0], y);
                r.country = (!cc.is_empty()).then(|| cc.to_string());
                r.extra.insert("twin".into(), Field::Text(twin.into()));
                r
            })
            .collect();
        Dataset::new(records, "t").unwrap()
    }

    #[test]
    fn dummy_coding_drops_reference_level() {
        let d = dataset(&[
            ("a", 1.0, "NL", "t1", 3),
            ("b", 2.0, "US", "t1", 4),
            ("c", 3.0, "DE", "t2", 1),
            ("d", 2.5, "US", "t2", 6),
            ("e", 0.5, "", "t3", 2),
        ]);
        let spec =
            ModelSpec::new("abuse_count", ["assigned_ips_log10"]).with_fixed_effects(["country"]);
        let dm = build_design(&d, &spec).unwrap();
        assert_eq!(dm.excluded_rows, 1);
        assert_eq!(dm.factors[0].reference, "DE");
        let names: Vec<&str> = dm.columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(
            names,
            vec![
                INTERCEPT,
                "assigned_ips_log10",
                "country[NL]",
                "country[US]"
            ]
        );
        assert_eq!(dm.x.ncols(), 1 + 1 + 2);
        assert_eq!(dm.row_keys, vec!["a", "b", "c", "d"]);
        let f = fit(&dm);
        let nl = predict(
            &f,
            &Covariates::new()
                .value("assigned_ips_log10", 1.0)
                .level("country", "NL"),
        )
        .unwrap();
        assert_relative_eq!(nl, f.fitted[0], max_relative = 1e-12);
        assert!(matches!(
            predict(
                &f,
                &Covariates::new()
                    .value("assigned_ips_log10", 1.0)
                    .level("country", "FR")
            ),
            Err(GlmError::UnknownLevel { .. })
        ));
    }

    #[test]
    fn many_levels_give_levels_minus_one_columns() {
        let rows: Vec<(String, String)> = (0..210)
            .map(|i| (format!("p{i}"), format!("twin{:03}", i / 2)))
            .collect();
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, (id, twin))| {
                let mut r =
                    ProviderRecord::new(id.clone(), [1.0, 1.0, 1.0, 1.0], (i % 7) as u64 + 1);
                r.extra
                    .insert("twin_label".into(), Field::Text(twin.clone()));
                r
            })
            .collect();
        let d = Dataset::new(records, "t").unwrap();
        let dm = build_design(
            &d,
            &ModelSpec::new("abuse_count", Vec::<String>::new()).with_fixed_effects(["twin_label"]),
        )
        .unwrap();
        assert_eq!(
            dm.columns.iter().filter(|c| c.is_fixed_effect()).count(),
            104
        );
        assert!(dm.dropped.is_empty());
    }

    #[test]
    fn within_twin_constant_predictor_is_collinear() {
        let d = dataset(&[
            ("a", 1.0, "NL", "t1", 3),
            ("b", 1.0, "US", "t1", 4),
            ("c", 3.0, "DE", "t2", 1),
            ("d", 3.0, "US", "t2", 6),
            ("e", 2.0, "US", "t3", 2),
            ("f", 2.0, "NL", "t3", 5),
        ]);
        let spec = ModelSpec::new("abuse_count", ["assigned_ips_log10", "pct_shared"])
            .with_fixed_effects(["twin"]);
        let dm = build_design(&d, &spec).unwrap();
        let dropped: Vec<(&str, DropReason)> = dm
            .dropped
            .iter()
            .map(|c| (c.column.name.as_str(), c.reason))
            .collect();
        assert_eq!(
            dropped,
            vec![
                ("assigned_ips_log10", DropReason::Collinear),
                ("pct_shared", DropReason::Constant)
            ]
        );
        // column count identity: 1 + k + (levels - 1) - dropped
        assert_eq!(dm.p(), 1 + 2 + 2 - 2);
    }

    #[test]
    fn design_errors() {
        let d = dataset(&[("a", 1.0, "NL", "t1", 3), ("b", 2.0, "NL", "t1", 4)]);
        let spec =
            ModelSpec::new("abuse_count", Vec::<String>::new()).with_fixed_effects(["country"]);
        assert!(matches!(
            build_design(&d, &spec),
            Err(GlmError::SingleLevelFactor { .. })
        ));
        let spec = ModelSpec::new("abuse_count", ["price_per_year"]);
        assert!(matches!(
            build_design(&d, &spec),
            Err(GlmError::EmptyDesign { excluded: 2 })
        ));
        let spec = ModelSpec::new("nope", Vec::<String>::new());
        assert!(matches!(
            build_design(&d, &spec),
            Err(GlmError::Data(IngestError::UnknownColumn(_)))
        ));
        let spec = ModelSpec::new("abuse_count", ["abuse_count"]);
        assert!(matches!(
            build_design(&d, &spec),
            Err(GlmError::InvalidSpec(_))
        ));
        let spec = ModelSpec::new("pct_shared", Vec::<String>::new());
        assert!(build_design(&d, &spec).is_ok());
        let spec = ModelSpec::new("assigned_ips_log10", Vec::<String>::new());
        let d2 = dataset(&[("a", 1.5, "NL", "t1", 3)]);
        assert!(matches!(
            build_design(&d2, &spec),
            Err(GlmError::InvalidResponse { row: 1, .. })
        ));
    }

    #[test]
    fn report_round_trips_into_fit() {
        let dm = design(
            vec![("x", vec![0.0, 1.0, 2.0, 3.0])],
            vec![1.0, 2.0, 2.0, 5.0],
        );
        let f = fit(&dm);
        let back: FitResult = f.report().into();
        assert_eq!(back, f);
    }

    fn lcg_design(seed: u64, n: usize) -> DesignMatrix {
        let mut s = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut unif = move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let x1: Vec<f64> = (0..n).map(|_| unif() * 3.0).collect();
        let x2: Vec<f64> = (0..n).map(|_| unif() * 100.0).collect();
        let y: Vec<f64> = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| {
                let rate = (0.2 + 0.6 * a + 0.01 * b).exp();
                // inverse-cdf Poisson draw
                let u = unif();
                let (mut k, mut p) = (0.0, (-rate).exp());
                let mut c = p;
                while u > c && k < 500.0 {
                    k += 1.0;
                    p *= rate / k;
                    c += p;
                }
                k
            })
            .collect();
        design(vec![("x1", x1), ("x2", x2)], y)
    }

    #[test]
    fn fit_dominates_intercept_only_and_reparameterizes() {
        for seed in 0..5 {
            let dm = lcg_design(seed, 80);
            let f = fit(&dm);
            assert_score_identities(&f, &dm);
            let null = fit(&design(vec![], dm.y.clone()));
            assert!(f.log_likelihood >= null.log_likelihood);

            // z-standardize x2
            let col: Vec<f64> = dm.x.column(2).iter().copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64)
                .sqrt();
            let z: Vec<f64> = col.iter().map(|v| (v - mean) / sd).collect();
            let x1: Vec<f64> = dm.x.column(1).iter().copied().collect();
            let g = fit(&design(vec![("x1", x1), ("x2", z)], dm.y.clone()));
            assert_relative_eq!(g.log_likelihood, f.log_likelihood, max_relative = 1e-10);
            assert_relative_eq!(g.aic, f.aic, max_relative = 1e-10);
            assert_relative_eq!(g.deviance, f.deviance, max_relative = 1e-8);
            assert_relative_eq!(
                g.coefficients[2],
                f.coefficients[2] * sd,
                max_relative = 1e-7
            );
            assert_relative_eq!(
                g.coefficients[0],
                f.coefficients[0] + f.coefficients[2] * mean,
                max_relative = 1e-7
            );
            for (a, b) in f.fitted.iter().zip(&g.fitted) {
                assert_relative_eq!(a, b, max_relative = 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn analytic_score_matches_finite_differences(
            seed in 0u64..1000,
            b0 in -1.0f64..1.5,
            b1 in -0.5f64..0.5,
            b2 in -0.01f64..0.01,
        ) {
            let dm = lcg_design(seed, 30);
            let beta = [b0, b1, b2];
            let s = score(&dm, &beta);
            for j in 0..3 {
                let scale_x = dm.x.column(j).amax().max(1.0);
                let h = 1e-4 / scale_x;
                let mut up = beta;
                let mut dn = beta;
                up[j] += h;
                dn[j] -= h;
                let fd = (log_likelihood_at(&dm, &up) - log_likelihood_at(&dm, &dn)) / (2.0 * h);
                let scale = s[j].abs().max(1.0);
                prop_assert!((fd - s[j]).abs() / scale < 1e-6, "j={} fd={} analytic={}", j, fd, s[j]);
            }
        }
    }
}
