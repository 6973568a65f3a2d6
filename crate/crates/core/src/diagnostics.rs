//! Goodness of fit: deviance, Pearson dispersion, the dispersion-penalised
//! pseudo-R² and observed-versus-predicted provider rankings.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{build_design, fit_poisson, FitOptions, FitResult, GlmError, ModelSpec};
use crate::ingest::{format_num, Dataset, IngestError};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("degrees of freedom n - k - 1 = {df} must be positive (n = {n}, k = {k})")]
    NonPositiveDf { n: usize, k: usize, df: i64 },
    #[error("fitted rate at index {index} must be positive and finite, got {value}")]
    NonPositiveRate { index: usize, value: f64 },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("baseline deviance is zero; the baseline already fits perfectly")]
    PerfectBaseline,
    #[error("fit and baseline were estimated on different rows")]
    RowMismatch,
    #[error("baseline column `{0}` is not in the fitted model")]
    NotNested(String),
    #[error("fit row {row} is outside the dataset ({len} rows)")]
    RowOutOfRange { row: usize, len: usize },
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub phi_hat: f64,
    pub chi_square: f64,
    pub df: usize,
}

fn check_rates(y: &[f64], lambda: &[f64]) -> Result<(), DiagnosticsError> {
    if y.len() != lambda.len() {
        return Err(DiagnosticsError::LengthMismatch {
            expected: y.len(),
            got: lambda.len(),
        });
    }
    match lambda.iter().position(|l| !(l.is_finite() && *l > 0.0)) {
        Some(index) => Err(DiagnosticsError::NonPositiveRate {
            index,
            value: lambda[index],
        }),
        None => Ok(()),
    }
}

/// Pearson chi-square over `n - k - 1` degrees of freedom; `k` excludes the intercept.
pub fn dispersion(
    y: &[f64],
    lambda: &[f64],
    k: usize,
) -> Result<DispersionReport, DiagnosticsError> {
    check_rates(y, lambda)?;
    let n = y.len();
    let df = n as i64 - k as i64 - 1;
    if df <= 0 {
        return Err(DiagnosticsError::NonPositiveDf { n, k, df });
    }
    let chi_square: f64 = y.iter().zip(lambda).map(|(y, l)| (y - l).powi(2) / l).sum();
    Ok(DispersionReport {
        phi_hat: chi_square / df as f64,
        chi_square,
        df: df as usize,
    })
}

/// Poisson deviance `2 sum[y ln(y/l) - (y - l)]`, with a zero count contributing `2 l`.
pub fn deviance(y: &[f64], lambda: &[f64]) -> Result<f64, DiagnosticsError> {
    check_rates(y, lambda)?;
    let d: f64 = y
        .iter()
        .zip(lambda)
        .map(|(&y, &l)| {
            if y == 0.0 {
                l
            } else {
                y * (y / l).ln() - (y - l)
            }
        })
        .sum();
    Ok((2.0 * d).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    InterceptOnly,
    FixedEffectsOnly,
}

impl BaselineKind {
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::InterceptOnly => "intercept-only",
            BaselineKind::FixedEffectsOnly => "fixed-effects-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitAssessment {
    pub deviance_model: f64,
    pub deviance_baseline: f64,
    pub pseudo_r2: f64,
    pub baseline_kind: BaselineKind,
    /// Number of columns entering the `k * phi_hat` penalty.
    pub k_penalty: usize,
    pub dispersion: DispersionReport,
}

/// `1 - (D_model + k phi_hat) / D_baseline`.
///
/// The baseline kind follows from its columns: a baseline with fixed-effect
/// dummies penalises only the covariates added on top of it, otherwise every
/// non-intercept column counts. `phi_hat` is the fitted model's own dispersion.
pub fn pseudo_r2(fit: &FitResult, baseline: &FitResult) -> Result<FitAssessment, DiagnosticsError> {
    if fit.rows != baseline.rows || fit.response != baseline.response {
        return Err(DiagnosticsError::RowMismatch);
    }
    if let Some(c) = baseline
        .columns
        .iter()
        .find(|b| !fit.columns.iter().any(|c| c.name == b.name))
    {
        return Err(DiagnosticsError::NotNested(c.name.clone()));
    }
    let kind = if baseline.fixed_effect_count() > 0 {
        BaselineKind::FixedEffectsOnly
    } else {
        BaselineKind::InterceptOnly
    };
    let k_penalty = match kind {
        BaselineKind::InterceptOnly => fit.k,
        BaselineKind::FixedEffectsOnly => fit
            .columns
            .iter()
            .filter(|c| !baseline.columns.iter().any(|b| b.name == c.name))
            .count(),
    };
    let deviance_model = deviance(&fit.response, &fit.fitted)?;
    let deviance_baseline = deviance(&baseline.response, &baseline.fitted)?;
    if deviance_baseline <= 0.0 {
        return Err(DiagnosticsError::PerfectBaseline);
    }
    let disp = dispersion(&fit.response, &fit.fitted, fit.k)?;
    let pseudo = 1.0 - (deviance_model + k_penalty as f64 * disp.phi_hat) / deviance_baseline;
    Ok(FitAssessment {
        deviance_model,
        deviance_baseline,
        pseudo_r2: pseudo.min(1.0),
        baseline_kind: kind,
        k_penalty,
        dispersion: disp,
    })
}

/// Refits the baseline of `fit` on exactly the rows `fit` used.
///
/// For [`BaselineKind::FixedEffectsOnly`] the baseline keeps the fit's
/// factors and drops its predictors. A separated baseline is returned as the
/// error carrying the flagged fit so callers can decide whether to use it.
pub fn fit_baseline(
    d: &Dataset,
    fit: &FitResult,
    kind: BaselineKind,
    opts: &FitOptions,
) -> Result<FitResult, DiagnosticsError> {
    let subset = d.select(&fit.rows)?;
    let mut spec = ModelSpec::new(fit.spec.response.clone(), Vec::<String>::new());
    if kind == BaselineKind::FixedEffectsOnly {
        spec = spec.with_fixed_effects(fit.spec.fixed_effects.clone());
    }
    spec.include_intercept = fit.has_intercept() || kind == BaselineKind::InterceptOnly;
    let mut dm = build_design(&subset, &spec)?;
    dm.rows = fit.rows.clone();
    let base = fit_poisson(&dm, opts)?;
    Ok(base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderScore {
    pub provider_id: String,
    pub key: String,
    pub observed: u64,
    pub predicted: f64,
    pub ratio: f64,
    pub pearson_residual: f64,
    pub better_than_average: bool,
}

impl ProviderScore {
    pub fn new(
        provider_id: impl Into<String>,
        key: impl Into<String>,
        observed: u64,
        predicted: f64,
    ) -> Self {
        let y = observed as f64;
        Self {
            provider_id: provider_id.into(),
            key: key.into(),
            observed,
            predicted,
            ratio: y / predicted,
            pearson_residual: (y - predicted) / predicted.sqrt(),
            better_than_average: y < predicted,
        }
    }
}

/// Scores providers by observed against predicted counts, best first
/// (ascending Pearson residual, ties in dataset row order).
pub fn rank_providers(
    d: &Dataset,
    fit: &FitResult,
) -> Result<Vec<ProviderScore>, DiagnosticsError> {
    let records = d.records();
    let mut scored = Vec::with_capacity(fit.rows.len());
    for (i, &row) in fit.rows.iter().enumerate() {
        let rec = records.get(row).ok_or(DiagnosticsError::RowOutOfRange {
            row,
            len: records.len(),
        })?;
        let lambda = fit.fitted[i];
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(DiagnosticsError::NonPositiveRate {
                index: i,
                value: lambda,
            });
        }
        scored.push((
            row,
            ProviderScore::new(&rec.provider_id, rec.key(), fit.response[i] as u64, lambda),
        ));
    }
    scored.sort_by(|a, b| {
        a.1.pearson_residual
            .total_cmp(&b.1.pearson_residual)
            .then(a.0.cmp(&b.0))
    });
    Ok(scored.into_iter().map(|(_, s)| s).collect())
}

/// Writes rankings as a delimited table with `predicted` (x) and `observed` (y).
pub fn write_rankings<W: Write>(
    scores: &[ProviderScore],
    writer: W,
    delimiter: u8,
) -> Result<(), DiagnosticsError> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);
    w.write_record([
        "rank",
        "provider_id",
        "key",
        "predicted",
        "observed",
        "ratio",
        "pearson_residual",
        "better_than_average",
    ])?;
    for (i, s) in scores.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            s.provider_id.clone(),
            s.key.clone(),
            format_num(s.predicted),
            s.observed.to_string(),
            format_num(s.ratio),
            format_num(s.pearson_residual),
            s.better_than_average.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
