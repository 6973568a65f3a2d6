//! Fitting a list of model specifications and assessing each one.

use abuse_glm::diagnostics::{
    dispersion, fit_baseline, pseudo_r2, BaselineKind, DiagnosticsError, DispersionReport,
    FitAssessment,
};
use abuse_glm::glm::{
    build_design, fit_poisson, ColumnKind, FitOptions, FitReport, FitResult, GlmError, ModelSpec,
};
use abuse_glm::ingest::{Dataset, TWIN_ID};
use abuse_glm::twins::exclude_incomplete_twins;
use anyhow::{bail, Result};
use serde::Serialize;

/// Parses `a,b,c|f1,f2` into predictors and fixed-effect factors.
pub fn parse_model(response: &str, text: &str) -> Result<ModelSpec> {
    let (preds, fes) = match text.split_once('|') {
        Some((p, f)) => (p, f),
        None => (text, ""),
    };
    let list = |s: &str| -> Vec<String> {
        s.split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(String::from)
            .collect()
    };
    let spec = ModelSpec::new(response, list(preds)).with_fixed_effects(list(fes));
    spec.validate()?;
    Ok(spec)
}

/// Nested sequence: intercept only, then one predictor added at a time.
pub fn stepwise(response: &str, predictors: &[String], fixed_effects: &[String]) -> Vec<ModelSpec> {
    (0..=predictors.len())
        .map(|k| {
            ModelSpec::new(response, predictors[..k].to_vec())
                .with_fixed_effects(fixed_effects.to_vec())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub label: String,
    pub fit: FitResult,
    /// The rows the model saw, after twin-level exclusion.
    pub data: Dataset,
    pub dispersion: Option<DispersionReport>,
    pub pseudo: Option<FitAssessment>,
    pub total: Option<FitAssessment>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelDocument {
    pub label: String,
    pub fit: FitReport,
    pub dispersion: Option<DispersionReport>,
    pub pseudo_r2: Option<FitAssessment>,
    pub total_pseudo_r2: Option<FitAssessment>,
    pub notes: Vec<String>,
}

impl FittedModel {
    pub fn document(&self) -> ModelDocument {
        ModelDocument {
            label: self.label.clone(),
            fit: self.fit.report(),
            dispersion: self.dispersion,
            pseudo_r2: self.pseudo.clone(),
            total_pseudo_r2: self.total.clone(),
            notes: self.notes.clone(),
        }
    }
}

/// Fits, keeping separated fits (flagged) rather than failing.
pub fn fit_flagged(
    d: &Dataset,
    spec: &ModelSpec,
    opts: &FitOptions,
    notes: &mut Vec<String>,
) -> Result<FitResult> {
    let dm = build_design(d, spec)?;
    match fit_poisson(&dm, opts) {
        Ok(f) => {
            if !f.converged {
                notes.push(format!(
                    "did not converge after {} iterations",
                    f.iterations
                ));
            }
            Ok(f)
        }
        Err(GlmError::Separation { columns, fit }) => {
            notes.push(format!("separation in {}", columns.join(", ")));
            Ok(*fit)
        }
        Err(e) => Err(e.into()),
    }
}

fn baseline_flagged(
    d: &Dataset,
    fit: &FitResult,
    kind: BaselineKind,
    opts: &FitOptions,
) -> Result<FitResult> {
    match fit_baseline(d, fit, kind, opts) {
        Ok(b) => Ok(b),
        Err(DiagnosticsError::Glm(GlmError::Separation { fit, .. })) => Ok(*fit),
        Err(e) => Err(e.into()),
    }
}

fn assessment(
    fit: &FitResult,
    base: &FitResult,
    notes: &mut Vec<String>,
    what: &str,
) -> Option<FitAssessment> {
    match pseudo_r2(fit, base) {
        Ok(a) => Some(a),
        Err(e) => {
            notes.push(format!("{what} unavailable: {e}"));
            None
        }
    }
}

/// Fits one model and assesses it.
///
/// With twin fixed effects, whole twins are excluded when a member misses a
/// model column. `Pseudo R²` is measured against `baseline` (falling back to
/// intercept-only when the model has no fixed effects); models that are
/// themselves baselines get none. With fixed effects, `Total pseudo R²` is
/// always measured against the intercept-only model.
pub fn fit_model(
    label: &str,
    d: &Dataset,
    spec: &ModelSpec,
    baseline: BaselineKind,
    opts: &FitOptions,
) -> Result<FittedModel> {
    let mut notes = Vec::new();
    let data = if spec.fixed_effects.iter().any(|f| f == TWIN_ID) {
        let mut required: Vec<&str> = vec![spec.response.as_str()];
        required.extend(spec.predictors.iter().map(String::as_str));
        required.extend(spec.fixed_effects.iter().map(String::as_str));
        let sample = exclude_incomplete_twins(d, &required)?;
        if !sample.dropped.is_empty() {
            notes.push(format!(
                "{} twins excluded for missing values",
                sample.dropped.len()
            ));
        }
        sample.dataset
    } else {
        d.clone()
    };
    if data.is_empty() {
        bail!("model {label}: no rows left after exclusions");
    }
    let fit = fit_flagged(&data, spec, opts, &mut notes)?;
    for dc in &fit.dropped {
        notes.push(format!(
            "dropped `{}` ({})",
            dc.column.name,
            format!("{:?}", dc.reason).to_lowercase()
        ));
    }
    let dispersion = match dispersion(&fit.response, &fit.fitted, fit.k) {
        Ok(r) => Some(r),
        Err(e) => {
            notes.push(format!("dispersion unavailable: {e}"));
            None
        }
    };
    let has_fe = fit.fixed_effect_count() > 0;
    let has_predictors = fit.columns.iter().any(|c| c.kind == ColumnKind::Predictor);
    let kind = if has_fe {
        baseline
    } else {
        BaselineKind::InterceptOnly
    };

    let intercept_base = if kind == BaselineKind::InterceptOnly || has_fe {
        Some(baseline_flagged(
            &data,
            &fit,
            BaselineKind::InterceptOnly,
            opts,
        )?)
    } else {
        None
    };
    let pseudo = if !has_predictors {
        None
    } else if kind == BaselineKind::FixedEffectsOnly {
        let base = baseline_flagged(&data, &fit, BaselineKind::FixedEffectsOnly, opts)?;
        assessment(&fit, &base, &mut notes, "pseudo R²")
    } else {
        intercept_base
            .as_ref()
            .and_then(|b| assessment(&fit, b, &mut notes, "pseudo R²"))
    };
    let total = match (&intercept_base, has_fe) {
        (Some(b), true) => assessment(&fit, b, &mut notes, "total pseudo R²"),
        _ => None,
    };
    Ok(FittedModel {
        label: label.to_string(),
        fit,
        data,
        dispersion,
        pseudo,
        total,
        notes,
    })
}

pub fn fit_models(
    d: &Dataset,
    specs: &[ModelSpec],
    baseline: BaselineKind,
    opts: &FitOptions,
) -> Result<Vec<FittedModel>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| fit_model(&format!("({})", i + 1), d, s, baseline, opts))
        .collect()
}
