//! Partial effects and baseline scenarios for fitted log-link models.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{predict, Covariates, FitResult, GlmError};
use crate::ingest::{
    format_num, summarize_values, Dataset, IngestError, ASSIGNED_IPS, HOSTED_DOMAINS, HOSTING_IPS,
    PCT_SHARED,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("`{0}` has no coefficient in the fitted model")]
    UnknownVariable(String),
    #[error("scenario `{scenario}` has no baseline value for `{variable}`")]
    MissingBaseline { scenario: String, variable: String },
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// `exp(beta * delta)`: the factor by which the expected count changes.
pub fn multiplier(beta: f64, delta: f64) -> f64 {
    (beta * delta).exp()
}

pub fn partial_effect(fit: &FitResult, variable: &str, delta: f64) -> Result<f64, ScenarioError> {
    let beta = fit
        .covariate_columns()
        .position(|c| c.name == variable)
        .and_then(|_| fit.coefficient(variable))
        .ok_or_else(|| ScenarioError::UnknownVariable(variable.to_string()))?;
    Ok(multiplier(beta, delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub baseline: BTreeMap<String, f64>,
    /// Level per fixed-effect factor; missing factors take the reference level.
    #[serde(default)]
    pub levels: BTreeMap<String, String>,
    /// Increment per variable; missing variables move by one unit
    /// (one percentage point for percent variables).
    #[serde(default)]
    pub deltas: BTreeMap<String, f64>,
}

impl ScenarioSpec {
    pub fn new(name: impl Into<String>, baseline: impl IntoIterator<Item = (String, f64)>) -> Self {
        Self {
            name: name.into(),
            baseline: baseline.into_iter().collect(),
            levels: BTreeMap::new(),
            deltas: BTreeMap::new(),
        }
    }

    fn structural(name: &str, values: [f64; 4]) -> Self {
        let cols = [ASSIGNED_IPS, HOSTING_IPS, HOSTED_DOMAINS, PCT_SHARED];
        Self::new(name, cols.iter().map(|c| c.to_string()).zip(values))
    }

    /// Small shared-hosting provider: little IP space, everything on shared IPs.
    pub fn small_provider() -> Self {
        Self::structural("small shared hosting", [0.47, 0.47, 1.95, 100.0])
    }

    /// Large web-hosting provider with a huge assigned address space.
    pub fn large_provider() -> Self {
        Self::structural("large web hosting", [6.85, 5.67, 5.68, 0.48])
    }

    /// Median of every covariate of `fit` over the rows it was estimated on.
    pub fn medians(d: &Dataset, fit: &FitResult) -> Result<Self, ScenarioError> {
        let mut baseline = BTreeMap::new();
        for col in fit.covariate_columns() {
            let column = d.numeric_column(&col.name)?;
            let values: Vec<f64> = fit
                .rows
                .iter()
                .filter_map(|&r| column.get(r).copied().flatten())
                .collect();
            baseline.insert(
                col.name.clone(),
                summarize_values(&col.name, &values)?.median,
            );
        }
        Ok(Self {
            name: "medians".into(),
            baseline,
            levels: BTreeMap::new(),
            deltas: BTreeMap::new(),
        })
    }

    pub fn delta(&self, variable: &str) -> f64 {
        self.deltas.get(variable).copied().unwrap_or(1.0)
    }

    fn covariates(&self, fit: &FitResult) -> Result<Covariates, ScenarioError> {
        let mut x = Covariates::new();
        for col in fit.covariate_columns() {
            let v = self
                .baseline
                .get(&col.name)
                .ok_or_else(|| ScenarioError::MissingBaseline {
                    scenario: self.name.clone(),
                    variable: col.name.clone(),
                })?;
            x = x.value(col.name.clone(), *v);
        }
        for coding in &fit.factors {
            let level = self.levels.get(&coding.factor).unwrap_or(&coding.reference);
            x = x.level(coding.factor.clone(), level.clone());
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: String,
    pub variable: String,
    pub delta: f64,
    pub baseline_rate: f64,
    pub incremented_rate: f64,
    pub multiplier: f64,
    pub absolute_change: f64,
}

/// One row per (scenario, covariate): expected counts at the baseline and
/// after incrementing that covariate alone.
pub fn scenario_table(
    fit: &FitResult,
    scenarios: &[ScenarioSpec],
) -> Result<Vec<ScenarioRow>, ScenarioError> {
    let mut rows = Vec::new();
    for s in scenarios {
        let x = s.covariates(fit)?;
        let base = predict(fit, &x)?;
        for col in fit.covariate_columns() {
            let delta = s.delta(&col.name);
            let m = partial_effect(fit, &col.name, delta)?;
            let incremented = base * m;
            rows.push(ScenarioRow {
                scenario: s.name.clone(),
                variable: col.name.clone(),
                delta,
                baseline_rate: base,
                incremented_rate: incremented,
                multiplier: m,
                absolute_change: incremented - base,
            });
        }
    }
    Ok(rows)
}

const HEADER: [&str; 7] = [
    "scenario",
    "variable",
    "delta",
    "baseline_rate",
    "incremented_rate",
    "multiplier",
    "absolute_change",
];

pub fn write_scenarios<W: Write>(
    rows: &[ScenarioRow],
    writer: W,
    delimiter: u8,
) -> Result<(), ScenarioError> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.variable.clone(),
            format_num(r.delta),
            format_num(r.baseline_rate),
            format_num(r.incremented_rate),
            format_num(r.multiplier),
            format_num(r.absolute_change),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn scenarios_markdown(rows: &[ScenarioRow]) -> String {
    let mut out = format!(
        "| {} |\n|{}\n",
        HEADER.join(" | "),
        "---|".repeat(HEADER.len())
    );
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
            r.scenario,
            r.variable,
            r.delta,
            r.baseline_rate,
            r.incremented_rate,
            r.multiplier,
            r.absolute_change
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{build_design, fit_poisson, FitOptions, ModelSpec};
    use crate::ingest::ProviderRecord;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sample_fit(fixed: bool) -> (Dataset, FitResult) {
        let rows = [
            (0.5, 0.4, 1.9, 90.0, 1, "a"),
            (1.5, 0.9, 2.5, 70.0, 3, "a"),
            (2.5, 1.6, 2.0, 40.0, 4, "b"),
            (3.0, 2.2, 3.1, 20.0, 9, "b"),
            (4.0, 2.0, 3.9, 10.0, 12, "a"),
            (5.5, 3.1, 4.2, 5.0, 25, "b"),
            (6.0, 4.4, 5.0, 2.0, 41, "a"),
            (2.0, 1.1, 1.2, 60.0, 2, "b"),
        ];
        let recs = rows
            .iter()
            .enumerate()
            .map(|(i, (a, h, d, p, y, c))| {
                let mut r = ProviderRecord::new(format!("p{i}"), [*a, *h, *d, *p], *y);
                r.country = Some(c.to_string());
                r
            })
            .collect();
        let d = Dataset::new(recs, "t").unwrap();
        let mut spec = ModelSpec::new(
            "abuse_count",
            [ASSIGNED_IPS, HOSTING_IPS, HOSTED_DOMAINS, PCT_SHARED],
        );
        if fixed {
            spec = spec.with_fixed_effects(["country"]);
        }
        let fit = fit_poisson(&build_design(&d, &spec).unwrap(), &FitOptions::default()).unwrap();
        (d, fit)
    }

    #[test]
    fn multiplier_examples() {
        assert_abs_diff_eq!(multiplier(1.186, 1.0), 3.273, epsilon = 1e-3);
        assert_abs_diff_eq!(multiplier(-0.007, 1.0), 0.993, epsilon = 1e-3);
        assert_eq!(multiplier(4.2, 0.0), 1.0);
    }

    #[test]
    fn unknown_variable_errors() {
        let (_, fit) = sample_fit(false);
        assert!(matches!(
            partial_effect(&fit, "price_per_year", 1.0),
            Err(ScenarioError::UnknownVariable(_))
        ));
        assert!(partial_effect(&fit, "(Intercept)", 1.0).is_err());
    }

    #[test]
    fn presets_are_taken_verbatim() {
        let s = ScenarioSpec::small_provider();
        assert_eq!(s.baseline[ASSIGNED_IPS], 0.47);
        assert_eq!(s.baseline[HOSTING_IPS], 0.47);
        assert_eq!(s.baseline[HOSTED_DOMAINS], 1.95);
        assert_eq!(s.baseline[PCT_SHARED], 100.0);
        let l = ScenarioSpec::large_provider();
        assert_eq!(
            [
                l.baseline[ASSIGNED_IPS],
                l.baseline[HOSTING_IPS],
                l.baseline[HOSTED_DOMAINS],
                l.baseline[PCT_SHARED]
            ],
            [6.85, 5.67, 5.68, 0.48]
        );
    }

    #[test]
    fn incremented_over_baseline_is_the_multiplier() {
        let (d, fit) = sample_fit(false);
        let scenarios = [
            ScenarioSpec::medians(&d, &fit).unwrap(),
            ScenarioSpec::small_provider(),
            ScenarioSpec::large_provider(),
        ];
        let rows = scenario_table(&fit, &scenarios).unwrap();
        assert_eq!(rows.len(), 12);
        for r in &rows {
            assert_abs_diff_eq!(
                r.incremented_rate / r.baseline_rate,
                r.multiplier,
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(
                r.multiplier,
                partial_effect(&fit, &r.variable, 1.0).unwrap(),
                epsilon = 1e-15
            );
        }
        // same multiplier, different absolute change across scenarios
        let hosted: Vec<&ScenarioRow> = rows
            .iter()
            .filter(|r| r.variable == HOSTED_DOMAINS)
            .collect();
        assert_eq!(hosted[0].multiplier, hosted[1].multiplier);
        assert_ne!(hosted[0].absolute_change, hosted[1].absolute_change);
    }

    #[test]
    fn medians_come_from_fit_rows() {
        let (d, fit) = sample_fit(false);
        let m = ScenarioSpec::medians(&d, &fit).unwrap();
        assert_eq!(m.baseline[ASSIGNED_IPS], 2.75);
    }

    #[test]
    fn fixed_effect_scenarios_default_to_reference_level() {
        let (_, fit) = sample_fit(true);
        let mut s = ScenarioSpec::small_provider();
        let at_ref = scenario_table(&fit, std::slice::from_ref(&s)).unwrap();
        s.levels.insert("country".into(), "a".into());
        assert_eq!(scenario_table(&fit, &[s.clone()]).unwrap(), at_ref);
        s.levels.insert("country".into(), "b".into());
        let other = scenario_table(&fit, &[s.clone()]).unwrap();
        assert_ne!(other[0].baseline_rate, at_ref[0].baseline_rate);
        s.levels.insert("country".into(), "zz".into());
        assert!(scenario_table(&fit, &[s]).is_err());
    }

    #[test]
    fn missing_baseline_value_errors() {
        let (_, fit) = sample_fit(false);
        let mut s = ScenarioSpec::small_provider();
        s.baseline.remove(PCT_SHARED);
        assert!(matches!(
            scenario_table(&fit, &[s]),
            Err(ScenarioError::MissingBaseline { .. })
        ));
    }

    #[test]
    fn outputs_render() {
        let (_, fit) = sample_fit(false);
        let rows = scenario_table(&fit, &[ScenarioSpec::small_provider()]).unwrap();
        let md = scenarios_markdown(&rows);
        assert_eq!(md.lines().count(), 2 + rows.len());
        let mut buf = Vec::new();
        write_scenarios(&rows, &mut buf, b',').unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("scenario,variable,delta,"));
    }

    proptest! {
        #[test]
        fn multiplier_is_additive_in_delta(beta in -3.0f64..3.0, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let lhs = multiplier(beta, a + b);
            let rhs = multiplier(beta, a) * multiplier(beta, b);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(1.0));
        }

        #[test]
        fn multiplier_does_not_depend_on_baseline(
            base in proptest::collection::vec(0.0f64..6.0, 3),
            pct in 0.0f64..100.0,
            delta in -1.0f64..2.0,
        ) {
            let (_, fit) = sample_fit(false);
            let specs: Vec<ScenarioSpec> = (0..3)
                .map(|i| {
                    let mut s = ScenarioSpec::structural(&format!("s{i}"), [base[i], base[(i + 1) % 3], base[(i + 2) % 3], pct]);
                    s.deltas.insert(HOSTING_IPS.into(), delta);
                    s
                })
                .collect();
            let rows = scenario_table(&fit, &specs).unwrap();
            let m: Vec<f64> = rows.iter().filter(|r| r.variable == HOSTING_IPS).map(|r| r.incremented_rate / r.baseline_rate).collect();
            prop_assert!((m[0] - m[1]).abs() < 1e-9 * m[0] && (m[1] - m[2]).abs() < 1e-9 * m[1]);
        }
    }
}
