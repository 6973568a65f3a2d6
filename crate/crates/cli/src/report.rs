//! Side-by-side regression tables in Markdown and long-format CSV.

use std::io::Write;

use abuse_glm::diagnostics::BaselineKind;
use abuse_glm::glm::{wald_tests, ColumnKind, INTERCEPT};
use abuse_glm::ingest::format_num;
use anyhow::Result;
use serde::Serialize;

use crate::models::{FittedModel, ModelDocument};

pub struct ModelTable {
    pub title: String,
    pub response: String,
    pub baseline: BaselineKind,
    pub models: Vec<FittedModel>,
}

#[derive(Serialize)]
pub struct TableDocument {
    pub title: String,
    pub response: String,
    pub baseline: BaselineKind,
    pub models: Vec<ModelDocument>,
}

/// Three decimals; values that would print as zero keep one significant digit.
pub fn fmt3(v: f64) -> String {
    if !v.is_finite() {
        return "n/a".into();
    }
    if v == 0.0 || v.abs() >= 0.0005 {
        return format!("{v:.3}");
    }
    let decimals = (-v.abs().log10()).ceil() as usize;
    format!("{v:.decimals$}")
}

impl ModelTable {
    pub fn document(&self) -> TableDocument {
        TableDocument {
            title: self.title.clone(),
            response: self.response.clone(),
            baseline: self.baseline,
            models: self.models.iter().map(FittedModel::document).collect(),
        }
    }

    fn predictor_rows(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for m in &self.models {
            for p in &m.fit.spec.predictors {
                if !names.contains(p) {
                    names.push(p.clone());
                }
            }
        }
        names
    }

    fn factor_rows(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for m in &self.models {
            for f in &m.fit.spec.fixed_effects {
                if !names.contains(f) {
                    names.push(f.clone());
                }
            }
        }
        names
    }

    fn has_total(&self) -> bool {
        self.models.iter().any(|m| m.total.is_some())
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "### {}\n\nResponse: `{}` (Poisson, log link)\n\n",
            self.title, self.response
        );
        let labels: Vec<&str> = self.models.iter().map(|m| m.label.as_str()).collect();
        out.push_str(&format!("| | {} |\n", labels.join(" | ")));
        out.push_str(&format!("|---|{}\n", "---:|".repeat(labels.len())));

        let mut coef_rows = self.predictor_rows();
        coef_rows.push(INTERCEPT.to_string());
        for name in &coef_rows {
            let mut est = Vec::new();
            let mut se = Vec::new();
            for m in &self.models {
                let test = wald_tests(&m.fit).into_iter().find(|t| &t.name == name);
                match test {
                    Some(t) => {
                        est.push(format!("{}{}", fmt3(t.estimate), t.stars));
                        se.push(format!("({})", fmt3(t.std_error)));
                    }
                    None => {
                        est.push(String::new());
                        se.push(String::new());
                    }
                }
            }
            let label = if name == INTERCEPT {
                "Constant"
            } else {
                name.as_str()
            };
            out.push_str(&format!("| {label} | {} |\n", est.join(" | ")));
            out.push_str(&format!("| | {} |\n", se.join(" | ")));
        }
        for factor in self.factor_rows() {
            let cells: Vec<&str> = self
                .models
                .iter()
                .map(|m| {
                    if m.fit.spec.fixed_effects.contains(&factor) {
                        "Yes"
                    } else {
                        "No"
                    }
                })
                .collect();
            out.push_str(&format!(
                "| {factor} fixed effects | {} |\n",
                cells.join(" | ")
            ));
        }
        let row = |name: &str, cells: Vec<String>| format!("| {name} | {} |\n", cells.join(" | "));
        out.push_str(&row(
            "Observations",
            self.models.iter().map(|m| m.fit.n.to_string()).collect(),
        ));
        out.push_str(&row(
            "Log Likelihood",
            self.models
                .iter()
                .map(|m| fmt3(m.fit.log_likelihood))
                .collect(),
        ));
        out.push_str(&row(
            "Akaike Inf. Crit.",
            self.models.iter().map(|m| fmt3(m.fit.aic)).collect(),
        ));
        out.push_str(&row(
            "Dispersion",
            self.models
                .iter()
                .map(|m| m.dispersion.map(|d| fmt3(d.phi_hat)).unwrap_or_default())
                .collect(),
        ));
        out.push_str(&row(
            "Pseudo R²",
            self.models
                .iter()
                .map(|m| {
                    m.pseudo
                        .as_ref()
                        .map(|a| fmt3(a.pseudo_r2))
                        .unwrap_or_default()
                })
                .collect(),
        ));
        if self.has_total() {
            out.push_str(&row(
                "Total pseudo R²",
                self.models
                    .iter()
                    .map(|m| {
                        m.total
                            .as_ref()
                            .map(|a| fmt3(a.pseudo_r2))
                            .unwrap_or_default()
                    })
                    .collect(),
            ));
        }
        out.push_str(
            "\nNote: \\*p<0.05; \\*\\*p<0.01; \\*\\*\\*p<0.001. Standard errors in brackets.\n",
        );
        let pseudo_base = if self.factor_rows().is_empty() {
            BaselineKind::InterceptOnly
        } else {
            self.baseline
        };
        out.push_str(&format!("Pseudo R² baseline: {}.", pseudo_base.label()));
        if self.has_total() {
            out.push_str(" Total pseudo R² baseline: intercept-only.");
        }
        out.push('\n');
        for m in &self.models {
            if !m.notes.is_empty() {
                out.push_str(&format!("\n{}: {}.", m.label, m.notes.join("; ")));
            }
        }
        out.push('\n');
        out
    }

    /// Long format: one row per (model, coefficient) plus fit statistics,
    /// at full precision.
    pub fn write_csv<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for m in &self.models {
            let base = [
                self.title.as_str(),
                self.response.as_str(),
                m.label.as_str(),
            ];
            for (t, col) in wald_tests(&m.fit).iter().zip(&m.fit.columns) {
                let kind = match col.kind {
                    ColumnKind::Intercept => "intercept",
                    ColumnKind::Predictor => "predictor",
                    ColumnKind::FixedEffect { .. } => "fixed_effect",
                };
                let opt = |v: Option<f64>| v.map(format_num).unwrap_or_default();
                w.write_record(base.iter().map(|s| s.to_string()).chain([
                    t.name.clone(),
                    kind.to_string(),
                    format_num(t.estimate),
                    format_num(t.std_error),
                    opt(t.z),
                    opt(t.p_value),
                    t.stars.clone(),
                ]))?;
            }
            let stats = [
                ("observations", Some(m.fit.n as f64)),
                ("log_likelihood", Some(m.fit.log_likelihood)),
                ("aic", Some(m.fit.aic)),
                ("deviance", Some(m.fit.deviance)),
                ("dispersion", m.dispersion.map(|d| d.phi_hat)),
                ("pseudo_r2", m.pseudo.as_ref().map(|a| a.pseudo_r2)),
                ("total_pseudo_r2", m.total.as_ref().map(|a| a.pseudo_r2)),
            ];
            for (name, v) in stats {
                if let Some(v) = v {
                    w.write_record(base.iter().map(|s| s.to_string()).chain([
                        name.to_string(),
                        "statistic".to_string(),
                        format_num(v),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                    ]))?;
                }
            }
        }
        Ok(())
    }
}

pub const CSV_HEADER: [&str; 10] = [
    "table",
    "response",
    "model",
    "term",
    "kind",
    "estimate",
    "std_error",
    "z",
    "p_value",
    "stars",
];

pub fn tables_csv(tables: &[ModelTable]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for t in tables {
        t.write_csv(&mut w)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}
