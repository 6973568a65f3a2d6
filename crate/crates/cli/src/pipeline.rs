//! End-to-end run: features, twins, fits, diagnostics, scenarios, rankings.

use std::fs;
use std::path::PathBuf;

use abuse_glm::diagnostics::{rank_providers, BaselineKind};
use abuse_glm::glm::{FitOptions, ModelSpec};
use abuse_glm::ingest::{
    ABUSE_COUNT, ASSIGNED_IPS, COUNTRY, HOSTED_DOMAINS, HOSTING_IPS, ICT_DEV_INDEX, PCT_SHARED,
    POPULARITY_INDEX, PRICE_PER_YEAR, TIME_IN_BUSINESS, TWIN_ID, WORDPRESS_USE,
};
use abuse_glm::scenarios::scenario_table;
use abuse_glm::twins::sample_seeds;
use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use crate::commands::{
    fit_artifacts, matching_config, rank_artifacts, scenario_artifacts, scenario_specs,
    twin_artifacts, Artifact, FeatureFiles,
};
use crate::error::StageError;
use crate::fixture;
use crate::manifest::RunManifest;
use crate::models::{fit_models, stepwise};
use crate::report::ModelTable;

pub const ALT_ABUSE_COUNT: &str = "abuse_count_alt";

/// Files written by a pipeline run, besides `manifest.json`.
pub const ARTIFACTS: [&str; 7] = [
    "providers.csv",
    "twin_pairings.csv",
    "twins_dataset.csv",
    "fit_tables.md",
    "fit_results.json",
    "scenarios.csv",
    "rankings.csv",
];

#[derive(Debug, Clone, Args, Serialize)]
pub struct PipelineArgs {
    /// Directory holding the raw input files (see `fixture`).
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long, default_value_t = 105)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',')]
    pub match_vars: Vec<String>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub standardize: bool,
    /// Columns both twin members must have in the twins dataset.
    #[arg(long, value_delimiter = ',')]
    pub required: Vec<String>,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.context(StageError { stage })
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn spec(preds: &[&str], fes: &[&str]) -> ModelSpec {
    ModelSpec::new(ABUSE_COUNT, strings(preds)).with_fixed_effects(strings(fes))
}

/// Twin-sample models: fixed effects alone, then the costly-to-collect
/// variables with and without country effects.
fn twin_specs() -> Vec<ModelSpec> {
    vec![
        spec(&[], &[TWIN_ID]),
        spec(&[], &[TWIN_ID, COUNTRY]),
        spec(
            &[POPULARITY_INDEX, TIME_IN_BUSINESS, ICT_DEV_INDEX],
            &[TWIN_ID, COUNTRY],
        ),
        spec(
            &[
                PRICE_PER_YEAR,
                POPULARITY_INDEX,
                TIME_IN_BUSINESS,
                WORDPRESS_USE,
            ],
            &[TWIN_ID],
        ),
        spec(
            &[
                PRICE_PER_YEAR,
                POPULARITY_INDEX,
                TIME_IN_BUSINESS,
                ICT_DEV_INDEX,
                WORDPRESS_USE,
            ],
            &[TWIN_ID, COUNTRY],
        ),
    ]
}

#[derive(Serialize)]
struct ResultsDoc<'a> {
    manifest: &'a RunManifest,
    features: &'a abuse_glm::features::FeatureReport,
    tables: Vec<crate::report::TableDocument>,
}

pub fn cmd_pipeline(args: &PipelineArgs) -> Result<()> {
    let dir = &args.inputs;
    let alt = dir.join(fixture::ALT_ABUSE);
    let ranks = dir.join(fixture::RANKS);
    let enrichment = dir.join(fixture::ENRICHMENT);
    let files = FeatureFiles {
        allocations: &dir.join(fixture::ALLOCATIONS),
        observations: &dir.join(fixture::OBSERVATIONS),
        abuse: &dir.join(fixture::ABUSE),
        alt_abuse: if alt.exists() {
            vec![(ALT_ABUSE_COUNT.to_string(), alt)]
        } else {
            Vec::new()
        },
        ranks: ranks.exists().then_some(ranks.as_path()),
        rank_list_size: None,
        enrichment: enrichment.exists().then_some(enrichment.as_path()),
        label: "primary",
        delimiter: b',',
    };
    let mut manifest = RunManifest::new("pipeline", args, Some(args.seed))?;
    staged(
        "inputs",
        files.paths().iter().try_for_each(|p| manifest.add_input(p)),
    )?;

    let (population, report) = staged("features", files.build())?;
    let mut artifacts = vec![Artifact::new(
        "providers.csv",
        staged("features", crate::commands::table_text(&population))?,
    )];

    let seeds = staged(
        "twins",
        sample_seeds(&population, args.seeds, args.seed).map_err(Into::into),
    )?;
    let cfg = matching_config(&args.match_vars, args.standardize, false);
    let (twins, twin_files) = staged(
        "twins",
        twin_artifacts(&population, &seeds, &cfg, &args.required, &manifest),
    )?;
    artifacts.extend(twin_files.into_iter().filter(|a| a.name.ends_with(".csv")));

    let opts = FitOptions::default();
    let structural = strings(&[ASSIGNED_IPS, HOSTING_IPS, HOSTED_DOMAINS, PCT_SHARED]);
    let mut responses = vec![ABUSE_COUNT];
    if population.has_column(ALT_ABUSE_COUNT) {
        responses.push(ALT_ABUSE_COUNT);
    }
    let mut tables = Vec::new();
    for response in responses {
        let models = staged(
            "fit",
            fit_models(
                &population,
                &stepwise(response, &structural, &[]),
                BaselineKind::InterceptOnly,
                &opts,
            ),
        )?;
        tables.push(ModelTable {
            title: format!("Population GLM: {response}"),
            response: response.to_string(),
            baseline: BaselineKind::InterceptOnly,
            models,
        });
    }
    let twin_models = staged(
        "fit",
        fit_models(
            &twins.dataset,
            &twin_specs(),
            BaselineKind::FixedEffectsOnly,
            &opts,
        ),
    )?;
    tables.push(ModelTable {
        title: format!("Statistical twins GLM: {ABUSE_COUNT}"),
        response: ABUSE_COUNT.to_string(),
        baseline: BaselineKind::FixedEffectsOnly,
        models: twin_models,
    });

    let fitted = staged(
        "diagnostics",
        fit_artifacts(&tables, &manifest, "fit_tables"),
    )?;
    let md = fitted
        .iter()
        .find(|a| a.name.ends_with(".md"))
        .map(|a| a.body.clone())
        .unwrap_or_default();
    artifacts.push(Artifact::new("fit_tables.md", md));
    let doc = ResultsDoc {
        manifest: &manifest,
        features: &report,
        tables: tables.iter().map(ModelTable::document).collect(),
    };
    artifacts.push(Artifact::new(
        "fit_results.json",
        serde_json::to_string_pretty(&doc)? + "\n",
    ));

    let full = tables[0]
        .models
        .last()
        .expect("stepwise sequence is non-empty");
    let scen = staged(
        "scenarios",
        scenario_specs(&strings(&["medians", "small", "large"]), &[], full)
            .and_then(|s| Ok(scenario_table(&full.fit, &s)?))
            .and_then(|rows| scenario_artifacts(&rows, &manifest)),
    )?;
    artifacts.extend(scen.into_iter().filter(|a| a.name.ends_with(".csv")));

    let ranked = staged(
        "rank",
        rank_providers(&full.data, &full.fit)
            .map_err(Into::into)
            .and_then(|s| rank_artifacts(&s, &manifest)),
    )?;
    artifacts.extend(ranked.into_iter().filter(|a| a.name.ends_with(".csv")));

    staged("write", write_all(args, &manifest, &artifacts))
}

fn write_all(args: &PipelineArgs, manifest: &RunManifest, artifacts: &[Artifact]) -> Result<()> {
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    for a in artifacts {
        fs::write(args.out_dir.join(&a.name), &a.body)?;
    }
    fs::write(
        args.out_dir.join("manifest.json"),
        manifest.to_json() + "\n",
    )?;
    Ok(())
}
