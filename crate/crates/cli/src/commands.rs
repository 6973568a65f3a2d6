use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use abuse_glm::diagnostics::{rank_providers, write_rankings, BaselineKind, ProviderScore};
use abuse_glm::features::{self, build_provider_table, FeatureInputs};
use abuse_glm::glm::{FitOptions, ModelSpec};
use abuse_glm::ingest::{self, describe, load_table, write_table, Dataset, Schema, TWIN_ID};
use abuse_glm::scenarios::{
    scenario_table, scenarios_markdown, write_scenarios, ScenarioRow, ScenarioSpec,
};
use abuse_glm::sim::{
    run_monte_carlo, summarize, write_samples, SimulationConfig, SimulationSummary,
};
use abuse_glm::twins::{
    listwise_exclude, match_twins, sample_seeds, write_pairings, MatchOutcome, MatchingConfig,
    TwinSample,
};
use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::error::InputError;
use crate::fixture::{self, FixtureConfig};
use crate::manifest::RunManifest;
use crate::models::{fit_model, fit_models, parse_model, stepwise, FittedModel};
use crate::report::{tables_csv, ModelTable, TableDocument};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Md,
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Md => "md",
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Intercept,
    Fe,
}

impl From<Baseline> for BaselineKind {
    fn from(b: Baseline) -> Self {
        match b {
            Baseline::Intercept => BaselineKind::InterceptOnly,
            Baseline::Fe => BaselineKind::FixedEffectsOnly,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Provider table (delimited text with a header row).
    #[arg(long)]
    pub input: PathBuf,
    /// Header mapping as `field=column,...`.
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Md)]
    pub format: Format,
    /// Write every artifact plus `manifest.json` here instead of printing.
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Response column(s); one table per response.
    #[arg(long, value_delimiter = ',', default_value = ingest::ABUSE_COUNT)]
    pub response: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub predictors: Vec<String>,
    /// Factors coded as dummies; `twin` is short for `twin_id`.
    #[arg(long, value_delimiter = ',')]
    pub fixed_effects: Vec<String>,
    /// Fit the nested sequence adding one predictor at a time.
    #[arg(long)]
    pub stepwise: bool,
    /// Explicit model `pred,pred|factor,factor`; repeat for several columns.
    #[arg(long = "model")]
    pub models: Vec<String>,
    #[arg(long, value_enum, default_value_t = Baseline::Intercept)]
    pub baseline: Baseline,
}

fn delimiter(c: char) -> Result<u8> {
    u8::try_from(c).map_err(|_| InputError(format!("delimiter `{c}` must be a single byte")).into())
}

fn factor_alias(name: &str) -> String {
    if name == "twin" {
        TWIN_ID.to_string()
    } else {
        name.to_string()
    }
}

impl ModelArgs {
    pub fn specs(&self, response: &str) -> Result<Vec<ModelSpec>> {
        let fes: Vec<String> = self.fixed_effects.iter().map(|f| factor_alias(f)).collect();
        let mut specs = if !self.models.is_empty() {
            self.models
                .iter()
                .map(|m| parse_model(response, m))
                .collect::<Result<Vec<_>>>()?
        } else if self.stepwise {
            stepwise(response, &self.predictors, &fes)
        } else {
            vec![ModelSpec::new(response, self.predictors.clone()).with_fixed_effects(fes.clone())]
        };
        for s in &mut specs {
            s.fixed_effects = s.fixed_effects.iter().map(|f| factor_alias(f)).collect();
            s.validate()?;
        }
        Ok(specs)
    }
}

pub fn load_dataset(args: &DataArgs) -> Result<Dataset> {
    let mut schema = match &args.schema {
        Some(s) => Schema::parse(s)?,
        None => Schema::default(),
    };
    schema = schema.with_delimiter(delimiter(args.delimiter)?);
    Ok(load_table(&args.input, &schema)?)
}

pub struct Artifact {
    pub name: String,
    pub body: String,
}

impl Artifact {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            body: body.into(),
        }
    }
}

fn json<T: Serialize>(manifest: &RunManifest, body: &T) -> Result<String> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        manifest: &'a RunManifest,
        #[serde(flatten)]
        body: &'a T,
    }
    Ok(serde_json::to_string_pretty(&Doc { manifest, body })? + "\n")
}

/// Writes every artifact into the output directory, or prints the one
/// matching `--format`.
pub fn deliver(out: &OutputArgs, manifest: &RunManifest, artifacts: &[Artifact]) -> Result<()> {
    match &out.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for a in artifacts {
                let path = dir.join(&a.name);
                fs::write(&path, &a.body).with_context(|| format!("writing {}", path.display()))?;
            }
            fs::write(dir.join("manifest.json"), manifest.to_json() + "\n")?;
        }
        None => {
            let ext = out.format.ext();
            let chosen = artifacts
                .iter()
                .find(|a| a.name.ends_with(&format!(".{ext}")))
                .or_else(|| artifacts.first());
            if let Some(a) = chosen {
                print!("{}", a.body);
            }
        }
    }
    Ok(())
}

// ---- describe

#[derive(Debug, Clone, Args, Serialize)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Columns to summarise; defaults to every numeric column present.
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn numeric_columns(d: &Dataset) -> Vec<String> {
    d.columns()
        .into_iter()
        .filter(|c| c != ingest::PROVIDER_ID)
        .filter(|c| matches!(d.numeric_column(c), Ok(v) if v.iter().any(Option::is_some)))
        .collect()
}

pub fn describe_artifacts(
    d: &Dataset,
    columns: &[String],
    manifest: &RunManifest,
    stem: &str,
) -> Result<Vec<Artifact>> {
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let table = describe(d, &cols)?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv, b',')?;
    Ok(vec![
        Artifact::new(
            format!("{stem}.md"),
            table.to_markdown() + &manifest.markdown_block(),
        ),
        Artifact::new(format!("{stem}.csv"), String::from_utf8(csv)?),
        Artifact::new(format!("{stem}.json"), json(manifest, &table)?),
    ])
}

pub fn cmd_describe(args: &DescribeArgs) -> Result<()> {
    let d = load_dataset(&args.data)?;
    let columns = if args.columns.is_empty() {
        numeric_columns(&d)
    } else {
        args.columns.clone()
    };
    let mut manifest = RunManifest::new("describe", args, None)?;
    manifest.add_input(&args.data.input)?;
    let artifacts = describe_artifacts(&d, &columns, &manifest, "describe")?;
    deliver(&args.output, &manifest, &artifacts)
}

// ---- features

#[derive(Debug, Clone, Args, Serialize)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub allocations: PathBuf,
    #[arg(long)]
    pub observations: PathBuf,
    #[arg(long)]
    pub abuse: PathBuf,
    /// Additional abuse feed as `column=path`; becomes an extra count column.
    #[arg(long = "alt-abuse")]
    pub alt_abuse: Vec<String>,
    #[arg(long)]
    pub ranks: Option<PathBuf>,
    #[arg(long)]
    pub rank_list_size: Option<u32>,
    #[arg(long)]
    pub enrichment: Option<PathBuf>,
    /// Label of the primary abuse source.
    #[arg(long, default_value = "primary")]
    pub label: String,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f =
        File::open(path).map_err(|e| InputError(format!("cannot open {}: {e}", path.display())))?;
    Ok(BufReader::new(f))
}

fn file_label(path: &Path) -> String {
    path.file_name().map_or_else(
        || path.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

pub struct FeatureFiles<'a> {
    pub allocations: &'a Path,
    pub observations: &'a Path,
    pub abuse: &'a Path,
    pub alt_abuse: Vec<(String, PathBuf)>,
    pub ranks: Option<&'a Path>,
    pub rank_list_size: Option<u32>,
    pub enrichment: Option<&'a Path>,
    pub label: &'a str,
    pub delimiter: u8,
}

impl FeatureFiles<'_> {
    pub fn paths(&self) -> Vec<PathBuf> {
        let mut v = vec![
            self.allocations.to_path_buf(),
            self.observations.to_path_buf(),
            self.abuse.to_path_buf(),
        ];
        v.extend(self.alt_abuse.iter().map(|(_, p)| p.clone()));
        v.extend(self.ranks.map(Path::to_path_buf));
        v.extend(self.enrichment.map(Path::to_path_buf));
        v
    }

    pub fn build(&self) -> Result<(Dataset, features::FeatureReport)> {
        let dl = self.delimiter;
        let read = |p: &Path| -> Result<Vec<features::AbuseRecord>> {
            Ok(features::read_abuse(open(p)?, &file_label(p), dl)?)
        };
        let inputs = FeatureInputs {
            allocations: features::read_allocations(
                open(self.allocations)?,
                &file_label(self.allocations),
                dl,
            )?,
            observations: features::read_observations(
                open(self.observations)?,
                &file_label(self.observations),
                dl,
            )?,
            abuse: read(self.abuse)?,
            alt_abuse: self
                .alt_abuse
                .iter()
                .map(|(name, p)| Ok((name.clone(), read(p)?)))
                .collect::<Result<Vec<_>>>()?,
            ranks: match self.ranks {
                Some(p) => Some(features::read_ranks(open(p)?, &file_label(p), dl)?),
                None => None,
            },
            rank_list_size: self.rank_list_size,
            enrichment: match self.enrichment {
                Some(p) => features::read_enrichment(open(p)?, &file_label(p), dl)?,
                None => Default::default(),
            },
        };
        Ok(build_provider_table(&inputs, self.label)?)
    }
}

pub fn table_text(d: &Dataset) -> Result<String> {
    let mut buf = Vec::new();
    write_table(d, &mut buf, b',')?;
    Ok(String::from_utf8(buf)?)
}

pub fn cmd_features(args: &FeaturesArgs) -> Result<()> {
    let alt_abuse = args
        .alt_abuse
        .iter()
        .map(|s| match s.split_once('=') {
            Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
            _ => Err(InputError(format!("--alt-abuse expects column=path, got `{s}`")).into()),
        })
        .collect::<Result<Vec<_>>>()?;
    let files = FeatureFiles {
        allocations: &args.allocations,
        observations: &args.observations,
        abuse: &args.abuse,
        alt_abuse,
        ranks: args.ranks.as_deref(),
        rank_list_size: args.rank_list_size,
        enrichment: args.enrichment.as_deref(),
        label: &args.label,
        delimiter: delimiter(args.delimiter)?,
    };
    let mut manifest = RunManifest::new("features", args, None)?;
    for p in files.paths() {
        manifest.add_input(&p)?;
    }
    let (d, report) = files.build()?;
    let artifacts = vec![
        Artifact::new("providers.csv", table_text(&d)?),
        Artifact::new("features_report.json", json(&manifest, &report)?),
    ];
    deliver(&args.output, &manifest, &artifacts)
}

// ---- twins

#[derive(Debug, Clone, Args, Serialize)]
pub struct TwinsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of seeds drawn uniformly from the population.
    #[arg(long, default_value_t = 105)]
    pub seeds: usize,
    /// File with a `provider_id` column naming the seeds instead.
    #[arg(long)]
    pub seed_ids: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',')]
    pub match_vars: Vec<String>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub standardize: bool,
    /// Match every population provider at most once.
    #[arg(long)]
    pub no_reuse: bool,
    /// Columns both twin members must have.
    #[arg(long, value_delimiter = ',')]
    pub required: Vec<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Serialize)]
pub struct TwinsReport<'a> {
    pub seeds: usize,
    pub pairings: usize,
    pub distinct_providers: usize,
    pub matching: &'a MatchOutcome,
    pub kept_twins: usize,
    pub dropped_twins: &'a [String],
    pub rows: usize,
}

pub fn matching_config(match_vars: &[String], standardize: bool, no_reuse: bool) -> MatchingConfig {
    let mut cfg = MatchingConfig::default();
    if !match_vars.is_empty() {
        cfg.variables = match_vars.to_vec();
    }
    cfg.standardize = standardize;
    cfg.allow_reuse = !no_reuse;
    cfg
}

fn read_seed_ids(path: &Path, population: &Dataset) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let col = rdr
        .headers()?
        .iter()
        .position(|h| h.trim() == ingest::PROVIDER_ID)
        .ok_or_else(|| InputError(format!("{} has no `provider_id` column", path.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let id = rec?.get(col).unwrap_or("").trim().to_string();
        let row = population
            .records()
            .iter()
            .position(|r| r.provider_id == id)
            .ok_or_else(|| InputError(format!("seed `{id}` is not in the population")))?;
        rows.push(row);
    }
    Ok(population.select(&rows)?)
}

pub fn twin_artifacts(
    population: &Dataset,
    seeds: &Dataset,
    cfg: &MatchingConfig,
    required: &[String],
    manifest: &RunManifest,
) -> Result<(TwinSample, Vec<Artifact>)> {
    let outcome = match_twins(seeds, population, cfg)?;
    let req: Vec<&str> = required.iter().map(String::as_str).collect();
    let sample = listwise_exclude(&outcome.pairings, population, &req)?;
    let mut pairs = Vec::new();
    write_pairings(&outcome.pairings, &mut pairs, b',')?;
    let report = TwinsReport {
        seeds: seeds.len(),
        pairings: outcome.pairings.len(),
        distinct_providers: abuse_glm::twins::distinct_providers(&outcome.pairings),
        matching: &outcome,
        kept_twins: sample.kept.len(),
        dropped_twins: &sample.dropped,
        rows: sample.dataset.len(),
    };
    let artifacts = vec![
        Artifact::new("twin_pairings.csv", String::from_utf8(pairs)?),
        Artifact::new("twins_dataset.csv", table_text(&sample.dataset)?),
        Artifact::new("twins_report.json", json(manifest, &report)?),
    ];
    Ok((sample, artifacts))
}

pub fn cmd_twins(args: &TwinsArgs) -> Result<()> {
    let d = load_dataset(&args.data)?;
    let mut manifest = RunManifest::new("twins", args, Some(args.seed))?;
    manifest.add_input(&args.data.input)?;
    let seeds = match &args.seed_ids {
        Some(p) => {
            manifest.add_input(p)?;
            read_seed_ids(p, &d)?
        }
        None => sample_seeds(&d, args.seeds, args.seed)?,
    };
    let cfg = matching_config(&args.match_vars, args.standardize, args.no_reuse);
    let (_, artifacts) = twin_artifacts(&d, &seeds, &cfg, &args.required, &manifest)?;
    deliver(&args.output, &manifest, &artifacts)
}

// ---- fit / diagnostics

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

pub fn fit_tables(d: &Dataset, model: &ModelArgs, title: &str) -> Result<Vec<ModelTable>> {
    let opts = FitOptions::default();
    model
        .response
        .iter()
        .map(|response| {
            let specs = model.specs(response)?;
            Ok(ModelTable {
                title: format!("{title}: {response}"),
                response: response.clone(),
                baseline: model.baseline.into(),
                models: fit_models(d, &specs, model.baseline.into(), &opts)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TablesDoc {
    tables: Vec<TableDocument>,
}

pub fn fit_artifacts(
    tables: &[ModelTable],
    manifest: &RunManifest,
    stem: &str,
) -> Result<Vec<Artifact>> {
    let md: String = tables.iter().map(|t| t.to_markdown() + "\n").collect();
    let doc = TablesDoc {
        tables: tables.iter().map(ModelTable::document).collect(),
    };
    Ok(vec![
        Artifact::new(format!("{stem}.md"), md + &manifest.markdown_block()),
        Artifact::new(format!("{stem}.csv"), tables_csv(tables)?),
        Artifact::new(format!("{stem}.json"), json(manifest, &doc)?),
    ])
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let d = load_dataset(&args.data)?;
    let mut manifest = RunManifest::new("fit", args, None)?;
    manifest.add_input(&args.data.input)?;
    let tables = fit_tables(&d, &args.model, "Poisson GLM")?;
    deliver(
        &args.output,
        &manifest,
        &fit_artifacts(&tables, &manifest, "fit")?,
    )
}

#[derive(Serialize)]
struct DiagnosticsRow {
    model: String,
    observations: usize,
    deviance: f64,
    dispersion: Option<abuse_glm::diagnostics::DispersionReport>,
    pseudo_r2: Option<abuse_glm::diagnostics::FitAssessment>,
    total_pseudo_r2: Option<abuse_glm::diagnostics::FitAssessment>,
    notes: Vec<String>,
}

pub fn cmd_diagnostics(args: &FitArgs) -> Result<()> {
    let d = load_dataset(&args.data)?;
    let mut manifest = RunManifest::new("diagnostics", args, None)?;
    manifest.add_input(&args.data.input)?;
    let tables = fit_tables(&d, &args.model, "Diagnostics")?;
    let mut rows = Vec::new();
    let mut md = String::new();
    for t in &tables {
        md.push_str(&format!(
            "### {}\n\n| model | n | deviance | chi-square | df | dispersion | pseudo R² | baseline | total pseudo R² |\n|---|---:|---:|---:|---:|---:|---:|---|---:|\n",
            t.title
        ));
        for m in &t.models {
            let f = crate::report::fmt3;
            let disp = m.dispersion;
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                m.label,
                m.fit.n,
                f(m.fit.deviance),
                disp.map(|d| f(d.chi_square)).unwrap_or_default(),
                disp.map(|d| d.df.to_string()).unwrap_or_default(),
                disp.map(|d| f(d.phi_hat)).unwrap_or_default(),
                m.pseudo
                    .as_ref()
                    .map(|a| f(a.pseudo_r2))
                    .unwrap_or_default(),
                m.pseudo
                    .as_ref()
                    .map(|a| a.baseline_kind.label())
                    .unwrap_or_default(),
                m.total.as_ref().map(|a| f(a.pseudo_r2)).unwrap_or_default(),
            ));
            rows.push(DiagnosticsRow {
                model: format!("{} {}", t.response, m.label),
                observations: m.fit.n,
                deviance: m.fit.deviance,
                dispersion: m.dispersion,
                pseudo_r2: m.pseudo.clone(),
                total_pseudo_r2: m.total.clone(),
                notes: m.notes.clone(),
            });
        }
        md.push('\n');
    }
    #[derive(Serialize)]
    struct Doc {
        models: Vec<DiagnosticsRow>,
    }
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record([
        "model",
        "observations",
        "deviance",
        "chi_square",
        "df",
        "phi_hat",
        "pseudo_r2",
        "total_pseudo_r2",
    ])?;
    let opt = |v: Option<f64>| v.map(ingest::format_num).unwrap_or_default();
    for r in &rows {
        csv.write_record([
            r.model.clone(),
            r.observations.to_string(),
            ingest::format_num(r.deviance),
            opt(r.dispersion.map(|d| d.chi_square)),
            r.dispersion.map(|d| d.df.to_string()).unwrap_or_default(),
            opt(r.dispersion.map(|d| d.phi_hat)),
            opt(r.pseudo_r2.as_ref().map(|a| a.pseudo_r2)),
            opt(r.total_pseudo_r2.as_ref().map(|a| a.pseudo_r2)),
        ])?;
    }
    let artifacts = vec![
        Artifact::new("diagnostics.md", md + &manifest.markdown_block()),
        Artifact::new("diagnostics.csv", String::from_utf8(csv.into_inner()?)?),
        Artifact::new("diagnostics.json", json(&manifest, &Doc { models: rows })?),
    ];
    deliver(&args.output, &manifest, &artifacts)
}

// ---- scenarios / rank

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScenariosArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Built-in scenarios: medians, small, large.
    #[arg(
        long = "scenario",
        value_delimiter = ',',
        default_value = "medians,small,large"
    )]
    pub scenarios: Vec<String>,
    /// Fixed-effect level as `factor=level` (default: reference level).
    #[arg(long = "level")]
    pub levels: Vec<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Fits the last (fullest) model of the specification.
fn target_model(d: &Dataset, model: &ModelArgs) -> Result<FittedModel> {
    let response = model
        .response
        .first()
        .ok_or_else(|| InputError("no response given".into()))?;
    let specs = model.specs(response)?;
    let spec = specs
        .last()
        .ok_or_else(|| InputError("no model specified".into()))?;
    fit_model(
        &format!("({})", specs.len()),
        d,
        spec,
        model.baseline.into(),
        &FitOptions::default(),
    )
}

pub fn scenario_specs(
    names: &[String],
    levels: &[String],
    m: &FittedModel,
) -> Result<Vec<ScenarioSpec>> {
    let mut specs = Vec::new();
    for name in names {
        let mut s = match name.as_str() {
            "medians" => ScenarioSpec::medians(&m.data, &m.fit)?,
            "small" => ScenarioSpec::small_provider(),
            "large" => ScenarioSpec::large_provider(),
            other => bail!(InputError(format!(
                "unknown scenario `{other}` (expected medians, small, large)"
            ))),
        };
        for l in levels {
            let (f, v) = l
                .split_once('=')
                .ok_or_else(|| InputError(format!("--level expects factor=level, got `{l}`")))?;
            s.levels.insert(factor_alias(f), v.to_string());
        }
        specs.push(s);
    }
    Ok(specs)
}

pub fn scenario_artifacts(rows: &[ScenarioRow], manifest: &RunManifest) -> Result<Vec<Artifact>> {
    let mut csv = Vec::new();
    write_scenarios(rows, &mut csv, b',')?;
    #[derive(Serialize)]
    struct Doc<'a> {
        scenarios: &'a [ScenarioRow],
    }
    Ok(vec![
        Artifact::new(
            "scenarios.md",
            scenarios_markdown(rows) + &manifest.markdown_block(),
        ),
        Artifact::new("scenarios.csv", String::from_utf8(csv)?),
        Artifact::new("scenarios.json", json(manifest, &Doc { scenarios: rows })?),
    ])
}

pub fn cmd_scenarios(args: &ScenariosArgs) -> Result<()> {
    let d = load_dataset(&args.data)?;
    let mut manifest = RunManifest::new("scenarios", args, None)?;
    manifest.add_input(&args.data.input)?;
    let m = target_model(&d, &args.model)?;
    let rows = scenario_table(&m.fit, &scenario_specs(&args.scenarios, &args.levels, &m)?)?;
    deliver(
        &args.output,
        &manifest,
        &scenario_artifacts(&rows, &manifest)?,
    )
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RankArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

pub fn rank_artifacts(scores: &[ProviderScore], manifest: &RunManifest) -> Result<Vec<Artifact>> {
    let mut csv = Vec::new();
    write_rankings(scores, &mut csv, b',')?;
    let mut md = String::from("| rank | provider | observed | predicted | ratio | pearson residual | better than average |\n|---:|---|---:|---:|---:|---:|---|\n");
    for (i, s) in scores.iter().enumerate() {
        md.push_str(&format!(
            "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {} |\n",
            i + 1,
            s.key,
            s.observed,
            s.predicted,
            s.ratio,
            s.pearson_residual,
            if s.better_than_average { "yes" } else { "no" }
        ));
    }
    #[derive(Serialize)]
    struct Doc<'a> {
        rankings: &'a [ProviderScore],
    }
    Ok(vec![
        Artifact::new("rankings.csv", String::from_utf8(csv)?),
        Artifact::new("rankings.md", md + &manifest.markdown_block()),
        Artifact::new("rankings.json", json(manifest, &Doc { rankings: scores })?),
    ])
}

pub fn cmd_rank(args: &RankArgs) -> Result<()> {
    let d = load_dataset(&args.data)?;
    let mut manifest = RunManifest::new("rank", args, None)?;
    manifest.add_input(&args.data.input)?;
    let m = target_model(&d, &args.model)?;
    let scores = rank_providers(&m.data, &m.fit)?;
    deliver(
        &args.output,
        &manifest,
        &rank_artifacts(&scores, &manifest)?,
    )
}

// ---- simulate

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// TOML configuration; overrides the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in configuration: literal or zero-noise.
    #[arg(long, default_value = "literal")]
    pub preset: String,
    /// Population size per replicate (preset only).
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn summary_markdown(s: &SimulationSummary) -> String {
    let f = crate::report::fmt3;
    let d = &s.dispersion;
    let mut out = format!(
        "### Simulated dispersion\n\nReplicates: {} ({} failed, {} capped draws)\n\n| statistic | mean | 2.5% | 97.5% | min | max |\n|---|---:|---:|---:|---:|---:|\n| dispersion | {} | {} | {} | {} | {} |\n",
        s.replicates,
        s.failed,
        s.capped_draws,
        f(d.mean),
        f(d.q025),
        f(d.q975),
        f(d.min),
        f(d.max)
    );
    out.push_str("\n### Coefficients\n\n| coefficient | n | mean | 2.5% | 97.5% | reference | reference - mean |\n|---|---:|---:|---:|---:|---:|---:|\n");
    for c in &s.coefficients {
        let Some(x) = &c.samples else {
            out.push_str(&format!("| {} | 0 | | | | | |\n", c.name));
            continue;
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            c.name,
            x.n,
            f(x.mean),
            f(x.q025),
            f(x.q975),
            c.reference.map(f).unwrap_or_default(),
            c.deviation.map(f).unwrap_or_default()
        ));
    }
    out.push_str("\n### Dispersion histogram\n\n| from | to | count |\n|---:|---:|---:|\n");
    for (i, n) in s.histogram.counts.iter().enumerate() {
        out.push_str(&format!(
            "| {} | {} | {n} |\n",
            f(s.histogram.edges[i]),
            f(s.histogram.edges[i + 1])
        ));
    }
    out
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| InputError(format!("cannot read {}: {e}", p.display())))?;
            SimulationConfig::from_toml(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => SimulationConfig::preset(&args.preset, args.n, 1000, 1).ok_or_else(|| {
            InputError(format!(
                "unknown preset `{}` (expected literal, zero-noise)",
                args.preset
            ))
        })?,
    };
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if let Some(s) = args.seed {
        cfg.rng_seed = s;
    }
    cfg.validate()?;
    #[derive(Serialize)]
    struct Echo<'a> {
        args: &'a SimulateArgs,
        resolved: &'a SimulationConfig,
    }
    let mut manifest = RunManifest::new(
        "simulate",
        &Echo {
            args,
            resolved: &cfg,
        },
        Some(cfg.rng_seed),
    )?;
    if let Some(p) = &args.config {
        manifest.add_input(p)?;
    }
    let res = run_monte_carlo(&cfg)?;
    let summary = summarize(&res)?;
    let mut samples = Vec::new();
    write_samples(&res, &mut samples, b',')?;
    let artifacts = vec![
        Artifact::new(
            "summary.md",
            summary_markdown(&summary) + &manifest.markdown_block(),
        ),
        Artifact::new("replicates.csv", String::from_utf8(samples)?),
        Artifact::new("summary.json", json(&manifest, &summary)?),
    ];
    deliver(&args.output, &manifest, &artifacts)
}

// ---- fixture

#[derive(Debug, Clone, Args, Serialize)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 240)]
    pub providers: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

pub fn cmd_fixture(args: &FixtureArgs) -> Result<()> {
    if args.providers < 4 {
        bail!(InputError("--providers must be at least 4".into()));
    }
    let names = fixture::write_fixture(
        &args.out_dir,
        &FixtureConfig {
            providers: args.providers,
            seed: args.seed,
        },
    )?;
    for n in names {
        println!("{}", args.out_dir.join(n).display());
    }
    Ok(())
}
