//! Statistical twins: nearest-neighbour matching of seed providers against a
//! population in structural-variable space, and twin-level list-wise
//! exclusion for fixed-effect regressions.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    format_num, Dataset, Field, IngestError, ProviderRecord, Value, STRUCTURAL_COLUMNS, TWIN_ID,
};

#[derive(Debug, Error)]
pub enum TwinsError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("matching needs at least one variable")]
    NoVariables,
    #[error("every matching variable has zero variance in the population: {0:?}")]
    AllConstant(Vec<String>),
    #[error("population has {0} complete rows; at least 2 are needed")]
    PopulationTooSmall(usize),
    #[error("seed `{0}` has no eligible match")]
    NoEligibleMatch(String),
    #[error("pairing references unknown provider `{0}`")]
    UnknownProvider(String),
    #[error("cannot draw {count} seeds from {available} providers")]
    TooManySeeds { count: usize, available: usize },
    #[error("pairings file row {row}: {message}")]
    InvalidPairing { row: usize, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinPairing {
    pub twin_id: String,
    pub seed_id: String,
    pub match_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchingConfig {
    pub variables: Vec<String>,
    pub standardize: bool,
    pub allow_reuse: bool,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            variables: STRUCTURAL_COLUMNS.iter().map(|s| s.to_string()).collect(),
            standardize: true,
            allow_reuse: true,
        }
    }
}

/// Twin label derived from the seed.
pub fn twin_label(seed_id: &str) -> String {
    format!("twin-{seed_id}")
}

/// What was left out of the matching space.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchingExclusions {
    /// Variables with zero variance in the population (standardized runs only).
    pub variables: Vec<String>,
    pub seeds: Vec<String>,
    pub population: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub seed_ids: Vec<String>,
    pub population_ids: Vec<String>,
    pub variables: Vec<String>,
    pub exclusions: MatchingExclusions,
    /// Row-major, `seed_ids.len() x population_ids.len()`.
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.population_ids.len() + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.seed_ids.len(), self.population_ids.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub pairings: Vec<TwinPairing>,
    pub variables: Vec<String>,
    pub exclusions: MatchingExclusions,
}

struct Points {
    ids: Vec<String>,
    coords: Vec<Vec<f64>>,
}

struct Space {
    seeds: Points,
    population: Points,
    variables: Vec<String>,
    exclusions: MatchingExclusions,
}

fn complete_rows(d: &Dataset, variables: &[String]) -> Result<(Points, Vec<String>), TwinsError> {
    let columns = variables
        .iter()
        .map(|v| d.numeric_column(v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut points = Points {
        ids: Vec::new(),
        coords: Vec::new(),
    };
    let mut excluded = Vec::new();
    for (i, rec) in d.records().iter().enumerate() {
        let row: Option<Vec<f64>> = columns.iter().map(|c| c[i]).collect();
        match row {
            Some(row) => {
                points.ids.push(rec.provider_id.clone());
                points.coords.push(row);
            }
            None => excluded.push(rec.provider_id.clone()),
        }
    }
    Ok((points, excluded))
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let ss = values.map(|v| (v - mean).powi(2)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn build_space(s: &Dataset, t: &Dataset, cfg: &MatchingConfig) -> Result<Space, TwinsError> {
    if cfg.variables.is_empty() {
        return Err(TwinsError::NoVariables);
    }
    let (mut seeds, excluded_seeds) = complete_rows(s, &cfg.variables)?;
    let (mut population, excluded_population) = complete_rows(t, &cfg.variables)?;
    if population.ids.len() < 2 {
        return Err(TwinsError::PopulationTooSmall(population.ids.len()));
    }
    let mut exclusions = MatchingExclusions {
        variables: Vec::new(),
        seeds: excluded_seeds,
        population: excluded_population,
    };
    let mut keep = Vec::new();
    let mut transforms = Vec::new();
    for (j, name) in cfg.variables.iter().enumerate() {
        if cfg.standardize {
            let (mean, sd) = mean_sd(population.coords.iter().map(|c| c[j]));
            if !(sd > 0.0 && sd.is_finite()) {
                exclusions.variables.push(name.clone());
                continue;
            }
            transforms.push((mean, sd));
        } else {
            transforms.push((0.0, 1.0));
        }
        keep.push(j);
    }
    if keep.is_empty() {
        return Err(TwinsError::AllConstant(exclusions.variables));
    }
    for pts in [&mut seeds, &mut population] {
        for c in pts.coords.iter_mut() {
            *c = keep
                .iter()
                .zip(&transforms)
                .map(|(&j, (m, sd))| (c[j] - m) / sd)
                .collect();
        }
    }
    Ok(Space {
        seeds,
        population,
        variables: keep.iter().map(|&j| cfg.variables[j].clone()).collect(),
        exclusions,
    })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Pairwise Euclidean distances between seeds and population, z-scored on the
/// population when `cfg.standardize` is set.
pub fn distance_matrix(
    s: &Dataset,
    t: &Dataset,
    cfg: &MatchingConfig,
) -> Result<DistanceMatrix, TwinsError> {
    let space = build_space(s, t, cfg)?;
    let values: Vec<f64> = space
        .seeds
        .coords
        .par_iter()
        .flat_map_iter(|a| {
            space
                .population
                .coords
                .iter()
                .map(move |b| squared_distance(a, b).sqrt())
        })
        .collect();
    Ok(DistanceMatrix {
        seed_ids: space.seeds.ids,
        population_ids: space.population.ids,
        variables: space.variables,
        exclusions: space.exclusions,
        values,
    })
}

/// Closest non-self population member by (squared distance, provider id).
fn nearest(space: &Space, seed: usize, used: Option<&HashSet<usize>>) -> Option<(usize, f64)> {
    let a = &space.seeds.coords[seed];
    let seed_id = &space.seeds.ids[seed];
    let mut best: Option<(usize, f64)> = None;
    for (j, b) in space.population.coords.iter().enumerate() {
        if &space.population.ids[j] == seed_id || used.is_some_and(|u| u.contains(&j)) {
            continue;
        }
        let d = squared_distance(a, b);
        let better = match best {
            None => true,
            Some((bj, bd)) => {
                d < bd || (d == bd && space.population.ids[j] < space.population.ids[bj])
            }
        };
        if better {
            best = Some((j, d));
        }
    }
    best
}

/// Pairs each seed with its nearest population provider other than itself.
///
/// Seeds with missing matching values are skipped and reported. Without
/// reuse, seeds are served in input order and each population member is
/// matched at most once.
pub fn match_twins(
    s: &Dataset,
    t: &Dataset,
    cfg: &MatchingConfig,
) -> Result<MatchOutcome, TwinsError> {
    let space = build_space(s, t, cfg)?;
    let found: Vec<Option<(usize, f64)>> = if cfg.allow_reuse {
        (0..space.seeds.ids.len())
            .into_par_iter()
            .map(|i| nearest(&space, i, None))
            .collect()
    } else {
        let mut used = HashSet::new();
        (0..space.seeds.ids.len())
            .map(|i| {
                let hit = nearest(&space, i, Some(&used));
                if let Some((j, _)) = hit {
                    used.insert(j);
                }
                hit
            })
            .collect()
    };
    let mut pairings = Vec::with_capacity(found.len());
    for (i, hit) in found.into_iter().enumerate() {
        let seed_id = &space.seeds.ids[i];
        let (j, d2) = hit.ok_or_else(|| TwinsError::NoEligibleMatch(seed_id.clone()))?;
        pairings.push(TwinPairing {
            twin_id: twin_label(seed_id),
            seed_id: seed_id.clone(),
            match_id: space.population.ids[j].clone(),
            distance: d2.sqrt(),
        });
    }
    Ok(MatchOutcome {
        pairings,
        variables: space.variables,
        exclusions: space.exclusions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinSample {
    /// Surviving members, seed then match for each twin, carrying `twin_id`.
    pub dataset: Dataset,
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
}

/// Keeps a twin only when both members have every `required` column.
pub fn listwise_exclude(
    pairings: &[TwinPairing],
    d: &Dataset,
    required: &[&str],
) -> Result<TwinSample, TwinsError> {
    for col in required {
        if !d.has_column(col) {
            return Err(IngestError::UnknownColumn(col.to_string()).into());
        }
    }
    let mut by_id: HashMap<&str, &ProviderRecord> = HashMap::with_capacity(d.len());
    for r in d.records() {
        by_id.entry(r.provider_id.as_str()).or_insert(r);
    }
    let complete = |r: &ProviderRecord| {
        required
            .iter()
            .all(|c| !r.get(c).unwrap_or(Value::Missing).is_missing())
    };

    let mut records = Vec::new();
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for p in pairings {
        let lookup = |id: &str| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| TwinsError::UnknownProvider(id.to_string()))
        };
        let (a, b) = (lookup(&p.seed_id)?, lookup(&p.match_id)?);
        if complete(a) && complete(b) {
            for member in [a, b] {
                let mut r = member.clone();
                r.extra
                    .insert(TWIN_ID.to_string(), Field::Text(p.twin_id.clone()));
                records.push(r);
            }
            kept.push(p.twin_id.clone());
        } else {
            dropped.push(p.twin_id.clone());
        }
    }
    let dataset = Dataset::new(records, d.source_label.clone())?;
    Ok(TwinSample {
        dataset,
        kept,
        dropped,
    })
}

/// Twin-level exclusion on a dataset already labelled with `twin_id`: every
/// row of a twin goes when any of them misses a `required` column. Rows
/// without a twin label are judged on their own.
pub fn exclude_incomplete_twins(d: &Dataset, required: &[&str]) -> Result<TwinSample, TwinsError> {
    for col in required {
        if !d.has_column(col) {
            return Err(IngestError::UnknownColumn(col.to_string()).into());
        }
    }
    let complete = |r: &ProviderRecord| {
        required
            .iter()
            .all(|c| !r.get(c).unwrap_or(Value::Missing).is_missing())
    };
    let mut broken: HashSet<String> = HashSet::new();
    for r in d.records() {
        if !complete(r) {
            broken.insert(r.twin_id().map_or_else(|| r.key(), str::to_string));
        }
    }
    let mut rows = Vec::new();
    let (mut kept, mut dropped): (Vec<String>, Vec<String>) = (Vec::new(), Vec::new());
    for (i, r) in d.records().iter().enumerate() {
        let Some(t) = r.twin_id() else {
            if !broken.contains(&r.key()) {
                rows.push(i);
            }
            continue;
        };
        let list = if broken.contains(t) {
            &mut dropped
        } else {
            rows.push(i);
            &mut kept
        };
        if !list.iter().any(|x| x == t) {
            list.push(t.to_string());
        }
    }
    Ok(TwinSample {
        dataset: d.select(&rows)?,
        kept,
        dropped,
    })
}

/// Uniform sample of `count` distinct rows, returned in dataset order.
pub fn sample_seeds(d: &Dataset, count: usize, seed: u64) -> Result<Dataset, TwinsError> {
    if count > d.len() {
        return Err(TwinsError::TooManySeeds {
            count,
            available: d.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = index::sample(&mut rng, d.len(), count).into_vec();
    rows.sort_unstable();
    Ok(d.select(&rows)?)
}

/// Distinct providers across all pairings.
pub fn distinct_providers(pairings: &[TwinPairing]) -> usize {
    pairings
        .iter()
        .flat_map(|p| [p.seed_id.as_str(), p.match_id.as_str()])
        .collect::<BTreeSet<_>>()
        .len()
}

pub fn write_pairings<W: Write>(
    pairings: &[TwinPairing],
    writer: W,
    delimiter: u8,
) -> Result<(), TwinsError> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);
    w.write_record(["twin_id", "seed_id", "match_id", "distance"])?;
    for p in pairings {
        w.write_record([&p.twin_id, &p.seed_id, &p.match_id, &format_num(p.distance)])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_pairings<R: Read>(reader: R, delimiter: u8) -> Result<Vec<TwinPairing>, TwinsError> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != 4 {
            return Err(TwinsError::InvalidPairing {
                row,
                message: format!("expected 4 fields, got {}", rec.len()),
            });
        }
        let distance = rec[3]
            .trim()
            .parse::<f64>()
            .map_err(|_| TwinsError::InvalidPairing {
                row,
                message: format!("distance `{}` is not a number", &rec[3]),
            })?;
        out.push(TwinPairing {
            twin_id: rec[0].to_string(),
            seed_id: rec[1].to_string(),
            match_id: rec[2].to_string(),
            distance,
        });
    }
    Ok(out)
}
