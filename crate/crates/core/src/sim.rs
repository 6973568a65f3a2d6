//! Monte Carlo robustness study: abuse counts that are exactly Poisson in a
//! latent size, observed only through noisy size proxies, refitted many times.
//!
//! Each replicate draws from its own ChaCha stream (`rng_seed`, stream =
//! replicate index), so replicates can run in any order or in parallel and
//! still reproduce bit for bit.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::dispersion;
use crate::glm::{build_design, fit_poisson, FitOptions, ModelSpec, INTERCEPT};
use crate::ingest::{
    format_num, Dataset, Field, ProviderRecord, ABUSE_COUNT, ASSIGNED_IPS, HOSTED_DOMAINS,
    HOSTING_IPS,
};

/// Extra column holding the latent size in generated datasets.
pub const TRUE_SIZE: &str = "true_size";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("all {0} replicates failed")]
    AllFailed(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalParams {
    pub mean: f64,
    pub sd: f64,
}

/// `ln(lambda) = intercept + slope * size`, capped at `cap`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaLink {
    #[serde(default = "default_slope")]
    pub slope: f64,
    /// Population mean of lambda the intercept is solved for.
    #[serde(default = "default_target_mean")]
    pub target_mean: f64,
    /// Overrides the solved intercept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept: Option<f64>,
    #[serde(default = "default_cap")]
    pub cap: f64,
}

fn default_slope() -> f64 {
    1.0
}
fn default_target_mean() -> f64 {
    2.8
}
fn default_cap() -> f64 {
    30.0
}
fn default_replicates() -> usize {
    1000
}

impl Default for LambdaLink {
    fn default() -> Self {
        Self {
            slope: default_slope(),
            target_mean: default_target_mean(),
            intercept: None,
            cap: default_cap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyNoise {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub rng_seed: u64,
    pub true_size: NormalParams,
    #[serde(default)]
    pub link: LambdaLink,
    pub proxies: Vec<ProxyNoise>,
    /// Coefficients to compare the replicate means against.
    #[serde(default)]
    pub reference: BTreeMap<String, f64>,
}

impl SimulationConfig {
    /// Size drawn like log10 hosted domains; noise on each proxy with the
    /// mean and sd of the corresponding observed size variable.
    pub fn literal(n: usize, replicates: usize, rng_seed: u64) -> Self {
        let reference = [
            (INTERCEPT, -5.072),
            (ASSIGNED_IPS, -0.728),
            (HOSTING_IPS, 1.104),
            (HOSTED_DOMAINS, 1.686),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            n,
            replicates,
            rng_seed,
            true_size: NormalParams { mean: 2.0, sd: 0.9 },
            link: LambdaLink::default(),
            proxies: vec![
                ProxyNoise {
                    column: ASSIGNED_IPS.into(),
                    mean: 3.1,
                    sd: 1.2,
                },
                ProxyNoise {
                    column: HOSTING_IPS.into(),
                    mean: 1.8,
                    sd: 0.8,
                },
                ProxyNoise {
                    column: HOSTED_DOMAINS.into(),
                    mean: 2.0,
                    sd: 0.9,
                },
            ],
            reference,
        }
    }

    /// The literal preset with every proxy noise sd set to zero.
    pub fn zero_noise(n: usize, replicates: usize, rng_seed: u64) -> Self {
        let mut cfg = Self::literal(n, replicates, rng_seed);
        cfg.reference.clear();
        for p in &mut cfg.proxies {
            p.sd = 0.0;
        }
        cfg
    }

    pub fn preset(name: &str, n: usize, replicates: usize, rng_seed: u64) -> Option<Self> {
        match name {
            "literal" => Some(Self::literal(n, replicates, rng_seed)),
            "zero-noise" => Some(Self::zero_noise(n, replicates, rng_seed)),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::Config(m));
        if self.n == 0 {
            return fail("n must be positive".into());
        }
        if self.replicates == 0 {
            return fail("replicates must be at least 1".into());
        }
        if !(self.true_size.sd >= 0.0
            && self.true_size.sd.is_finite()
            && self.true_size.mean.is_finite())
        {
            return fail("true_size needs a finite mean and sd >= 0".into());
        }
        if self.proxies.is_empty() {
            return fail("at least one proxy is required".into());
        }
        for p in &self.proxies {
            if !(p.sd >= 0.0 && p.sd.is_finite() && p.mean.is_finite()) {
                return fail(format!(
                    "proxy `{}` needs a finite mean and sd >= 0",
                    p.column
                ));
            }
            if p.column == ABUSE_COUNT || p.column == TRUE_SIZE {
                return fail(format!("proxy column `{}` is reserved", p.column));
            }
        }
        let l = &self.link;
        if !(l.slope.is_finite() && l.target_mean > 0.0 && l.target_mean.is_finite() && l.cap > 0.0)
        {
            return fail("link needs a finite slope, target_mean > 0 and cap > 0".into());
        }
        if l.intercept.is_some_and(|a| !a.is_finite()) {
            return fail("link intercept must be finite".into());
        }
        Ok(())
    }

    /// Intercept making `E[lambda] = target_mean` for normal size:
    /// `ln(target) - b mu - b^2 sigma^2 / 2`.
    pub fn intercept(&self) -> f64 {
        let (b, s) = (self.link.slope, &self.true_size);
        self.link
            .intercept
            .unwrap_or_else(|| self.link.target_mean.ln() - b * s.mean - b * b * s.sd * s.sd / 2.0)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::new(ABUSE_COUNT, self.proxies.iter().map(|p| p.column.clone()))
    }

    /// Names of all coefficients a replicate can report, intercept first.
    pub fn coefficient_names(&self) -> Vec<String> {
        std::iter::once(INTERCEPT.to_string())
            .chain(self.proxies.iter().map(|p| p.column.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub dataset: Dataset,
    /// Draws whose linear predictor hit the cap.
    pub capped: usize,
}

fn stream(cfg: &SimulationConfig, replicate_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(replicate_index);
    rng
}

/// One synthetic population for replicate `replicate_index`.
pub fn gen_population(
    cfg: &SimulationConfig,
    replicate_index: u64,
) -> Result<Population, SimError> {
    cfg.validate()?;
    let mut rng = stream(cfg, replicate_index);
    let normal = |m: f64, s: f64| Normal::new(m, s).map_err(|e| SimError::Config(e.to_string()));
    let size = normal(cfg.true_size.mean, cfg.true_size.sd)?;
    let noise = cfg
        .proxies
        .iter()
        .map(|p| normal(p.mean, p.sd))
        .collect::<Result<Vec<_>, _>>()?;
    let a = cfg.intercept();
    let width = cfg.n.to_string().len();
    let mut capped = 0;
    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let s = size.sample(&mut rng);
        let mut eta = a + cfg.link.slope * s;
        if eta > cfg.link.cap {
            eta = cfg.link.cap;
            capped += 1;
        }
        let y = Poisson::new(eta.exp())
            .map_err(|e| SimError::Config(e.to_string()))?
            .sample(&mut rng) as u64;
        let mut rec = ProviderRecord::new(format!("sim{i:0width$}"), [0.0; 4], y);
        for (p, dist) in cfg.proxies.iter().zip(&noise) {
            let v = s + dist.sample(&mut rng);
            match p.column.as_str() {
                ASSIGNED_IPS => rec.assigned_ips_log10 = v,
                HOSTING_IPS => rec.hosting_ips_log10 = v,
                HOSTED_DOMAINS => rec.hosted_domains_log10 = v,
                other => {
                    rec.extra.insert(other.to_string(), Field::Num(v));
                }
            }
        }
        rec.extra.insert(TRUE_SIZE.to_string(), Field::Num(s));
        records.push(rec);
    }
    let dataset =
        Dataset::new(records, "simulated").map_err(|e| SimError::Config(e.to_string()))?;
    Ok(Population { dataset, capped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: u64,
    pub phi_hat: Option<f64>,
    /// Aligned with [`SimulationResult::coefficient_names`]; `None` when the
    /// column was dropped or the fit failed.
    pub coefficients: Vec<Option<f64>>,
    pub standard_errors: Vec<Option<f64>>,
    pub capped: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub coefficient_names: Vec<String>,
    pub replicates: Vec<ReplicateOutcome>,
    pub reference: BTreeMap<String, f64>,
}

impl SimulationResult {
    pub fn dispersion_samples(&self) -> Vec<f64> {
        self.replicates.iter().filter_map(|r| r.phi_hat).collect()
    }

    pub fn coefficient_samples(&self, name: &str) -> Vec<f64> {
        match self.coefficient_names.iter().position(|c| c == name) {
            Some(j) => self
                .replicates
                .iter()
                .filter_map(|r| r.coefficients[j])
                .collect(),
            None => Vec::new(),
        }
    }
}

fn run_replicate(
    cfg: &SimulationConfig,
    names: &[String],
    index: u64,
    opts: &FitOptions,
) -> ReplicateOutcome {
    let mut out = ReplicateOutcome {
        index,
        phi_hat: None,
        coefficients: vec![None; names.len()],
        standard_errors: vec![None; names.len()],
        capped: 0,
        failure: None,
    };
    let pop = match gen_population(cfg, index) {
        Ok(p) => p,
        Err(e) => {
            out.failure = Some(e.to_string());
            return out;
        }
    };
    out.capped = pop.capped;
    let fit = build_design(&pop.dataset, &cfg.model_spec()).and_then(|dm| fit_poisson(&dm, opts));
    let fit = match fit {
        Ok(f) if f.converged => f,
        Ok(f) => {
            out.failure = Some(format!("no convergence after {} iterations", f.iterations));
            return out;
        }
        Err(e) => {
            out.failure = Some(e.to_string());
            return out;
        }
    };
    for (col, (b, se)) in fit
        .columns
        .iter()
        .zip(fit.coefficients.iter().zip(&fit.standard_errors))
    {
        if let Some(j) = names.iter().position(|n| *n == col.name) {
            out.coefficients[j] = Some(*b);
            out.standard_errors[j] = Some(*se);
        }
    }
    match dispersion(&fit.response, &fit.fitted, fit.k) {
        Ok(d) => out.phi_hat = Some(d.phi_hat),
        Err(e) => out.failure = Some(e.to_string()),
    }
    out
}

/// Generates and refits every replicate; failed fits are kept with a reason.
pub fn run_monte_carlo(cfg: &SimulationConfig) -> Result<SimulationResult, SimError> {
    cfg.validate()?;
    let names = cfg.coefficient_names();
    let opts = FitOptions::default();
    let replicates = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|i| run_replicate(cfg, &names, i, &opts))
        .collect();
    Ok(SimulationResult {
        coefficient_names: names,
        replicates,
        reference: cfg.reference.clone(),
    })
}

/// Nearest-rank quantile of sorted samples: the value at rank `ceil(p N)`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub n: usize,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
    pub min: f64,
    pub max: f64,
}

impl SampleSummary {
    pub fn of(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let mean = (s.iter().sum::<f64>() / s.len() as f64).clamp(s[0], s[s.len() - 1]);
        Some(Self {
            n: s.len(),
            mean,
            q025: nearest_rank(&s, 0.025),
            q975: nearest_rank(&s, 0.975),
            min: s[0],
            max: s[s.len() - 1],
        })
    }
}

/// Fixed-width bins over the observed range; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(samples: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if samples.is_empty() {
            return Self {
                edges: Vec::new(),
                counts: Vec::new(),
            };
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut counts = vec![0; bins];
        for &v in samples {
            let b = if width > 0.0 {
                ((v - lo) / width) as usize
            } else {
                0
            };
            counts[b.min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub samples: Option<SampleSummary>,
    pub reference: Option<f64>,
    /// `reference - mean`.
    pub deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub replicates: usize,
    pub failed: usize,
    pub capped_draws: usize,
    pub dispersion: SampleSummary,
    pub histogram: Histogram,
    pub coefficients: Vec<CoefficientSummary>,
}

pub fn summarize(res: &SimulationResult) -> Result<SimulationSummary, SimError> {
    let phi = res.dispersion_samples();
    let dispersion = SampleSummary::of(&phi).ok_or(SimError::AllFailed(res.replicates.len()))?;
    let bins = (res.replicates.len() as f64).sqrt().ceil() as usize;
    let coefficients = res
        .coefficient_names
        .iter()
        .map(|name| {
            let samples = SampleSummary::of(&res.coefficient_samples(name));
            let reference = res.reference.get(name).copied();
            let deviation = reference.zip(samples.as_ref()).map(|(r, s)| r - s.mean);
            CoefficientSummary {
                name: name.clone(),
                samples,
                reference,
                deviation,
            }
        })
        .collect();
    Ok(SimulationSummary {
        replicates: res.replicates.len(),
        failed: res
            .replicates
            .iter()
            .filter(|r| r.failure.is_some())
            .count(),
        capped_draws: res.replicates.iter().map(|r| r.capped).sum(),
        dispersion,
        histogram: Histogram::new(&phi, bins),
        coefficients,
    })
}

/// One row per replicate: dispersion, then every coefficient and its SE.
pub fn write_samples<W: Write>(
    res: &SimulationResult,
    writer: W,
    delimiter: u8,
) -> Result<(), SimError> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);
    let mut header = vec!["replicate".to_string(), "phi_hat".to_string()];
    for n in &res.coefficient_names {
        header.push(n.clone());
        header.push(format!("se_{n}"));
    }
    header.push("capped".into());
    header.push("failure".into());
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(format_num).unwrap_or_default();
    for r in &res.replicates {
        let mut row = vec![r.index.to_string(), opt(r.phi_hat)];
        for (b, se) in r.coefficients.iter().zip(&r.standard_errors) {
            row.push(opt(*b));
            row.push(opt(*se));
        }
        row.push(r.capped.to_string());
        row.push(r.failure.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
