//! Explanatory variables built from offline hosting inputs.
//!
//! IP allocations map address ranges to providers. Passive-DNS style hosting
//! observations give the domains seen on each IP, from which the shared-IP
//! share and the size variables are derived. Abuse records are attributed to
//! providers by the same interval lookup.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{self, Dataset, Field, ProviderRecord};

/// An IP hosting strictly more than this many domains is shared.
pub const SHARED_IP_THRESHOLD: usize = 10;

/// Size of the ranked-domain list used for the popularity index.
pub const DEFAULT_RANK_LIST_SIZE: u32 = 1_000_000;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed table: {0}")]
    Csv(#[from] csv::Error),
    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: String, column: String },
    #[error("{file} row {row}: {message}")]
    InvalidRow {
        file: String,
        row: usize,
        message: String,
    },
    #[error("allocation {start}-{end} of `{provider}` is reversed")]
    ReversedRange {
        provider: String,
        start: u32,
        end: u32,
    },
    #[error("allocations overlap: `{first}` and `{second}` both cover {ip}")]
    Overlap {
        first: String,
        second: String,
        ip: Ipv4Addr,
    },
    #[error("rank {rank} outside [1, {list_size}]")]
    RankOutOfRange { rank: u32, list_size: u32 },
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
}

/// Parses a dotted-quad or plain integer IPv4 address.
pub fn parse_ip(raw: &str) -> Option<u32> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<u32>() {
        return Some(v);
    }
    raw.parse::<Ipv4Addr>().ok().map(u32::from)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpAllocation {
    pub provider_id: String,
    /// Inclusive bounds.
    pub start: u32,
    pub end: u32,
}

impl IpAllocation {
    pub fn size(&self) -> u64 {
        u64::from(self.end) - u64::from(self.start) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostingObservation {
    pub domain: String,
    pub ip: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbuseRecord {
    pub domain: String,
    pub ip: u32,
    pub timestamp: Option<String>,
}

/// Disjoint allocation ranges sorted by start, searched by bisection.
#[derive(Debug, Clone)]
pub struct IpIndex {
    ranges: Vec<(u32, u32, usize)>,
    providers: Vec<String>,
    assigned: Vec<u64>,
}

impl IpIndex {
    pub fn new(allocations: &[IpAllocation]) -> Result<Self, FeatureError> {
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        for a in allocations {
            if a.start > a.end {
                return Err(FeatureError::ReversedRange {
                    provider: a.provider_id.clone(),
                    start: a.start,
                    end: a.end,
                });
            }
            let next = ids.len();
            ids.entry(a.provider_id.as_str()).or_insert(next);
        }
        // provider indices in lexicographic order
        let providers: Vec<String> = ids.keys().map(|s| s.to_string()).collect();
        let position: HashMap<&str, usize> = providers
            .iter()
            .enumerate()
            .map(|(i, p)| (p.as_str(), i))
            .collect();
        let mut assigned = vec![0u64; providers.len()];
        let mut ranges: Vec<(u32, u32, usize)> = allocations
            .iter()
            .map(|a| {
                let p = position[a.provider_id.as_str()];
                assigned[p] += a.size();
                (a.start, a.end, p)
            })
            .collect();
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 <= w[0].1 {
                return Err(FeatureError::Overlap {
                    first: providers[w[0].2].clone(),
                    second: providers[w[1].2].clone(),
                    ip: Ipv4Addr::from(w[1].0),
                });
            }
        }
        Ok(Self {
            ranges,
            providers,
            assigned,
        })
    }

    /// Provider index owning `ip`.
    pub fn lookup(&self, ip: u32) -> Option<usize> {
        let i = self.ranges.partition_point(|r| r.0 <= ip);
        if i == 0 {
            return None;
        }
        let (_, end, p) = self.ranges[i - 1];
        (ip <= end).then_some(p)
    }

    pub fn provider(&self, index: usize) -> &str {
        &self.providers[index]
    }

    pub fn providers(&self) -> &[String] {
        &self.providers
    }

    /// Total allocated addresses per provider index.
    pub fn assigned_addresses(&self) -> &[u64] {
        &self.assigned
    }
}

pub fn classify_shared_ip(domain_count: usize) -> bool {
    domain_count > SHARED_IP_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderHosting {
    pub domains: usize,
    pub hosting_ips: usize,
    pub shared_domains: usize,
    pub pct_shared: f64,
    /// Set when the provider has no observed domains (pct_shared is 0).
    pub no_domains: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostingSummary {
    /// Keyed by provider id; every allocated provider is present.
    pub providers: BTreeMap<String, ProviderHosting>,
    pub skipped: usize,
}

/// Per-provider hosting sizes and percent of domains on shared IPs.
///
/// Shared status is decided per IP from the number of distinct domains on it
/// across the whole observation set. A domain counts as shared for a
/// provider if it appears on at least one shared IP of that provider.
pub fn pct_shared(observations: &[HostingObservation], index: &IpIndex) -> HostingSummary {
    let mut per_ip: HashMap<u32, HashSet<&str>> = HashMap::new();
    let mut skipped = 0usize;
    for o in observations {
        if index.lookup(o.ip).is_none() {
            skipped += 1;
            continue;
        }
        per_ip.entry(o.ip).or_default().insert(o.domain.as_str());
    }

    let n = index.providers().len();
    let mut domains: Vec<HashSet<&str>> = vec![HashSet::new(); n];
    let mut shared: Vec<HashSet<&str>> = vec![HashSet::new(); n];
    let mut ips = vec![0usize; n];
    for (ip, set) in &per_ip {
        let p = index.lookup(*ip).expect("attributed above");
        ips[p] += 1;
        let is_shared = classify_shared_ip(set.len());
        for d in set {
            domains[p].insert(d);
            if is_shared {
                shared[p].insert(d);
            }
        }
    }

    let providers = (0..n)
        .map(|p| {
            let total = domains[p].len();
            let sh = shared[p].len();
            let pct = if total == 0 {
                0.0
            } else {
                100.0 * sh as f64 / total as f64
            };
            (
                index.provider(p).to_string(),
                ProviderHosting {
                    domains: total,
                    hosting_ips: ips[p],
                    shared_domains: sh,
                    pct_shared: pct,
                    no_domains: total == 0,
                },
            )
        })
        .collect();
    HostingSummary { providers, skipped }
}

/// Sum of `log10(list_size + 1 - rank)` over the ranked domains.
pub fn popularity_index(ranks: &[u32], list_size: u32) -> Result<f64, FeatureError> {
    ranks.iter().try_fold(0.0, |acc, &rank| {
        if rank == 0 || rank > list_size {
            return Err(FeatureError::RankOutOfRange { rank, list_size });
        }
        Ok(acc + f64::from(list_size - rank + 1).log10())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbuseAttribution {
    /// Distinct abused domains per provider id; every allocated provider is present.
    pub counts: BTreeMap<String, u64>,
    pub skipped: usize,
}

pub fn attribute_abuse(abuse: &[AbuseRecord], index: &IpIndex) -> AbuseAttribution {
    let mut seen: HashSet<(usize, &str)> = HashSet::new();
    let mut counts = vec![0u64; index.providers().len()];
    let mut skipped = 0usize;
    for r in abuse {
        match index.lookup(r.ip) {
            Some(p) => {
                if seen.insert((p, r.domain.as_str())) {
                    counts[p] += 1;
                }
            }
            None => skipped += 1,
        }
    }
    AbuseAttribution {
        counts: index.providers().iter().cloned().zip(counts).collect(),
        skipped,
    }
}

/// Optional provider-level columns joined onto the computed features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Enrichment {
    pub country: Option<String>,
    pub price_per_year: Option<f64>,
    pub time_in_business: Option<f64>,
    pub ict_dev_index: Option<f64>,
    pub wordpress_use: Option<f64>,
    pub extra: BTreeMap<String, Field>,
}

/// Raw inputs for one provider table.
#[derive(Debug, Clone, Default)]
pub struct FeatureInputs {
    pub allocations: Vec<IpAllocation>,
    pub observations: Vec<HostingObservation>,
    pub abuse: Vec<AbuseRecord>,
    /// Secondary abuse feeds, written as extra count columns.
    pub alt_abuse: Vec<(String, Vec<AbuseRecord>)>,
    /// Ranked domains (domain, rank) for the popularity index.
    pub ranks: Option<Vec<(String, u32)>>,
    pub rank_list_size: Option<u32>,
    pub enrichment: HashMap<String, Enrichment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub providers: usize,
    pub providers_without_domains: usize,
    pub skipped_observations: usize,
    pub skipped_abuse: usize,
    pub skipped_alt_abuse: BTreeMap<String, usize>,
}

/// Builds one provider row per allocated provider, in provider-id order.
pub fn build_provider_table(
    inputs: &FeatureInputs,
    source_label: &str,
) -> Result<(Dataset, FeatureReport), FeatureError> {
    let index = IpIndex::new(&inputs.allocations)?;
    let hosting = pct_shared(&inputs.observations, &index);
    let abuse = attribute_abuse(&inputs.abuse, &index);
    let alt: Vec<(String, AbuseAttribution)> = inputs
        .alt_abuse
        .iter()
        .map(|(name, recs)| (name.clone(), attribute_abuse(recs, &index)))
        .collect();

    let popularity: Option<HashMap<String, f64>> = match &inputs.ranks {
        None => None,
        Some(ranked) => {
            let list_size = inputs.rank_list_size.unwrap_or(DEFAULT_RANK_LIST_SIZE);
            let rank_of: HashMap<&str, u32> =
                ranked.iter().map(|(d, r)| (d.as_str(), *r)).collect();
            let mut hosted: Vec<HashSet<&str>> = vec![HashSet::new(); index.providers().len()];
            for o in &inputs.observations {
                if let Some(p) = index.lookup(o.ip) {
                    hosted[p].insert(o.domain.as_str());
                }
            }
            let mut out = HashMap::new();
            for (p, set) in hosted.iter().enumerate() {
                let mut ranks: Vec<u32> =
                    set.iter().filter_map(|d| rank_of.get(d).copied()).collect();
                // fixed summation order
                ranks.sort_unstable();
                out.insert(
                    index.provider(p).to_string(),
                    popularity_index(&ranks, list_size)?,
                );
            }
            Some(out)
        }
    };

    let mut records = Vec::with_capacity(index.providers().len());
    for (p, id) in index.providers().iter().enumerate() {
        let h = &hosting.providers[id];
        let mut r = ProviderRecord::new(
            id.clone(),
            [
                ingest::log10_transform(index.assigned_addresses()[p] as f64)?,
                ingest::log10_transform(h.hosting_ips as f64)?,
                ingest::log10_transform(h.domains as f64)?,
                h.pct_shared,
            ],
            abuse.counts[id],
        );
        r.popularity_index = popularity.as_ref().map(|m| m[id]);
        if let Some(e) = inputs.enrichment.get(id) {
            r.country = e.country.clone();
            r.price_per_year = e.price_per_year;
            r.time_in_business = e.time_in_business;
            r.ict_dev_index = e.ict_dev_index;
            r.wordpress_use = e.wordpress_use;
            r.extra.extend(e.extra.clone());
        }
        for (name, att) in &alt {
            r.extra
                .insert(name.clone(), Field::Num(att.counts[id] as f64));
        }
        records.push(r);
    }
    let report = FeatureReport {
        providers: records.len(),
        providers_without_domains: hosting.providers.values().filter(|h| h.no_domains).count(),
        skipped_observations: hosting.skipped,
        skipped_abuse: abuse.skipped,
        skipped_alt_abuse: alt.iter().map(|(n, a)| (n.clone(), a.skipped)).collect(),
    };
    Ok((Dataset::new(records, source_label)?, report))
}

struct Table {
    file: String,
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read<R: Read>(reader: R, file: &str, delimiter: u8) -> Result<Self, FeatureError> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .from_reader(reader);
        let headers = rdr
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let rows = rdr.records().collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            file: file.to_string(),
            headers,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize, FeatureError> {
        self.optional(name)
            .ok_or_else(|| FeatureError::MissingColumn {
                file: self.file.clone(),
                column: name.to_string(),
            })
    }

    fn optional(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn invalid(&self, row: usize, message: String) -> FeatureError {
        FeatureError::InvalidRow {
            file: self.file.clone(),
            row: row + 1,
            message,
        }
    }

    fn cell(&self, row: usize, col: usize) -> &str {
        self.rows[row].get(col).unwrap_or("").trim()
    }

    fn ip(&self, row: usize, col: usize) -> Result<u32, FeatureError> {
        let raw = self.cell(row, col);
        parse_ip(raw).ok_or_else(|| self.invalid(row, format!("invalid IP address `{raw}`")))
    }

    fn domain(&self, row: usize, col: usize) -> Result<String, FeatureError> {
        let d = self.cell(row, col);
        if d.is_empty() {
            return Err(self.invalid(row, "empty domain".to_string()));
        }
        Ok(d.to_ascii_lowercase())
    }

    fn real(&self, row: usize, col: Option<usize>) -> Result<Option<f64>, FeatureError> {
        let Some(col) = col else { return Ok(None) };
        let raw = self.cell(row, col);
        if raw.is_empty() {
            return Ok(None);
        }
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => Err(self.invalid(
                row,
                format!("non-numeric value `{raw}` in `{}`", self.headers[col]),
            )),
        }
    }
}

/// Columns: `provider_id`, `start`, `end` (dotted quad or integer).
pub fn read_allocations<R: Read>(
    reader: R,
    file: &str,
    delimiter: u8,
) -> Result<Vec<IpAllocation>, FeatureError> {
    let t = Table::read(reader, file, delimiter)?;
    let (p, s, e) = (
        t.column("provider_id")?,
        t.column("start")?,
        t.column("end")?,
    );
    (0..t.rows.len())
        .map(|i| {
            let provider_id = t.cell(i, p).to_string();
            if provider_id.is_empty() {
                return Err(t.invalid(i, "empty provider id".to_string()));
            }
            Ok(IpAllocation {
                provider_id,
                start: t.ip(i, s)?,
                end: t.ip(i, e)?,
            })
        })
        .collect()
}

/// Columns: `domain`, `ip`.
pub fn read_observations<R: Read>(
    reader: R,
    file: &str,
    delimiter: u8,
) -> Result<Vec<HostingObservation>, FeatureError> {
    let t = Table::read(reader, file, delimiter)?;
    let (d, ip) = (t.column("domain")?, t.column("ip")?);
    (0..t.rows.len())
        .map(|i| {
            Ok(HostingObservation {
                domain: t.domain(i, d)?,
                ip: t.ip(i, ip)?,
            })
        })
        .collect()
}

/// Columns: `domain`, `ip`, optional `timestamp`.
pub fn read_abuse<R: Read>(
    reader: R,
    file: &str,
    delimiter: u8,
) -> Result<Vec<AbuseRecord>, FeatureError> {
    let t = Table::read(reader, file, delimiter)?;
    let (d, ip, ts) = (
        t.column("domain")?,
        t.column("ip")?,
        t.optional("timestamp"),
    );
    (0..t.rows.len())
        .map(|i| {
            Ok(AbuseRecord {
                domain: t.domain(i, d)?,
                ip: t.ip(i, ip)?,
                timestamp: ts
                    .map(|c| t.cell(i, c).to_string())
                    .filter(|s| !s.is_empty()),
            })
        })
        .collect()
}

/// Columns: `domain`, `rank`.
pub fn read_ranks<R: Read>(
    reader: R,
    file: &str,
    delimiter: u8,
) -> Result<Vec<(String, u32)>, FeatureError> {
    let t = Table::read(reader, file, delimiter)?;
    let (d, r) = (t.column("domain")?, t.column("rank")?);
    (0..t.rows.len())
        .map(|i| {
            let raw = t.cell(i, r);
            let rank = raw
                .parse::<u32>()
                .map_err(|_| t.invalid(i, format!("invalid rank `{raw}`")))?;
            Ok((t.domain(i, d)?, rank))
        })
        .collect()
}

/// Columns: `provider_id` plus any of the enrichment fields; other columns
/// are carried as extras.
pub fn read_enrichment<R: Read>(
    reader: R,
    file: &str,
    delimiter: u8,
) -> Result<HashMap<String, Enrichment>, FeatureError> {
    let t = Table::read(reader, file, delimiter)?;
    let p = t.column("provider_id")?;
    let col = |name: &str| t.optional(name);
    let (cc, price, tib, ict, wp) = (
        col(ingest::COUNTRY),
        col(ingest::PRICE_PER_YEAR),
        col(ingest::TIME_IN_BUSINESS),
        col(ingest::ICT_DEV_INDEX),
        col(ingest::WORDPRESS_USE),
    );
    let known: Vec<usize> = [Some(p), cc, price, tib, ict, wp]
        .into_iter()
        .flatten()
        .collect();
    let mut out = HashMap::new();
    for i in 0..t.rows.len() {
        let id = t.cell(i, p).to_string();
        let mut e = Enrichment {
            country: cc
                .map(|c| t.cell(i, c).to_string())
                .filter(|s| !s.is_empty()),
            price_per_year: t.real(i, price)?,
            time_in_business: t.real(i, tib)?,
            ict_dev_index: t.real(i, ict)?,
            wordpress_use: t.real(i, wp)?,
            extra: BTreeMap::new(),
        };
        for (c, name) in t.headers.iter().enumerate() {
            if known.contains(&c) {
                continue;
            }
            let raw = t.cell(i, c);
            if !raw.is_empty() {
                let f = match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => Field::Num(v),
                    _ => Field::Text(raw.to_string()),
                };
                e.extra.insert(name.clone(), f);
            }
        }
        if out.insert(id.clone(), e).is_some() {
            return Err(t.invalid(i, format!("duplicate provider id `{id}`")));
        }
    }
    Ok(out)
}
