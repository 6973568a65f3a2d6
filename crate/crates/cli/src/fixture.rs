//! Synthetic raw inputs for the pipeline: IP allocations, hosting
//! observations, two abuse feeds, a popularity ranking and enrichment data.

use std::fs;
use std::net::Ipv4Addr;
use std::path::Path;

use anyhow::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

pub const ALLOCATIONS: &str = "allocations.csv";
pub const OBSERVATIONS: &str = "observations.csv";
pub const ABUSE: &str = "abuse.csv";
pub const ALT_ABUSE: &str = "abuse_alt.csv";
pub const RANKS: &str = "ranks.csv";
pub const ENRICHMENT: &str = "enrichment.csv";

/// Countries with an ICT development index and an abuse level shift.
const COUNTRIES: [(&str, f64, f64); 8] = [
    ("US", 8.2, 0.0),
    ("DE", 8.4, -0.2),
    ("NL", 8.5, 0.1),
    ("FR", 8.0, -0.1),
    ("GB", 8.6, -0.3),
    ("RU", 6.9, 0.5),
    ("CN", 5.6, 0.4),
    ("BR", 6.1, 0.3),
];

pub struct FixtureConfig {
    pub providers: usize,
    pub seed: u64,
}

struct Files {
    allocations: String,
    observations: String,
    abuse: String,
    alt_abuse: String,
    ranks: String,
    enrichment: String,
}

fn ip(v: u32) -> String {
    Ipv4Addr::from(v).to_string()
}

fn clamp_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    Normal::new(mean, sd)
        .expect("valid normal")
        .sample(rng)
        .clamp(lo, hi)
}

fn abuse_rows(
    rng: &mut ChaCha8Rng,
    out: &mut String,
    count: usize,
    hosted: &[(String, u32)],
    ranges: &[(u32, u32)],
    tag: &str,
) {
    let mut picks: Vec<&(String, u32)> = hosted.iter().collect();
    picks.shuffle(rng);
    for k in 0..count {
        let (domain, addr) = match picks.get(k) {
            Some((d, a)) => (d.clone(), *a),
            None => {
                let (s, e) = ranges[rng.random_range(0..ranges.len())];
                (format!("{tag}{k}.example"), rng.random_range(s..=e))
            }
        };
        let day = rng.random_range(1..=28);
        out.push_str(&format!("{domain},{},2016-01-{day:02}\n", ip(addr)));
        // repeated reports of one domain count once
        if rng.random_bool(0.1) {
            out.push_str(&format!("{domain},{},2016-02-{day:02}\n", ip(addr)));
        }
    }
}

fn generate(cfg: &FixtureConfig) -> Files {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut f = Files {
        allocations: "provider_id,start,end\n".into(),
        observations: "domain,ip\n".into(),
        abuse: "domain,ip,timestamp\n".into(),
        alt_abuse: "domain,ip,timestamp\n".into(),
        ranks: "domain,rank\n".into(),
        enrichment: "provider_id,country,price_per_year,time_in_business,ict_dev_index,wordpress_use,server_brand\n".into(),
    };
    let mut next: u32 = u32::from(Ipv4Addr::new(11, 0, 0, 0));
    for p in 0..cfg.providers {
        let id = format!("hp{p:04}");
        let assigned_log = clamp_normal(&mut rng, 3.1, 1.0, 0.5, 5.5);
        let assigned = 10f64.powf(assigned_log).round().max(4.0) as u32;

        // one or two disjoint blocks with a gap between providers
        let mut ranges = Vec::new();
        if assigned >= 8 && rng.random_bool(0.3) {
            let first = assigned / 2;
            ranges.push((next, next + first - 1));
            let second_start = next + first + 16;
            ranges.push((second_start, second_start + (assigned - first) - 1));
            next = second_start + (assigned - first) + 256;
        } else {
            ranges.push((next, next + assigned - 1));
            next += assigned + 256;
        }
        for (s, e) in &ranges {
            f.allocations
                .push_str(&format!("{id},{},{}\n", ip(*s), ip(*e)));
        }

        let no_domains = rng.random_bool(0.02);
        let hosting_log = clamp_normal(&mut rng, 1.4, 0.6, 0.0, assigned_log.min(3.0));
        let hosting = if no_domains {
            0
        } else {
            (10f64.powf(hosting_log).round() as u32).clamp(1, assigned)
        };
        let domain_log = clamp_normal(&mut rng, hosting_log + 0.3, 0.4, 0.0, 2.7);
        let domains = if no_domains {
            0
        } else {
            10f64.powf(domain_log).round().max(1.0) as usize
        };
        let share = rng.random::<f64>();
        let addresses: Vec<u32> = ranges
            .iter()
            .flat_map(|(s, e)| *s..=*e)
            .take(hosting as usize)
            .collect();

        let mut hosted = Vec::with_capacity(domains);
        for k in 0..domains {
            let addr = if rng.random_bool(share) {
                addresses[0]
            } else {
                addresses[rng.random_range(0..addresses.len())]
            };
            let domain = format!("{id}-{k}.example");
            f.observations.push_str(&format!("{domain},{}\n", ip(addr)));
            hosted.push((domain, addr));
        }
        let mut per_ip = std::collections::HashMap::new();
        for (_, a) in &hosted {
            *per_ip.entry(*a).or_insert(0usize) += 1;
        }
        let shared = hosted.iter().filter(|(_, a)| per_ip[a] > 10).count();
        let pct_shared = if domains == 0 {
            0.0
        } else {
            100.0 * shared as f64 / domains as f64
        };

        for (domain, _) in &hosted {
            if rng.random_bool(0.3) {
                let rank = rng.random_range(1..=1_000_000u32);
                f.ranks.push_str(&format!("{domain},{rank}\n"));
            }
        }

        let country =
            (!rng.random_bool(0.03)).then(|| COUNTRIES[rng.random_range(0..COUNTRIES.len())]);
        let price = rng.random_bool(0.8).then(|| {
            Normal::<f64>::new(4.0, 0.7)
                .expect("valid")
                .sample(&mut rng)
                .exp()
                .round()
        });
        let years = rng.random_bool(0.95).then(|| rng.random_range(1..=25));
        let wordpress = rng
            .random_bool(0.9)
            .then(|| (rng.random::<f64>() * 0.6 * 1000.0).round() / 1000.0);
        let brand = ["apache", "nginx", "iis"][rng.random_range(0..3)];

        let eta = -0.6 + 0.9 * domain_log + 0.5 * hosting_log - 0.3 * assigned_log
            + 0.006 * pct_shared
            - 0.004 * price.unwrap_or(50.0)
            + 0.8 * wordpress.unwrap_or(0.3)
            + country.map_or(0.0, |c| c.2);
        let heterogeneity = Normal::new(0.0, 0.4).expect("valid").sample(&mut rng);
        let lambda = 3.0 + (eta + heterogeneity).exp();
        let y = Poisson::new(lambda).expect("valid").sample(&mut rng) as usize;
        let alt_lambda = lambda * rng.random_range(0.5..1.5);
        let y_alt = Poisson::new(alt_lambda).expect("valid").sample(&mut rng) as usize;
        abuse_rows(
            &mut rng,
            &mut f.abuse,
            y,
            &hosted,
            &ranges,
            &format!("abuse-{id}-"),
        );
        abuse_rows(
            &mut rng,
            &mut f.alt_abuse,
            y_alt,
            &hosted,
            &ranges,
            &format!("alt-{id}-"),
        );

        let opt = |v: Option<String>| v.unwrap_or_default();
        f.enrichment.push_str(&format!(
            "{id},{},{},{},{},{},{brand}\n",
            opt(country.map(|c| c.0.to_string())),
            opt(price.map(|p| p.to_string())),
            opt(years.map(|y| y.to_string())),
            opt(country.map(|c| c.1.to_string())),
            opt(wordpress.map(|w| w.to_string())),
        ));
    }
    // reports on unallocated space are skipped during attribution
    for k in 0..5 {
        f.abuse.push_str(&format!(
            "stray{k}.example,{},2016-01-01\n",
            ip(200 << 24 | k)
        ));
        f.observations
            .push_str(&format!("stray{k}.example,{}\n", ip(200 << 24 | k)));
    }
    f
}

/// Writes the fixture files into `dir`.
pub fn write_fixture(dir: &Path, cfg: &FixtureConfig) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let f = generate(cfg);
    let files = [
        (ALLOCATIONS, f.allocations),
        (OBSERVATIONS, f.observations),
        (ABUSE, f.abuse),
        (ALT_ABUSE, f.alt_abuse),
        (RANKS, f.ranks),
        (ENRICHMENT, f.enrichment),
    ];
    let mut names = Vec::new();
    for (name, body) in files {
        fs::write(dir.join(name), body)?;
        names.push(name.to_string());
    }
    Ok(names)
}
