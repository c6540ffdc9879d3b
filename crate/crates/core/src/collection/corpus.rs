//! Deterministic synthetic corpus generator.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::package::{write_package, Intents, Manifest};
use super::PackageMetadata;
use crate::domain::{content_id, scoped_rng, FeatureFamily, Seed};
use crate::error::{Error, Result};

/// Marker tokens per family per category in disjoint mode.
pub const MARKERS_PER_FAMILY: usize = 6;
const SHARED_PER_FAMILY: usize = 8;
const OVERLAP_POOL: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    Disjoint,
    Overlap,
}

impl FromStr for CorpusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(CorpusMode::Disjoint),
            "overlap" => Ok(CorpusMode::Overlap),
            other => Err(Error::invalid(format!("unknown corpus mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub file: String,
    pub metadata_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub packages: Vec<IndexEntry>,
}

/// A token in the style of one family. `group` is a category name or a
/// shared pool name.
fn token(family: FeatureFamily, group: &str, k: usize) -> String {
    match family {
        FeatureFamily::Apis => format!("Lcom/{group}/Api{k};->call"),
        FeatureFamily::Features => format!("hardware.{group}.f{k}"),
        FeatureFamily::Permissions => format!("android.permission.{}_{k}", group.to_uppercase()),
        FeatureFamily::Sensors => format!("sensor.{group}.{k}"),
        FeatureFamily::Strings => format!("{group}_text_{k}"),
        FeatureFamily::Intents => format!("{group}.Component{k}"),
        FeatureFamily::Manifest => unreachable!("manifest tokens come from scalar fields"),
    }
}

fn pick<R: Rng>(rng: &mut R, pool: &[String], lo: usize, hi: usize) -> Vec<String> {
    let n = rng.random_range(lo..=hi.min(pool.len()));
    let mut chosen: Vec<String> = pool.choose_multiple(rng, n).cloned().collect();
    chosen.shuffle(rng);
    chosen
}

fn family_tokens<R: Rng>(
    rng: &mut R,
    family: FeatureFamily,
    mode: CorpusMode,
    ci: usize,
    categories: &[String],
) -> Vec<String> {
    let mut out = match mode {
        CorpusMode::Disjoint => {
            let markers: Vec<String> = (0..MARKERS_PER_FAMILY)
                .map(|k| token(family, &categories[ci], k))
                .collect();
            let shared: Vec<String> = (0..SHARED_PER_FAMILY).map(|k| token(family, "shared", k)).collect();
            let mut v = pick(rng, &markers, 3, MARKERS_PER_FAMILY);
            v.extend(pick(rng, &shared, 0, 3));
            v
        }
        CorpusMode::Overlap => {
            // each category prefers a window of the common pool; windows overlap
            let pool: Vec<String> = (0..OVERLAP_POOL).map(|k| token(family, "common", k)).collect();
            let window: Vec<String> = (0..6).map(|j| pool[(ci * 3 + j) % OVERLAP_POOL].clone()).collect();
            let mut v = pick(rng, &window, 2, 4);
            v.extend(pick(rng, &pool, 0, 2));
            v
        }
    };
    // an occasional repeated token exercises duplicate handling
    if !out.is_empty() && rng.random_bool(0.2) {
        let dup = out[rng.random_range(0..out.len())].clone();
        out.push(dup);
    }
    out
}

fn manifest_for<R: Rng>(rng: &mut R, i: usize, mode: CorpusMode, ci: usize, categories: &[String]) -> Manifest {
    let cat = &categories[ci];
    let mut tokens = |family| family_tokens(rng, family, mode, ci, categories);
    let apis = tokens(FeatureFamily::Apis);
    let features = tokens(FeatureFamily::Features);
    let permissions = tokens(FeatureFamily::Permissions);
    let sensors = tokens(FeatureFamily::Sensors);
    let strings = tokens(FeatureFamily::Strings);
    let components = tokens(FeatureFamily::Intents);
    let mut intents = Intents::default();
    for (j, c) in components.into_iter().enumerate() {
        match j % 3 {
            0 => intents.activities.push(c),
            1 => intents.services.push(c),
            _ => intents.receivers.push(c),
        }
    }
    let (version, hint) = match mode {
        // major version encodes the category, so versions never cross categories
        CorpusMode::Disjoint => (format!("{}.{}.0", ci + 1, rng.random_range(0..3)), cat.clone()),
        CorpusMode::Overlap => {
            let hint = if rng.random_bool(0.8) {
                cat.clone()
            } else {
                categories.choose(rng).expect("categories nonempty").clone()
            };
            (format!("1.{}.0", rng.random_range(0..3)), hint)
        }
    };
    Manifest {
        name: format!("{cat}_app_{i:04}"),
        version,
        category_hint: hint,
        permissions,
        features,
        sensors,
        intents,
        apis,
        strings,
    }
}

/// Writes `n_packages` packages, their metadata documents and `index.json`
/// under `out`. Output bytes depend only on the arguments.
pub fn generate_corpus(
    n_packages: usize,
    categories: &[String],
    mode: CorpusMode,
    seed: Seed,
    out: &Path,
) -> Result<CorpusIndex> {
    if categories.len() < 2 {
        return Err(Error::invalid("at least two categories are required"));
    }
    if n_packages < categories.len() {
        return Err(Error::invalid("need at least one package per category"));
    }
    let mut unique = categories.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != categories.len() || categories.iter().any(|c| c.trim().is_empty()) {
        return Err(Error::invalid("categories must be distinct and nonempty"));
    }

    fs::create_dir_all(out.join("packages"))?;
    fs::create_dir_all(out.join("metadata"))?;
    let mut rng = scoped_rng(seed, "corpus")?;
    let mut index = CorpusIndex { packages: Vec::new() };
    for i in 0..n_packages {
        let ci = i % categories.len();
        let manifest = manifest_for(&mut rng, i, mode, ci, categories);
        let bytes = write_package(&manifest)?;
        let metadata = PackageMetadata {
            category: Some(categories[ci].clone()),
            description: Some(format!("Synthetic {} package number {i}.", categories[ci])),
            size_bytes: Some(bytes.len() as u64),
            min_platform_version: Some(format!("{}", 21 + rng.random_range(0..10))),
            developer: Some(format!("dev{:02}", rng.random_range(0..20))),
            rating: Some(f64::from(rng.random_range(0..=50u32)) / 10.0),
        };
        let file = format!("packages/{}.zip", manifest.name);
        let metadata_ref = format!("metadata/{}.json", manifest.name);
        fs::write(out.join(&file), &bytes)?;
        fs::write(out.join(&metadata_ref), serde_json::to_vec_pretty(&metadata)?)?;
        index.packages.push(IndexEntry {
            id: content_id(&bytes).to_string(),
            file,
            metadata_ref,
        });
    }
    fs::write(out.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}
