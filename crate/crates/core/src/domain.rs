//! Identifiers, seeding, feature families and label resolution shared by
//! every stage.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

/// SHA-256 digest of an artifact payload, as 64 lowercase hex characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ArtifactId(String);

impl ArtifactId {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// First two hex characters, used as the object shard directory.
    pub fn shard(&self) -> &str {
        &self.0[..2]
    }
}

impl FromStr for ArtifactId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(ArtifactId(s.to_string()))
        } else {
            Err(Error::invalid(format!("malformed artifact id {s:?}")))
        }
    }
}

impl TryFrom<String> for ArtifactId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ArtifactId> for String {
    fn from(id: ArtifactId) -> String {
        id.0
    }
}

impl fmt::Display for ArtifactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Content address of a payload.
pub fn content_id(payload: &[u8]) -> ArtifactId {
    ArtifactId(hex::encode(Sha256::digest(payload)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl fmt::Display for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Derives a child seed from a master seed and a scope label.
///
/// The child is the first eight bytes (big-endian) of
/// `SHA-256(master as 8 big-endian bytes || label as UTF-8)`.
pub fn derive_seed(master: Seed, scope_label: &str) -> Result<Seed> {
    if scope_label.is_empty() {
        return Err(Error::invalid("scope label must be nonempty"));
    }
    let mut hasher = Sha256::new();
    hasher.update(master.0.to_be_bytes());
    hasher.update(scope_label.as_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    Ok(Seed(u64::from_be_bytes(head)))
}

/// Seeded generator for a scope. Every randomized operation goes through here.
pub fn scoped_rng(master: Seed, scope_label: &str) -> Result<rand_chacha::ChaCha8Rng> {
    use rand::SeedableRng;
    let seed = derive_seed(master, scope_label)?;
    Ok(rand_chacha::ChaCha8Rng::seed_from_u64(seed.0))
}

/// The seven token families extracted from a package. Declaration order is
/// name order, which fixes column order in merged datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFamily {
    Apis,
    Features,
    Intents,
    Manifest,
    Permissions,
    Sensors,
    Strings,
}

impl FeatureFamily {
    pub const ALL: [FeatureFamily; 7] = [
        FeatureFamily::Apis,
        FeatureFamily::Features,
        FeatureFamily::Intents,
        FeatureFamily::Manifest,
        FeatureFamily::Permissions,
        FeatureFamily::Sensors,
        FeatureFamily::Strings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureFamily::Apis => "apis",
            FeatureFamily::Features => "features",
            FeatureFamily::Intents => "intents",
            FeatureFamily::Manifest => "manifest",
            FeatureFamily::Permissions => "permissions",
            FeatureFamily::Sensors => "sensors",
            FeatureFamily::Strings => "strings",
        }
    }
}

impl FromStr for FeatureFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown feature family {s:?}")))
    }
}

impl fmt::Display for FeatureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub package_id: ArtifactId,
    pub category: String,
    pub voter: String,
    pub cast_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Votes,
    Metadata,
    ManifestHint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedLabel {
    pub package_id: ArtifactId,
    pub category: String,
    pub source: LabelSource,
    pub tie: bool,
}

/// Resolves the training label of one package.
///
/// Votes win over crawled metadata, which wins over the manifest hint. Only
/// the latest vote of each voter counts; ties go to the lexicographically
/// smallest category and are flagged.
pub fn resolve_label(
    package_id: &ArtifactId,
    votes: &[VoteRecord],
    metadata_category: Option<&str>,
    manifest_hint: Option<&str>,
) -> Result<Option<ResolvedLabel>> {
    if let Some(v) = votes.iter().find(|v| &v.package_id != package_id) {
        return Err(Error::invalid(format!(
            "vote for {} mixed into votes for {}",
            v.package_id, package_id
        )));
    }
    if let Some(v) = votes.iter().find(|v| v.category.is_empty()) {
        return Err(Error::invalid(format!("empty category in vote by {}", v.voter)));
    }

    if !votes.is_empty() {
        // later entries win on equal timestamps
        let mut latest: HashMap<&str, &VoteRecord> = HashMap::new();
        for v in votes {
            match latest.get(v.voter.as_str()) {
                Some(prev) if prev.cast_at > v.cast_at => {}
                _ => {
                    latest.insert(&v.voter, v);
                }
            }
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for v in latest.values() {
            *counts.entry(&v.category).or_default() += 1;
        }
        let top = counts.values().copied().max().unwrap_or(0);
        let mut tied = counts.iter().filter(|(_, &c)| c == top).map(|(k, _)| *k);
        let category = tied.next().expect("at least one vote").to_string();
        let tie = tied.next().is_some();
        return Ok(Some(ResolvedLabel {
            package_id: package_id.clone(),
            category,
            source: LabelSource::Votes,
            tie,
        }));
    }

    let fallback = metadata_category
        .filter(|c| !c.is_empty())
        .map(|c| (c, LabelSource::Metadata))
        .or_else(|| {
            manifest_hint
                .filter(|c| !c.is_empty())
                .map(|c| (c, LabelSource::ManifestHint))
        });
    Ok(fallback.map(|(category, source)| ResolvedLabel {
        package_id: package_id.clone(),
        category: category.to_string(),
        source,
        tie: false,
    }))
}

/// Time source. Injected everywhere time matters so tests can drive a
/// simulated clock.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Utc::now()
    }
}

/// Manually advanced clock for deterministic tests.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<Timestamp>,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        Self {
            now: Mutex::new(start),
        }
    }

    pub fn at_epoch() -> Self {
        Self::new(Utc.timestamp_opt(1_700_000_000, 0).unwrap())
    }

    pub fn advance(&self, by: Duration) {
        let mut now = self.now.lock().unwrap();
        *now += by;
    }

    pub fn set(&self, to: Timestamp) {
        *self.now.lock().unwrap() = to;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        *self.now.lock().unwrap()
    }
}
