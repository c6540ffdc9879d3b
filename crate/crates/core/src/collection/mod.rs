//! Stage 1: crawling, upload, session analysis and incremental feature
//! extraction.

pub mod corpus;
pub mod fetch;
pub mod package;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::domain::{derive_seed, resolve_label, ArtifactId, FeatureFamily, ResolvedLabel, Seed, Timestamp, VoteRecord};
use crate::error::{Error, FieldError, Result};
use crate::instrument::Instrumentation;
use crate::queue::UnitProgress;
use crate::store::{ArtifactKind, ArtifactStore, ProvenanceRecord};

pub use corpus::{generate_corpus, CorpusIndex, CorpusMode, IndexEntry};
pub use fetch::Fetcher;
pub use package::{parse_package, write_package, Intents, Manifest};

pub const PLUGIN_VERSION: &str = "1.0.0";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PackageMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_platform_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub developer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
}

impl PackageMetadata {
    /// Parses a metadata document; absent fields are fine, malformed ones
    /// are reported by name.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes)
            .map_err(|e| Error::Validation(vec![FieldError::new("metadata", format!("invalid JSON: {e}"))]))?;
        let Some(obj) = value.as_object() else {
            return Err(Error::Validation(vec![FieldError::new("metadata", "not an object")]));
        };
        let mut errors = Vec::new();
        let text = |k: &str, errors: &mut Vec<FieldError>| match obj.get(k) {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(s.clone()),
            Some(_) => {
                errors.push(FieldError::new(format!("metadata.{k}"), "expected a string"));
                None
            }
        };
        let category = text("category", &mut errors);
        let description = text("description", &mut errors);
        let min_platform_version = text("min_platform_version", &mut errors);
        let developer = text("developer", &mut errors);
        let size_bytes = match obj.get("size_bytes") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => match v.as_u64() {
                Some(n) => Some(n),
                None => {
                    errors.push(FieldError::new("metadata.size_bytes", "expected a non-negative integer"));
                    None
                }
            },
        };
        let rating = match obj.get("rating") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => match v.as_f64() {
                Some(r) if (0.0..=5.0).contains(&r) => Some(r),
                _ => {
                    errors.push(FieldError::new("metadata.rating", "expected a number in [0, 5]"));
                    None
                }
            },
        };
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }
        Ok(Self {
            category,
            description,
            size_bytes,
            min_platform_version,
            developer,
            rating,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageRecord {
    pub package_id: ArtifactId,
    pub name: String,
    pub version: String,
    pub origin: String,
    pub metadata: PackageMetadata,
    pub stored_at: Timestamp,
    pub metadata_updated_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedManifest {
    pub name: String,
    pub version: String,
    pub category_hint: String,
    pub permissions: Vec<String>,
    pub features: Vec<String>,
    pub sensors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisSession {
    pub package_id: ArtifactId,
    pub manifest: ParsedManifest,
    pub streams: BTreeMap<FeatureFamily, Vec<String>>,
}

impl AnalysisSession {
    fn from_manifest(package_id: ArtifactId, m: &Manifest) -> Self {
        Self {
            package_id,
            manifest: ParsedManifest {
                name: m.name.clone(),
                version: m.version.clone(),
                category_hint: m.category_hint.clone(),
                permissions: m.permissions.clone(),
                features: m.features.clone(),
                sensors: m.sensors.clone(),
            },
            streams: m.token_streams(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub package_id: ArtifactId,
    pub extracted: BTreeMap<FeatureFamily, Vec<String>>,
    pub completed_families: BTreeSet<FeatureFamily>,
}

impl FeatureSet {
    pub fn empty(package_id: ArtifactId) -> Self {
        Self {
            package_id,
            extracted: BTreeMap::new(),
            completed_families: BTreeSet::new(),
        }
    }

    /// Canonical payload bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("feature sets serialize")
    }
}

/// Sorted, duplicate-free tokens of a raw stream.
pub fn extract_tokens(raw: &[String]) -> Vec<String> {
    raw.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
}

/// Who is running a stage and with which seed; carried into provenance.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub master_seed: Seed,
    pub user: String,
}

impl RunContext {
    pub fn new(master_seed: Seed, user: &str) -> Self {
        Self {
            master_seed,
            user: user.to_string(),
        }
    }
}

/// What one crawl did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrawlReport {
    pub package_ids: Vec<ArtifactId>,
    pub downloaded: usize,
    pub skipped: usize,
}

pub fn package_key(id: &ArtifactId) -> String {
    format!("package/{id}")
}

fn session_key(id: &ArtifactId) -> String {
    format!("session/{id}")
}

fn featureset_key(id: &ArtifactId) -> String {
    format!("featureset/{id}")
}

fn votes_key(id: &ArtifactId) -> String {
    format!("votes/{id}")
}

/// Stage-1 operations over a shared store.
pub struct Collector {
    store: Arc<ArtifactStore>,
    fetcher: Fetcher,
    instrumentation: Arc<Instrumentation>,
    locks: Mutex<HashMap<ArtifactId, Arc<Mutex<()>>>>,
}

impl Collector {
    pub fn new(store: Arc<ArtifactStore>, instrumentation: Arc<Instrumentation>) -> Self {
        Self {
            store,
            fetcher: Fetcher::default(),
            instrumentation,
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &Arc<ArtifactStore> {
        &self.store
    }

    pub fn instrumentation(&self) -> &Arc<Instrumentation> {
        &self.instrumentation
    }

    /// Serializes session and feature-set updates of one package.
    fn package_lock(&self, id: &ArtifactId) -> Arc<Mutex<()>> {
        self.locks.lock().unwrap().entry(id.clone()).or_default().clone()
    }

    fn put_package(
        &self,
        bytes: &[u8],
        stage: &str,
        plugin: &str,
        params: Vec<(String, String)>,
        run: &RunContext,
    ) -> Result<ArtifactId> {
        let now = self.store.now();
        let record = ProvenanceRecord::begin(
            stage,
            plugin,
            PLUGIN_VERSION,
            params,
            derive_seed(run.master_seed, stage)?,
            &run.user,
            now,
        );
        self.store
            .put(bytes, ArtifactKind::Package, &[], record.finished(self.store.now()))
    }

    /// Stores an uploaded package. Uploading the same bytes again returns the
    /// existing id and leaves the record alone.
    pub fn ingest_upload(
        &self,
        payload: &[u8],
        declared_category: Option<&str>,
        uploader: &str,
        run: &RunContext,
    ) -> Result<ArtifactId> {
        let manifest = parse_package(payload)?;
        let params = vec![
            ("uploader".to_string(), uploader.to_string()),
            ("declared_category".to_string(), declared_category.unwrap_or("").to_string()),
        ];
        let id = self.put_package(payload, "upload", "uploader", params, run)?;
        let now = self.store.now();
        let record = PackageRecord {
            package_id: id.clone(),
            name: manifest.name.clone(),
            version: manifest.version.clone(),
            origin: format!("upload:{uploader}"),
            metadata: PackageMetadata {
                category: declared_category.filter(|c| !c.is_empty()).map(str::to_string),
                size_bytes: Some(payload.len() as u64),
                ..Default::default()
            },
            stored_at: now,
            metadata_updated_at: now,
        };
        self.store.update_ref(&package_key(&id), |current| match current {
            Some(existing) => Ok(existing.clone()),
            None => Ok(serde_json::to_value(&record)?),
        })?;
        Ok(id)
    }

    /// Downloads every package listed in the index, one unit per entry.
    /// Units already completed are skipped, as are packages whose content is
    /// already stored; metadata is always refreshed.
    pub fn crawl(
        &self,
        index_url: &str,
        metadata_url: Option<&str>,
        run: &RunContext,
        progress: &dyn UnitProgress,
    ) -> Result<CrawlReport> {
        let index_loc = fetch::index_location(index_url);
        let package_base = fetch::base_of(&index_loc);
        let metadata_base = fetch::base_of(metadata_url.unwrap_or(&package_base));
        let raw = self.fetcher.fetch(&index_loc)?;
        let index = parse_index(&raw)?;

        let units: Vec<String> = index.packages.iter().map(|e| e.id.clone()).collect();
        progress.declare_units(units)?;
        let done = progress.completed_units()?;

        let params = vec![
            ("index_url".to_string(), index_url.to_string()),
            ("metadata_url".to_string(), metadata_url.unwrap_or("").to_string()),
        ];
        let mut report = CrawlReport::default();
        for entry in &index.packages {
            progress.checkpoint()?;
            let known: Option<ArtifactId> = entry
                .id
                .parse()
                .ok()
                .filter(|id| self.store.contains(id) && self.store.get_ref(&package_key(id)).is_some());
            if done.contains(&entry.id) {
                if let Some(id) = known {
                    report.package_ids.push(id);
                    report.skipped += 1;
                    continue;
                }
            }
            let (id, manifest, origin) = match known {
                Some(id) => {
                    report.skipped += 1;
                    let record: PackageRecord = serde_json::from_value(
                        self.store.get_ref(&package_key(&id)).expect("checked above"),
                    )?;
                    (id, None, record.origin)
                }
                None => {
                    let location = fetch::join(&package_base, &entry.file);
                    let bytes = self.fetcher.fetch(&location)?;
                    self.instrumentation.count_download(&location);
                    report.downloaded += 1;
                    let manifest = parse_package(&bytes).map_err(|e| match e {
                        Error::Validation(mut errs) => {
                            errs.insert(0, FieldError::new(format!("packages[{}]", entry.id), "invalid package"));
                            Error::Validation(errs)
                        }
                        other => other,
                    })?;
                    let id = self.put_package(&bytes, "crawl", "crawler", params.clone(), run)?;
                    (id, Some(manifest), location)
                }
            };
            let metadata_loc = fetch::join(&metadata_base, &entry.metadata_ref);
            let metadata = PackageMetadata::parse(&self.fetcher.fetch(&metadata_loc)?)?;
            let now = self.store.now();
            self.store.update_ref(&package_key(&id), |current| {
                let record = match current {
                    Some(existing) => {
                        let mut r: PackageRecord = serde_json::from_value(existing.clone())?;
                        if r.metadata != metadata {
                            r.metadata = metadata.clone();
                            r.metadata_updated_at = now;
                        }
                        r
                    }
                    None => {
                        let m = manifest.as_ref().ok_or_else(|| Error::Integrity(format!("record of {id} vanished")))?;
                        PackageRecord {
                            package_id: id.clone(),
                            name: m.name.clone(),
                            version: m.version.clone(),
                            origin: origin.clone(),
                            metadata: metadata.clone(),
                            stored_at: now,
                            metadata_updated_at: now,
                        }
                    }
                };
                Ok(serde_json::to_value(record)?)
            })?;
            progress.unit_done(&entry.id)?;
            report.package_ids.push(id);
        }
        Ok(report)
    }

    pub fn package_record(&self, id: &ArtifactId) -> Result<PackageRecord> {
        let v = self
            .store
            .get_ref(&package_key(id))
            .ok_or_else(|| Error::not_found(format!("package {id}")))?;
        Ok(serde_json::from_value(v)?)
    }

    /// All package records in id order.
    pub fn package_records(&self) -> Result<Vec<PackageRecord>> {
        self.store
            .refs_with_prefix("package/")
            .into_iter()
            .map(|(_, v)| Ok(serde_json::from_value(v)?))
            .collect()
    }

    /// Parses a package into a session, once. Later calls return the stored
    /// session without touching the package again.
    pub fn analyze(&self, package_id: &ArtifactId, run: &RunContext) -> Result<ArtifactId> {
        let lock = self.package_lock(package_id);
        let _guard = lock.lock().unwrap();
        self.analyze_locked(package_id, run)
    }

    fn analyze_locked(&self, package_id: &ArtifactId, run: &RunContext) -> Result<ArtifactId> {
        if let Some(id) = self.store.get_ref_id(&session_key(package_id)) {
            if self.store.contains(&id) {
                return Ok(id);
            }
        }
        let bytes = self.store.get(package_id)?;
        self.instrumentation.count_parse(package_id.as_str());
        let manifest = parse_package(&bytes)?;
        let session = AnalysisSession::from_manifest(package_id.clone(), &manifest);
        let record = ProvenanceRecord::begin(
            "analyze",
            "analyzer",
            PLUGIN_VERSION,
            vec![("package".to_string(), package_id.to_string())],
            derive_seed(run.master_seed, "analyze")?,
            &run.user,
            self.store.now(),
        );
        let id = self.store.put(
            &serde_json::to_vec(&session)?,
            ArtifactKind::Session,
            std::slice::from_ref(package_id),
            record.finished(self.store.now()),
        )?;
        self.store.set_ref(&session_key(package_id), serde_json::Value::String(id.to_string()))?;
        Ok(id)
    }

    pub fn session(&self, package_id: &ArtifactId) -> Result<Option<AnalysisSession>> {
        match self.store.get_ref_id(&session_key(package_id)) {
            Some(id) => Ok(Some(serde_json::from_slice(&self.store.get(&id)?)?)),
            None => Ok(None),
        }
    }

    pub fn featureset_id(&self, package_id: &ArtifactId) -> Option<ArtifactId> {
        self.store.get_ref_id(&featureset_key(package_id))
    }

    pub fn featureset(&self, package_id: &ArtifactId) -> Result<FeatureSet> {
        match self.featureset_id(package_id) {
            Some(id) => Ok(serde_json::from_slice(&self.store.get(&id)?)?),
            None => Ok(FeatureSet::empty(package_id.clone())),
        }
    }

    /// Extracts the requested families that are not yet in the package's
    /// feature set, one unit per family. Each family is persisted before its
    /// unit is recorded, so an interrupted run never repeats finished work.
    pub fn extract(
        &self,
        package_id: &ArtifactId,
        requested: &BTreeSet<FeatureFamily>,
        run: &RunContext,
        progress: &dyn UnitProgress,
    ) -> Result<ArtifactId> {
        if !self.store.contains(package_id) {
            return Err(Error::not_found(format!("package {package_id}")));
        }
        let lock = self.package_lock(package_id);
        let _guard = lock.lock().unwrap();
        let session_id = self.analyze_locked(package_id, run)?;
        let session: AnalysisSession = serde_json::from_slice(&self.store.get(&session_id)?)?;
        let mut current = self.featureset(package_id)?;
        let mut current_id = self.featureset_id(package_id);

        for family in requested {
            progress.checkpoint()?;
            if !current.completed_families.contains(family) {
                self.instrumentation.count_extraction(package_id.as_str(), *family);
                let tokens = extract_tokens(session.streams.get(family).map(Vec::as_slice).unwrap_or(&[]));
                current.extracted.insert(*family, tokens);
                current.completed_families.insert(*family);

                let mut inputs = vec![session_id.clone()];
                inputs.extend(current_id.clone());
                let now = self.store.now();
                let record = ProvenanceRecord::begin(
                    "extract",
                    "extractor",
                    PLUGIN_VERSION,
                    vec![
                        ("package".to_string(), package_id.to_string()),
                        ("family".to_string(), family.to_string()),
                    ],
                    derive_seed(run.master_seed, "extract")?,
                    &run.user,
                    now,
                );
                let id = self
                    .store
                    .put(&current.to_bytes(), ArtifactKind::Featureset, &inputs, record)?;
                self.store
                    .set_ref(&featureset_key(package_id), serde_json::Value::String(id.to_string()))?;
                current_id = Some(id);
                progress.unit_done(family.name())?;
                self.instrumentation.extraction_unit_recorded();
            } else {
                progress.unit_done(family.name())?;
            }
        }
        match current_id {
            Some(id) => Ok(id),
            None => {
                // nothing requested and nothing stored yet: persist the empty set
                let record = ProvenanceRecord::begin(
                    "extract",
                    "extractor",
                    PLUGIN_VERSION,
                    vec![("package".to_string(), package_id.to_string())],
                    derive_seed(run.master_seed, "extract")?,
                    &run.user,
                    self.store.now(),
                );
                let id = self.store.put(
                    &current.to_bytes(),
                    ArtifactKind::Featureset,
                    std::slice::from_ref(&session_id),
                    record,
                )?;
                self.store
                    .set_ref(&featureset_key(package_id), serde_json::Value::String(id.to_string()))?;
                Ok(id)
            }
        }
    }

    pub fn votes(&self, package_id: &ArtifactId) -> Result<Vec<VoteRecord>> {
        match self.store.get_ref(&votes_key(package_id)) {
            Some(v) => Ok(serde_json::from_value(v)?),
            None => Ok(Vec::new()),
        }
    }

    /// Records a category vote and returns the package's resolved label.
    pub fn cast_vote(&self, package_id: &ArtifactId, category: &str, voter: &str) -> Result<ResolvedLabel> {
        if category.trim().is_empty() {
            return Err(Error::Validation(vec![FieldError::new("category", "empty")]));
        }
        if voter.trim().is_empty() {
            return Err(Error::Validation(vec![FieldError::new("voter", "empty")]));
        }
        self.package_record(package_id)?;
        let vote = VoteRecord {
            package_id: package_id.clone(),
            category: category.to_string(),
            voter: voter.to_string(),
            cast_at: self.store.now(),
        };
        self.store.update_ref(&votes_key(package_id), |current| {
            let mut votes: Vec<VoteRecord> = match current {
                Some(v) => serde_json::from_value(v.clone())?,
                None => Vec::new(),
            };
            votes.push(vote.clone());
            Ok(serde_json::to_value(votes)?)
        })?;
        Ok(self
            .resolved_label(package_id)?
            .expect("a vote always resolves"))
    }

    /// Label from votes, then crawled metadata, then the manifest hint.
    pub fn resolved_label(&self, package_id: &ArtifactId) -> Result<Option<ResolvedLabel>> {
        let record = self.package_record(package_id)?;
        let votes = self.votes(package_id)?;
        let hint = self.session(package_id)?.map(|s| s.manifest.category_hint);
        resolve_label(package_id, &votes, record.metadata.category.as_deref(), hint.as_deref())
    }
}

fn parse_index(raw: &[u8]) -> Result<CorpusIndex> {
    let value: serde_json::Value =
        serde_json::from_slice(raw).map_err(|e| Error::Parse(format!("index.json: {e}")))?;
    let Some(list) = value.get("packages").and_then(|p| p.as_array()) else {
        return Err(Error::Parse("index.json: packages".into()));
    };
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(list.len());
    for (i, item) in list.iter().enumerate() {
        let field = |name: &str| -> Result<String> {
            item.get(name)
                .and_then(|v| v.as_str())
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("index.json: packages[{i}].{name}")))
        };
        let entry = IndexEntry {
            id: field("id")?,
            file: field("file")?,
            metadata_ref: field("metadata_ref")?,
        };
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Parse(format!("index.json: packages[{i}].id duplicated")));
        }
        out.push(entry);
    }
    Ok(CorpusIndex { packages: out })
}
