//! Content-addressed artifact store.
//!
//! Payloads are DEFLATE-compressed into `objects/<first2>/<hex>.zd`, written to
//! a temp file and renamed into place. Every stored artifact has one line in
//! the append-only `provenance.log` carrying its kind, creation time, input ids
//! and the provenance record of the run that produced it. The full lineage of
//! an artifact is assembled from those lines on demand.
//!
//! A small key/value catalog (`refs.log`, last write wins) holds the mutable
//! names that point into the immutable object space: package records, the
//! current feature set of a package, dataset and model names.

mod xml;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::domain::{content_id, ArtifactId, Clock, Seed, SystemClock, Timestamp};
use crate::error::{Error, Result};

pub use xml::{parse_provenance_xml, render_provenance_xml};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Package,
    Session,
    Featureset,
    DatasetSelected,
    DatasetMerged,
    DatasetProcessed,
    Model,
    Evaluation,
    CorpusIndex,
}

impl ArtifactKind {
    pub fn name(self) -> &'static str {
        match self {
            ArtifactKind::Package => "package",
            ArtifactKind::Session => "session",
            ArtifactKind::Featureset => "featureset",
            ArtifactKind::DatasetSelected => "dataset_selected",
            ArtifactKind::DatasetMerged => "dataset_merged",
            ArtifactKind::DatasetProcessed => "dataset_processed",
            ArtifactKind::Model => "model",
            ArtifactKind::Evaluation => "evaluation",
            ArtifactKind::CorpusIndex => "corpus_index",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown artifact kind {s:?}")))
    }
}

/// Audit entry for one stage run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub run_id: String,
    pub stage: String,
    pub plugin_id: String,
    pub plugin_version: String,
    pub params: Vec<(String, String)>,
    pub seed: Seed,
    pub user: String,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
    pub input_ids: Vec<ArtifactId>,
    pub output_ids: Vec<ArtifactId>,
}

impl ProvenanceRecord {
    /// A fresh record for a run starting now, with a random run id.
    pub fn begin(
        stage: &str,
        plugin_id: &str,
        plugin_version: &str,
        params: Vec<(String, String)>,
        seed: Seed,
        user: &str,
        now: Timestamp,
    ) -> Self {
        Self {
            run_id: uuid::Uuid::new_v4().to_string(),
            stage: stage.to_string(),
            plugin_id: plugin_id.to_string(),
            plugin_version: plugin_version.to_string(),
            params,
            seed,
            user: user.to_string(),
            started_at: now,
            finished_at: now,
            input_ids: Vec::new(),
            output_ids: Vec::new(),
        }
    }

    pub fn finished(mut self, at: Timestamp) -> Self {
        self.finished_at = at;
        self
    }
}

/// Parses an exported provenance document back into its records.
pub fn import_provenance_xml(doc: &str) -> Result<Vec<ProvenanceRecord>> {
    parse_provenance_xml(doc).map(|(_, records)| records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogEntry {
    id: ArtifactId,
    kind: ArtifactKind,
    created_at: Timestamp,
    inputs: Vec<ArtifactId>,
    record: ProvenanceRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactSummary {
    pub id: ArtifactId,
    pub kind: ArtifactKind,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FsckReport {
    pub checked: usize,
    pub problems: Vec<String>,
}

impl FsckReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

#[derive(Default)]
struct Index {
    entries: HashMap<ArtifactId, Arc<LogEntry>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RefLine {
    key: String,
    value: serde_json::Value,
}

pub struct ArtifactStore {
    root: PathBuf,
    index: RwLock<Index>,
    log: Mutex<File>,
    refs: RwLock<BTreeMap<String, serde_json::Value>>,
    refs_log: Mutex<File>,
    clock: Arc<dyn Clock>,
}

impl ArtifactStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        Self::open_with_clock(root, Arc::new(SystemClock))
    }

    /// Opens (or creates) a store rooted at `root`, replaying the provenance
    /// and ref logs. Leftover temp files from interrupted writes are removed.
    pub fn open_with_clock(root: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let objects = root.join("objects");
        fs::create_dir_all(&objects)?;
        sweep_temp_files(&objects)?;

        let log_path = root.join("provenance.log");
        repair_log_tail(&log_path)?;
        let mut index = Index::default();
        for line in read_complete_lines(&log_path)? {
            let entry: LogEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("provenance.log: {e}")))?;
            index.entries.insert(entry.id.clone(), Arc::new(entry));
        }

        let refs_path = root.join("refs.log");
        repair_log_tail(&refs_path)?;
        let mut refs = BTreeMap::new();
        for line in read_complete_lines(&refs_path)? {
            let r: RefLine =
                serde_json::from_str(&line).map_err(|e| Error::Parse(format!("refs.log: {e}")))?;
            if r.value.is_null() {
                refs.remove(&r.key);
            } else {
                refs.insert(r.key, r.value);
            }
        }

        Ok(Self {
            log: Mutex::new(open_append(&log_path)?),
            refs_log: Mutex::new(open_append(&refs_path)?),
            root,
            index: RwLock::new(index),
            refs: RwLock::new(refs),
            clock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn object_path(&self, id: &ArtifactId) -> PathBuf {
        self.root
            .join("objects")
            .join(id.shard())
            .join(format!("{id}.zd"))
    }

    pub fn contains(&self, id: &ArtifactId) -> bool {
        self.index.read().unwrap().entries.contains_key(id)
    }

    /// Stores a payload. Re-putting an existing payload returns its id and
    /// leaves the stored copy and its lineage untouched.
    pub fn put(
        &self,
        payload: &[u8],
        kind: ArtifactKind,
        inputs: &[ArtifactId],
        mut record: ProvenanceRecord,
    ) -> Result<ArtifactId> {
        let id = content_id(payload);
        {
            let index = self.index.read().unwrap();
            if let Some(missing) = inputs.iter().find(|i| !index.entries.contains_key(*i)) {
                return Err(Error::MissingInput(missing.to_string()));
            }
            if index.entries.contains_key(&id) {
                return Ok(id);
            }
        }

        self.write_object(&id, payload)?;

        record.input_ids = inputs.to_vec();
        if !record.output_ids.contains(&id) {
            record.output_ids.push(id.clone());
        }
        let entry = LogEntry {
            id: id.clone(),
            kind,
            created_at: self.clock.now(),
            inputs: inputs.to_vec(),
            record,
        };

        let mut log = self.log.lock().unwrap();
        if self.contains(&id) {
            return Ok(id);
        }
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        log.write_all(line.as_bytes())?;
        log.sync_data()?;
        self.index
            .write()
            .unwrap()
            .entries
            .insert(id.clone(), Arc::new(entry));
        Ok(id)
    }

    fn write_object(&self, id: &ArtifactId, payload: &[u8]) -> Result<()> {
        let path = self.object_path(id);
        let dir = path.parent().expect("object path has a shard dir");
        fs::create_dir_all(dir)?;
        let mut encoder = DeflateEncoder::new(Vec::new(), Compression::new(6));
        encoder.write_all(payload)?;
        let compressed = encoder.finish()?;

        let tmp = dir.join(format!(".{id}.{}.tmp", uuid::Uuid::new_v4().simple()));
        let result = (|| -> std::io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(&compressed)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        Ok(result?)
    }

    pub fn get(&self, id: &ArtifactId) -> Result<Vec<u8>> {
        if !self.contains(id) {
            return Err(Error::not_found(format!("artifact {id}")));
        }
        let raw = fs::read(self.object_path(id)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Integrity(format!("{id}: object file missing")),
            _ => Error::Io(e),
        })?;
        let mut payload = Vec::new();
        DeflateDecoder::new(raw.as_slice())
            .read_to_end(&mut payload)
            .map_err(|e| Error::Integrity(format!("{id}: {e}")))?;
        if &content_id(&payload) != id {
            return Err(Error::Integrity(format!("{id}: digest mismatch")));
        }
        Ok(payload)
    }

    /// Size in bytes of the compressed object on disk.
    pub fn stored_size(&self, id: &ArtifactId) -> Result<u64> {
        Ok(fs::metadata(self.object_path(id))?.len())
    }

    pub fn summary(&self, id: &ArtifactId) -> Result<ArtifactSummary> {
        let index = self.index.read().unwrap();
        let e = index
            .entries
            .get(id)
            .ok_or_else(|| Error::not_found(format!("artifact {id}")))?;
        Ok(ArtifactSummary {
            id: e.id.clone(),
            kind: e.kind,
            created_at: e.created_at,
        })
    }

    /// Page of artifacts ordered by `(created_at, id)`.
    pub fn list(
        &self,
        kind: Option<ArtifactKind>,
        offset: usize,
        limit: usize,
    ) -> Result<Page<ArtifactSummary>> {
        if limit == 0 {
            return Err(Error::invalid("limit must be positive"));
        }
        let index = self.index.read().unwrap();
        let mut all: Vec<ArtifactSummary> = index
            .entries
            .values()
            .filter(|e| kind.is_none_or(|k| e.kind == k))
            .map(|e| ArtifactSummary {
                id: e.id.clone(),
                kind: e.kind,
                created_at: e.created_at,
            })
            .collect();
        all.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        let total = all.len();
        let items = all.into_iter().skip(offset).take(limit).collect();
        Ok(Page {
            items,
            total,
            offset,
            limit,
        })
    }

    /// The record that produced `id`, without ancestors.
    pub fn record(&self, id: &ArtifactId) -> Result<ProvenanceRecord> {
        let index = self.index.read().unwrap();
        index
            .entries
            .get(id)
            .map(|e| e.record.clone())
            .ok_or_else(|| Error::not_found(format!("artifact {id}")))
    }

    /// Oldest-first lineage: the distinct records of all inputs in input
    /// order, first occurrence kept, followed by this artifact's own record.
    pub fn lineage(&self, id: &ArtifactId) -> Result<Vec<ProvenanceRecord>> {
        let index = self.index.read().unwrap();
        if !index.entries.contains_key(id) {
            return Err(Error::not_found(format!("artifact {id}")));
        }
        let mut memo: HashMap<ArtifactId, Arc<Vec<Arc<LogEntry>>>> = HashMap::new();
        let chain = lineage_of(&index, id, &mut memo, &mut HashSet::new())?;
        Ok(chain.iter().map(|e| e.record.clone()).collect())
    }

    pub fn export_provenance_xml(&self, id: &ArtifactId) -> Result<String> {
        let lineage = self.lineage(id)?;
        Ok(render_provenance_xml(id, &lineage))
    }

    /// Checks every artifact: object readable, digest matches, inputs exist,
    /// lineage acyclic.
    pub fn fsck(&self) -> FsckReport {
        let ids: Vec<ArtifactId> = {
            let index = self.index.read().unwrap();
            let mut ids: Vec<_> = index.entries.keys().cloned().collect();
            ids.sort();
            ids
        };
        let mut report = FsckReport::default();
        for id in &ids {
            report.checked += 1;
            if let Err(e) = self.get(id) {
                report.problems.push(format!("{id}: {e}"));
            }
        }
        let index = self.index.read().unwrap();
        for id in &ids {
            let entry = &index.entries[id];
            for input in &entry.inputs {
                if !index.entries.contains_key(input) {
                    report.problems.push(format!("{id}: dangling input {input}"));
                }
            }
        }
        // three-colour DFS over the input graph
        let mut state: HashMap<&ArtifactId, u8> = HashMap::new();
        for id in &ids {
            if has_cycle(&index, id, &mut state) {
                report.problems.push(format!("{id}: lineage cycle"));
            }
        }
        report
    }

    pub fn set_ref(&self, key: &str, value: serde_json::Value) -> Result<()> {
        let mut log = self.refs_log.lock().unwrap();
        self.write_ref_line(&mut log, key, &value)?;
        let mut refs = self.refs.write().unwrap();
        if value.is_null() {
            refs.remove(key);
        } else {
            refs.insert(key.to_string(), value);
        }
        Ok(())
    }

    /// Atomic read-modify-write of one ref. Returns the stored value.
    pub fn update_ref<F>(&self, key: &str, f: F) -> Result<serde_json::Value>
    where
        F: FnOnce(Option<&serde_json::Value>) -> Result<serde_json::Value>,
    {
        let mut log = self.refs_log.lock().unwrap();
        let current = self.refs.read().unwrap().get(key).cloned();
        let next = f(current.as_ref())?;
        if current.as_ref() != Some(&next) {
            self.write_ref_line(&mut log, key, &next)?;
            self.refs.write().unwrap().insert(key.to_string(), next.clone());
        }
        Ok(next)
    }

    /// Binds `key` to `id` unless it is already bound to a different id.
    pub fn claim_name(&self, key: &str, id: &ArtifactId) -> Result<()> {
        self.update_ref(key, |current| match current {
            Some(v) if v.as_str() != Some(id.as_str()) => {
                Err(Error::Conflict(format!("{key} already exists")))
            }
            _ => Ok(serde_json::Value::String(id.to_string())),
        })
        .map(|_| ())
    }

    fn write_ref_line(&self, log: &mut File, key: &str, value: &serde_json::Value) -> Result<()> {
        let mut line = serde_json::to_string(&RefLine {
            key: key.to_string(),
            value: value.clone(),
        })?;
        line.push('\n');
        log.write_all(line.as_bytes())?;
        log.sync_data()?;
        Ok(())
    }

    pub fn get_ref(&self, key: &str) -> Option<serde_json::Value> {
        self.refs.read().unwrap().get(key).cloned()
    }

    pub fn get_ref_id(&self, key: &str) -> Option<ArtifactId> {
        self.get_ref(key)
            .and_then(|v| v.as_str().and_then(|s| s.parse().ok()))
    }

    /// All refs under a prefix, in key order, with the prefix stripped.
    pub fn refs_with_prefix(&self, prefix: &str) -> Vec<(String, serde_json::Value)> {
        self.refs
            .read()
            .unwrap()
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k[prefix.len()..].to_string(), v.clone()))
            .collect()
    }
}

fn lineage_of(
    index: &Index,
    id: &ArtifactId,
    memo: &mut HashMap<ArtifactId, Arc<Vec<Arc<LogEntry>>>>,
    visiting: &mut HashSet<ArtifactId>,
) -> Result<Arc<Vec<Arc<LogEntry>>>> {
    if let Some(done) = memo.get(id) {
        return Ok(done.clone());
    }
    let entry = index
        .entries
        .get(id)
        .ok_or_else(|| Error::MissingInput(id.to_string()))?;
    if !visiting.insert(id.clone()) {
        return Err(Error::Integrity(format!("{id}: lineage cycle")));
    }
    let mut chain: Vec<Arc<LogEntry>> = Vec::new();
    let mut seen: HashSet<*const LogEntry> = HashSet::new();
    for input in &entry.inputs {
        for e in lineage_of(index, input, memo, visiting)?.iter() {
            if seen.insert(Arc::as_ptr(e)) {
                chain.push(e.clone());
            }
        }
    }
    chain.push(entry.clone());
    visiting.remove(id);
    let chain = Arc::new(chain);
    memo.insert(id.clone(), chain.clone());
    Ok(chain)
}

fn has_cycle<'a>(index: &'a Index, id: &'a ArtifactId, state: &mut HashMap<&'a ArtifactId, u8>) -> bool {
    match state.get(id) {
        Some(1) => return true,
        Some(2) => return false,
        _ => {}
    }
    state.insert(id, 1);
    let mut cyclic = false;
    if let Some(e) = index.entries.get(id) {
        for input in &e.inputs {
            if has_cycle(index, input, state) {
                cyclic = true;
                break;
            }
        }
    }
    state.insert(id, 2);
    cyclic
}

fn open_append(path: &Path) -> Result<File> {
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

/// Lines of an append-only log, dropping a torn final line left by a crash.
pub(crate) fn read_complete_lines(path: &Path) -> Result<Vec<String>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut lines = Vec::new();
    let mut buf = String::new();
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        if !buf.ends_with('\n') {
            break;
        }
        let line = buf.trim_end();
        if !line.is_empty() {
            lines.push(line.to_string());
        }
    }
    Ok(lines)
}

/// Truncates a torn trailing line so later appends start on a fresh line.
pub(crate) fn repair_log_tail(path: &Path) -> Result<()> {
    let Ok(bytes) = fs::read(path) else {
        return Ok(());
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let f = OpenOptions::new().write(true).open(path)?;
    f.set_len(keep as u64)?;
    f.sync_all()?;
    Ok(())
}

fn sweep_temp_files(objects: &Path) -> Result<()> {
    for shard in fs::read_dir(objects)? {
        let shard = shard?.path();
        if !shard.is_dir() {
            continue;
        }
        for f in fs::read_dir(&shard)? {
            let p = f?.path();
            if p.extension().is_some_and(|e| e == "tmp") {
                fs::remove_file(p)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
