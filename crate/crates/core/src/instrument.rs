//! Counters and crash hooks used by tests and the crash harness.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::domain::FeatureFamily;
use crate::error::Result;

#[derive(Default)]
pub struct Instrumentation {
    parses: Mutex<BTreeMap<String, usize>>,
    extractions: Mutex<BTreeMap<(String, FeatureFamily), usize>>,
    downloads: AtomicUsize,
    extraction_units: AtomicUsize,
    trace: Option<Mutex<File>>,
    abort_after_extractions: Option<usize>,
}

impl Instrumentation {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one line per extraction and download to `path`, so counts
    /// survive a crash of this process.
    pub fn with_trace(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        self.trace = Some(Mutex::new(f));
        Ok(self)
    }

    /// Aborts the process right after the n-th extraction unit is recorded.
    pub fn abort_after_extractions(mut self, n: usize) -> Self {
        self.abort_after_extractions = Some(n);
        self
    }

    fn trace(&self, line: &str) {
        if let Some(f) = &self.trace {
            let mut f = f.lock().unwrap();
            let _ = f.write_all(format!("{line}\n").as_bytes());
        }
    }

    pub fn count_parse(&self, package_id: &str) {
        *self.parses.lock().unwrap().entry(package_id.to_string()).or_default() += 1;
        self.trace(&format!("parse\t{package_id}"));
    }

    pub fn parse_count(&self, package_id: &str) -> usize {
        self.parses.lock().unwrap().get(package_id).copied().unwrap_or(0)
    }

    pub fn total_parses(&self) -> usize {
        self.parses.lock().unwrap().values().sum()
    }

    pub fn count_extraction(&self, package_id: &str, family: FeatureFamily) {
        *self
            .extractions
            .lock()
            .unwrap()
            .entry((package_id.to_string(), family))
            .or_default() += 1;
        self.trace(&format!("extract\t{package_id}\t{family}"));
    }

    pub fn extraction_counts(&self) -> BTreeMap<(String, FeatureFamily), usize> {
        self.extractions.lock().unwrap().clone()
    }

    pub fn count_download(&self, location: &str) {
        self.downloads.fetch_add(1, Ordering::SeqCst);
        self.trace(&format!("download\t{location}"));
    }

    pub fn downloads(&self) -> usize {
        self.downloads.load(Ordering::SeqCst)
    }

    /// Called once an extraction unit is durably recorded.
    pub fn extraction_unit_recorded(&self) {
        let n = self.extraction_units.fetch_add(1, Ordering::SeqCst) + 1;
        if self.abort_after_extractions == Some(n) {
            self.trace("abort");
            std::process::abort();
        }
    }
}
