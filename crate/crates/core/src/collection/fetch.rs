use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::error::{Error, Result};

/// Reads a location that is either an `http(s)://` URL, a `file://` URL or a
/// plain filesystem path.
#[derive(Debug, Clone)]
pub struct Fetcher {
    agent: ureq::Agent,
}

impl Default for Fetcher {
    fn default() -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .build();
        Self {
            agent: config.into(),
        }
    }
}

fn is_http(location: &str) -> bool {
    location.starts_with("http://") || location.starts_with("https://")
}

fn local_path(location: &str) -> PathBuf {
    PathBuf::from(location.strip_prefix("file://").unwrap_or(location))
}

impl Fetcher {
    pub fn fetch(&self, location: &str) -> Result<Vec<u8>> {
        if is_http(location) {
            let mut resp = self
                .agent
                .get(location)
                .call()
                .map_err(|e| Error::Fetch(format!("GET {location}: {e}")))?;
            let mut body = Vec::new();
            resp.body_mut()
                .as_reader()
                .read_to_end(&mut body)
                .map_err(|e| Error::Fetch(format!("GET {location}: {e}")))?;
            Ok(body)
        } else {
            std::fs::read(local_path(location)).map_err(|e| Error::Fetch(format!("{location}: {e}")))
        }
    }
}

/// The directory-like base of a location: a URL or path ending in `/` is
/// its own base, a directory path is its own base, otherwise the last
/// segment is dropped.
pub fn base_of(location: &str) -> String {
    if location.ends_with('/') {
        return location.to_string();
    }
    if !is_http(location) && local_path(location).is_dir() {
        return format!("{location}/");
    }
    match location.rfind('/') {
        Some(i) => location[..=i].to_string(),
        None => String::new(),
    }
}

/// Resolves `relative` against a base produced by [`base_of`].
pub fn join(base: &str, relative: &str) -> String {
    if is_http(relative) || relative.starts_with("file://") || Path::new(relative).is_absolute() {
        return relative.to_string();
    }
    format!("{base}{relative}")
}

/// Where the index document lives, given an index location that may name a
/// directory.
pub fn index_location(location: &str) -> String {
    if location.ends_with('/') || (!is_http(location) && local_path(location).is_dir()) {
        join(&base_of(location), "index.json")
    } else {
        location.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution() {
        assert_eq!(base_of("http://h/c/index.json"), "http://h/c/");
        assert_eq!(base_of("http://h/meta/"), "http://h/meta/");
        assert_eq!(join("http://h/c/", "packages/a.zip"), "http://h/c/packages/a.zip");
        assert_eq!(join("http://h/c/", "/abs/a.zip"), "/abs/a.zip");
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        assert_eq!(base_of(d), format!("{d}/"));
        assert_eq!(index_location(d), format!("{d}/index.json"));
        assert_eq!(index_location("http://h/c/"), "http://h/c/index.json");
    }

    #[test]
    fn missing_file_is_fetch_error() {
        let e = Fetcher::default().fetch("/definitely/not/here").unwrap_err();
        assert!(e.is_retryable());
    }
}
