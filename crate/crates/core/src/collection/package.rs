//! The synthetic package format: a zip holding one `manifest.json`.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use zip::write::SimpleFileOptions;

use crate::domain::FeatureFamily;
use crate::error::{Error, FieldError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

const MANIFEST_KEYS: [&str; 9] = [
    "name",
    "version",
    "category_hint",
    "permissions",
    "features",
    "sensors",
    "intents",
    "apis",
    "strings",
];
const INTENT_KEYS: [&str; 3] = ["activities", "services", "receivers"];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intents {
    pub activities: Vec<String>,
    pub services: Vec<String>,
    pub receivers: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    pub category_hint: String,
    pub permissions: Vec<String>,
    pub features: Vec<String>,
    pub sensors: Vec<String>,
    pub intents: Intents,
    pub apis: Vec<String>,
    pub strings: Vec<String>,
}

impl Manifest {
    /// Raw token stream of one family, duplicates kept, in file order.
    pub fn tokens(&self, family: FeatureFamily) -> Vec<String> {
        match family {
            FeatureFamily::Apis => self.apis.clone(),
            FeatureFamily::Features => self.features.clone(),
            FeatureFamily::Permissions => self.permissions.clone(),
            FeatureFamily::Sensors => self.sensors.clone(),
            FeatureFamily::Strings => self.strings.clone(),
            FeatureFamily::Manifest => vec![
                format!("name={}", self.name),
                format!("version={}", self.version),
                format!("category_hint={}", self.category_hint),
            ],
            FeatureFamily::Intents => {
                let i = &self.intents;
                let tagged = |prefix: &str, v: &[String]| {
                    v.iter().map(|s| format!("{prefix}:{s}")).collect::<Vec<_>>()
                };
                let mut out = tagged("activity", &i.activities);
                out.extend(tagged("service", &i.services));
                out.extend(tagged("receiver", &i.receivers));
                out
            }
        }
    }

    /// All token streams keyed by family.
    pub fn token_streams(&self) -> BTreeMap<FeatureFamily, Vec<String>> {
        FeatureFamily::ALL.iter().map(|f| (*f, self.tokens(*f))).collect()
    }
}

/// Reads and validates a package archive.
pub fn parse_package(bytes: &[u8]) -> Result<Manifest> {
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes))
        .map_err(|e| Error::Validation(vec![FieldError::new("package", format!("not a zip archive: {e}"))]))?;
    let mut count = 0;
    for i in 0..archive.len() {
        let name = archive.name_for_index(i).unwrap_or_default();
        if name == MANIFEST_FILE {
            count += 1;
        }
    }
    match count {
        0 => return Err(Error::Validation(vec![FieldError::new(MANIFEST_FILE, "manifest.json absent")])),
        1 => {}
        _ => return Err(Error::Validation(vec![FieldError::new(MANIFEST_FILE, "more than one manifest.json")])),
    }
    let mut text = String::new();
    archive
        .by_name(MANIFEST_FILE)
        .map_err(|e| Error::Validation(vec![FieldError::new(MANIFEST_FILE, e.to_string())]))?
        .read_to_string(&mut text)
        .map_err(|e| Error::Validation(vec![FieldError::new(MANIFEST_FILE, format!("unreadable: {e}"))]))?;
    parse_manifest(&text)
}

/// Checks the manifest schema, reporting every violation at once.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| Error::Validation(vec![FieldError::new(MANIFEST_FILE, format!("invalid JSON: {e}"))]))?;
    let Value::Object(obj) = &value else {
        return Err(Error::Validation(vec![FieldError::new(MANIFEST_FILE, "not an object")]));
    };
    let mut errors = Vec::new();
    for key in obj.keys() {
        if !MANIFEST_KEYS.contains(&key.as_str()) {
            errors.push(FieldError::new(key, "unknown key"));
        }
    }
    for key in MANIFEST_KEYS {
        match (key, obj.get(key)) {
            (_, None) => errors.push(FieldError::new(key, "missing")),
            ("name" | "version" | "category_hint", Some(v)) => {
                if !v.is_string() {
                    errors.push(FieldError::new(key, "expected a string"));
                }
            }
            ("intents", Some(Value::Object(intents))) => {
                for k in intents.keys() {
                    if !INTENT_KEYS.contains(&k.as_str()) {
                        errors.push(FieldError::new(format!("intents.{k}"), "unknown key"));
                    }
                }
                for k in INTENT_KEYS {
                    match intents.get(k) {
                        None => errors.push(FieldError::new(format!("intents.{k}"), "missing")),
                        Some(v) if !is_string_list(v) => {
                            errors.push(FieldError::new(format!("intents.{k}"), "expected a list of strings"))
                        }
                        Some(_) => {}
                    }
                }
            }
            ("intents", Some(_)) => errors.push(FieldError::new(key, "expected an object")),
            (_, Some(v)) => {
                if !is_string_list(v) {
                    errors.push(FieldError::new(key, "expected a list of strings"));
                }
            }
        }
    }
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    Ok(serde_json::from_value(value)?)
}

fn is_string_list(v: &Value) -> bool {
    v.as_array().is_some_and(|items| items.iter().all(Value::is_string))
}

/// Builds a package archive. Output bytes depend only on the manifest.
pub fn write_package(manifest: &Manifest) -> Result<Vec<u8>> {
    let json = serde_json::to_vec_pretty(manifest)?;
    write_zip(&[(MANIFEST_FILE, json.as_slice())])
}

/// Deterministic zip writer: fixed timestamps, permissions and entry order.
pub fn write_zip(entries: &[(&str, &[u8])]) -> Result<Vec<u8>> {
    let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let options = SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Deflated)
        .compression_level(Some(6))
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(0o644);
    for (name, data) in entries {
        zip.start_file(*name, options)?;
        zip.write_all(data)?;
    }
    Ok(zip.finish()?.into_inner())
}

/// Reads every entry of a zip into memory.
pub fn read_zip(bytes: &[u8]) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes))?;
    let mut out = BTreeMap::new();
    for i in 0..archive.len() {
        let mut f = archive.by_index(i)?;
        let mut data = Vec::new();
        f.read_to_end(&mut data)?;
        out.insert(f.name().to_string(), data);
    }
    Ok(out)
}
