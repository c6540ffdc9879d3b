//! Plugin catalog with self-describing parameter schemas.
//!
//! Each plugin ships a [`PluginDescriptor`] listing its parameters with kind,
//! default, range and description. The descriptor is enough to render an
//! input form and to validate raw string parameters end to end; registering
//! a plugin is the only step needed to make it available to every stage.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};
use crate::model::TrainPlugin;
use crate::preprocessing::TransformPlugin;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PluginStage {
    Preprocess,
    Train,
}

impl PluginStage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "preprocess" => Ok(PluginStage::Preprocess),
            "train" => Ok(PluginStage::Train),
            other => Err(Error::invalid(format!("unknown plugin stage {other:?}"))),
        }
    }
}

impl fmt::Display for PluginStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PluginStage::Preprocess => "preprocess",
            PluginStage::Train => "train",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Int,
    Float,
    Bool,
    Enum,
    String,
    IntList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    IntList(Vec<i64>),
}

impl ParamValue {
    /// Canonical string form; parsing it back with the same kind yields an
    /// equal value.
    pub fn encode(&self) -> String {
        match self {
            ParamValue::Bool(b) => b.to_string(),
            ParamValue::Int(i) => i.to_string(),
            ParamValue::Float(x) => format!("{x:?}"),
            ParamValue::Text(s) => s.clone(),
            ParamValue::IntList(v) => v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
        }
    }

    fn matches(&self, kind: ParamKind) -> bool {
        matches!(
            (self, kind),
            (ParamValue::Bool(_), ParamKind::Bool)
                | (ParamValue::Int(_), ParamKind::Int)
                | (ParamValue::Float(_), ParamKind::Float)
                | (ParamValue::Text(_), ParamKind::Enum | ParamKind::String)
                | (ParamValue::IntList(_), ParamKind::IntList)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamRange {
    Numeric { min: f64, max: f64 },
    Allowed { allowed: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDescriptor {
    pub name: String,
    pub kind: ParamKind,
    pub default: ParamValue,
    pub range: Option<ParamRange>,
    pub description: String,
    pub feature_sensitive_only: bool,
}

impl ParamDescriptor {
    pub fn int(name: &str, default: i64, min: i64, max: i64, description: &str) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Int,
            default: ParamValue::Int(default),
            range: Some(ParamRange::Numeric {
                min: min as f64,
                max: max as f64,
            }),
            description: description.into(),
            feature_sensitive_only: false,
        }
    }

    pub fn float(name: &str, default: f64, min: f64, max: f64, description: &str) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Float,
            default: ParamValue::Float(default),
            range: Some(ParamRange::Numeric { min, max }),
            description: description.into(),
            feature_sensitive_only: false,
        }
    }

    pub fn boolean(name: &str, default: bool, description: &str) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Bool,
            default: ParamValue::Bool(default),
            range: None,
            description: description.into(),
            feature_sensitive_only: false,
        }
    }

    pub fn choice(name: &str, default: &str, allowed: &[&str], description: &str) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Enum,
            default: ParamValue::Text(default.into()),
            range: Some(ParamRange::Allowed {
                allowed: allowed.iter().map(|s| s.to_string()).collect(),
            }),
            description: description.into(),
            feature_sensitive_only: false,
        }
    }

    pub fn int_list(name: &str, default: &[i64], min: i64, max: i64, description: &str) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::IntList,
            default: ParamValue::IntList(default.to_vec()),
            range: Some(ParamRange::Numeric {
                min: min as f64,
                max: max as f64,
            }),
            description: description.into(),
            feature_sensitive_only: false,
        }
    }

    /// Parses and range-checks one raw value.
    fn parse(&self, raw: &str) -> std::result::Result<ParamValue, String> {
        let raw = raw.trim();
        let value = match self.kind {
            ParamKind::Int => ParamValue::Int(raw.parse().map_err(|_| "not an integer".to_string())?),
            ParamKind::Float => {
                let x: f64 = raw.parse().map_err(|_| "not a number".to_string())?;
                if !x.is_finite() {
                    return Err("not a finite number".into());
                }
                ParamValue::Float(x)
            }
            ParamKind::Bool => match raw {
                "true" => ParamValue::Bool(true),
                "false" => ParamValue::Bool(false),
                _ => return Err("not a boolean".into()),
            },
            ParamKind::Enum | ParamKind::String => ParamValue::Text(raw.to_string()),
            ParamKind::IntList => {
                if raw.is_empty() {
                    return Err("empty list".into());
                }
                let items = raw
                    .trim_start_matches('[')
                    .trim_end_matches(']')
                    .split(',')
                    .map(|s| s.trim().parse::<i64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| "not a list of integers".to_string())?;
                ParamValue::IntList(items)
            }
        };
        self.check_range(&value)?;
        Ok(value)
    }

    fn check_range(&self, value: &ParamValue) -> std::result::Result<(), String> {
        let check = |x: f64| -> std::result::Result<(), String> {
            match &self.range {
                Some(ParamRange::Numeric { min, .. }) if x < *min => Err("below minimum".into()),
                Some(ParamRange::Numeric { max, .. }) if x > *max => Err("above maximum".into()),
                _ => Ok(()),
            }
        };
        match value {
            ParamValue::Int(i) => check(*i as f64),
            ParamValue::Float(x) => check(*x),
            ParamValue::IntList(items) => items.iter().try_for_each(|i| check(*i as f64)),
            ParamValue::Text(s) => match &self.range {
                Some(ParamRange::Allowed { allowed }) if !allowed.contains(s) => {
                    Err(format!("not one of {}", allowed.join(", ")))
                }
                _ => Ok(()),
            },
            ParamValue::Bool(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginDescriptor {
    pub plugin_id: String,
    pub version: String,
    pub stage: PluginStage,
    pub algorithm_class: Option<String>,
    pub title: String,
    pub description: String,
    pub params: Vec<ParamDescriptor>,
    pub feature_sensitive: bool,
}

impl PluginDescriptor {
    fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        if self.plugin_id.trim().is_empty() {
            errors.push(FieldError::new("plugin_id", "empty"));
        }
        if self.title.trim().is_empty() {
            errors.push(FieldError::new("title", "empty"));
        }
        if self.description.trim().is_empty() {
            errors.push(FieldError::new("description", "empty description"));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.params {
            if !seen.insert(p.name.as_str()) {
                errors.push(FieldError::new(&p.name, "duplicate parameter"));
            }
            if p.description.trim().is_empty() {
                errors.push(FieldError::new(&p.name, "empty description"));
            }
            if !p.default.matches(p.kind) {
                errors.push(FieldError::new(&p.name, "default does not match kind"));
            } else if let Err(reason) = p.check_range(&p.default) {
                errors.push(FieldError::new(&p.name, format!("default {reason}")));
            }
            if p.kind == ParamKind::Enum && !matches!(p.range, Some(ParamRange::Allowed { .. })) {
                errors.push(FieldError::new(&p.name, "enum without allowed values"));
            }
        }
        errors
    }
}

/// Fully populated, typed parameters in descriptor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet(pub Vec<(String, ParamValue)>);

impl ParamSet {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.0.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }

    pub fn int(&self, name: &str) -> i64 {
        match self.get(name) {
            Some(ParamValue::Int(i)) => *i,
            other => panic!("parameter {name} is not an int: {other:?}"),
        }
    }

    pub fn float(&self, name: &str) -> f64 {
        match self.get(name) {
            Some(ParamValue::Float(x)) => *x,
            Some(ParamValue::Int(i)) => *i as f64,
            other => panic!("parameter {name} is not a float: {other:?}"),
        }
    }

    pub fn boolean(&self, name: &str) -> bool {
        match self.get(name) {
            Some(ParamValue::Bool(b)) => *b,
            other => panic!("parameter {name} is not a bool: {other:?}"),
        }
    }

    pub fn text(&self, name: &str) -> &str {
        match self.get(name) {
            Some(ParamValue::Text(s)) => s,
            other => panic!("parameter {name} is not text: {other:?}"),
        }
    }

    pub fn int_list(&self, name: &str) -> &[i64] {
        match self.get(name) {
            Some(ParamValue::IntList(v)) => v,
            other => panic!("parameter {name} is not an int list: {other:?}"),
        }
    }

    /// String encoding used in provenance records and task params.
    pub fn encode(&self) -> Vec<(String, String)> {
        self.0.iter().map(|(k, v)| (k.clone(), v.encode())).collect()
    }
}

/// What a plugin actually runs.
#[derive(Clone)]
pub enum PluginExecutor {
    Transform(Arc<dyn TransformPlugin>),
    Train(Arc<dyn TrainPlugin>),
}

impl PluginExecutor {
    fn stage(&self) -> PluginStage {
        match self {
            PluginExecutor::Transform(_) => PluginStage::Preprocess,
            PluginExecutor::Train(_) => PluginStage::Train,
        }
    }

    /// Cross-parameter checks beyond per-field kind and range.
    fn extra_checks(&self, params: &ParamSet) -> Vec<FieldError> {
        match self {
            PluginExecutor::Transform(p) => p.check(params),
            PluginExecutor::Train(p) => p.check(params),
        }
    }
}

struct Entry {
    descriptor: PluginDescriptor,
    executor: PluginExecutor,
}

#[derive(Default)]
pub struct Registry {
    plugins: BTreeMap<(PluginStage, String), Entry>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding every builtin preprocessing and training plugin.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        for (d, e) in crate::preprocessing::builtin_plugins() {
            r.register(d, e).expect("builtin preprocessing plugin is valid");
        }
        for (d, e) in crate::model::builtin_plugins() {
            r.register(d, e).expect("builtin training plugin is valid");
        }
        r
    }

    pub fn register(&mut self, descriptor: PluginDescriptor, executor: PluginExecutor) -> Result<()> {
        let mut errors = descriptor.validate();
        if executor.stage() != descriptor.stage {
            errors.push(FieldError::new("stage", "executor does not match stage"));
        }
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }
        let key = (descriptor.stage, descriptor.plugin_id.clone());
        if self.plugins.contains_key(&key) {
            return Err(Error::Conflict(format!(
                "plugin {}/{} already registered",
                descriptor.stage, descriptor.plugin_id
            )));
        }
        self.plugins.insert(key, Entry { descriptor, executor });
        Ok(())
    }

    /// Descriptors ordered by (stage, algorithm class, plugin id).
    pub fn list_plugins(&self, stage: Option<PluginStage>, algorithm_class: Option<&str>) -> Vec<PluginDescriptor> {
        let mut out: Vec<PluginDescriptor> = self
            .plugins
            .values()
            .map(|e| &e.descriptor)
            .filter(|d| stage.is_none_or(|s| d.stage == s))
            .filter(|d| algorithm_class.is_none_or(|c| d.algorithm_class.as_deref() == Some(c)))
            .cloned()
            .collect();
        out.sort_by(|a, b| {
            (a.stage, &a.algorithm_class, &a.plugin_id).cmp(&(b.stage, &b.algorithm_class, &b.plugin_id))
        });
        out
    }

    pub fn descriptor(&self, stage: PluginStage, plugin_id: &str) -> Result<&PluginDescriptor> {
        self.plugins
            .get(&(stage, plugin_id.to_string()))
            .map(|e| &e.descriptor)
            .ok_or_else(|| Error::not_found(format!("plugin {stage}/{plugin_id}")))
    }

    pub fn executor(&self, stage: PluginStage, plugin_id: &str) -> Result<&PluginExecutor> {
        self.plugins
            .get(&(stage, plugin_id.to_string()))
            .map(|e| &e.executor)
            .ok_or_else(|| Error::not_found(format!("plugin {stage}/{plugin_id}")))
    }

    pub fn transform(&self, plugin_id: &str) -> Result<Arc<dyn TransformPlugin>> {
        match self.executor(PluginStage::Preprocess, plugin_id)? {
            PluginExecutor::Transform(t) => Ok(t.clone()),
            PluginExecutor::Train(_) => unreachable!("stage checked at registration"),
        }
    }

    pub fn trainer(&self, plugin_id: &str) -> Result<Arc<dyn TrainPlugin>> {
        match self.executor(PluginStage::Train, plugin_id)? {
            PluginExecutor::Train(t) => Ok(t.clone()),
            PluginExecutor::Transform(_) => unreachable!("stage checked at registration"),
        }
    }

    /// Parses raw string parameters against the plugin schema, filling in
    /// defaults. Every violation is reported, not just the first.
    pub fn validate(&self, plugin_id: &str, stage: PluginStage, raw: &[(String, String)]) -> Result<ParamSet> {
        let entry = self
            .plugins
            .get(&(stage, plugin_id.to_string()))
            .ok_or_else(|| Error::not_found(format!("plugin {stage}/{plugin_id}")))?;
        let schema = &entry.descriptor.params;
        let mut errors = Vec::new();
        for (name, _) in raw {
            if !schema.iter().any(|p| &p.name == name) {
                errors.push(FieldError::new(name, "unknown parameter"));
            }
        }
        let mut values = Vec::with_capacity(schema.len());
        for p in schema {
            let supplied: Vec<&String> = raw.iter().filter(|(n, _)| n == &p.name).map(|(_, v)| v).collect();
            if supplied.len() > 1 {
                errors.push(FieldError::new(&p.name, "given more than once"));
                continue;
            }
            match supplied.first() {
                None => values.push((p.name.clone(), p.default.clone())),
                Some(raw) => match p.parse(raw) {
                    Ok(v) => values.push((p.name.clone(), v)),
                    Err(reason) => errors.push(FieldError::new(&p.name, reason)),
                },
            }
        }
        if errors.is_empty() {
            let set = ParamSet(values);
            errors.extend(entry.executor.extra_checks(&set));
            if errors.is_empty() {
                return Ok(set);
            }
        }
        Err(Error::Validation(errors))
    }
}

/// Reads raw parameters from either a list of `[name, value]` pairs or an
/// object. Object values may be strings, numbers, booleans or arrays of
/// those; arrays become comma-separated lists. Object entries come out
/// sorted by name.
pub fn deserialize_raw_params<'de, D>(d: D) -> std::result::Result<Vec<(String, String)>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    use serde::de::Error as _;
    use serde_json::Value;

    fn scalar(v: &Value) -> Option<String> {
        match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            Value::Bool(b) => Some(b.to_string()),
            _ => None,
        }
    }

    fn text(name: &str, v: &Value) -> std::result::Result<String, String> {
        match v {
            Value::Array(items) => items
                .iter()
                .map(|i| scalar(i).ok_or_else(|| format!("parameter {name}: nested values are not allowed")))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(|parts| parts.join(",")),
            other => scalar(other).ok_or_else(|| format!("parameter {name}: expected a scalar or a list")),
        }
    }

    match Value::deserialize(d)? {
        Value::Null => Ok(Vec::new()),
        Value::Object(map) => map
            .iter()
            .map(|(k, v)| Ok((k.clone(), text(k, v).map_err(D::Error::custom)?)))
            .collect(),
        Value::Array(items) => items
            .into_iter()
            .map(|pair| match pair {
                Value::Array(kv) if kv.len() == 2 => {
                    let name = kv[0].as_str().ok_or_else(|| D::Error::custom("parameter names must be strings"))?;
                    Ok((name.to_string(), text(name, &kv[1]).map_err(D::Error::custom)?))
                }
                _ => Err(D::Error::custom("expected [name, value] pairs")),
            })
            .collect(),
        _ => Err(D::Error::custom("expected an object or a list of [name, value] pairs")),
    }
}
