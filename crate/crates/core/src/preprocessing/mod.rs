//! Stage 2: data selection, merging with a train/test split, and the
//! preprocessing plugin chain.

pub mod format;
pub mod transforms;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::collection::{Collector, RunContext};
use crate::domain::{content_id, scoped_rng, ArtifactId, FeatureFamily, Seed};
use crate::error::{Error, FieldError, Result};
use crate::registry::{PluginStage, Registry};
use crate::store::{ArtifactKind, ArtifactStore, ProvenanceRecord};

pub use format::{FamilyTable, LabeledMatrix, SelectedDataset, TabularDataset};
pub use transforms::{builtin_plugins, FittedTransform, TransformPlugin};

const VERSION: &str = "1.0.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub families: BTreeSet<FeatureFamily>,
    pub categories: BTreeSet<String>,
    pub balanced: bool,
    pub inclusion_fraction: f64,
    pub seed: Seed,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub selected_dataset: ArtifactId,
    pub merge_groups: BTreeMap<String, BTreeSet<String>>,
    pub train_fraction: f64,
    pub seed: Seed,
    pub name: String,
}

/// Families a chain step applies to. Serialized as `"all"` or a list of
/// family names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Targets {
    All,
    Families(BTreeSet<FeatureFamily>),
}

impl Serialize for Targets {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Targets::All => s.serialize_str("all"),
            Targets::Families(f) => f.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Targets {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            List(BTreeSet<FeatureFamily>),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) if w == "all" => Ok(Targets::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected \"all\" or a list of families, got {w:?}"
            ))),
            Raw::List(f) => Ok(Targets::Families(f)),
        }
    }
}

impl Targets {
    fn encode(&self) -> String {
        match self {
            Targets::All => "all".into(),
            Targets::Families(f) => f.iter().map(|f| f.name()).collect::<Vec<_>>().join(","),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStep {
    pub plugin_id: String,
    #[serde(default, deserialize_with = "crate::registry::deserialize_raw_params")]
    pub params: Vec<(String, String)>,
    #[serde(default = "all_targets")]
    pub target_families: Targets,
}

fn all_targets() -> Targets {
    Targets::All
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub merged_dataset: ArtifactId,
    pub chain: Vec<ChainStep>,
    pub seed: Seed,
    pub name: String,
}

pub fn selected_key(name: &str) -> String {
    format!("dataset/selected/{name}")
}

pub fn merged_key(name: &str) -> String {
    format!("dataset/merged/{name}")
}

pub fn processed_key(name: &str) -> String {
    format!("dataset/processed/{name}")
}

fn check_name(name: &str) -> Result<()> {
    if name.trim().is_empty() {
        return Err(Error::Validation(vec![FieldError::new("name", "empty")]));
    }
    Ok(())
}

/// Stores a named dataset, refusing a name already bound to other content.
fn put_named(
    store: &ArtifactStore,
    key: &str,
    payload: &[u8],
    kind: ArtifactKind,
    inputs: &[ArtifactId],
    record: ProvenanceRecord,
) -> Result<ArtifactId> {
    let id = content_id(payload);
    if let Some(existing) = store.get_ref_id(key) {
        if existing != id {
            return Err(Error::Conflict(format!("{key} already exists")));
        }
    }
    let id = store.put(payload, kind, inputs, record)?;
    store.claim_name(key, &id)?;
    Ok(id)
}

fn load_kind(store: &ArtifactStore, id: &ArtifactId, kind: ArtifactKind) -> Result<Vec<u8>> {
    let summary = store.summary(id)?;
    if summary.kind != kind {
        return Err(Error::invalid(format!("{id} is a {}, not a {}", summary.kind.name(), kind.name())));
    }
    store.get(id)
}

pub fn load_selected(store: &ArtifactStore, id: &ArtifactId) -> Result<SelectedDataset> {
    SelectedDataset::from_zip(&load_kind(store, id, ArtifactKind::DatasetSelected)?)
}

pub fn load_merged(store: &ArtifactStore, id: &ArtifactId) -> Result<TabularDataset> {
    TabularDataset::from_zip(&load_kind(store, id, ArtifactKind::DatasetMerged)?)
}

pub fn load_processed(store: &ArtifactStore, id: &ArtifactId) -> Result<TabularDataset> {
    TabularDataset::from_zip(&load_kind(store, id, ArtifactKind::DatasetProcessed)?)
}

/// Number of tokens kept out of `distinct` for an inclusion fraction.
pub fn vocabulary_size(fraction: f64, distinct: usize) -> usize {
    // the small slack keeps 0.3 * 10 at 3 rather than rounding up to 4
    let raw = fraction * distinct as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(distinct)
}

/// Builds the per-family vocabulary and sparse rows for the given token sets.
pub fn build_family_table(token_sets: &[&[String]], fraction: f64) -> FamilyTable {
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for set in token_sets {
        for t in set.iter().collect::<BTreeSet<_>>() {
            *df.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = df.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let keep = vocabulary_size(fraction, ranked.len());
    let mut vocabulary: Vec<String> = ranked[..keep].iter().map(|(t, _)| t.to_string()).collect();
    vocabulary.sort();
    let position: HashMap<&str, usize> = vocabulary.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let rows = token_sets
        .iter()
        .map(|set| {
            let mut idx: Vec<usize> = set.iter().filter_map(|t| position.get(t.as_str()).copied()).collect();
            idx.sort_unstable();
            idx.dedup();
            idx
        })
        .collect();
    FamilyTable { vocabulary, rows }
}

/// Field checks of a selection that need no stored data.
pub fn check_selection(config: &SelectionConfig) -> Result<()> {
    let mut errors = Vec::new();
    if config.name.trim().is_empty() {
        errors.push(FieldError::new("name", "empty"));
    }
    if config.families.is_empty() {
        errors.push(FieldError::new("families", "empty"));
    }
    if config.categories.is_empty() {
        errors.push(FieldError::new("categories", "empty"));
    }
    if !(0.0..=1.0).contains(&config.inclusion_fraction) {
        errors.push(FieldError::new("inclusion_fraction", "outside [0, 1]"));
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errors))
    }
}

/// Builds a per-family multi-hot dataset from labeled, extracted packages.
pub fn select(collector: &Collector, config: &SelectionConfig, run: &RunContext) -> Result<ArtifactId> {
    check_selection(config)?;
    let store = collector.store();

    let mut labeled: Vec<(ArtifactId, String)> = Vec::new();
    for record in collector.package_records()? {
        if let Some(label) = collector.resolved_label(&record.package_id)? {
            if config.categories.contains(&label.category) {
                labeled.push((record.package_id, label.category));
            }
        }
    }
    let mut incomplete = Vec::new();
    let mut featuresets = Vec::new();
    for (id, _) in &labeled {
        let fs = collector.featureset(id)?;
        if config.families.iter().any(|f| !fs.completed_families.contains(f)) {
            incomplete.push(id.to_string());
        } else {
            featuresets.push((collector.featureset_id(id).expect("complete sets are stored"), fs));
        }
    }
    if !incomplete.is_empty() {
        return Err(Error::IncompleteFeatures(incomplete));
    }
    if labeled.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, label)) in labeled.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    if config.categories.iter().any(|c| !by_class.contains_key(c.as_str())) {
        return Err(Error::EmptySelection);
    }

    let mut chosen: Vec<usize> = if config.balanced {
        let min = by_class.values().map(Vec::len).min().unwrap_or(0);
        let mut rng = scoped_rng(config.seed, "select")?;
        by_class
            .values()
            .flat_map(|rows| rows.choose_multiple(&mut rng, min).copied().collect::<Vec<_>>())
            .collect()
    } else {
        (0..labeled.len()).collect()
    };
    chosen.sort_unstable();

    let labels: Vec<(ArtifactId, String)> = chosen.iter().map(|i| labeled[*i].clone()).collect();
    let mut families = BTreeMap::new();
    for family in &config.families {
        let sets: Vec<&[String]> = chosen
            .iter()
            .map(|i| featuresets[*i].1.extracted.get(family).map(Vec::as_slice).unwrap_or(&[]))
            .collect();
        families.insert(*family, build_family_table(&sets, config.inclusion_fraction));
    }
    let dataset = SelectedDataset {
        config: config.clone(),
        labels,
        families,
    };
    let inputs: Vec<ArtifactId> = chosen.iter().map(|i| featuresets[*i].0.clone()).collect();
    let params = vec![
        ("name".to_string(), config.name.clone()),
        (
            "families".to_string(),
            config.families.iter().map(|f| f.name()).collect::<Vec<_>>().join(","),
        ),
        (
            "categories".to_string(),
            config.categories.iter().cloned().collect::<Vec<_>>().join(","),
        ),
        ("balanced".to_string(), config.balanced.to_string()),
        ("inclusion_fraction".to_string(), format!("{:?}", config.inclusion_fraction)),
    ];
    let record = ProvenanceRecord::begin(
        "select",
        "data_selector",
        VERSION,
        params,
        config.seed,
        &run.user,
        store.now(),
    );
    put_named(
        store,
        &selected_key(&config.name),
        &dataset.to_zip()?,
        ArtifactKind::DatasetSelected,
        &inputs,
        record.finished(store.now()),
    )
}

/// Train counts per class: each class gets floor or ceil of its share, and
/// the total matches the rounded overall share.
pub fn stratified_train_counts(class_sizes: &[usize], train_fraction: f64) -> Vec<usize> {
    let total: usize = class_sizes.iter().sum();
    let target = (train_fraction * total as f64).round() as usize;
    let exact: Vec<f64> = class_sizes.iter().map(|n| train_fraction * *n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    // largest remainder first, earlier class on ties
    order.sort_by(|a, b| (exact[*b] - exact[*b].floor()).total_cmp(&(exact[*a] - exact[*a].floor())).then(a.cmp(b)));
    for i in order {
        if assigned >= target {
            break;
        }
        if counts[i] < class_sizes[i] {
            counts[i] += 1;
            assigned += 1;
        }
    }
    counts
}

/// Splits row indices by class into seeded, stratified train and test sets,
/// each returned in ascending order.
pub fn stratified_split(labels: &[String], train_fraction: f64, seed: Seed) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let counts = stratified_train_counts(&sizes, train_fraction);
    let mut rng = scoped_rng(seed, "merge")?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (rows, n_train) in by_class.into_values().zip(counts) {
        let mut rows = rows;
        rows.shuffle(&mut rng);
        train.extend_from_slice(&rows[..n_train]);
        test.extend_from_slice(&rows[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Remaps categories into merge groups, densifies and splits.
/// Field checks of a merge that need no stored data.
pub fn check_merge(config: &MergeConfig) -> Result<()> {
    let mut errors = Vec::new();
    if config.name.trim().is_empty() {
        errors.push(FieldError::new("name", "empty"));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        errors.push(FieldError::new("train_fraction", "outside (0, 1)"));
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errors))
    }
}

pub fn merge(store: &ArtifactStore, config: &MergeConfig, run: &RunContext) -> Result<ArtifactId> {
    check_merge(config)?;
    if config.merge_groups.is_empty() {
        return Err(Error::invalid("merge_groups is empty"));
    }
    let selected = load_selected(store, &config.selected_dataset)?;
    let mut group_of: BTreeMap<&str, &str> = BTreeMap::new();
    for (group, members) in &config.merge_groups {
        if members.is_empty() {
            return Err(Error::invalid(format!("merge group {group} has no categories")));
        }
        for m in members {
            if !selected.config.categories.contains(m) {
                return Err(Error::invalid(format!("category {m} is not in the selected dataset")));
            }
            if let Some(other) = group_of.insert(m, group) {
                return Err(Error::invalid(format!("category {m} is in both {other} and {group}")));
            }
        }
    }

    let kept: Vec<(usize, String)> = selected
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, (_, l))| group_of.get(l.as_str()).map(|g| (i, g.to_string())))
        .collect();
    for group in config.merge_groups.keys() {
        if !kept.iter().any(|(_, g)| g == group) {
            return Err(Error::EmptyGroup(group.clone()));
        }
    }

    let mut columns = Vec::new();
    let mut offsets = Vec::new();
    for (family, table) in &selected.families {
        offsets.push(columns.len());
        columns.extend(table.vocabulary.iter().map(|t| format!("{family}:{t}")));
    }
    let mut data = DMatrix::zeros(kept.len(), columns.len());
    for (r, (row, _)) in kept.iter().enumerate() {
        for ((_, table), offset) in selected.families.iter().zip(&offsets) {
            for idx in &table.rows[*row] {
                data[(r, offset + idx)] = 1.0;
            }
        }
    }
    let labels: Vec<String> = kept.iter().map(|(_, g)| g.clone()).collect();
    let ids: Vec<ArtifactId> = kept.iter().map(|(i, _)| selected.labels[*i].0.clone()).collect();
    let (train, test) = stratified_split(&labels, config.train_fraction, config.seed)?;
    let part = |idx: &[usize]| LabeledMatrix {
        columns: columns.clone(),
        ids: idx.iter().map(|i| ids[*i].clone()).collect(),
        labels: idx.iter().map(|i| labels[*i].clone()).collect(),
        data: crate::linalg::select_rows(&data, idx),
    };
    let dataset = TabularDataset {
        meta: serde_json::to_value(config)?,
        train: part(&train),
        test: part(&test),
    };
    let mut params = vec![
        ("name".to_string(), config.name.clone()),
        ("selected_dataset".to_string(), config.selected_dataset.to_string()),
        ("train_fraction".to_string(), format!("{:?}", config.train_fraction)),
    ];
    for (group, members) in &config.merge_groups {
        params.push((
            format!("group.{group}"),
            members.iter().cloned().collect::<Vec<_>>().join(","),
        ));
    }
    let record = ProvenanceRecord::begin("merge", "data_merger", VERSION, params, config.seed, &run.user, store.now());
    put_named(
        store,
        &merged_key(&config.name),
        &dataset.to_zip()?,
        ArtifactKind::DatasetMerged,
        std::slice::from_ref(&config.selected_dataset),
        record.finished(store.now()),
    )
}

fn family_of(column: &str) -> Option<FeatureFamily> {
    column.split_once(':').and_then(|(f, _)| f.parse().ok())
}

/// Applies the plugin chain, fitting each step on training rows only.
pub fn apply_chain(
    registry: &Registry,
    chain: &[ChainStep],
    mut train: LabeledMatrix,
    mut test: LabeledMatrix,
) -> Result<(LabeledMatrix, LabeledMatrix, Vec<serde_json::Value>)> {
    let validated = validate_chain(registry, chain)?;
    let mut audit = Vec::new();
    for (i, (step, params)) in chain.iter().zip(validated).enumerate() {
        let descriptor = registry.descriptor(PluginStage::Preprocess, &step.plugin_id)?;
        let plugin = registry.transform(&step.plugin_id)?;
        let target: Vec<usize> = (0..train.columns.len())
            .filter(|j| match &step.target_families {
                Targets::All => true,
                Targets::Families(fams) => family_of(&train.columns[*j]).is_some_and(|f| fams.contains(&f)),
            })
            .collect();
        if target.is_empty() {
            return Err(Error::EmptyTarget(format!("{i} ({})", step.plugin_id)));
        }
        let target_cols: Vec<String> = target.iter().map(|j| train.columns[*j].clone()).collect();
        let fitted = plugin.fit(&params, &train.data.select_columns(&target), &target_cols)?;
        let out_cols = fitted.output_columns();
        let replace = |m: &LabeledMatrix| -> LabeledMatrix {
            let block = fitted.apply(&m.data.select_columns(&target));
            splice(m, &target, &block, &out_cols)
        };
        let (new_train, new_test) = (replace(&train), replace(&test));
        audit.push(serde_json::json!({
            "step": i,
            "plugin_id": step.plugin_id,
            "plugin_version": descriptor.version,
            "params": params.encode(),
            "target_families": step.target_families.encode(),
            "input_columns": target_cols.len(),
            "output_columns": out_cols.len(),
            "fitted": fitted.audit(),
        }));
        train = new_train;
        test = new_test;
    }
    Ok((train, test, audit))
}

/// Replaces the `target` columns of `m` with `block`. A block of the same
/// width is written back in place; otherwise it is inserted where the first
/// target column was.
fn splice(m: &LabeledMatrix, target: &[usize], block: &DMatrix<f64>, block_cols: &[String]) -> LabeledMatrix {
    let mut columns = Vec::new();
    let mut sources: Vec<(bool, usize)> = Vec::new();
    if block.ncols() == target.len() {
        let mut k = 0;
        for j in 0..m.columns.len() {
            if target.get(k) == Some(&j) {
                columns.push(block_cols[k].clone());
                sources.push((true, k));
                k += 1;
            } else {
                columns.push(m.columns[j].clone());
                sources.push((false, j));
            }
        }
    } else {
        for j in 0..m.columns.len() {
            if j == target[0] {
                for (k, c) in block_cols.iter().enumerate() {
                    columns.push(c.clone());
                    sources.push((true, k));
                }
            }
            if !target.contains(&j) {
                columns.push(m.columns[j].clone());
                sources.push((false, j));
            }
        }
    }
    let data = DMatrix::from_fn(m.data.nrows(), columns.len(), |i, c| match sources[c] {
        (true, k) => block[(i, k)],
        (false, j) => m.data[(i, j)],
    });
    LabeledMatrix {
        columns,
        ids: m.ids.clone(),
        labels: m.labels.clone(),
        data,
    }
}

/// Validates every step up front, reporting all violations together.
pub fn validate_chain(registry: &Registry, chain: &[ChainStep]) -> Result<Vec<crate::registry::ParamSet>> {
    let mut errors = Vec::new();
    let mut out = Vec::new();
    for (i, step) in chain.iter().enumerate() {
        match registry.validate(&step.plugin_id, PluginStage::Preprocess, &step.params) {
            Ok(p) => {
                let sensitive = registry
                    .descriptor(PluginStage::Preprocess, &step.plugin_id)
                    .map(|d| d.feature_sensitive)
                    .unwrap_or(false);
                if let Targets::Families(f) = &step.target_families {
                    if f.is_empty() {
                        errors.push(FieldError::new(format!("chain[{i}].target_families"), "empty"));
                    } else if !sensitive {
                        errors.push(FieldError::new(
                            format!("chain[{i}].target_families"),
                            "plugin applies to all columns only",
                        ));
                    }
                }
                out.push(p);
            }
            Err(Error::Validation(errs)) => errors.extend(
                errs.into_iter()
                    .map(|e| FieldError::new(format!("chain[{i}].{}", e.name), e.reason)),
            ),
            Err(Error::NotFound(_)) => errors.push(FieldError::new(
                format!("chain[{i}].plugin_id"),
                format!("unknown plugin {}", step.plugin_id),
            )),
            Err(e) => return Err(e),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation(errors))
    }
}

pub fn preprocess(
    store: &ArtifactStore,
    registry: &Registry,
    config: &PreprocessConfig,
    run: &RunContext,
) -> Result<ArtifactId> {
    check_name(&config.name)?;
    let validated = validate_chain(registry, &config.chain)?;
    let merged = load_merged(store, &config.merged_dataset)?;
    let (train, test, steps) = apply_chain(registry, &config.chain, merged.train, merged.test)?;
    let dataset = TabularDataset {
        meta: serde_json::json!({
            "merged_dataset": config.merged_dataset,
            "name": config.name,
            "seed": config.seed,
            "steps": steps,
        }),
        train,
        test,
    };
    let mut params = vec![
        ("name".to_string(), config.name.clone()),
        ("merged_dataset".to_string(), config.merged_dataset.to_string()),
    ];
    for (i, (step, p)) in config.chain.iter().zip(&validated).enumerate() {
        params.push((format!("chain[{i}].plugin"), step.plugin_id.clone()));
        params.push((format!("chain[{i}].target_families"), step.target_families.encode()));
        for (k, v) in p.encode() {
            params.push((format!("chain[{i}].{k}"), v));
        }
    }
    let plugin = config
        .chain
        .iter()
        .map(|s| s.plugin_id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let record = ProvenanceRecord::begin(
        "preprocess",
        if plugin.is_empty() { "identity" } else { &plugin },
        VERSION,
        params,
        config.seed,
        &run.user,
        store.now(),
    );
    put_named(
        store,
        &processed_key(&config.name),
        &dataset.to_zip()?,
        ArtifactKind::DatasetProcessed,
        std::slice::from_ref(&config.merged_dataset),
        record.finished(store.now()),
    )
}
