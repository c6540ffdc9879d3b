//! Stage requests, the task executor behind the worker pool, and the
//! pipeline driver used by `caravan run`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::collection::{Collector, RunContext};
use crate::domain::{content_id, derive_seed, ArtifactId, Clock, FeatureFamily, Seed, SystemClock};
use crate::error::{Error, FieldError, Result};
use crate::instrument::Instrumentation;
use crate::model::{self, TrainConfig, TrainingProgress};
use crate::preprocessing::{self, ChainStep, MergeConfig, PreprocessConfig, SelectionConfig};
use crate::queue::{Queue, QueueConfig, Stage, Task, TaskContext, TaskExecutor, TaskSpec, TaskStatus, WorkerPool};
use crate::registry::Registry;
use crate::store::ArtifactStore;

const TASK_NAMESPACE: uuid::Uuid = uuid::Uuid::from_u128(0x3c1e_7f0a_5d2b_4e8c_9a61_0b47_d2f3_8e15);
const POLL: Duration = Duration::from_millis(10);

fn default_user() -> String {
    "anonymous".into()
}

fn all_families() -> BTreeSet<FeatureFamily> {
    FeatureFamily::ALL.into_iter().collect()
}

fn default_inclusion() -> f64 {
    1.0
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrawlRequest {
    pub master_seed: Seed,
    pub index_url: String,
    #[serde(default)]
    pub metadata_url: Option<String>,
    /// Families extracted from every crawled package once it is stored.
    #[serde(default = "all_families")]
    pub families: BTreeSet<FeatureFamily>,
    #[serde(default = "default_user")]
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeRequest {
    pub master_seed: Seed,
    pub package: ArtifactId,
    #[serde(default = "default_user")]
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractRequest {
    pub master_seed: Seed,
    pub package: ArtifactId,
    #[serde(default = "all_families")]
    pub families: BTreeSet<FeatureFamily>,
    #[serde(default = "default_user")]
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectRequest {
    pub master_seed: Seed,
    #[serde(default = "all_families")]
    pub families: BTreeSet<FeatureFamily>,
    pub categories: BTreeSet<String>,
    #[serde(default)]
    pub balanced: bool,
    #[serde(default = "default_inclusion")]
    pub inclusion_fraction: f64,
    #[serde(default)]
    pub seed: Option<Seed>,
    pub name: String,
    #[serde(default = "default_user")]
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRequest {
    pub master_seed: Seed,
    pub selected_dataset: ArtifactId,
    /// Defaults to one group per selected category.
    #[serde(default)]
    pub merge_groups: Option<BTreeMap<String, BTreeSet<String>>>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: Option<Seed>,
    pub name: String,
    #[serde(default = "default_user")]
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessRequest {
    pub master_seed: Seed,
    pub merged_dataset: ArtifactId,
    #[serde(default)]
    pub chain: Vec<ChainStep>,
    #[serde(default)]
    pub seed: Option<Seed>,
    pub name: String,
    #[serde(default = "default_user")]
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub master_seed: Seed,
    pub processed_dataset: ArtifactId,
    pub algorithm_class: String,
    pub algorithm_id: String,
    #[serde(default, deserialize_with = "crate::registry::deserialize_raw_params")]
    pub hyperparams: Vec<(String, String)>,
    #[serde(default)]
    pub seed: Option<Seed>,
    pub model_name: String,
    /// Cluster count of the evaluation that follows training.
    #[serde(default)]
    pub kmeans_k: Option<usize>,
    #[serde(default = "default_user")]
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub master_seed: Seed,
    pub model: ArtifactId,
    #[serde(default)]
    pub kmeans_k: Option<usize>,
    #[serde(default = "default_user")]
    pub user: String,
}

/// A stage launch, as posted to the gateway or stored in a task.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum StageRequest {
    Crawl(CrawlRequest),
    Analyze(AnalyzeRequest),
    Extract(ExtractRequest),
    Select(SelectRequest),
    Merge(MergeRequest),
    Preprocess(PreprocessRequest),
    Train(TrainRequest),
    Evaluate(EvaluateRequest),
}

/// Deserializes `value`, turning a structural mismatch into a validation
/// error that names the offending field.
pub fn from_value<T: DeserializeOwned>(value: Value) -> Result<T> {
    if !value.is_object() {
        return Err(Error::Parse("request body must be a JSON object".into()));
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let reason = e.inner().to_string();
        let name = if path == "." {
            backticked(&reason).unwrap_or_else(|| "body".to_string())
        } else {
            path
        };
        Error::Validation(vec![FieldError::new(name, reason)])
    })
}

/// First `quoted` word of a serde message such as "missing field `name`".
fn backticked(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

fn gather(errors: &mut Vec<FieldError>, outcome: Result<()>) -> Result<()> {
    match outcome {
        Ok(()) => Ok(()),
        Err(Error::Validation(e)) => {
            errors.extend(e);
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn seed_or(seed: Option<Seed>, master: Seed, stage: Stage) -> Result<Seed> {
    match seed {
        Some(s) => Ok(s),
        None => derive_seed(master, stage.name()),
    }
}

impl StageRequest {
    pub fn parse(stage: Stage, body: Value) -> Result<Self> {
        Ok(match stage {
            Stage::Crawl => StageRequest::Crawl(from_value(body)?),
            Stage::Analyze => StageRequest::Analyze(from_value(body)?),
            Stage::Extract => StageRequest::Extract(from_value(body)?),
            Stage::Select => StageRequest::Select(from_value(body)?),
            Stage::Merge => StageRequest::Merge(from_value(body)?),
            Stage::Preprocess => StageRequest::Preprocess(from_value(body)?),
            Stage::Train => StageRequest::Train(from_value(body)?),
            Stage::Evaluate => StageRequest::Evaluate(from_value(body)?),
        })
    }

    pub fn stage(&self) -> Stage {
        match self {
            StageRequest::Crawl(_) => Stage::Crawl,
            StageRequest::Analyze(_) => Stage::Analyze,
            StageRequest::Extract(_) => Stage::Extract,
            StageRequest::Select(_) => Stage::Select,
            StageRequest::Merge(_) => Stage::Merge,
            StageRequest::Preprocess(_) => Stage::Preprocess,
            StageRequest::Train(_) => Stage::Train,
            StageRequest::Evaluate(_) => Stage::Evaluate,
        }
    }

    pub fn master_seed(&self) -> Seed {
        match self {
            StageRequest::Crawl(r) => r.master_seed,
            StageRequest::Analyze(r) => r.master_seed,
            StageRequest::Extract(r) => r.master_seed,
            StageRequest::Select(r) => r.master_seed,
            StageRequest::Merge(r) => r.master_seed,
            StageRequest::Preprocess(r) => r.master_seed,
            StageRequest::Train(r) => r.master_seed,
            StageRequest::Evaluate(r) => r.master_seed,
        }
    }

    pub fn user(&self) -> &str {
        match self {
            StageRequest::Crawl(r) => &r.user,
            StageRequest::Analyze(r) => &r.user,
            StageRequest::Extract(r) => &r.user,
            StageRequest::Select(r) => &r.user,
            StageRequest::Merge(r) => &r.user,
            StageRequest::Preprocess(r) => &r.user,
            StageRequest::Train(r) => &r.user,
            StageRequest::Evaluate(r) => &r.user,
        }
    }

    /// Artifacts the request reads.
    pub fn inputs(&self) -> Vec<ArtifactId> {
        match self {
            StageRequest::Crawl(_) | StageRequest::Select(_) => Vec::new(),
            StageRequest::Analyze(r) => vec![r.package.clone()],
            StageRequest::Extract(r) => vec![r.package.clone()],
            StageRequest::Merge(r) => vec![r.selected_dataset.clone()],
            StageRequest::Preprocess(r) => vec![r.merged_dataset.clone()],
            StageRequest::Train(r) => vec![r.processed_dataset.clone()],
            StageRequest::Evaluate(r) => vec![r.model.clone()],
        }
    }

    pub fn selection(r: &SelectRequest) -> Result<SelectionConfig> {
        Ok(SelectionConfig {
            families: r.families.clone(),
            categories: r.categories.clone(),
            balanced: r.balanced,
            inclusion_fraction: r.inclusion_fraction,
            seed: seed_or(r.seed, r.master_seed, Stage::Select)?,
            name: r.name.clone(),
        })
    }

    pub fn training(r: &TrainRequest) -> Result<TrainConfig> {
        Ok(TrainConfig {
            processed_dataset: r.processed_dataset.clone(),
            algorithm_class: r.algorithm_class.clone(),
            algorithm_id: r.algorithm_id.clone(),
            hyperparams: r.hyperparams.clone(),
            seed: seed_or(r.seed, r.master_seed, Stage::Train)?,
            model_name: r.model_name.clone(),
        })
    }

    /// Field checks that need no stored data. Every violation is reported.
    pub fn check(&self, registry: &Registry) -> Result<()> {
        let mut errors = Vec::new();
        match self {
            StageRequest::Crawl(r) => {
                if r.index_url.trim().is_empty() {
                    errors.push(FieldError::new("index_url", "empty"));
                }
            }
            StageRequest::Analyze(_) | StageRequest::Extract(_) => {}
            StageRequest::Select(r) => gather(&mut errors, preprocessing::check_selection(&Self::selection(r)?))?,
            StageRequest::Merge(r) => {
                let config = MergeConfig {
                    selected_dataset: r.selected_dataset.clone(),
                    merge_groups: BTreeMap::new(),
                    train_fraction: r.train_fraction,
                    seed: Seed(0),
                    name: r.name.clone(),
                };
                gather(&mut errors, preprocessing::check_merge(&config))?;
                if let Some(groups) = &r.merge_groups {
                    if groups.is_empty() {
                        errors.push(FieldError::new("merge_groups", "empty"));
                    }
                    for (g, members) in groups {
                        if members.is_empty() {
                            errors.push(FieldError::new(format!("merge_groups.{g}"), "no categories"));
                        }
                    }
                }
            }
            StageRequest::Preprocess(r) => {
                if r.name.trim().is_empty() {
                    errors.push(FieldError::new("name", "empty"));
                }
                gather(&mut errors, preprocessing::validate_chain(registry, &r.chain).map(|_| ()))?;
            }
            StageRequest::Train(r) => {
                gather(&mut errors, model::validate_train_config(registry, &Self::training(r)?).map(|_| ()))?;
                if r.kmeans_k == Some(0) {
                    errors.push(FieldError::new("kmeans_k", "must be positive"));
                }
            }
            StageRequest::Evaluate(r) => {
                if r.kmeans_k == Some(0) {
                    errors.push(FieldError::new("kmeans_k", "must be positive"));
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    /// Queue entry for this request. The request itself travels as the
    /// `config` parameter.
    pub fn to_spec(&self, now: crate::domain::Timestamp) -> Result<TaskSpec> {
        let mut spec = TaskSpec::new(
            self.stage(),
            vec![("config".to_string(), serde_json::to_string(self)?)],
            self.master_seed(),
            now,
        );
        if let StageRequest::Extract(r) = self {
            spec.units = r.families.iter().map(|f| f.name().to_string()).collect();
        }
        Ok(spec)
    }
}

fn extract_task_id(crawl_task: &str, package: &ArtifactId) -> String {
    uuid::Uuid::new_v5(&TASK_NAMESPACE, format!("{crawl_task}/extract/{package}").as_bytes()).to_string()
}

fn upload_task_id(package: &ArtifactId) -> String {
    uuid::Uuid::new_v5(&TASK_NAMESPACE, format!("upload/extract/{package}").as_bytes()).to_string()
}

fn ids(outputs: &[String]) -> Result<Vec<ArtifactId>> {
    outputs.iter().map(|s| s.parse()).collect()
}

struct EpochCheckpoint<'a>(&'a TaskContext);

impl TrainingProgress for EpochCheckpoint<'_> {
    fn epoch_done(&self, _: usize, _: f64) -> Result<()> {
        self.0.checkpoint()
    }
}

/// Everything a data directory holds, opened together.
#[derive(Clone)]
pub struct Engine {
    store: Arc<ArtifactStore>,
    queue: Arc<Queue>,
    registry: Arc<Registry>,
    collector: Arc<Collector>,
    clock: Arc<dyn Clock>,
}

impl Engine {
    /// Opens `data_dir`, replaying the store and queue logs. Tasks left
    /// running by a previous process are requeued.
    pub fn open(data_dir: impl AsRef<Path>, instrumentation: Instrumentation) -> Result<Self> {
        let dir = data_dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        let store = Arc::new(ArtifactStore::open_with_clock(dir.join("store"), clock.clone())?);
        let queue = Arc::new(Queue::open(dir.join("tasks.log"), QueueConfig::default())?);
        queue.recover_orphans(clock.now())?;
        let collector = Arc::new(Collector::new(store.clone(), Arc::new(instrumentation)));
        Ok(Self {
            store,
            queue,
            registry: Arc::new(Registry::with_builtins()),
            collector,
            clock,
        })
    }

    pub fn store(&self) -> &Arc<ArtifactStore> {
        &self.store
    }

    pub fn queue(&self) -> &Arc<Queue> {
        &self.queue
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn collector(&self) -> &Arc<Collector> {
        &self.collector
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn start_workers(&self, workers: usize, poll: Duration) -> WorkerPool {
        WorkerPool::start(
            self.queue.clone(),
            Arc::new(self.clone()),
            self.clock.clone(),
            workers,
            poll,
        )
    }

    /// Validates and enqueues a request under a fresh task id.
    pub fn submit(&self, request: &StageRequest) -> Result<String> {
        self.submit_as(request, None)
    }

    fn submit_as(&self, request: &StageRequest, task_id: Option<String>) -> Result<String> {
        request.check(&self.registry)?;
        for id in request.inputs() {
            if !self.store.contains(&id) {
                return Err(Error::not_found(format!("artifact {id}")));
            }
        }
        let mut spec = request.to_spec(self.clock.now())?;
        if let Some(id) = task_id {
            spec.task_id = id;
        }
        self.queue.submit(spec)
    }

    /// Stores an uploaded package and queues its feature extraction.
    /// Returns the package id and the extraction task id.
    pub fn upload(
        &self,
        payload: &[u8],
        declared_category: Option<&str>,
        uploader: &str,
        master_seed: Seed,
    ) -> Result<(ArtifactId, String)> {
        let run = RunContext::new(master_seed, uploader);
        let package = self.collector.ingest_upload(payload, declared_category, uploader, &run)?;
        let request = StageRequest::Extract(ExtractRequest {
            master_seed,
            package: package.clone(),
            families: all_families(),
            user: uploader.to_string(),
        });
        let task_id = upload_task_id(&package);
        match self.submit_as(&request, Some(task_id.clone())) {
            Ok(_) | Err(Error::Conflict(_)) => Ok((package, task_id)),
            Err(e) => Err(e),
        }
    }

    /// Blocks until the task is terminal.
    pub fn wait(&self, task_id: &str) -> Result<Task> {
        loop {
            let task = self.queue.get(task_id)?;
            if task.state.status.is_terminal() {
                return Ok(task);
            }
            std::thread::sleep(POLL);
        }
    }

    fn succeeded(task: Task) -> Result<Vec<String>> {
        match task.state.status {
            TaskStatus::Succeeded => Ok(task.state.outputs),
            status => Err(Error::TaskFailed(
                task.spec.task_id,
                task.state.error.unwrap_or_else(|| format!("{status:?}").to_lowercase()),
            )),
        }
    }

    /// Runs a whole pipeline to completion with its own worker pool.
    pub fn run_pipeline(&self, config: &PipelineConfig) -> Result<PipelineOutcome> {
        config.check(&self.registry)?;
        let pool = self.start_workers(config.workers.max(1), POLL);
        let outcome = self.drive(config);
        pool.shutdown();
        outcome
    }

    /// Submits a pipeline step under a deterministic id, or picks up the
    /// task a previous run left behind. Failed and cancelled tasks from
    /// earlier runs are skipped in favor of a fresh generation.
    fn step(&self, key: &str, name: &str, request: &StageRequest) -> Result<(String, Vec<String>)> {
        let mut generation = 0u32;
        let task_id = loop {
            let id = uuid::Uuid::new_v5(&TASK_NAMESPACE, format!("{key}/{name}/{generation}").as_bytes()).to_string();
            match self.queue.get(&id) {
                Err(Error::NotFound(_)) => {
                    self.submit_as(request, Some(id.clone()))?;
                    break id;
                }
                Ok(t) if matches!(t.state.status, TaskStatus::Failed | TaskStatus::Cancelled) => generation += 1,
                Ok(_) => break id,
                Err(e) => return Err(e),
            }
        };
        let outputs = Self::succeeded(self.wait(&task_id)?)?;
        Ok((task_id, outputs))
    }

    fn drive(&self, config: &PipelineConfig) -> Result<PipelineOutcome> {
        let key = config.key()?;
        let crawl = config.request(Stage::Crawl, None)?;
        let (crawl_task, outputs) = self.step(&key, "crawl", &crawl)?;
        let packages = ids(&outputs)?;

        let mut featuresets = Vec::new();
        if let StageRequest::Crawl(c) = &crawl {
            if !c.families.is_empty() {
                for package in &packages {
                    let task_id = extract_task_id(&crawl_task, package);
                    if let Err(Error::NotFound(_)) = self.queue.get(&task_id) {
                        let request = StageRequest::Extract(ExtractRequest {
                            master_seed: c.master_seed,
                            package: package.clone(),
                            families: c.families.clone(),
                            user: c.user.clone(),
                        });
                        self.submit_as(&request, Some(task_id.clone()))?;
                    }
                    featuresets.extend(ids(&Self::succeeded(self.wait(&task_id)?)?)?);
                }
            }
        }

        let select = config.request(Stage::Select, None)?;
        let selected = ids(&self.step(&key, "select", &select)?.1)?.remove(0);
        let merge = config.request(Stage::Merge, Some(&selected))?;
        let merged = ids(&self.step(&key, "merge", &merge)?.1)?.remove(0);
        let preprocess = config.request(Stage::Preprocess, Some(&merged))?;
        let processed = ids(&self.step(&key, "preprocess", &preprocess)?.1)?.remove(0);
        let train = config.request(Stage::Train, Some(&processed))?;
        let trained = ids(&self.step(&key, "train", &train)?.1)?;
        if trained.len() != 2 {
            return Err(Error::Integrity("train task reported no evaluation".into()));
        }
        Ok(PipelineOutcome {
            packages,
            featuresets,
            selected_dataset: selected,
            merged_dataset: merged,
            processed_dataset: processed,
            model: trained[0].clone(),
            evaluation: trained[1].clone(),
        })
    }
}

impl TaskExecutor for Engine {
    fn execute(&self, task: &Task, ctx: &TaskContext) -> Result<Vec<String>> {
        let raw = task
            .spec
            .param("config")
            .ok_or_else(|| Error::invalid(format!("task {} carries no config", task.spec.task_id)))?;
        let request = StageRequest::parse(task.spec.stage, serde_json::from_str(raw)?)?;
        let run = RunContext::new(request.master_seed(), request.user());
        let out = match &request {
            StageRequest::Crawl(r) => {
                let report = self.collector.crawl(&r.index_url, r.metadata_url.as_deref(), &run, ctx)?;
                if !r.families.is_empty() {
                    for package in &report.package_ids {
                        ctx.checkpoint()?;
                        let extract = StageRequest::Extract(ExtractRequest {
                            master_seed: r.master_seed,
                            package: package.clone(),
                            families: r.families.clone(),
                            user: r.user.clone(),
                        });
                        match self.submit_as(&extract, Some(extract_task_id(&task.spec.task_id, package))) {
                            Ok(_) | Err(Error::Conflict(_)) => {}
                            Err(e) => return Err(e),
                        }
                    }
                }
                report.package_ids
            }
            StageRequest::Analyze(r) => vec![self.collector.analyze(&r.package, &run)?],
            StageRequest::Extract(r) => vec![self.collector.extract(&r.package, &r.families, &run, ctx)?],
            StageRequest::Select(r) => {
                vec![preprocessing::select(&self.collector, &StageRequest::selection(r)?, &run)?]
            }
            StageRequest::Merge(r) => {
                let merge_groups = match &r.merge_groups {
                    Some(g) => g.clone(),
                    None => preprocessing::load_selected(&self.store, &r.selected_dataset)?
                        .config
                        .categories
                        .iter()
                        .map(|c| (c.clone(), BTreeSet::from([c.clone()])))
                        .collect(),
                };
                let config = MergeConfig {
                    selected_dataset: r.selected_dataset.clone(),
                    merge_groups,
                    train_fraction: r.train_fraction,
                    seed: seed_or(r.seed, r.master_seed, Stage::Merge)?,
                    name: r.name.clone(),
                };
                vec![preprocessing::merge(&self.store, &config, &run)?]
            }
            StageRequest::Preprocess(r) => {
                let config = PreprocessConfig {
                    merged_dataset: r.merged_dataset.clone(),
                    chain: r.chain.clone(),
                    seed: seed_or(r.seed, r.master_seed, Stage::Preprocess)?,
                    name: r.name.clone(),
                };
                vec![preprocessing::preprocess(&self.store, &self.registry, &config, &run)?]
            }
            StageRequest::Train(r) => {
                let config = StageRequest::training(r)?;
                let model = model::train(&self.store, &self.registry, &config, &run, &EpochCheckpoint(ctx))?;
                ctx.checkpoint()?;
                let evaluation = model::evaluate(&self.store, &self.registry, &model, r.kmeans_k, &run)?;
                vec![model, evaluation]
            }
            StageRequest::Evaluate(r) => {
                vec![model::evaluate(&self.store, &self.registry, &r.model, r.kmeans_k, &run)?]
            }
        };
        Ok(out.into_iter().map(String::from).collect())
    }
}

/// Declarative description of a full run. Each stage section holds the
/// fields of the matching stage request; `master_seed`, `user` and the id of
/// the upstream artifact are filled in by the driver.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub master_seed: Seed,
    #[serde(default = "default_user")]
    pub user: String,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub crawl: Map<String, Value>,
    pub select: Map<String, Value>,
    pub merge: Map<String, Value>,
    pub preprocess: Map<String, Value>,
    pub train: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub packages: Vec<ArtifactId>,
    pub featuresets: Vec<ArtifactId>,
    pub selected_dataset: ArtifactId,
    pub merged_dataset: ArtifactId,
    pub processed_dataset: ArtifactId,
    pub model: ArtifactId,
    pub evaluation: ArtifactId,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        from_value(value)
    }

    /// Identity of the run; the worker count does not affect results.
    fn key(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.remove("workers");
        }
        Ok(serde_json::to_string(&v)?)
    }

    fn section(&self, stage: Stage) -> (&'static str, &Map<String, Value>, Option<&'static str>) {
        match stage {
            Stage::Crawl => ("crawl", &self.crawl, None),
            Stage::Select => ("select", &self.select, None),
            Stage::Merge => ("merge", &self.merge, Some("selected_dataset")),
            Stage::Preprocess => ("preprocess", &self.preprocess, Some("merged_dataset")),
            Stage::Train => ("train", &self.train, Some("processed_dataset")),
            other => unreachable!("{other} is not a pipeline section"),
        }
    }

    /// The request for one section. Field names in errors carry the section
    /// as a prefix.
    pub fn request(&self, stage: Stage, upstream: Option<&ArtifactId>) -> Result<StageRequest> {
        let (name, fields, upstream_field) = self.section(stage);
        let mut body = fields.clone();
        body.insert("master_seed".into(), serde_json::to_value(self.master_seed)?);
        body.entry("user").or_insert_with(|| Value::String(self.user.clone()));
        if let (Some(field), Some(id)) = (upstream_field, upstream) {
            body.insert(field.into(), Value::String(id.to_string()));
        }
        // selection defaults to whatever the crawl extracted
        if stage == Stage::Select && !body.contains_key("families") {
            if let Some(families) = self.crawl.get("families") {
                body.insert("families".into(), families.clone());
            }
        }
        StageRequest::parse(stage, Value::Object(body)).map_err(|e| prefix(name, e))
    }

    /// Checks every section before anything runs. Upstream ids are not yet
    /// known, so a placeholder stands in for them.
    pub fn check(&self, registry: &Registry) -> Result<()> {
        let placeholder = content_id(b"");
        let mut errors = Vec::new();
        for stage in [Stage::Crawl, Stage::Select, Stage::Merge, Stage::Preprocess, Stage::Train] {
            let outcome = self
                .request(stage, Some(&placeholder))
                .and_then(|r| r.check(registry).map_err(|e| prefix(self.section(stage).0, e)));
            gather(&mut errors, outcome)?;
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Validation(errs) => Error::Validation(
            errs.into_iter()
                .map(|f| FieldError::new(format!("{section}.{}", f.name), f.reason))
                .collect(),
        ),
        other => other,
    }
}
