//! Persisted task queue with leases, retries and per-unit progress.
//!
//! Every state change is one JSON line in an append-only transition log
//! (`tasks.log`), fsynced before the operation returns. Opening the queue
//! replays the log; a torn final line from a crash is discarded.
//!
//! Operations take the current time explicitly so tests can drive the queue
//! from a simulated clock.

mod pool;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::domain::{Seed, Timestamp};
use crate::error::{Error, Result};
use crate::store::{read_complete_lines, repair_log_tail};

pub use pool::{run_one, LocalProgress, TaskContext, TaskExecutor, UnitProgress, WorkerPool};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const RECENT_LIMIT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Crawl,
    Analyze,
    Extract,
    Select,
    Merge,
    Preprocess,
    Train,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Crawl => "crawl",
            Stage::Analyze => "analyze",
            Stage::Extract => "extract",
            Stage::Select => "select",
            Stage::Merge => "merge",
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown stage {s:?}")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub stage: Stage,
    pub params: Vec<(String, String)>,
    pub units: Vec<String>,
    pub max_attempts: u32,
    pub submitted_at: Timestamp,
    pub master_seed: Seed,
}

impl TaskSpec {
    pub fn new(stage: Stage, params: Vec<(String, String)>, master_seed: Seed, now: Timestamp) -> Self {
        Self {
            task_id: uuid::Uuid::new_v4().to_string(),
            stage,
            params,
            units: Vec::new(),
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            submitted_at: now,
            master_seed,
        }
    }

    pub fn param(&self, name: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl TaskStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Succeeded | TaskStatus::Failed | TaskStatus::Cancelled)
    }

    pub const ALL: [TaskStatus; 5] = [
        TaskStatus::Queued,
        TaskStatus::Running,
        TaskStatus::Succeeded,
        TaskStatus::Failed,
        TaskStatus::Cancelled,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskState {
    pub status: TaskStatus,
    pub attempt: u32,
    pub worker: Option<String>,
    pub lease_expiry: Option<Timestamp>,
    pub completed_units: BTreeSet<String>,
    pub error: Option<String>,
    /// Artifact ids reported by the successful attempt.
    pub outputs: Vec<String>,
    pub first_started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
}

impl TaskState {
    fn fresh() -> Self {
        Self {
            status: TaskStatus::Queued,
            attempt: 0,
            worker: None,
            lease_expiry: None,
            completed_units: BTreeSet::new(),
            error: None,
            outputs: Vec::new(),
            first_started_at: None,
            finished_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub spec: TaskSpec,
    pub state: TaskState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub task_id: String,
    pub attempt: u32,
    pub lease_expiry: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerActivity {
    pub worker: String,
    pub active_task: Option<String>,
    pub last_heartbeat: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecentTask {
    pub task_id: String,
    pub stage: Stage,
    pub status: TaskStatus,
    pub attempt: u32,
    pub error: Option<String>,
    pub finished_at: Timestamp,
    pub duration_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub counts: BTreeMap<TaskStatus, usize>,
    pub workers: Vec<WorkerActivity>,
    pub recent: Vec<RecentTask>,
}

impl Snapshot {
    pub fn count(&self, status: TaskStatus) -> usize {
        self.counts.get(&status).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QueueConfig {
    pub lease_ttl: Duration,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            lease_ttl: Duration::seconds(30),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Transition {
    Submit {
        spec: TaskSpec,
    },
    Claim {
        task_id: String,
        worker: String,
        attempt: u32,
        lease_expiry: Timestamp,
        at: Timestamp,
    },
    Heartbeat {
        task_id: String,
        lease_expiry: Timestamp,
        at: Timestamp,
    },
    Units {
        task_id: String,
        units: Vec<String>,
    },
    UnitDone {
        task_id: String,
        unit: String,
    },
    Complete {
        task_id: String,
        outputs: Vec<String>,
        at: Timestamp,
    },
    Fail {
        task_id: String,
        error: String,
        requeue: bool,
        at: Timestamp,
    },
    /// Lease lapsed (or its holder died with the previous process).
    Expire {
        task_id: String,
        requeue: bool,
        at: Timestamp,
    },
    Cancel {
        task_id: String,
        at: Timestamp,
    },
}

#[derive(Default)]
struct State {
    tasks: HashMap<String, Task>,
    /// Submission sequence number of each task.
    seq: HashMap<String, u64>,
    workers: BTreeMap<String, WorkerActivity>,
    next_seq: u64,
}

impl State {
    fn apply(&mut self, t: &Transition) {
        match t {
            Transition::Submit { spec } => {
                self.seq.insert(spec.task_id.clone(), self.next_seq);
                self.next_seq += 1;
                self.tasks.insert(
                    spec.task_id.clone(),
                    Task {
                        spec: spec.clone(),
                        state: TaskState::fresh(),
                    },
                );
            }
            Transition::Claim {
                task_id,
                worker,
                attempt,
                lease_expiry,
                at,
            } => {
                let s = &mut self.task_mut(task_id).state;
                s.status = TaskStatus::Running;
                s.attempt = *attempt;
                s.worker = Some(worker.clone());
                s.lease_expiry = Some(*lease_expiry);
                s.first_started_at.get_or_insert(*at);
                self.workers.insert(
                    worker.clone(),
                    WorkerActivity {
                        worker: worker.clone(),
                        active_task: Some(task_id.clone()),
                        last_heartbeat: *at,
                    },
                );
            }
            Transition::Heartbeat {
                task_id,
                lease_expiry,
                at,
            } => {
                let s = &mut self.task_mut(task_id).state;
                s.lease_expiry = Some(*lease_expiry);
                if let Some(w) = s.worker.clone() {
                    if let Some(a) = self.workers.get_mut(&w) {
                        a.last_heartbeat = *at;
                    }
                }
            }
            Transition::Units { task_id, units } => {
                self.task_mut(task_id).spec.units = units.clone();
            }
            Transition::UnitDone { task_id, unit } => {
                self.task_mut(task_id).state.completed_units.insert(unit.clone());
            }
            Transition::Complete {
                task_id,
                outputs,
                at,
            } => {
                let s = self.release(task_id, *at);
                s.status = TaskStatus::Succeeded;
                s.outputs = outputs.clone();
                s.finished_at = Some(*at);
            }
            Transition::Fail {
                task_id,
                error,
                requeue,
                at,
            } => {
                let s = self.release(task_id, *at);
                s.error = Some(error.clone());
                if *requeue {
                    s.status = TaskStatus::Queued;
                } else {
                    s.status = TaskStatus::Failed;
                    s.finished_at = Some(*at);
                }
            }
            Transition::Expire {
                task_id,
                requeue,
                at,
            } => {
                let s = self.release(task_id, *at);
                if *requeue {
                    s.status = TaskStatus::Queued;
                } else {
                    s.status = TaskStatus::Failed;
                    s.error = Some("lease expired on final attempt".into());
                    s.finished_at = Some(*at);
                }
            }
            Transition::Cancel { task_id, at } => {
                let s = self.release(task_id, *at);
                s.status = TaskStatus::Cancelled;
                s.finished_at = Some(*at);
            }
        }
    }

    fn task_mut(&mut self, task_id: &str) -> &mut Task {
        self.tasks.get_mut(task_id).expect("transition for known task")
    }

    /// Drops the lease of a task and marks its worker idle.
    fn release(&mut self, task_id: &str, at: Timestamp) -> &mut TaskState {
        let task = self.tasks.get_mut(task_id).expect("transition for known task");
        if let Some(w) = task.state.worker.take() {
            if let Some(a) = self.workers.get_mut(&w) {
                if a.active_task.as_deref() == Some(task_id) {
                    a.active_task = None;
                    a.last_heartbeat = a.last_heartbeat.max(at);
                }
            }
        }
        task.state.lease_expiry = None;
        &mut task.state
    }
}

struct Inner {
    state: State,
    log: File,
}

pub struct Queue {
    inner: Mutex<Inner>,
    config: QueueConfig,
    path: PathBuf,
}

impl Queue {
    /// Opens the queue log at `path`, replaying every recorded transition.
    pub fn open(path: impl AsRef<Path>, config: QueueConfig) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        repair_log_tail(&path)?;
        let mut state = State::default();
        for line in read_complete_lines(&path)? {
            let t: Transition =
                serde_json::from_str(&line).map_err(|e| Error::Parse(format!("tasks.log: {e}")))?;
            state.apply(&t);
        }
        let log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)?;
        Ok(Self {
            inner: Mutex::new(Inner { state, log }),
            config,
            path,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn lease_ttl(&self) -> Duration {
        self.config.lease_ttl
    }

    fn commit(inner: &mut Inner, t: Transition) -> Result<()> {
        let mut line = serde_json::to_string(&t)?;
        line.push('\n');
        inner.log.write_all(line.as_bytes())?;
        inner.log.sync_data()?;
        inner.state.apply(&t);
        Ok(())
    }

    pub fn submit(&self, spec: TaskSpec) -> Result<String> {
        if spec.max_attempts == 0 {
            return Err(Error::invalid("max_attempts must be positive"));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = spec.units.iter().find(|u| !seen.insert(u.as_str())) {
            return Err(Error::invalid(format!("duplicate unit id {dup}")));
        }
        let mut inner = self.inner.lock().unwrap();
        if inner.state.tasks.contains_key(&spec.task_id) {
            return Err(Error::Conflict(format!("task {} already exists", spec.task_id)));
        }
        let id = spec.task_id.clone();
        Self::commit(&mut inner, Transition::Submit { spec })?;
        Ok(id)
    }

    pub fn get(&self, task_id: &str) -> Result<Task> {
        self.inner
            .lock()
            .unwrap()
            .state
            .tasks
            .get(task_id)
            .cloned()
            .ok_or_else(|| Error::not_found(format!("task {task_id}")))
    }

    /// All tasks in submission order.
    pub fn tasks(&self) -> Vec<Task> {
        let inner = self.inner.lock().unwrap();
        let mut tasks: Vec<&Task> = inner.state.tasks.values().collect();
        tasks.sort_by_key(|t| inner.state.seq[&t.spec.task_id]);
        tasks.into_iter().cloned().collect()
    }

    fn expire_due(inner: &mut Inner, now: Timestamp) -> Result<()> {
        let mut due: Vec<(u64, String, bool)> = inner
            .state
            .tasks
            .values()
            .filter(|t| {
                t.state.status == TaskStatus::Running
                    && t.state.lease_expiry.is_some_and(|e| e <= now)
            })
            .map(|t| {
                (
                    inner.state.seq[&t.spec.task_id],
                    t.spec.task_id.clone(),
                    t.state.attempt < t.spec.max_attempts,
                )
            })
            .collect();
        due.sort();
        for (_, task_id, requeue) in due {
            Self::commit(inner, Transition::Expire { task_id, requeue, at: now })?;
        }
        Ok(())
    }

    /// Leases the oldest queued task to `worker_id`. Expired leases are
    /// reaped first, so an abandoned task becomes claimable again.
    pub fn claim(&self, worker_id: &str, now: Timestamp) -> Result<Option<Lease>> {
        let mut inner = self.inner.lock().unwrap();
        Self::expire_due(&mut inner, now)?;
        let next = inner
            .state
            .tasks
            .values()
            .filter(|t| t.state.status == TaskStatus::Queued)
            .min_by_key(|t| (t.spec.submitted_at, inner.state.seq[&t.spec.task_id]))
            .map(|t| (t.spec.task_id.clone(), t.state.attempt + 1));
        let Some((task_id, attempt)) = next else {
            return Ok(None);
        };
        let lease_expiry = now + self.config.lease_ttl;
        Self::commit(
            &mut inner,
            Transition::Claim {
                task_id: task_id.clone(),
                worker: worker_id.to_string(),
                attempt,
                lease_expiry,
                at: now,
            },
        )?;
        Ok(Some(Lease {
            task_id,
            attempt,
            lease_expiry,
        }))
    }

    fn check_lease<'a>(inner: &'a Inner, task_id: &str, worker_id: &str, now: Timestamp) -> Result<&'a Task> {
        let task = inner
            .state
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::not_found(format!("task {task_id}")))?;
        let live = task.state.status == TaskStatus::Running
            && task.state.worker.as_deref() == Some(worker_id)
            && task.state.lease_expiry.is_some_and(|e| e > now);
        if live {
            Ok(task)
        } else {
            Err(Error::LeaseLost(task_id.to_string()))
        }
    }

    pub fn heartbeat(&self, task_id: &str, worker_id: &str, now: Timestamp) -> Result<Timestamp> {
        let mut inner = self.inner.lock().unwrap();
        Self::check_lease(&inner, task_id, worker_id, now)?;
        let lease_expiry = now + self.config.lease_ttl;
        Self::commit(
            &mut inner,
            Transition::Heartbeat {
                task_id: task_id.to_string(),
                lease_expiry,
                at: now,
            },
        )?;
        Ok(lease_expiry)
    }

    /// Declares the unit list of a task that was submitted without one.
    /// Re-declaring the same list on a later attempt is a no-op.
    pub fn declare_units(&self, task_id: &str, worker_id: &str, units: Vec<String>, now: Timestamp) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let task = Self::check_lease(&inner, task_id, worker_id, now)?;
        if task.spec.units == units {
            return Ok(());
        }
        if !task.spec.units.is_empty() {
            return Err(Error::Conflict(format!("task {task_id} already has a different unit list")));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = units.iter().find(|u| !seen.insert(u.as_str())) {
            return Err(Error::invalid(format!("duplicate unit id {dup}")));
        }
        Self::commit(
            &mut inner,
            Transition::Units {
                task_id: task_id.to_string(),
                units,
            },
        )
    }

    pub fn record_unit_done(&self, task_id: &str, worker_id: &str, unit_id: &str, now: Timestamp) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let task = Self::check_lease(&inner, task_id, worker_id, now)?;
        if !task.spec.units.iter().any(|u| u == unit_id) {
            return Err(Error::invalid(format!("unknown unit {unit_id} for task {task_id}")));
        }
        if task.state.completed_units.contains(unit_id) {
            return Ok(());
        }
        Self::commit(
            &mut inner,
            Transition::UnitDone {
                task_id: task_id.to_string(),
                unit: unit_id.to_string(),
            },
        )
    }

    pub fn complete(&self, task_id: &str, worker_id: &str, outputs: Vec<String>, now: Timestamp) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        Self::check_lease(&inner, task_id, worker_id, now)?;
        Self::commit(
            &mut inner,
            Transition::Complete {
                task_id: task_id.to_string(),
                outputs,
                at: now,
            },
        )
    }

    /// Fails the current attempt. A retryable failure with attempts left goes
    /// back to the queue with its completed units intact.
    pub fn fail(&self, task_id: &str, worker_id: &str, error: &str, retryable: bool, now: Timestamp) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let task = Self::check_lease(&inner, task_id, worker_id, now)?;
        let requeue = retryable && task.state.attempt < task.spec.max_attempts;
        Self::commit(
            &mut inner,
            Transition::Fail {
                task_id: task_id.to_string(),
                error: error.to_string(),
                requeue,
                at: now,
            },
        )
    }

    pub fn cancel(&self, task_id: &str, now: Timestamp) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let task = inner
            .state
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::not_found(format!("task {task_id}")))?;
        if task.state.status.is_terminal() {
            return Err(Error::Conflict(format!(
                "task {task_id} is already {:?}",
                task.state.status
            )));
        }
        Self::commit(
            &mut inner,
            Transition::Cancel {
                task_id: task_id.to_string(),
                at: now,
            },
        )
    }

    /// Requeues every running task. Called once on startup: leases held by a
    /// previous process cannot be renewed by anyone.
    pub fn recover_orphans(&self, now: Timestamp) -> Result<usize> {
        let mut inner = self.inner.lock().unwrap();
        let mut orphans: Vec<(u64, String, bool)> = inner
            .state
            .tasks
            .values()
            .filter(|t| t.state.status == TaskStatus::Running)
            .map(|t| {
                (
                    inner.state.seq[&t.spec.task_id],
                    t.spec.task_id.clone(),
                    t.state.attempt < t.spec.max_attempts,
                )
            })
            .collect();
        orphans.sort();
        let n = orphans.len();
        for (_, task_id, requeue) in orphans {
            Self::commit(&mut inner, Transition::Expire { task_id, requeue, at: now })?;
        }
        Ok(n)
    }

    /// Reaps expired leases without claiming anything.
    pub fn expire_leases(&self, now: Timestamp) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        Self::expire_due(&mut inner, now)
    }

    pub fn snapshot(&self) -> Snapshot {
        let inner = self.inner.lock().unwrap();
        let mut counts: BTreeMap<TaskStatus, usize> =
            TaskStatus::ALL.iter().map(|s| (*s, 0)).collect();
        for t in inner.state.tasks.values() {
            *counts.entry(t.state.status).or_default() += 1;
        }
        let mut recent: Vec<RecentTask> = inner
            .state
            .tasks
            .values()
            .filter(|t| t.state.status.is_terminal())
            .filter_map(|t| {
                let finished_at = t.state.finished_at?;
                Some(RecentTask {
                    task_id: t.spec.task_id.clone(),
                    stage: t.spec.stage,
                    status: t.state.status,
                    attempt: t.state.attempt,
                    error: t.state.error.clone(),
                    finished_at,
                    duration_ms: t
                        .state
                        .first_started_at
                        .map(|s| (finished_at - s).num_milliseconds()),
                })
            })
            .collect();
        recent.sort_by(|a, b| {
            b.finished_at
                .cmp(&a.finished_at)
                .then_with(|| inner.state.seq[&b.task_id].cmp(&inner.state.seq[&a.task_id]))
        });
        recent.truncate(RECENT_LIMIT);
        Snapshot {
            counts,
            workers: inner.state.workers.values().cloned().collect(),
            recent,
        }
    }
}
