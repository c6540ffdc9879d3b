use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use super::{Queue, Task};
use crate::domain::Clock;
use crate::error::{Error, Result};

/// Runs the work of one task. Implementations report progress through the
/// context and return the ids of the artifacts they produced.
pub trait TaskExecutor: Send + Sync {
    fn execute(&self, task: &Task, ctx: &TaskContext) -> Result<Vec<String>>;
}

/// A worker's handle on the task it currently holds.
pub struct TaskContext {
    queue: Arc<Queue>,
    clock: Arc<dyn Clock>,
    task_id: String,
    worker_id: String,
    lost: Arc<AtomicBool>,
}

impl TaskContext {
    pub fn new(queue: Arc<Queue>, clock: Arc<dyn Clock>, task_id: &str, worker_id: &str) -> Self {
        Self {
            queue,
            clock,
            task_id: task_id.to_string(),
            worker_id: worker_id.to_string(),
            lost: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn worker_id(&self) -> &str {
        &self.worker_id
    }

    /// Fails with lease-lost once the heartbeat has noticed the task was
    /// cancelled or re-leased. Long-running work calls this between steps.
    pub fn checkpoint(&self) -> Result<()> {
        if self.lost.load(Ordering::SeqCst) {
            Err(Error::LeaseLost(self.task_id.clone()))
        } else {
            Ok(())
        }
    }

}

impl UnitProgress for TaskContext {
    fn completed_units(&self) -> Result<BTreeSet<String>> {
        Ok(self.queue.get(&self.task_id)?.state.completed_units)
    }

    fn declare_units(&self, units: Vec<String>) -> Result<()> {
        self.queue
            .declare_units(&self.task_id, &self.worker_id, units, self.clock.now())
    }

    fn unit_done(&self, unit: &str) -> Result<()> {
        self.checkpoint()?;
        self.queue
            .record_unit_done(&self.task_id, &self.worker_id, unit, self.clock.now())
    }

    fn checkpoint(&self) -> Result<()> {
        TaskContext::checkpoint(self)
    }
}

/// Per-unit progress of a resumable piece of work.
pub trait UnitProgress: Sync {
    fn completed_units(&self) -> Result<BTreeSet<String>>;
    fn declare_units(&self, units: Vec<String>) -> Result<()>;
    fn unit_done(&self, unit: &str) -> Result<()>;
    fn checkpoint(&self) -> Result<()> {
        Ok(())
    }
}

/// In-memory progress for work run outside the queue.
#[derive(Default)]
pub struct LocalProgress {
    done: Mutex<BTreeSet<String>>,
}

impl UnitProgress for LocalProgress {
    fn completed_units(&self) -> Result<BTreeSet<String>> {
        Ok(self.done.lock().unwrap().clone())
    }

    fn declare_units(&self, _units: Vec<String>) -> Result<()> {
        Ok(())
    }

    fn unit_done(&self, unit: &str) -> Result<()> {
        self.done.lock().unwrap().insert(unit.to_string());
        Ok(())
    }
}

struct Stop {
    flag: Mutex<bool>,
    cv: Condvar,
}

impl Stop {
    fn new() -> Self {
        Self {
            flag: Mutex::new(false),
            cv: Condvar::new(),
        }
    }

    fn set(&self) {
        *self.flag.lock().unwrap() = true;
        self.cv.notify_all();
    }

    fn is_set(&self) -> bool {
        *self.flag.lock().unwrap()
    }

    /// Sleeps up to `d`; returns true if stopped meanwhile.
    fn wait(&self, d: std::time::Duration) -> bool {
        let guard = self.flag.lock().unwrap();
        let (guard, _) = self.cv.wait_timeout_while(guard, d, |s| !*s).unwrap();
        *guard
    }
}

/// Claims one task and runs it to completion on the calling thread, with a
/// heartbeat thread keeping the lease alive. Returns the id of the task run.
pub fn run_one(
    queue: &Arc<Queue>,
    executor: &dyn TaskExecutor,
    clock: &Arc<dyn Clock>,
    worker_id: &str,
) -> Result<Option<String>> {
    let Some(lease) = queue.claim(worker_id, clock.now())? else {
        return Ok(None);
    };
    let task = queue.get(&lease.task_id)?;
    let ctx = TaskContext::new(queue.clone(), clock.clone(), &lease.task_id, worker_id);
    let interval = (queue.lease_ttl() / 3)
        .to_std()
        .unwrap_or(std::time::Duration::from_secs(10));

    let done = Stop::new();
    let outcome = std::thread::scope(|s| {
        s.spawn(|| {
            while !done.wait(interval) {
                if queue.heartbeat(&lease.task_id, worker_id, clock.now()).is_err() {
                    ctx.lost.store(true, Ordering::SeqCst);
                    break;
                }
            }
        });
        let outcome = executor.execute(&task, &ctx);
        done.set();
        outcome
    });

    let now = clock.now();
    let settle = match outcome {
        Ok(outputs) => queue.complete(&lease.task_id, worker_id, outputs, now),
        Err(Error::LeaseLost(_)) | Err(Error::Cancelled) => Ok(()),
        Err(e) => queue.fail(&lease.task_id, worker_id, &format!("{}: {e}", e.code()), e.is_retryable(), now),
    };
    match settle {
        // cancelled or re-leased while finishing: the other side owns it now
        Ok(()) | Err(Error::LeaseLost(_)) => Ok(Some(lease.task_id)),
        Err(e) => Err(e),
    }
}

/// Fixed-size pool of worker threads polling one queue.
pub struct WorkerPool {
    stop: Arc<Stop>,
    handles: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    pub fn start(
        queue: Arc<Queue>,
        executor: Arc<dyn TaskExecutor>,
        clock: Arc<dyn Clock>,
        workers: usize,
        poll: std::time::Duration,
    ) -> Self {
        let stop = Arc::new(Stop::new());
        let prefix = uuid::Uuid::new_v4().simple().to_string()[..8].to_string();
        let handles = (0..workers)
            .map(|i| {
                let (queue, executor, clock, stop) =
                    (queue.clone(), executor.clone(), clock.clone(), stop.clone());
                let worker_id = format!("{prefix}-w{i}");
                std::thread::Builder::new()
                    .name(worker_id.clone())
                    .spawn(move || {
                        while !stop.is_set() {
                            match run_one(&queue, executor.as_ref(), &clock, &worker_id) {
                                Ok(Some(_)) => continue,
                                Ok(None) => {}
                                Err(e) => eprintln!("worker {worker_id}: {e}"),
                            }
                            if stop.wait(poll) {
                                break;
                            }
                        }
                    })
                    .expect("spawn worker thread")
            })
            .collect();
        Self { stop, handles }
    }

    pub fn size(&self) -> usize {
        self.handles.len()
    }

    /// Stops polling and waits for in-flight tasks to finish.
    pub fn shutdown(mut self) {
        self.stop.set();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.stop.set();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
