//! Fork-join execution of per-group tasks on a fixed worker pool.
//!
//! Each batch runs `workers` logical workers on a rayon pool. In
//! `StaticBlock` mode worker `w` owns a contiguous range of tasks; in
//! `WorkStealing` mode the same ranges seed per-worker deques and idle
//! workers steal from the others. Results are always placed by task
//! position, so downstream reductions see the same order in every mode.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crossbeam_deque::{Steal, Stealer, Worker};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleMode {
    #[default]
    StaticBlock,
    WorkStealing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub tasks: Vec<usize>,
    pub mode: ScheduleMode,
    pub workers: usize,
    pub deterministic: bool,
}

impl BatchPlan {
    pub fn new(tasks: Vec<usize>, mode: ScheduleMode, workers: usize) -> Self {
        Self {
            tasks,
            mode,
            workers,
            deterministic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BatchError {
    #[error("task for group {group} failed: {message}")]
    TaskFailed { group: usize, message: String },
    #[error("group {0} appears more than once in the batch")]
    DuplicateTask(usize),
    #[error("thread pool could not be built: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorkerStats {
    pub tasks: u64,
    pub busy: Duration,
}

/// Worker count matching the host's available parallelism.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub struct WorkerPool {
    pool: rayon::ThreadPool,
    workers: usize,
    stats: Mutex<Vec<WorkerStats>>,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool").field("workers", &self.workers).finish()
    }
}

impl WorkerPool {
    pub fn new(workers: usize) -> Result<Self, BatchError> {
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|k| format!("dede-worker-{k}"))
            .build()
            .map_err(|e| BatchError::Pool(e.to_string()))?;
        Ok(Self {
            pool,
            workers,
            stats: Mutex::new(vec![WorkerStats::default(); workers]),
        })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Runs `task` once per entry of `plan.tasks`; `result[k]` belongs to `plan.tasks[k]`.
    pub fn run_batch<T, F>(&self, plan: &BatchPlan, task: F) -> Result<Vec<T>, BatchError>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        let n = plan.tasks.len();
        let mut seen = std::collections::HashSet::with_capacity(n);
        for &g in &plan.tasks {
            if !seen.insert(g) {
                return Err(BatchError::DuplicateTask(g));
            }
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let logical = plan.workers.clamp(1, self.workers);
        let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
        let failure: Mutex<Option<BatchError>> = Mutex::new(None);
        let local_stats: Vec<Mutex<WorkerStats>> = (0..logical).map(|_| Mutex::new(WorkerStats::default())).collect();

        let ranges: Vec<std::ops::Range<usize>> = (0..logical)
            .map(|w| (w * n / logical)..((w + 1) * n / logical))
            .collect();

        let run_one = |pos: usize, w: usize| {
            if failure.lock().unwrap().is_some() {
                return;
            }
            let group = plan.tasks[pos];
            let start = Instant::now();
            match catch_unwind(AssertUnwindSafe(|| task(group))) {
                Ok(v) => *slots[pos].lock().unwrap() = Some(v),
                Err(payload) => {
                    let message = payload
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| payload.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "panic".into());
                    failure
                        .lock()
                        .unwrap()
                        .get_or_insert(BatchError::TaskFailed { group, message });
                }
            }
            let mut s = local_stats[w].lock().unwrap();
            s.tasks += 1;
            s.busy += start.elapsed();
        };

        match plan.mode {
            ScheduleMode::StaticBlock => {
                self.pool.scope(|scope| {
                    for (w, range) in ranges.iter().enumerate() {
                        let range = range.clone();
                        let run_one = &run_one;
                        scope.spawn(move |_| {
                            for pos in range {
                                run_one(pos, w);
                            }
                        });
                    }
                });
            }
            ScheduleMode::WorkStealing => {
                let queues: Vec<Worker<usize>> = ranges
                    .iter()
                    .map(|r| {
                        let q = Worker::new_fifo();
                        for pos in r.clone() {
                            q.push(pos);
                        }
                        q
                    })
                    .collect();
                let stealers: Vec<Stealer<usize>> = queues.iter().map(Worker::stealer).collect();
                let stealers = &stealers;
                self.pool.scope(|scope| {
                    for (w, queue) in queues.into_iter().enumerate() {
                        let run_one = &run_one;
                        scope.spawn(move |_| loop {
                            let next = queue.pop().or_else(|| steal_any(stealers, w));
                            match next {
                                Some(pos) => run_one(pos, w),
                                None => break,
                            }
                        });
                    }
                });
            }
        }

        {
            let mut stats = self.stats.lock().unwrap();
            for (w, s) in local_stats.iter().enumerate() {
                let s = s.lock().unwrap();
                stats[w].tasks += s.tasks;
                stats[w].busy += s.busy;
            }
        }
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        Ok(slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("every task ran"))
            .collect())
    }

    /// Per-worker task counts and busy time accumulated since the last reset.
    pub fn pool_stats(&self) -> Vec<WorkerStats> {
        self.stats.lock().unwrap().clone()
    }

    pub fn reset_stats(&self) {
        self.stats.lock().unwrap().iter_mut().for_each(|s| *s = WorkerStats::default());
    }
}

fn steal_any(stealers: &[Stealer<usize>], me: usize) -> Option<usize> {
    let k = stealers.len();
    loop {
        let mut retry = false;
        for off in 1..k {
            match stealers[(me + off) % k].steal() {
                Steal::Success(pos) => return Some(pos),
                Steal::Retry => retry = true,
                Steal::Empty => {}
            }
        }
        if !retry {
            return None;
        }
    }
}
