//! Task execution on a computing resource.
//!
//! A resource serves its FIFO queue at
//! `capacity_factor × (1 − background_cpu / 100) × reference_rate` messages
//! per second. Processing raises the resource's reported CPU in proportion to
//! the measured processing rate, and queued messages hold memory.

use std::collections::VecDeque;

use crate::ids::EdgeId;
use crate::profiling::TaskLoad;

/// One task input message waiting on, or processed by, a resource.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskItem {
    /// Index of the producing robot.
    pub robot: usize,
    pub created_at: f64,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct EdgeExecutor {
    pub edge_id: EdgeId,
    pub capacity_factor: f64,
    pub reference_rate: f64,
    /// CPU points per message/s at capacity factor 1.
    pub cpu_per_rate: f64,
    pub mem_per_queued_mb: f64,
    pub load_window: f64,
    queue: VecDeque<TaskItem>,
    credit: f64,
    recent: VecDeque<(f64, u32)>,
    pub processed_total: u64,
    pub bytes_received: u64,
}

const CREDIT_EPS: f64 = 1e-9;

impl EdgeExecutor {
    pub fn new(edge_id: EdgeId, capacity_factor: f64, reference_rate: f64) -> Self {
        Self {
            edge_id,
            capacity_factor,
            reference_rate,
            cpu_per_rate: 0.0,
            mem_per_queued_mb: 0.0,
            load_window: 1.0,
            queue: VecDeque::new(),
            credit: 0.0,
            recent: VecDeque::new(),
            processed_total: 0,
            bytes_received: 0,
        }
    }

    pub fn with_load_model(mut self, cpu_per_rate: f64, mem_per_queued_mb: f64, window: f64) -> Self {
        self.cpu_per_rate = cpu_per_rate;
        self.mem_per_queued_mb = mem_per_queued_mb;
        self.load_window = window;
        self
    }

    pub fn enqueue(&mut self, item: TaskItem) {
        self.bytes_received += item.bytes;
        self.queue.push_back(item);
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Messages per second given the background CPU load in percent.
    pub fn service_rate(&self, background_cpu: f64) -> f64 {
        self.capacity_factor * (1.0 - background_cpu.clamp(0.0, 100.0) / 100.0) * self.reference_rate
    }

    /// Advances execution by `dt` seconds ending at `now`.
    pub fn execute(&mut self, now: f64, dt: f64, background_cpu: f64) -> Vec<TaskItem> {
        assert!(dt > 0.0, "execution step must be positive");
        let mut done = Vec::new();
        if self.queue.is_empty() {
            self.credit = 0.0;
        } else {
            self.credit += self.service_rate(background_cpu) * dt;
            while self.credit + CREDIT_EPS >= 1.0 {
                let Some(item) = self.queue.pop_front() else {
                    break;
                };
                self.credit -= 1.0;
                done.push(item);
            }
            if self.queue.is_empty() {
                self.credit = 0.0;
            }
        }
        self.processed_total += done.len() as u64;
        self.recent.push_back((now, done.len() as u32));
        while let Some(&(t, _)) = self.recent.front() {
            if now - t >= self.load_window - CREDIT_EPS {
                self.recent.pop_front();
            } else {
                break;
            }
        }
        done
    }

    /// Messages processed per second over the last load window.
    pub fn recent_rate(&self) -> f64 {
        let n: u32 = self.recent.iter().map(|(_, c)| c).sum();
        f64::from(n) / self.load_window
    }

    /// Load the task currently places on this resource.
    pub fn task_load(&self, hosting: bool, footprint_mb: f64) -> TaskLoad {
        let resident = hosting || !self.queue.is_empty();
        TaskLoad {
            cpu_pct: self.cpu_per_rate * self.recent_rate() / self.capacity_factor,
            mem_mb: if resident { footprint_mb } else { 0.0 }
                + self.mem_per_queued_mb * self.queue.len() as f64,
        }
    }
}

/// Counts merged outputs: one fires whenever every robot has had one more
/// message processed.
#[derive(Debug, Clone)]
pub struct MergeTracker {
    per_robot: Vec<u64>,
    merged: u64,
}

impl MergeTracker {
    pub fn new(robots: usize) -> Self {
        Self {
            per_robot: vec![0; robots],
            merged: 0,
        }
    }

    /// Records a processed message; returns how many merged outputs fired.
    pub fn record(&mut self, robot: usize) -> u64 {
        self.per_robot[robot] += 1;
        let now = self.per_robot.iter().copied().min().unwrap_or(0);
        let fired = now - self.merged;
        self.merged = now;
        fired
    }

    pub fn merged(&self) -> u64 {
        self.merged
    }
}
