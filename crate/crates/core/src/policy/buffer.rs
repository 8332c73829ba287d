use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An action queued for a specific tick, tagged with the plan that produced
/// it and the index of the observed state that plan started from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferedAction {
    pub step: usize,
    pub action: Vec<f64>,
    pub plan_id: u64,
    pub input_index: usize,
}

/// FIFO of planned actions with consecutive step indices.
///
/// The executor pops exactly the action for its current tick; chunks that
/// arrive late are trimmed so the queue never holds an already-executed tick.
#[derive(Clone, Debug)]
pub struct ActionBuffer {
    queue: VecDeque<BufferedAction>,
    capacity: usize,
    next_exec: usize,
}

impl ActionBuffer {
    /// Capacity must be at least two chunks.
    pub fn new(chunk: usize) -> Self {
        let capacity = 2 * chunk.max(1);
        Self {
            queue: VecDeque::with_capacity(capacity),
            capacity,
            next_exec: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Next tick the executor will run.
    pub fn next_exec(&self) -> usize {
        self.next_exec
    }

    /// Step index one past the last queued action, if any.
    pub fn end(&self) -> Option<usize> {
        self.queue.back().map(|a| a.step + 1)
    }

    pub fn get(&self, step: usize) -> Option<&BufferedAction> {
        self.queue.iter().find(|a| a.step == step)
    }

    pub fn last(&self) -> Option<&BufferedAction> {
        self.queue.back()
    }

    /// Appends a chunk, dropping entries for ticks that already ran. Returns
    /// the number of dropped entries.
    pub fn push_chunk(&mut self, chunk: Vec<BufferedAction>) -> Result<usize> {
        let mut dropped = 0;
        for item in chunk {
            if item.step < self.next_exec {
                dropped += 1;
                continue;
            }
            // A failed plan can leave a gap; only a non-empty queue must be
            // extended contiguously.
            let expected = self.end().unwrap_or(item.step);
            if item.step != expected {
                return Err(Error::Planning(format!(
                    "buffered steps must be consecutive: expected {expected}, got {}",
                    item.step
                )));
            }
            if self.queue.len() >= self.capacity {
                return Err(Error::Planning("action buffer overflow".into()));
            }
            self.queue.push_back(item);
        }
        Ok(dropped)
    }

    /// Pops the action for `next_exec` (if present) and advances the tick.
    pub fn pop(&mut self) -> Option<BufferedAction> {
        let step = self.next_exec;
        self.next_exec += 1;
        match self.queue.front() {
            Some(front) if front.step == step => self.queue.pop_front(),
            _ => None,
        }
    }
}

/// Observed states in arrival order.
#[derive(Clone, Debug, Default)]
pub struct StateBuffer {
    entries: Vec<(usize, Vec<f64>)>,
}

impl StateBuffer {
    pub fn push(&mut self, index: usize, state: Vec<f64>) -> Result<()> {
        if self.entries.last().is_some_and(|(i, _)| *i >= index) {
            return Err(Error::Planning("state indices must strictly increase".into()));
        }
        self.entries.push((index, state));
        Ok(())
    }

    pub fn latest(&self) -> Option<(usize, &[f64])> {
        self.entries.last().map(|(i, s)| (*i, s.as_slice()))
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.entries
            .binary_search_by_key(&index, |(i, _)| *i)
            .ok()
            .map(|k| self.entries[k].1.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
