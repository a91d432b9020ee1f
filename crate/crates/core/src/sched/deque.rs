use std::collections::VecDeque;
use std::sync::Mutex;

use super::TaskNode;

/// Per-worker task deque. The owner works at the back (deepest tasks),
/// thieves take from the front (shallowest, i.e. largest, tasks).
///
/// Tasks are pushed in depth-first order, so levels are non-decreasing from
/// front to back; among equally shallow tasks the least recently pushed one
/// is stolen first.
#[derive(Debug, Default)]
pub struct WorkerDeque {
    tasks: Mutex<VecDeque<TaskNode>>,
}

pub enum NextTask {
    Local(TaskNode),
    Steal,
}

/// Local work first; an empty deque means the worker must go stealing.
pub fn next_task(deque: &WorkerDeque) -> NextTask {
    match deque.pop() {
        Some(t) => NextTask::Local(t),
        None => NextTask::Steal,
    }
}

impl WorkerDeque {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, VecDeque<TaskNode>> {
        self.tasks.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn push(&self, task: TaskNode) {
        self.lock().push_back(task);
    }

    /// Owner side: the deepest task.
    pub fn pop(&self) -> Option<TaskNode> {
        let mut q = self.lock();
        let idx = deepest(&q)?;
        q.remove(idx)
    }

    /// Thief side: the shallowest task.
    pub fn steal(&self) -> Option<TaskNode> {
        let mut q = self.lock();
        let idx = shallowest(&q)?;
        q.remove(idx)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }

    pub fn levels(&self) -> Vec<u16> {
        self.lock().iter().map(|t| t.level).collect()
    }
}

fn deepest(q: &VecDeque<TaskNode>) -> Option<usize> {
    // Last occurrence of the maximum level.
    let mut best: Option<(usize, u16)> = None;
    for (i, t) in q.iter().enumerate() {
        if best.map_or(true, |(_, l)| t.level >= l) {
            best = Some((i, t.level));
        }
    }
    best.map(|(i, _)| i)
}

fn shallowest(q: &VecDeque<TaskNode>) -> Option<usize> {
    // First occurrence of the minimum level.
    let mut best: Option<(usize, u16)> = None;
    for (i, t) in q.iter().enumerate() {
        if best.map_or(true, |(_, l)| t.level < l) {
            best = Some((i, t.level));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sched::Region;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Barrier};

    fn task(level: u16) -> TaskNode {
        TaskNode {
            region: Region::new(0, 2, 0, 2),
            level,
        }
    }

    #[test]
    fn owner_gets_deepest() {
        let d = WorkerDeque::new();
        d.push(task(2));
        d.push(task(5));
        assert!(matches!(next_task(&d), NextTask::Local(t) if t.level == 5));
    }

    #[test]
    fn thief_gets_shallowest() {
        let d = WorkerDeque::new();
        for l in [1, 3, 6] {
            d.push(task(l));
        }
        assert_eq!(d.steal().unwrap().level, 1);
        assert_eq!(d.levels(), vec![3, 6]);
    }

    #[test]
    fn empty_deque_means_steal() {
        assert!(matches!(next_task(&WorkerDeque::new()), NextTask::Steal));
    }

    #[test]
    fn concurrent_pop_and_steal_on_single_task() {
        for _ in 0..500 {
            let d = Arc::new(WorkerDeque::new());
            d.push(task(0));
            let wins = Arc::new(AtomicUsize::new(0));
            let gate = Arc::new(Barrier::new(2));
            let owner = {
                let (d, wins, gate) = (d.clone(), wins.clone(), gate.clone());
                std::thread::spawn(move || {
                    gate.wait();
                    if d.pop().is_some() {
                        wins.fetch_add(1, Ordering::SeqCst);
                    }
                })
            };
            let thief = {
                let (d, wins, gate) = (d.clone(), wins.clone(), gate.clone());
                std::thread::spawn(move || {
                    gate.wait();
                    if d.steal().is_some() {
                        wins.fetch_add(1, Ordering::SeqCst);
                    }
                })
            };
            owner.join().unwrap();
            thief.join().unwrap();
            assert_eq!(wins.load(Ordering::SeqCst), 1);
        }
    }
}
