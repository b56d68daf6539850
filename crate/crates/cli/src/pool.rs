//! Bounded worker pool over independent grid cells. Results are collected
//! into slots indexed by cell, so serial and parallel runs produce identical
//! ledgers.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub fn run_cells<C, T, F>(workers: usize, cells: Vec<C>, f: F) -> Vec<T>
where
    C: Send + Sync,
    T: Send,
    F: Fn(&C) -> T + Sync,
{
    let workers = workers.max(1).min(cells.len().max(1));
    let n = cells.len();
    let cursor = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(&cells[i]);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("every cell completed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_independent_of_worker_count() {
        let cells: Vec<usize> = (0..37).collect();
        let serial = run_cells(1, cells.clone(), |c| c * c);
        let parallel = run_cells(4, cells, |c| c * c);
        assert_eq!(serial, parallel);
    }

    #[test]
    fn empty_cells() {
        let out: Vec<i32> = run_cells(3, Vec::<i32>::new(), |c| *c);
        assert!(out.is_empty());
    }
}
