//! The shared job cache and the feeder that keeps it stocked.
//!
//! Dispatch never scans the whole backlog; it scans a fixed-size slot array.
//! The feeder refills vacant slots from the backlog, rotating across the
//! (hr class, size class) categories present so no category can starve the
//! cache.

use std::collections::{BTreeMap, VecDeque};

use crate::domain::{InstanceId, JobId};

pub const DEFAULT_CACHE_SLOTS: usize = 1000;

/// One dispatchable instance parked in the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CachedEntry {
    pub job: JobId,
    pub instance: InstanceId,
}

/// Fixed-size slot array. Taking a slot empties it; only the feeder refills.
#[derive(Debug)]
pub struct JobCache {
    slots: Vec<Option<CachedEntry>>,
}

impl JobCache {
    pub fn new(n_slots: usize) -> Self {
        JobCache {
            slots: vec![None; n_slots.max(1)],
        }
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn occupied(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn get(&self, idx: usize) -> Option<CachedEntry> {
        self.slots[idx]
    }

    /// Remove and return the entry at `idx`. A taken slot cannot be taken
    /// again until the feeder refills it.
    pub fn take(&mut self, idx: usize) -> Option<CachedEntry> {
        self.slots[idx].take()
    }

    /// Occupied slots starting at `start`, wrapping around once.
    pub fn iter_from(&self, start: usize) -> impl Iterator<Item = (usize, CachedEntry)> + '_ {
        let n = self.slots.len();
        (0..n).filter_map(move |off| {
            let idx = (start + off) % n;
            self.slots[idx].map(|e| (idx, e))
        })
    }

    fn vacancies(&self) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&i| self.slots[i].is_none())
            .collect()
    }
}

/// Category key for feeder fairness: the job's homogeneous-redundancy lock
/// (zero while unlocked) and its size class.
pub type Category = (u64, u8);

/// Unsent instances not yet cached, grouped by category, FIFO within each.
#[derive(Debug, Default)]
pub struct Backlog {
    queues: BTreeMap<Category, VecDeque<CachedEntry>>,
    len: usize,
}

impl Backlog {
    pub fn push(&mut self, category: Category, entry: CachedEntry) {
        self.queues.entry(category).or_default().push_back(entry);
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn pop(&mut self, category: Category) -> Option<CachedEntry> {
        let q = self.queues.get_mut(&category)?;
        let e = q.pop_front();
        if e.is_some() {
            self.len -= 1;
        }
        if q.is_empty() {
            self.queues.remove(&category);
        }
        e
    }

    fn categories(&self) -> Vec<Category> {
        self.queues.keys().copied().collect()
    }
}

/// Refill vacant cache slots from the backlog, visiting categories round
/// robin so every (hr class, size class) present gets cache share.
/// `still_dispatchable` filters out entries whose instance was cancelled
/// while parked in the backlog; those are dropped on the floor.
pub fn feeder_fill(
    cache: &mut JobCache,
    backlog: &mut Backlog,
    mut still_dispatchable: impl FnMut(&CachedEntry) -> bool,
) -> usize {
    let vacancies = cache.vacancies();
    let mut filled = 0;
    let mut vi = 0;
    while vi < vacancies.len() && !backlog.is_empty() {
        let categories = backlog.categories();
        let mut progressed = false;
        for cat in categories {
            if vi >= vacancies.len() {
                break;
            }
            // Pop until this category yields a live entry or runs dry.
            while let Some(entry) = backlog.pop(cat) {
                if still_dispatchable(&entry) {
                    cache.slots[vacancies[vi]] = Some(entry);
                    vi += 1;
                    filled += 1;
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    filled
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(job: u64, inst: u64) -> CachedEntry {
        CachedEntry {
            job: JobId(job),
            instance: InstanceId(inst),
        }
    }

    #[test]
    fn fill_covers_all_categories() {
        let mut cache = JobCache::new(100);
        let mut backlog = Backlog::default();
        // 1000 entries across two size classes, class 0 first.
        for i in 0..500 {
            backlog.push((0, 0), entry(i, i));
        }
        for i in 500..1000 {
            backlog.push((0, 1), entry(i, i));
        }
        let filled = feeder_fill(&mut cache, &mut backlog, |_| true);
        assert_eq!(filled, 100);
        assert_eq!(backlog.len(), 900);
        let mut by_class = [0usize; 2];
        for (_, e) in cache.iter_from(0) {
            by_class[(e.job.0 >= 500) as usize] += 1;
        }
        // Round robin: both classes take roughly half the slots.
        assert_eq!(by_class[0], 50);
        assert_eq!(by_class[1], 50);
    }

    #[test]
    fn empty_backlog_leaves_cache_unchanged() {
        let mut cache = JobCache::new(10);
        let mut backlog = Backlog::default();
        assert_eq!(feeder_fill(&mut cache, &mut backlog, |_| true), 0);
        assert_eq!(cache.occupied(), 0);
    }

    #[test]
    fn taken_slot_is_repopulated_next_fill() {
        let mut cache = JobCache::new(2);
        let mut backlog = Backlog::default();
        for i in 0..4 {
            backlog.push((0, 0), entry(i, i));
        }
        feeder_fill(&mut cache, &mut backlog, |_| true);
        assert_eq!(cache.occupied(), 2);
        let taken = cache.take(0).unwrap();
        assert_eq!(taken.job, JobId(0));
        assert!(cache.take(0).is_none(), "taken slot must not yield twice");
        feeder_fill(&mut cache, &mut backlog, |_| true);
        assert_eq!(cache.occupied(), 2);
        assert_eq!(cache.get(0).unwrap().job, JobId(2));
    }

    #[test]
    fn stale_entries_are_dropped_not_cached() {
        let mut cache = JobCache::new(4);
        let mut backlog = Backlog::default();
        for i in 0..4 {
            backlog.push((0, 0), entry(i, i));
        }
        // Entries for even jobs were cancelled meanwhile.
        let filled = feeder_fill(&mut cache, &mut backlog, |e| e.job.0 % 2 == 1);
        assert_eq!(filled, 2);
        assert!(backlog.is_empty());
        let jobs: Vec<u64> = cache.iter_from(0).map(|(_, e)| e.job.0).collect();
        assert_eq!(jobs, vec![1, 3]);
    }

    #[test]
    fn iter_from_wraps_in_scan_order() {
        let mut cache = JobCache::new(3);
        let mut backlog = Backlog::default();
        for i in 0..3 {
            backlog.push((0, 0), entry(i, i));
        }
        feeder_fill(&mut cache, &mut backlog, |_| true);
        let order: Vec<usize> = cache.iter_from(2).map(|(i, _)| i).collect();
        assert_eq!(order, vec![2, 0, 1]);
    }
}
