//! The simulation's event vocabulary and the priority queue that orders it.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::domain::{HostId, InstanceId, JobId, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Event {
    HostOn(HostId),
    HostOff(HostId),
    HostDeparted(HostId),
    /// A running task reaches its end if nothing disturbs it first. `gen`
    /// must match the instance's current generation or the event is stale.
    JobComplete {
        host: HostId,
        instance: InstanceId,
        gen: u64,
    },
    Deadline {
        job: JobId,
        instance: InstanceId,
    },
    Rpc(HostId),
    FeederTick,
    CheckpointTick(HostId),
    MetricsTick,
}

/// Min-heap on (time, insertion sequence). The sequence number makes ties
/// pop in push order, which keeps runs reproducible.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<(SimTime, u64, Event)>>,
    seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, at: SimTime, ev: Event) {
        self.heap.push(Reverse((at, self.seq, ev)));
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(SimTime, Event)> {
        self.heap.pop().map(|Reverse((t, _, ev))| (t, ev))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
