//! Processor event identifiers and count vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The closed set of processor events produced by cache/branch simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventId {
    /// Instruction cache reads (instructions executed).
    Ir,
    /// Data cache reads.
    Dr,
    /// Data cache writes.
    Dw,
    /// L1 instruction cache read misses.
    I1mr,
    /// L1 data cache read misses.
    D1mr,
    /// L1 data cache write misses.
    D1mw,
    /// Last-level cache instruction read misses.
    ILmr,
    /// Last-level cache data read misses.
    DLmr,
    /// Last-level cache data write misses.
    DLmw,
    /// Conditional branches executed.
    Bc,
    /// Conditional branches mispredicted.
    Bcm,
    /// Indirect branches executed.
    Bi,
    /// Indirect branches mispredicted.
    Bim,
}

impl EventId {
    pub const ALL: [EventId; 13] = [
        EventId::Ir,
        EventId::Dr,
        EventId::Dw,
        EventId::I1mr,
        EventId::D1mr,
        EventId::D1mw,
        EventId::ILmr,
        EventId::DLmr,
        EventId::DLmw,
        EventId::Bc,
        EventId::Bcm,
        EventId::Bi,
        EventId::Bim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventId::Ir => "Ir",
            EventId::Dr => "Dr",
            EventId::Dw => "Dw",
            EventId::I1mr => "I1mr",
            EventId::D1mr => "D1mr",
            EventId::D1mw => "D1mw",
            EventId::ILmr => "ILmr",
            EventId::DLmr => "DLmr",
            EventId::DLmw => "DLmw",
            EventId::Bc => "Bc",
            EventId::Bcm => "Bcm",
            EventId::Bi => "Bi",
            EventId::Bim => "Bim",
        }
    }

    /// The event whose count bounds this one from above (a miss never exceeds
    /// the accesses it was drawn from).
    pub fn parent(self) -> Option<EventId> {
        match self {
            EventId::I1mr => Some(EventId::Ir),
            EventId::D1mr => Some(EventId::Dr),
            EventId::D1mw => Some(EventId::Dw),
            EventId::ILmr => Some(EventId::I1mr),
            EventId::DLmr => Some(EventId::D1mr),
            EventId::DLmw => Some(EventId::D1mw),
            EventId::Bcm => Some(EventId::Bc),
            EventId::Bim => Some(EventId::Bi),
            _ => None,
        }
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventId {
    type Err = UnknownEvent;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventId::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| UnknownEvent(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown processor event `{0}`")]
pub struct UnknownEvent(pub String);

/// Counts for a subset of the processor events. Events not present in the map
/// were not recorded (absent, which is distinct from a recorded zero).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventVector {
    counts: BTreeMap<EventId, u64>,
}

impl EventVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts<I: IntoIterator<Item = (EventId, u64)>>(counts: I) -> Self {
        Self {
            counts: counts.into_iter().collect(),
        }
    }

    pub fn get(&self, event: EventId) -> Option<u64> {
        self.counts.get(&event).copied()
    }

    pub fn set(&mut self, event: EventId, count: u64) {
        self.counts.insert(event, count);
    }

    pub fn add(&mut self, event: EventId, count: u64) {
        *self.counts.entry(event).or_insert(0) += count;
    }

    /// Element-wise sum; events recorded in either operand appear in the result.
    pub fn add_vector(&mut self, other: &EventVector) {
        for (&event, &count) in &other.counts {
            self.add(event, count);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (EventId, u64)> + '_ {
        self.counts.iter().map(|(&e, &c)| (e, c))
    }

    pub fn events(&self) -> impl Iterator<Item = EventId> + '_ {
        self.counts.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn contains(&self, event: EventId) -> bool {
        self.counts.contains_key(&event)
    }

    /// True when every event in `required` has a recorded count.
    pub fn covers<'a, I: IntoIterator<Item = &'a EventId>>(&self, required: I) -> bool {
        required.into_iter().all(|e| self.contains(*e))
    }

    /// Events from `required` that have no recorded count, in canonical order.
    pub fn missing<'a, I: IntoIterator<Item = &'a EventId>>(&self, required: I) -> Vec<EventId> {
        let mut missing: Vec<EventId> = required
            .into_iter()
            .copied()
            .filter(|e| !self.contains(*e))
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }

    /// Checks the miss-hierarchy invariant: a missed-event count never exceeds
    /// its parent access count. Only pairs where both counts are recorded are
    /// checked.
    pub fn check_hierarchy(&self) -> Result<(), HierarchyViolation> {
        for (event, count) in self.iter() {
            if let Some(parent) = event.parent() {
                if let Some(parent_count) = self.get(parent) {
                    if count > parent_count {
                        return Err(HierarchyViolation {
                            child: event,
                            child_count: count,
                            parent,
                            parent_count,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{child}={child_count} exceeds parent {parent}={parent_count}")]
pub struct HierarchyViolation {
    pub child: EventId,
    pub child_count: u64,
    pub parent: EventId,
    pub parent_count: u64,
}
