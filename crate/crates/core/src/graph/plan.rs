//! Liveness-based buffer planning.
//!
//! A blob is live from the step that produces it through the step of its
//! last consumer; graph outputs stay live to the end. With reuse enabled,
//! blobs are placed greedily in production order into a slot whose current
//! occupant is already dead, growing the slot if needed. Inspected blobs
//! always get a slot of their own.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::validate::ValidGraph;

/// One blob's lifetime in execution steps (inclusive) and its size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlobLife {
    pub name: String,
    pub bytes: usize,
    pub start: usize,
    pub end: usize,
    pub exclusive: bool,
}

impl BlobLife {
    pub fn overlaps(&self, other: &BlobLife) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryPlan {
    pub assignment: BTreeMap<String, usize>,
    pub slot_sizes: Vec<usize>,
    pub peak_bytes: usize,
    pub reuse_enabled: bool,
    pub lives: Vec<BlobLife>,
}

impl MemoryPlan {
    pub fn slot_count(&self) -> usize {
        self.slot_sizes.len()
    }

    /// Blobs assigned to `slot`, in production order.
    pub fn slot_blobs(&self, slot: usize) -> Vec<&str> {
        self.lives
            .iter()
            .filter(|l| self.assignment[&l.name] == slot)
            .map(|l| l.name.as_str())
            .collect()
    }

    /// Pairs of blobs sharing a slot while both are live. Empty for every
    /// correct plan.
    pub fn conflicts(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (i, a) in self.lives.iter().enumerate() {
            for b in &self.lives[i + 1..] {
                if self.assignment[&a.name] == self.assignment[&b.name] && a.overlaps(b) {
                    out.push((a.name.clone(), b.name.clone()));
                }
            }
        }
        out
    }

    /// Human-readable per-slot table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "reuse={} slots={} peak_bytes={}\n",
            self.reuse_enabled,
            self.slot_count(),
            self.peak_bytes
        );
        for (i, size) in self.slot_sizes.iter().enumerate() {
            s.push_str(&format!("  slot {i:>3} {size:>10} B  {}\n", self.slot_blobs(i).join(", ")));
        }
        s
    }
}

/// Plans slots for blobs with known lifetimes. `lives` must be in
/// production order.
pub fn plan_lives(lives: Vec<BlobLife>, reuse: bool) -> MemoryPlan {
    let mut assignment = BTreeMap::new();
    let mut slot_sizes: Vec<usize> = Vec::new();
    // per shareable slot: end step of its latest occupant
    let mut slot_end: Vec<Option<usize>> = Vec::new();
    for life in &lives {
        let free: Vec<usize> = if reuse && !life.exclusive {
            (0..slot_sizes.len()).filter(|&s| slot_end[s].is_some_and(|e| e < life.start)).collect()
        } else {
            Vec::new()
        };
        // smallest slot that fits, else the largest one, grown
        let pick = free
            .iter()
            .copied()
            .filter(|&s| slot_sizes[s] >= life.bytes)
            .min_by_key(|&s| (slot_sizes[s], s))
            .or_else(|| free.iter().copied().max_by_key(|&s| (slot_sizes[s], usize::MAX - s)));
        let slot = match pick {
            Some(s) => {
                slot_sizes[s] = slot_sizes[s].max(life.bytes);
                s
            }
            None => {
                slot_sizes.push(life.bytes);
                slot_end.push(None);
                slot_sizes.len() - 1
            }
        };
        slot_end[slot] = if life.exclusive { None } else { Some(life.end) };
        assignment.insert(life.name.clone(), slot);
    }
    MemoryPlan { peak_bytes: slot_sizes.iter().sum(), assignment, slot_sizes, reuse_enabled: reuse, lives }
}

/// Blob lifetimes of a validated graph at its declared shapes.
pub fn blob_lives(g: &ValidGraph) -> Vec<BlobLife> {
    let step_of: BTreeMap<usize, usize> = g.order.iter().enumerate().map(|(s, &l)| (l, s)).collect();
    let outputs: BTreeSet<String> = g.outputs().into_iter().collect();
    let inspect: BTreeSet<&String> = g.spec.inspect.iter().collect();
    let last = g.order.len().saturating_sub(1);
    let mut lives = Vec::new();
    for &li in &g.order {
        for t in &g.spec.layers[li].tops {
            let start = step_of[&li];
            let end = if outputs.contains(t) {
                last
            } else {
                g.consumers.get(t).into_iter().flatten().map(|c| step_of[c]).max().unwrap_or(start)
            };
            lives.push(BlobLife {
                name: t.clone(),
                bytes: g.blob_bytes(t),
                start,
                end,
                exclusive: inspect.contains(t),
            });
        }
    }
    lives
}

pub fn plan_memory(g: &ValidGraph, reuse: bool) -> MemoryPlan {
    plan_lives(blob_lives(g), reuse)
}
