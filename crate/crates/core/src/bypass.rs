//! Log comparisons that expose packets dropped or injected around a filter,
//! plus the reroute test that localises a dropping AS between the filter and
//! the victim.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::routing::{compute_routes, AsGraph, AsId};
use crate::sketch::{BinDelta, CountMinSketch, KeyMode, SketchError};

#[derive(Debug, Error, PartialEq)]
pub enum BypassError {
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error("expected {expected:?} sketches")]
    KeyMode { expected: KeyMode },
    #[error("no policy-compliant path from AS {from} to AS {to}")]
    NoPath { from: AsId, to: AsId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictKind {
    Clean,
    InjectionAfter,
    DropAfter,
    DropBefore,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Victim,
    Neighbor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BypassVerdict {
    pub kind: VerdictKind,
    /// Every disagreeing bin; delta is the other party's count minus the
    /// filter's.
    pub evidence: Vec<BinDelta>,
    /// Attributed mass, averaged over rows (bytes, or packets for a
    /// packet-counting sketch).
    pub suspected_mass_bytes: u64,
    /// Surplus on the filter side of a neighbour check, averaged over rows.
    /// Injection before filtering is not an attack, so it is only reported.
    pub unattributed_mass_bytes: u64,
}

impl BypassVerdict {
    pub fn is_clean(&self) -> bool {
        self.kind == VerdictKind::Clean
    }
}

fn check_modes(a: &CountMinSketch, b: &CountMinSketch, expected: KeyMode) -> Result<(), BypassError> {
    if a.params().key_mode != expected || b.params().key_mode != expected {
        return Err(BypassError::KeyMode { expected });
    }
    Ok(())
}

fn mass(evidence: &[BinDelta], depth: usize, keep: impl Fn(i128) -> bool) -> u64 {
    let sum: u128 = evidence.iter().filter(|d| keep(d.delta)).map(|d| d.delta.unsigned_abs()).sum();
    u64::try_from(sum / depth.max(1) as u128).unwrap_or(u64::MAX)
}

/// Compares what the filter says it forwarded with what the victim received.
/// Victim surplus means injection after filtering, victim deficit means drops
/// after filtering.
pub fn victim_check(filter_outgoing: &CountMinSketch, victim_received: &CountMinSketch) -> Result<BypassVerdict, BypassError> {
    check_modes(filter_outgoing, victim_received, KeyMode::PerFiveTuple)?;
    let evidence = filter_outgoing.diff_report(victim_received)?;
    let surplus = evidence.iter().any(|d| d.delta > 0);
    let deficit = evidence.iter().any(|d| d.delta < 0);
    let kind = match (surplus, deficit) {
        (false, false) => VerdictKind::Clean,
        (true, false) => VerdictKind::InjectionAfter,
        (false, true) => VerdictKind::DropAfter,
        (true, true) => VerdictKind::Mixed,
    };
    let suspected_mass_bytes = mass(&evidence, filter_outgoing.depth(), |_| true);
    Ok(BypassVerdict { kind, evidence, suspected_mass_bytes, unattributed_mass_bytes: 0 })
}

/// Compares what a neighbour sent towards the filter with what the filter
/// saw arrive. A neighbour surplus means drops before filtering.
pub fn neighbor_check(filter_incoming: &CountMinSketch, neighbor_sent: &CountMinSketch) -> Result<BypassVerdict, BypassError> {
    check_modes(filter_incoming, neighbor_sent, KeyMode::PerSourceIp)?;
    let evidence = filter_incoming.diff_report(neighbor_sent)?;
    let dropped = evidence.iter().any(|d| d.delta > 0);
    let kind = match (dropped, evidence.is_empty()) {
        (_, true) => VerdictKind::Clean,
        (true, false) if evidence.iter().all(|d| d.delta > 0) => VerdictKind::DropBefore,
        _ => VerdictKind::Mixed,
    };
    let depth = filter_incoming.depth();
    Ok(BypassVerdict {
        kind,
        suspected_mass_bytes: mass(&evidence, depth, |d| d > 0),
        unattributed_mass_bytes: mass(&evidence, depth, |d| d < 0),
        evidence,
    })
}

/// One JSON-lines record of the verdict log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub round: u64,
    pub check: Check,
    pub kind: VerdictKind,
    pub mass_bytes: u64,
    pub bins: usize,
}

impl VerdictRecord {
    pub fn new(round: u64, check: Check, verdict: &BypassVerdict) -> Self {
        Self {
            round,
            check,
            kind: verdict.kind,
            mass_bytes: verdict.suspected_mass_bytes,
            bins: verdict.evidence.len(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }
}

/// Reroute test for drops between `filter_as` and `victim`.
///
/// Starting from the default path, every intermediate AS of every path that
/// showed drops is excluded in turn and the resulting path is observed with
/// `drops`. An AS is suspected when every observed path through it dropped
/// and some observed path avoiding it was clean; among those, ASes present
/// on every dropping path are preferred. If every observed path dropped, the
/// filtering network itself is blamed.
pub fn route_exclusion_test(
    graph: &AsGraph,
    victim: AsId,
    filter_as: AsId,
    drops: impl Fn(&[AsId]) -> bool,
) -> Result<BTreeSet<AsId>, BypassError> {
    let route = |excluded: BTreeSet<AsId>| compute_routes(graph, victim, &excluded).path(filter_as).map(<[AsId]>::to_vec);
    let default = route(BTreeSet::new()).ok_or(BypassError::NoPath { from: filter_as, to: victim })?;

    let mut observed: BTreeMap<Vec<AsId>, bool> = BTreeMap::new();
    let mut tried: BTreeSet<AsId> = BTreeSet::new();
    let mut queue = vec![default];
    while let Some(path) = queue.pop() {
        if observed.contains_key(&path) {
            continue;
        }
        let dropped = drops(&path);
        observed.insert(path.clone(), dropped);
        if !dropped {
            continue;
        }
        let mut inner: Vec<AsId> = path[1..path.len() - 1].to_vec();
        inner.sort_unstable();
        // reversed so the lowest AS number is explored first
        for a in inner.into_iter().rev() {
            if tried.insert(a) {
                if let Some(p) = route(BTreeSet::from([a])) {
                    queue.push(p);
                }
            }
        }
    }

    let dropping: Vec<&Vec<AsId>> = observed.iter().filter(|(_, &d)| d).map(|(p, _)| p).collect();
    if dropping.is_empty() {
        return Ok(BTreeSet::new());
    }
    if dropping.len() == observed.len() {
        return Ok(BTreeSet::from([filter_as]));
    }
    let inner = |p: &Vec<AsId>| -> BTreeSet<AsId> { p[1..p.len() - 1].iter().copied().collect() };
    let candidates: BTreeSet<AsId> = observed.keys().flat_map(inner).collect();
    let suspects: BTreeSet<AsId> = candidates
        .into_iter()
        .filter(|a| {
            let through_all_drop = observed.iter().filter(|(p, _)| p.contains(a)).all(|(_, &d)| d);
            let clean_detour = observed.iter().any(|(p, &d)| !d && !p.contains(a));
            through_all_drop && clean_detour
        })
        .collect();
    let common = dropping
        .iter()
        .map(|p| inner(p))
        .reduce(|acc, s| acc.intersection(&s).copied().collect())
        .unwrap_or_default();
    let narrowed: BTreeSet<AsId> = suspects.intersection(&common).copied().collect();
    Ok(if narrowed.is_empty() { suspects } else { narrowed })
}
