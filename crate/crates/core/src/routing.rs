//! AS-level route simulation under Gao-Rexford policies.
//!
//! Routes prefer customer over peer over provider links, then shorter AS
//! paths, then the lower next-hop AS number. Routes learned from a peer or a
//! provider are exported only to customers.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::io::{BufRead, BufReader, Read};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub type AsId = u32;
pub type IxpId = u32;

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("AS {0} cannot have a relation with itself")]
    SelfEdge(AsId),
    #[error("AS {0} and AS {1} already have a relation")]
    DuplicateEdge(AsId, AsId),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    /// `a` is a customer of `b`.
    CustomerToProvider,
    Peer,
}

/// How `a` sees its neighbour `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Link {
    /// `b` is a customer of `a`.
    Customer,
    Peer,
    /// `b` is a provider of `a`.
    Provider,
}

#[derive(Debug, Clone, Default)]
struct Adjacency {
    customers: BTreeSet<AsId>,
    peers: BTreeSet<AsId>,
    providers: BTreeSet<AsId>,
}

#[derive(Debug, Clone, Default)]
pub struct AsGraph {
    adj: BTreeMap<AsId, Adjacency>,
    ixps: BTreeMap<IxpId, BTreeSet<AsId>>,
    ixp_regions: BTreeMap<IxpId, String>,
}

impl AsGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_as(&mut self, a: AsId) {
        self.adj.entry(a).or_default();
    }

    pub fn add_relation(&mut self, a: AsId, b: AsId, rel: Relation) -> Result<(), RouteError> {
        if a == b {
            return Err(RouteError::SelfEdge(a));
        }
        if self.link(a, b).is_some() {
            return Err(RouteError::DuplicateEdge(a, b));
        }
        match rel {
            Relation::CustomerToProvider => {
                self.adj.entry(a).or_default().providers.insert(b);
                self.adj.entry(b).or_default().customers.insert(a);
            }
            Relation::Peer => {
                self.adj.entry(a).or_default().peers.insert(b);
                self.adj.entry(b).or_default().peers.insert(a);
            }
        }
        Ok(())
    }

    pub fn add_ixp_member(&mut self, ixp: IxpId, a: AsId) {
        self.ixps.entry(ixp).or_default().insert(a);
    }

    pub fn set_ixp_region(&mut self, ixp: IxpId, region: &str) {
        self.ixp_regions.insert(ixp, region.to_string());
    }

    pub fn contains(&self, a: AsId) -> bool {
        self.adj.contains_key(&a)
    }

    pub fn nodes(&self) -> impl Iterator<Item = AsId> + '_ {
        self.adj.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn link(&self, a: AsId, b: AsId) -> Option<Link> {
        let adj = self.adj.get(&a)?;
        if adj.customers.contains(&b) {
            Some(Link::Customer)
        } else if adj.peers.contains(&b) {
            Some(Link::Peer)
        } else if adj.providers.contains(&b) {
            Some(Link::Provider)
        } else {
            None
        }
    }

    pub fn customers(&self, a: AsId) -> impl Iterator<Item = AsId> + '_ {
        self.adj.get(&a).into_iter().flat_map(|x| x.customers.iter().copied())
    }

    pub fn peers(&self, a: AsId) -> impl Iterator<Item = AsId> + '_ {
        self.adj.get(&a).into_iter().flat_map(|x| x.peers.iter().copied())
    }

    pub fn providers(&self, a: AsId) -> impl Iterator<Item = AsId> + '_ {
        self.adj.get(&a).into_iter().flat_map(|x| x.providers.iter().copied())
    }

    pub fn degree(&self, a: AsId) -> usize {
        self.adj.get(&a).map_or(0, |x| x.customers.len() + x.peers.len() + x.providers.len())
    }

    pub fn ixps(&self) -> &BTreeMap<IxpId, BTreeSet<AsId>> {
        &self.ixps
    }

    pub fn ixp_region(&self, ixp: IxpId) -> Option<&str> {
        self.ixp_regions.get(&ixp).map(String::as_str)
    }

    /// IXPs by member count, largest first; ties by id.
    pub fn ixps_by_size(&self) -> Vec<IxpId> {
        let mut ids: Vec<IxpId> = self.ixps.keys().copied().collect();
        ids.sort_by_key(|id| (Reverse(self.ixps[id].len()), *id));
        ids
    }

    /// The `top` largest IXPs, either overall or in each region separately.
    pub fn top_ixps(&self, top: usize, policy: RegionPolicy) -> BTreeSet<IxpId> {
        let ranked = self.ixps_by_size();
        match policy {
            RegionPolicy::Global => ranked.into_iter().take(top).collect(),
            RegionPolicy::PerRegion => {
                let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
                let mut out = BTreeSet::new();
                for id in ranked {
                    let region = self.ixp_region(id).unwrap_or("");
                    let n = taken.entry(region).or_default();
                    if *n < top {
                        *n += 1;
                        out.insert(id);
                    }
                }
                out
            }
        }
    }

    /// Reads CAIDA serial-1 style relations: `<as1>|<as2>|<rel>` with rel -1
    /// (as1 is a provider of as2) or 0 (peers). Extra fields are ignored.
    pub fn read_caida<R: Read>(&mut self, reader: R) -> Result<(), RouteError> {
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| RouteError::Parse { line: line_no, message };
            let mut parts = line.split('|');
            let (Some(a), Some(b), Some(rel)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err(format!("expected `as1|as2|rel`, got `{line}`")));
            };
            let a: AsId = a.trim().parse().map_err(|_| err(format!("bad AS number `{a}`")))?;
            let b: AsId = b.trim().parse().map_err(|_| err(format!("bad AS number `{b}`")))?;
            let res = match rel.trim() {
                "-1" => self.add_relation(b, a, Relation::CustomerToProvider),
                "0" => self.add_relation(a, b, Relation::Peer),
                other => return Err(err(format!("unknown relation `{other}`"))),
            };
            res.map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    /// Reads `<ixp_id>|<as_id>` membership lines. An optional third field
    /// names the IXP's region.
    pub fn read_ixps<R: Read>(&mut self, reader: R) -> Result<(), RouteError> {
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| RouteError::Parse { line: line_no, message };
            let fields: Vec<&str> = line.split('|').map(str::trim).collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(err(format!("expected `ixp|as[|region]`, got `{line}`")));
            }
            let ixp: IxpId = fields[0].parse().map_err(|_| err(format!("bad IXP id `{}`", fields[0])))?;
            let a: AsId = fields[1].parse().map_err(|_| err(format!("bad AS number `{}`", fields[1])))?;
            self.add_ixp_member(ixp, a);
            if let Some(region) = fields.get(2) {
                self.set_ixp_region(ixp, region);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionPolicy {
    Global,
    PerRegion,
}

impl std::fmt::Display for RegionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Global => "global",
            Self::PerRegion => "per-region",
        })
    }
}

impl std::str::FromStr for RegionPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "global" => Ok(Self::Global),
            "per-region" => Ok(Self::PerRegion),
            _ => Err(format!("unknown region policy `{s}` (expected global or per-region)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingOutcome {
    pub dest: AsId,
    /// Path from each AS to `dest`, both ends included.
    pub best_path: BTreeMap<AsId, Vec<AsId>>,
}

impl RoutingOutcome {
    pub fn path(&self, from: AsId) -> Option<&[AsId]> {
        self.best_path.get(&from).map(Vec::as_slice)
    }
}

/// True if consecutive links follow the pattern
/// `customer->provider* peer? provider->customer*`.
pub fn is_valley_free(graph: &AsGraph, path: &[AsId]) -> bool {
    // 0: still climbing, 1: descending
    let mut phase = 0;
    for w in path.windows(2) {
        match graph.link(w[0], w[1]) {
            None => return false,
            Some(Link::Provider) if phase == 0 => {}
            Some(Link::Peer) if phase == 0 => phase = 1,
            Some(Link::Customer) => phase = 1,
            _ => return false,
        }
    }
    true
}

/// Best policy-compliant path from every AS to `dest`, ignoring `excluded`.
pub fn compute_routes(graph: &AsGraph, dest: AsId, excluded: &BTreeSet<AsId>) -> RoutingOutcome {
    let mut best: BTreeMap<AsId, Vec<AsId>> = BTreeMap::new();
    if !graph.contains(dest) || excluded.contains(&dest) {
        return RoutingOutcome { dest, best_path: best };
    }
    let usable = |a: AsId| !excluded.contains(&a);
    best.insert(dest, vec![dest]);

    // customer routes: breadth first up the provider links
    let mut frontier = vec![dest];
    while !frontier.is_empty() {
        let mut next: BTreeMap<AsId, AsId> = BTreeMap::new();
        for &c in &frontier {
            for p in graph.providers(c).filter(|&p| usable(p) && !best.contains_key(&p)) {
                let hop = next.entry(p).or_insert(c);
                *hop = (*hop).min(c);
            }
        }
        for (&p, &c) in &next {
            let mut path = vec![p];
            path.extend_from_slice(&best[&c]);
            best.insert(p, path);
        }
        frontier = next.into_keys().collect();
    }

    // peer routes: one peer hop onto a customer route
    let mut peer_routes: BTreeMap<AsId, Vec<AsId>> = BTreeMap::new();
    for a in graph.nodes().filter(|&a| usable(a) && !best.contains_key(&a)) {
        let choice = graph
            .peers(a)
            .filter_map(|q| best.get(&q).map(|path| (path.len(), q)))
            .min();
        if let Some((_, q)) = choice {
            let mut path = vec![a];
            path.extend_from_slice(&best[&q]);
            peer_routes.insert(a, path);
        }
    }
    best.extend(peer_routes);

    // provider routes: shortest first down the customer links
    let mut heap: BinaryHeap<Reverse<(usize, AsId)>> = best.iter().map(|(&a, p)| Reverse((p.len(), a))).collect();
    let mut settled: BTreeSet<AsId> = BTreeSet::new();
    let mut tentative: BTreeMap<AsId, (usize, AsId)> = BTreeMap::new();
    while let Some(Reverse((len, a))) = heap.pop() {
        if !settled.insert(a) {
            continue;
        }
        if let Some(&(_, via)) = tentative.get(&a) {
            let mut path = vec![a];
            path.extend_from_slice(&best[&via]);
            best.insert(a, path);
        }
        for c in graph.customers(a).filter(|&c| usable(c) && !best.contains_key(&c) && !settled.contains(&c)) {
            let cand = (len + 1, a);
            let slot = tentative.entry(c).or_insert(cand);
            if cand < *slot {
                *slot = cand;
            }
            heap.push(Reverse((len + 1, c)));
        }
    }
    RoutingOutcome { dest, best_path: best }
}

/// True if some pair of consecutive ASes on `path` are both members of one of
/// `ixps`.
pub fn crosses_ixp(graph: &AsGraph, path: &[AsId], ixps: &BTreeSet<IxpId>) -> bool {
    path.windows(2).any(|w| {
        ixps.iter().any(|id| graph.ixps().get(id).is_some_and(|m| m.contains(&w[0]) && m.contains(&w[1])))
    })
}

/// Share of `sources` (a multiset) whose best path to `victim` crosses one
/// of `ixps`. Sources without a route count as not covered.
pub fn ixp_coverage(graph: &AsGraph, victim: AsId, sources: &[AsId], ixps: &BTreeSet<IxpId>) -> f64 {
    if sources.is_empty() || ixps.is_empty() {
        return 0.0;
    }
    let routes = compute_routes(graph, victim, &BTreeSet::new());
    coverage_with_routes(graph, &routes, sources, ixps)
}

/// [`ixp_coverage`] with precomputed routes towards the victim.
pub fn coverage_with_routes(graph: &AsGraph, routes: &RoutingOutcome, sources: &[AsId], ixps: &BTreeSet<IxpId>) -> f64 {
    if sources.is_empty() {
        return 0.0;
    }
    let covered = sources
        .iter()
        .filter(|&&s| routes.path(s).is_some_and(|p| crosses_ixp(graph, p, ixps)))
        .count();
    covered as f64 / sources.len() as f64
}

/// The default path plus the best paths found when each intermediate AS of
/// the default path is excluded in turn (ascending AS number), deduplicated.
pub fn alternative_paths(graph: &AsGraph, src: AsId, dst: AsId) -> BTreeSet<Vec<AsId>> {
    let mut out = BTreeSet::new();
    let default = compute_routes(graph, dst, &BTreeSet::new());
    let Some(path) = default.path(src) else { return out };
    let path = path.to_vec();
    let mut intermediates: Vec<AsId> = path[1..path.len().saturating_sub(1)].to_vec();
    intermediates.sort_unstable();
    out.insert(path);
    for a in intermediates {
        let routes = compute_routes(graph, dst, &BTreeSet::from([a]));
        if let Some(p) = routes.path(src) {
            out.insert(p.to_vec());
        }
    }
    out
}

pub fn alternative_path_count(graph: &AsGraph, src: AsId, dst: AsId) -> usize {
    alternative_paths(graph, src, dst).len()
}

/// Preferential-attachment topology with ASes `1..=n`. The first `core`
/// ASes form a peering clique; every later AS buys transit from one or two
/// earlier ASes chosen by degree, and occasionally peers with another one.
/// Provider links always point to older ASes, so the hierarchy is acyclic.
pub fn synthetic_topology(n: usize, seed: u64) -> AsGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = AsGraph::new();
    let core = n.clamp(1, 4);
    for a in 1..=core as AsId {
        g.add_as(a);
        for b in 1..a {
            g.add_relation(a, b, Relation::Peer).expect("fresh pair");
        }
    }
    // one entry per link end, for degree-proportional sampling
    let mut ends: Vec<AsId> = (1..=core as AsId).flat_map(|a| std::iter::repeat_n(a, core)).collect();
    for a in core as AsId + 1..=n as AsId {
        g.add_as(a);
        let want = if rng.random_bool(0.4) { 2 } else { 1 };
        let mut got = 0;
        for _ in 0..10 {
            let &p = ends.choose(&mut rng).expect("non-empty");
            if g.add_relation(a, p, Relation::CustomerToProvider).is_ok() {
                ends.push(p);
                ends.push(a);
                got += 1;
                if got == want {
                    break;
                }
            }
        }
        if a > 8 && rng.random_bool(0.2) {
            let q = rng.random_range(core as AsId + 1..a);
            if g.add_relation(a, q, Relation::Peer).is_ok() {
                ends.push(q);
                ends.push(a);
            }
        }
    }
    g
}

/// Adds `count` IXPs whose members are drawn by degree. IXP sizes fall off
/// with rank; regions are assigned round robin from `regions`.
pub fn synthetic_ixps(graph: &mut AsGraph, count: usize, regions: &[&str], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<AsId> = graph.nodes().collect();
    if nodes.is_empty() {
        return;
    }
    let weighted: Vec<AsId> = nodes.iter().flat_map(|&a| std::iter::repeat_n(a, graph.degree(a).max(1))).collect();
    let next_id = graph.ixps().keys().next_back().map_or(1, |m| m + 1);
    for i in 0..count {
        let id = next_id + i as IxpId;
        let size = (nodes.len() / (12 * (i + 1))).max(2);
        for _ in 0..size * 3 {
            let &a = weighted.choose(&mut rng).expect("non-empty");
            graph.add_ixp_member(id, a);
            if graph.ixps()[&id].len() >= size {
                break;
            }
        }
        if !regions.is_empty() {
            graph.set_ixp_region(id, regions[i % regions.len()]);
        }
    }
}

/// Box-plot summary with linearly interpolated quantiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxStats {
    pub count: usize,
    pub min: f64,
    pub p5: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub p95: f64,
    pub max: f64,
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_stats(values: &[f64]) -> BoxStats {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    BoxStats {
        count: v.len(),
        min: quantile(&v, 0.0),
        p5: quantile(&v, 0.05),
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        p95: quantile(&v, 0.95),
        max: quantile(&v, 1.0),
    }
}
