//! Traffic generation and a misbehaving filtering network around a cluster
//! of sealed filters.
//!
//! The adversary controls everything outside the filters: it may reorder,
//! delay, drop or inject packets before they reach the filters, drop or
//! inject packets after them, and steer packets to the wrong instance. The
//! neighbour logs what it sends, the victim logs what it receives, and the
//! two checks run at every round close. Ground truth is recorded next to the
//! verdicts but never fed to them.

use std::collections::{BTreeMap, HashSet};
use std::net::Ipv4Addr;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bypass::{neighbor_check, victim_check, BypassError, BypassVerdict, Check, VerdictRecord};
use crate::cluster::{Cluster, ClusterConfig, ClusterError, MisdispatchReport, RoundLog};
use crate::distribution::CapacityConfig;
use crate::filter::{Decision, FilterSecret};
use crate::flow::{FlowError, FlowKey, Packet, Prefix, RuleSet, Verdict};
use crate::sketch::{CountMinSketch, SketchError};

/// Tags of packets the adversary creates have this bit set.
pub const INJECTED_TAG: u64 = 1 << 63;

#[derive(Debug, Error)]
pub enum AdversaryError {
    #[error("invalid traffic profile: {0}")]
    Profile(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Bypass(#[from] BypassError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("scenario file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PacketsPerFlow {
    Constant { packets: u32 },
    /// Number of trials up to and including the first success; mean 1/p.
    Geometric { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SizeDistribution {
    Constant { bytes: u32 },
    /// Inclusive on both ends.
    Uniform { min: u32, max: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySpace {
    pub src: Vec<Prefix>,
    pub dst: Vec<Prefix>,
    pub dst_ports: Vec<u16>,
    pub protocols: Vec<u8>,
}

impl Default for KeySpace {
    fn default() -> Self {
        Self {
            src: vec![Prefix::new(Ipv4Addr::new(10, 0, 0, 0), 8).expect("valid prefix")],
            dst: vec![Prefix::new(Ipv4Addr::new(192, 0, 2, 0), 24).expect("valid prefix")],
            dst_ports: vec![53, 80, 443],
            protocols: vec![6, 17],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficProfile {
    pub flow_count: usize,
    pub packets_per_flow: PacketsPerFlow,
    pub sizes: SizeDistribution,
    #[serde(default)]
    pub key_space: KeySpace,
    pub seed: u64,
}

fn pick_addr(rng: &mut ChaCha8Rng, pool: &[Prefix]) -> Ipv4Addr {
    let p = pool[rng.random_range(0..pool.len())];
    let host_bits = 32 - u32::from(p.len());
    let host = if host_bits == 0 { 0 } else { rng.random::<u32>() & (u32::MAX >> (32 - host_bits)) };
    Ipv4Addr::from(p.bits() | host)
}

/// Expands a profile into a trace. Flows have distinct keys, packets of all
/// flows are interleaved at random, and both `arrival_index` and
/// `payload_tag` equal the packet's position.
pub fn generate(profile: &TrafficProfile) -> Result<Vec<Packet>, AdversaryError> {
    let ks = &profile.key_space;
    if ks.src.is_empty() || ks.dst.is_empty() || ks.dst_ports.is_empty() || ks.protocols.is_empty() {
        return Err(AdversaryError::Profile("every key-space pool needs at least one entry".into()));
    }
    let geometric = match profile.packets_per_flow {
        PacketsPerFlow::Constant { packets: 0 } => return Err(AdversaryError::Profile("flows need at least one packet".into())),
        PacketsPerFlow::Constant { .. } => None,
        PacketsPerFlow::Geometric { p } if !(p > 0.0 && p <= 1.0) => {
            return Err(AdversaryError::Profile(format!("geometric p = {p} is outside (0, 1]")))
        }
        PacketsPerFlow::Geometric { p } => {
            Some(Geometric::new(p).map_err(|e| AdversaryError::Profile(format!("geometric p = {p}: {e}")))?)
        }
    };
    match profile.sizes {
        SizeDistribution::Constant { bytes: 0 } => return Err(AdversaryError::Profile("packet size must be positive".into())),
        SizeDistribution::Uniform { min, max } if min == 0 || min > max => {
            return Err(AdversaryError::Profile(format!("bad size range [{min}, {max}]")))
        }
        _ => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut seen = HashSet::with_capacity(profile.flow_count);
    let mut packets: Vec<(FlowKey, u32)> = Vec::new();
    for _ in 0..profile.flow_count {
        let mut tries = 0;
        let key = loop {
            let key = FlowKey::new(
                pick_addr(&mut rng, &ks.src),
                pick_addr(&mut rng, &ks.dst),
                rng.random_range(1024..=u16::MAX),
                ks.dst_ports[rng.random_range(0..ks.dst_ports.len())],
                ks.protocols[rng.random_range(0..ks.protocols.len())],
            );
            if seen.insert(key) {
                break key;
            }
            tries += 1;
            if tries > 1_000 {
                return Err(AdversaryError::Profile("key space too small for the flow count".into()));
            }
        };
        let count = match (profile.packets_per_flow, &geometric) {
            (PacketsPerFlow::Constant { packets }, _) => u64::from(packets),
            (_, Some(g)) => g.sample(&mut rng).saturating_add(1),
            (_, None) => unreachable!(),
        };
        for _ in 0..count {
            let size = match profile.sizes {
                SizeDistribution::Constant { bytes } => bytes,
                SizeDistribution::Uniform { min, max } => rng.random_range(min..=max),
            };
            packets.push((key, size));
        }
    }
    packets.shuffle(&mut rng);
    packets
        .into_iter()
        .enumerate()
        .map(|(i, (key, size))| Packet::new(key, size, i as u64, i as u64).map_err(Into::into))
        .collect()
}

/// Predicate over a packet as the adversary sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selector {
    All,
    Tags { tags: Vec<u64> },
    Flow { key: FlowKey },
    Source { prefix: Prefix },
    /// `payload_tag % modulus == residue`.
    TagModulo { modulus: u64, residue: u64 },
}

impl Selector {
    pub fn matches(&self, p: &Packet) -> bool {
        match self {
            Selector::All => true,
            Selector::Tags { tags } => tags.contains(&p.payload_tag),
            Selector::Flow { key } => p.key == *key,
            Selector::Source { prefix } => prefix.contains(p.key.src_ip),
            Selector::TagModulo { modulus, residue } => *modulus > 0 && p.payload_tag % modulus == *residue,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Injection {
    /// A fabricated packet.
    Packet { key: FlowKey, size_bytes: u32 },
    /// Replays up to `limit` packets the filters dropped.
    Dropped { selector: Selector, limit: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AdversaryAction {
    /// Shuffles consecutive windows of `window` packets before the filters.
    ReorderWindow { window: usize },
    /// Holds matching packets back by `amount` positions, within the round.
    Delay { selector: Selector, amount: u64 },
    /// Adds packets in front of the filters that no neighbour sent.
    InjectBefore { key: FlowKey, size_bytes: u32, count: u32, round: u64 },
    DropBefore { selector: Selector },
    DropAfter { selector: Selector },
    InjectAfter { packet: Injection, round: u64 },
    MisdispatchTo { enclave: usize, selector: Selector },
}

impl AdversaryAction {
    /// Whether the action only changes order or timing.
    pub fn is_reordering(&self) -> bool {
        matches!(self, AdversaryAction::ReorderWindow { .. } | AdversaryAction::Delay { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryScript {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub actions: Vec<AdversaryAction>,
}

/// Cluster settings as they appear in scenario files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub secret_seed: u64,
    pub memory_limit_bytes: u64,
    pub bandwidth_limit_bps: u64,
    pub round_ms: u64,
    /// Packets between cache promotions; 0 disables promotion.
    pub update_period: u64,
    pub dispatch_seed: u64,
    pub sketch_seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        let cap = CapacityConfig::default();
        let cfg = ClusterConfig::default();
        Self {
            secret_seed: 0,
            memory_limit_bytes: cap.memory_limit,
            bandwidth_limit_bps: cap.bandwidth_limit,
            round_ms: cfg.round_ms,
            update_period: cfg.update_period.map_or(0, |p| p.get()),
            dispatch_seed: cfg.dispatch_seed,
            sketch_seed: cfg.sketch_seed,
        }
    }
}

impl ClusterSpec {
    pub fn config(&self) -> ClusterConfig {
        ClusterConfig {
            capacity: CapacityConfig {
                memory_limit: self.memory_limit_bytes,
                bandwidth_limit: self.bandwidth_limit_bps,
                ..CapacityConfig::default()
            },
            round_ms: self.round_ms,
            update_period: std::num::NonZeroU64::new(self.update_period),
            dispatch_seed: self.dispatch_seed,
            sketch_seed: self.sketch_seed,
            // one thread per scenario keeps runs reproducible and lets
            // independent scenarios run side by side
            parallel: false,
            ..ClusterConfig::default()
        }
    }

    pub fn secret(&self) -> FilterSecret {
        FilterSecret::random(&mut ChaCha8Rng::seed_from_u64(self.secret_seed))
    }
}

/// Byte and packet counts of what the adversary actually did in a round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dropped_before_bytes: u64,
    pub injected_before_bytes: u64,
    pub dropped_after_bytes: u64,
    pub injected_after_bytes: u64,
    pub misdispatched_packets: u64,
    pub reordered: bool,
}

impl GroundTruth {
    pub fn after_events(&self) -> bool {
        self.dropped_after_bytes > 0 || self.injected_after_bytes > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundSketches {
    pub filter_incoming: CountMinSketch,
    pub filter_outgoing: CountMinSketch,
    pub victim: CountMinSketch,
    pub neighbor: CountMinSketch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: u64,
    pub victim: BypassVerdict,
    pub neighbor: BypassVerdict,
    pub truth: GroundTruth,
    pub log: RoundLog,
    #[serde(skip)]
    pub sketches: Option<RoundSketches>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketDecision {
    pub tag: u64,
    pub flow: FlowKey,
    pub round: u64,
    pub enclave: usize,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub rounds: Vec<RoundOutcome>,
    /// Decisions for packets of the input trace, by tag.
    pub decisions: Vec<PacketDecision>,
    /// Decisions for packets injected before the filters.
    pub injected_decisions: Vec<PacketDecision>,
    pub misdispatches: Vec<MisdispatchReport>,
}

impl ScenarioReport {
    pub fn decision_map(&self) -> BTreeMap<u64, Decision> {
        self.decisions.iter().map(|d| (d.tag, d.decision)).collect()
    }

    pub fn all_clean(&self) -> bool {
        self.misdispatches.is_empty() && self.rounds.iter().all(|r| r.victim.is_clean() && r.neighbor.is_clean())
    }

    pub fn verdict_records(&self) -> Vec<VerdictRecord> {
        self.rounds
            .iter()
            .flat_map(|r| [VerdictRecord::new(r.round, Check::Victim, &r.victim), VerdictRecord::new(r.round, Check::Neighbor, &r.neighbor)])
            .collect()
    }
}

fn reorder(packets: &mut [Packet], window: usize, rng: &mut ChaCha8Rng) {
    if window < 2 {
        return;
    }
    for chunk in packets.chunks_mut(window) {
        chunk.shuffle(rng);
    }
}

fn delay(packets: &mut Vec<Packet>, selector: &Selector, amount: u64) {
    let len = packets.len() as u64;
    let mut keyed: Vec<(u64, Packet)> = packets
        .drain(..)
        .enumerate()
        .map(|(pos, mut p)| {
            let pos = pos as u64;
            if selector.matches(&p) {
                p.arrival_index = p.arrival_index.saturating_add(amount);
                (2 * (pos + amount).min(len) + 1, p)
            } else {
                (2 * pos, p)
            }
        })
        .collect();
    keyed.sort_by_key(|(k, _)| *k);
    packets.extend(keyed.into_iter().map(|(_, p)| p));
}

/// Runs `trace` through a cluster in `rounds` equal rounds of consecutive
/// packets while the script misbehaves around it.
pub fn run_scenario(
    trace: &[Packet],
    rules: &RuleSet,
    script: &AdversaryScript,
    cluster: &ClusterSpec,
    rounds: usize,
) -> Result<ScenarioReport, AdversaryError> {
    if rounds == 0 {
        return Err(AdversaryError::Scenario("at least one round is needed".into()));
    }
    let cfg = cluster.config();
    let mut c = Cluster::new(rules.clone(), cluster.secret(), cfg.clone())?;
    let misdispatch: Vec<(usize, Selector)> = script
        .actions
        .iter()
        .filter_map(|a| match a {
            AdversaryAction::MisdispatchTo { enclave, selector } => Some((*enclave, selector.clone())),
            _ => None,
        })
        .collect();
    if !misdispatch.is_empty() {
        c.set_override(Some(Box::new(move |p: &Packet, honest: usize| {
            misdispatch.iter().find(|(_, s)| s.matches(p)).map_or(honest, |(j, _)| *j)
        })));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let mut next_injected = INJECTED_TAG;
    let mut replay_budget: Vec<usize> = script
        .actions
        .iter()
        .map(|a| match a {
            AdversaryAction::InjectAfter { packet: Injection::Dropped { limit, .. }, .. } => *limit,
            _ => 0,
        })
        .collect();

    let per_round = trace.len().div_ceil(rounds).max(1);
    let mut report = ScenarioReport { rounds: Vec::new(), decisions: Vec::new(), injected_decisions: Vec::new(), misdispatches: Vec::new() };
    for round in 0..rounds as u64 {
        let start = (round as usize * per_round).min(trace.len());
        let end = (start + per_round).min(trace.len());
        let original = &trace[start..end];
        let mut truth = GroundTruth::default();

        let mut neighbor = CountMinSketch::new(cfg.incoming_params());
        for p in original {
            neighbor.update(p)?;
        }

        let mut inbound: Vec<Packet> = original.to_vec();
        for action in &script.actions {
            match action {
                AdversaryAction::ReorderWindow { window } => {
                    reorder(&mut inbound, *window, &mut rng);
                    truth.reordered = true;
                }
                AdversaryAction::Delay { selector, amount } => {
                    delay(&mut inbound, selector, *amount);
                    truth.reordered = true;
                }
                AdversaryAction::DropBefore { selector } => inbound.retain(|p| {
                    let hit = selector.matches(p);
                    if hit {
                        truth.dropped_before_bytes += u64::from(p.size_bytes());
                    }
                    !hit
                }),
                AdversaryAction::InjectBefore { key, size_bytes, count, round: r } if *r == round => {
                    for _ in 0..*count {
                        let at = rng.random_range(0..=inbound.len());
                        let p = Packet::new(*key, *size_bytes, next_injected, next_injected)?;
                        next_injected += 1;
                        truth.injected_before_bytes += u64::from(*size_bytes);
                        inbound.insert(at, p);
                    }
                }
                _ => {}
            }
        }

        let result = c.run_round(&inbound)?;
        truth.misdispatched_packets = result.misdispatches.len() as u64;

        let mut outbound = Vec::new();
        let mut dropped = Vec::new();
        for (p, d) in inbound.iter().zip(&result.decisions) {
            let rec = PacketDecision { tag: p.payload_tag, flow: p.key, round, enclave: d.enclave, decision: d.decision };
            if p.payload_tag & INJECTED_TAG != 0 {
                report.injected_decisions.push(rec);
            } else {
                report.decisions.push(rec);
            }
            match d.decision.verdict {
                Verdict::Allow => outbound.push(*p),
                Verdict::Drop => dropped.push(*p),
            }
        }
        for (idx, action) in script.actions.iter().enumerate() {
            match action {
                AdversaryAction::DropAfter { selector } => outbound.retain(|p| {
                    let hit = selector.matches(p);
                    if hit {
                        truth.dropped_after_bytes += u64::from(p.size_bytes());
                    }
                    !hit
                }),
                AdversaryAction::InjectAfter { packet: Injection::Packet { key, size_bytes }, round: r } if *r == round => {
                    let p = Packet::new(*key, *size_bytes, next_injected, next_injected)?;
                    next_injected += 1;
                    truth.injected_after_bytes += u64::from(*size_bytes);
                    outbound.push(p);
                }
                AdversaryAction::InjectAfter { packet: Injection::Dropped { selector, .. }, .. } => {
                    for p in dropped.iter().filter(|p| selector.matches(p)) {
                        if replay_budget[idx] == 0 {
                            break;
                        }
                        replay_budget[idx] -= 1;
                        truth.injected_after_bytes += u64::from(p.size_bytes());
                        outbound.push(*p);
                    }
                }
                _ => {}
            }
        }

        let mut victim = CountMinSketch::new(cfg.outgoing_params());
        for p in &outbound {
            victim.update(p)?;
        }
        let victim_verdict = victim_check(&result.outgoing, &victim)?;
        let neighbor_verdict = neighbor_check(&result.incoming, &neighbor)?;
        report.misdispatches.extend(result.misdispatches);
        report.rounds.push(RoundOutcome {
            round,
            victim: victim_verdict,
            neighbor: neighbor_verdict,
            truth,
            log: result.log,
            sketches: Some(RoundSketches { filter_incoming: result.incoming, filter_outgoing: result.outgoing, victim, neighbor }),
        });
    }
    report.decisions.sort_by_key(|d| d.tag);
    Ok(report)
}

/// A scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub profile: TrafficProfile,
    /// Rule file, relative to the scenario file.
    #[serde(default)]
    pub rules_path: Option<String>,
    /// Rule file text, used when `rules_path` is absent.
    #[serde(default)]
    pub rules: Option<String>,
    #[serde(default)]
    pub script: AdversaryScript,
    #[serde(default)]
    pub cluster: ClusterSpec,
    #[serde(default = "one")]
    pub rounds: usize,
}

fn one() -> usize {
    1
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self, AdversaryError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Loads the rule set; `base` is the directory of the scenario file.
    pub fn load_rules(&self, base: &Path) -> Result<RuleSet, AdversaryError> {
        match (&self.rules_path, &self.rules) {
            (Some(path), _) => Ok(RuleSet::parse(&std::fs::read_to_string(base.join(path))?)?),
            (None, Some(text)) => Ok(RuleSet::parse(text)?),
            (None, None) => Err(AdversaryError::Scenario("either rules_path or rules is required".into())),
        }
    }

    pub fn run(&self, base: &Path) -> Result<ScenarioReport, AdversaryError> {
        let rules = self.load_rules(base)?;
        let trace = generate(&self.profile)?;
        run_scenario(&trace, &rules, &self.script, &self.cluster, self.rounds)
    }
}
