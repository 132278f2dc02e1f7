//! Several filter instances behind an untrusted load balancer.
//!
//! The balancer sends each packet to an instance holding the packet's first
//! matching rule. Instances report packets that match none of their rules,
//! and any overloaded instance can start a redistribution round in which it
//! collects every instance's rules and measured loads and computes a new
//! plan. Plans only change between rounds.

use std::collections::BTreeMap;
use std::num::NonZeroU64;
use std::sync::Arc;

use num_rational::{BigRational, Ratio};
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{enclave_count, greedy_solve_with, plan_objective, CapacityConfig, DistError, DistributionPlan, RuleLoad};
use crate::filter::{Decision, FilterInstance, FilterSecret, SealedFilter};
use crate::flow::{FlowKey, Packet, RuleIndex, RuleSet};
use crate::lookup::RuleTrie;
use crate::sketch::{splitmix64, CountMinSketch, KeyMode, SketchError, SketchParams};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("redistribution found no feasible plan with up to {0} instances")]
    NoPlan(usize),
    #[error("plan does not cover the rule set: {0}")]
    PlanMismatch(String),
}

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub capacity: CapacityConfig,
    /// Fraction of either capacity at which an instance asks for a round.
    pub trigger: Ratio<u64>,
    /// Simulated length of one round.
    pub round_ms: u64,
    /// How many instances beyond `enclave_count` a round may try.
    pub max_extra_enclaves: usize,
    /// Simulated delay for attesting newly started instances.
    pub attestation_ms: u64,
    pub update_period: Option<NonZeroU64>,
    pub dispatch_seed: u64,
    pub sketch_seed: u64,
    /// Run each instance on its own thread within a round.
    pub parallel: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            capacity: CapacityConfig::default(),
            trigger: Ratio::new(9, 10),
            round_ms: 1_000,
            max_extra_enclaves: 8,
            attestation_ms: 3_040,
            update_period: NonZeroU64::new(1_000),
            dispatch_seed: 0,
            sketch_seed: 0,
            parallel: true,
        }
    }
}

impl ClusterConfig {
    pub fn incoming_params(&self) -> SketchParams {
        SketchParams::default_for(self.sketch_seed, KeyMode::PerSourceIp)
    }

    pub fn outgoing_params(&self) -> SketchParams {
        SketchParams::default_for(self.sketch_seed ^ 0x5a5a_5a5a, KeyMode::PerFiveTuple)
    }
}

/// Picks instances for packets according to a plan.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    rules: RuleSet,
    trie: RuleTrie,
    /// Per global rule: (instance, cumulative share of the rule's traffic).
    choices: Vec<Vec<(usize, f64)>>,
    seed: u64,
    default_enclave: usize,
}

fn flow_hash(seed: u64, key: &FlowKey) -> u64 {
    let b = key.to_bytes();
    let w0 = u64::from_be_bytes(b[0..8].try_into().expect("8 bytes"));
    let mut w1 = 0u64;
    for &x in &b[8..] {
        w1 = (w1 << 8) | u64::from(x);
    }
    splitmix64(splitmix64(seed ^ w0) ^ w1)
}

impl Dispatcher {
    pub fn new(rules: &RuleSet, plan: &DistributionPlan, seed: u64) -> Self {
        let mut choices = vec![Vec::new(); rules.len()];
        for (i, &rule) in plan.rule_ids.iter().enumerate() {
            if rule >= rules.len() {
                continue;
            }
            let b = plan.bandwidth[i];
            let mut acc = 0.0;
            let mut list = Vec::new();
            for &j in &plan.installed[i] {
                if b == 0 {
                    list.push((j, 1.0));
                    break;
                }
                let share = plan.x(i, j).to_f64().unwrap_or(0.0) / b as f64;
                if share > 0.0 {
                    acc += share;
                    list.push((j, acc));
                }
            }
            if list.is_empty() {
                list.extend(plan.installed[i].first().map(|&j| (j, 1.0)));
            }
            if let Some(last) = list.last_mut() {
                last.1 = 1.0;
            }
            choices[rule] = list;
        }
        Self { rules: rules.clone(), trie: RuleTrie::build(rules), choices, seed, default_enclave: 0 }
    }

    /// Global index of the first rule matching `key`.
    pub fn matched_rule(&self, key: &FlowKey) -> Option<usize> {
        self.trie.first_match(&self.rules, key)
    }

    /// Instance for `p`. All packets of a flow go to the same instance;
    /// flows of a split rule spread according to its shares. Packets that
    /// match no rule go to instance 0.
    pub fn dispatch(&self, p: &Packet) -> usize {
        let Some(rule) = self.matched_rule(&p.key) else { return self.default_enclave };
        let list = &self.choices[rule];
        if list.len() <= 1 {
            return list.first().map_or(self.default_enclave, |c| c.0);
        }
        let u = (flow_hash(self.seed, &p.key) >> 11) as f64 / (1u64 << 53) as f64;
        list.iter().find(|(_, c)| u < *c).unwrap_or(list.last().expect("non-empty")).0
    }
}

/// Honest dispatch of a single packet under `plan`.
pub fn dispatch(rules: &RuleSet, plan: &DistributionPlan, p: &Packet, seed: u64) -> usize {
    Dispatcher::new(rules, plan, seed).dispatch(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisdispatchReport {
    pub enclave: usize,
    pub flow: FlowKey,
    pub round: u64,
}

/// Reported when an instance receives a packet whose first matching rule in
/// the full rule set is not installed on it. Packets that match no rule
/// belong to instance 0. `installed` must be sorted.
pub fn detect_misdispatch(
    enclave_id: usize,
    installed: &[usize],
    first_match: Option<usize>,
    p: &Packet,
    round: u64,
) -> Option<MisdispatchReport> {
    let ok = match first_match {
        Some(rule) => installed.binary_search(&rule).is_ok(),
        None => enclave_id == 0,
    };
    (!ok).then_some(MisdispatchReport { enclave: enclave_id, flow: p.key, round })
}

/// What an instance uploads when a round closes.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub enclave_id: usize,
    pub rules: RuleSet,
    /// Global index of each rule in `rules`.
    pub rule_ids: Vec<usize>,
    /// Bytes matched per rule during the round.
    pub measured_bytes: Vec<u64>,
}

impl FilterReport {
    pub fn total_bytes(&self) -> u64 {
        self.measured_bytes.iter().sum()
    }
}

/// Bits per second for `bytes` seen in `round_ms`.
pub fn bandwidth_bps(bytes: u64, round_ms: u64) -> u64 {
    let bps = u128::from(bytes) * 8 * 1000 / u128::from(round_ms.max(1));
    u64::try_from(bps).unwrap_or(u64::MAX)
}

/// Whether an instance is above the trigger fraction of its bandwidth or
/// rule capacity.
pub fn is_triggered(report: &FilterReport, cfg: &ClusterConfig) -> bool {
    let cap = &cfg.capacity;
    let (tn, td) = (u128::from(*cfg.trigger.numer()), u128::from(*cfg.trigger.denom()));
    let bw = u128::from(bandwidth_bps(report.total_bytes(), cfg.round_ms));
    let hot = bw * td > u128::from(cap.bandwidth_limit) * tn;
    // rules > trigger (M - v) / u
    let full = report.rules.len() as u128 * u128::from(cap.per_rule_bytes) * td
        > u128::from(cap.memory_limit - cap.base_bytes) * tn;
    hot || full
}

#[derive(Debug, Clone)]
pub struct RedistributionRound {
    pub round_id: u64,
    pub master: usize,
    pub triggers: Vec<usize>,
    pub n_before: usize,
    pub reports: Vec<FilterReport>,
    pub new_plan: DistributionPlan,
    pub z: BigRational,
}

/// Runs a redistribution round if any report crosses the trigger. The
/// lowest triggering instance acts as master: it merges every report into
/// per-rule loads and solves greedily, adding instances while no plan fits.
pub fn redistribute(round_id: u64, reports: &[FilterReport], cfg: &ClusterConfig) -> Result<Option<RedistributionRound>, ClusterError> {
    let triggers: Vec<usize> = reports.iter().filter(|r| is_triggered(r, cfg)).map(|r| r.enclave_id).collect();
    let Some(&master) = triggers.iter().min() else { return Ok(None) };
    let mut bytes: BTreeMap<usize, u64> = BTreeMap::new();
    for r in reports {
        for (&id, &b) in r.rule_ids.iter().zip(&r.measured_bytes) {
            *bytes.entry(id).or_default() += b;
        }
    }
    let loads: Vec<RuleLoad> =
        bytes.iter().map(|(&id, &b)| RuleLoad::new(id, bandwidth_bps(b, cfg.round_ms))).collect();
    let n0 = enclave_count(&loads, &cfg.capacity)?.n;
    for n in n0..=n0 + cfg.max_extra_enclaves {
        match greedy_solve_with(&loads, &cfg.capacity, n) {
            Ok(plan) => {
                let z = plan_objective(&plan, &cfg.capacity)?;
                return Ok(Some(RedistributionRound {
                    round_id,
                    master,
                    triggers,
                    n_before: reports.len(),
                    reports: reports.to_vec(),
                    new_plan: plan,
                    z,
                }));
            }
            Err(DistError::Infeasible) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(ClusterError::NoPlan(n0 + cfg.max_extra_enclaves))
}

/// JSON-lines record per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round_id: u64,
    pub master: Option<usize>,
    pub n_before: usize,
    pub n_after: usize,
    pub z: Option<f64>,
    pub triggers: Vec<usize>,
    pub misdispatch_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterDecision {
    pub enclave: usize,
    pub decision: Decision,
}

#[derive(Debug, Clone)]
pub struct RoundResult {
    /// One entry per input packet, in input order.
    pub decisions: Vec<ClusterDecision>,
    /// Round logs of all instances, merged.
    pub incoming: CountMinSketch,
    pub outgoing: CountMinSketch,
    pub misdispatches: Vec<MisdispatchReport>,
    /// Bytes the balancer sent per matched global rule.
    pub dispatched_bytes: BTreeMap<usize, u64>,
    pub reports: Vec<FilterReport>,
    pub redistribution: Option<RedistributionRound>,
    pub log: RoundLog,
}

type Override = Box<dyn FnMut(&Packet, usize) -> usize + Send>;

/// Every instance gets the full rule set from the master so it can tell
/// which rule a packet belongs to.
struct Global {
    rules: RuleSet,
    trie: RuleTrie,
}

struct Enclave {
    sealed: SealedFilter,
    global: Arc<Global>,
    measured: Vec<u64>,
    local_of: BTreeMap<usize, usize>,
}

impl Enclave {
    fn new(global: &Arc<Global>, plan: &DistributionPlan, j: usize, secret: &FilterSecret, cfg: &ClusterConfig) -> Self {
        let rules = &global.rules;
        let mut ids: Vec<usize> = (0..plan.k()).filter(|&i| plan.y(i, j)).map(|i| plan.rule_ids[i]).collect();
        ids.sort_unstable();
        let subset = RuleSet::new(ids.iter().map(|&g| rules.rules()[g]).collect()).expect("subset of a valid rule set");
        let filter = FilterInstance::with_rule_ids(subset, ids.clone(), secret.clone(), cfg.update_period);
        let local_of = ids.iter().enumerate().map(|(l, &g)| (g, l)).collect();
        Self {
            sealed: SealedFilter::new(filter, cfg.incoming_params(), cfg.outgoing_params()),
            global: Arc::clone(global),
            measured: vec![0; ids.len()],
            local_of,
        }
    }

    fn run(&mut self, id: usize, queue: &[(usize, Packet)], round: u64) -> Result<EnclaveOutput, SketchError> {
        let mut decisions = Vec::with_capacity(queue.len());
        let mut misdispatches = Vec::new();
        for (pos, p) in queue {
            let first = self.global.trie.first_match(&self.global.rules, &p.key);
            if let Some(r) = detect_misdispatch(id, self.sealed.filter().rule_ids(), first, p, round) {
                misdispatches.push(r);
            }
            let d = self.sealed.process(p)?;
            if let RuleIndex::Rule(g) = d.matched_rule {
                if let Some(&l) = self.local_of.get(&g) {
                    self.measured[l] += u64::from(p.size_bytes());
                }
            }
            decisions.push((*pos, d));
        }
        Ok(EnclaveOutput { decisions, misdispatches })
    }

    fn report(&mut self, id: usize) -> FilterReport {
        let f = self.sealed.filter();
        let r = FilterReport {
            enclave_id: id,
            rules: f.ruleset().clone(),
            rule_ids: f.rule_ids().to_vec(),
            measured_bytes: self.measured.clone(),
        };
        self.measured.iter_mut().for_each(|m| *m = 0);
        r
    }
}

struct EnclaveOutput {
    decisions: Vec<(usize, Decision)>,
    misdispatches: Vec<MisdispatchReport>,
}

pub struct Cluster {
    rules: RuleSet,
    global: Arc<Global>,
    secret: FilterSecret,
    cfg: ClusterConfig,
    plan: DistributionPlan,
    dispatcher: Dispatcher,
    enclaves: Vec<Enclave>,
    round: u64,
    clock_ms: u64,
    override_hook: Option<Override>,
}

impl Cluster {
    /// Starts from a plan computed with a nominal 1 bit/s per rule, so the
    /// first plan is driven by rule counts alone.
    pub fn new(rules: RuleSet, secret: FilterSecret, cfg: ClusterConfig) -> Result<Self, ClusterError> {
        let loads: Vec<RuleLoad> = (0..rules.len().max(1)).map(|i| RuleLoad::new(i, 1)).collect();
        let n = enclave_count(&loads, &cfg.capacity)?.n;
        let plan = if rules.is_empty() {
            DistributionPlan { n, rule_ids: vec![], bandwidth: vec![], shares: vec![], installed: vec![] }
        } else {
            greedy_solve_with(&loads, &cfg.capacity, n)?
        };
        Self::with_plan(rules, secret, plan, cfg)
    }

    pub fn with_plan(rules: RuleSet, secret: FilterSecret, plan: DistributionPlan, cfg: ClusterConfig) -> Result<Self, ClusterError> {
        let mut seen = vec![false; rules.len()];
        for &id in &plan.rule_ids {
            match seen.get_mut(id) {
                Some(s) if !*s => *s = true,
                _ => return Err(ClusterError::PlanMismatch(format!("rule id {id} is unknown or repeated"))),
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(ClusterError::PlanMismatch("some rules are not distributed".into()));
        }
        let dispatcher = Dispatcher::new(&rules, &plan, cfg.dispatch_seed);
        let global = Arc::new(Global { rules: rules.clone(), trie: RuleTrie::build(&rules) });
        let enclaves = (0..plan.n.max(1)).map(|j| Enclave::new(&global, &plan, j, &secret, &cfg)).collect();
        Ok(Self { rules, global, secret, cfg, plan, dispatcher, enclaves, round: 0, clock_ms: 0, override_hook: None })
    }

    pub fn plan(&self) -> &DistributionPlan {
        &self.plan
    }

    pub fn n(&self) -> usize {
        self.enclaves.len()
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn dispatcher(&self) -> &Dispatcher {
        &self.dispatcher
    }

    pub fn enclave(&self, j: usize) -> &SealedFilter {
        &self.enclaves[j].sealed
    }

    /// Replaces honest dispatch: the hook gets the packet and the honest
    /// choice and returns the instance to use.
    pub fn set_override(&mut self, hook: Option<Override>) {
        self.override_hook = hook;
    }

    /// Filters one round of packets, closes the round and, if an instance
    /// triggered, switches every instance and the balancer to a new plan
    /// before returning.
    pub fn run_round(&mut self, packets: &[Packet]) -> Result<RoundResult, ClusterError> {
        let n = self.enclaves.len();
        let mut queues: Vec<Vec<(usize, Packet)>> = vec![Vec::new(); n];
        let mut dispatched_bytes: BTreeMap<usize, u64> = BTreeMap::new();
        for (pos, p) in packets.iter().enumerate() {
            let honest = self.dispatcher.dispatch(p);
            let j = match self.override_hook.as_mut() {
                Some(hook) => hook(p, honest).min(n - 1),
                None => honest,
            };
            if let Some(rule) = self.dispatcher.matched_rule(&p.key) {
                *dispatched_bytes.entry(rule).or_default() += u64::from(p.size_bytes());
            }
            queues[j].push((pos, *p));
        }

        let round = self.round;
        let outputs: Vec<Result<EnclaveOutput, SketchError>> = if self.cfg.parallel && n > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .enclaves
                    .iter_mut()
                    .zip(&queues)
                    .enumerate()
                    .map(|(j, (e, q))| s.spawn(move || e.run(j, q, round)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("instance worker panicked")).collect()
            })
        } else {
            self.enclaves.iter_mut().zip(&queues).enumerate().map(|(j, (e, q))| e.run(j, q, round)).collect()
        };

        let mut slots: Vec<Option<ClusterDecision>> = vec![None; packets.len()];
        let mut misdispatches = Vec::new();
        for (j, out) in outputs.into_iter().enumerate() {
            let out = out?;
            for (pos, decision) in out.decisions {
                slots[pos] = Some(ClusterDecision { enclave: j, decision });
            }
            misdispatches.extend(out.misdispatches);
        }
        let decisions = slots.into_iter().map(|d| d.expect("every packet was processed")).collect();

        let mut incoming = CountMinSketch::new(self.cfg.incoming_params());
        let mut outgoing = CountMinSketch::new(self.cfg.outgoing_params());
        let mut reports = Vec::with_capacity(n);
        for (j, e) in self.enclaves.iter_mut().enumerate() {
            let (inc, out) = e.sealed.close_round();
            incoming = incoming.merge(&inc)?;
            outgoing = outgoing.merge(&out)?;
            reports.push(e.report(j));
        }

        self.clock_ms += self.cfg.round_ms;
        let redistribution = redistribute(round, &reports, &self.cfg)?;
        let mut log = RoundLog {
            round_id: round,
            master: None,
            n_before: n,
            n_after: n,
            z: None,
            triggers: Vec::new(),
            misdispatch_count: misdispatches.len(),
        };
        if let Some(r) = &redistribution {
            // barrier: the new plan applies from the next packet on
            let new_n = r.new_plan.n.max(1);
            if new_n > n {
                self.clock_ms += self.cfg.attestation_ms;
            }
            self.plan = r.new_plan.clone();
            self.dispatcher = Dispatcher::new(&self.rules, &self.plan, self.cfg.dispatch_seed);
            self.enclaves = (0..new_n).map(|j| Enclave::new(&self.global, &self.plan, j, &self.secret, &self.cfg)).collect();
            log.master = Some(r.master);
            log.n_after = new_n;
            log.z = r.z.to_f64();
            log.triggers = r.triggers.clone();
        }
        self.round += 1;
        Ok(RoundResult { decisions, incoming, outgoing, misdispatches, dispatched_bytes, reports, redistribution, log })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{Rate, BPS_PER_GBPS};
    use crate::flow::{Action, FilterRule, FlowSpec, Prefix, Probability, Verdict};
    use std::net::Ipv4Addr;

    fn rules(k: usize) -> RuleSet {
        let mut v: Vec<FilterRule> = (0..k)
            .map(|i| {
                let spec = FlowSpec { src: Prefix::new(Ipv4Addr::new(10, i as u8, 0, 0), 16).unwrap(), ..FlowSpec::ANY };
                FilterRule::new(spec, Action::Probabilistic(Probability::new(1, 2).unwrap()))
            })
            .collect();
        v.push(FilterRule::new(FlowSpec::ANY, Action::Deterministic(Verdict::Allow)));
        RuleSet::new(v).unwrap()
    }

    fn pkt(rule: usize, flow: u32, size: u32) -> Packet {
        let key = FlowKey::new(Ipv4Addr::new(10, rule as u8, (flow >> 8) as u8, flow as u8), Ipv4Addr::new(192, 0, 2, 1), 5000, 443, 6);
        Packet::new(key, size, u64::from(flow), u64::from(flow)).unwrap()
    }

    fn split_plan() -> DistributionPlan {
        // rule 0 split 50/50, rule 1 on instance 1
        DistributionPlan {
            n: 2,
            rule_ids: vec![0, 1],
            bandwidth: vec![2, 1],
            shares: vec![vec![(0, Rate::from_integer(1)), (1, Rate::from_integer(1))], vec![(1, Rate::from_integer(1))]],
            installed: vec![vec![0, 1], vec![1]],
        }
    }

    fn secret() -> FilterSecret {
        FilterSecret::from_bytes([7; 32])
    }

    #[test]
    fn single_owner_always_chosen() {
        let rs = rules(1);
        let d = Dispatcher::new(&rs, &split_plan(), 3);
        for f in 0..100 {
            assert_eq!(d.dispatch(&pkt(1, f, 60)), 1);
        }
        // without the catch-all some packets match nothing
        let narrow = RuleSet::new(rs.rules()[..1].to_vec()).unwrap();
        let plan = DistributionPlan {
            n: 2,
            rule_ids: vec![0],
            bandwidth: vec![1],
            shares: vec![vec![(1, Rate::from_integer(1))]],
            installed: vec![vec![1]],
        };
        let d = Dispatcher::new(&narrow, &plan, 3);
        assert_eq!(d.dispatch(&pkt(0, 0, 60)), 1);
        assert_eq!(d.dispatch(&pkt(9, 0, 60)), 0);
    }

    #[test]
    fn split_rule_spreads_evenly() {
        let rs = rules(1);
        let d = Dispatcher::new(&rs, &split_plan(), 3);
        let zero = (0..10_000).filter(|&f| d.dispatch(&pkt(0, f, 60)) == 0).count();
        assert!((zero as f64 / 10_000.0 - 0.5).abs() <= 0.03, "{zero}");
    }

    #[test]
    fn misdispatch_reports() {
        assert!(detect_misdispatch(1, &[0, 2], Some(2), &pkt(0, 1, 60), 0).is_none());
        let r = detect_misdispatch(1, &[0, 2], Some(1), &pkt(1, 1, 60), 5).unwrap();
        assert_eq!((r.enclave, r.round), (1, 5));
        // unmatched packets belong to instance 0
        assert!(detect_misdispatch(0, &[], None, &pkt(1, 1, 60), 0).is_none());
        assert!(detect_misdispatch(1, &[0, 2], None, &pkt(1, 1, 60), 0).is_some());
    }

    #[test]
    fn honest_rounds_have_no_misdispatch_and_conserve_bytes() {
        let rs = rules(6);
        // room for four rules per instance, so three instances stay below
        // the 90% rule-count trigger
        let cap = CapacityConfig { memory_limit: 2_000_000 + 4 * 30_000, ..CapacityConfig::default() };
        let cfg = ClusterConfig { capacity: cap, ..ClusterConfig::default() };
        let mut c = Cluster::new(rs, secret(), cfg).unwrap();
        assert!(c.n() >= 2);
        let packets: Vec<Packet> = (0..3_000).map(|i| pkt((i % 7) as usize, i, 100 + i % 50)).collect();
        let res = c.run_round(&packets).unwrap();
        assert!(res.misdispatches.is_empty());
        assert_eq!(res.decisions.len(), packets.len());
        let mut measured: BTreeMap<usize, u64> = BTreeMap::new();
        for r in &res.reports {
            for (&id, &b) in r.rule_ids.iter().zip(&r.measured_bytes) {
                *measured.entry(id).or_default() += b;
            }
        }
        measured.retain(|_, b| *b > 0);
        assert_eq!(measured, res.dispatched_bytes);
        assert!(res.redistribution.is_none());
    }

    #[test]
    fn decisions_match_a_single_filter() {
        let rs = rules(4);
        let cap = CapacityConfig { memory_limit: 2_000_000 + 2 * 30_000, ..CapacityConfig::default() };
        let mut c = Cluster::new(rs.clone(), secret(), ClusterConfig { capacity: cap, ..ClusterConfig::default() }).unwrap();
        let mut single = FilterInstance::new(rs, secret(), None);
        let packets: Vec<Packet> = (0..2_000).map(|i| pkt((i % 5) as usize, i % 300, 80)).collect();
        let res = c.run_round(&packets).unwrap();
        for (p, d) in packets.iter().zip(&res.decisions) {
            assert_eq!(single.filter_packet(p).verdict, d.decision.verdict);
        }
    }

    #[test]
    fn override_is_detected() {
        let rs = rules(3);
        let cap = CapacityConfig { memory_limit: 2_000_000 + 30_000, ..CapacityConfig::default() };
        let mut c = Cluster::new(rs, secret(), ClusterConfig { capacity: cap, ..ClusterConfig::default() }).unwrap();
        let n = c.n();
        assert!(n >= 2);
        c.set_override(Some(Box::new(move |p, honest| if p.payload_tag == 7 { (honest + 1) % n } else { honest })));
        let packets: Vec<Packet> = (0..20).map(|i| pkt(0, i, 60)).collect();
        let res = c.run_round(&packets).unwrap();
        assert_eq!(res.misdispatches.len(), 1);
        assert_eq!(res.misdispatches[0].flow, packets[7].key);
    }

    #[test]
    fn hot_instance_triggers_redistribution() {
        let rs = rules(3);
        // 10 ms rounds: 11,875 KB per round is 9.5 Gb/s
        let cfg = ClusterConfig { round_ms: 10, ..ClusterConfig::default() };
        let mut c = Cluster::new(rs, secret(), cfg).unwrap();
        assert_eq!(c.n(), 1);
        let packets: Vec<Packet> = (0..9_500).map(|i| pkt(0, i, 1_250)).collect();
        let res = c.run_round(&packets).unwrap();
        let round = res.redistribution.expect("trigger fired");
        assert_eq!(round.master, 0);
        assert!(c.n() >= 2);
        c.plan().validate(&c.config().capacity).unwrap();
        assert!(c.plan().max_load() <= Rate::from_integer(u128::from(10 * BPS_PER_GBPS)));
        assert!(c.clock_ms() >= 10 + 3_040);
        let quiet = c.run_round(&packets[..10]).unwrap();
        assert!(quiet.redistribution.is_none());
    }

    #[test]
    fn oversized_rule_is_split() {
        let rs = rules(2);
        let cfg = ClusterConfig { round_ms: 10, ..ClusterConfig::default() };
        let mut c = Cluster::new(rs, secret(), cfg).unwrap();
        // 15 Gb/s on rule 0
        let packets: Vec<Packet> = (0..15_000).map(|i| pkt(0, i, 1_250)).collect();
        c.run_round(&packets).unwrap();
        let plan = c.plan();
        plan.validate(&c.config().capacity).unwrap();
        let i = plan.rule_ids.iter().position(|&r| r == 0).unwrap();
        assert!(plan.installed[i].len() >= 2);
    }

    #[test]
    fn idle_cluster_never_triggers() {
        let mut c = Cluster::new(rules(3), secret(), ClusterConfig::default()).unwrap();
        for _ in 0..3 {
            let r = c.run_round(&[]).unwrap();
            assert!(r.redistribution.is_none());
        }
        assert_eq!(c.round(), 3);
    }
}
