//! The auditable stateless filter.
//!
//! A decision depends only on the rule set, the filter secret and the packet's
//! five-tuple. Probabilistic rules are executed by hashing the five-tuple with
//! the secret, so every packet of a flow gets the same verdict without any
//! per-flow state. Flows first seen under a probabilistic rule are queued and
//! periodically promoted to exact-match cache entries carrying the very same
//! verdict (the hybrid scheme).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::num::NonZeroU64;

use num_bigint::BigUint;
use num_traits::One;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::flow::{Action, FlowKey, Packet, Probability, RuleIndex, RuleSet, Verdict};
use crate::lookup::RuleTrie;
use crate::sketch::{CountMinSketch, KeyMode, SketchError, SketchParams};

/// Per-instance secret mixed into the flow hash. Never leaves the instance
/// through serialization.
#[derive(Clone, PartialEq, Eq)]
pub struct FilterSecret([u8; 32]);

impl FilterSecret {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub(crate) fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for FilterSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FilterSecret(..)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub matched_rule: RuleIndex,
}

/// `floor((2^256 - 1) * p)` as a big-endian 256-bit integer.
pub fn allow_threshold(p: Probability) -> [u8; 32] {
    let max = (BigUint::one() << 256u32) - BigUint::one();
    let t = max * BigUint::from(p.numer()) / BigUint::from(p.denom());
    let bytes = t.to_bytes_be();
    let mut out = [0u8; 32];
    out[32 - bytes.len()..].copy_from_slice(&bytes);
    out
}

pub fn flow_digest(secret: &FilterSecret, key: &FlowKey) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(key.to_bytes());
    h.update(secret.as_bytes());
    h.finalize().into()
}

/// ALLOW iff `SHA-256(key || secret) < floor((2^256 - 1) * p_allow)`, both
/// sides read as big-endian integers. Probabilities outside [0, 1] cannot be
/// constructed, see [`Probability::new`].
pub fn hash_decide(secret: &FilterSecret, key: &FlowKey, p_allow: Probability) -> Verdict {
    verdict_below(&flow_digest(secret, key), &allow_threshold(p_allow))
}

fn verdict_below(digest: &[u8; 32], threshold: &[u8; 32]) -> Verdict {
    // lexicographic order on equal-length big-endian arrays is numeric order
    if digest < threshold {
        Verdict::Allow
    } else {
        Verdict::Drop
    }
}

/// Affine memory model of the lookup table: `per_entry * entries + base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupCostModel {
    pub per_entry_bytes: u64,
    pub base_bytes: u64,
}

impl Default for LookupCostModel {
    fn default() -> Self {
        Self { per_entry_bytes: 30_000, base_bytes: 2_000_000 }
    }
}

impl LookupCostModel {
    pub fn table_size(&self, rules: &RuleSet, cache_entries: usize) -> u64 {
        self.size_for(rules.len() as u64 + cache_entries as u64)
    }

    pub fn size_for(&self, entries: u64) -> u64 {
        self.per_entry_bytes * entries + self.base_bytes
    }
}

/// Work counters, used to bound the per-packet cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub packets: u64,
    pub lookups: u64,
    pub hashes: u64,
    pub sketch_updates: u64,
}

#[derive(Debug, Clone)]
pub struct FilterInstance {
    ruleset: RuleSet,
    /// Global rule index of each local rule, for instances holding a subset.
    rule_ids: Vec<usize>,
    trie: RuleTrie,
    thresholds: Vec<Option<[u8; 32]>>,
    secret: FilterSecret,
    exact_cache: BTreeMap<FlowKey, Decision>,
    pending: Vec<(FlowKey, Decision)>,
    pending_keys: HashSet<FlowKey>,
    update_period: Option<NonZeroU64>,
    processed: u64,
    ops: OpCounters,
}

impl FilterInstance {
    /// `update_period` is the number of processed packets between batch
    /// insertions; `None` disables promotion.
    pub fn new(ruleset: RuleSet, secret: FilterSecret, update_period: Option<NonZeroU64>) -> Self {
        let ids = (0..ruleset.len()).collect();
        Self::with_rule_ids(ruleset, ids, secret, update_period)
    }

    pub fn with_rule_ids(
        ruleset: RuleSet,
        rule_ids: Vec<usize>,
        secret: FilterSecret,
        update_period: Option<NonZeroU64>,
    ) -> Self {
        assert_eq!(rule_ids.len(), ruleset.len(), "one global id per rule");
        let trie = RuleTrie::build(&ruleset);
        let thresholds = ruleset
            .rules()
            .iter()
            .map(|r| match r.action {
                Action::Probabilistic(p) => Some(allow_threshold(p)),
                Action::Deterministic(_) => None,
            })
            .collect();
        Self {
            ruleset,
            rule_ids,
            trie,
            thresholds,
            secret,
            exact_cache: BTreeMap::new(),
            pending: Vec::new(),
            pending_keys: HashSet::new(),
            update_period,
            processed: 0,
            ops: OpCounters::default(),
        }
    }

    pub fn ruleset(&self) -> &RuleSet {
        &self.ruleset
    }

    pub fn rule_ids(&self) -> &[usize] {
        &self.rule_ids
    }

    pub fn exact_cache(&self) -> &BTreeMap<FlowKey, Decision> {
        &self.exact_cache
    }

    pub fn pending_flows(&self) -> impl Iterator<Item = &FlowKey> {
        self.pending.iter().map(|(k, _)| k)
    }

    pub fn ops(&self) -> OpCounters {
        self.ops
    }

    /// Judges one packet. Only `p.key` is read.
    pub fn filter_packet(&mut self, p: &Packet) -> Decision {
        let decision = self.decide(&p.key);
        self.processed += 1;
        self.ops.packets += 1;
        if let Some(period) = self.update_period {
            if self.processed.is_multiple_of(period.get()) {
                self.batch_insert();
            }
        }
        decision
    }

    fn decide(&mut self, key: &FlowKey) -> Decision {
        self.ops.lookups += 1;
        if let Some(d) = self.exact_cache.get(key) {
            return *d;
        }
        let Some(local) = self.trie.first_match(&self.ruleset, key) else {
            return Decision { verdict: Verdict::Allow, matched_rule: RuleIndex::Default };
        };
        let matched_rule = RuleIndex::Rule(self.rule_ids[local]);
        match (self.ruleset.rules()[local].action, &self.thresholds[local]) {
            (Action::Deterministic(verdict), _) => Decision { verdict, matched_rule },
            (Action::Probabilistic(_), Some(threshold)) => {
                self.ops.hashes += 1;
                let verdict = verdict_below(&flow_digest(&self.secret, key), threshold);
                let decision = Decision { verdict, matched_rule };
                if self.pending_keys.insert(*key) {
                    self.pending.push((*key, decision));
                }
                decision
            }
            (Action::Probabilistic(_), None) => unreachable!("thresholds are built for every probabilistic rule"),
        }
    }

    /// Promotes every pending flow to an exact-match entry with its hash
    /// verdict. Returns the number of entries inserted.
    pub fn batch_insert(&mut self) -> usize {
        let n = self.pending.len();
        for (key, decision) in self.pending.drain(..) {
            self.exact_cache.insert(key, decision);
        }
        self.pending_keys.clear();
        n
    }

    pub fn table_size(&self, model: &LookupCostModel) -> u64 {
        model.table_size(&self.ruleset, self.exact_cache.len())
    }

    /// Deterministic export of the sealed state for tests: SHA-256 of the
    /// rule file, then the sorted cache entries. The secret is not included.
    pub fn sealed_export(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + self.exact_cache.len() * 18);
        let mut h = Sha256::new();
        h.update(self.ruleset.to_rule_file().as_bytes());
        for id in &self.rule_ids {
            h.update((*id as u64).to_be_bytes());
        }
        out.extend_from_slice(&h.finalize());
        out.extend_from_slice(&(self.exact_cache.len() as u64).to_be_bytes());
        for (key, d) in &self.exact_cache {
            out.extend_from_slice(&key.to_bytes());
            out.push(match d.verdict {
                Verdict::Allow => 1,
                Verdict::Drop => 0,
            });
            let idx = match d.matched_rule {
                RuleIndex::Rule(i) => i as u32,
                RuleIndex::Default => u32::MAX,
            };
            out.extend_from_slice(&idx.to_be_bytes());
        }
        out
    }
}

/// A filter instance together with its two accountable logs: incoming
/// traffic per source address and outgoing (allowed) traffic per five-tuple.
#[derive(Debug, Clone)]
pub struct SealedFilter {
    filter: FilterInstance,
    incoming: CountMinSketch,
    outgoing: CountMinSketch,
}

impl SealedFilter {
    pub fn new(filter: FilterInstance, incoming: SketchParams, outgoing: SketchParams) -> Self {
        assert_eq!(incoming.key_mode, KeyMode::PerSourceIp);
        assert_eq!(outgoing.key_mode, KeyMode::PerFiveTuple);
        Self { filter, incoming: CountMinSketch::new(incoming), outgoing: CountMinSketch::new(outgoing) }
    }

    pub fn process(&mut self, p: &Packet) -> Result<Decision, SketchError> {
        self.incoming.update(p)?;
        self.filter.ops.sketch_updates += 1;
        let d = self.filter.filter_packet(p);
        if d.verdict == Verdict::Allow {
            self.outgoing.update(p)?;
            self.filter.ops.sketch_updates += 1;
        }
        Ok(d)
    }

    pub fn filter(&self) -> &FilterInstance {
        &self.filter
    }

    pub fn filter_mut(&mut self) -> &mut FilterInstance {
        &mut self.filter
    }

    pub fn incoming(&self) -> &CountMinSketch {
        &self.incoming
    }

    pub fn outgoing(&self) -> &CountMinSketch {
        &self.outgoing
    }

    /// Hands out the closing round's logs and starts fresh ones.
    pub fn close_round(&mut self) -> (CountMinSketch, CountMinSketch) {
        let incoming = self.incoming.clone();
        let outgoing = self.outgoing.clone();
        self.incoming.reset();
        self.outgoing.reset();
        (incoming, outgoing)
    }

    pub fn into_filter(self) -> FilterInstance {
        self.filter
    }
}
