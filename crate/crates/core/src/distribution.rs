//! Distribution of filter rules and their bandwidth over several filter
//! instances.
//!
//! A plan assigns every rule `i` to a set of instances (`y[i][j]`) and splits
//! its measured bandwidth `b_i` into shares `x[i][j]`. Instance `j` then costs
//! `C_j = u * rules_j + v` bytes of table memory and carries `I_j = sum_i
//! x[i][j]`. Plans are scored by `z = alpha * max_j C_j / M + max_j I_j / G`,
//! i.e. the two maxima normalised by the per-instance limits.
//!
//! Bandwidths are integers in bits per second. Shares are exact rationals
//! because the optimal split of a rule can be fractional.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{Read, Write};

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::{BigRational, Ratio};
use num_traits::{ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BPS_PER_GBPS: u64 = 1_000_000_000;

/// Instances the exhaustive solver accepts.
pub const EXACT_MAX_RULES: usize = 16;
pub const EXACT_MAX_INSTANCES: usize = 4;

/// Exact rational rate in bits per second.
pub type Rate = Ratio<u128>;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("at least one rule is required")]
    EmptyInstance,
    #[error("invalid capacity configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("no feasible distribution")]
    Infeasible,
    #[error("instance too large for exhaustive search (k = {k}, n = {n})")]
    TooLarge { k: usize, n: usize },
    #[error("plan violates constraints: {}", .0.join("; "))]
    InvalidPlan(Vec<String>),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleLoad {
    pub rule_id: usize,
    pub bandwidth_bps: u64,
}

impl RuleLoad {
    pub fn new(rule_id: usize, bandwidth_bps: u64) -> Self {
        Self { rule_id, bandwidth_bps }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityConfig {
    /// Per-instance table memory limit M, bytes.
    pub memory_limit: u64,
    /// Per-instance bandwidth limit G, bits per second.
    pub bandwidth_limit: u64,
    /// Bytes per installed rule (u).
    pub per_rule_bytes: u64,
    /// Fixed table overhead (v).
    pub base_bytes: u64,
    /// Extra instances as a fraction of the minimum (lambda).
    pub lambda: Ratio<u64>,
    /// Weight of the memory term in the objective (alpha).
    pub alpha: Ratio<u64>,
    /// Greedy bandwidth quota step; `None` means G / 20.
    pub delta_g: Option<u64>,
    /// Greedy rule-count step; `None` means max(1, ceil(k / (10 n))).
    pub delta_h: Option<usize>,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self {
            memory_limit: 92_000_000,
            bandwidth_limit: 10 * BPS_PER_GBPS,
            per_rule_bytes: 30_000,
            base_bytes: 2_000_000,
            lambda: Ratio::new(1, 4),
            alpha: Ratio::from_integer(1),
            delta_g: None,
            delta_h: None,
        }
    }
}

impl CapacityConfig {
    pub fn validate(&self) -> Result<(), DistError> {
        if self.memory_limit <= self.base_bytes {
            return Err(DistError::InvalidConfig("memory limit must exceed the fixed overhead"));
        }
        if self.bandwidth_limit == 0 {
            return Err(DistError::InvalidConfig("bandwidth limit must be positive"));
        }
        if self.per_rule_bytes == 0 {
            return Err(DistError::InvalidConfig("per-rule memory must be positive"));
        }
        Ok(())
    }

    /// Most rules one instance can hold: floor((M - v) / u).
    pub fn max_rules_per_instance(&self) -> usize {
        ((self.memory_limit - self.base_bytes) / self.per_rule_bytes) as usize
    }

    pub fn memory_cost(&self, rules: usize) -> u64 {
        self.per_rule_bytes * rules as u64 + self.base_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnclaveCount {
    pub n_min: usize,
    pub n: usize,
}

fn big(v: u64) -> BigInt {
    BigInt::from(v)
}

fn ceil_to_usize(r: &BigRational) -> usize {
    r.ceil().to_integer().to_usize().expect("instance count fits in usize")
}

/// `n_min = ceil(max(sum b / G, k u / (M - v)))` and `n = ceil(max(..) (1 + lambda))`.
pub fn enclave_count(loads: &[RuleLoad], cfg: &CapacityConfig) -> Result<EnclaveCount, DistError> {
    cfg.validate()?;
    if loads.is_empty() {
        return Err(DistError::EmptyInstance);
    }
    let total: u128 = loads.iter().map(|l| u128::from(l.bandwidth_bps)).sum();
    let bw_term = BigRational::new(BigInt::from(total), big(cfg.bandwidth_limit));
    let mem_term = BigRational::new(
        BigInt::from(loads.len()) * big(cfg.per_rule_bytes),
        big(cfg.memory_limit - cfg.base_bytes),
    );
    let m = bw_term.max(mem_term);
    let lambda = BigRational::new(big(*cfg.lambda.numer()), big(*cfg.lambda.denom()));
    let scaled = &m * (BigRational::from_integer(BigInt::from(1)) + lambda);
    Ok(EnclaveCount { n_min: ceil_to_usize(&m), n: ceil_to_usize(&scaled) })
}

/// A distribution of `k` rules over `n` instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistributionPlan {
    pub n: usize,
    pub rule_ids: Vec<usize>,
    /// b_i, bits per second.
    pub bandwidth: Vec<u64>,
    /// Non-zero or explicitly listed x[i][j] entries per rule.
    pub shares: Vec<Vec<(usize, Rate)>>,
    /// Instances each rule is installed on (y[i][j] = 1), ascending.
    pub installed: Vec<Vec<usize>>,
}

impl DistributionPlan {
    pub fn k(&self) -> usize {
        self.rule_ids.len()
    }

    pub fn x(&self, i: usize, j: usize) -> Rate {
        self.shares[i].iter().filter(|(e, _)| *e == j).map(|(_, r)| *r).sum()
    }

    pub fn y(&self, i: usize, j: usize) -> bool {
        self.installed[i].binary_search(&j).is_ok()
    }

    pub fn loads(&self) -> Vec<Rate> {
        let mut out = vec![Rate::zero(); self.n];
        for shares in &self.shares {
            for (j, r) in shares {
                if *j < self.n {
                    out[*j] += r;
                }
            }
        }
        out
    }

    pub fn rule_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.n];
        for inst in &self.installed {
            for &j in inst {
                if j < self.n {
                    out[j] += 1;
                }
            }
        }
        out
    }

    /// Every broken constraint, checked only from the plan's own data.
    pub fn violations(&self, cfg: &CapacityConfig) -> Vec<String> {
        let mut out = Vec::new();
        let k = self.k();
        if self.bandwidth.len() != k || self.shares.len() != k || self.installed.len() != k {
            out.push("per-rule vectors have different lengths".to_string());
            return out;
        }
        for i in 0..k {
            if self.installed[i].is_empty() {
                out.push(format!("rule {} is not installed anywhere", self.rule_ids[i]));
            }
            if self.installed[i].windows(2).any(|w| w[0] >= w[1]) {
                out.push(format!("rule {} has an unsorted or repeated install list", self.rule_ids[i]));
            }
            let mut sum = Rate::zero();
            for (j, r) in &self.shares[i] {
                if *j >= self.n || self.installed[i].iter().any(|e| *e >= self.n) {
                    out.push(format!("rule {} refers to instance {} of {}", self.rule_ids[i], j, self.n));
                    continue;
                }
                if !r.is_zero() && !self.y(i, *j) {
                    out.push(format!("rule {} has a share on instance {} where it is not installed", self.rule_ids[i], j));
                }
                sum += r;
            }
            if sum != Rate::from_integer(u128::from(self.bandwidth[i])) {
                out.push(format!("rule {} shares sum to {} instead of {}", self.rule_ids[i], sum, self.bandwidth[i]));
            }
        }
        let limit = Rate::from_integer(u128::from(cfg.bandwidth_limit));
        for (j, load) in self.loads().iter().enumerate() {
            if *load > limit {
                out.push(format!("instance {j} carries {load} bps, above {}", cfg.bandwidth_limit));
            }
        }
        for (j, count) in self.rule_counts().iter().enumerate() {
            if cfg.memory_cost(*count) > cfg.memory_limit {
                out.push(format!("instance {j} holds {count} rules, above the memory limit"));
            }
        }
        out
    }

    pub fn validate(&self, cfg: &CapacityConfig) -> Result<(), DistError> {
        let v = self.violations(cfg);
        if v.is_empty() {
            Ok(())
        } else {
            Err(DistError::InvalidPlan(v))
        }
    }

    pub fn max_memory_cost(&self, cfg: &CapacityConfig) -> u64 {
        self.rule_counts().into_iter().map(|c| cfg.memory_cost(c)).max().unwrap_or(cfg.base_bytes)
    }

    pub fn max_load(&self) -> Rate {
        self.loads().into_iter().max().unwrap_or_else(Rate::zero)
    }

    pub fn summary(&self, cfg: &CapacityConfig) -> PlanSummary {
        let feasible = self.violations(cfg).is_empty();
        PlanSummary {
            n: self.n,
            z: plan_objective(self, cfg).ok().and_then(|z| z.to_f64()),
            max_c: self.max_memory_cost(cfg),
            max_i: self.max_load().to_f64().unwrap_or(f64::NAN) / BPS_PER_GBPS as f64,
            feasible,
        }
    }

    /// `rule_id,enclave,xshare_gbps` rows for every installed (rule, instance).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rule_id,enclave,xshare_gbps\n");
        for i in 0..self.k() {
            for &j in &self.installed[i] {
                let _ = writeln!(out, "{},{},{}", self.rule_ids[i], j, format_gbps(&self.x(i, j)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub n: usize,
    pub z: Option<f64>,
    #[serde(rename = "max_C")]
    pub max_c: u64,
    /// Gb/s.
    #[serde(rename = "max_I")]
    pub max_i: f64,
    pub feasible: bool,
}

/// `z = alpha * max_j C_j / M + max_j I_j / G` for a feasible plan.
pub fn plan_objective(plan: &DistributionPlan, cfg: &CapacityConfig) -> Result<BigRational, DistError> {
    plan.validate(cfg)?;
    let alpha = BigRational::new(big(*cfg.alpha.numer()), big(*cfg.alpha.denom()));
    let mem = BigRational::new(big(plan.max_memory_cost(cfg)), big(cfg.memory_limit));
    let max_i = plan.max_load();
    let load = BigRational::new(BigInt::from(*max_i.numer()), BigInt::from(*max_i.denom()))
        / BigRational::from_integer(big(cfg.bandwidth_limit));
    Ok(alpha * mem + load)
}

// ---------------------------------------------------------------------------
// Exhaustive solver
// ---------------------------------------------------------------------------

/// Loads in the exact search are scaled by 12 = lcm(1..=4) so that every
/// subset average `sum / |S|` with |S| <= 4 is an integer.
const SCALE: u128 = 12;

struct Search<'a> {
    n: usize,
    h: usize,
    /// Rule bandwidths in search order, already scaled.
    b: Vec<u128>,
    order: &'a [usize],
    global_lb: u128,
    counts: Vec<usize>,
    masks: Vec<u8>,
    mask_sum: [u128; 16],
    budget: usize,
    best: u128,
    best_masks: Option<Vec<u8>>,
    nodes: u64,
}

impl Search<'_> {
    /// Minimum achievable max load for the rules placed so far:
    /// max over instance subsets S of (bandwidth confined to S) / |S|.
    fn partial_bound(&self) -> u128 {
        let full = 1usize << self.n;
        let mut sub = self.mask_sum;
        for bit in 0..self.n {
            for s in 0..full {
                if s & (1 << bit) != 0 {
                    sub[s] += sub[s ^ (1 << bit)];
                }
            }
        }
        (1..full).map(|s| sub[s] / u128::from((s as u32).count_ones())).max().unwrap_or(0)
    }

    fn run(&mut self, idx: usize) {
        self.nodes += 1;
        if self.best == self.global_lb {
            return;
        }
        let bound = self.partial_bound().max(self.global_lb);
        if bound >= self.best {
            return;
        }
        if idx == self.b.len() {
            self.best = bound;
            self.best_masks = Some(self.masks.clone());
            return;
        }
        let remaining = self.b.len() - idx;
        let free: usize = self.counts.iter().map(|c| self.h - c).sum();
        if free < remaining {
            return;
        }
        // singles first, least loaded instance first; then larger sets
        let mut candidates: Vec<u8> = (1u8..(1 << self.n)).collect();
        let single_load = |m: u8| -> u128 {
            let j = m.trailing_zeros() as usize;
            self.mask_sum[1 << j]
        };
        candidates.sort_by_key(|&m| (m.count_ones(), if m.count_ones() == 1 { single_load(m) } else { 0 }, m));
        let empties: Vec<usize> = (0..self.n).filter(|&j| self.counts[j] == 0).collect();
        for m in candidates {
            let extra = m.count_ones() as usize - 1;
            if extra > self.budget {
                continue;
            }
            if (0..self.n).any(|j| m & (1 << j) != 0 && self.counts[j] >= self.h) {
                continue;
            }
            // empty instances are interchangeable: only use a prefix of them
            let used_empty = empties.iter().filter(|&&j| m & (1 << j) != 0).count();
            if empties.iter().take(used_empty).any(|&j| m & (1 << j) == 0) {
                continue;
            }
            for j in 0..self.n {
                if m & (1 << j) != 0 {
                    self.counts[j] += 1;
                }
            }
            self.masks[idx] = m;
            self.mask_sum[m as usize] += self.b[idx];
            self.budget -= extra;
            self.run(idx + 1);
            self.budget += extra;
            self.mask_sum[m as usize] -= self.b[idx];
            for j in 0..self.n {
                if m & (1 << j) != 0 {
                    self.counts[j] -= 1;
                }
            }
            if self.best == self.global_lb {
                return;
            }
        }
        let _ = self.order;
    }
}

/// Splits each rule's bandwidth over its instances so that no instance exceeds
/// `cap_scaled / 12`. Returns scaled flows per rule, or `None` if the caps
/// cannot carry everything.
fn route_shares(b_scaled: &[u128], masks: &[u8], n: usize, cap_scaled: u128) -> Option<Vec<Vec<(usize, u128)>>> {
    // nodes: 0 source, 1..=k rules, k+1..=k+n instances, k+n+1 sink
    let k = b_scaled.len();
    let size = k + n + 2;
    let sink = size - 1;
    let mut cap = vec![vec![0u128; size]; size];
    for i in 0..k {
        cap[0][1 + i] = b_scaled[i];
        for j in 0..n {
            if masks[i] & (1 << j) != 0 {
                cap[1 + i][1 + k + j] = u128::MAX / 4;
            }
        }
    }
    for j in 0..n {
        cap[1 + k + j][sink] = cap_scaled;
    }
    let original = cap.clone();
    let mut flow_total = 0u128;
    loop {
        // BFS augmenting path
        let mut prev = vec![usize::MAX; size];
        prev[0] = 0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for v in 0..size {
                if prev[v] == usize::MAX && cap[u][v] > 0 {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[sink] == usize::MAX {
            break;
        }
        let mut push = u128::MAX;
        let mut v = sink;
        while v != 0 {
            push = push.min(cap[prev[v]][v]);
            v = prev[v];
        }
        let mut v = sink;
        while v != 0 {
            cap[prev[v]][v] -= push;
            cap[v][prev[v]] += push;
            v = prev[v];
        }
        flow_total += push;
    }
    if flow_total != b_scaled.iter().sum::<u128>() {
        return None;
    }
    Some(
        (0..k)
            .map(|i| {
                (0..n)
                    .filter(|&j| masks[i] & (1 << j) != 0)
                    .map(|j| (j, original[1 + i][1 + k + j] - cap[1 + i][1 + k + j]))
                    .collect()
            })
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub z: BigRational,
    pub plan: DistributionPlan,
    /// Search nodes visited, for diagnostics.
    pub nodes: u64,
}

/// Globally optimal plan on `n` instances by exhaustive branch and bound.
///
/// For a fixed installation matrix the best split is known in closed form
/// (the worst instance subset average), so only installations are searched.
/// Searching is restricted to installations whose rule/instance graph has at
/// most `k + n - 1` edges; an optimal split always exists on such a support.
/// The outer loop runs over the largest per-instance rule count `h`.
pub fn exact_solve(loads: &[RuleLoad], cfg: &CapacityConfig, n: usize) -> Result<ExactSolution, DistError> {
    cfg.validate()?;
    let k = loads.len();
    if k == 0 {
        return Err(DistError::EmptyInstance);
    }
    if n == 0 || k > EXACT_MAX_RULES || n > EXACT_MAX_INSTANCES {
        return Err(DistError::TooLarge { k, n });
    }
    let hcap = cfg.max_rules_per_instance().min(k);
    let total: u128 = loads.iter().map(|l| u128::from(l.bandwidth_bps)).sum();
    if hcap * n < k || total > u128::from(cfg.bandwidth_limit) * n as u128 {
        return Err(DistError::Infeasible);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(loads[i].bandwidth_bps), loads[i].rule_id));
    let b: Vec<u128> = order.iter().map(|&i| u128::from(loads[i].bandwidth_bps) * SCALE).collect();
    let global_lb = total * SCALE / n as u128;
    let g_scaled = u128::from(cfg.bandwidth_limit) * SCALE;

    let alpha = BigRational::new(big(*cfg.alpha.numer()), big(*cfg.alpha.denom()));
    let mem_term = |h: usize| alpha.clone() * BigRational::new(big(cfg.memory_cost(h)), big(cfg.memory_limit));
    let load_term = |l_scaled: u128| {
        BigRational::new(BigInt::from(l_scaled), BigInt::from(g_scaled))
    };

    let mut best: Option<(BigRational, DistributionPlan)> = None;
    let mut incumbent = g_scaled + 1;
    let mut nodes = 0u64;
    for h in k.div_ceil(n)..=hcap {
        if let Some((z, _)) = &best {
            if mem_term(h) + load_term(global_lb) >= *z {
                break;
            }
        }
        let mut search = Search {
            n,
            h,
            b: b.clone(),
            order: &order,
            global_lb,
            counts: vec![0; n],
            masks: vec![0; k],
            mask_sum: [0; 16],
            budget: n - 1,
            best: incumbent,
            best_masks: None,
            nodes: 0,
        };
        search.run(0);
        nodes += search.nodes;
        let Some(masks) = search.best_masks else { continue };
        incumbent = search.best;
        let flows = route_shares(&b, &masks, n, search.best).expect("bound is achievable by construction");
        let plan = assemble_plan(loads, &order, n, &flows);
        let z = plan_objective(&plan, cfg)?;
        if best.as_ref().is_none_or(|(bz, _)| z < *bz) {
            best = Some((z, plan));
        }
        if incumbent == global_lb {
            // larger h can only add memory cost
            break;
        }
    }
    let (z, plan) = best.ok_or(DistError::Infeasible)?;
    Ok(ExactSolution { z, plan, nodes })
}

fn assemble_plan(loads: &[RuleLoad], order: &[usize], n: usize, flows: &[Vec<(usize, u128)>]) -> DistributionPlan {
    let k = loads.len();
    let mut shares = vec![Vec::new(); k];
    let mut installed = vec![Vec::new(); k];
    for (pos, &i) in order.iter().enumerate() {
        for &(j, f) in &flows[pos] {
            installed[i].push(j);
            shares[i].push((j, Rate::new(f, SCALE)));
        }
    }
    DistributionPlan {
        n,
        rule_ids: loads.iter().map(|l| l.rule_id).collect(),
        bandwidth: loads.iter().map(|l| l.bandwidth_bps).collect(),
        shares,
        installed,
    }
}

// ---------------------------------------------------------------------------
// Greedy solver
// ---------------------------------------------------------------------------

/// Greedy plan on the instance count given by [`enclave_count`].
pub fn greedy_solve(loads: &[RuleLoad], cfg: &CapacityConfig) -> Result<DistributionPlan, DistError> {
    let count = enclave_count(loads, cfg)?;
    greedy_solve_with(loads, cfg, count.n)
}

/// The (g, h) pairs the greedy search may try: per-instance bandwidth quotas
/// from the balanced share up to G in steps of `delta_g`, and rule budgets
/// from `ceil(k / n)` up to the memory bound in steps of `delta_h`.
pub fn quota_grid(loads: &[RuleLoad], cfg: &CapacityConfig, n: usize) -> Vec<(u64, usize)> {
    let k = loads.len();
    let total: u128 = loads.iter().map(|l| u128::from(l.bandwidth_bps)).sum();
    let g0 = u64::try_from(total.div_ceil(n as u128)).unwrap_or(u64::MAX);
    // more than k installs per instance never helps
    let hcap = cfg.max_rules_per_instance().min(k);
    let dg = cfg.delta_g.unwrap_or(cfg.bandwidth_limit / 20).max(1);
    let dh = cfg.delta_h.unwrap_or_else(|| k.div_ceil(10 * n).max(1)).max(1);
    let mut out = Vec::new();
    let mut h = k.div_ceil(n);
    while h <= hcap {
        let mut g = g0;
        while g <= cfg.bandwidth_limit {
            out.push((g, h));
            g = g.saturating_add(dg);
        }
        // clamp so the largest admissible budget is always tried
        h = if h < hcap { (h + dh).min(hcap) } else { h + 1 };
    }
    out
}

/// Tries [`assign_bandwidth`] on the quota grid, cheapest objective bound
/// `alpha C(h) / M + g / G` first, and returns the first plan that places
/// every rule.
pub fn greedy_solve_with(loads: &[RuleLoad], cfg: &CapacityConfig, n: usize) -> Result<DistributionPlan, DistError> {
    cfg.validate()?;
    if loads.is_empty() {
        return Err(DistError::EmptyInstance);
    }
    if n == 0 {
        return Err(DistError::Infeasible);
    }
    let mut grid = quota_grid(loads, cfg, n);
    // bound * M * G * alpha.denom, compared exactly
    let (an, ad) = (u128::from(*cfg.alpha.numer()), u128::from(*cfg.alpha.denom()));
    let key = |&(g, h): &(u64, usize)| {
        an * u128::from(cfg.memory_cost(h)) * u128::from(cfg.bandwidth_limit)
            + ad * u128::from(g) * u128::from(cfg.memory_limit)
    };
    grid.sort_by_key(|c| (key(c), c.1, c.0));
    grid.into_iter().find_map(|(g, h)| assign_bandwidth(loads, h, g, n)).ok_or(DistError::Infeasible)
}

fn largest(pool: &BTreeSet<(u64, usize, usize)>) -> Option<(u64, usize, usize)> {
    let &(max_bw, _, _) = pool.last()?;
    // lowest rule id among the largest remaining rules
    pool.range((max_bw, 0, 0)..).next().copied()
}

/// One placement pass for quota `g` and rule budget `h` per instance.
///
/// Each instance keeps one slot for a final top-off. The other slots take the
/// largest remaining rule while it leaves room for the smallest ones in the
/// slots after it, and the smallest rule otherwise; filling stops once the
/// chosen rule no longer fits the remaining quota. The top-off slot then takes
/// the largest remaining rule, split if it does not fit. Ties pick the lowest
/// rule id. Returns `None` if rules are left over after the last instance.
pub fn assign_bandwidth(loads: &[RuleLoad], h: usize, g: u64, n: usize) -> Option<DistributionPlan> {
    let k = loads.len();
    // (remaining bandwidth, rule id, position)
    let mut pool: BTreeSet<(u64, usize, usize)> =
        loads.iter().enumerate().map(|(i, l)| (l.bandwidth_bps, l.rule_id, i)).collect();
    let mut shares: Vec<Vec<(usize, Rate)>> = vec![Vec::new(); k];
    let mut j = 0;
    while !pool.is_empty() && j < n && h > 0 {
        let mut room = g;
        let mut count = 0usize;
        while count + 1 < h {
            let (Some(&(min_bw, min_id, min_pos)), Some(max)) = (pool.first(), largest(&pool)) else { break };
            let after = (h - count - 2) as u64;
            let pick = if max.0 < room && max.0.saturating_add(after.saturating_mul(min_bw)) <= room {
                max
            } else {
                (min_bw, min_id, min_pos)
            };
            if pick.0 >= room {
                break;
            }
            pool.remove(&pick);
            shares[pick.2].push((j, Rate::from_integer(u128::from(pick.0))));
            count += 1;
            room -= pick.0;
        }
        if room > 0 {
            if let Some((bw, id, pos)) = largest(&pool) {
                pool.remove(&(bw, id, pos));
                if bw <= room {
                    shares[pos].push((j, Rate::from_integer(u128::from(bw))));
                } else {
                    shares[pos].push((j, Rate::from_integer(u128::from(room))));
                    pool.insert((bw - room, id, pos));
                }
            }
        }
        j += 1;
    }
    if !pool.is_empty() {
        return None;
    }
    let installed = shares.iter().map(|s| s.iter().map(|(j, _)| *j).collect()).collect();
    Some(DistributionPlan {
        n,
        rule_ids: loads.iter().map(|l| l.rule_id).collect(),
        bandwidth: loads.iter().map(|l| l.bandwidth_bps).collect(),
        shares,
        installed,
    })
}

// ---------------------------------------------------------------------------
// Instances and I/O
// ---------------------------------------------------------------------------

/// `k` rules whose bandwidths follow a lognormal distribution (mu = 0,
/// given sigma), scaled to `total_bps` exactly.
pub fn synthetic_loads(k: usize, total_bps: u64, sigma: f64, seed: u64) -> Vec<RuleLoad> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = LogNormal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    let raw: Vec<f64> = (0..k).map(|_| dist.sample(&mut rng)).collect();
    let sum: f64 = raw.iter().sum();
    let mut bw: Vec<u64> = raw.iter().map(|r| (r / sum * total_bps as f64).floor() as u64).collect();
    let assigned: u64 = bw.iter().sum();
    if let Some(max) = (0..k).max_by_key(|&i| (bw[i], std::cmp::Reverse(i))) {
        bw[max] += total_bps.saturating_sub(assigned);
    }
    bw.into_iter().enumerate().map(|(i, b)| RuleLoad::new(i + 1, b)).collect()
}

/// Parses a non-negative decimal Gb/s value into bits per second exactly.
pub fn parse_gbps(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if (int.is_empty() && frac.is_empty()) || frac.len() > 9 {
        return Err(format!("invalid bandwidth `{s}`"));
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return Err(format!("invalid bandwidth `{s}`"));
    }
    let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| format!("invalid bandwidth `{s}`"))? };
    let mut frac_digits = frac.to_string();
    while frac_digits.len() < 9 {
        frac_digits.push('0');
    }
    let frac: u64 = frac_digits.parse().map_err(|_| format!("invalid bandwidth `{s}`"))?;
    int.checked_mul(BPS_PER_GBPS)
        .and_then(|v| v.checked_add(frac))
        .ok_or_else(|| format!("bandwidth `{s}` is too large"))
}

/// Gb/s with nine decimals (bit-per-second resolution, rounded half up).
pub fn format_gbps(rate: &Rate) -> String {
    let (q, r) = rate.numer().div_rem(rate.denom());
    let bps = if r * 2 >= *rate.denom() && !r.is_zero() { q + 1 } else { q };
    format!("{}.{:09}", bps / u128::from(BPS_PER_GBPS), bps % u128::from(BPS_PER_GBPS))
}

#[derive(Debug, Deserialize, Serialize)]
struct InstanceRecord {
    rule_id: usize,
    bandwidth_gbps: String,
}

/// Reads `rule_id,bandwidth_gbps` rows.
pub fn read_instance<R: Read>(reader: R) -> Result<Vec<RuleLoad>, DistError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (i, rec) in rdr.deserialize::<InstanceRecord>().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| DistError::Parse { line, message: e.to_string() })?;
        let bw = parse_gbps(&rec.bandwidth_gbps).map_err(|message| DistError::Parse { line, message })?;
        if !ids.insert(rec.rule_id) {
            return Err(DistError::Parse { line, message: format!("duplicate rule_id {}", rec.rule_id) });
        }
        out.push(RuleLoad::new(rec.rule_id, bw));
    }
    Ok(out)
}

pub fn write_instance<W: Write>(writer: W, loads: &[RuleLoad]) -> Result<(), DistError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for l in loads {
        wtr.serialize(InstanceRecord {
            rule_id: l.rule_id,
            bandwidth_gbps: format_gbps(&Rate::from_integer(u128::from(l.bandwidth_bps))),
        })?;
    }
    wtr.flush()?;
    Ok(())
}
