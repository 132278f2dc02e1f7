use std::collections::BTreeSet;
use std::fs::File;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, ValueEnum};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vif_core::adversary::{
    generate, run_scenario, AdversaryScript, KeySpace, PacketsPerFlow, ScenarioSpec, SizeDistribution, TrafficProfile,
};
use vif_core::cluster::{Cluster, ClusterConfig};
use vif_core::distribution::{
    enclave_count, exact_solve, format_gbps, greedy_solve_with, parse_gbps, plan_objective, read_instance,
    synthetic_loads, write_instance, CapacityConfig, DistError, DistributionPlan, PlanSummary, RuleLoad,
    EXACT_MAX_INSTANCES, EXACT_MAX_RULES,
};
use vif_core::filter::{FilterInstance, FilterSecret, SealedFilter};
use vif_core::flow::{read_trace, Action, FilterRule, FlowSpec, Packet, Prefix, Probability, RuleSet, Verdict};
use vif_core::routing::{
    alternative_path_count, box_stats, compute_routes, coverage_with_routes, synthetic_ixps, synthetic_topology, AsGraph,
    AsId, BoxStats, RegionPolicy,
};
use vif_core::sketch::{KeyMode, SketchParams};

use crate::output::OutDir;
use crate::{Cli, Command, Failure};

pub fn run(cli: &Cli) -> Result<(), Failure> {
    if cli.global.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    let out = OutDir::create(&cli.global.out)?;
    out.json("config.json", cli)?;
    match &cli.command {
        Command::FilterRun(a) => filter_run(cli, a, &out),
        Command::BypassDemo(a) => bypass_demo(cli, a, &out),
        Command::Distribute(a) => distribute(cli, a, &out),
        Command::ClusterSim(a) => cluster_sim(cli, a, &out),
        Command::Coverage(a) => coverage(cli, a, &out),
        Command::Altpaths(a) => altpaths(cli, a, &out),
    }
}

fn log(cli: &Cli, level: u8, msg: impl AsRef<str>) {
    if cli.global.verbose >= level {
        eprintln!("{}", msg.as_ref());
    }
}

fn secret_for(seed: u64) -> FilterSecret {
    FilterSecret::random(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn read_rules(path: &Path) -> Result<RuleSet, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RuleSet::parse(&text).with_context(|| format!("in {}", path.display()))?)
}

// ---------------------------------------------------------------------------
// filter-run
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct FilterRunArgs {
    /// Rule file, one rule per line.
    #[arg(long)]
    pub rules: PathBuf,
    /// Packet trace CSV; without it a synthetic trace is generated.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Flows in the synthetic trace.
    #[arg(long, default_value_t = 1_000)]
    pub flows: usize,
    /// Packets between exact-match cache promotions; 0 disables promotion.
    #[arg(long, default_value_t = 1_000)]
    pub update_period: u64,
}

#[derive(Serialize)]
struct DecisionRow {
    arrival_index: u64,
    payload_tag: u64,
    verdict: Verdict,
    matched_rule: String,
}

#[derive(Serialize)]
struct FilterRunSummary {
    packets: u64,
    allowed: u64,
    dropped: u64,
    allowed_bytes: u64,
    dropped_bytes: u64,
    cache_entries: usize,
    lookups: u64,
    hashes: u64,
    sketch_updates: u64,
}

fn filter_run(cli: &Cli, a: &FilterRunArgs, out: &OutDir) -> Result<(), Failure> {
    let rules = read_rules(&a.rules)?;
    let trace = match &a.trace {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            read_trace(f).with_context(|| format!("in {}", p.display()))?
        }
        None => generate(&TrafficProfile {
            flow_count: a.flows,
            packets_per_flow: PacketsPerFlow::Geometric { p: 0.25 },
            sizes: SizeDistribution::Uniform { min: 64, max: 1500 },
            key_space: KeySpace::default(),
            seed: cli.global.seed,
        })?,
    };
    let filter = FilterInstance::new(rules, secret_for(cli.global.seed), std::num::NonZeroU64::new(a.update_period));
    let mut sealed = SealedFilter::new(
        filter,
        SketchParams::default_for(cli.global.seed, KeyMode::PerSourceIp),
        SketchParams::default_for(cli.global.seed, KeyMode::PerFiveTuple),
    );
    let mut rows = Vec::with_capacity(trace.len());
    let mut s = FilterRunSummary {
        packets: 0,
        allowed: 0,
        dropped: 0,
        allowed_bytes: 0,
        dropped_bytes: 0,
        cache_entries: 0,
        lookups: 0,
        hashes: 0,
        sketch_updates: 0,
    };
    for p in &trace {
        let d = sealed.process(p)?;
        s.packets += 1;
        match d.verdict {
            Verdict::Allow => {
                s.allowed += 1;
                s.allowed_bytes += u64::from(p.size_bytes());
            }
            Verdict::Drop => {
                s.dropped += 1;
                s.dropped_bytes += u64::from(p.size_bytes());
            }
        }
        rows.push(DecisionRow {
            arrival_index: p.arrival_index,
            payload_tag: p.payload_tag,
            verdict: d.verdict,
            matched_rule: d.matched_rule.to_string(),
        });
    }
    let ops = sealed.filter().ops();
    s.cache_entries = sealed.filter().exact_cache().len();
    s.lookups = ops.lookups;
    s.hashes = ops.hashes;
    s.sketch_updates = ops.sketch_updates;
    out.table("decisions", &["arrival_index", "payload_tag", "verdict", "matched_rule"], &rows, cli.global.format)?;
    out.write("filter_incoming.csv", sealed.incoming().to_csv())?;
    out.write("filter_outgoing.csv", sealed.outgoing().to_csv())?;
    out.json("summary.json", &s)?;
    println!("packets={} allowed={} dropped={} cache_entries={}", s.packets, s.allowed, s.dropped, s.cache_entries);
    Ok(())
}

// ---------------------------------------------------------------------------
// bypass-demo
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct BypassDemoArgs {
    /// Scenario JSON file. Its own seeds are used; --seed is ignored.
    pub scenario: PathBuf,
    /// Also write every round's sketches as CSV.
    #[arg(long)]
    pub dump_sketches: bool,
}

#[derive(Serialize)]
struct BypassSummary<'a> {
    scenario: String,
    all_clean: bool,
    /// Decisions for the trace's packets equal those of the same scenario
    /// without an adversary.
    decisions_identical_to_clean: bool,
    misdispatch_count: usize,
    report: &'a vif_core::adversary::ScenarioReport,
}

fn bypass_demo(cli: &Cli, a: &BypassDemoArgs, out: &OutDir) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&a.scenario).with_context(|| format!("reading {}", a.scenario.display()))?;
    let spec = ScenarioSpec::from_json(&text).with_context(|| format!("in {}", a.scenario.display()))?;
    let base = a.scenario.parent().unwrap_or(Path::new("."));
    let rules = spec.load_rules(base)?;
    let trace = generate(&spec.profile)?;
    log(cli, 1, format!("{} packets, {} rules, {} rounds", trace.len(), rules.len(), spec.rounds));
    let report = run_scenario(&trace, &rules, &spec.script, &spec.cluster, spec.rounds)?;
    let identical = if spec.script.actions.is_empty() {
        true
    } else {
        let clean = run_scenario(&trace, &rules, &AdversaryScript::default(), &spec.cluster, spec.rounds)?;
        clean.decision_map() == report.decision_map()
    };

    let mut lines = String::new();
    for rec in report.verdict_records() {
        lines.push_str(&rec.to_json_line());
        lines.push('\n');
        println!("{}", rec.to_json_line());
    }
    out.write("verdicts.jsonl", lines)?;
    if a.dump_sketches {
        for r in &report.rounds {
            if let Some(s) = &r.sketches {
                out.write(&format!("round{}_filter_incoming.csv", r.round), s.filter_incoming.to_csv())?;
                out.write(&format!("round{}_filter_outgoing.csv", r.round), s.filter_outgoing.to_csv())?;
                out.write(&format!("round{}_victim.csv", r.round), s.victim.to_csv())?;
                out.write(&format!("round{}_neighbor.csv", r.round), s.neighbor.to_csv())?;
            }
        }
    }
    let summary = BypassSummary {
        scenario: a.scenario.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        all_clean: report.all_clean(),
        decisions_identical_to_clean: identical,
        misdispatch_count: report.misdispatches.len(),
        report: &report,
    };
    out.json("report.json", &summary)?;
    println!(
        "all_clean={} decisions_identical_to_clean={} misdispatch_count={}",
        summary.all_clean, identical, summary.misdispatch_count
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// distribute
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ExactMode {
    /// Only when the instance has at most 12 rules.
    Auto,
    Always,
    Never,
}

#[derive(Debug, Args, Serialize)]
pub struct DistributeArgs {
    /// Instance CSV with `rule_id,bandwidth_gbps` rows.
    #[arg(long, conflicts_with = "synthetic")]
    pub instance: Option<PathBuf>,
    /// Synthetic instance: `k=<rules> total=<Gb/s> [dist=lognormal] [sigma=<s>] [seed=<n>]`.
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    pub synthetic: Vec<String>,
    /// Number of instances; defaults to the computed instance count.
    #[arg(long)]
    pub n: Option<usize>,
    /// Per-instance memory limit in bytes.
    #[arg(long)]
    pub memory_limit: Option<u64>,
    /// Per-instance bandwidth limit in Gb/s.
    #[arg(long)]
    pub bandwidth_gbps: Option<String>,
    #[arg(long, value_enum, default_value_t = ExactMode::Auto)]
    pub exact: ExactMode,
}

#[derive(Serialize)]
struct PlanRow {
    rule_id: usize,
    enclave: usize,
    xshare_gbps: String,
}

fn plan_rows(plan: &DistributionPlan) -> Vec<PlanRow> {
    let mut rows = Vec::new();
    for i in 0..plan.k() {
        for &j in &plan.installed[i] {
            rows.push(PlanRow { rule_id: plan.rule_ids[i], enclave: j, xshare_gbps: format_gbps(&plan.x(i, j)) });
        }
    }
    rows
}

#[derive(Serialize)]
struct ExactReport {
    z: Option<f64>,
    nodes: u64,
    summary: PlanSummary,
}

#[derive(Serialize)]
struct DistributeSummary {
    k: usize,
    total_gbps: String,
    n_min: usize,
    n: usize,
    greedy: PlanSummary,
    exact: Option<ExactReport>,
    /// (greedy z - exact z) / exact z.
    gap: Option<f64>,
}

#[derive(Serialize)]
struct DistributeTiming {
    greedy_ms: f64,
    exact_ms: Option<f64>,
}

fn parse_synthetic(kv: &[String], default_seed: u64) -> Result<Vec<RuleLoad>, Failure> {
    let (mut k, mut total, mut sigma, mut seed) = (None, None, 1.0f64, default_seed);
    for item in kv {
        let (key, value) =
            item.split_once('=').ok_or_else(|| Failure::Usage(format!("expected KEY=VALUE, got `{item}`")))?;
        let bad = |what: &str| Failure::Usage(format!("invalid {what} `{value}`"));
        match key {
            "k" => k = Some(value.parse::<usize>().map_err(|_| bad("k"))?),
            "total" => total = Some(parse_gbps(value).map_err(Failure::Usage)?),
            "sigma" => sigma = value.parse().map_err(|_| bad("sigma"))?,
            "seed" => seed = value.parse().map_err(|_| bad("seed"))?,
            "dist" if value == "lognormal" => {}
            "dist" => return Err(Failure::Usage(format!("unsupported distribution `{value}` (only lognormal)"))),
            _ => return Err(Failure::Usage(format!("unknown synthetic key `{key}`"))),
        }
    }
    let k = k.ok_or_else(|| Failure::Usage("synthetic instance needs k=<rules>".into()))?;
    let total = total.ok_or_else(|| Failure::Usage("synthetic instance needs total=<Gb/s>".into()))?;
    if k == 0 || !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Failure::Usage("k must be positive and sigma finite and non-negative".into()));
    }
    Ok(synthetic_loads(k, total, sigma, seed))
}

fn dist_failure(e: DistError) -> Failure {
    match e {
        DistError::Infeasible => Failure::Infeasible("no feasible distribution plan".into()),
        DistError::InvalidConfig(m) => Failure::Usage(m.to_string()),
        other => Failure::Data(other.into()),
    }
}

fn distribute(cli: &Cli, a: &DistributeArgs, out: &OutDir) -> Result<(), Failure> {
    let loads = match (&a.instance, a.synthetic.is_empty()) {
        (Some(p), true) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            read_instance(f).with_context(|| format!("in {}", p.display()))?
        }
        (None, false) => {
            let loads = parse_synthetic(&a.synthetic, cli.global.seed)?;
            let mut buf = Vec::new();
            write_instance(&mut buf, &loads)?;
            out.write("instance.csv", buf)?;
            loads
        }
        _ => return Err(Failure::Usage("give either --instance or --synthetic".into())),
    };
    if loads.is_empty() {
        return Err(Failure::Data(anyhow::anyhow!("instance has no rules")));
    }
    let mut cfg = CapacityConfig::default();
    if let Some(m) = a.memory_limit {
        cfg.memory_limit = m;
    }
    if let Some(g) = &a.bandwidth_gbps {
        cfg.bandwidth_limit = parse_gbps(g).map_err(Failure::Usage)?;
    }
    cfg.validate().map_err(dist_failure)?;
    let count = enclave_count(&loads, &cfg).map_err(dist_failure)?;
    let n = a.n.unwrap_or(count.n);
    if n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    log(cli, 1, format!("k={} n_min={} n={}", loads.len(), count.n_min, n));

    let t0 = Instant::now();
    let plan = greedy_solve_with(&loads, &cfg, n).map_err(dist_failure)?;
    let greedy_ms = t0.elapsed().as_secs_f64() * 1e3;
    plan.validate(&cfg).map_err(dist_failure)?;
    let greedy_z = plan_objective(&plan, &cfg).map_err(dist_failure)?;

    let run_exact = match a.exact {
        ExactMode::Auto => loads.len() <= 12 && n <= EXACT_MAX_INSTANCES,
        ExactMode::Always => {
            if loads.len() > EXACT_MAX_RULES || n > EXACT_MAX_INSTANCES {
                return Err(Failure::Usage(format!(
                    "exact solving is limited to {EXACT_MAX_RULES} rules and {EXACT_MAX_INSTANCES} instances"
                )));
            }
            true
        }
        ExactMode::Never => false,
    };
    let (mut exact, mut gap, mut exact_ms) = (None, None, None);
    if run_exact {
        let t1 = Instant::now();
        let sol = exact_solve(&loads, &cfg, n).map_err(dist_failure)?;
        exact_ms = Some(t1.elapsed().as_secs_f64() * 1e3);
        use num_traits::ToPrimitive;
        let ez = sol.z.to_f64();
        if let (Some(ez), Some(gz)) = (ez, greedy_z.to_f64()) {
            gap = Some(if ez > 0.0 { (gz - ez) / ez } else { 0.0 });
        }
        out.table("exact_plan", &["rule_id", "enclave", "xshare_gbps"], &plan_rows(&sol.plan), cli.global.format)?;
        exact = Some(ExactReport { z: ez, nodes: sol.nodes, summary: sol.plan.summary(&cfg) });
    }

    out.table("plan", &["rule_id", "enclave", "xshare_gbps"], &plan_rows(&plan), cli.global.format)?;
    let total: u128 = loads.iter().map(|l| u128::from(l.bandwidth_bps)).sum();
    let summary = DistributeSummary {
        k: loads.len(),
        total_gbps: format_gbps(&vif_core::distribution::Rate::from_integer(total)),
        n_min: count.n_min,
        n,
        greedy: plan.summary(&cfg),
        exact,
        gap,
    };
    out.json("summary.json", &summary)?;
    out.json("timing.json", &DistributeTiming { greedy_ms, exact_ms })?;
    println!(
        "k={} n={} z={} greedy_ms={:.1}{}",
        summary.k,
        n,
        summary.greedy.z.map_or_else(|| "-".into(), |z| format!("{z:.6}")),
        greedy_ms,
        gap.map_or_else(String::new, |g| format!(" gap={:.4}%", g * 100.0))
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// cluster-sim
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct ClusterSimArgs {
    /// Rule file; without it `--rule-count` synthetic /24 source rules are used.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub rule_count: usize,
    #[arg(long, default_value_t = 6)]
    pub rounds: usize,
    /// Flows in the first round.
    #[arg(long, default_value_t = 2_000)]
    pub flows: usize,
    /// Traffic growth factor per round.
    #[arg(long, default_value_t = 1.5)]
    pub growth: f64,
    /// Simulated round length; shorter rounds mean higher bandwidth.
    #[arg(long, default_value_t = 10)]
    pub round_ms: u64,
    /// Per-instance memory limit in bytes.
    #[arg(long)]
    pub memory_limit: Option<u64>,
}

#[derive(Serialize)]
struct RoundRow {
    round_id: u64,
    packets: usize,
    bytes: u64,
    n_before: usize,
    n_after: usize,
    master: Option<usize>,
    z: Option<f64>,
    triggers: String,
    misdispatch_count: usize,
    clock_ms: u64,
}

fn synthetic_rules(k: usize) -> Result<RuleSet, Failure> {
    if k == 0 || k > 65_536 {
        return Err(Failure::Usage("--rule-count must be in 1..=65536".into()));
    }
    let rules = (0..k)
        .map(|i| {
            let src = Prefix::new(Ipv4Addr::new(10, (i >> 8) as u8, i as u8, 0), 24).expect("valid prefix");
            let action = match i % 3 {
                0 => Action::Probabilistic(Probability::new(1, 2).expect("valid")),
                1 => Action::Deterministic(Verdict::Drop),
                _ => Action::Deterministic(Verdict::Allow),
            };
            FilterRule::new(FlowSpec { src, ..FlowSpec::ANY }, action)
        })
        .collect();
    Ok(RuleSet::new(rules)?)
}

fn cluster_sim(cli: &Cli, a: &ClusterSimArgs, out: &OutDir) -> Result<(), Failure> {
    if !(a.growth.is_finite() && a.growth > 0.0) || a.round_ms == 0 {
        return Err(Failure::Usage("--growth must be positive and --round-ms at least 1".into()));
    }
    let rules = match &a.rules {
        Some(p) => read_rules(p)?,
        None => synthetic_rules(a.rule_count)?,
    };
    let sources: Vec<Prefix> = rules.rules().iter().map(|r| r.spec.src).collect();
    let mut capacity = CapacityConfig::default();
    if let Some(m) = a.memory_limit {
        capacity.memory_limit = m;
    }
    capacity.validate().map_err(dist_failure)?;
    let cfg = ClusterConfig {
        capacity,
        round_ms: a.round_ms,
        dispatch_seed: cli.global.seed,
        sketch_seed: cli.global.seed,
        parallel: cli.global.threads > 1,
        ..ClusterConfig::default()
    };
    let mut cluster = Cluster::new(rules, secret_for(cli.global.seed), cfg).map_err(|e| match e {
        vif_core::cluster::ClusterError::Dist(d) => dist_failure(d),
        other => Failure::Data(other.into()),
    })?;
    let mut rows = Vec::new();
    let mut logs = String::new();
    for r in 0..a.rounds {
        let flows = (a.flows as f64 * a.growth.powi(r as i32)).round() as usize;
        let trace = generate(&TrafficProfile {
            flow_count: flows,
            packets_per_flow: PacketsPerFlow::Geometric { p: 0.2 },
            sizes: SizeDistribution::Uniform { min: 64, max: 1500 },
            key_space: KeySpace { src: sources.clone(), ..KeySpace::default() },
            seed: cli.global.seed.wrapping_add(r as u64),
        })?;
        let res = cluster.run_round(&trace)?;
        let bytes: u64 = trace.iter().map(|p: &Packet| u64::from(p.size_bytes())).sum();
        logs.push_str(&serde_json::to_string(&res.log)?);
        logs.push('\n');
        log(cli, 1, format!("round {r}: {} packets, n {} -> {}", trace.len(), res.log.n_before, res.log.n_after));
        rows.push(RoundRow {
            round_id: res.log.round_id,
            packets: trace.len(),
            bytes,
            n_before: res.log.n_before,
            n_after: res.log.n_after,
            master: res.log.master,
            z: res.log.z,
            triggers: res.log.triggers.iter().map(ToString::to_string).collect::<Vec<_>>().join(";"),
            misdispatch_count: res.log.misdispatch_count,
            clock_ms: cluster.clock_ms(),
        });
    }
    out.write("rounds.jsonl", logs)?;
    out.table(
        "rounds",
        &["round_id", "packets", "bytes", "n_before", "n_after", "master", "z", "triggers", "misdispatch_count", "clock_ms"],
        &rows,
        cli.global.format,
    )?;
    let last = rows.last();
    println!(
        "rounds={} final_n={} clock_ms={}",
        rows.len(),
        last.map_or(cluster.n(), |r| r.n_after),
        cluster.clock_ms()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// coverage / altpaths
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct TopologyArgs {
    /// CAIDA `as1|as2|rel` file; defaults to $VIF_DATA_DIR/as-rel.txt.
    #[arg(long, conflicts_with = "synthetic")]
    pub topology: Option<PathBuf>,
    /// Generate a synthetic topology with this many ASes instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
}

fn data_default(name: &str) -> Option<PathBuf> {
    std::env::var_os("VIF_DATA_DIR").map(|d| PathBuf::from(d).join(name))
}

fn load_topology(cli: &Cli, t: &TopologyArgs) -> Result<AsGraph, Failure> {
    if let Some(n) = t.synthetic {
        if n < 2 {
            return Err(Failure::Usage("--synthetic needs at least 2 ASes".into()));
        }
        return Ok(synthetic_topology(n, cli.global.seed));
    }
    let path = t
        .topology
        .clone()
        .or_else(|| data_default("as-rel.txt"))
        .ok_or_else(|| Failure::Usage("give --topology, --synthetic or set VIF_DATA_DIR".into()))?;
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let mut g = AsGraph::new();
    g.read_caida(f).with_context(|| format!("in {}", path.display()))?;
    Ok(g)
}

fn read_as_list(path: &Path) -> Result<Vec<AsId>, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let a = line
            .parse()
            .map_err(|_| anyhow::anyhow!("{}: line {}: bad AS number `{line}`", path.display(), i + 1))?;
        out.push(a);
    }
    Ok(out)
}

/// ASes without customers.
fn stubs(g: &AsGraph) -> Vec<AsId> {
    g.nodes().filter(|&a| g.customers(a).next().is_none()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyChoice {
    Global,
    PerRegion,
    Both,
}

impl PolicyChoice {
    fn policies(self) -> Vec<RegionPolicy> {
        match self {
            Self::Global => vec![RegionPolicy::Global],
            Self::PerRegion => vec![RegionPolicy::PerRegion],
            Self::Both => vec![RegionPolicy::Global, RegionPolicy::PerRegion],
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CoverageArgs {
    #[command(flatten)]
    pub topo: TopologyArgs,
    /// IXP membership `ixp|as[|region]`; defaults to $VIF_DATA_DIR/ixps.txt.
    #[arg(long)]
    pub ixps: Option<PathBuf>,
    /// IXPs generated for a synthetic topology.
    #[arg(long, default_value_t = 20)]
    pub synthetic_ixps: usize,
    /// Attack sources, one AS per line (repeats weight a source).
    #[arg(long)]
    pub sources: Option<PathBuf>,
    /// Random attack sources drawn from customer-less ASes when no file is given.
    #[arg(long, default_value_t = 1_000)]
    pub source_count: usize,
    /// Victims, one AS per line.
    #[arg(long)]
    pub victims: Option<PathBuf>,
    /// Random victims drawn from customer-less ASes when no file is given.
    #[arg(long, default_value_t = 100)]
    pub victim_count: usize,
    /// Largest IXP set size evaluated.
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
    #[arg(long, value_enum, default_value_t = PolicyChoice::Global)]
    pub region_policy: PolicyChoice,
}

#[derive(Debug, Clone, Serialize)]
struct CoverageRow {
    victim: AsId,
    ixp_set_size: usize,
    region_policy: String,
    coverage: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    ixp_set_size: usize,
    region_policy: String,
    count: usize,
    min: f64,
    p5: f64,
    q1: f64,
    median: f64,
    q3: f64,
    p95: f64,
    max: f64,
}

impl SummaryRow {
    fn new(ixp_set_size: usize, region_policy: String, s: BoxStats) -> Self {
        Self {
            ixp_set_size,
            region_policy,
            count: s.count,
            min: s.min,
            p5: s.p5,
            q1: s.q1,
            median: s.median,
            q3: s.q3,
            p95: s.p95,
            max: s.max,
        }
    }
}

/// Runs `f` over `items` on up to `threads` workers, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn coverage(cli: &Cli, a: &CoverageArgs, out: &OutDir) -> Result<(), Failure> {
    if a.topk == 0 {
        return Err(Failure::Usage("--topk must be at least 1".into()));
    }
    let mut g = load_topology(cli, &a.topo)?;
    if a.topo.synthetic.is_some() && a.ixps.is_none() {
        synthetic_ixps(&mut g, a.synthetic_ixps, &["eu", "na", "ap"], cli.global.seed.wrapping_add(1));
    } else {
        let path = a
            .ixps
            .clone()
            .or_else(|| data_default("ixps.txt"))
            .ok_or_else(|| Failure::Usage("give --ixps or set VIF_DATA_DIR".into()))?;
        let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        g.read_ixps(f).with_context(|| format!("in {}", path.display()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cli.global.seed);
    let stub_list = stubs(&g);
    if stub_list.is_empty() {
        return Err(Failure::Data(anyhow::anyhow!("topology has no customer-less ASes")));
    }
    let victims: Vec<AsId> = match a.victims.clone().or_else(|| data_default("victims.txt").filter(|p| p.exists())) {
        Some(p) => read_as_list(&p)?,
        None => stub_list.choose_multiple(&mut rng, a.victim_count).copied().collect(),
    };
    let sources: Vec<AsId> = match a.sources.clone().or_else(|| data_default("sources.txt").filter(|p| p.exists())) {
        Some(p) => read_as_list(&p)?,
        None => (0..a.source_count).map(|_| stub_list[rng.random_range(0..stub_list.len())]).collect(),
    };
    if let Some(v) = victims.iter().chain(&sources).find(|&&v| !g.contains(v)) {
        return Err(Failure::Data(anyhow::anyhow!("AS {v} is not in the topology")));
    }
    let policies = a.region_policy.policies();
    let sets: Vec<(usize, RegionPolicy, BTreeSet<u32>)> = policies
        .iter()
        .flat_map(|&pol| (1..=a.topk).map(move |k| (k, pol)))
        .map(|(k, pol)| (k, pol, g.top_ixps(k, pol)))
        .collect();
    log(cli, 1, format!("{} ASes, {} IXPs, {} victims, {} sources", g.len(), g.ixps().len(), victims.len(), sources.len()));

    let per_victim = par_map(&victims, cli.global.threads, |&v| {
        let routes = compute_routes(&g, v, &BTreeSet::new());
        let srcs: Vec<AsId> = sources.iter().copied().filter(|&s| s != v).collect();
        sets.iter()
            .map(|(k, pol, ixps)| CoverageRow {
                victim: v,
                ixp_set_size: *k,
                region_policy: pol.to_string(),
                coverage: coverage_with_routes(&g, &routes, &srcs, ixps),
            })
            .collect::<Vec<_>>()
    });
    let rows: Vec<CoverageRow> = per_victim.into_iter().flatten().collect();
    out.table("coverage", &["victim", "ixp_set_size", "region_policy", "coverage"], &rows, cli.global.format)?;

    let mut summary = Vec::new();
    for (k, pol, _) in &sets {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.ixp_set_size == *k && r.region_policy == pol.to_string())
            .map(|r| r.coverage)
            .collect();
        let stats = box_stats(&vals);
        println!("{pol} top-{k}: median={:.4} q1={:.4} q3={:.4}", stats.median, stats.q1, stats.q3);
        summary.push(SummaryRow::new(*k, pol.to_string(), stats));
    }
    out.table(
        "coverage_summary",
        &["ixp_set_size", "region_policy", "count", "min", "p5", "q1", "median", "q3", "p95", "max"],
        &summary,
        cli.global.format,
    )?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct AltpathsArgs {
    #[command(flatten)]
    pub topo: TopologyArgs,
    /// Random (source, destination) pairs; destinations are customer-less ASes.
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
}

#[derive(Serialize)]
struct AltRow {
    source: AsId,
    dest: AsId,
    alternatives: usize,
}

fn altpaths(cli: &Cli, a: &AltpathsArgs, out: &OutDir) -> Result<(), Failure> {
    let g = load_topology(cli, &a.topo)?;
    let nodes: Vec<AsId> = g.nodes().collect();
    let stub_list = stubs(&g);
    if nodes.len() < 2 || stub_list.is_empty() {
        return Err(Failure::Data(anyhow::anyhow!("topology too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cli.global.seed);
    let mut pairs = Vec::with_capacity(a.pairs);
    while pairs.len() < a.pairs {
        let s = nodes[rng.random_range(0..nodes.len())];
        let d = stub_list[rng.random_range(0..stub_list.len())];
        if s != d {
            pairs.push((s, d));
        }
    }
    let rows: Vec<AltRow> = par_map(&pairs, cli.global.threads, |&(s, d)| AltRow {
        source: s,
        dest: d,
        alternatives: alternative_path_count(&g, s, d),
    });
    out.table("altpaths", &["source", "dest", "alternatives"], &rows, cli.global.format)?;
    let reachable: Vec<f64> = rows.iter().filter(|r| r.alternatives > 0).map(|r| r.alternatives as f64).collect();
    let stats = box_stats(&reachable);
    out.json("altpaths_summary.json", &stats)?;
    println!("pairs={} reachable={} median_alternatives={}", rows.len(), reachable.len(), stats.median);
    Ok(())
}
