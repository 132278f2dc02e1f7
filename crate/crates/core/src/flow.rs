//! Packet, flow and rule vocabulary shared by the filter, the logs and the
//! simulators.
//!
//! A [`FlowKey`] is the five-tuple a filter judges. Rules are expressed over
//! [`FlowSpec`]s (prefixes plus optional exact fields) and collected in an
//! ordered [`RuleSet`] evaluated first-match-wins with an implicit `ALLOW`
//! default.

use std::fmt;
use std::io::{Read, Write};
use std::net::Ipv4Addr;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("packet size must be at least one byte")]
    ZeroSizedPacket,
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(String),
    #[error("rule {second} repeats the flow spec of rule {first}")]
    DuplicateSpec { first: usize, second: usize },
    #[error("invalid prefix `{0}`")]
    InvalidPrefix(String),
    #[error("trace: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Five-tuple identity of a packet.
///
/// Ordering and equality follow the 104-bit big-endian concatenation of the
/// fields in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

impl FlowKey {
    pub const ENCODED_LEN: usize = 13;

    pub fn new(src_ip: Ipv4Addr, dst_ip: Ipv4Addr, src_port: u16, dst_port: u16, protocol: u8) -> Self {
        Self { src_ip, dst_ip, src_port, dst_port, protocol }
    }

    /// Canonical fixed-width encoding.
    pub fn to_bytes(&self) -> [u8; Self::ENCODED_LEN] {
        let mut out = [0u8; Self::ENCODED_LEN];
        out[0..4].copy_from_slice(&self.src_ip.octets());
        out[4..8].copy_from_slice(&self.dst_ip.octets());
        out[8..10].copy_from_slice(&self.src_port.to_be_bytes());
        out[10..12].copy_from_slice(&self.dst_port.to_be_bytes());
        out[12] = self.protocol;
        out
    }

    pub fn from_bytes(bytes: &[u8; Self::ENCODED_LEN]) -> Self {
        Self {
            src_ip: Ipv4Addr::new(bytes[0], bytes[1], bytes[2], bytes[3]),
            dst_ip: Ipv4Addr::new(bytes[4], bytes[5], bytes[6], bytes[7]),
            src_port: u16::from_be_bytes([bytes[8], bytes[9]]),
            dst_port: u16::from_be_bytes([bytes[10], bytes[11]]),
            protocol: bytes[12],
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} proto {}",
            self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.protocol
        )
    }
}

/// A packet as seen by the filter.
///
/// `arrival_index` stands in for the arrival time and exists so tests can
/// show the filter ignores it. `payload_tag` distinguishes otherwise identical
/// packets in simulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Packet {
    pub key: FlowKey,
    size_bytes: u32,
    pub arrival_index: u64,
    pub payload_tag: u64,
}

impl Packet {
    pub fn new(key: FlowKey, size_bytes: u32, arrival_index: u64, payload_tag: u64) -> Result<Self, FlowError> {
        if size_bytes == 0 {
            return Err(FlowError::ZeroSizedPacket);
        }
        Ok(Self { key, size_bytes, arrival_index, payload_tag })
    }

    pub fn size_bytes(&self) -> u32 {
        self.size_bytes
    }

    /// The fields copied across the trust boundary instead of the packet body.
    pub fn digest(&self, handle: usize) -> PacketDigest {
        PacketDigest { key: self.key, size_bytes: self.size_bytes, handle }
    }
}

/// Near-zero-copy view of a packet: the five-tuple, the size and an opaque
/// handle to the packet buffer that stays on the untrusted side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PacketDigest {
    pub key: FlowKey,
    pub size_bytes: u32,
    pub handle: usize,
}

/// IPv4 prefix, always stored with host bits cleared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Prefix {
    addr: u32,
    len: u8,
}

impl Prefix {
    pub const ANY: Prefix = Prefix { addr: 0, len: 0 };

    pub fn new(addr: Ipv4Addr, len: u8) -> Result<Self, FlowError> {
        if len > 32 {
            return Err(FlowError::InvalidPrefix(format!("{addr}/{len}")));
        }
        Ok(Self { addr: u32::from(addr) & Self::mask(len), len })
    }

    pub fn host(addr: Ipv4Addr) -> Self {
        Self { addr: u32::from(addr), len: 32 }
    }

    fn mask(len: u8) -> u32 {
        if len == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(len))
        }
    }

    pub fn addr(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.addr)
    }

    pub fn bits(&self) -> u32 {
        self.addr
    }

    pub fn len(&self) -> u8 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & Self::mask(self.len) == self.addr
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr(), self.len)
    }
}

impl FromStr for Prefix {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FlowError::InvalidPrefix(s.to_string());
        let (addr, len) = match s.split_once('/') {
            Some((a, l)) => (a, l.parse::<u8>().map_err(|_| bad())?),
            None => (s, 32),
        };
        let addr: Ipv4Addr = addr.parse().map_err(|_| bad())?;
        Prefix::new(addr, len).map_err(|_| bad())
    }
}

impl Serialize for Prefix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Prefix {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Coarse-grained flow specification. `None` fields are wildcards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowSpec {
    pub src: Prefix,
    pub dst: Prefix,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub protocol: Option<u8>,
}

impl FlowSpec {
    pub const ANY: FlowSpec =
        FlowSpec { src: Prefix::ANY, dst: Prefix::ANY, src_port: None, dst_port: None, protocol: None };

    /// The spec matching exactly one key.
    pub fn exact(key: &FlowKey) -> Self {
        Self {
            src: Prefix::host(key.src_ip),
            dst: Prefix::host(key.dst_ip),
            src_port: Some(key.src_port),
            dst_port: Some(key.dst_port),
            protocol: Some(key.protocol),
        }
    }

    pub fn matches(&self, key: &FlowKey) -> bool {
        self.src.contains(key.src_ip)
            && self.dst.contains(key.dst_ip)
            && self.src_port.is_none_or(|p| p == key.src_port)
            && self.dst_port.is_none_or(|p| p == key.dst_port)
            && self.protocol.is_none_or(|p| p == key.protocol)
    }

    /// Canonical encoding; two specs are the same rule target iff these bytes
    /// are equal.
    pub fn to_bytes(&self) -> [u8; 18] {
        let mut out = [0u8; 18];
        out[0..4].copy_from_slice(&self.src.bits().to_be_bytes());
        out[4] = self.src.len();
        out[5..9].copy_from_slice(&self.dst.bits().to_be_bytes());
        out[9] = self.dst.len();
        out[10] = self.src_port.is_some() as u8;
        out[11..13].copy_from_slice(&self.src_port.unwrap_or(0).to_be_bytes());
        out[13] = self.dst_port.is_some() as u8;
        out[14..16].copy_from_slice(&self.dst_port.unwrap_or(0).to_be_bytes());
        out[16] = self.protocol.is_some() as u8;
        out[17] = self.protocol.unwrap_or(0);
        out
    }
}

/// Allow probability of a non-deterministic rule, an exact rational in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "(u64, u64)", into = "(u64, u64)")]
pub struct Probability(Ratio<u64>);

impl Probability {
    pub const ZERO: Probability = Probability(Ratio::new_raw(0, 1));
    pub const ONE: Probability = Probability(Ratio::new_raw(1, 1));

    pub fn new(numer: u64, denom: u64) -> Result<Self, FlowError> {
        if denom == 0 || numer > denom {
            return Err(FlowError::InvalidProbability(format!("{numer}/{denom}")));
        }
        Ok(Self(Ratio::new(numer, denom)))
    }

    pub fn numer(&self) -> u64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u64 {
        *self.0.denom()
    }

    pub fn as_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }
}

impl TryFrom<(u64, u64)> for Probability {
    type Error = FlowError;

    fn try_from((n, d): (u64, u64)) -> Result<Self, Self::Error> {
        Probability::new(n, d)
    }
}

impl From<Probability> for (u64, u64) {
    fn from(p: Probability) -> Self {
        (p.numer(), p.denom())
    }
}

/// Parses a plain decimal such as `0.35` or `1` exactly.
impl FromStr for Probability {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FlowError::InvalidProbability(s.to_string());
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() || frac.len() > 18 {
            return Err(bad());
        }
        if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let denom = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_val: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let numer = int.checked_mul(denom).and_then(|v| v.checked_add(frac_val)).ok_or_else(bad)?;
        Probability::new(numer, denom).map_err(|_| bad())
    }
}

impl fmt::Display for Probability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Exact decimal when the denominator only has factors 2 and 5.
        let (mut d, mut twos, mut fives) = (self.denom(), 0u32, 0u32);
        while d % 2 == 0 {
            d /= 2;
            twos += 1;
        }
        while d % 5 == 0 {
            d /= 5;
            fives += 1;
        }
        let digits = twos.max(fives);
        if d == 1 && digits <= 18 {
            let scale = 10u128.pow(digits);
            let scaled = u128::from(self.numer()) * scale / u128::from(self.denom());
            if digits == 0 {
                return write!(f, "{scaled}");
            }
            let int = scaled / scale;
            let frac = scaled % scale;
            write!(f, "{int}.{frac:0width$}", width = digits as usize)
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Allow,
    Drop,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Allow => "ALLOW",
            Verdict::Drop => "DROP",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Deterministic(Verdict),
    /// Only the allow probability is stored; the drop probability is its
    /// complement.
    Probabilistic(Probability),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Deterministic(v) => write!(f, "{v}"),
            Action::Probabilistic(p) => write!(f, "P={p}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterRule {
    pub spec: FlowSpec,
    pub action: Action,
}

impl FilterRule {
    pub fn new(spec: FlowSpec, action: Action) -> Self {
        Self { spec, action }
    }

    /// The synthetic rule standing for the rule set's default action.
    pub fn default_allow() -> Self {
        Self { spec: FlowSpec::ANY, action: Action::Deterministic(Verdict::Allow) }
    }
}

/// Which rule decided a packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleIndex {
    Rule(usize),
    Default,
}

impl fmt::Display for RuleIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleIndex::Rule(i) => write!(f, "{i}"),
            RuleIndex::Default => f.write_str("DEFAULT"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleMatch {
    pub index: RuleIndex,
    pub rule: FilterRule,
}

/// Ordered rule list, first match wins, default `ALLOW`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct RuleSet {
    rules: Vec<FilterRule>,
}

impl RuleSet {
    pub fn new(rules: Vec<FilterRule>) -> Result<Self, FlowError> {
        let mut seen = std::collections::HashMap::with_capacity(rules.len());
        for (i, rule) in rules.iter().enumerate() {
            if let Some(first) = seen.insert(rule.spec.to_bytes(), i) {
                return Err(FlowError::DuplicateSpec { first, second: i });
            }
        }
        Ok(Self { rules })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn rules(&self) -> &[FilterRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn default_action(&self) -> Action {
        Action::Deterministic(Verdict::Allow)
    }

    pub fn first_match(&self, key: &FlowKey) -> RuleMatch {
        self.rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.spec.matches(key))
            .map(|(i, r)| RuleMatch { index: RuleIndex::Rule(i), rule: *r })
            .unwrap_or(RuleMatch { index: RuleIndex::Default, rule: FilterRule::default_allow() })
    }

    /// Rule file text, one rule per line.
    pub fn to_rule_file(&self) -> String {
        let mut out = String::new();
        for rule in &self.rules {
            out.push_str(&format_rule(rule));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, FlowError> {
        let mut rules = Vec::new();
        let mut lines = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            rules.push(parse_rule(line).map_err(|message| FlowError::Parse { line: n + 1, message })?);
            lines.push(n + 1);
        }
        RuleSet::new(rules).map_err(|e| match e {
            FlowError::DuplicateSpec { first, second } => FlowError::Parse {
                line: lines[second],
                message: format!("duplicate flow spec (first seen on line {})", lines[first]),
            },
            other => other,
        })
    }
}

impl<'de> Deserialize<'de> for RuleSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            rules: Vec<FilterRule>,
        }
        let raw = Raw::deserialize(deserializer)?;
        RuleSet::new(raw.rules).map_err(serde::de::Error::custom)
    }
}

fn format_opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "*".to_string(), |v| v.to_string())
}

pub fn format_rule(rule: &FilterRule) -> String {
    format!(
        "{} {} {} {} {} {}",
        rule.spec.src,
        rule.spec.dst,
        format_opt(rule.spec.src_port),
        format_opt(rule.spec.dst_port),
        format_opt(rule.spec.protocol),
        rule.action
    )
}

fn parse_opt<T: FromStr>(field: &str, what: &str) -> Result<Option<T>, String> {
    if field == "*" {
        Ok(None)
    } else {
        field.parse().map(Some).map_err(|_| format!("invalid {what} `{field}`"))
    }
}

fn parse_rule(line: &str) -> Result<FilterRule, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(format!("expected 6 fields, found {}", fields.len()));
    }
    let src: Prefix = fields[0].parse().map_err(|e: FlowError| e.to_string())?;
    let dst: Prefix = fields[1].parse().map_err(|e: FlowError| e.to_string())?;
    let spec = FlowSpec {
        src,
        dst,
        src_port: parse_opt(fields[2], "source port")?,
        dst_port: parse_opt(fields[3], "destination port")?,
        protocol: parse_opt(fields[4], "protocol")?,
    };
    let action = match fields[5] {
        "ALLOW" => Action::Deterministic(Verdict::Allow),
        "DROP" => Action::Deterministic(Verdict::Drop),
        other => match other.strip_prefix("P=") {
            Some(p) => Action::Probabilistic(p.parse().map_err(|e: FlowError| e.to_string())?),
            None => return Err(format!("invalid action `{other}`")),
        },
    };
    Ok(FilterRule { spec, action })
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRecord {
    arrival_index: u64,
    src_ip: Ipv4Addr,
    dst_ip: Ipv4Addr,
    src_port: u16,
    dst_port: u16,
    protocol: u8,
    size_bytes: u32,
    payload_tag: u64,
}

pub fn read_trace<R: Read>(reader: R) -> Result<Vec<Packet>, FlowError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<TraceRecord>().enumerate() {
        // header is line 1
        let line = i + 2;
        let rec = rec.map_err(|e| FlowError::Parse { line, message: e.to_string() })?;
        let key = FlowKey::new(rec.src_ip, rec.dst_ip, rec.src_port, rec.dst_port, rec.protocol);
        let packet = Packet::new(key, rec.size_bytes, rec.arrival_index, rec.payload_tag)
            .map_err(|e| FlowError::Parse { line, message: e.to_string() })?;
        out.push(packet);
    }
    Ok(out)
}

pub fn write_trace<W: Write>(writer: W, packets: &[Packet]) -> Result<(), FlowError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for p in packets {
        wtr.serialize(TraceRecord {
            arrival_index: p.arrival_index,
            src_ip: p.key.src_ip,
            dst_ip: p.key.dst_ip,
            src_port: p.key.src_port,
            dst_port: p.key.dst_port,
            protocol: p.key.protocol,
            size_bytes: p.size_bytes,
            payload_tag: p.payload_tag,
        })?;
    }
    wtr.flush()?;
    Ok(())
}
