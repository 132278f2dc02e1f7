//! Count-min sketches used as accountable packet logs.
//!
//! The filter keeps one sketch of incoming traffic keyed by source address and
//! one of outgoing traffic keyed by five-tuple. The victim and the upstream
//! neighbors keep sketches with the same parameters and compare them with the
//! filter's at the end of every round.

use std::fmt::Write as _;
use std::net::Ipv4Addr;

use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::flow::{FlowKey, Packet};

pub const DEFAULT_DEPTH: u8 = 2;
pub const DEFAULT_WIDTH: u32 = 65_536;

const MAGIC: &[u8; 4] = b"VIFS";
const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
const MAC_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SketchError {
    #[error("sketches are not comparable (different depth, width, seeds or modes)")]
    Incomparable,
    #[error("counter overflow in row {row}, bin {bin}")]
    Overflow { row: usize, bin: usize },
    #[error("invalid sketch parameters: {0}")]
    InvalidParams(&'static str),
    #[error("malformed sketch encoding: {0}")]
    Malformed(&'static str),
    #[error("sketch authentication failed")]
    BadMac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KeyMode {
    PerSourceIp,
    PerFiveTuple,
}

/// What one update adds to the addressed counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CountMode {
    #[default]
    Bytes,
    Packets,
}

/// Everything two parties must agree on for their sketches to be comparable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SketchParams {
    pub depth: u8,
    pub width: u32,
    pub row_seeds: Vec<u64>,
    pub key_mode: KeyMode,
    pub count_mode: CountMode,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl SketchParams {
    pub fn new(depth: u8, width: u32, row_seeds: Vec<u64>, key_mode: KeyMode) -> Result<Self, SketchError> {
        if depth == 0 || width == 0 {
            return Err(SketchError::InvalidParams("depth and width must be positive"));
        }
        if row_seeds.len() != usize::from(depth) {
            return Err(SketchError::InvalidParams("need one seed per row"));
        }
        for (i, s) in row_seeds.iter().enumerate() {
            if row_seeds[..i].contains(s) {
                return Err(SketchError::InvalidParams("row seeds must be pairwise distinct"));
            }
        }
        Ok(Self { depth, width, row_seeds, key_mode, count_mode: CountMode::Bytes })
    }

    /// Derives distinct row seeds from one session seed.
    pub fn from_session(session_seed: u64, depth: u8, width: u32, key_mode: KeyMode) -> Result<Self, SketchError> {
        let mut seeds = Vec::with_capacity(usize::from(depth));
        let mut state = session_seed;
        while seeds.len() < usize::from(depth) {
            state = splitmix64(state);
            if !seeds.contains(&state) {
                seeds.push(state);
            }
        }
        Self::new(depth, width, seeds, key_mode)
    }

    /// Two rows of 65,536 bins, the deployment default.
    pub fn default_for(session_seed: u64, key_mode: KeyMode) -> Self {
        Self::from_session(session_seed, DEFAULT_DEPTH, DEFAULT_WIDTH, key_mode).expect("default parameters are valid")
    }

    pub fn with_count_mode(mut self, count_mode: CountMode) -> Self {
        self.count_mode = count_mode;
        self
    }

    pub fn memory_bytes(&self) -> usize {
        usize::from(self.depth) * self.width as usize * 8
    }
}

/// Linear hash of one row: vector multiply-shift over the item in 32-bit
/// chunks, keeping the high bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RowHash {
    mul: [u64; 4],
    add: u64,
}

impl RowHash {
    fn from_seed(seed: u64) -> Self {
        // separate stream from the one that produced the row seeds
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mul = std::array::from_fn(|_| rng.next_u64() | 1);
        Self { mul, add: rng.next_u64() }
    }

    fn bin(&self, item: &[u8], width: u32) -> usize {
        let mut w = [0u8; 16];
        w[..item.len()].copy_from_slice(item);
        let h = w
            .chunks_exact(4)
            .zip(self.mul)
            .fold(self.add, |h, (c, m)| h.wrapping_add(m.wrapping_mul(u64::from(u32::from_be_bytes(c.try_into().unwrap())))));
        // top 32 bits scaled to the width; for a power of two this is the
        // top log2(width) bits
        (((h >> 32) * u64::from(width)) >> 32) as usize
    }
}

/// One (row, bin) where two sketches disagree; `delta` is theirs minus mine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinDelta {
    pub row: usize,
    pub bin: usize,
    pub delta: i128,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMinSketch {
    params: SketchParams,
    hashes: Vec<RowHash>,
    counters: Vec<u64>,
    total_updates: u64,
}

impl CountMinSketch {
    pub fn new(params: SketchParams) -> Self {
        let hashes = params.row_seeds.iter().map(|&s| RowHash::from_seed(s)).collect();
        let counters = vec![0; usize::from(params.depth) * params.width as usize];
        Self { params, hashes, counters, total_updates: 0 }
    }

    pub fn params(&self) -> &SketchParams {
        &self.params
    }

    pub fn depth(&self) -> usize {
        usize::from(self.params.depth)
    }

    pub fn width(&self) -> usize {
        self.params.width as usize
    }

    pub fn total_updates(&self) -> u64 {
        self.total_updates
    }

    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.counters[r * self.width()..(r + 1) * self.width()]
    }

    pub fn is_comparable(&self, other: &CountMinSketch) -> bool {
        self.params == other.params
    }

    /// The bytes a packet is keyed by under this sketch's key mode.
    pub fn item_of(&self, key: &FlowKey) -> Vec<u8> {
        match self.params.key_mode {
            KeyMode::PerSourceIp => key.src_ip.octets().to_vec(),
            KeyMode::PerFiveTuple => key.to_bytes().to_vec(),
        }
    }

    pub fn bins<'a>(&'a self, item: &'a [u8]) -> impl Iterator<Item = (usize, usize)> + 'a {
        self.hashes.iter().enumerate().map(move |(r, h)| (r, h.bin(item, self.params.width)))
    }

    pub fn update(&mut self, packet: &Packet) -> Result<(), SketchError> {
        let amount = match self.params.count_mode {
            CountMode::Bytes => u64::from(packet.size_bytes()),
            CountMode::Packets => 1,
        };
        let item = self.item_of(&packet.key);
        self.add(&item, amount)
    }

    pub fn add(&mut self, item: &[u8], amount: u64) -> Result<(), SketchError> {
        let width = self.width();
        let slots: Vec<(usize, usize)> = self.bins(item).collect();
        // Check every row first so a failed update leaves the sketch untouched.
        for &(r, b) in &slots {
            if self.counters[r * width + b].checked_add(amount).is_none() {
                return Err(SketchError::Overflow { row: r, bin: b });
            }
        }
        for (r, b) in slots {
            self.counters[r * width + b] += amount;
        }
        self.total_updates += 1;
        Ok(())
    }

    pub fn point_query(&self, item: &[u8]) -> u64 {
        let width = self.width();
        self.bins(item).map(|(r, b)| self.counters[r * width + b]).min().unwrap_or(0)
    }

    pub fn query_key(&self, key: &FlowKey) -> u64 {
        self.point_query(&self.item_of(key))
    }

    pub fn query_source(&self, ip: Ipv4Addr) -> u64 {
        self.point_query(&ip.octets())
    }

    pub fn merge(&self, other: &CountMinSketch) -> Result<CountMinSketch, SketchError> {
        if !self.is_comparable(other) {
            return Err(SketchError::Incomparable);
        }
        let width = self.width();
        let mut counters = Vec::with_capacity(self.counters.len());
        for (i, (a, b)) in self.counters.iter().zip(&other.counters).enumerate() {
            counters.push(a.checked_add(*b).ok_or(SketchError::Overflow { row: i / width, bin: i % width })?);
        }
        Ok(CountMinSketch {
            params: self.params.clone(),
            hashes: self.hashes.clone(),
            counters,
            total_updates: self.total_updates + other.total_updates,
        })
    }

    /// Every (row, bin) where `theirs` differs from `self`.
    pub fn diff_report(&self, theirs: &CountMinSketch) -> Result<Vec<BinDelta>, SketchError> {
        if !self.is_comparable(theirs) {
            return Err(SketchError::Incomparable);
        }
        let width = self.width();
        Ok(self
            .counters
            .iter()
            .zip(&theirs.counters)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, (a, b))| BinDelta { row: i / width, bin: i % width, delta: i128::from(*b) - i128::from(*a) })
            .collect())
    }

    pub fn reset(&mut self) {
        self.counters.iter_mut().for_each(|c| *c = 0);
        self.total_updates = 0;
    }

    /// Wire encoding: 20-byte header, row seeds, then row-major counters, all
    /// little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * (self.depth() + self.counters.len()));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.params.depth);
        out.push(match self.params.key_mode {
            KeyMode::PerSourceIp => 0,
            KeyMode::PerFiveTuple => 1,
        });
        out.push(match self.params.count_mode {
            CountMode::Bytes => 0,
            CountMode::Packets => 1,
        });
        out.extend_from_slice(&self.params.width.to_le_bytes());
        out.extend_from_slice(&self.total_updates.to_le_bytes());
        for s in &self.params.row_seeds {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for c in &self.counters {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<CountMinSketch, SketchError> {
        if bytes.len() < HEADER_LEN {
            return Err(SketchError::Malformed("truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(SketchError::Malformed("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(SketchError::Malformed("unsupported version"));
        }
        let depth = bytes[5];
        let key_mode = match bytes[6] {
            0 => KeyMode::PerSourceIp,
            1 => KeyMode::PerFiveTuple,
            _ => return Err(SketchError::Malformed("unknown key mode")),
        };
        let count_mode = match bytes[7] {
            0 => CountMode::Bytes,
            1 => CountMode::Packets,
            _ => return Err(SketchError::Malformed("unknown count mode")),
        };
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let total_updates = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let cells = usize::from(depth)
            .checked_mul(width as usize)
            .ok_or(SketchError::Malformed("dimensions overflow"))?;
        let expected = HEADER_LEN + 8 * (usize::from(depth) + cells);
        if bytes.len() != expected {
            return Err(SketchError::Malformed("length does not match dimensions"));
        }
        let mut words = bytes[HEADER_LEN..].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()));
        let seeds: Vec<u64> = words.by_ref().take(usize::from(depth)).collect();
        let params = SketchParams::new(depth, width, seeds, key_mode)
            .map_err(|_| SketchError::Malformed("invalid parameters"))?
            .with_count_mode(count_mode);
        let mut sketch = CountMinSketch::new(params);
        sketch.counters = words.collect();
        sketch.total_updates = total_updates;
        Ok(sketch)
    }

    /// Encoding followed by an HMAC-SHA256 tag under the session key. Stands
    /// in for an attested channel out of the filter.
    pub fn encode_signed(&self, session_key: &[u8]) -> Vec<u8> {
        let mut out = self.encode();
        let tag = mac(session_key, &out);
        out.extend_from_slice(&tag);
        out
    }

    pub fn decode_signed(bytes: &[u8], session_key: &[u8]) -> Result<CountMinSketch, SketchError> {
        if bytes.len() < MAC_LEN {
            return Err(SketchError::Malformed("missing tag"));
        }
        let (body, tag) = bytes.split_at(bytes.len() - MAC_LEN);
        let mut m = Hmac::<Sha256>::new_from_slice(session_key).expect("hmac accepts any key length");
        m.update(body);
        m.verify_slice(tag).map_err(|_| SketchError::BadMac)?;
        Self::decode(body)
    }

    /// Non-zero counters as `row,bin,count` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,bin,count\n");
        let width = self.width();
        for (i, c) in self.counters.iter().enumerate().filter(|(_, c)| **c != 0) {
            let _ = writeln!(out, "{},{},{}", i / width, i % width, c);
        }
        out
    }
}

fn mac(key: &[u8], data: &[u8]) -> [u8; MAC_LEN] {
    let mut m = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
    m.update(data);
    m.finalize().into_bytes().into()
}
