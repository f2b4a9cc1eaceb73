//! Deterministic set-associative LRU cache model.
//!
//! Converts an encryption's table reads into hits, misses and synthetic cycle
//! counts. The default leak model flushes the cache before every encryption.
//! An optional ambient-pressure model stands in for the rest of the server's
//! working set: before each encryption the tables are resident except in a
//! seeded subset of sets, which the ambient data has taken over.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aes::{Access, AccessTrace, TableId};
use crate::countermeasure::{DisturbanceReport, PARTITION_ALIGNMENTS};

/// Bytes per T-table entry.
pub const ENTRY_BYTES: u64 = 4;
/// Bytes per T-table.
pub const TABLE_BYTES: u64 = 256 * ENTRY_BYTES;

const INVALID: u64 = u64::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum CacheError {
    #[error("invalid cache config: {0}")]
    Config(String),
    #[error("invalid memory layout: {0}")]
    Layout(String),
    #[error("injection point {at} beyond trace of length {len}")]
    InjectionOutOfRange { at: usize, len: usize },
}

/// Fraction of cache sets claimed by non-table data between encryptions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmbientPressure {
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheConfig {
    pub line_size: u64,
    pub num_sets: u64,
    pub associativity: usize,
    pub hit_cycles: u64,
    pub miss_cycles: u64,
    pub cold_flush: bool,
    pub ambient: Option<AmbientPressure>,
}

impl Default for CacheConfig {
    /// 16 KiB, 64-byte lines, 4-way.
    fn default() -> Self {
        Self {
            line_size: 64,
            num_sets: 64,
            associativity: 4,
            hit_cycles: 2,
            miss_cycles: 50,
            cold_flush: true,
            ambient: None,
        }
    }
}

impl CacheConfig {
    /// 16 KiB, 4-byte lines (one table entry per line), 4-way.
    pub fn per_entry() -> Self {
        Self {
            line_size: 4,
            num_sets: 1024,
            ..Self::default()
        }
    }

    pub fn capacity(&self) -> u64 {
        self.line_size * self.num_sets * self.associativity as u64
    }

    /// Bytes covered by one way: addresses this far apart share a set.
    pub fn way_span(&self) -> u64 {
        self.line_size * self.num_sets
    }

    pub fn entries_per_line(&self) -> u64 {
        (self.line_size / ENTRY_BYTES).max(1)
    }

    pub fn line_of(&self, addr: u64) -> u64 {
        addr / self.line_size
    }

    pub fn set_index(&self, addr: u64) -> usize {
        (self.line_of(addr) % self.num_sets) as usize
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        if !self.line_size.is_power_of_two() {
            return Err(CacheError::Config(format!(
                "line_size {} is not a power of two",
                self.line_size
            )));
        }
        if !self.num_sets.is_power_of_two() {
            return Err(CacheError::Config(format!(
                "num_sets {} is not a power of two",
                self.num_sets
            )));
        }
        if self.associativity == 0 {
            return Err(CacheError::Config("associativity must be >= 1".into()));
        }
        if self.hit_cycles == 0 || self.miss_cycles == 0 {
            return Err(CacheError::Config("cycle costs must be positive".into()));
        }
        if let Some(a) = &self.ambient {
            if !(0.0..=1.0).contains(&a.fraction) {
                return Err(CacheError::Config(format!(
                    "ambient fraction {} outside [0, 1]",
                    a.fraction
                )));
            }
        }
        Ok(())
    }

    /// Sets claimed by ambient data, sorted ascending.
    pub fn ambient_sets(&self) -> Vec<usize> {
        let Some(a) = &self.ambient else {
            return Vec::new();
        };
        let n = self.num_sets as usize;
        let amount = ((a.fraction * n as f64).round() as usize).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mut sets = rand::seq::index::sample(&mut rng, n, amount).into_vec();
        sets.sort_unstable();
        sets
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum LayoutKind {
    #[default]
    Packed,
    Partitioned,
}

impl LayoutKind {
    pub fn layout(self) -> MemoryLayout {
        match self {
            LayoutKind::Packed => MemoryLayout::packed(),
            LayoutKind::Partitioned => MemoryLayout::partitioned(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutKind::Packed => "packed",
            LayoutKind::Partitioned => "partitioned",
        }
    }
}

impl fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutKind {
    type Err = CacheError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "packed" => Ok(LayoutKind::Packed),
            "partitioned" => Ok(LayoutKind::Partitioned),
            other => Err(CacheError::Layout(format!("unknown layout {other:?}"))),
        }
    }
}

/// Byte address of each table's first entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MemoryLayout {
    bases: [u64; 5],
}

impl MemoryLayout {
    pub fn new(bases: [u64; 5]) -> Result<Self, CacheError> {
        for i in 0..5 {
            if !bases[i].is_multiple_of(ENTRY_BYTES) {
                return Err(CacheError::Layout(format!(
                    "Te{i} base {:#x} not entry aligned",
                    bases[i]
                )));
            }
            for j in i + 1..5 {
                let disjoint = bases[i] + TABLE_BYTES <= bases[j] || bases[j] + TABLE_BYTES <= bases[i];
                if !disjoint {
                    return Err(CacheError::Layout(format!("Te{i} and Te{j} overlap")));
                }
            }
        }
        Ok(Self { bases })
    }

    /// Tables back to back from address 0 (each 1 KiB, so 64-byte aligned).
    pub fn packed() -> Self {
        Self {
            bases: std::array::from_fn(|t| t as u64 * TABLE_BYTES),
        }
    }

    /// Each table at its partitioning alignment: 0x10, 0x1000, ..., 0x1000000.
    pub fn partitioned() -> Self {
        Self {
            bases: PARTITION_ALIGNMENTS.map(|a| a as u64),
        }
    }

    pub fn base(&self, table: TableId) -> u64 {
        self.bases[table.index()]
    }

    pub fn bases(&self) -> [u64; 5] {
        self.bases
    }

    pub fn end(&self) -> u64 {
        self.bases.iter().map(|b| b + TABLE_BYTES).max().unwrap_or(0)
    }

    /// Table whose region contains `addr`, if any.
    pub fn table_at(&self, addr: u64) -> Option<TableId> {
        TableId::ALL
            .into_iter()
            .find(|t| (self.base(*t)..self.base(*t) + TABLE_BYTES).contains(&addr))
    }
}

pub fn element_address(layout: &MemoryLayout, table: TableId, index: u8) -> u64 {
    layout.base(table) + ENTRY_BYTES * index as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessOutcome {
    Hit,
    Miss,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub accesses: u64,
}

/// Per-set recency lists, most recent first; `INVALID` marks empty ways.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheState {
    ways: Vec<u64>,
    assoc: usize,
    line_size: u64,
    num_sets: u64,
    pub stats: CacheStats,
}

impl CacheState {
    pub fn new(config: &CacheConfig) -> Result<Self, CacheError> {
        config.validate()?;
        Ok(Self {
            ways: vec![INVALID; config.num_sets as usize * config.associativity],
            assoc: config.associativity,
            line_size: config.line_size,
            num_sets: config.num_sets,
            stats: CacheStats::default(),
        })
    }

    fn touch(&mut self, addr: u64) -> AccessOutcome {
        let line = addr / self.line_size;
        let set = (line % self.num_sets) as usize;
        let tag = line / self.num_sets;
        let ways = &mut self.ways[set * self.assoc..(set + 1) * self.assoc];
        match ways.iter().position(|&t| t == tag) {
            Some(p) => {
                ways[..=p].rotate_right(1);
                AccessOutcome::Hit
            }
            None => {
                // The LRU way (last) falls off; empty ways sit at the tail.
                ways.rotate_right(1);
                ways[0] = tag;
                AccessOutcome::Miss
            }
        }
    }

    pub fn access(&mut self, addr: u64) -> AccessOutcome {
        let outcome = self.touch(addr);
        self.stats.accesses += 1;
        match outcome {
            AccessOutcome::Hit => self.stats.hits += 1,
            AccessOutcome::Miss => self.stats.misses += 1,
        }
        outcome
    }

    /// Empties every set; statistics are kept.
    pub fn flush(&mut self) {
        self.ways.fill(INVALID);
    }

    /// Resident line tags of `set`, most recent first.
    pub fn set_contents(&self, set: usize) -> Vec<u64> {
        self.ways[set * self.assoc..(set + 1) * self.assoc]
            .iter()
            .copied()
            .take_while(|&t| t != INVALID)
            .collect()
    }

    pub fn occupancy(&self, set: usize) -> usize {
        self.set_contents(set).len()
    }

    pub fn is_resident(&self, addr: u64) -> bool {
        let line = addr / self.line_size;
        let set = (line % self.num_sets) as usize;
        self.set_contents(set).contains(&(line / self.num_sets))
    }

    fn restore_lines(&mut self, snapshot: &[u64]) {
        self.ways.copy_from_slice(snapshot);
    }
}

pub fn access(state: &mut CacheState, addr: u64) -> AccessOutcome {
    state.access(addr)
}

pub fn flush(state: &mut CacheState) {
    state.flush()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimResult {
    pub hits: u64,
    pub misses: u64,
    pub cycles: u64,
}

/// First address of the region used for ambient lines: way-span aligned and
/// past every table.
fn ambient_base(layout: &MemoryLayout, config: &CacheConfig) -> u64 {
    let span = config.way_span();
    (layout.end() / span + 1) * span
}

fn touch_ambient(state: &mut CacheState, layout: &MemoryLayout, config: &CacheConfig, sets: &[usize]) {
    let base = ambient_base(layout, config);
    for &set in sets {
        for way in 0..config.associativity as u64 {
            state.touch(base + (way * config.num_sets + set as u64) * config.line_size);
        }
    }
}

/// Cache contents at the start of an encryption under the cold-flush model.
fn prime(state: &mut CacheState, layout: &MemoryLayout, config: &CacheConfig, ambient_sets: &[usize]) {
    state.flush();
    if config.ambient.is_some() {
        for table in TableId::ALL {
            for index in 0..=255u8 {
                state.touch(element_address(layout, table, index));
            }
        }
        touch_ambient(state, layout, config, ambient_sets);
    }
}

fn replay(
    state: &mut CacheState,
    trace: &AccessTrace,
    layout: &MemoryLayout,
    disturbance: &DisturbanceReport,
    config: &CacheConfig,
) -> Result<SimResult, CacheError> {
    for inj in &disturbance.injections {
        if inj.before_entry > trace.len() {
            return Err(CacheError::InjectionOutOfRange {
                at: inj.before_entry,
                len: trace.len(),
            });
        }
    }
    let mut hits = 0u64;
    let mut misses = 0u64;
    let mut one = |state: &mut CacheState, a: &Access| match state
        .access(element_address(layout, a.table, a.index))
    {
        AccessOutcome::Hit => hits += 1,
        AccessOutcome::Miss => misses += 1,
    };
    let mut pending = disturbance.injections.iter().peekable();
    for (i, a) in trace.entries.iter().enumerate() {
        while let Some(inj) = pending.next_if(|inj| inj.before_entry <= i) {
            inj.accesses.iter().for_each(|x| one(state, x));
        }
        one(state, a);
    }
    for inj in pending {
        inj.accesses.iter().for_each(|x| one(state, x));
    }
    Ok(SimResult {
        hits,
        misses,
        cycles: hits * config.hit_cycles + misses * config.miss_cycles + disturbance.extra_cycles,
    })
}

/// Replays one encryption's trace (with injected disturbance reads) and
/// prices it.
pub fn run_encryption(
    state: &mut CacheState,
    trace: &AccessTrace,
    layout: &MemoryLayout,
    disturbance: &DisturbanceReport,
    config: &CacheConfig,
) -> Result<SimResult, CacheError> {
    let ambient_sets = config.ambient_sets();
    if config.cold_flush {
        let stats = state.stats;
        prime(state, layout, config, &ambient_sets);
        state.stats = stats;
    } else if config.ambient.is_some() {
        touch_ambient(state, layout, config, &ambient_sets);
    }
    replay(state, trace, layout, disturbance, config)
}

/// A cache plus memoized start-of-encryption snapshots, for long runs.
#[derive(Clone, Debug)]
pub struct CacheSim {
    config: CacheConfig,
    state: CacheState,
    ambient_sets: Vec<usize>,
    primed: Vec<(MemoryLayout, Vec<u64>)>,
}

impl CacheSim {
    pub fn new(config: CacheConfig) -> Result<Self, CacheError> {
        let state = CacheState::new(&config)?;
        let ambient_sets = config.ambient_sets();
        Ok(Self {
            config,
            state,
            ambient_sets,
            primed: Vec::new(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn state(&self) -> &CacheState {
        &self.state
    }

    pub fn run_encryption(
        &mut self,
        trace: &AccessTrace,
        layout: &MemoryLayout,
        disturbance: &DisturbanceReport,
    ) -> Result<SimResult, CacheError> {
        if self.config.cold_flush {
            let snapshot = match self.primed.iter().position(|(l, _)| l == layout) {
                Some(i) => i,
                None => {
                    let mut scratch = CacheState::new(&self.config)?;
                    prime(&mut scratch, layout, &self.config, &self.ambient_sets);
                    self.primed.push((*layout, scratch.ways));
                    self.primed.len() - 1
                }
            };
            self.state.restore_lines(&self.primed[snapshot].1);
        } else if self.config.ambient.is_some() {
            touch_ambient(&mut self.state, layout, &self.config, &self.ambient_sets);
        }
        replay(&mut self.state, trace, layout, disturbance, &self.config)
    }
}

/// Distinct cache lines touched by `trace` under `layout`.
pub fn distinct_lines(trace: &AccessTrace, layout: &MemoryLayout, config: &CacheConfig) -> usize {
    let mut lines: Vec<u64> = trace
        .iter()
        .map(|a| config.line_of(element_address(layout, a.table, a.index)))
        .collect();
    lines.sort_unstable();
    lines.dedup();
    lines.len()
}
