//! Timing-disturbance countermeasures.
//!
//! Each countermeasure works in two modes. Natively it executes real
//! disturbance code around the encryption. In simulation, [`apply`] reports
//! what that code would have cost: extra cycles, extra table reads and their
//! injection points, or a memory-layout override.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;

use rand::RngCore;
use thiserror::Error;

use crate::aes::{
    encrypt_traced, Access, Block, LookupSink, RoundKeys, TTableSet, TableId, TableSource,
};
use crate::cache::LayoutKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum CountermeasureKind {
    #[default]
    None,
    RandomLoop,
    SpecifiedLoop,
    Prefetch,
    CachePartition,
}

impl CountermeasureKind {
    pub const ALL: [CountermeasureKind; 5] = [
        CountermeasureKind::None,
        CountermeasureKind::RandomLoop,
        CountermeasureKind::SpecifiedLoop,
        CountermeasureKind::Prefetch,
        CountermeasureKind::CachePartition,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CountermeasureKind::None => "none",
            CountermeasureKind::RandomLoop => "random_loop",
            CountermeasureKind::SpecifiedLoop => "specified_loop",
            CountermeasureKind::Prefetch => "prefetch",
            CountermeasureKind::CachePartition => "cache_partition",
        }
    }
}

impl fmt::Display for CountermeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CountermeasureError {
    #[error("unknown countermeasure {0:?}")]
    UnknownKind(String),
    #[error("countermeasure state does not match kind {kind}")]
    StateMismatch { kind: CountermeasureKind },
}

impl FromStr for CountermeasureKind {
    type Err = CountermeasureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let kind = match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => CountermeasureKind::None,
            "random_loop" => CountermeasureKind::RandomLoop,
            "specified_loop" => CountermeasureKind::SpecifiedLoop,
            "prefetch" => CountermeasureKind::Prefetch,
            "cache_partition" => CountermeasureKind::CachePartition,
            _ => return Err(CountermeasureError::UnknownKind(s.to_string())),
        };
        Ok(kind)
    }
}

/// Cycle costs charged for disturbance code in simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    /// Cost of drawing one random number.
    pub rng_cycles: u64,
    /// Cost of one empty loop iteration.
    pub loop_iter_cycles: u64,
    /// Cost of the integer division in the specified loop.
    pub div_cycles: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            rng_cycles: 3800,
            loop_iter_cycles: 7,
            div_cycles: 20,
        }
    }
}

pub const RANDOM_LOOP_MODULUS: u32 = 20;

/// Iteration count for the random loop: `rand() % 20`.
pub fn random_loop_next<R: RngCore + ?Sized>(prng: &mut R) -> u32 {
    prng.next_u32() % RANDOM_LOOP_MODULUS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecifiedLoopState {
    pub gen: u32,
}

impl SpecifiedLoopState {
    pub const INITIAL: u32 = 1777;
    pub const DIVISOR: u32 = 17;
    pub const RESET_THRESHOLD: u32 = 6;
}

impl Default for SpecifiedLoopState {
    fn default() -> Self {
        Self {
            gen: Self::INITIAL,
        }
    }
}

/// Divides the generator by 17; a quotient below 6 resets it and runs no loop.
pub fn specified_loop_next(state: &mut SpecifiedLoopState) -> u32 {
    state.gen /= SpecifiedLoopState::DIVISOR;
    if state.gen < SpecifiedLoopState::RESET_THRESHOLD {
        state.gen = SpecifiedLoopState::INITIAL;
        0
    } else {
        state.gen
    }
}

pub const PREFETCH_WIDTH: usize = 16;

/// Sliding 16-entry window over Te0..Te3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct PrefetchState {
    pub window_start: u8,
}

/// Returns the current window as 64 reads (for each index, Te0..Te3) and
/// advances the window by 16, wrapping at 256.
pub fn prefetch_next(state: &mut PrefetchState) -> Vec<Access> {
    let start = state.window_start;
    let mut out = Vec::with_capacity(4 * PREFETCH_WIDTH);
    for i in 0..PREFETCH_WIDTH as u8 {
        let index = start.wrapping_add(i);
        for table in TableId::MAIN {
            out.push(Access { table, index });
        }
    }
    state.window_start = start.wrapping_add(PREFETCH_WIDTH as u8);
    out
}

/// Table reads inserted before trace entry `before_entry`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Injection {
    pub before_entry: usize,
    pub accesses: Vec<Access>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DisturbanceReport {
    pub extra_cycles: u64,
    pub injections: Vec<Injection>,
    pub layout_override: Option<LayoutKind>,
}

impl DisturbanceReport {
    pub fn is_empty(&self) -> bool {
        self.extra_cycles == 0 && self.injections.is_empty() && self.layout_override.is_none()
    }

    pub fn extra_access_count(&self) -> usize {
        self.injections.iter().map(|i| i.accesses.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CountermeasureState {
    None,
    RandomLoop,
    SpecifiedLoop(SpecifiedLoopState),
    Prefetch(PrefetchState),
    CachePartition,
}

impl CountermeasureState {
    pub fn new(kind: CountermeasureKind) -> Self {
        match kind {
            CountermeasureKind::None => CountermeasureState::None,
            CountermeasureKind::RandomLoop => CountermeasureState::RandomLoop,
            CountermeasureKind::SpecifiedLoop => {
                CountermeasureState::SpecifiedLoop(SpecifiedLoopState::default())
            }
            CountermeasureKind::Prefetch => CountermeasureState::Prefetch(PrefetchState::default()),
            CountermeasureKind::CachePartition => CountermeasureState::CachePartition,
        }
    }

    pub fn kind(&self) -> CountermeasureKind {
        match self {
            CountermeasureState::None => CountermeasureKind::None,
            CountermeasureState::RandomLoop => CountermeasureKind::RandomLoop,
            CountermeasureState::SpecifiedLoop(_) => CountermeasureKind::SpecifiedLoop,
            CountermeasureState::Prefetch(_) => CountermeasureKind::Prefetch,
            CountermeasureState::CachePartition => CountermeasureKind::CachePartition,
        }
    }
}

/// Main-loop iterations of one AES-128 encryption (`rounds >> 1`).
pub const MAIN_LOOP_ITERATIONS: usize = crate::aes::ROUNDS >> 1;

/// Simulated cost of one encryption's disturbance. Never touches the data path.
pub fn apply<R: RngCore + ?Sized>(
    kind: CountermeasureKind,
    state: &mut CountermeasureState,
    cost: &CostModel,
    prng: &mut R,
) -> Result<DisturbanceReport, CountermeasureError> {
    if state.kind() != kind {
        return Err(CountermeasureError::StateMismatch { kind });
    }
    let mut report = DisturbanceReport::default();
    match state {
        CountermeasureState::None => {}
        CountermeasureState::RandomLoop => {
            let n = random_loop_next(prng) as u64;
            report.extra_cycles = cost.rng_cycles + n * cost.loop_iter_cycles;
        }
        CountermeasureState::SpecifiedLoop(s) => {
            let n = specified_loop_next(s) as u64;
            report.extra_cycles = cost.div_cycles + n * cost.loop_iter_cycles;
        }
        CountermeasureState::Prefetch(s) => {
            report.injections = (0..MAIN_LOOP_ITERATIONS)
                .map(|it| Injection {
                    before_entry: 32 * it,
                    accesses: prefetch_next(s),
                })
                .collect();
        }
        CountermeasureState::CachePartition => {
            report.layout_override = Some(LayoutKind::Partitioned);
        }
    }
    Ok(report)
}

/// A countermeasure with its own state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Countermeasure {
    state: CountermeasureState,
}

impl Countermeasure {
    pub fn new(kind: CountermeasureKind) -> Self {
        Self {
            state: CountermeasureState::new(kind),
        }
    }

    pub fn kind(&self) -> CountermeasureKind {
        self.state.kind()
    }

    pub fn state(&self) -> &CountermeasureState {
        &self.state
    }

    pub fn simulate<R: RngCore + ?Sized>(&mut self, cost: &CostModel, prng: &mut R) -> DisturbanceReport {
        apply(self.kind(), &mut self.state, cost, prng).expect("state built from its own kind")
    }

    /// Runs the real disturbance code around a native encryption.
    pub fn encrypt_native<R: RngCore + ?Sized>(
        &mut self,
        pt: &Block,
        rk: &RoundKeys,
        tables: &NativeTables,
        prng: &mut R,
    ) -> Block {
        match &mut self.state {
            CountermeasureState::None => encrypt_traced(pt, rk, &tables.packed, &mut ()),
            CountermeasureState::RandomLoop => {
                spin(random_loop_next(prng));
                encrypt_traced(pt, rk, &tables.packed, &mut ())
            }
            CountermeasureState::SpecifiedLoop(s) => {
                spin(specified_loop_next(s));
                encrypt_traced(pt, rk, &tables.packed, &mut ())
            }
            CountermeasureState::Prefetch(s) => {
                let mut sink = PrefetchSink {
                    tables: &tables.packed,
                    state: s,
                    buffers: [[0; PREFETCH_WIDTH]; 4],
                };
                let ct = encrypt_traced(pt, rk, &tables.packed, &mut sink);
                black_box(&sink.buffers);
                ct
            }
            CountermeasureState::CachePartition => {
                encrypt_traced(pt, rk, tables.partitioned(), &mut ())
            }
        }
    }
}

fn spin(n: u32) {
    let mut cnt = 0u32;
    for _ in 0..black_box(n) {
        cnt = black_box(cnt + 1);
    }
    black_box(cnt);
}

/// Copies the current window of Te0..Te3 into four 16-entry buffers at the
/// top of each main-loop iteration.
struct PrefetchSink<'a> {
    tables: &'a TTableSet,
    state: &'a mut PrefetchState,
    buffers: [[u32; PREFETCH_WIDTH]; 4],
}

impl LookupSink for PrefetchSink<'_> {
    #[inline(always)]
    fn lookup(&mut self, _table: TableId, _index: u8) {}

    fn main_loop_iteration(&mut self, _iteration: usize) {
        for access in prefetch_next(self.state) {
            let t = access.table.index();
            self.buffers[t][access.index as usize % PREFETCH_WIDTH] =
                black_box(self.tables.te[t][access.index as usize]);
        }
    }
}

/// Alignment of each table in the partitioned layout.
pub const PARTITION_ALIGNMENTS: [usize; 5] = [0x10, 0x1000, 0x10000, 0x100000, 0x1000000];

/// Tables copied into buffers aligned per [`PARTITION_ALIGNMENTS`].
pub struct AlignedTTables {
    storage: [Vec<u32>; 5],
    offsets: [usize; 5],
}

impl AlignedTTables {
    pub fn new(source: &TTableSet) -> Self {
        let mut offsets = [0usize; 5];
        let storage = std::array::from_fn(|t| {
            let align = PARTITION_ALIGNMENTS[t];
            let mut v = vec![0u32; align / 4 + 256];
            let addr = v.as_ptr() as usize;
            let off = ((align - addr % align) % align) / 4;
            v[off..off + 256].copy_from_slice(&source.te[t]);
            offsets[t] = off;
            v
        });
        Self { storage, offsets }
    }

    pub fn address(&self, id: TableId) -> usize {
        self.table(id).as_ptr() as usize
    }
}

impl TableSource for AlignedTTables {
    #[inline(always)]
    fn table(&self, id: TableId) -> &[u32; 256] {
        let t = id.index();
        let off = self.offsets[t];
        self.storage[t][off..off + 256].try_into().unwrap()
    }
}

/// Native-mode tables: the packed set plus, on demand, the aligned copies.
pub struct NativeTables {
    pub packed: TTableSet,
    partitioned: std::sync::OnceLock<AlignedTTables>,
}

impl NativeTables {
    pub fn new() -> Self {
        Self {
            packed: crate::aes::generate_ttables(),
            partitioned: std::sync::OnceLock::new(),
        }
    }

    pub fn partitioned(&self) -> &AlignedTTables {
        self.partitioned
            .get_or_init(|| AlignedTTables::new(&self.packed))
    }
}

impl Default for NativeTables {
    fn default() -> Self {
        Self::new()
    }
}
