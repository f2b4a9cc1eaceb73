//! Brute force over a reduced key space, search-rate benchmark and the
//! linear time model fitted to it.

use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use thiserror::Error;

use crate::aes::{encrypt, expand_key, shared_tables, Block, Key128};
use crate::attack::{CandidateSets, POSITIONS};

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("at least one known plaintext/ciphertext pair is required")]
    NoPairs,
    #[error("key space of {0} keys cannot be enumerated")]
    KeyspaceTooLarge(BigUint),
    #[error("{0} cannot be split into 16 positions of at most 256 values")]
    Unfactorable(u128),
    #[error("no fit point has key space >= {min_size}")]
    NoFitPoints { min_size: f64 },
    #[error("unknown search order {0:?}")]
    UnknownOrder(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SearchOrder {
    /// Per position, highest correlation score first.
    #[default]
    Score,
    /// Per position, ascending byte value.
    Lex,
}

impl FromStr for SearchOrder {
    type Err = SearchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "score" => Ok(SearchOrder::Score),
            "lex" => Ok(SearchOrder::Lex),
            other => Err(SearchError::UnknownOrder(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchOptions {
    pub order: SearchOrder,
    pub threads: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            order: SearchOrder::Score,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub found: Option<Key128>,
    /// Canonical index of the match plus one, or the whole key space.
    pub keys_tested: u128,
    pub elapsed: f64,
}

/// Keys handed to a worker at a time.
const CHUNK: u128 = 1 << 16;

struct Space {
    digits: [Vec<u8>; POSITIONS],
    radix: [u128; POSITIONS],
    size: u128,
}

impl Space {
    fn new(cands: &CandidateSets, order: SearchOrder) -> Result<Self, SearchError> {
        let digits: [Vec<u8>; POSITIONS] = std::array::from_fn(|j| {
            let mut v: Vec<u8> = cands.values(j).collect();
            if order == SearchOrder::Lex {
                v.sort_unstable();
            }
            v
        });
        let size = digits
            .iter()
            .try_fold(1u128, |acc, d| acc.checked_mul(d.len() as u128))
            .ok_or_else(|| SearchError::KeyspaceTooLarge(cands.keyspace_size()))?;
        Ok(Self {
            radix: std::array::from_fn(|j| digits[j].len() as u128),
            digits,
            size,
        })
    }

    /// Mixed-radix digits of `index`, position 15 least significant.
    fn unrank(&self, mut index: u128) -> [usize; POSITIONS] {
        let mut d = [0usize; POSITIONS];
        for j in (0..POSITIONS).rev() {
            d[j] = (index % self.radix[j]) as usize;
            index /= self.radix[j];
        }
        d
    }

    fn key(&self, d: &[usize; POSITIONS]) -> Key128 {
        Key128(std::array::from_fn(|j| self.digits[j][d[j]]))
    }

    fn increment(&self, d: &mut [usize; POSITIONS]) {
        for j in (0..POSITIONS).rev() {
            d[j] += 1;
            if (d[j] as u128) < self.radix[j] {
                return;
            }
            d[j] = 0;
        }
    }
}

fn matches_all(key: &Key128, pairs: &[(Block, Block)]) -> bool {
    let rk = expand_key(key);
    let tables = shared_tables();
    pairs.iter().all(|(pt, ct)| encrypt(pt, &rk, tables) == *ct)
}

/// First index in `[start, end)` whose key maps every pair correctly.
fn scan(space: &Space, pairs: &[(Block, Block)], start: u128, end: u128) -> Option<u128> {
    let mut d = space.unrank(start);
    let mut i = start;
    while i < end {
        if matches_all(&space.key(&d), pairs) {
            return Some(i);
        }
        i += 1;
        space.increment(&mut d);
    }
    None
}

struct Dispatch {
    next: u128,
    best: Option<u128>,
}

/// Enumerates the candidate product and returns the first key (in canonical
/// order) that encrypts every pair correctly. The result does not depend on
/// the thread count.
pub fn brute_force(
    cands: &CandidateSets,
    pairs: &[(Block, Block)],
    opts: &SearchOptions,
) -> Result<SearchOutcome, SearchError> {
    if pairs.is_empty() {
        return Err(SearchError::NoPairs);
    }
    let start = Instant::now();
    let space = Space::new(cands, opts.order)?;
    let dispatch = Mutex::new(Dispatch { next: 0, best: None });
    let threads = opts.threads.max(1);

    let worker = || loop {
        let (lo, hi) = {
            let mut g = dispatch.lock().unwrap();
            if g.next >= space.size || g.best.is_some_and(|b| b < g.next) {
                return;
            }
            let lo = g.next;
            g.next = lo.saturating_add(CHUNK).min(space.size);
            (lo, g.next)
        };
        // Chunks are claimed in increasing order, so every chunk below a
        // match has already been claimed and will finish its scan.
        if let Some(i) = scan(&space, pairs, lo, hi) {
            let mut g = dispatch.lock().unwrap();
            if g.best.is_none_or(|b| i < b) {
                g.best = Some(i);
            }
        }
    };
    if threads == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(worker);
            }
        });
    }

    let best = dispatch.into_inner().unwrap().best;
    let found = best.map(|i| space.key(&space.unrank(i)));
    if found.is_some() && pairs.len() == 1 {
        log::warn!("key accepted on a single plaintext/ciphertext pair; a second pair would confirm it");
    }
    Ok(SearchOutcome {
        found,
        keys_tested: best.map_or(space.size, |i| i + 1),
        elapsed: start.elapsed().as_secs_f64(),
    })
}

fn prime_factors(mut n: u128) -> Vec<u128> {
    let mut out = Vec::new();
    let mut p = 2u128;
    while p * p <= n {
        while n.is_multiple_of(p) {
            out.push(p);
            n /= p;
        }
        p += 1;
        if p > 256 {
            break;
        }
    }
    if n > 1 {
        out.push(n);
    }
    out
}

impl CandidateSets {
    /// A product space of exactly `size` keys: position j holds values
    /// `0..n_j`. Fails when `size` has a prime factor above 256 or does
    /// not fit in 16 such positions.
    pub fn with_keyspace(size: u128) -> Result<Self, SearchError> {
        if size == 0 {
            return Err(SearchError::Unfactorable(size));
        }
        let mut factors = prime_factors(size);
        if factors.iter().any(|&f| f > 256) {
            return Err(SearchError::Unfactorable(size));
        }
        factors.sort_unstable_by(|a, b| b.cmp(a));
        let mut bins = [1u128; POSITIONS];
        for f in factors {
            let slot = bins
                .iter_mut()
                .find(|b| **b * f <= 256)
                .ok_or(SearchError::Unfactorable(size))?;
            *slot *= f;
        }
        let values = bins.iter().map(|&n| (0..n).map(|v| v as u8).collect()).collect();
        Ok(CandidateSets::from_values(values).expect("bins are within 1..=256"))
    }
}

/// Worst-case search time for each key space size on this machine. The
/// searched space never contains the key that produced the pair.
pub fn measure_search_rate(sizes: &[u128], threads: usize) -> Result<Vec<(u128, f64)>, SearchError> {
    let key = Key128([0xff; 16]);
    let pt = Block([0x5a; 16]);
    let pair = (pt, encrypt(&pt, &expand_key(&key), shared_tables()));
    let opts = SearchOptions {
        order: SearchOrder::Lex,
        threads,
    };
    sizes
        .iter()
        .map(|&size| {
            // Values run 0..n per position, so 0xff..ff lies outside any
            // space that is not the full one.
            let cands = CandidateSets::with_keyspace(size)?;
            let out = brute_force(&cands, &[pair], &opts)?;
            debug_assert!(out.found.is_none());
            Ok((size, out.elapsed))
        })
        .collect()
}

/// Default lower bound on key-space size for fitting; smaller spaces sit
/// on the timer floor.
pub const DEFAULT_FIT_MIN_SIZE: f64 = 1e8;

/// Through-origin least squares: alpha = Σxy / Σx² over points with
/// x >= `min_size`.
pub fn fit_rate(points: &[(f64, f64)], min_size: f64) -> Result<f64, SearchError> {
    let kept: Vec<_> = points.iter().filter(|(x, _)| *x >= min_size).collect();
    if kept.is_empty() {
        return Err(SearchError::NoFitPoints { min_size });
    }
    let sxy: f64 = kept.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = kept.iter().map(|(x, _)| x * x).sum();
    Ok(sxy / sxx)
}

/// Uncentered R² of the through-origin model `y = alpha·x`.
pub fn r_squared(points: &[(f64, f64)], alpha: f64) -> f64 {
    let ss_res: f64 = points.iter().map(|(x, y)| (y - alpha * x).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|(_, y)| y * y).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

pub fn estimate_search_time(keyspace: &BigUint, alpha: f64) -> f64 {
    if keyspace.is_zero() {
        return 0.0;
    }
    keyspace.to_f64().unwrap_or(f64::INFINITY) * alpha
}

/// Reference brute-force timings on a 2.1 GHz dual-core machine:
/// (key space, seconds).
pub const REFERENCE_TIMINGS: [(f64, f64); 11] = [
    (1e2, 0.01),
    (1e3, 0.02),
    (1e4, 0.02),
    (1e5, 0.02),
    (1e6, 0.09),
    (1e7, 0.53),
    (1e8, 4.58),
    (1e9, 40.23),
    (1e10, 348.23),
    (1e11, 2977.83),
    (1e12, 24512.69),
];

/// Published gradient of the reference timings, seconds per key.
pub const REFERENCE_ALPHA: f64 = 2.4e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchModel {
    pub alpha: f64,
    pub fit_points: Vec<(f64, f64)>,
}

impl SearchModel {
    pub fn fit(points: Vec<(f64, f64)>, min_size: f64) -> Result<Self, SearchError> {
        let alpha = fit_rate(&points, min_size)?;
        Ok(Self {
            alpha,
            fit_points: points,
        })
    }

    pub fn estimate(&self, keyspace: &BigUint) -> f64 {
        estimate_search_time(keyspace, self.alpha)
    }
}
