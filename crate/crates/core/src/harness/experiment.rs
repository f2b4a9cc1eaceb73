//! Study run, attack run, correlation, candidate extraction and optional
//! search, repeated over seeded runs and summarized as an
//! [`EfficiencyReport`].

use std::fmt;
use std::path::Path;

use num_bigint::BigUint;

use super::config::{parse_count, parse_value, read_kv_file, ConfigError};
use super::report::{slowdown, EfficiencyReport};
use crate::aes::{Block, Key128};
use crate::attack::{
    candidate_sets, collect_profile, correlate, missing_bytes, signature, CandidateSets, CollectOptions,
    PlaintextGenerator,
};
use crate::cache::{AmbientPressure, CacheConfig, LayoutKind};
use crate::channel::{Backend, ChannelConfig, EncryptionService, TimingScope, DEFAULT_PACKET_SIZE};
use crate::countermeasure::{CostModel, CountermeasureKind};
use crate::keysearch::{brute_force, estimate_search_time, SearchOptions, SearchOrder, SearchOutcome, REFERENCE_ALPHA};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub countermeasure: CountermeasureKind,
    pub backend: Backend,
    pub timing_scope: TimingScope,
    pub packet_size: usize,
    pub samples_study: u64,
    pub samples_attack: u64,
    pub retention: f64,
    pub seed: u64,
    pub runs: usize,
    pub study_key: Key128,
    pub attack_key: Key128,
    pub layout: LayoutKind,
    pub cache: CacheConfig,
    pub cost: CostModel,
    pub search: bool,
    pub search_limit: u128,
    pub search_order: SearchOrder,
    pub threads: usize,
    /// Seconds per key for the search-time estimate.
    pub alpha: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cache = CacheConfig::per_entry();
        cache.ambient = Some(AmbientPressure {
            fraction: 0.5,
            seed: 7,
        });
        Self {
            countermeasure: CountermeasureKind::None,
            backend: Backend::Simulated,
            timing_scope: TimingScope::EncryptOnly,
            packet_size: DEFAULT_PACKET_SIZE,
            samples_study: 1 << 15,
            samples_attack: 1 << 15,
            retention: 1.0,
            seed: 0,
            runs: 5,
            study_key: Key128(std::array::from_fn(|i| i as u8)),
            attack_key: "2b7e151628aed2a6abf7158809cf4f3c".parse().unwrap(),
            layout: LayoutKind::Packed,
            cache,
            cost: CostModel::default(),
            search: true,
            search_limit: 1 << 32,
            search_order: SearchOrder::Score,
            threads: SearchOptions::default().threads,
            alpha: REFERENCE_ALPHA,
        }
    }
}

/// Every key accepted by [`ExperimentConfig::set`].
pub const CONFIG_KEYS: [&str; 29] = [
    "countermeasure",
    "backend",
    "timing_scope",
    "packet_size",
    "samples_study",
    "samples_attack",
    "retention",
    "seed",
    "runs",
    "study_key",
    "attack_key",
    "layout",
    "cache.line_size",
    "cache.sets",
    "cache.assoc",
    "cache.hit_cycles",
    "cache.miss_cycles",
    "cache.cold_flush",
    "cache.ambient_fraction",
    "cache.ambient_seed",
    "rng_cycles",
    "loop_iter_cycles",
    "div_cycles",
    "search",
    "search_limit",
    "search_order",
    "threads",
    "alpha",
    "samples",
];

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting. `samples` sets both phases.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let count = |v: &str| -> Result<u64, ConfigError> {
            parse_count(key, v)?.try_into().map_err(|_| ConfigError::Value {
                key: key.into(),
                value: v.into(),
                reason: "too large".into(),
            })
        };
        match key {
            "countermeasure" => self.countermeasure = parse_value(key, value)?,
            "backend" => self.backend = parse_value(key, value)?,
            "timing_scope" => self.timing_scope = parse_value(key, value)?,
            "packet_size" => self.packet_size = count(value)? as usize,
            "samples_study" => self.samples_study = count(value)?,
            "samples_attack" => self.samples_attack = count(value)?,
            "samples" => {
                self.samples_study = count(value)?;
                self.samples_attack = self.samples_study;
            }
            "retention" => self.retention = parse_value(key, value)?,
            "seed" => self.seed = count(value)?,
            "runs" => self.runs = count(value)? as usize,
            "study_key" => self.study_key = parse_value(key, value)?,
            "attack_key" => self.attack_key = parse_value(key, value)?,
            "layout" => self.layout = parse_value(key, value)?,
            "cache.line_size" => self.cache.line_size = count(value)?,
            "cache.sets" => self.cache.num_sets = count(value)?,
            "cache.assoc" => self.cache.associativity = count(value)? as usize,
            "cache.hit_cycles" => self.cache.hit_cycles = count(value)?,
            "cache.miss_cycles" => self.cache.miss_cycles = count(value)?,
            "cache.cold_flush" => self.cache.cold_flush = parse_bool(key, value)?,
            "cache.ambient_fraction" => {
                if value.trim() == "none" {
                    self.cache.ambient = None;
                } else {
                    let fraction = parse_value(key, value)?;
                    let seed = self.cache.ambient.map_or(0, |a| a.seed);
                    self.cache.ambient = Some(AmbientPressure { fraction, seed });
                }
            }
            "cache.ambient_seed" => {
                let seed = count(value)?;
                let fraction = self.cache.ambient.map_or(0.0, |a| a.fraction);
                self.cache.ambient = Some(AmbientPressure { fraction, seed });
            }
            "rng_cycles" => self.cost.rng_cycles = count(value)?,
            "loop_iter_cycles" => self.cost.loop_iter_cycles = count(value)?,
            "div_cycles" => self.cost.div_cycles = count(value)?,
            "search" => self.search = parse_bool(key, value)?,
            "search_limit" => self.search_limit = parse_count(key, value)?,
            "search_order" => self.search_order = parse_value(key, value)?,
            "threads" => self.threads = count(value)?.max(1) as usize,
            "alpha" => self.alpha = parse_value(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn apply<'a, I>(&mut self, pairs: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let kv = read_kv_file(path)?;
        let mut cfg = Self::default();
        cfg.apply(kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| ConfigError::Value {
            key: key.into(),
            value: String::new(),
            reason: reason.into(),
        };
        if self.samples_study == 0 || self.samples_attack == 0 {
            return Err(bad("samples", "must be at least 1"));
        }
        if self.runs == 0 {
            return Err(bad("runs", "must be at least 1"));
        }
        if !(self.retention >= 0.0) {
            return Err(bad("retention", "must be non-negative"));
        }
        if !(self.alpha > 0.0) {
            return Err(bad("alpha", "must be positive"));
        }
        self.phase_config(self.study_key, self.countermeasure, 0)
            .validate()
            .map_err(|e| bad("channel", &e.to_string()))
    }

    /// Server configuration for one phase.
    pub fn phase_config(&self, key: Key128, kind: CountermeasureKind, prng_seed: u64) -> ChannelConfig {
        ChannelConfig {
            packet_size: self.packet_size,
            timing_scope: self.timing_scope,
            backend: self.backend,
            key,
            countermeasure: kind,
            cost: self.cost,
            cache: self.cache.clone(),
            layout: self.layout,
            seed: Some(prng_seed),
            ..ChannelConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Study,
    Attack,
    Baseline,
    Search,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Study => "study",
            Stage::Attack => "attack",
            Stage::Baseline => "baseline",
            Stage::Search => "search",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageFailure {
    pub stage: Stage,
    pub run: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub m: usize,
    pub c_attack: f64,
    pub c_baseline: f64,
    pub candidates: CandidateSets,
    pub keyspace: BigUint,
    pub search: Option<SearchOutcome>,
}

impl RunResult {
    pub fn recovered(&self, key: &Key128) -> bool {
        self.search.as_ref().and_then(|s| s.found) == Some(*key)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    /// Summary over completed runs; `None` if no run completed.
    pub report: Option<EfficiencyReport>,
    pub runs: Vec<RunResult>,
    pub failure: Option<StageFailure>,
}

impl ExperimentOutcome {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none() && self.report.is_some()
    }
}

/// Independent 64-bit seed for (run, stream).
pub fn derive_seed(base: u64, run: usize, stream: u64) -> u64 {
    // splitmix64 finalizer over a distinct input per (base, run, stream).
    let mut z = base
        .wrapping_add((run as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(stream.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_PRNG: u64 = 0;
const STREAM_STUDY: u64 = 1;
const STREAM_ATTACK: u64 = 2;
const STREAM_PAIRS: u64 = 3;

fn run_once(cfg: &ExperimentConfig, run: usize) -> Result<RunResult, StageFailure> {
    let fail = |stage: Stage| move |e: &dyn fmt::Display| StageFailure {
        stage,
        run,
        message: e.to_string(),
    };
    let prng_seed = derive_seed(cfg.seed, run, STREAM_PRNG);
    let study_cfg = cfg.phase_config(cfg.study_key, cfg.countermeasure, prng_seed);
    let attack_cfg = cfg.phase_config(cfg.attack_key, cfg.countermeasure, prng_seed);
    if !study_cfg.same_except_key(&attack_cfg) {
        return Err(fail(Stage::Config)(&"study and attack servers differ beyond the key"));
    }

    let study_opts = CollectOptions::new(cfg.samples_study, derive_seed(cfg.seed, run, STREAM_STUDY));
    let attack_opts = CollectOptions::new(cfg.samples_attack, derive_seed(cfg.seed, run, STREAM_ATTACK));

    let mut study = EncryptionService::new(study_cfg).map_err(|e| fail(Stage::Study)(&e))?;
    let study_profile = collect_profile(&mut study, &study_opts).map_err(|e| fail(Stage::Study)(&e))?;
    drop(study);

    let mut attack = EncryptionService::new(attack_cfg).map_err(|e| fail(Stage::Attack)(&e))?;
    let attack_profile = collect_profile(&mut attack, &attack_opts).map_err(|e| fail(Stage::Attack)(&e))?;
    let c_attack = attack_profile.mean_cycles();

    let c_baseline = if cfg.countermeasure == CountermeasureKind::None {
        c_attack
    } else {
        let base_cfg = cfg.phase_config(cfg.attack_key, CountermeasureKind::None, prng_seed);
        let mut base = EncryptionService::new(base_cfg).map_err(|e| fail(Stage::Baseline)(&e))?;
        collect_profile(&mut base, &attack_opts)
            .map_err(|e| fail(Stage::Baseline)(&e))?
            .mean_cycles()
    };

    let c = correlate(&signature(&study_profile), &cfg.study_key, &signature(&attack_profile));
    let candidates = candidate_sets(&c, cfg.retention);
    let m = missing_bytes(&candidates, &cfg.attack_key);
    let keyspace = candidates.keyspace_size();

    let search = if cfg.search && keyspace <= BigUint::from(cfg.search_limit) {
        let mut gen = PlaintextGenerator::new(derive_seed(cfg.seed, run, STREAM_PAIRS));
        let pairs: Vec<(Block, Block)> = (0..2)
            .map(|_| {
                let pt = gen.next_block();
                (pt, attack.ciphertext(&pt))
            })
            .collect();
        let opts = SearchOptions {
            order: cfg.search_order,
            threads: cfg.threads,
        };
        Some(brute_force(&candidates, &pairs, &opts).map_err(|e| fail(Stage::Search)(&e))?)
    } else {
        None
    };

    Ok(RunResult {
        run,
        m,
        c_attack,
        c_baseline,
        candidates,
        keyspace,
        search,
    })
}

fn summarize(cfg: &ExperimentConfig, runs: &[RunResult]) -> Option<EfficiencyReport> {
    if runs.is_empty() {
        return None;
    }
    let n = runs.len() as f64;
    let m = runs.iter().map(|r| r.m as f64).sum::<f64>() / n;
    let c = runs.iter().map(|r| r.c_attack).sum::<f64>() / n;
    let c_base = runs.iter().map(|r| r.c_baseline).sum::<f64>() / n;
    let s = slowdown(c, c_base).ok()?;
    let mut report = EfficiencyReport::new(cfg.countermeasure, m, c, s).ok()?;
    report.keyspace_log2 = Some(runs.iter().map(|r| r.candidates.keyspace_log2()).sum::<f64>() / n);
    report.search_estimate_secs =
        Some(runs.iter().map(|r| estimate_search_time(&r.keyspace, cfg.alpha)).sum::<f64>() / n);
    report.hardware_specific = cfg.backend == Backend::Native;
    Some(report)
}

/// Runs `cfg.runs` seeded repetitions. Stops at the first failing stage
/// and reports what completed before it.
pub fn run_experiment(cfg: &ExperimentConfig) -> ExperimentOutcome {
    if let Err(e) = cfg.validate() {
        return ExperimentOutcome {
            report: None,
            runs: Vec::new(),
            failure: Some(StageFailure {
                stage: Stage::Config,
                run: 0,
                message: e.to_string(),
            }),
        };
    }
    let mut runs = Vec::with_capacity(cfg.runs);
    let mut failure = None;
    for run in 0..cfg.runs {
        match run_once(cfg, run) {
            Ok(r) => {
                log::info!(
                    "run {run}: m={} log2(keyspace)={:.1} c={:.1}",
                    r.m,
                    r.candidates.keyspace_log2(),
                    r.c_attack
                );
                runs.push(r);
            }
            Err(f) => {
                log::error!("run {run} failed at {}: {}", f.stage, f.message);
                failure = Some(f);
                break;
            }
        }
    }
    ExperimentOutcome {
        report: summarize(cfg, &runs),
        runs,
        failure,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_round_trip_through_set() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply([
            ("countermeasure", "prefetch"),
            ("samples", "1e3"),
            ("cache.ambient_fraction", "0.25"),
            ("cache.ambient_seed", "9"),
            ("cache.cold_flush", "false"),
            ("search_limit", "1e9"),
        ])
        .unwrap();
        assert_eq!(cfg.countermeasure, CountermeasureKind::Prefetch);
        assert_eq!((cfg.samples_study, cfg.samples_attack), (1000, 1000));
        assert_eq!(cfg.cache.ambient, Some(AmbientPressure { fraction: 0.25, seed: 9 }));
        assert!(!cfg.cache.cold_flush);
        assert_eq!(cfg.search_limit, 1_000_000_000);
        assert_eq!(cfg.set("bogus", "1"), Err(ConfigError::UnknownKey("bogus".into())));
        for key in CONFIG_KEYS {
            assert_ne!(cfg.clone().set(key, "\u{0}"), Err(ConfigError::UnknownKey(key.into())));
        }
    }

    #[test]
    fn invalid_config_fails_at_config_stage() {
        let cfg = ExperimentConfig {
            runs: 0,
            ..ExperimentConfig::default()
        };
        let out = run_experiment(&cfg);
        assert_eq!(out.failure.unwrap().stage, Stage::Config);
        assert!(out.report.is_none());
    }

    #[test]
    fn baseline_against_itself() {
        let cfg = ExperimentConfig {
            samples_study: 2048,
            samples_attack: 2048,
            runs: 1,
            search: false,
            ..ExperimentConfig::default()
        };
        let out = run_experiment(&cfg);
        let r = out.report.unwrap();
        assert_eq!(r.s, 1.0);
        assert_eq!(r.efficiency, r.m);
    }

    #[test]
    fn seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for run in 0..8 {
            for stream in 0..4 {
                assert!(seen.insert(derive_seed(0, run, stream)));
            }
        }
    }
}
