use std::fmt;
use std::hint::black_box;
use std::net::SocketAddr;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::timer::cycles_now;
use super::wire::{Request, RequestKind, Response};
use super::ChannelError;
use crate::aes::{encrypt, encrypt_traced, expand_key, AccessTrace, Block, Key128, RoundKeys, TRACE_LEN};
use crate::attack::{OracleError, TimingOracle};
use crate::cache::{CacheConfig, CacheSim, LayoutKind};
use crate::countermeasure::{CostModel, Countermeasure, CountermeasureKind, NativeTables};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Backend {
    Native,
    #[default]
    Simulated,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Native => "native",
            Backend::Simulated => "simulated",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "native" => Ok(Backend::Native),
            "simulated" => Ok(Backend::Simulated),
            other => Err(ChannelError::Config(format!("unknown backend {other:?}"))),
        }
    }
}

/// What the reported cycle count covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum TimingScope {
    /// Countermeasure plus encryption only.
    #[default]
    EncryptOnly,
    /// Datagram parse through response construction.
    WholeHandler,
}

impl TimingScope {
    pub fn as_str(self) -> &'static str {
        match self {
            TimingScope::EncryptOnly => "encrypt_only",
            TimingScope::WholeHandler => "whole_handler",
        }
    }
}

impl FromStr for TimingScope {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "encrypt_only" => Ok(TimingScope::EncryptOnly),
            "whole_handler" => Ok(TimingScope::WholeHandler),
            other => Err(ChannelError::Config(format!("unknown timing scope {other:?}"))),
        }
    }
}

pub const DEFAULT_PACKET_SIZE: usize = 800;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub listen: SocketAddr,
    pub packet_size: usize,
    pub timing_scope: TimingScope,
    pub backend: Backend,
    pub key: Key128,
    pub countermeasure: CountermeasureKind,
    pub cost: CostModel,
    pub cache: CacheConfig,
    pub layout: LayoutKind,
    /// Seed for the countermeasure's generator. `None` seeds from the clock.
    pub seed: Option<u64>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 0)),
            packet_size: DEFAULT_PACKET_SIZE,
            timing_scope: TimingScope::default(),
            backend: Backend::default(),
            key: Key128::default(),
            countermeasure: CountermeasureKind::None,
            cost: CostModel::default(),
            cache: CacheConfig::default(),
            layout: LayoutKind::Packed,
            seed: Some(0),
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.packet_size < super::wire::MIN_REQUEST_LEN {
            return Err(ChannelError::Config(format!(
                "packet_size {} below 17",
                self.packet_size
            )));
        }
        self.cache
            .validate()
            .map_err(|e| ChannelError::Config(e.to_string()))
    }

    /// True if the two configs differ in nothing but the key.
    pub fn same_except_key(&self, other: &ChannelConfig) -> bool {
        let mut a = self.clone();
        a.key = other.key;
        a == *other
    }
}

enum Engine {
    Native(Box<NativeTables>),
    Simulated {
        sim: Box<CacheSim>,
        trace: AccessTrace,
    },
}

/// Server-side encryption with timing. Holds the secret key, the
/// countermeasure state and the timing backend.
pub struct EncryptionService {
    config: ChannelConfig,
    round_keys: RoundKeys,
    countermeasure: Countermeasure,
    prng: ChaCha8Rng,
    engine: Engine,
}

impl fmt::Debug for EncryptionService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncryptionService")
            .field("backend", &self.config.backend)
            .field("countermeasure", &self.config.countermeasure)
            .finish_non_exhaustive()
    }
}

impl EncryptionService {
    pub fn new(config: ChannelConfig) -> Result<Self, ChannelError> {
        config.validate()?;
        let seed = config.seed.unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos() as u64)
                .unwrap_or(0)
        });
        let engine = match config.backend {
            Backend::Native => Engine::Native(Box::default()),
            Backend::Simulated => Engine::Simulated {
                sim: Box::new(
                    CacheSim::new(config.cache.clone())
                        .map_err(|e| ChannelError::Config(e.to_string()))?,
                ),
                trace: AccessTrace::with_capacity(TRACE_LEN),
            },
        };
        Ok(Self {
            round_keys: expand_key(&config.key),
            countermeasure: Countermeasure::new(config.countermeasure),
            prng: ChaCha8Rng::seed_from_u64(seed),
            engine,
            config,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    /// Encrypts under the configured countermeasure and reports its cost.
    ///
    /// Simulated: the cycle count is the cache model's result for this
    /// encryption's trace. Native: cycle-counter delta around the
    /// countermeasure and encryption.
    pub fn timed_encrypt(&mut self, pt: &Block) -> (Block, u64) {
        match &mut self.engine {
            Engine::Native(tables) => {
                let start = cycles_now();
                let ct = self
                    .countermeasure
                    .encrypt_native(pt, &self.round_keys, tables, &mut self.prng);
                let end = cycles_now();
                (black_box(ct), end.wrapping_sub(start).max(1))
            }
            Engine::Simulated { sim, trace } => {
                let report = self.countermeasure.simulate(&self.config.cost, &mut self.prng);
                trace.clear();
                let ct = encrypt_traced(pt, &self.round_keys, crate::aes::shared_tables(), trace);
                let layout = report.layout_override.unwrap_or(self.config.layout).layout();
                let result = sim
                    .run_encryption(trace, &layout, &report)
                    .expect("trace and injections come from the encryption itself");
                (ct, result.cycles.max(1))
            }
        }
    }

    /// Plain encryption for the verification oracle; leaves countermeasure
    /// state alone.
    pub fn ciphertext(&self, pt: &Block) -> Block {
        encrypt(pt, &self.round_keys, crate::aes::shared_tables())
    }

    /// Handles one datagram. `None` means the datagram was dropped.
    pub fn handle(&mut self, datagram: &[u8]) -> Option<Vec<u8>> {
        let whole = self.config.backend == Backend::Native
            && self.config.timing_scope == TimingScope::WholeHandler;
        let start = cycles_now();
        let req = match Request::decode(datagram) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("dropping datagram: {e}");
                return None;
            }
        };
        // Padding is semantically ignored but still read.
        black_box(datagram.iter().fold(0u8, |acc, b| acc ^ b));
        match req.kind {
            RequestKind::Timing => {
                let (ct, cycles) = self.timed_encrypt(&req.plaintext);
                black_box(ct);
                let mut out = Response::Timing {
                    plaintext: req.plaintext,
                    cycles,
                }
                .encode();
                if whole {
                    let total = cycles_now().wrapping_sub(start).max(1);
                    out[17..25].copy_from_slice(&total.to_le_bytes());
                }
                Some(out)
            }
            RequestKind::Ciphertext => Some(
                Response::Ciphertext {
                    plaintext: req.plaintext,
                    ciphertext: self.ciphertext(&req.plaintext),
                }
                .encode(),
            ),
        }
    }
}

impl TimingOracle for EncryptionService {
    fn time(&mut self, pt: &Block) -> Result<u64, OracleError> {
        Ok(self.timed_encrypt(pt).1)
    }
}
