#![allow(dead_code)]

use aes::cipher::{BlockEncrypt, KeyInit};
use ttlab::aes::{Block, Key128};

/// Independent AES-128 from the RustCrypto `aes` crate.
pub fn reference_encrypt(key: &Key128, pt: &Block) -> Block {
    let cipher = aes::Aes128::new(&key.0.into());
    let mut b = aes::Block::from(pt.0);
    cipher.encrypt_block(&mut b);
    Block(b.into())
}

/// Set-associative LRU written as plain recency lists, most recent first.
#[derive(Clone)]
pub struct LruOracle {
    line_size: u64,
    sets: Vec<Vec<u64>>,
    ways: usize,
}

impl LruOracle {
    pub fn new(line_size: u64, num_sets: usize, ways: usize) -> Self {
        Self {
            line_size,
            sets: vec![Vec::new(); num_sets],
            ways,
        }
    }

    /// Returns true on a hit.
    pub fn access(&mut self, addr: u64) -> bool {
        let line = addr / self.line_size;
        let n = self.sets.len() as u64;
        let list = &mut self.sets[(line % n) as usize];
        let hit = match list.iter().position(|&l| l == line) {
            Some(i) => {
                list.remove(i);
                true
            }
            None => false,
        };
        list.insert(0, line);
        list.truncate(self.ways);
        hit
    }
}

/// Walks every trace of length <= `max_len` over `alphabet`, comparing the
/// simulator with the oracle after each access. Returns the number of
/// traces (prefixes included) checked.
pub fn exhaust_lru(cfg: &ttlab::cache::CacheConfig, alphabet: &[u64], max_len: usize) -> u64 {
    use ttlab::cache::{AccessOutcome, CacheState};

    fn go(alphabet: &[u64], left: usize, sim: &CacheState, oracle: &LruOracle, seen: &mut u64) {
        *seen += 1;
        if left == 0 {
            return;
        }
        for &a in alphabet {
            let mut s = sim.clone();
            let mut o = oracle.clone();
            let hit = s.access(a) == AccessOutcome::Hit;
            assert_eq!(hit, o.access(a), "address {a:#x}, {left} accesses before the end");
            go(alphabet, left - 1, &s, &o, seen);
        }
    }
    let mut seen = 0;
    let sim = CacheState::new(cfg).unwrap();
    let oracle = LruOracle::new(cfg.line_size, cfg.num_sets as usize, cfg.associativity);
    go(alphabet, max_len, &sim, &oracle, &mut seen);
    seen
}

/// Small geometries for the exhaustive check, each with a four-address
/// alphabet: one set with 1..=4 ways (one address shares a line with
/// another), and two sets with 1..=2 ways.
pub fn lru_cases() -> Vec<(ttlab::cache::CacheConfig, [u64; 4])> {
    let geometry = |sets, assoc| ttlab::cache::CacheConfig {
        line_size: 16,
        num_sets: sets,
        associativity: assoc,
        ..Default::default()
    };
    let mut out: Vec<_> = (1..=4).map(|a| (geometry(1, a), [0x00, 0x10, 0x20, 0x04])).collect();
    out.extend((1..=2).map(|a| (geometry(2, a), [0x00, 0x10, 0x20, 0x30])));
    out
}
