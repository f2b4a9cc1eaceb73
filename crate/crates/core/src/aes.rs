//! T-table AES-128.
//!
//! Word convention: table words are big-endian packed columns, row 0 of the
//! column in the most significant byte. `Te0[x] = (2·S[x], S[x], S[x], 3·S[x])`
//! and `Te{n+1}[x] = Te{n}[x].rotate_right(8)`. `Te4[x]` carries `S[x]` in all
//! four lanes and is masked per row in the final round.
//!
//! State byte `j` sits at row `j % 4`, column `j / 4`. A state byte in row `r`
//! is always looked up in `Te{r}` (ShiftRows is folded into the destination
//! column), so the lookups of every round are issued in state-byte order and
//! the table id cycles `Te0, Te1, Te2, Te3`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const BLOCK_LEN: usize = 16;
pub const ROUNDS: usize = 10;
/// Lookups issued by one encryption: 9 main rounds plus the final round.
pub const TRACE_LEN: usize = 16 * ROUNDS;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HexError {
    #[error("expected {expected} hex digits, got {got}")]
    Length { expected: usize, got: usize },
    #[error("invalid hex digit in {0:?}")]
    Digit(String),
}

fn parse_hex16(s: &str) -> Result<[u8; 16], HexError> {
    let s = s.trim();
    if s.len() != 32 {
        return Err(HexError::Length {
            expected: 32,
            got: s.len(),
        });
    }
    let mut out = [0u8; 16];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|_| HexError::Digit(s.to_string()))?;
    }
    Ok(out)
}

fn write_hex(f: &mut fmt::Formatter<'_>, bytes: &[u8]) -> fmt::Result {
    for b in bytes {
        write!(f, "{b:02x}")?;
    }
    Ok(())
}

macro_rules! byte_block {
    ($name:ident) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
        pub struct $name(pub [u8; 16]);

        impl $name {
            pub const fn new(bytes: [u8; 16]) -> Self {
                Self(bytes)
            }

            pub fn from_slice(bytes: &[u8]) -> Option<Self> {
                Some(Self(bytes.try_into().ok()?))
            }

            pub fn bytes(&self) -> &[u8; 16] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                self.to_string()
            }
        }

        impl FromStr for $name {
            type Err = HexError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                parse_hex16(s).map(Self)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write_hex(f, &self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "("))?;
                write_hex(f, &self.0)?;
                write!(f, ")")
            }
        }

        impl From<[u8; 16]> for $name {
            fn from(bytes: [u8; 16]) -> Self {
                Self(bytes)
            }
        }
    };
}

byte_block!(Block);
byte_block!(Key128);

const fn xtime(x: u8) -> u8 {
    (x << 1) ^ if x & 0x80 != 0 { 0x1b } else { 0 }
}

const fn gf_mul(mut a: u8, mut b: u8) -> u8 {
    let mut acc = 0u8;
    while b != 0 {
        if b & 1 != 0 {
            acc ^= a;
        }
        a = xtime(a);
        b >>= 1;
    }
    acc
}

const fn gf_inv(x: u8) -> u8 {
    // x^254 = x^-1 in GF(2^8), and 0 maps to 0.
    let mut result = 1u8;
    let mut base = x;
    let mut exp = 254u32;
    while exp != 0 {
        if exp & 1 != 0 {
            result = gf_mul(result, base);
        }
        base = gf_mul(base, base);
        exp >>= 1;
    }
    result
}

const fn build_sbox() -> [u8; 256] {
    let mut sbox = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        let b = gf_inv(i as u8);
        sbox[i] = b
            ^ b.rotate_left(1)
            ^ b.rotate_left(2)
            ^ b.rotate_left(3)
            ^ b.rotate_left(4)
            ^ 0x63;
        i += 1;
    }
    sbox
}

/// The AES S-box.
pub const SBOX: [u8; 256] = build_sbox();

const RCON: [u8; 10] = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1b, 0x36];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TableId {
    Te0 = 0,
    Te1 = 1,
    Te2 = 2,
    Te3 = 3,
    Te4 = 4,
}

impl TableId {
    pub const ALL: [TableId; 5] = [
        TableId::Te0,
        TableId::Te1,
        TableId::Te2,
        TableId::Te3,
        TableId::Te4,
    ];
    pub const MAIN: [TableId; 4] = [TableId::Te0, TableId::Te1, TableId::Te2, TableId::Te3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Te{}", self.index())
    }
}

/// Expanded AES-128 key schedule: 44 words, 11 round keys.
#[derive(Clone, PartialEq, Eq)]
pub struct RoundKeys {
    pub words: [u32; 44],
}

impl fmt::Debug for RoundKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RoundKeys").finish_non_exhaustive()
    }
}

impl RoundKeys {
    pub fn round_key(&self, round: usize) -> [u8; 16] {
        let mut out = [0u8; 16];
        for c in 0..4 {
            out[4 * c..4 * c + 4].copy_from_slice(&self.words[4 * round + c].to_be_bytes());
        }
        out
    }
}

#[inline(always)]
fn sub_word(w: u32) -> u32 {
    let b = w.to_be_bytes();
    u32::from_be_bytes([
        SBOX[b[0] as usize],
        SBOX[b[1] as usize],
        SBOX[b[2] as usize],
        SBOX[b[3] as usize],
    ])
}

pub fn expand_key(key: &Key128) -> RoundKeys {
    let mut words = [0u32; 44];
    for (i, chunk) in key.0.chunks_exact(4).enumerate() {
        words[i] = u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    for (r, &rcon) in RCON.iter().enumerate() {
        let i = 4 * (r + 1);
        words[i] = words[i - 4] ^ sub_word(words[i - 1].rotate_left(8)) ^ ((rcon as u32) << 24);
        words[i + 1] = words[i - 3] ^ words[i];
        words[i + 2] = words[i - 2] ^ words[i + 1];
        words[i + 3] = words[i - 1] ^ words[i + 2];
    }
    RoundKeys { words }
}

/// Read access to the five lookup tables.
pub trait TableSource {
    fn table(&self, id: TableId) -> &[u32; 256];
}

/// Te0..Te4 stored contiguously, 64-byte aligned.
#[derive(Clone, PartialEq, Eq)]
#[repr(C, align(64))]
pub struct TTableSet {
    pub te: [[u32; 256]; 5],
}

impl fmt::Debug for TTableSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TTableSet").finish_non_exhaustive()
    }
}

impl TableSource for TTableSet {
    #[inline(always)]
    fn table(&self, id: TableId) -> &[u32; 256] {
        &self.te[id.index()]
    }
}

impl TTableSet {
    pub fn te(&self, id: TableId) -> &[u32; 256] {
        &self.te[id.index()]
    }
}

pub fn generate_ttables() -> TTableSet {
    let mut te = [[0u32; 256]; 5];
    for x in 0..256 {
        let s = SBOX[x];
        let w = u32::from_be_bytes([xtime(s), s, s, xtime(s) ^ s]);
        te[0][x] = w;
        te[1][x] = w.rotate_right(8);
        te[2][x] = w.rotate_right(16);
        te[3][x] = w.rotate_right(24);
        te[4][x] = u32::from_be_bytes([s; 4]);
    }
    TTableSet { te }
}

/// One T-table read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Access {
    pub table: TableId,
    pub index: u8,
}

/// Ordered table reads of one encryption.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessTrace {
    pub entries: Vec<Access>,
}

impl AccessTrace {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            entries: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn push(&mut self, table: TableId, index: u8) {
        self.entries.push(Access { table, index });
    }

    pub fn iter(&self) -> impl Iterator<Item = &Access> {
        self.entries.iter()
    }
}

/// Observer of the encryption's memory behaviour.
///
/// `main_loop_iteration` fires at the top of each iteration of the two-rounds-
/// per-iteration main loop, before rounds 1, 3, 5, 7 and 9.
pub trait LookupSink {
    fn lookup(&mut self, table: TableId, index: u8);

    #[inline(always)]
    fn main_loop_iteration(&mut self, _iteration: usize) {}
}

impl LookupSink for () {
    #[inline(always)]
    fn lookup(&mut self, _table: TableId, _index: u8) {}
}

impl LookupSink for AccessTrace {
    #[inline(always)]
    fn lookup(&mut self, table: TableId, index: u8) {
        self.push(table, index);
    }
}

impl<S: LookupSink + ?Sized> LookupSink for &mut S {
    #[inline(always)]
    fn lookup(&mut self, table: TableId, index: u8) {
        (**self).lookup(table, index);
    }

    #[inline(always)]
    fn main_loop_iteration(&mut self, iteration: usize) {
        (**self).main_loop_iteration(iteration);
    }
}

#[inline(always)]
fn words_to_state(w: &[u32; 4]) -> [u8; 16] {
    let mut s = [0u8; 16];
    for c in 0..4 {
        s[4 * c..4 * c + 4].copy_from_slice(&w[c].to_be_bytes());
    }
    s
}

/// State byte `j` (column `j / 4`, row `j % 4`) of a column-word state.
#[inline(always)]
fn state_byte(s: &[u32; 4], j: usize) -> u8 {
    (s[j >> 2] >> (24 - 8 * (j & 3))) as u8
}

/// Encrypts one block, reporting every table read to `sink`.
pub fn encrypt_traced<T: TableSource + ?Sized, S: LookupSink>(
    pt: &Block,
    rk: &RoundKeys,
    tables: &T,
    sink: &mut S,
) -> Block {
    let mut state: [u32; 4] = std::array::from_fn(|c| {
        u32::from_be_bytes([pt.0[4 * c], pt.0[4 * c + 1], pt.0[4 * c + 2], pt.0[4 * c + 3]]) ^ rk.words[c]
    });

    let main = [
        tables.table(TableId::Te0),
        tables.table(TableId::Te1),
        tables.table(TableId::Te2),
        tables.table(TableId::Te3),
    ];

    for round in 1..ROUNDS {
        if round % 2 == 1 {
            sink.main_loop_iteration(round / 2);
        }
        let mut w = [
            rk.words[4 * round],
            rk.words[4 * round + 1],
            rk.words[4 * round + 2],
            rk.words[4 * round + 3],
        ];
        for j in 0..16 {
            let row = j & 3;
            let dest = ((j >> 2) + 4 - row) & 3;
            let x = state_byte(&state, j);
            sink.lookup(TableId::MAIN[row], x);
            w[dest] ^= main[row][x as usize];
        }
        state = w;
    }

    let te4 = tables.table(TableId::Te4);
    let mut w = [rk.words[40], rk.words[41], rk.words[42], rk.words[43]];
    for j in 0..16 {
        let row = j & 3;
        let dest = ((j >> 2) + 4 - row) & 3;
        let x = state_byte(&state, j);
        sink.lookup(TableId::Te4, x);
        w[dest] ^= te4[x as usize] & (0xff00_0000u32 >> (8 * row));
    }
    Block(words_to_state(&w))
}

/// Encrypts one block without tracing.
#[inline]
pub fn encrypt<T: TableSource + ?Sized>(pt: &Block, rk: &RoundKeys, tables: &T) -> Block {
    encrypt_traced(pt, rk, tables, &mut ())
}

/// Encrypts one block and returns its 160-entry access trace.
pub fn encrypt_with_trace<T: TableSource + ?Sized>(
    pt: &Block,
    rk: &RoundKeys,
    tables: &T,
) -> (Block, AccessTrace) {
    let mut trace = AccessTrace::with_capacity(TRACE_LEN);
    let ct = encrypt_traced(pt, rk, tables, &mut trace);
    (ct, trace)
}

/// First-round table indices: `pt[j] ^ key[j]`.
pub fn first_round_indices(pt: &Block, key: &Key128) -> [u8; 16] {
    std::array::from_fn(|j| pt.0[j] ^ key.0[j])
}

/// Convenience: a key with its schedule and the shared tables.
#[derive(Clone, Debug)]
pub struct Aes128 {
    round_keys: RoundKeys,
}

impl Aes128 {
    pub fn new(key: &Key128) -> Self {
        Self {
            round_keys: expand_key(key),
        }
    }

    pub fn round_keys(&self) -> &RoundKeys {
        &self.round_keys
    }

    pub fn encrypt<T: TableSource + ?Sized>(&self, pt: &Block, tables: &T) -> Block {
        encrypt(pt, &self.round_keys, tables)
    }
}

/// Process-wide packed tables, built on first use.
pub fn shared_tables() -> &'static TTableSet {
    use std::sync::OnceLock;
    static TABLES: OnceLock<Box<TTableSet>> = OnceLock::new();
    TABLES.get_or_init(|| Box::new(generate_ttables()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex(s: &str) -> [u8; 16] {
        parse_hex16(s).unwrap()
    }

    #[test]
    fn sbox_spot_values() {
        assert_eq!(SBOX[0x00], 0x63);
        assert_eq!(SBOX[0x01], 0x7c);
        assert_eq!(SBOX[0x53], 0xed);
        assert_eq!(SBOX[0xff], 0x16);
    }

    #[test]
    fn te4_zero_replicates_sbox() {
        let t = generate_ttables();
        assert_eq!(t.te[4][0], 0x6363_6363);
    }

    #[test]
    fn te0_zero_by_hand() {
        // 2·0x63 = 0xc6, 3·0x63 = 0xc6 ^ 0x63 = 0xa5
        let t = generate_ttables();
        assert_eq!(t.te[0][0], 0xc663_63a5);
    }

    #[test]
    fn rotations_between_tables() {
        let t = generate_ttables();
        for x in 0..256 {
            assert_eq!(t.te[0][x].rotate_right(8), t.te[1][x]);
            assert_eq!(t.te[1][x].rotate_right(8), t.te[2][x]);
            assert_eq!(t.te[2][x].rotate_right(8), t.te[3][x]);
            assert_eq!(t.te[4][x], u32::from_be_bytes([SBOX[x]; 4]));
        }
    }

    #[test]
    fn fips197_appendix_c1() {
        let rk = expand_key(&Key128(hex("000102030405060708090a0b0c0d0e0f")));
        let ct = encrypt(
            &Block(hex("00112233445566778899aabbccddeeff")),
            &rk,
            shared_tables(),
        );
        assert_eq!(ct.to_hex(), "69c4e0d86a7b0430d8cdb78070b4c55a");
    }

    #[test]
    fn zero_key_zero_block() {
        let rk = expand_key(&Key128::default());
        let ct = encrypt(&Block::default(), &rk, shared_tables());
        assert_eq!(ct.to_hex(), "66e94bd4ef8a2c3b884cfa59ca342b2e");
    }

    #[test]
    fn key_schedule_final_round_key() {
        // FIPS-197 Appendix A.1 key.
        let rk = expand_key(&Key128(hex("2b7e151628aed2a6abf7158809cf4f3c")));
        assert_eq!(rk.words[4], 0xa0fafe17);
        assert_eq!(rk.words[43], 0xb6630ca6);
        assert_eq!(rk.round_key(0), hex("2b7e151628aed2a6abf7158809cf4f3c"));
    }

    #[test]
    fn zero_key_word4() {
        // RotWord(0) = 0, SubWord(0) = 63636363, Rcon = 01000000
        let rk = expand_key(&Key128::default());
        assert_eq!(rk.words[4], 0x6263_6363);
    }

    #[test]
    fn trace_shape() {
        let key = Key128(hex("000102030405060708090a0b0c0d0e0f"));
        let pt = Block(hex("00112233445566778899aabbccddeeff"));
        let (_, trace) = encrypt_with_trace(&pt, &expand_key(&key), shared_tables());
        assert_eq!(trace.len(), TRACE_LEN);
        let first = first_round_indices(&pt, &key);
        for (j, a) in trace.entries[..16].iter().enumerate() {
            assert_eq!(a.index, first[j]);
        }
        for (i, a) in trace.entries.iter().enumerate() {
            let want = if i < 144 {
                TableId::MAIN[i % 4]
            } else {
                TableId::Te4
            };
            assert_eq!(a.table, want, "entry {i}");
        }
    }

    #[test]
    fn first_round_index_examples() {
        let k = Key128([0x22; 16]);
        assert_eq!(first_round_indices(&Block([0x11; 16]), &k), [0x33; 16]);
        assert_eq!(first_round_indices(&Block(k.0), &k), [0; 16]);
        let pt = Block(hex("00112233445566778899aabbccddeeff"));
        assert_eq!(first_round_indices(&pt, &Key128::default()), pt.0);
    }

    #[test]
    fn main_loop_hook_fires_five_times() {
        struct Count(Vec<usize>, usize);
        impl LookupSink for Count {
            fn lookup(&mut self, _: TableId, _: u8) {
                self.1 += 1;
            }
            fn main_loop_iteration(&mut self, i: usize) {
                self.0.push(self.1);
                assert_eq!(i, self.0.len() - 1);
            }
        }
        let mut c = Count(Vec::new(), 0);
        encrypt_traced(
            &Block::default(),
            &expand_key(&Key128::default()),
            shared_tables(),
            &mut c,
        );
        // Hook positions are the trace offsets of rounds 1, 3, 5, 7, 9.
        assert_eq!(c.0, vec![0, 32, 64, 96, 128]);
    }

    #[test]
    fn hex_parse_errors() {
        assert!(matches!(
            "00".parse::<Key128>(),
            Err(HexError::Length { .. })
        ));
        assert!(matches!(
            "zz0102030405060708090a0b0c0d0e0f".parse::<Key128>(),
            Err(HexError::Digit(_))
        ));
    }
}
