//! Cache-timing laboratory for T-table AES-128.
//!
//! Reproduces and measures remote cache-timing attacks and four timing
//! countermeasures: a traced T-table AES core, a deterministic cache model, a
//! UDP timing server and client, the profile/correlation attack, reduced-key
//! brute force, and the experiment harness that scores countermeasures.

pub mod aes;
pub mod cache;
pub mod countermeasure;
pub mod attack;
pub mod channel;
pub mod keysearch;
pub mod harness;
