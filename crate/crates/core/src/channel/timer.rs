//! Cycle counter for native timing.

#[cfg(target_arch = "x86_64")]
#[inline(always)]
pub fn cycles_now() -> u64 {
    // SAFETY: rdtsc has no preconditions on x86_64.
    #[allow(unused_unsafe)]
    unsafe {
        core::arch::x86_64::_rdtsc()
    }
}

#[cfg(not(target_arch = "x86_64"))]
#[inline(always)]
pub fn cycles_now() -> u64 {
    use std::sync::OnceLock;
    use std::time::Instant;
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

pub fn counter_name() -> &'static str {
    if cfg!(target_arch = "x86_64") {
        "rdtsc"
    } else {
        "monotonic-ns"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimerCalibration {
    /// Smallest non-zero difference between back-to-back reads.
    pub granularity: u64,
    /// Median cost of one back-to-back read pair.
    pub overhead: u64,
}

pub fn calibrate(rounds: usize) -> TimerCalibration {
    let mut deltas: Vec<u64> = (0..rounds.max(1))
        .map(|_| {
            let a = cycles_now();
            let b = cycles_now();
            b.wrapping_sub(a)
        })
        .collect();
    deltas.sort_unstable();
    TimerCalibration {
        granularity: deltas.iter().copied().find(|&d| d > 0).unwrap_or(1),
        overhead: deltas[deltas.len() / 2],
    }
}
