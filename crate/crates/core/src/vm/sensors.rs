//! Deterministic sensor readings.

use std::collections::BTreeMap;

use crate::catalog::TEMP_CHANNEL;

const MUL: u64 = 6364136223846793005;
const INC: u64 = 1442695040888963407;
const CHANNEL_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Reads made by interrupt handlers use indices from here up, so a handler
/// sees the same values however often the main context has sampled.
pub const ISR_READ_BASE: u64 = 1 << 40;
const ISR_READS_MAX: u64 = 1024;

/// Index of the `reads`-th reading taken by the `ordinal`-th interrupt.
pub fn isr_index(ordinal: u64, reads: u64) -> u64 {
    ISR_READ_BASE + ordinal * ISR_READS_MAX + reads
}

/// Seed of every stream unless a caller picks another.
pub const DEFAULT_SEED: u64 = 0x2545_F491_4F6C_DD1D;

/// 64-bit linear congruential generator with the MMIX constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lcg {
    pub state: u64,
}

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_mul(MUL).wrapping_add(INC);
        self.state
    }

    /// High 32 bits of the next state.
    pub fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    /// Next value in `0..n`.
    pub fn below(&mut self, n: u32) -> u32 {
        ((self.next_u32() as u64 * n as u64) >> 32) as u32
    }

    /// State after `n` more steps, in O(log n).
    pub fn jump(state: u64, mut n: u64) -> u64 {
        let (mut acc_mul, mut acc_add) = (1u64, 0u64);
        let (mut cur_mul, mut cur_add) = (MUL, INC);
        while n > 0 {
            if n & 1 == 1 {
                acc_mul = acc_mul.wrapping_mul(cur_mul);
                acc_add = acc_add.wrapping_mul(cur_mul).wrapping_add(cur_add);
            }
            cur_add = cur_mul.wrapping_add(1).wrapping_mul(cur_add);
            cur_mul = cur_mul.wrapping_mul(cur_mul);
            n >>= 1;
        }
        acc_mul.wrapping_mul(state).wrapping_add(acc_add)
    }
}

/// The `n`-th reading of channel `ch` depends only on `(seed, ch, n)`, so
/// re-executing a read after a power failure sees the same value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorModel {
    pub seed: u64,
    /// Channels replaying a fixed cycle of raw readings.
    pub scripted: BTreeMap<u32, Vec<u32>>,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel::new(DEFAULT_SEED)
    }
}

impl SensorModel {
    pub fn new(seed: u64) -> Self {
        SensorModel {
            seed,
            scripted: BTreeMap::new(),
        }
    }

    pub fn with_script(mut self, ch: u32, values: Vec<u32>) -> Self {
        self.scripted.insert(ch, values);
        self
    }

    /// Temperature channel cycling through `temps`.
    pub fn with_temps(self, temps: &[f32]) -> Self {
        self.with_script(TEMP_CHANNEL, temps.iter().map(|t| t.to_bits()).collect())
    }

    pub fn read(&self, ch: u32, n: u64) -> u32 {
        if let Some(v) = self.scripted.get(&ch).filter(|v| !v.is_empty()) {
            // scripted channels step once per interrupt
            let pos = match n.checked_sub(ISR_READ_BASE) {
                Some(i) => i / ISR_READS_MAX + i % ISR_READS_MAX,
                None => n,
            };
            return v[(pos % v.len() as u64) as usize];
        }
        let start = self.seed.wrapping_add((ch as u64).wrapping_mul(CHANNEL_STRIDE));
        let x = (Lcg::jump(start, n + 1) >> 33) as u32;
        if ch == TEMP_CHANNEL {
            (15.0 + (x % 2000) as f32 / 100.0).to_bits()
        } else {
            x & 0xffff
        }
    }
}
