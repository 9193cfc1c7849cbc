//! Direct implementations of the benchmark programs, used as their oracles.

use crate::catalog::TEMP_CHANNEL;
use crate::lowering::ValueKind;
use crate::vm::{isr_index, SensorModel};

const BC_HI: u32 = 1;
const BC_LO: u32 = 2;
const CF_KEYS: u32 = 3;
const AR_CHANNEL: u32 = 4;

fn int(v: u32) -> (ValueKind, u32) {
    (ValueKind::Int, v)
}

/// One popcount per run, then the number of runs on which all methods agreed.
pub fn bit_count(runs: u32, s: &SensorModel) -> Vec<(ValueKind, u32)> {
    let mut out: Vec<_> = (0..runs as u64)
        .map(|i| {
            let x = (s.read(BC_HI, i) << 16) | s.read(BC_LO, i);
            int(x.count_ones())
        })
        .collect();
    out.push(int(runs));
    out
}

pub struct CuckooFilter {
    pub table: [u32; 128],
    pub failures: u32,
}

impl CuckooFilter {
    const BUCKETS: u32 = 32;
    const SLOTS: u32 = 4;
    const MAX_KICKS: u32 = 32;

    pub fn new() -> Self {
        CuckooFilter {
            table: [0; 128],
            failures: 0,
        }
    }

    fn hash(x: u32) -> u32 {
        x.wrapping_mul(0x9E37_79B1) >> 16
    }

    fn fingerprint(h: u32) -> u32 {
        match h & 255 {
            0 => 1,
            f => f,
        }
    }

    fn other(b: u32, f: u32) -> u32 {
        b ^ ((f.wrapping_mul(0x5BD1_E995) >> 16) & (Self::BUCKETS - 1))
    }

    fn free_slot(&self, b: u32) -> Option<u32> {
        (b * Self::SLOTS..(b + 1) * Self::SLOTS).find(|&s| self.table[s as usize] == 0)
    }

    fn holds(&self, b: u32, f: u32) -> bool {
        (b * Self::SLOTS..(b + 1) * Self::SLOTS).any(|s| self.table[s as usize] == f)
    }

    pub fn insert(&mut self, x: u32) {
        let h = Self::hash(x);
        let mut fp = Self::fingerprint(h);
        let b1 = (h >> 8) & (Self::BUCKETS - 1);
        let b2 = Self::other(b1, fp);
        if let Some(s) = self.free_slot(b1).or_else(|| self.free_slot(b2)) {
            self.table[s as usize] = fp;
            return;
        }
        let mut at = b2;
        for kicks in 0..Self::MAX_KICKS {
            let slot = (at * Self::SLOTS + (kicks & 3)) as usize;
            let victim = self.table[slot];
            self.table[slot] = fp;
            fp = victim;
            at = Self::other(at, victim);
            if let Some(s) = self.free_slot(at) {
                self.table[s as usize] = fp;
                return;
            }
        }
        self.failures += 1;
    }

    pub fn contains(&self, x: u32) -> bool {
        let h = Self::hash(x);
        let fp = Self::fingerprint(h);
        let b1 = (h >> 8) & (Self::BUCKETS - 1);
        self.holds(b1, fp) || self.holds(Self::other(b1, fp), fp)
    }
}

impl Default for CuckooFilter {
    fn default() -> Self {
        Self::new()
    }
}

/// Keys found on lookup, then failed inserts.
pub fn cuckoo(inserts: u32, s: &SensorModel) -> Vec<(ValueKind, u32)> {
    let keys: Vec<u32> = (0..inserts as u64).map(|i| s.read(CF_KEYS, i)).collect();
    let mut f = CuckooFilter::new();
    for &k in &keys {
        f.insert(k);
    }
    let found = keys.iter().filter(|&&k| f.contains(k)).count() as u32;
    vec![int(found), int(f.failures)]
}

struct Windows<'a> {
    s: &'a SensorModel,
    n: u64,
}

impl Windows<'_> {
    fn reading(&mut self, class: u32) -> f32 {
        let raw = self.s.read(AR_CHANNEL, self.n) as i32;
        self.n += 1;
        let v = if class == 0 { 500 + (raw & 31) } else { 440 + (raw & 255) };
        v as f32
    }

    /// Mean and population standard deviation of the next three readings.
    fn next(&mut self, class: u32) -> (f32, f32) {
        let a = self.reading(class);
        let b = self.reading(class);
        let d = self.reading(class);
        let mean = (a + b + d) / 3.0;
        let (da, db, dd) = (a - mean, b - mean, d - mean);
        let var = (da * da + db * db + dd * dd) / 3.0;
        (mean, var.sqrt())
    }
}

/// Labels of `tests` held-out windows after training on `per_class`
/// readings of each class.
pub fn activity(per_class: u32, tests: u32, s: &SensorModel) -> Vec<(ValueKind, u32)> {
    let mut w = Windows { s, n: 0 };
    let mut model = Vec::new();
    for class in 0..2 {
        for _ in 0..per_class / 3 {
            model.push((w.next(class), class));
        }
    }
    (0..tests)
        .map(|k| {
            let (m, sd) = w.next((k >> 1) & 1);
            let mut best = (1.0e30f32, 0);
            for &((tm, ts), label) in &model {
                let (dm, ds) = (tm - m, ts - sd);
                let d = dm * dm + ds * ds;
                if d < best.0 {
                    best = (d, label);
                }
            }
            int(best.1)
        })
        .collect()
}

/// Heater commands for `count` timer interrupts: 0 when hot, 1 otherwise.
pub fn sense(count: u32, limit: f32, s: &SensorModel) -> Vec<(ValueKind, u32)> {
    (0..count as u64)
        .map(|k| {
            let t = f32::from_bits(s.read(TEMP_CHANNEL, isr_index(k, 0)));
            int(if t > limit { 0 } else { 1 })
        })
        .collect()
}
