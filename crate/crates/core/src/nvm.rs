//! Paged non-volatile object memory and its page-granular undo log.
//!
//! Word writes are atomic. Every metered access asks a [`Meter`] first, so a
//! crash can land before any single word write; the prefix written so far
//! stays durable.

use std::ops::Range;

use thiserror::Error;

use crate::catalog::Prim;
use crate::lowering::{Layout, Region};

pub const WORD_BYTES: u32 = 2;
pub const DUMP_MAGIC: &[u8; 4] = b"NVM1";
pub const DUMP_HEADER: usize = 16;

/// Smallest simulator-visible actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MicroOp {
    WordRead,
    WordWrite,
    /// One word of a page copy.
    PageCopy,
    Primitive(Prim),
    Io(Prim),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("power failure")]
pub struct Crash;

/// Decides, before each micro-step, whether power survives it.
pub trait Meter {
    fn tick(&mut self, op: MicroOp) -> Result<(), Crash>;

    /// Called after a word at `addr` was durably written.
    fn wrote(&mut self, _addr: u32) {}
}

/// Continuous power.
pub struct Unmetered;

impl Meter for Unmetered {
    fn tick(&mut self, _: MicroOp) -> Result<(), Crash> {
        Ok(())
    }
}

/// Fails the `n`-th word write (1-based) and every step after it.
#[derive(Debug, Clone)]
pub struct FailOnWrite {
    pub n: u64,
    pub writes: u64,
}

impl FailOnWrite {
    pub fn new(n: u64) -> Self {
        FailOnWrite { n, writes: 0 }
    }
}

impl Meter for FailOnWrite {
    fn tick(&mut self, op: MicroOp) -> Result<(), Crash> {
        if matches!(op, MicroOp::WordWrite | MicroOp::PageCopy) {
            self.writes += 1;
        }
        if self.writes >= self.n {
            Err(Crash)
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NvmError {
    #[error("address {0:#x} is outside object memory")]
    OutOfRange(u32),
    #[error("address {0:#x} is not word aligned")]
    Misaligned(u32),
    #[error("undo log full: {capacity} pages already logged")]
    LogFull { capacity: u32 },
    #[error("page {0} belongs to the undo region")]
    LogsItself(u32),
    #[error("bad memory dump: {0}")]
    BadDump(String),
    #[error(transparent)]
    Crash(#[from] Crash),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectMemory {
    words: Vec<u16>,
    page_size: u32,
    regions: Vec<(Region, Range<u32>)>,
}

impl ObjectMemory {
    /// Zeroed memory of `size` bytes without named regions.
    pub fn new(size: u32, page_size: u32) -> Self {
        ObjectMemory {
            words: vec![0; (size / WORD_BYTES) as usize],
            page_size,
            regions: Vec::new(),
        }
    }

    pub fn with_layout(l: &Layout) -> Self {
        let mut m = ObjectMemory::new(l.nvm_size, l.page_size);
        m.regions = l
            .regions()
            .into_iter()
            .map(|(r, first, n)| (r, first..first + n))
            .collect();
        m
    }

    pub fn size(&self) -> u32 {
        self.words.len() as u32 * WORD_BYTES
    }

    pub fn page_size(&self) -> u32 {
        self.page_size
    }

    pub fn page_count(&self) -> u32 {
        self.size() / self.page_size
    }

    pub fn words_per_page(&self) -> u32 {
        self.page_size / WORD_BYTES
    }

    pub fn regions(&self) -> &[(Region, Range<u32>)] {
        &self.regions
    }

    pub fn region_pages(&self, r: Region) -> Range<u32> {
        self.regions
            .iter()
            .find(|(x, _)| *x == r)
            .map(|(_, p)| p.clone())
            .unwrap_or(0..0)
    }

    fn index(&self, addr: u32) -> Result<usize, NvmError> {
        if addr % WORD_BYTES != 0 {
            return Err(NvmError::Misaligned(addr));
        }
        let i = (addr / WORD_BYTES) as usize;
        if i >= self.words.len() {
            return Err(NvmError::OutOfRange(addr));
        }
        Ok(i)
    }

    /// Unmetered read.
    pub fn read_word(&self, addr: u32) -> Result<u16, NvmError> {
        Ok(self.words[self.index(addr)?])
    }

    /// Unmetered write, durable once it returns.
    pub fn write_word(&mut self, addr: u32, w: u16) -> Result<(), NvmError> {
        let i = self.index(addr)?;
        self.words[i] = w;
        Ok(())
    }

    pub fn read_u32(&self, addr: u32) -> Result<u32, NvmError> {
        Ok(self.read_word(addr)? as u32 | (self.read_word(addr + 2)? as u32) << 16)
    }

    pub fn write_u32(&mut self, addr: u32, v: u32) -> Result<(), NvmError> {
        self.write_word(addr, v as u16)?;
        self.write_word(addr + 2, (v >> 16) as u16)
    }

    pub fn read(&self, m: &mut dyn Meter, addr: u32) -> Result<u16, NvmError> {
        let i = self.index(addr)?;
        m.tick(MicroOp::WordRead)?;
        Ok(self.words[i])
    }

    pub fn write(&mut self, m: &mut dyn Meter, addr: u32, w: u16) -> Result<(), NvmError> {
        let i = self.index(addr)?;
        m.tick(MicroOp::WordWrite)?;
        self.words[i] = w;
        m.wrote(addr);
        Ok(())
    }

    /// Copies `words` words, one metered micro-step each, low address first.
    pub fn copy(&mut self, m: &mut dyn Meter, from: u32, to: u32, words: u32) -> Result<(), NvmError> {
        let src = self.index(from)?;
        let dst = self.index(to)?;
        if src + words as usize > self.words.len() || dst + words as usize > self.words.len() {
            return Err(NvmError::OutOfRange(from.max(to) + words * WORD_BYTES));
        }
        for k in 0..words as usize {
            m.tick(MicroOp::PageCopy)?;
            self.words[dst + k] = self.words[src + k];
            m.wrote(to + k as u32 * WORD_BYTES);
        }
        Ok(())
    }

    pub fn page_bytes(&self, page: u32) -> &[u16] {
        let w = self.words_per_page() as usize;
        &self.words[page as usize * w..(page as usize + 1) * w]
    }

    pub fn words(&self) -> &[u16] {
        &self.words
    }

    /// Raw dump: 16-byte header (magic, page size, page count, reserved)
    /// followed by the pages, little endian.
    pub fn dump(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(DUMP_HEADER + self.size() as usize);
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&self.page_size.to_le_bytes());
        out.extend_from_slice(&self.page_count().to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_dump(bytes: &[u8]) -> Result<Self, NvmError> {
        let bad = |m: &str| NvmError::BadDump(m.to_string());
        if bytes.len() < DUMP_HEADER || &bytes[..4] != DUMP_MAGIC {
            return Err(bad("missing NVM1 header"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (page_size, pages) = (u(4), u(8));
        if page_size == 0 || page_size % WORD_BYTES != 0 {
            return Err(bad("page size"));
        }
        let body = &bytes[DUMP_HEADER..];
        if body.len() as u64 != page_size as u64 * pages as u64 {
            return Err(bad("length does not match header"));
        }
        let words = body
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Ok(ObjectMemory {
            words,
            page_size,
            regions: Vec::new(),
        })
    }
}

/// Page pre-images kept in the UNDO region: a count word, then entries of
/// one index word followed by the page contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UndoLog {
    pub count_addr: u32,
    pub first_entry: u32,
    pub capacity: u32,
    pub page_size: u32,
    pub own_pages: Range<u32>,
}

impl UndoLog {
    pub fn from_layout(l: &Layout) -> Self {
        let first = l.first_page(Region::Undo);
        UndoLog {
            count_addr: l.undo_count() as u32,
            first_entry: l.undo_entry(0) as u32,
            capacity: l.undo_entries,
            page_size: l.page_size,
            own_pages: first..first + l.undo_pages,
        }
    }

    fn entry(&self, i: u32) -> u32 {
        self.first_entry + i * (WORD_BYTES + self.page_size)
    }

    /// Logged entries, read without metering.
    pub fn len(&self, mem: &ObjectMemory) -> u32 {
        mem.read_word(self.count_addr).unwrap_or(0) as u32
    }

    pub fn is_empty(&self, mem: &ObjectMemory) -> bool {
        self.len(mem) == 0
    }

    /// Pages covered by the log right now.
    pub fn logged_pages(&self, mem: &ObjectMemory) -> Vec<u32> {
        (0..self.len(mem))
            .map(|i| mem.read_word(self.entry(i)).unwrap_or(0) as u32)
            .collect()
    }

    /// Saves the pre-image of `page` unless this transaction already did.
    /// Returns whether a copy was made.
    pub fn log_page(&self, mem: &mut ObjectMemory, m: &mut dyn Meter, page: u32) -> Result<bool, NvmError> {
        if self.own_pages.contains(&page) {
            return Err(NvmError::LogsItself(page));
        }
        let n = mem.read(m, self.count_addr)? as u32;
        for i in 0..n {
            if mem.read(m, self.entry(i))? as u32 == page {
                return Ok(false);
            }
        }
        if n >= self.capacity {
            return Err(NvmError::LogFull {
                capacity: self.capacity,
            });
        }
        let e = self.entry(n);
        mem.write(m, e, page as u16)?;
        mem.copy(m, page * self.page_size, e + WORD_BYTES, self.page_size / WORD_BYTES)?;
        mem.write(m, self.count_addr, (n + 1) as u16)?;
        Ok(true)
    }

    /// Copies every logged pre-image back, then empties the log.
    pub fn undo_restore(&self, mem: &mut ObjectMemory, m: &mut dyn Meter) -> Result<u32, NvmError> {
        let n = mem.read(m, self.count_addr)? as u32;
        for i in 0..n {
            let e = self.entry(i);
            let page = mem.read(m, e)? as u32;
            mem.copy(m, e + WORD_BYTES, page * self.page_size, self.page_size / WORD_BYTES)?;
        }
        if n > 0 {
            mem.write(m, self.count_addr, 0)?;
        }
        Ok(n)
    }

    /// Makes the transaction permanent with one word write.
    pub fn commit_clear(&self, mem: &mut ObjectMemory, m: &mut dyn Meter) -> Result<(), NvmError> {
        mem.write(m, self.count_addr, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_for(mem: &ObjectMemory) -> UndoLog {
        // Pages 8.. hold the log in these tests.
        let ps = mem.page_size();
        UndoLog {
            count_addr: 8 * ps,
            first_entry: 8 * ps + 2,
            capacity: 3,
            page_size: ps,
            own_pages: 8..mem.page_count(),
        }
    }

    #[test]
    fn write_survives_crash() {
        let mut mem = ObjectMemory::new(256, 16);
        mem.write(&mut Unmetered, 0, 7).unwrap();
        let mut m = FailOnWrite::new(1);
        assert!(mem.write(&mut m, 2, 9).is_err());
        assert_eq!(mem.read_word(0).unwrap(), 7);
        assert_eq!(mem.read_word(2).unwrap(), 0);
    }

    #[test]
    fn out_of_range() {
        let mut mem = ObjectMemory::new(256, 16);
        assert_eq!(mem.write_word(256, 1), Err(NvmError::OutOfRange(256)));
        assert_eq!(mem.read_word(3), Err(NvmError::Misaligned(3)));
    }

    #[test]
    fn log_is_idempotent_per_transaction() {
        let mut mem = ObjectMemory::new(16 * 16, 16);
        let log = log_for(&mem);
        mem.write_word(3 * 16, 5).unwrap();
        assert!(log.log_page(&mut mem, &mut Unmetered, 3).unwrap());
        assert!(!log.log_page(&mut mem, &mut Unmetered, 3).unwrap());
        assert_eq!(log.logged_pages(&mem), vec![3]);
        mem.write_word(3 * 16, 6).unwrap();
        log.undo_restore(&mut mem, &mut Unmetered).unwrap();
        assert_eq!(mem.read_word(3 * 16).unwrap(), 5);
        assert!(log.is_empty(&mem));
    }

    #[test]
    fn full_log_is_an_error() {
        let mut mem = ObjectMemory::new(16 * 16, 16);
        let log = log_for(&mem);
        for p in 0..3 {
            log.log_page(&mut mem, &mut Unmetered, p).unwrap();
        }
        assert_eq!(log.log_page(&mut mem, &mut Unmetered, 4), Err(NvmError::LogFull { capacity: 3 }));
        assert_eq!(log.log_page(&mut mem, &mut Unmetered, 9), Err(NvmError::LogsItself(9)));
    }

    #[test]
    fn dump_round_trip() {
        let mut mem = ObjectMemory::new(64, 16);
        mem.write_word(10, 0xbeef).unwrap();
        let d = mem.dump();
        assert_eq!(&d[..4], b"NVM1");
        assert_eq!(d.len(), 16 + 64);
        assert_eq!(ObjectMemory::from_dump(&d).unwrap().words(), mem.words());
    }
}
