use purevm::nvm::*;

const PAGE: u32 = 16;
const LOG_PAGE: u32 = 8;

fn log_for(mem: &ObjectMemory) -> UndoLog {
    UndoLog {
        count_addr: LOG_PAGE * PAGE,
        first_entry: LOG_PAGE * PAGE + 2,
        capacity: 3,
        page_size: PAGE,
        own_pages: LOG_PAGE..mem.page_count(),
    }
}

/// Memory with recognisable contents on the data pages.
fn initial() -> ObjectMemory {
    let mut mem = ObjectMemory::new(16 * PAGE, PAGE);
    for addr in (0..LOG_PAGE * PAGE).step_by(2) {
        mem.write_word(addr, (addr as u16).wrapping_mul(31) ^ 0x5a5a).unwrap();
    }
    mem
}

fn data(mem: &ObjectMemory) -> Vec<u16> {
    mem.words()[..(LOG_PAGE * PAGE / WORD_BYTES) as usize].to_vec()
}

/// Logs and rewrites pages 1 and 5 (page 1 twice), then commits.
fn transaction(mem: &mut ObjectMemory, log: &UndoLog, m: &mut dyn Meter) -> Result<(), NvmError> {
    for (page, value) in [(1u32, 0x1111u16), (5, 0x5555), (1, 0x2222)] {
        log.log_page(mem, m, page)?;
        for w in 0..PAGE / WORD_BYTES {
            mem.write(m, page * PAGE + w * WORD_BYTES, value + w as u16)?;
        }
    }
    log.commit_clear(mem, m)
}

fn total_writes(f: impl Fn(&mut dyn Meter) -> Result<(), NvmError>) -> u64 {
    struct Count(u64);
    impl Meter for Count {
        fn tick(&mut self, op: MicroOp) -> Result<(), Crash> {
            if matches!(op, MicroOp::WordWrite | MicroOp::PageCopy) {
                self.0 += 1;
            }
            Ok(())
        }
    }
    let mut c = Count(0);
    f(&mut c).unwrap();
    c.0
}

#[test]
fn durability_and_prefix_semantics() {
    let mut mem = ObjectMemory::new(64, 16);
    mem.write(&mut Unmetered, 0, 7).unwrap();
    assert_eq!(mem.read_word(0).unwrap(), 7);
    let mut m = FailOnWrite::new(2);
    mem.write(&mut m, 2, 1).unwrap();
    assert!(mem.write(&mut m, 4, 2).is_err());
    assert_eq!(mem.read_word(2).unwrap(), 1);
    assert_eq!(mem.read_word(4).unwrap(), 0);
    assert_eq!(mem.write_word(64, 1), Err(NvmError::OutOfRange(64)));
}

#[test]
fn transaction_is_all_or_nothing_at_every_crash_point() {
    let before = initial();
    let log = log_for(&before);
    let mut after = before.clone();
    transaction(&mut after, &log, &mut Unmetered).unwrap();
    let writes = total_writes(|m| transaction(&mut before.clone(), &log, m));
    assert!(writes > 3 * PAGE as u64 / 2);

    for n in 1..=writes {
        let mut mem = before.clone();
        assert!(transaction(&mut mem, &log, &mut FailOnWrite::new(n)).is_err());

        // Count word never covers an entry whose copy is unfinished.
        for (i, page) in log.logged_pages(&mem).into_iter().enumerate() {
            let entry = log.first_entry + i as u32 * (WORD_BYTES + PAGE);
            let words = PAGE / WORD_BYTES;
            let saved: Vec<u16> = (0..words)
                .map(|w| mem.read_word(entry + WORD_BYTES + w * WORD_BYTES).unwrap())
                .collect();
            let original: Vec<u16> = (0..words).map(|w| before.read_word(page * PAGE + w * WORD_BYTES).unwrap()).collect();
            assert_eq!(saved, original, "crash {n}: entry {i} is not page {page}'s pre-image");
        }

        // Recovery, itself crashed at every point, then finished.
        let recover_writes = total_writes(|m| log.undo_restore(&mut mem.clone(), m).map(|_| ()));
        for r in 1..=recover_writes + 1 {
            let mut rec = mem.clone();
            let _ = log.undo_restore(&mut rec, &mut FailOnWrite::new(r));
            log.undo_restore(&mut rec, &mut Unmetered).unwrap();
            assert!(log.is_empty(&rec));
            let d = data(&rec);
            assert!(
                d == data(&before) || d == data(&after),
                "crash {n}, recovery crash {r}: mixed state"
            );
            // The transaction is only durable once commit_clear ran.
            assert_eq!(d == data(&after), n > writes, "crash {n}");
        }
    }
}

#[test]
fn undo_restore_is_idempotent_and_noop_when_empty() {
    let mut mem = initial();
    let log = log_for(&mem);
    let pristine = data(&mem);
    assert_eq!(log.undo_restore(&mut mem, &mut Unmetered).unwrap(), 0);
    assert_eq!(data(&mem), pristine);

    log.log_page(&mut mem, &mut Unmetered, 2).unwrap();
    mem.write_word(2 * PAGE, 0xffff).unwrap();
    let mut twice = mem.clone();
    log.undo_restore(&mut mem, &mut Unmetered).unwrap();
    assert_eq!(data(&mem), pristine);
    // A crash right before the clear leaves the log full; restoring again is harmless.
    let copies = total_writes(|m| log.undo_restore(&mut twice.clone(), m).map(|_| ()));
    let _ = log.undo_restore(&mut twice, &mut FailOnWrite::new(copies));
    assert!(!log.is_empty(&twice));
    log.undo_restore(&mut twice, &mut Unmetered).unwrap();
    assert_eq!(data(&twice), pristine);
}

#[test]
fn commit_makes_effects_permanent() {
    let mut mem = initial();
    let log = log_for(&mem);
    log.commit_clear(&mut mem, &mut Unmetered).unwrap();
    assert!(log.is_empty(&mem));

    log.log_page(&mut mem, &mut Unmetered, 3).unwrap();
    mem.write_word(3 * PAGE, 42).unwrap();
    log.commit_clear(&mut mem, &mut Unmetered).unwrap();
    assert_eq!(log.undo_restore(&mut mem, &mut Unmetered).unwrap(), 0);
    assert_eq!(mem.read_word(3 * PAGE).unwrap(), 42);
}

#[test]
fn log_copies_once_per_transaction() {
    let mut mem = initial();
    let log = log_for(&mem);
    assert!(log.log_page(&mut mem, &mut Unmetered, 3).unwrap());
    assert!(!log.log_page(&mut mem, &mut Unmetered, 3).unwrap());
    assert_eq!(log.logged_pages(&mem), vec![3]);
    log.log_page(&mut mem, &mut Unmetered, 4).unwrap();
    log.log_page(&mut mem, &mut Unmetered, 6).unwrap();
    assert_eq!(log.log_page(&mut mem, &mut Unmetered, 7), Err(NvmError::LogFull { capacity: 3 }));
}

#[test]
fn dump_has_header_and_round_trips() {
    let mem = initial();
    let d = mem.dump();
    assert_eq!(&d[..4], DUMP_MAGIC);
    assert_eq!(u32::from_le_bytes(d[4..8].try_into().unwrap()), PAGE);
    assert_eq!(u32::from_le_bytes(d[8..12].try_into().unwrap()), 16);
    assert_eq!(d.len(), DUMP_HEADER + 16 * PAGE as usize);
    assert_eq!(ObjectMemory::from_dump(&d).unwrap(), mem);
    assert!(ObjectMemory::from_dump(b"nope").is_err());
}
