//! Placement of the runtime regions in object memory.
//!
//! Regions are page aligned and laid out in the order RUNTIME, QUEUE,
//! GLOBALS, UNDO, STACK. Addresses are byte offsets; every stored object
//! (a "value") occupies two words.

use std::fmt;

use super::LowerError;
use crate::frontend::VmConfig;

pub const WORD: u32 = 2;
pub const VALUE_BYTES: u32 = 4;
/// Smallest continuation stack a program may be left with.
pub const MIN_FRAMES: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Runtime,
    Queue,
    Globals,
    Undo,
    Stack,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Runtime,
        Region::Queue,
        Region::Globals,
        Region::Undo,
        Region::Stack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Runtime => "RUNTIME",
            Region::Queue => "QUEUE",
            Region::Globals => "GLOBALS",
            Region::Undo => "UNDO",
            Region::Stack => "STACK",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// Runtime data, byte offsets from address 0.
pub const RT_SP: u16 = 0;
pub const RT_SLEEP_DONE: u16 = 2;
pub const RT_SEQ: u16 = 4;
pub const RT_FLOW: u16 = 8;
pub const RT_EVENT_DATA: u16 = 12;
pub const RT_ISR_DATA: u16 = 16;
pub const RT_CURSORS: u16 = 20;
pub const RT_CKPT_SEQ: u16 = 36;
pub const RT_CKPT_BUF: u16 = 40;

/// Words of a checkpoint buffer before the frame: mode, instruction, loop
/// iteration.
pub const CKPT_HEADER_WORDS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub page_size: u32,
    pub nvm_size: u32,
    pub max_params: u32,
    pub queue_capacity: u32,
    pub runtime_pages: u32,
    pub queue_pages: u32,
    pub globals_pages: u32,
    pub undo_pages: u32,
    /// Pages the undo log can hold.
    pub undo_entries: u32,
}

impl Layout {
    /// Lays out everything but the undo log, which is sized later.
    pub fn new(cfg: &VmConfig, max_params: u32, globals_bytes: u32) -> Layout {
        let page = cfg.page_size_bytes;
        let runtime_bytes = RT_CKPT_BUF as u32 + 2 * WORD * (CKPT_HEADER_WORDS + 2 + max_params);
        let ring_bytes = 3 * WORD + 3 * WORD * (cfg.event_queue_capacity + 1);
        Layout {
            page_size: page,
            nvm_size: cfg.nvm_size_bytes,
            max_params,
            queue_capacity: cfg.event_queue_capacity,
            runtime_pages: runtime_bytes.div_ceil(page),
            queue_pages: 1 + ring_bytes.div_ceil(page),
            globals_pages: globals_bytes.div_ceil(page).max(1),
            undo_pages: 0,
            undo_entries: 0,
        }
    }

    pub fn page_count(&self) -> u32 {
        self.nvm_size / self.page_size
    }

    pub fn first_page(&self, r: Region) -> u32 {
        match r {
            Region::Runtime => 0,
            Region::Queue => self.runtime_pages,
            Region::Globals => self.runtime_pages + self.queue_pages,
            Region::Undo => self.runtime_pages + self.queue_pages + self.globals_pages,
            Region::Stack => {
                self.runtime_pages + self.queue_pages + self.globals_pages + self.undo_pages
            }
        }
    }

    pub fn region_pages(&self, r: Region) -> u32 {
        match r {
            Region::Runtime => self.runtime_pages,
            Region::Queue => self.queue_pages,
            Region::Globals => self.globals_pages,
            Region::Undo => self.undo_pages,
            Region::Stack => self.page_count().saturating_sub(self.first_page(Region::Stack)),
        }
    }

    /// `(region, first page, page count)` in address order.
    pub fn regions(&self) -> Vec<(Region, u32, u32)> {
        Region::ALL
            .iter()
            .map(|r| (*r, self.first_page(*r), self.region_pages(*r)))
            .collect()
    }

    pub fn region_of_page(&self, page: u32) -> Option<Region> {
        Region::ALL.into_iter().find(|r| {
            let first = self.first_page(*r);
            page >= first && page < first + self.region_pages(*r)
        })
    }

    pub fn base(&self, r: Region) -> u32 {
        self.first_page(r) * self.page_size
    }

    pub fn page_of(&self, addr: u32) -> u32 {
        addr / self.page_size
    }

    pub fn pages_of_region(&self, r: Region) -> std::ops::Range<u32> {
        let first = self.first_page(r);
        first..first + self.region_pages(r)
    }

    pub fn ckpt_words(&self) -> u32 {
        CKPT_HEADER_WORDS + 2 + self.max_params
    }

    pub fn ckpt_buf(&self, i: u32) -> u16 {
        (RT_CKPT_BUF as u32 + i * self.ckpt_words() * WORD) as u16
    }

    pub fn queue_head(&self) -> u16 {
        self.base(Region::Queue) as u16
    }

    pub fn queue_tail(&self) -> u16 {
        (self.base(Region::Queue) + self.page_size) as u16
    }

    pub fn queue_drops(&self) -> u16 {
        self.queue_tail() + 2
    }

    pub fn irq_next(&self) -> u16 {
        self.queue_tail() + 4
    }

    /// Ring slot `i`: handler block, then a two-word payload.
    pub fn queue_entry(&self, i: u32) -> u16 {
        self.queue_tail() + 6 + (i * 3 * WORD) as u16
    }

    pub fn ring_len(&self) -> u32 {
        self.queue_capacity + 1
    }

    pub fn undo_count(&self) -> u16 {
        self.base(Region::Undo) as u16
    }

    pub fn undo_entry(&self, i: u32) -> u16 {
        (self.base(Region::Undo) + WORD + i * (WORD + self.page_size)) as u16
    }

    pub fn frame_words(&self) -> u32 {
        2 + self.max_params
    }

    pub fn frame_bytes(&self) -> u32 {
        self.frame_words() * WORD
    }

    pub fn max_frames(&self) -> u32 {
        self.region_pages(Region::Stack) * self.page_size / self.frame_bytes()
    }

    pub fn frame_addr(&self, i: u32) -> u16 {
        (self.base(Region::Stack) + i * self.frame_bytes()) as u16
    }

    /// Upper bound on stack pages touched by popping one frame and pushing
    /// `pushes` frames in its place.
    pub fn stack_span(&self, pushes: usize) -> u32 {
        (pushes.max(1) as u32 * self.frame_bytes()).div_ceil(self.page_size) + 1
    }

    /// Sizes the undo region and checks that the stack still fits.
    pub fn set_undo_entries(&mut self, entries: u32) -> Result<(), LowerError> {
        let bytes = WORD + entries * (WORD + self.page_size);
        self.undo_entries = entries;
        self.undo_pages = bytes.div_ceil(self.page_size);
        let fixed = self.first_page(Region::Stack) * self.page_size;
        let needed = fixed + MIN_FRAMES * self.frame_bytes();
        if needed > self.nvm_size {
            return Err(LowerError::LayoutOverflow {
                needed,
                available: self.nvm_size,
            });
        }
        Ok(())
    }
}
