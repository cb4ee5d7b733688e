//! The collected primary heap: eden plus two survivor halves, and an old
//! generation with its old-to-young card table.

mod card;

pub use card::H1CardTable;

use serde::{Deserialize, Serialize};

use crate::error::{HeapError, Result};
use crate::object::WORD;
use crate::starts::StartTable;

/// First young-generation address; everything below is unmapped so that
/// zero stays null.
pub const YOUNG_BASE: u64 = 0x1_0000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct H1Config {
    #[serde(deserialize_with = "crate::config::de_size")]
    pub young_size: u64,
    #[serde(deserialize_with = "crate::config::de_size")]
    pub old_size: u64,
    #[serde(default = "default_tenuring")]
    pub tenuring_threshold: u8,
    #[serde(default = "default_h1_card", deserialize_with = "crate::config::de_size")]
    pub card_segment: u64,
}

fn default_tenuring() -> u8 {
    2
}

fn default_h1_card() -> u64 {
    512
}

impl Default for H1Config {
    fn default() -> Self {
        H1Config {
            young_size: 16 << 20,
            old_size: 48 << 20,
            tenuring_threshold: default_tenuring(),
            card_segment: default_h1_card(),
        }
    }
}

impl H1Config {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HeapError::Config(m));
        if self.card_segment == 0 || !self.card_segment.is_multiple_of(WORD) {
            return err(format!("h1.card_segment ({}) must be a positive multiple of 8", self.card_segment));
        }
        if self.young_size == 0 || !self.young_size.is_multiple_of(self.card_segment) {
            return err(format!(
                "h1.young_size ({}) must be a positive multiple of h1.card_segment ({})",
                self.young_size, self.card_segment
            ));
        }
        if self.old_size == 0 || !self.old_size.is_multiple_of(self.card_segment) {
            return err(format!(
                "h1.old_size ({}) must be a positive multiple of h1.card_segment ({})",
                self.old_size, self.card_segment
            ));
        }
        if self.young_size < 10 * WORD * 4 {
            return err(format!("h1.young_size ({}) is too small", self.young_size));
        }
        if self.tenuring_threshold == 0 {
            return err("h1.tenuring_threshold must be at least 1".into());
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.young_size + self.old_size
    }
}

/// Address ranges of the H1 spaces. Eden, survivor A and survivor B split the
/// young generation 8:1:1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct H1Layout {
    pub young_base: u64,
    pub eden_end: u64,
    pub survivor_a: u64,
    pub survivor_b: u64,
    pub survivor_size: u64,
    pub young_end: u64,
    pub old_base: u64,
    pub old_end: u64,
}

impl H1Layout {
    pub fn new(cfg: &H1Config) -> Self {
        let survivor_size = (cfg.young_size / 10) / WORD * WORD;
        let eden = cfg.young_size - 2 * survivor_size;
        let young_base = YOUNG_BASE;
        let eden_end = young_base + eden;
        let young_end = young_base + cfg.young_size;
        H1Layout {
            young_base,
            eden_end,
            survivor_a: eden_end,
            survivor_b: eden_end + survivor_size,
            survivor_size,
            young_end,
            old_base: young_end,
            old_end: young_end + cfg.old_size,
        }
    }

    pub fn in_young(&self, addr: u64) -> bool {
        addr >= self.young_base && addr < self.young_end
    }

    pub fn in_old(&self, addr: u64) -> bool {
        addr >= self.old_base && addr < self.old_end
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.young_base && addr < self.old_end
    }
}

/// Backing words and bump pointers for H1.
pub struct H1Heap {
    pub(crate) cfg: H1Config,
    pub(crate) layout: H1Layout,
    words: Vec<u64>,
    pub(crate) eden_top: u64,
    pub(crate) from_space: u64,
    pub(crate) from_top: u64,
    pub(crate) old_top: u64,
    pub(crate) cards: H1CardTable,
    pub(crate) old_starts: StartTable,
    marks: Vec<u64>,
}

impl H1Heap {
    pub fn new(cfg: H1Config) -> Result<Self> {
        cfg.validate()?;
        let layout = H1Layout::new(&cfg);
        let cards = (cfg.old_size / cfg.card_segment) as usize;
        let total_words = (cfg.total() / WORD) as usize;
        Ok(H1Heap {
            words: vec![0; total_words],
            eden_top: layout.young_base,
            from_space: layout.survivor_a,
            from_top: layout.survivor_a,
            old_top: layout.old_base,
            cards: H1CardTable::new(layout.old_base, cfg.old_size, cfg.card_segment),
            old_starts: StartTable::new(cards, cfg.card_segment),
            marks: vec![0; total_words.div_ceil(64)],
            cfg,
            layout,
        })
    }

    pub fn config(&self) -> &H1Config {
        &self.cfg
    }

    pub fn layout(&self) -> &H1Layout {
        &self.layout
    }

    #[inline]
    fn index(&self, addr: u64) -> usize {
        debug_assert!(self.layout.contains(addr), "{addr:#x} outside H1");
        ((addr - self.layout.young_base) / WORD) as usize
    }

    #[inline]
    pub fn load(&self, addr: u64) -> u64 {
        self.words[self.index(addr)]
    }

    #[inline]
    pub fn store(&mut self, addr: u64, value: u64) {
        let i = self.index(addr);
        self.words[i] = value;
    }

    pub fn words(&self, addr: u64, len: u64) -> &[u64] {
        let i = self.index(addr);
        &self.words[i..i + (len / WORD) as usize]
    }

    pub fn write_words(&mut self, addr: u64, data: &[u64]) {
        let i = self.index(addr);
        self.words[i..i + data.len()].copy_from_slice(data);
    }

    /// Moves `len` bytes within H1; the ranges may overlap.
    pub fn move_words(&mut self, src: u64, dst: u64, len: u64) {
        let s = self.index(src);
        let d = self.index(dst);
        let n = (len / WORD) as usize;
        self.words.copy_within(s..s + n, d);
    }

    pub fn zero(&mut self, from: u64, to: u64) {
        if to > from {
            let a = self.index(from);
            let b = a + ((to - from) / WORD) as usize;
            self.words[a..b].fill(0);
        }
    }

    pub fn to_space(&self) -> u64 {
        if self.from_space == self.layout.survivor_a {
            self.layout.survivor_b
        } else {
            self.layout.survivor_a
        }
    }

    pub fn eden_free(&self) -> u64 {
        self.layout.eden_end - self.eden_top
    }

    pub fn old_free(&self) -> u64 {
        self.layout.old_end - self.old_top
    }

    pub fn old_used(&self) -> u64 {
        self.old_top - self.layout.old_base
    }

    pub fn young_used(&self) -> u64 {
        (self.eden_top - self.layout.young_base) + (self.from_top - self.from_space)
    }

    /// Bump-allocates zeroed memory in eden.
    pub fn bump_eden(&mut self, size: u64) -> Option<u64> {
        if self.eden_free() < size {
            return None;
        }
        let a = self.eden_top;
        self.eden_top += size;
        Some(a)
    }

    /// Bump-allocates in the old generation and records the object start.
    pub fn bump_old(&mut self, size: u64) -> Option<u64> {
        if self.old_free() < size {
            return None;
        }
        let a = self.old_top;
        self.old_top += size;
        self.old_starts.record(a - self.layout.old_base);
        Some(a)
    }

    /// Address-ordered live extents: old generation, from-space, then eden.
    pub fn extents(&self) -> [(u64, u64); 3] {
        [
            (self.layout.old_base, self.old_top),
            (self.from_space, self.from_top),
            (self.layout.young_base, self.eden_top),
        ]
    }

    #[inline]
    pub fn is_marked(&self, addr: u64) -> bool {
        let i = self.index(addr);
        self.marks[i / 64] & (1 << (i % 64)) != 0
    }

    /// Returns true if the bit was newly set.
    #[inline]
    pub fn set_mark(&mut self, addr: u64) -> bool {
        let i = self.index(addr);
        let bit = 1 << (i % 64);
        let w = &mut self.marks[i / 64];
        let fresh = *w & bit == 0;
        *w |= bit;
        fresh
    }

    pub fn clear_marks(&mut self) {
        self.marks.fill(0);
    }
}
