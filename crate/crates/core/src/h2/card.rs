use std::sync::atomic::{AtomicU8, Ordering};

pub const CLEAN: u8 = 0;
pub const DIRTY: u8 = 1;

/// H2 card table. Cards are grouped into stripes of `cards_per_stripe`, and
/// `threads` consecutive stripes form a slice; scan thread `t` owns stripe
/// `t` of every slice.
#[derive(Debug)]
pub struct H2CardTable {
    cards: Vec<AtomicU8>,
    segment: u64,
    cards_per_stripe: usize,
    threads: usize,
}

impl H2CardTable {
    pub fn new(size: u64, segment: u64, stripe_size: u64, threads: usize) -> Self {
        let n = (size / segment) as usize;
        H2CardTable {
            cards: (0..n).map(|_| AtomicU8::new(CLEAN)).collect(),
            segment,
            cards_per_stripe: (stripe_size / segment) as usize,
            threads,
        }
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }

    pub fn segment(&self) -> u64 {
        self.segment
    }

    pub fn cards_per_stripe(&self) -> usize {
        self.cards_per_stripe
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn stripes(&self) -> usize {
        self.cards.len().div_ceil(self.cards_per_stripe)
    }

    pub fn slices(&self) -> usize {
        self.stripes().div_ceil(self.threads)
    }

    /// Card index for a byte offset from the H2 base.
    #[inline]
    pub fn index_of(&self, rel: u64) -> usize {
        (rel / self.segment) as usize
    }

    #[inline]
    pub fn dirty(&self, card: usize) {
        self.cards[card].store(DIRTY, Ordering::Relaxed);
    }

    #[inline]
    pub fn is_dirty(&self, card: usize) -> bool {
        self.cards[card].load(Ordering::Relaxed) == DIRTY
    }

    /// First or last card of a stripe.
    #[inline]
    pub fn is_boundary(&self, card: usize) -> bool {
        let pos = card % self.cards_per_stripe;
        pos == 0 || pos == self.cards_per_stripe - 1
    }

    /// The scan thread that owns `card`.
    #[inline]
    pub fn owner(&self, card: usize) -> usize {
        (card / self.cards_per_stripe) % self.threads
    }

    /// Cleans a card after a scan found nothing in it. Boundary cards are
    /// left alone.
    pub fn clean_scanned(&self, card: usize) -> bool {
        if self.is_boundary(card) {
            return false;
        }
        self.cards[card].store(CLEAN, Ordering::Relaxed);
        true
    }

    /// Unconditional clean, used only when a region is reset.
    pub fn reset(&self, card: usize) {
        self.cards[card].store(CLEAN, Ordering::Relaxed);
    }

    /// Every card owned by `thread`, slice by slice.
    pub fn stripe_cards(&self, thread: usize) -> impl Iterator<Item = usize> + '_ {
        let cps = self.cards_per_stripe;
        let n = self.cards.len();
        (thread..self.stripes())
            .step_by(self.threads)
            .flat_map(move |s| s * cps..((s + 1) * cps).min(n))
    }

    pub fn dirty_count(&self) -> usize {
        (0..self.cards.len()).filter(|&c| self.is_dirty(c)).count()
    }

    pub fn boundary_count(&self) -> usize {
        (0..self.cards.len()).filter(|&c| self.is_boundary(c)).count()
    }
}
