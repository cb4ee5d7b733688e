pub const CLEAN: u8 = 0;
pub const DIRTY: u8 = 1;

/// Old-to-young card table: one byte per old-generation segment.
#[derive(Clone, Debug)]
pub struct H1CardTable {
    cards: Vec<u8>,
    base: u64,
    segment: u64,
}

impl H1CardTable {
    pub fn new(base: u64, size: u64, segment: u64) -> Self {
        H1CardTable { cards: vec![CLEAN; (size / segment) as usize], base, segment }
    }

    #[inline]
    pub fn index_of(&self, addr: u64) -> usize {
        ((addr - self.base) / self.segment) as usize
    }

    #[inline]
    pub fn dirty(&mut self, addr: u64) {
        let i = self.index_of(addr);
        self.cards[i] = DIRTY;
    }

    pub fn is_dirty(&self, card: usize) -> bool {
        self.cards[card] == DIRTY
    }

    pub fn clean(&mut self, card: usize) {
        self.cards[card] = CLEAN;
    }

    pub fn clear(&mut self) {
        self.cards.fill(CLEAN);
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

    pub fn card_start(&self, card: usize) -> u64 {
        self.base + card as u64 * self.segment
    }

    pub fn dirty_cards(&self) -> impl Iterator<Item = usize> + '_ {
        self.cards.iter().enumerate().filter(|(_, &c)| c == DIRTY).map(|(i, _)| i)
    }

    pub fn dirty_count(&self) -> usize {
        self.cards.iter().filter(|&&c| c == DIRTY).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn card_index_is_floor_division() {
        let mut t = H1CardTable::new(4096, 4096, 512);
        t.dirty(4096);
        assert!(t.is_dirty(0));
        t.dirty(4096 + 512);
        assert!(t.is_dirty(1));
        t.dirty(4096 + 513);
        assert_eq!(t.dirty_count(), 2);
    }
}
