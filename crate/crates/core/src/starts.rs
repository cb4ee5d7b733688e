/// Per-card offset of the first object that starts inside the card.
///
/// Spaces are filled by bump allocation, so recording each allocation in
/// order keeps the earliest start per card. Locating the object that spills
/// into a card from the left walks back to the nearest card with a start.
#[derive(Clone, Debug)]
pub struct StartTable {
    first: Vec<u32>,
    segment: u64,
}

const NONE: u32 = u32::MAX;

impl StartTable {
    pub fn new(cards: usize, segment: u64) -> Self {
        StartTable { first: vec![NONE; cards], segment }
    }

    /// Records an object start at `rel` bytes from the covered base.
    pub fn record(&mut self, rel: u64) {
        let card = (rel / self.segment) as usize;
        let off = (rel % self.segment) as u32;
        let slot = &mut self.first[card];
        if *slot == NONE || off < *slot {
            *slot = off;
        }
    }

    /// Relative address of the first object starting in `card`.
    pub fn first_in(&self, card: usize) -> Option<u64> {
        match self.first[card] {
            NONE => None,
            off => Some(card as u64 * self.segment + off as u64),
        }
    }

    /// Nearest recorded start strictly before `card`, not looking below
    /// `floor_card`.
    pub fn start_before(&self, card: usize, floor_card: usize) -> Option<u64> {
        (floor_card..card).rev().find_map(|c| self.first_in(c))
    }

    pub fn clear_range(&mut self, cards: std::ops::Range<usize>) {
        self.first[cards].fill(NONE);
    }

    pub fn clear(&mut self) {
        self.first.fill(NONE);
    }
}
