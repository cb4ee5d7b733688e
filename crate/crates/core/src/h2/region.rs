/// Per-region metadata. Lives in DRAM, never in the mapped image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub index: usize,
    pub alloc_offset: u64,
    pub partition: Option<u32>,
    pub used: bool,
    /// Link to the group record created when the region was first assigned.
    pub group: Option<usize>,
}

impl Region {
    pub fn new(index: usize) -> Self {
        Region { index, alloc_offset: 0, partition: None, used: false, group: None }
    }

    pub fn is_assigned(&self) -> bool {
        self.partition.is_some()
    }
}

#[derive(Clone, Debug, Default)]
struct GroupRecord {
    parent: Option<usize>,
    children: Vec<usize>,
    region: usize,
    size: usize,
    in_use: bool,
}

/// Region groups as a forest of records, one record per member region.
///
/// Merging links the root of the smaller tree under the root of the larger
/// one, which is a single pointer store plus a push onto the parent's child
/// list. Members are only enumerated when a group is inspected or freed.
#[derive(Clone, Debug, Default)]
pub struct GroupTable {
    records: Vec<GroupRecord>,
    free: Vec<usize>,
    pub(crate) link_ops: u64,
}

impl GroupTable {
    /// Creates a singleton group for `region` and returns its record id.
    pub fn create(&mut self, region: usize) -> usize {
        let rec = GroupRecord { parent: None, children: Vec::new(), region, size: 1, in_use: true };
        match self.free.pop() {
            Some(id) => {
                self.records[id] = rec;
                id
            }
            None => {
                self.records.push(rec);
                self.records.len() - 1
            }
        }
    }

    pub fn find(&self, mut id: usize) -> usize {
        while let Some(p) = self.records[id].parent {
            id = p;
        }
        id
    }

    /// Returns false if both records were already in the same group.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (big, small) =
            if self.records[ra].size >= self.records[rb].size { (ra, rb) } else { (rb, ra) };
        self.records[small].parent = Some(big);
        self.records[big].children.push(small);
        self.records[big].size += self.records[small].size;
        self.link_ops += 1;
        true
    }

    /// Record ids of every member under `root`.
    fn records_under(&self, root: usize) -> Vec<usize> {
        let mut out = vec![root];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.records[out[i]].children);
            i += 1;
        }
        out
    }

    pub fn members(&self, id: usize) -> Vec<usize> {
        let mut m: Vec<usize> =
            self.records_under(self.find(id)).into_iter().map(|r| self.records[r].region).collect();
        m.sort_unstable();
        m
    }

    pub fn size(&self, id: usize) -> usize {
        self.records[self.find(id)].size
    }

    /// Releases every record in the group containing `id`; returns the member
    /// regions.
    pub fn dissolve(&mut self, id: usize) -> Vec<usize> {
        let recs = self.records_under(self.find(id));
        let mut regions = Vec::with_capacity(recs.len());
        for r in recs {
            regions.push(self.records[r].region);
            self.records[r] = GroupRecord::default();
            self.free.push(r);
        }
        regions.sort_unstable();
        regions
    }

    pub fn live_records(&self) -> usize {
        self.records.iter().filter(|r| r.in_use).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_is_transitive_and_idempotent() {
        let mut g = GroupTable::default();
        let r1 = g.create(1);
        let r2 = g.create(2);
        let r3 = g.create(3);
        assert!(g.union(r1, r2));
        assert_eq!(g.members(r1), vec![1, 2]);
        assert!(g.union(r3, r1));
        assert_eq!(g.members(r2), vec![1, 2, 3]);
        assert!(!g.union(r2, r3));
        assert_eq!(g.link_ops, 2);
        assert_eq!(g.size(r3), 3);
    }

    #[test]
    fn dissolve_recycles_records() {
        let mut g = GroupTable::default();
        let a = g.create(4);
        let b = g.create(5);
        g.union(a, b);
        assert_eq!(g.dissolve(b), vec![4, 5]);
        assert_eq!(g.live_records(), 0);
        let c = g.create(9);
        assert!(c == a || c == b);
        assert_eq!(g.members(c), vec![9]);
    }
}
