use serde::{Deserialize, Serialize};

use crate::app::ItemKey;

/// Rectangle `[r0, r1) x [c0, c1)` of the pair matrix, standing for the
/// pairs `(i, j)` inside it with `i < j`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub r0: u32,
    pub r1: u32,
    pub c0: u32,
    pub c1: u32,
}

impl Region {
    pub fn new(r0: u32, r1: u32, c0: u32, c1: u32) -> Self {
        assert!(r0 < r1 && c0 < c1, "region ranges must be nonempty");
        Region { r0, r1, c0, c1 }
    }

    /// The whole matrix for `n` items.
    pub fn root(n: u32) -> Self {
        Region::new(0, n.max(1), 0, n.max(1))
    }

    pub fn rows(&self) -> u32 {
        self.r1 - self.r0
    }

    pub fn cols(&self) -> u32 {
        self.c1 - self.c0
    }

    /// Number of pairs `i < j` in the rectangle.
    pub fn pair_count(&self) -> u64 {
        // For row i the admissible columns are [max(c0, i + 1), c1).
        (self.r0..self.r1)
            .map(|i| self.c1.saturating_sub(self.c0.max(i + 1)) as u64)
            .sum()
    }

    pub fn has_pairs(&self) -> bool {
        // The row with the most admissible columns is the first one.
        self.c1 > self.c0.max(self.r0 + 1)
    }

    pub fn is_leaf(&self, leaf_block: u32) -> bool {
        self.rows() <= leaf_block && self.cols() <= leaf_block
    }

    /// Quadrants by midpoint bisection; ranges of length one are not split
    /// and quadrants without pairs are dropped.
    pub fn split(&self) -> Vec<Region> {
        fn halves(a: u32, b: u32) -> Vec<(u32, u32)> {
            if b - a <= 1 {
                vec![(a, b)]
            } else {
                let m = a + (b - a) / 2;
                vec![(a, m), (m, b)]
            }
        }
        let mut out = Vec::with_capacity(4);
        for &(r0, r1) in &halves(self.r0, self.r1) {
            for &(c0, c1) in &halves(self.c0, self.c1) {
                let q = Region { r0, r1, c0, c1 };
                if q.has_pairs() {
                    out.push(q);
                }
            }
        }
        out
    }

    /// Pairs in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (ItemKey, ItemKey)> + '_ {
        (self.r0..self.r1)
            .flat_map(move |i| (self.c0.max(i + 1)..self.c1).map(move |j| (ItemKey(i), ItemKey(j))))
    }

    /// The `idx`-th pair in row-major order, if any.
    pub fn nth_pair(&self, mut idx: u64) -> Option<(ItemKey, ItemKey)> {
        for i in self.r0..self.r1 {
            let start = self.c0.max(i + 1);
            let cnt = self.c1.saturating_sub(start) as u64;
            if idx < cnt {
                return Some((ItemKey(i), ItemKey(start + idx as u32)));
            }
            idx -= cnt;
        }
        None
    }
}

/// A region at some depth of the task tree.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    pub region: Region,
    pub level: u16,
}

impl TaskNode {
    pub fn root(n: u32) -> Self {
        TaskNode {
            region: Region::root(n),
            level: 0,
        }
    }

    pub fn children(&self) -> Vec<TaskNode> {
        self.region
            .split()
            .into_iter()
            .map(|region| TaskNode {
                region,
                level: self.level + 1,
            })
            .collect()
    }
}
