//! Sets of half-open `u64` ranges, used for ACK bookkeeping and stream
//! reassembly.

use std::collections::BTreeMap;
use std::ops::Range;

/// A set of disjoint, non-adjacent half-open ranges. Adjacent or
/// overlapping inserts are coalesced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RangeSet {
    // start -> end
    map: BTreeMap<u64, u64>,
}

impl RangeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Number of disjoint ranges.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    /// Total number of covered values.
    pub fn covered(&self) -> u64 {
        self.map.iter().map(|(s, e)| e - s).sum()
    }

    pub fn insert(&mut self, range: Range<u64>) {
        if range.start >= range.end {
            return;
        }
        let mut start = range.start;
        let mut end = range.end;
        // a predecessor that touches or overlaps
        if let Some((&s, &e)) = self.map.range(..=start).next_back() {
            if e >= start {
                start = s;
                end = end.max(e);
                self.map.remove(&s);
            }
        }
        // successors swallowed by the new range
        while let Some((&s, &e)) = self.map.range(start..).next() {
            if s > end {
                break;
            }
            end = end.max(e);
            self.map.remove(&s);
        }
        self.map.insert(start, end);
    }

    pub fn insert_one(&mut self, value: u64) {
        self.insert(value..value + 1);
    }

    pub fn contains(&self, value: u64) -> bool {
        self.map.range(..=value).next_back().is_some_and(|(_, &e)| value < e)
    }

    /// True when every value of `range` is covered.
    pub fn contains_range(&self, range: Range<u64>) -> bool {
        if range.start >= range.end {
            return true;
        }
        self.map
            .range(..=range.start)
            .next_back()
            .is_some_and(|(_, &e)| range.end <= e)
    }

    /// Removes every value below `bound`.
    pub fn remove_below(&mut self, bound: u64) {
        while let Some((&s, &e)) = self.map.iter().next() {
            if s >= bound {
                break;
            }
            self.map.remove(&s);
            if e > bound {
                self.map.insert(bound, e);
                break;
            }
        }
    }

    pub fn remove(&mut self, range: Range<u64>) {
        if range.start >= range.end {
            return;
        }
        let overlapping: Vec<(u64, u64)> = self
            .map
            .range(..range.end)
            .rev()
            .take_while(|(_, &e)| e > range.start)
            .map(|(&s, &e)| (s, e))
            .collect();
        for (s, e) in overlapping {
            self.map.remove(&s);
            if s < range.start {
                self.map.insert(s, range.start);
            }
            if e > range.end {
                self.map.insert(range.end, e);
            }
        }
    }

    /// The range containing `value`, if any.
    pub fn range_containing(&self, value: u64) -> Option<Range<u64>> {
        self.map
            .range(..=value)
            .next_back()
            .filter(|(_, &e)| value < e)
            .map(|(&s, &e)| s..e)
    }

    /// First range starting at or after `value`.
    pub fn next_range_from(&self, value: u64) -> Option<Range<u64>> {
        self.map.range(value..).next().map(|(&s, &e)| s..e)
    }

    pub fn first(&self) -> Option<Range<u64>> {
        self.map.iter().next().map(|(&s, &e)| s..e)
    }

    pub fn last(&self) -> Option<Range<u64>> {
        self.map.iter().next_back().map(|(&s, &e)| s..e)
    }

    /// Pops the lowest range.
    pub fn pop_first(&mut self) -> Option<Range<u64>> {
        self.map.pop_first().map(|(s, e)| s..e)
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = Range<u64>> + '_ {
        self.map.iter().map(|(&s, &e)| s..e)
    }

    /// Sub-ranges of `range` not covered by the set, in ascending order.
    pub fn gaps_within(&self, range: Range<u64>) -> Vec<Range<u64>> {
        let mut out = Vec::new();
        let mut cursor = range.start;
        if let Some(r) = self.range_containing(cursor) {
            cursor = r.end;
        }
        if cursor >= range.end {
            return out;
        }
        for (&s, &e) in self.map.range(cursor..range.end) {
            if s > cursor {
                out.push(cursor..s);
            }
            cursor = cursor.max(e);
        }
        if cursor < range.end {
            out.push(cursor..range.end);
        }
        out
    }
}

impl FromIterator<Range<u64>> for RangeSet {
    fn from_iter<I: IntoIterator<Item = Range<u64>>>(iter: I) -> Self {
        let mut set = RangeSet::new();
        for r in iter {
            set.insert(r);
        }
        set
    }
}
