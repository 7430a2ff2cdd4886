//! Baskets (co-consumption sets) and the index of which items were ever
//! consumed together.

use std::collections::BTreeSet;

use crate::views::ItemIdx;

/// One deduplicated, sorted item set per user or session. Every basket holds
/// at least two items.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BasketDataset {
    baskets: Vec<Vec<ItemIdx>>,
}

impl BasketDataset {
    pub fn baskets(&self) -> &[Vec<ItemIdx>] {
        &self.baskets
    }

    pub fn len(&self) -> usize {
        self.baskets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.baskets.is_empty()
    }

    /// Items that occur in at least one basket, ascending.
    pub fn items(&self) -> Vec<ItemIdx> {
        let set: BTreeSet<ItemIdx> = self.baskets.iter().flatten().copied().collect();
        set.into_iter().collect()
    }

    /// Number of baskets each item occurs in, indexed by item.
    pub fn item_counts(&self, catalog_len: usize) -> Vec<u64> {
        let mut counts = vec![0u64; catalog_len];
        for item in self.baskets.iter().flatten() {
            counts[item.index()] += 1;
        }
        counts
    }

    /// Removes `items` from every basket, dropping baskets that shrink below
    /// two items. Returns the number of dropped baskets.
    pub fn remove_items(&mut self, items: &BTreeSet<ItemIdx>) -> usize {
        let before = self.baskets.len();
        for basket in &mut self.baskets {
            basket.retain(|i| !items.contains(i));
        }
        self.baskets.retain(|b| b.len() >= 2);
        before - self.baskets.len()
    }
}

/// Deduplicates each history into a basket; histories with fewer than two
/// distinct items are dropped and counted.
pub fn build_baskets<I, H>(histories: I) -> (BasketDataset, usize)
where
    I: IntoIterator<Item = H>,
    H: IntoIterator<Item = ItemIdx>,
{
    let mut baskets = Vec::new();
    let mut dropped = 0;
    for history in histories {
        let set: BTreeSet<ItemIdx> = history.into_iter().collect();
        if set.len() < 2 {
            dropped += 1;
            continue;
        }
        baskets.push(set.into_iter().collect());
    }
    (BasketDataset { baskets }, dropped)
}

/// For every item, the sorted list of items it shares a basket with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoConsumptionIndex {
    neighbours: Vec<Vec<ItemIdx>>,
}

impl CoConsumptionIndex {
    pub fn new(baskets: &BasketDataset, catalog_len: usize) -> Self {
        let mut sets: Vec<BTreeSet<ItemIdx>> = vec![BTreeSet::new(); catalog_len];
        for basket in baskets.baskets() {
            for &a in basket {
                for &b in basket {
                    if a != b {
                        sets[a.index()].insert(b);
                    }
                }
            }
        }
        CoConsumptionIndex {
            neighbours: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn neighbours(&self, item: ItemIdx) -> &[ItemIdx] {
        &self.neighbours[item.index()]
    }

    pub fn co_consumed(&self, a: ItemIdx, b: ItemIdx) -> bool {
        self.neighbours[a.index()].binary_search(&b).is_ok()
    }
}
