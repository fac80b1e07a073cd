//! Dynamic weighted site index: O(log n) weight updates and O(log n)
//! proportional draws over a fixed set of sites.
//!
//! Rates change at no more than two sites per event, so a Fenwick (binary
//! indexed) tree over per-site weights keeps both the total and the sampling
//! path cheap. Floating-point drift from incremental updates is bounded by
//! periodic exact rebuilds.

/// Fenwick tree over nonnegative `f64` weights.
#[derive(Debug, Clone)]
pub struct WeightedIndex {
    tree: Vec<f64>,
    weights: Vec<f64>,
    mask: usize,
}

impl WeightedIndex {
    pub fn new(weights: Vec<f64>) -> Self {
        let n = weights.len();
        let mask = n.next_power_of_two();
        let mut idx = WeightedIndex {
            tree: vec![0.0; n + 1],
            weights,
            mask,
        };
        idx.rebuild();
        idx
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// Replace the weight at `i`.
    #[inline]
    pub fn set(&mut self, i: usize, w: f64) {
        debug_assert!(w >= 0.0 && w.is_finite());
        let delta = w - self.weights[i];
        self.weights[i] = w;
        let mut pos = i + 1;
        while pos < self.tree.len() {
            self.tree[pos] += delta;
            pos += pos & pos.wrapping_neg();
        }
    }

    /// Sum of all weights (subject to incremental rounding; see `rebuild`).
    #[inline]
    pub fn total(&self) -> f64 {
        self.prefix(self.weights.len())
    }

    fn prefix(&self, mut n: usize) -> f64 {
        let mut sum = 0.0;
        while n > 0 {
            sum += self.tree[n];
            n -= n & n.wrapping_neg();
        }
        sum
    }

    /// Smallest index whose prefix sum exceeds `u`; caller guarantees
    /// `0 <= u < total()`.
    #[inline]
    pub fn locate(&self, mut u: f64) -> usize {
        let mut pos = 0usize;
        let mut step = self.mask;
        while step > 0 {
            let next = pos + step;
            if next < self.tree.len() && self.tree[next] <= u {
                u -= self.tree[next];
                pos = next;
            }
            step >>= 1;
        }
        // pos is now the count of entries with cumulative weight <= u.
        let mut i = pos.min(self.weights.len() - 1);
        // Guard against landing on a zero-weight slot at fp boundaries.
        while self.weights[i] == 0.0 && i + 1 < self.weights.len() {
            i += 1;
        }
        while self.weights[i] == 0.0 && i > 0 {
            i -= 1;
        }
        i
    }

    /// Recompute the tree from the stored weights, clearing accumulated
    /// floating-point drift. Returns the exact total.
    pub fn rebuild(&mut self) -> f64 {
        // tree[i] spans weights[i - lowbit(i) .. i]; sum each span fresh.
        for i in 1..self.tree.len() {
            let span = i & i.wrapping_neg();
            let lo = i - span;
            let mut s = 0.0;
            for w in &self.weights[lo..i] {
                s += w;
            }
            self.tree[i] = s;
        }
        self.total()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn total_matches_sum() {
        let idx = WeightedIndex::new(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(idx.total(), 10.0);
    }

    #[test]
    fn locate_respects_boundaries() {
        let idx = WeightedIndex::new(vec![1.0, 0.0, 2.0]);
        assert_eq!(idx.locate(0.5), 0);
        assert_eq!(idx.locate(1.5), 2);
        assert_eq!(idx.locate(2.9), 2);
    }

    #[test]
    fn set_then_total() {
        let mut idx = WeightedIndex::new(vec![1.0; 8]);
        idx.set(3, 5.0);
        idx.set(0, 0.0);
        assert!((idx.total() - 11.0).abs() < 1e-12);
        assert_eq!(idx.locate(7.5), 4);
    }

    #[test]
    fn empirical_frequencies() {
        let weights = vec![0.5, 0.0, 1.5, 3.0];
        let idx = WeightedIndex::new(weights.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * idx.total();
            counts[idx.locate(u)] += 1;
        }
        assert_eq!(counts[1], 0);
        for (i, &w) in weights.iter().enumerate() {
            let expected = w / 5.0 * n as f64;
            if w > 0.0 {
                assert!(
                    (counts[i] as f64 - expected).abs() < 4.0 * (expected).sqrt() + 1.0,
                    "site {i}: {} vs {expected}",
                    counts[i]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn matches_naive_prefix_search(
            weights in proptest::collection::vec(0.0f64..10.0, 1..40),
            updates in proptest::collection::vec((0usize..40, 0.0f64..10.0), 0..20),
            fractions in proptest::collection::vec(0.0f64..1.0, 1..20),
        ) {
            let mut idx = WeightedIndex::new(weights.clone());
            let mut naive = weights;
            for (i, w) in updates {
                let i = i % naive.len();
                idx.set(i, w);
                naive[i] = w;
            }
            let total: f64 = naive.iter().sum();
            prop_assume!(total > 1e-9);
            prop_assert!((idx.total() - total).abs() <= 1e-9 * total.max(1.0));
            for f in fractions {
                let u = f * total * (1.0 - 1e-12);
                let got = idx.locate(u);
                // Naive scan.
                let mut acc = 0.0;
                let mut want = naive.len() - 1;
                for (i, &w) in naive.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        want = i;
                        break;
                    }
                }
                // Allow either side of an exact boundary but demand a
                // positive-weight slot and matching cumulative position.
                prop_assert!(naive[got] > 0.0 || total == 0.0);
                let lo: f64 = naive[..got].iter().sum();
                let hi = lo + naive[got];
                prop_assert!(
                    (u >= lo - 1e-9 && u <= hi + 1e-9) || got == want,
                    "u={u} got={got} want={want} lo={lo} hi={hi}"
                );
            }
        }

        #[test]
        fn rebuild_preserves_total(
            weights in proptest::collection::vec(0.0f64..10.0, 1..60),
        ) {
            let mut idx = WeightedIndex::new(weights);
            let before = idx.total();
            let after = idx.rebuild();
            prop_assert!((before - after).abs() <= 1e-9 * after.max(1.0));
        }
    }
}
