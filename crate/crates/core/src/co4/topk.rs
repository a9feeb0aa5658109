//! Exact top-k selection with a bounded min-heap.

use crate::macs;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// `true` when `a` ranks strictly below `b`: lower score, or equal score
/// with a higher index.
#[inline]
fn worse(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 > b.1)
}

struct Heap {
    items: Vec<(f64, usize)>,
    comparisons: u64,
}

impl Heap {
    fn less(&mut self, i: usize, j: usize) -> bool {
        self.comparisons += 1;
        worse(self.items[i], self.items[j])
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let parent = (i - 1) / 2;
            if self.less(i, parent) {
                self.items.swap(i, parent);
                i = parent;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        let n = self.items.len();
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut m = i;
            if l < n && self.less(l, m) {
                m = l;
            }
            if r < n && self.less(r, m) {
                m = r;
            }
            if m == i {
                break;
            }
            self.items.swap(i, m);
            i = m;
        }
    }
}

/// Indices of the `k` largest entries of `scores`, ties broken toward the
/// lower index, returned in ascending index order. Comparisons are added to
/// the MAC counter.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("top-k needs 1 <= k <= {n}, got {k}")));
    }
    let mut heap = Heap {
        items: Vec::with_capacity(k),
        comparisons: 0,
    };
    for (i, &s) in scores.iter().enumerate() {
        if heap.items.len() < k {
            heap.items.push((s, i));
            let last = heap.items.len() - 1;
            heap.sift_up(last);
        } else {
            heap.comparisons += 1;
            if worse(heap.items[0], (s, i)) {
                heap.items[0] = (s, i);
                heap.sift_down(0);
            }
        }
    }
    macs::add(heap.comparisons);
    let mut idx: Vec<usize> = heap.items.into_iter().map(|(_, i)| i).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Row-wise [`topk_indices`] over a `(B, N)` score tensor.
pub fn topk_select(scores: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    if scores.rank() != 2 {
        return Err(Error::shape(format!("scores must be (B, N), got {:?}", scores.shape())));
    }
    let n = scores.shape()[1];
    scores.data().chunks(n).map(|row| topk_indices(row, k)).collect()
}
