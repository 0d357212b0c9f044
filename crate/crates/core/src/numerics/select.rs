use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::{Error, Result};

/// Ordering used by every magnitude selection: larger `|value|` first,
/// lower position first on ties.
pub fn magnitude_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0))
}

/// Indices of the `k` largest-magnitude values, sorted ascending.
pub fn top_k_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::Budget {
            requested: k,
            available: values.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    let cmp = |&a: &usize, &b: &usize| magnitude_order((a, values[a]), (b, values[b]));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}
