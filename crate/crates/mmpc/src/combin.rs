//! Subset enumeration and binomial coefficients used by the planner.

use itertools::Itertools;

/// C(n, k) with the usual convention C(n, k) = 0 for k > n.
pub fn binom(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for j in 0..k {
        acc = acc * (n - j) as u128 / (j + 1) as u128;
    }
    acc
}

/// All k-element subsets of `universe` in lexicographic order.
/// `universe` must be sorted; each subset comes back sorted.
pub fn k_subsets(universe: &[usize], k: usize) -> Vec<Vec<usize>> {
    debug_assert!(universe.windows(2).all(|w| w[0] < w[1]));
    universe.iter().copied().combinations(k).collect()
}

/// Sorted set difference a \ b (both sorted).
pub fn set_minus(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().copied().filter(|x| !b.contains(x)).collect()
}
