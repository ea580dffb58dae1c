//! Deterministic parallel reductions: fixed-size chunks are folded in
//! parallel and the partial results combined in index order, so the result
//! does not depend on the thread count.

use rayon::prelude::*;

use crate::error::Result;

pub const CHUNK: usize = 32;

pub fn chunked_fold<A, Z, F, M>(n: usize, zero: Z, fold: F, merge: M) -> Result<A>
where
    A: Send,
    Z: Fn() -> A + Sync,
    F: Fn(&mut A, usize) -> Result<()> + Sync,
    M: Fn(&mut A, A),
{
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let partials: Vec<Result<A>> = starts
        .par_iter()
        .map(|&s| {
            let mut acc = zero();
            for i in s..(s + CHUNK).min(n) {
                fold(&mut acc, i)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = zero();
    for p in partials {
        merge(&mut total, p?);
    }
    Ok(total)
}
