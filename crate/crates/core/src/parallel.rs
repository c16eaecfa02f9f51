//! Deterministic data parallelism.
//!
//! The `PROTOALIGN_THREADS` environment variable caps how many worker
//! threads row-wise kernels may use (unset or unparsable means 1). Work is
//! split into contiguous row chunks and every row is produced by the same
//! pure function regardless of the split, so results are bit-identical at
//! any thread count.

use std::env;

/// Environment variable holding the thread cap.
pub const THREADS_ENV: &str = "PROTOALIGN_THREADS";

/// Current thread cap: the parsed value of [`THREADS_ENV`], at least 1.
pub fn thread_cap() -> usize {
    match env::var(THREADS_ENV) {
        Ok(raw) => raw.trim().parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(1),
        Err(_) => 1,
    }
}

/// Fills disjoint row chunks of `out` by calling `fill(first_row, chunk)`,
/// using up to [`thread_cap`] threads. `row_len` is the stride of one row;
/// `fill` must compute each row independently of the others.
pub fn for_each_row_chunk<T, F>(out: &mut [T], row_len: usize, fill: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(row_len > 0, "row_len must be positive");
    assert_eq!(out.len() % row_len, 0, "output length must be a whole number of rows");
    let rows = out.len() / row_len;
    let threads = thread_cap().min(rows.max(1));
    if threads <= 1 || rows <= 1 {
        fill(0, out);
        return;
    }
    let chunk_rows = rows.div_ceil(threads);
    std::thread::scope(|scope| {
        let fill = &fill;
        for (index, chunk) in out.chunks_mut(chunk_rows * row_len).enumerate() {
            scope.spawn(move || fill(index * chunk_rows, chunk));
        }
    });
}
