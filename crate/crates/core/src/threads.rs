//! Deterministic worker partitioning for the hot numeric kernels.
//!
//! Parallelism is restricted to disjoint-output-slice work: every output
//! element is written by exactly one worker using a fixed sequential inner
//! loop, so results are bit-identical regardless of worker count.

use std::sync::OnceLock;

/// Number of workers used by the compute kernels.
///
/// Defaults to all available cores; `AVATARFORGE_THREADS` overrides it
/// (values below 1 or unparseable values fall back to the default).
pub fn worker_count() -> usize {
    static N: OnceLock<usize> = OnceLock::new();
    *N.get_or_init(|| {
        let hw = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        match std::env::var("AVATARFORGE_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
        {
            Some(n) if n >= 1 => n,
            _ => hw,
        }
    })
}

/// Runs `f(first_row, chunk)` over contiguous row chunks of `out`.
///
/// `out.len()` must be a multiple of `width`. With one worker (or one row)
/// the call is inlined on the current thread.
pub fn par_rows<T, F>(out: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(width > 0 && out.len() % width == 0);
    let rows = out.len() / width;
    let workers = worker_count().min(rows.max(1));
    if workers <= 1 || rows <= 1 {
        f(0, out);
        return;
    }
    let per = rows.div_ceil(workers);
    std::thread::scope(|s| {
        let mut rest = out;
        let mut row0 = 0usize;
        while row0 < rows {
            let take = per.min(rows - row0);
            let (head, tail) = rest.split_at_mut(take * width);
            rest = tail;
            let fr = &f;
            s.spawn(move || fr(row0, head));
            row0 += take;
        }
    });
}
