//! Dataset generation with worker threads.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use synthdyn_core::rkhs::SamplerConfig;
use synthdyn_core::trajgen::{assemble_dataset, generate_candidate, TrajGenConfig};
use synthdyn_core::Dataset;

use crate::error::Result;

/// `f(0..n)` evaluated by `threads` workers; results are in index order.
pub fn parallel_map<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    const BLOCK: usize = 64;
    std::thread::scope(|s| {
        for _ in 0..threads.min(n) {
            s.spawn(|| loop {
                let start = next.fetch_add(BLOCK, Ordering::Relaxed);
                if start >= n {
                    break;
                }
                let done: Vec<(usize, R)> = (start..(start + BLOCK).min(n)).map(|i| (i, f(i))).collect();
                let mut guard = slots.lock().expect("workers do not panic while holding the lock");
                for (i, r) in done {
                    guard[i] = Some(r);
                }
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every index ran")).collect()
}

/// The RKHS generation recipe with candidates spread over `threads` workers.
/// The output is identical for every thread count.
pub fn generate_rkhs(scfg: &SamplerConfig, tcfg: &TrajGenConfig, threads: usize) -> Result<Dataset> {
    scfg.validate()?;
    tcfg.validate()?;
    let outcomes = parallel_map(tcfg.n_functions, threads, |i| generate_candidate(scfg, tcfg, i))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(assemble_dataset(scfg, tcfg, outcomes)?)
}
