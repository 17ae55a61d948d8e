//! Execution-mode shim: data-parallel fan-out with a sequential fallback.
//!
//! Every fan-out in the crate goes through [`map_items`], which preserves
//! input order in its output. Ordered collection keeps results bit-identical
//! between the rayon and sequential paths, so switching modes never changes
//! artifacts. Built without the `parallel` feature the crate is sequential
//! throughout.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

#[cfg(feature = "parallel")]
const DEFAULT_MODE: u8 = 1;
#[cfg(not(feature = "parallel"))]
const DEFAULT_MODE: u8 = 0;

static MODE: AtomicU8 = AtomicU8::new(DEFAULT_MODE);

/// Select the execution mode for subsequent [`map_items`] calls.
pub fn set_mode(mode: Mode) {
    let v = match mode {
        Mode::Sequential => 0,
        #[cfg(feature = "parallel")]
        Mode::Rayon => 1,
    };
    MODE.store(v, Ordering::SeqCst);
}

pub fn mode() -> Mode {
    match MODE.load(Ordering::SeqCst) {
        #[cfg(feature = "parallel")]
        1 => Mode::Rayon,
        _ => Mode::Sequential,
    }
}

/// Cap the rayon pool from a thread-count hint; `Some(1)` forces the
/// sequential path. Called once at process start (the CLI wires it to
/// `MOTIONWARP_THREADS`). Returns whether the hint was applied.
pub fn configure_threads(threads: Option<usize>) -> bool {
    match threads {
        None => true,
        Some(0) => false,
        Some(1) => {
            set_mode(Mode::Sequential);
            true
        }
        #[cfg(feature = "parallel")]
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_ok(),
        #[cfg(not(feature = "parallel"))]
        Some(_) => true,
    }
}

/// Map `f` over `items`, in parallel when the mode allows it.
/// Output order always matches input order.
pub fn map_items<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode() {
        Mode::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Mode::Rayon => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
    }
}

/// Indexed variant of [`map_items`] for seed-per-item derivations.
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode() {
        Mode::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Mode::Rayon => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_output_matches_sequential() {
        let items: Vec<u64> = (0..257).collect();
        let seq: Vec<u64> = items.iter().map(|x| x * x).collect();
        let got = map_items(&items, |x| x * x);
        assert_eq!(seq, got);
        let got_idx = map_indices(items.len(), |i| items[i] * items[i]);
        assert_eq!(seq, got_idx);
    }
}
