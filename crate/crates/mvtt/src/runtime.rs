//! Process-wide execution settings.
//!
//! `MVTT_THREADS` caps the rayon pool; the deterministic flag forces
//! single-threaded evaluation. Per-output-element reduction order is fixed
//! either way, so parallel and sequential runs are bit-identical; the flag
//! exists so replays are also scheduling-identical.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Once;

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);
static POOL_INIT: Once = Once::new();

pub fn set_deterministic(flag: bool) {
    DETERMINISTIC.store(flag, Ordering::SeqCst);
}

pub fn deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

/// Configure the global rayon pool from `MVTT_THREADS`. Safe to call more
/// than once; only the first call takes effect.
pub fn init_threads() {
    POOL_INIT.call_once(|| {
        if let Ok(v) = std::env::var("MVTT_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    // Ignore failure: the pool may already be built.
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}
