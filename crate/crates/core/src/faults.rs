//! Deliberate fault injection, used to prove the verification suites can fail.

use std::sync::atomic::{AtomicBool, Ordering};

static XNORM_EPS: AtomicBool = AtomicBool::new(false);

/// When set, every L2 normalization adds 1e-3 to its epsilon, breaking the
/// unit-norm constraint.
pub fn set_xnorm_eps_broken(on: bool) {
    XNORM_EPS.store(on, Ordering::SeqCst);
}

pub fn xnorm_eps_broken() -> bool {
    XNORM_EPS.load(Ordering::Relaxed)
}
