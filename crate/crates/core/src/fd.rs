//! Central finite differences as an independent check on the tape.
//!
//! Functions with kinks (relu at exactly zero) are not covered: at a kink the
//! two one-sided slopes disagree and no single gradient is correct. Callers
//! perturb the evaluation point away from such places.

use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, Default)]
pub struct FdOptions {
    /// Check at most this many (evenly strided) entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FdReport<S> {
    /// `max |g_auto − g_fd| / max(1, |g_fd|)` over checked entries.
    pub max_rel_err: S,
    /// Tensor name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn finite_diff_check<S, F>(store: &ParamStore<S>, h: S, f: F) -> Result<FdReport<S>>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &ParamStore<S>) -> Result<Var>,
{
    finite_diff_check_with(store, h, &FdOptions::default(), f)
}

/// Compares tape gradients of `f` against central differences with step `h`.
/// Masked (pruned) entries are skipped: they are pinned to zero.
pub fn finite_diff_check_with<S, F>(
    store: &ParamStore<S>,
    h: S,
    opts: &FdOptions,
    mut f: F,
) -> Result<FdReport<S>>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &ParamStore<S>) -> Result<Var>,
{
    assert!(h > S::zero(), "finite-difference step must be positive");
    let mut work = store.detached_copy();
    let mut tape = Tape::new();
    let root = f(&mut tape, &work)?;
    tape.backward(root, &mut work)?;
    let auto_grads: Vec<(String, Vec<S>, Option<Vec<bool>>)> = work
        .iter()
        .map(|(n, p)| {
            (
                n.to_string(),
                p.grad().data().to_vec(),
                p.mask().map(<[bool]>::to_vec),
            )
        })
        .collect();

    let mut eval = |store: &ParamStore<S>| -> Result<S> {
        let mut tape = Tape::new();
        let root = f(&mut tape, store)?;
        tape.scalar_value(root)
    };

    let two_h = h + h;
    let mut report = FdReport {
        max_rel_err: S::zero(),
        worst: None,
        checked: 0,
    };
    for (name, grad, mask) in auto_grads {
        let n = grad.len();
        let stride = match opts.max_entries_per_tensor {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            if mask.as_ref().is_some_and(|m| !m[idx]) {
                continue;
            }
            let original = work.value(&name)?.data()[idx];
            work.value_data_mut(&name)?[idx] = original + h;
            let plus = eval(&work)?;
            work.value_data_mut(&name)?[idx] = original - h;
            let minus = eval(&work)?;
            work.value_data_mut(&name)?[idx] = original;
            let fd = (plus - minus) / two_h;
            let err = (grad[idx] - fd).abs() / fd.abs().max(S::one());
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err.max(report.max_rel_err);
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    work.reenforce_masks();
    Ok(report)
}
