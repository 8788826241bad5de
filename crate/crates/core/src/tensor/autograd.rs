//! Backward pass over the recorded tape, plus the grad-mode and
//! checked-mode switches.

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static CHECKED: AtomicBool = AtomicBool::new(true);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Enable or disable the NaN/Inf scan after each op. On by default.
pub fn set_checked(enabled: bool) {
    CHECKED.store(enabled, Ordering::Relaxed);
}

pub fn checked_enabled() -> bool {
    CHECKED.load(Ordering::Relaxed)
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Suspends tape recording for the current thread while the guard lives.
pub struct NoGradGuard {
    prev: bool,
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl NoGradGuard {
    pub fn new() -> NoGradGuard {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

/// Runs `f` without recording any backward closures.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

/// Propagates gradients from a scalar loss to every reachable leaf.
///
/// Leaves created with `requires_grad` accumulate into their `grad` buffer.
/// Calling backward twice on the same loss without rebuilding the graph is
/// rejected.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if loss.inner.spent.get() {
        return Err(Error::Contract(
            "backward already ran for this loss; rebuild the graph before calling again".into(),
        ));
    }
    loss.inner.spent.set(true);

    let order = topo_order(loss);

    let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
    grads.insert(loss.inner.id, vec![1.0]);

    for t in order.iter().rev() {
        let Some(grad_out) = grads.remove(&t.inner.id) else {
            continue;
        };
        if t.inner.requires_grad {
            let mut slot = t.inner.grad.borrow_mut();
            match slot.as_mut() {
                Some(existing) => {
                    for (e, g) in existing.iter_mut().zip(grad_out.iter()) {
                        *e += g;
                    }
                }
                None => *slot = Some(grad_out.clone()),
            }
        }
        if let Some(node) = &t.inner.node {
            let out_data = t.inner.data.borrow();
            let parent_grads = (node.backward)(&node.parents, &out_data, &grad_out)?;
            drop(out_data);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.tracked() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel());
                match grads.get_mut(&parent.inner.id) {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(pg.iter()) {
                            *a += g;
                        }
                    }
                    None => {
                        grads.insert(parent.inner.id, pg);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Iterative DFS postorder; children (parents in tape terms) come before
/// their consumers, so the reverse walk sees each node after all of its
/// downstream gradient contributions have accumulated.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
    // (tensor, parents_pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.inner.id) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.inner.node {
            for p in &node.parents {
                if !visited.contains(&p.inner.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}
