"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                       indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    Only the flat positions in ``indices`` are evaluated when given; the rest
    of the returned array is NaN.
    """
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan) if indices is not None else np.zeros(flat.shape)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``, ignoring NaN entries."""
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = 1e-6) -> float:
    """Compare tape gradients of scalar ``fn(*inputs)`` against central differences.

    Returns the worst relative error over all inputs that require grad.  When
    ``max_entries`` is set, a random subset of that many entries per input is
    checked.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)

    def scalar() -> float:
        return float(fn(*inputs).data)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        idx = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(t.size, size=max_entries, replace=False)
        num = numerical_gradient(scalar, t.data, h=h, indices=idx)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, num, floor=floor))
    return worst


def check_model_gradients(params: Sequence[Tensor], loss_fn: Callable[[], Tensor], n_entries: int = 500,
                          rng: np.random.Generator | None = None, h: float = 1e-5,
                          floor: float = 1e-6) -> tuple[float, int]:
    """Finite-difference sweep over ``n_entries`` parameter entries drawn across ``params``.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values.  Returns ``(worst relative error, entries checked)``.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_entries, total), replace=False)
    owner = np.searchsorted(np.cumsum(sizes), picks, side="right")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    analytic, numeric = [], []
    for flat_index, pi in zip(picks, owner):
        p = params[pi]
        local = int(flat_index - starts[pi])
        num = numerical_gradient(lambda: float(loss_fn().data), p.data, h=h, indices=[local])
        numeric.append(num.reshape(-1)[local])
        analytic.append(0.0 if p.grad is None else p.grad.reshape(-1)[local])
    return relative_error(np.array(analytic), np.array(numeric), floor=floor), len(picks)
