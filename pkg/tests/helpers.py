"""Shared test oracles: central finite differences and error metrics."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from tsp_tta import autodiff as ad


def finite_diff_grads(
    f: Callable[[list[np.ndarray]], float],
    arrays: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of several arrays."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for ai in range(len(arrays)):
        flat = arrays[ai].ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(arrays)
            flat[i] = orig - h
            fm = f(arrays)
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(arrays[ai].shape))
    return grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Relative error with an absolute floor: |a-n| / max(|a|, |n|, floor).

    Below the floor the comparison is effectively absolute, which keeps
    finite-difference truncation noise from dominating near-zero entries.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def check_gradients(
    make_loss: Callable[[list[ad.Node]], ad.Node],
    arrays: Sequence[np.ndarray],
    tol: float,
    h: float = 1e-5,
    floor: float = 1e-2,
) -> float:
    """Compare backward() gradients against the finite-difference oracle.

    ``make_loss`` builds a scalar Node from leaf nodes wrapping the arrays.
    Returns the worst relative error (and asserts it is under ``tol``).
    """
    leaves = [ad.Node(np.array(a, dtype=np.float64)) for a in arrays]
    loss = make_loss(leaves)
    ad.backward(loss)
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        for leaf in leaves
    ]

    def f(arrs: list[np.ndarray]) -> float:
        with ad.no_grad():
            return float(make_loss([ad.Node(a) for a in arrs]).value)

    numeric = finite_diff_grads(f, arrays, h)
    worst = max(
        max_rel_err(a, n, floor) for a, n in zip(analytic, numeric)
    )
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3e} >= {tol:.0e}"
    return worst
