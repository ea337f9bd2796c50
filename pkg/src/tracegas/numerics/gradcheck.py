"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import Tensor, backward


def finite_diff_grad(f: Callable[[], Tensor], leaf: Tensor, coords, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. selected flat coords of ``leaf``."""
    flat = leaf.data.reshape(-1)
    out = np.zeros(len(coords), dtype=np.float64)
    for n, idx in enumerate(coords):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = f().item()
        flat[idx] = orig - h
        fm = f().item()
        flat[idx] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(f: Callable[[], Tensor], leaves: Dict[str, Tensor],
                    rng=None, max_coords: int = 6, h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    Checks up to ``max_coords`` randomly chosen coordinates per leaf (all of
    them for small leaves) and returns the worst relative error.  Leaves must
    be float64 for the differences to be trustworthy.
    """
    for t in leaves.values():
        t.grad = None
        assert t.dtype == np.float64, "gradient checks require float64 leaves"
    loss = f()
    backward(loss)
    worst = 0.0
    for name, leaf in leaves.items():
        n = leaf.size
        if rng is not None and n > max_coords:
            coords = sorted(set(int(i) for i in rng.integers(0, n, shape=max_coords)))
        else:
            coords = list(range(min(n, max_coords)))
        fd = finite_diff_grad(f, leaf, coords, h=h)
        if leaf.grad is None:
            ad = np.zeros(len(coords))
        else:
            ad = leaf.grad.reshape(-1)[coords]
        for a, d in zip(ad, fd):
            err = abs(a - d) / max(abs(a), abs(d), 1e-3)
            if err > worst:
                worst = err
    return worst
