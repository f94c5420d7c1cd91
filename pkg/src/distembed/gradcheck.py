"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np

from .tensor import Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
# Denominator floor for the relative error: entries whose true gradient is
# below this magnitude are compared on an absolute scale.
REL_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    step: float = DEFAULT_STEP,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph on every call and read ``params`` by
    reference.  With ``max_entries`` set, at most that many entries per tensor
    (chosen by ``seed``) are perturbed.  Returns the max relative error per name.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        picks = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            picks = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(picks))
        for out_i, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric[out_i] = (up - down) / (2 * step)
        err = relative_error(analytic[name].reshape(-1)[picks], numeric)
        report[name] = float(err.max()) if err.size else 0.0
    return report
