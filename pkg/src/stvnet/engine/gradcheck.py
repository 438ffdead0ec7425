"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_record


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss)
    return [grads.get(p, np.zeros_like(p.data)) for p in params]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float | Sequence[float] = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is re-evaluated with each probed entry moved by ``+h`` and ``-h``.
    The error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.  When
    ``max_entries`` is given, only that many entries (drawn uniformly across
    all parameters with ``rng``) are probed.

    ``h`` may also be a decreasing ladder of at least three steps.  Each
    entry is then differenced at every step and, among the interior rungs,
    the estimate that moves least towards either neighbour is kept (ties
    go to the rung whose other neighbour is closer).  Large
    steps can straddle ReLU kinks while tiny ones drown small derivatives
    in rounding noise; the ladder lets each entry settle between the two.
    The choice never looks at the analytic value.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("finite_diff_check needs float64 parameters")
    analytic = analytic_grads(f, params)
    steps = [float(h)] if np.isscalar(h) else [float(s) for s in h]

    probes = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if max_entries is not None and max_entries < len(probes):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(probes), size=max_entries, replace=False)
        probes = [probes[k] for k in sorted(pick)]

    worst = 0.0
    with no_record():
        for i, j in probes:
            flat = params[i].data.reshape(-1)
            numeric = _central(f, flat, j, steps)
            a = float(analytic[i].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# decades from 1e-2 down to 1e-8
STEP_LADDER = tuple(10.0 ** -k for k in range(2, 9))


def _central(f, flat: np.ndarray, j: int, steps: list[float]) -> float:
    orig = flat[j]
    estimates = []
    for h in steps:
        flat[j] = orig + h
        up = float(f().data)
        flat[j] = orig - h
        down = float(f().data)
        estimates.append((up - down) / (2 * h))
    flat[j] = orig
    if len(estimates) == 1:
        return estimates[0]
    if len(estimates) < 3:
        raise ValueError("a step ladder needs at least three rungs")
    drift = [abs(a - b) for a, b in zip(estimates, estimates[1:])]
    score = [(max(drift[k - 1], drift[k]), min(drift[k - 1], drift[k]))
             for k in range(1, len(estimates) - 1)]
    return estimates[1 + score.index(min(score))]
