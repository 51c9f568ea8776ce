"""Joint-action search over a mixing network: greedy init + coordinate ascent.

The search starts from the per-agent greedy action (masked argmax of local
utilities) and then sweeps the agents in index order, replacing one agent's
action with the best available alternative while the others stay fixed.  Only
strict improvements are accepted, so sweep values are non-decreasing and the
search terminates.  One evaluator call is made per (agent, available action)
per sweep: n*|A| calls when nothing is masked.

A vectorized variant runs the same algorithm across a batch of independent
instances; both paths must return identical actions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .networks import MASK_SENTINEL, AvailabilityError


@dataclass
class SelectionTrace:
    """Diagnostics for one search: Q_tot after init and after each sweep."""

    sweep_values: list[float] = field(default_factory=list)
    sweeps_used: int = 0


def greedy_init(utilities: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Per-agent masked argmax; ties broken by lowest action index.

    utilities: (n, |A|) local values; avail: boolean (n, |A|).
    """
    utilities = np.asarray(utilities, dtype=np.float64)
    avail = np.asarray(avail, dtype=bool)
    if not avail.any(axis=-1).all():
        bad = int(np.flatnonzero(~avail.any(axis=-1))[0])
        raise AvailabilityError(f"agent {bad} has no available action")
    masked = np.where(avail, utilities, MASK_SENTINEL)
    return masked.argmax(axis=-1)


def iterative_action_selection(
    evaluate: Callable[[np.ndarray], float],
    init: np.ndarray,
    avail: np.ndarray,
    max_sweeps: int,
) -> tuple[np.ndarray, float, SelectionTrace]:
    """Coordinate ascent from `init`; returns (actions, value, trace).

    `evaluate` maps a length-n action vector to a scalar joint value.  Sweeps
    stop early when a full pass accepts no strict improvement.
    """
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")
    avail = np.asarray(avail, dtype=bool)
    actions = np.asarray(init, dtype=np.intp).copy()
    n, n_actions = avail.shape
    if not all(avail[i, actions[i]] for i in range(n)):
        raise AvailabilityError("init contains an unavailable action")

    best = float(evaluate(actions))
    if not np.isfinite(best):
        raise ValueError("evaluator returned a non-finite value")
    trace = SelectionTrace(sweep_values=[best])
    for _ in range(max_sweeps):
        improved = False
        for i in range(n):
            incumbent = actions[i]
            best_action = incumbent
            best_val = best
            for a in range(n_actions):
                if not avail[i, a]:
                    continue
                actions[i] = a
                v = float(evaluate(actions))
                if not np.isfinite(v):
                    raise ValueError("evaluator returned a non-finite value")
                if v > best_val:
                    best_val = v
                    best_action = a
            actions[i] = best_action
            if best_action != incumbent:
                best = best_val
                improved = True
        trace.sweeps_used += 1
        trace.sweep_values.append(best)
        if not improved:
            break
    return actions, best, trace


def batched_iterative_selection(
    evaluate_many: Callable[[np.ndarray], np.ndarray],
    init: np.ndarray,
    avail: np.ndarray,
    max_sweeps: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized coordinate ascent over B instances.

    evaluate_many: (B, C, n) candidate actions -> (B, C) values.
    init: (B, n) starting actions; avail: (B, n, |A|) boolean.
    Returns (actions (B,n), values (B,), init_values (B,)).
    """
    avail = np.asarray(avail, dtype=bool)
    actions = np.asarray(init, dtype=np.intp).copy()
    bsz, n, n_actions = avail.shape
    best = evaluate_many(actions[:, None, :])[:, 0].astype(np.float64)
    init_values = best.copy()
    live = np.arange(bsz)  # instances whose last sweep still improved
    for _ in range(max_sweeps):
        if live.size == 0:
            break
        improved = np.zeros(live.size, dtype=bool)
        for i in range(n):
            cand = np.repeat(actions[live, None, :], n_actions, axis=1)
            cand[:, :, i] = np.arange(n_actions)[None, :]
            vals = np.where(avail[live, i, :], evaluate_many(cand), -np.inf)
            # strict improvement only; ties keep the incumbent
            pick = vals.argmax(axis=1)
            picked = vals[np.arange(live.size), pick]
            take = picked > best[live]
            rows = live[take]
            actions[rows, i] = pick[take]
            best[rows] = picked[take]
            improved |= take
        live = live[improved]
    return actions, best, init_values
