"""Feedback scheduler for the CPU token budget.

Each iteration compares the CPU stage (logit compute plus transfer) against
the GPU stage.  A CPU stage that hides behind the GPU stage earns a larger
budget; one that stalls the pipeline loses budget down to the accuracy floor
``k_min``, after which selection moves from post- to pre-logit ranking.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .selection import Timing

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SchedulerState:
    k: int
    k_min: int
    strategy: Timing = Timing.POST
    gamma_up: float = 1.25
    gamma_down: float = 0.8
    allow_revert: bool = False
    history: tuple = ()
    history_len: int = 16


def init_scheduler(k_min: int, pool: int, gamma_up: float = 1.25, gamma_down: float = 0.8,
                   allow_revert: bool = False, k_init: int | None = None) -> SchedulerState:
    if k_min < 1:
        raise ConfigError(f"scheduler.k_min must be >= 1, got {k_min}")
    if pool < k_min:
        raise ConfigError(f"scheduler.pool ({pool}) is smaller than scheduler.k_min ({k_min})")
    if not gamma_up > 1.0:
        raise ConfigError("scheduler.gamma_up must be > 1")
    if not 0.0 < gamma_down < 1.0:
        raise ConfigError("scheduler.gamma_down must be in (0, 1)")
    k = k_min if k_init is None else k_init
    if not k_min <= k <= pool:
        raise ConfigError(f"scheduler.k_init ({k}) must lie in [k_min, pool]")
    return SchedulerState(k=k, k_min=k_min, gamma_up=gamma_up, gamma_down=gamma_down,
                          allow_revert=allow_revert)


def scheduler_step(state: SchedulerState, t_gpu: float, t_cpu: float, t_tx: float,
                   cpu_token_pool: int) -> SchedulerState:
    """One feedback update.  Pure: returns a new state.

    After the switch to pre-logit selection ``k`` is frozen.  With
    ``allow_revert`` a favorable step switches back to post-logit selection.
    """
    history = (state.history + ((t_gpu, t_cpu, t_tx),))[-state.history_len:]
    fits = t_cpu + t_tx <= t_gpu
    pool = max(cpu_token_pool, state.k_min)
    if state.strategy is Timing.PRE:
        if fits and state.allow_revert:
            return replace(state, strategy=Timing.POST, history=history)
        return replace(state, history=history)
    if fits:
        k = min(math.ceil(state.k * state.gamma_up), pool)
        return replace(state, k=max(k, state.k_min), history=history)
    if state.k > state.k_min:
        k = max(math.floor(state.k * state.gamma_down), state.k_min)
        return replace(state, k=k, history=history)
    log.info("CPU stage still exceeds GPU stage at K_min=%d; switching to pre-QK^T", state.k_min)
    return replace(state, strategy=Timing.PRE, history=history)


def steps_to_cap(k_min: int, pool: int, gamma_up: float = 1.25) -> int:
    """Upper bound on favorable steps needed for K to climb from k_min to pool."""
    if pool <= k_min:
        return 0
    return math.ceil(math.log(pool / k_min) / math.log(gamma_up))


def isotonic_increasing(y: Sequence[float], weights: Sequence[float] | None = None) -> np.ndarray:
    """Pool-adjacent-violators fit of a nondecreasing sequence."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    blocks: list[list[float]] = []  # [mean, weight, count]
    for yi, wi in zip(y, w):
        blocks.append([yi, wi, 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, w2, c2 = blocks.pop()
            m1, w1, c1 = blocks.pop()
            wt = w1 + w2
            blocks.append([(m1 * w1 + m2 * w2) / wt, wt, c1 + c2])
    return np.concatenate([np.full(c, m) for m, _, c in blocks]) if blocks else np.zeros(0)


@dataclass
class KminEntry:
    model_id: str
    dataset_id: str
    k_min: int
    fractions: list[float]
    ks: list[int]
    agreement: list[float]
    smoothed: list[float]
    threshold: float
    met_threshold: bool
    notes: str = ""


@dataclass
class KminProfile:
    entries: dict[tuple[str, str], KminEntry] = field(default_factory=dict)

    def add(self, entry: KminEntry) -> None:
        self.entries[(entry.model_id, entry.dataset_id)] = entry

    def k_min(self, model_id: str, dataset_id: str) -> int:
        return self.entries[(model_id, dataset_id)].k_min


def profile_kmin(eval_fn: Callable[[int], float], n_tokens: int, fractions: Sequence[float],
                 threshold: float = 0.99, model_id: str = "model",
                 dataset_id: str = "prompt") -> KminEntry:
    """Sweep retained fractions and return the smallest K meeting ``threshold``.

    ``eval_fn(k)`` reports the agreement of k-token attention with full
    attention.  The raw sweep is smoothed to be nondecreasing before the
    threshold is applied.
    """
    fractions = [float(f) for f in fractions]
    if not fractions:
        raise ConfigError("profile_kmin needs at least one fraction")
    if any(b < a for a, b in zip(fractions, fractions[1:])):
        raise ConfigError("fractions must be sorted ascending")
    ks = [max(1, math.ceil(f * n_tokens)) for f in fractions]
    agreement = [float(eval_fn(k)) for k in ks]
    smoothed = isotonic_increasing(agreement).tolist()
    for k, s in zip(ks, smoothed):
        if s >= threshold:
            return KminEntry(model_id, dataset_id, k, fractions, ks, agreement, smoothed,
                             threshold, True, "isotonic-smoothed agreement sweep")
    log.warning("no retained fraction reached agreement %.3f; using K=%d", threshold, ks[-1])
    return KminEntry(model_id, dataset_id, ks[-1], fractions, ks, agreement, smoothed,
                     threshold, False, "threshold not met; fell back to largest K")
