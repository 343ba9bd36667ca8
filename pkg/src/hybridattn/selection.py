"""Important-token selection for the CPU-side logit pass.

Position-based selection runs before any logits exist (sinks plus a recent
window).  Score-based selection ranks tokens after logits are computed,
either by the current step's logit or by attention accumulated over past
steps.  Both return sorted, duplicate-free id lists.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)


class Timing(str, enum.Enum):
    POST = "post"
    PRE = "pre"


class Ranking(str, enum.Enum):
    TOP_LOGIT = "top_logit"
    ACCUMULATED_SCORE = "accumulated_score"


@dataclass(frozen=True)
class PreQKT:
    n_sink: int = 4
    window: int = 1024

    def __post_init__(self):
        if self.n_sink < 0 or self.window < 1:
            raise ConfigError("selection needs n_sink >= 0 and window >= 1")


@dataclass(frozen=True)
class PostQKT:
    ranking: Ranking = Ranking.TOP_LOGIT


def select_pre(candidate_ids, strategy: PreQKT, k: int) -> list[int]:
    """Attention sinks plus the most recent candidates, at most ``k`` in total."""
    if k < strategy.n_sink + 1:
        raise ConfigError(f"K={k} must be at least n_sink+1={strategy.n_sink + 1}")
    cands = sorted(int(c) for c in candidate_ids)
    sinks = cands[: min(strategy.n_sink, len(cands))]
    rest = cands[len(sinks):]
    n_recent = min(k - len(sinks), strategy.window, len(rest))
    recent = rest[len(rest) - n_recent:] if n_recent > 0 else []
    return sinks + recent


def select_post(ranking_values, k: int, token_ids=None) -> list[int]:
    """Top-``k`` ids by ranking value, ties to the lower id, returned ascending.

    ``ranking_values[j]`` belongs to ``token_ids[j]`` (default ``j``).
    """
    values = np.asarray(ranking_values, dtype=np.float64)
    ids = np.arange(values.size) if token_ids is None else np.asarray(token_ids, dtype=np.int64)
    if ids.size != values.size:
        raise ShapeError("ranking values and token ids differ in length")
    if k < 1:
        raise ConfigError("K must be >= 1")
    if k > values.size:
        log.debug("K=%d exceeds %d candidates; clamping", k, values.size)
        k = values.size
    # lexsort: last key is primary -> descending value, then ascending id
    order = np.lexsort((ids, -values))
    return sorted(int(t) for t in ids[order[:k]])


def head_max(logits: np.ndarray) -> np.ndarray:
    """Per-token ranking value: the largest logit over heads."""
    return np.asarray(logits).max(axis=0)


class ScoreLedger:
    """Attention mass each token has received, summed over decode steps."""

    def __init__(self, n_tokens: int = 0):
        self.scores = np.zeros(n_tokens, dtype=np.float64)

    def __len__(self) -> int:
        return self.scores.size

    def grow(self, n_tokens: int) -> None:
        if n_tokens > self.scores.size:
            self.scores = np.concatenate([self.scores, np.zeros(n_tokens - self.scores.size)])

    def ranking(self, token_ids) -> np.ndarray:
        return self.scores[np.asarray(token_ids, dtype=np.int64)]


def update_ledger(ledger: ScoreLedger, attention_scores) -> ScoreLedger:
    scores = np.asarray(attention_scores, dtype=np.float64)
    if scores.shape != ledger.scores.shape:
        raise ShapeError(
            f"score vector has {scores.size} entries, ledger tracks {ledger.scores.size}"
        )
    if np.any(scores < 0):
        raise ShapeError("attention scores must be nonnegative")
    ledger.scores = ledger.scores + scores
    return ledger
