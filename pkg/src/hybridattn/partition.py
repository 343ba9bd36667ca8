"""Split attention logits across executors and stitch them back together.

Logits ``q . k_j / sqrt(d)`` are independent per token, so each executor
scores only the keys it holds.  The token map records which executor owns
which id range; concatenation drops every segment's payload into offsets
derived from that map, which restores the original token order without
sorting.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import CoverageError, InputError, OverlapError, ShapeError
from .linalg import DTYPE
from .model import KvCache, LayerWeights, attention_tail


class Executor(str, enum.Enum):
    DEVICE = "device"
    HOST = "host"


@dataclass(frozen=True)
class Segment:
    start: int
    length: int
    executor: Executor

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass
class TokenMap:
    """Ordered, disjoint id ranges for one layer of one decode step."""

    segments: list[Segment]
    _offsets: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self):
        prev_stop = None
        offset = 0
        self._offsets = []
        for seg in self.segments:
            if seg.length < 1 or seg.start < 0:
                raise InputError(f"invalid segment {seg}")
            if prev_stop is not None and seg.start < prev_stop:
                raise OverlapError(f"segment {seg} overlaps or precedes previous range")
            self._offsets.append(offset)
            offset += seg.length
            prev_stop = seg.stop

    @classmethod
    def from_ids(cls, device_ids=(), host_ids=()) -> "TokenMap":
        """Run-length encode two id sets into ordered segments."""
        owner: dict[int, Executor] = {}
        for ids, ex in ((device_ids, Executor.DEVICE), (host_ids, Executor.HOST)):
            for t in ids:
                t = int(t)
                if t in owner:
                    raise OverlapError(f"token {t} assigned to more than one executor")
                owner[t] = ex
        segments: list[Segment] = []
        start = prev = None
        ex_run = None
        for t in sorted(owner):
            ex = owner[t]
            if start is not None and t == prev + 1 and ex == ex_run:
                prev = t
                continue
            if start is not None:
                segments.append(Segment(start, prev - start + 1, ex_run))
            start = prev = t
            ex_run = ex
        if start is not None:
            segments.append(Segment(start, prev - start + 1, ex_run))
        return cls(segments)

    @property
    def n_tokens(self) -> int:
        return sum(s.length for s in self.segments)

    def token_ids(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(s.start, s.stop) for s in self.segments])

    def ids_for(self, executor: Executor) -> np.ndarray:
        parts = [np.arange(s.start, s.stop) for s in self.segments if s.executor == executor]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def position_table(self) -> np.ndarray:
        """``table[token_id]`` is the output slot of that id, -1 if unmapped."""
        size = self.segments[-1].stop if self.segments else 0
        table = np.full(size, -1, dtype=np.int64)
        for seg, off in zip(self.segments, self._offsets):
            table[seg.start:seg.stop] = np.arange(off, off + seg.length)
        return table

    def check_covers(self, n_tokens: int) -> None:
        """Raise unless the map covers exactly ``0..n_tokens-1``."""
        ids = self.token_ids()
        if ids.size != n_tokens or (n_tokens and (ids[0] != 0 or ids[-1] != n_tokens - 1)):
            raise CoverageError(
                f"token map covers {ids.size} ids, expected exactly 0..{n_tokens - 1}"
            )


@dataclass
class LogitSegment:
    token_ids: np.ndarray
    logits: np.ndarray  # (n_heads, len(token_ids))
    values: np.ndarray  # (len(token_ids), width)
    origin: Executor
    speculative: bool = False

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        if ids.size > 1 and np.any(np.diff(ids) <= 0):
            raise InputError("segment token ids must be strictly increasing")
        if self.logits.shape[1] != ids.size or self.values.shape[0] != ids.size:
            raise ShapeError("segment logits/values length differs from token ids")
        self.token_ids = ids


def _logit_segment(q, cache: KvCache, layer: int, token_ids, head_dim: int,
                   origin: Executor, speculative: bool) -> LogitSegment:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise InputError("logit segment over an empty token subset")
    q = linalg.as_vector(q, "q")
    width = cache.keys[layer].shape[1]
    if q.size != width or width % head_dim:
        raise ShapeError(f"query width {q.size} incompatible with keys width {width}")
    if ids.min() < 0 or ids.max() >= cache.keys[layer].shape[0]:
        raise InputError("token id outside the cache")
    logits = linalg.head_logits(q, cache.keys[layer][ids], width // head_dim, head_dim)
    return LogitSegment(ids, logits, cache.values[layer][ids], origin, speculative)


def compute_logit_segment(q, cache: KvCache, layer: int, token_ids, head_dim: int,
                          origin: Executor = Executor.HOST) -> LogitSegment:
    """Pre-softmax logits of ``q`` against the keys of ``token_ids`` in ``layer``."""
    return _logit_segment(q, cache, layer, token_ids, head_dim, origin, False)


def speculative_logit_segment(prev_layer_input, next_layer_weights: LayerWeights,
                              cache: KvCache, layer: int, token_ids, head_dim: int,
                              origin: Executor = Executor.HOST) -> LogitSegment:
    """Logits for ``layer`` using the previous layer's input as a stand-in.

    The query is ``prev_layer_input @ next_layer_weights.w_q``; everything else
    matches :func:`compute_logit_segment`.
    """
    q = linalg.matmul(linalg.as_vector(prev_layer_input, "prev_layer_input"),
                      next_layer_weights.w_q)
    return _logit_segment(q, cache, layer, token_ids, head_dim, origin, True)


def concatenate(segments: list[LogitSegment], token_map: TokenMap):
    """Place every segment's logits and values at the map's offsets.

    Returns ``(logits (n_heads, n), values (n, width), token_ids)`` in ascending
    token order.
    """
    if not segments:
        raise CoverageError("no segments to concatenate")
    table = token_map.position_table()
    n = token_map.n_tokens
    n_heads = segments[0].logits.shape[0]
    width = segments[0].values.shape[1]
    logits = np.empty((n_heads, n), dtype=DTYPE)
    values = np.empty((n, width), dtype=DTYPE)
    filled = np.zeros(n, dtype=bool)
    for seg in segments:
        ids = seg.token_ids
        if ids.size and (ids.max() >= table.size or np.any(table[ids] < 0)):
            missing = [int(t) for t in ids if t >= table.size or table[t] < 0]
            raise CoverageError(f"token ids {missing[:8]} are not in the token map")
        pos = table[ids]
        if np.any(filled[pos]):
            dup = [int(t) for t, p in zip(ids, pos) if filled[p]]
            raise OverlapError(f"token ids {dup[:8]} supplied by more than one segment")
        filled[pos] = True
        logits[:, pos] = seg.logits
        values[pos] = seg.values
    if not filled.all():
        missing = token_map.token_ids()[~filled]
        raise CoverageError(f"token ids {missing[:8].tolist()} missing from segments")
    return logits, values, token_map.token_ids()


def finish_attention(ordered_logits, ordered_values, layer: LayerWeights, hidden,
                     head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Softmax over the stitched logits and the rest of the block.

    Same code path as the monolithic decode step.  Returns
    ``(next_hidden, attention_scores)``.
    """
    logits = np.asarray(ordered_logits, dtype=DTYPE)
    values = np.asarray(ordered_values, dtype=DTYPE)
    if logits.ndim != 2 or values.ndim != 2 or logits.shape[1] != values.shape[0]:
        raise ShapeError("ordered logits and values disagree on token count")
    if logits.shape[1] == 0:
        raise ShapeError("finish_attention needs at least one token")
    return attention_tail(layer, linalg.as_vector(hidden, "hidden"), logits, values, head_dim)
