"""Toy decoder-only transformer used as the numerical ground truth.

No layer norm, no positional encoding, no tokenizer: prompts are raw
``(s, hidden_dim)`` float32 arrays.  Heads are contiguous ``head_dim`` slices
of the hidden vector and each head gets its own softmax.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import ConfigError, InputError, ShapeError
from .linalg import DTYPE

READOUT_VOCAB = 64


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    head_dim: int = 8
    hidden_dim: int | None = None
    ffn_dim: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim is None:
            self.hidden_dim = self.n_heads * self.head_dim
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim

    def validate(self) -> None:
        for name in ("n_layers", "n_heads", "head_dim", "hidden_dim", "ffn_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.hidden_dim != self.n_heads * self.head_dim:
            raise ConfigError(
                f"model.hidden_dim ({self.hidden_dim}) must equal "
                f"n_heads*head_dim ({self.n_heads}*{self.head_dim})"
            )


@dataclass
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_1: np.ndarray
    w_2: np.ndarray

    def arrays(self):
        return (self.w_q, self.w_k, self.w_v, self.w_o, self.w_1, self.w_2)


@dataclass
class Model:
    cfg: ModelConfig
    layers: list[LayerWeights]
    readout_matrix: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    @property
    def width(self) -> int:
        return self.cfg.hidden_dim


@dataclass
class KvCache:
    """Per-layer key/value rows plus one generation counter per token.

    Token ``j`` occupies row ``j`` of every layer's arrays.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    generation: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, n_layers: int, width: int) -> "KvCache":
        return cls(
            keys=[np.zeros((0, width), dtype=DTYPE) for _ in range(n_layers)],
            values=[np.zeros((0, width), dtype=DTYPE) for _ in range(n_layers)],
        )

    def __len__(self) -> int:
        return len(self.generation)

    @property
    def n_tokens(self) -> int:
        return len(self.generation)

    def append(self, layer: int, key: np.ndarray, value: np.ndarray) -> None:
        """Append one token's K/V to ``layer``; layer 0 also issues its generation index."""
        self.keys[layer] = np.concatenate([self.keys[layer], key[None, :].astype(DTYPE)])
        self.values[layer] = np.concatenate([self.values[layer], value[None, :].astype(DTYPE)])
        if layer == 0:
            self.generation.append(self.generation[-1] + 1 if self.generation else 0)

    def copy(self) -> "KvCache":
        return KvCache(
            keys=[k.copy() for k in self.keys],
            values=[v.copy() for v in self.values],
            generation=list(self.generation),
        )


def init_model(cfg: ModelConfig) -> Model:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d1, d2 = cfg.hidden_dim, cfg.ffn_dim
    bound = 1.0 / math.sqrt(d1)

    def draw(rows, cols):
        return rng.uniform(-bound, bound, size=(rows, cols)).astype(DTYPE)

    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            LayerWeights(
                w_q=draw(d1, d1),
                w_k=draw(d1, d1),
                w_v=draw(d1, d1),
                w_o=draw(d1, d1),
                w_1=draw(d1, d2),
                w_2=draw(d2, d1),
            )
        )
    readout_rng = np.random.default_rng([cfg.seed, 1])
    readout_matrix = readout_rng.standard_normal((d1, READOUT_VOCAB)).astype(DTYPE)
    return Model(cfg=cfg, layers=layers, readout_matrix=readout_matrix)


def weights_checksum(model: Model) -> str:
    h = hashlib.sha256()
    for layer in model.layers:
        for arr in layer.arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def readout(model: Model, hidden) -> int:
    """Greedy "next token" id from a fixed seeded projection of ``hidden``."""
    logits = linalg.matmul(linalg.as_vector(hidden), model.readout_matrix)
    return int(np.argmax(logits))


def attention_tail(layer: LayerWeights, x: np.ndarray, logits: np.ndarray,
                   values: np.ndarray, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Softmax, value aggregation, output projection and FFN for one token.

    ``logits`` is ``(n_heads, n)`` and ``values`` is ``(n, width)``, both in
    token order.  Returns ``(next_hidden, scores)``.
    """
    n_heads, n = logits.shape
    if values.shape[0] != n:
        raise ShapeError(f"{n} logits per head but {values.shape[0]} value rows")
    if values.shape[1] != n_heads * head_dim or x.size != values.shape[1]:
        raise ShapeError("value / hidden width does not match n_heads*head_dim")
    scores = np.stack([linalg.softmax(logits[h]) for h in range(n_heads)])
    weights = np.repeat(scores.T, head_dim, axis=1)  # (n, width)
    aggregated = linalg.sequential_sum(weights * values, axis=0)
    attn_out = linalg.matmul(aggregated, layer.w_o) + x
    hidden = np.maximum(linalg.matmul(attn_out, layer.w_1), DTYPE(0))
    out = linalg.matmul(hidden, layer.w_2) + attn_out
    return out.astype(DTYPE), scores


def _check_dims(model: Model, hidden: np.ndarray, cache: KvCache | None = None) -> None:
    if hidden.size != model.width:
        raise ShapeError(f"hidden has {hidden.size} elements, model width is {model.width}")
    if cache is not None:
        if len(cache.keys) != model.n_layers:
            raise ShapeError(f"cache has {len(cache.keys)} layers, model has {model.n_layers}")
        for k in cache.keys:
            if k.shape[1] != model.width:
                raise ShapeError("cache width does not match model width")


def prefill(model: Model, prompt) -> tuple[KvCache, np.ndarray]:
    x = np.asarray(prompt, dtype=DTYPE)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("prompt must be a non-empty (s, hidden_dim) array")
    if x.shape[1] != model.width:
        raise ShapeError(f"prompt width {x.shape[1]} != model width {model.width}")
    cfg = model.cfg
    cache = KvCache.empty(cfg.n_layers, cfg.hidden_dim)
    s = x.shape[0]
    cache.generation = list(range(s))
    for li, layer in enumerate(model.layers):
        q = linalg.matmul(x, layer.w_q)
        k = linalg.matmul(x, layer.w_k)
        v = linalg.matmul(x, layer.w_v)
        cache.keys[li] = k
        cache.values[li] = v
        nxt = np.empty_like(x)
        for p in range(s):
            logits = linalg.head_logits(q[p], k[: p + 1], cfg.n_heads, cfg.head_dim)
            nxt[p], _ = attention_tail(layer, x[p], logits, v[: p + 1], cfg.head_dim)
        x = nxt
    return cache, x[-1].copy()


def decode_step_exact(model: Model, hidden, cache: KvCache, capture: dict | None = None):
    """One monolithic decode step; appends to ``cache`` in place.

    When ``capture`` is a dict it receives ``layer_inputs``, ``logits`` and
    ``scores`` lists (one entry per layer).
    """
    x = linalg.as_vector(hidden, "hidden")
    _check_dims(model, x, cache)
    if cache.n_tokens == 0:
        raise InputError("decode requires a non-empty cache")
    cfg = model.cfg
    if capture is not None:
        capture.setdefault("layer_inputs", [])
        capture.setdefault("logits", [])
        capture.setdefault("scores", [])
    for li, layer in enumerate(model.layers):
        cache.append(li, linalg.matmul(x, layer.w_k), linalg.matmul(x, layer.w_v))
        q = linalg.matmul(x, layer.w_q)
        logits = linalg.head_logits(q, cache.keys[li], cfg.n_heads, cfg.head_dim)
        out, scores = attention_tail(layer, x, logits, cache.values[li], cfg.head_dim)
        if capture is not None:
            capture["layer_inputs"].append(x.copy())
            capture["logits"].append(logits)
            capture["scores"].append(scores)
        x = out
    return x, cache


def layer_inputs(model: Model, hidden, cache: KvCache) -> list[np.ndarray]:
    """Residual stream entering each layer during one decode step (cache untouched)."""
    capture: dict = {}
    decode_step_exact(model, hidden, cache.copy(), capture=capture)
    return capture["layer_inputs"]
