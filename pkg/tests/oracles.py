"""Independent reference implementations used as test oracles.

Written before the package code they check and kept free of any import from
``hybridattn``.  Plain Python loops over float32 scalars, so every sum runs
left to right exactly like the kernels under test.
"""

from __future__ import annotations

import math

import numpy as np

F32 = np.float32


def naive_matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=F32)
    b = np.asarray(b, dtype=F32)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=F32)
    for i in range(m):
        for j in range(n):
            acc = F32(0)
            for t in range(k):
                acc = F32(acc + F32(a[i, t] * b[t, j]))
            out[i, j] = acc
    return out


def naive_vecmat(x, w) -> np.ndarray:
    return naive_matmul(np.asarray(x, dtype=F32)[None, :], w)[0]


def naive_dot(q, k) -> F32:
    acc = F32(0)
    for a, b in zip(np.asarray(q, dtype=F32), np.asarray(k, dtype=F32)):
        acc = F32(acc + F32(a * b))
    return acc


def closed_form_softmax(v) -> np.ndarray:
    v = [float(x) for x in v]
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def ref_attention(q, keys, values, n_heads: int, head_dim: int, f32: bool = False) -> np.ndarray:
    """Per-head softmax attention of one query.

    ``f32`` accumulates in float32 term by term; otherwise float64.
    """
    dt = F32 if f32 else np.float64
    q = np.asarray(q, dtype=dt)
    keys = np.asarray(keys, dtype=dt)
    values = np.asarray(values, dtype=dt)
    out = np.zeros(n_heads * head_dim, dtype=dt)
    for h in range(n_heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        if f32:
            logits = [F32(naive_dot(q[sl], kj[sl]) / F32(math.sqrt(head_dim))) for kj in keys]
            m = max(logits)
            e = [np.exp(F32(x - m)) for x in logits]
            s = F32(0)
            for x in e:
                s = F32(s + x)
            p = [F32(x / s) for x in e]
            for c in range(h * head_dim, (h + 1) * head_dim):
                acc = F32(0)
                for j, pj in enumerate(p):
                    acc = F32(acc + F32(pj * values[j, c]))
                out[c] = acc
        else:
            logits = [float(np.dot(q[sl], kj[sl])) / math.sqrt(head_dim) for kj in keys]
            for j, pj in enumerate(closed_form_softmax(logits)):
                out[sl] += pj * values[j, sl]
    return out


class RefDecoder:
    """Clean-room forward pass of the toy decoder.

    ``layers`` is a list of dicts with w_q, w_k, w_v, w_o, w_1, w_2.  With
    ``f32`` every product and sum is a float32 scalar op in index order;
    otherwise float64 numpy is used.
    """

    def __init__(self, layers, n_heads: int, head_dim: int, f32: bool = False):
        dt = F32 if f32 else np.float64
        self.layers = [{k: np.asarray(v, dtype=dt) for k, v in L.items()} for L in layers]
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.f32 = f32
        self.keys = [[] for _ in layers]
        self.values = [[] for _ in layers]

    def _mm(self, x, w):
        return naive_vecmat(x, w) if self.f32 else x @ w

    def _block(self, li, x, q, n_visible):
        L = self.layers[li]
        att = ref_attention(q, self.keys[li][:n_visible], self.values[li][:n_visible],
                            self.n_heads, self.head_dim, self.f32)
        a = self._mm(att, L["w_o"]) + x
        return self._mm(np.maximum(self._mm(a, L["w_1"]), 0), L["w_2"]) + a

    def prefill(self, prompt):
        x = np.asarray(prompt, dtype=F32 if self.f32 else np.float64)
        for li, L in enumerate(self.layers):
            self.keys[li] = [self._mm(r, L["w_k"]) for r in x]
            self.values[li] = [self._mm(r, L["w_v"]) for r in x]
            q = [self._mm(r, L["w_q"]) for r in x]
            x = np.stack([self._block(li, x[p], q[p], p + 1) for p in range(x.shape[0])])
        return x[-1]

    def step(self, hidden):
        x = np.asarray(hidden, dtype=F32 if self.f32 else np.float64)
        inputs = []
        for li, L in enumerate(self.layers):
            inputs.append(x.copy())
            self.keys[li].append(self._mm(x, L["w_k"]))
            self.values[li].append(self._mm(x, L["w_v"]))
            x = self._block(li, x, self._mm(x, L["w_q"]), len(self.keys[li]))
        return x, inputs


def brute_topk(values, k: int, ids=None) -> list[int]:
    ids = list(range(len(values))) if ids is None else [int(i) for i in ids]
    pairs = sorted(zip(ids, [float(v) for v in values]), key=lambda p: (-p[1], p[0]))
    return sorted(i for i, _ in pairs[:k])


def lrg_device_set(n_tokens: int, capacity: int) -> set[int]:
    return set(range(max(0, n_tokens - capacity), n_tokens))


def replay_semantic(evictions, dram_tokens: float):
    """Hand-rule replay of K-priority DRAM placement.

    DRAM holds ``2*dram_tokens`` vectors.  Each eviction places its K (into
    DRAM, demoting the oldest DRAM V, else the oldest DRAM K) and then its V
    (DRAM if a slot is free).  Returns ``{tid: (k_tier, v_tier)}`` with tiers
    spelled "dram" / "exp".
    """
    slots = 2 * dram_tokens
    dram = []  # (kind, tid) in insertion order
    where = {}
    for tid in evictions:
        where[tid] = ["?", "?"]
        if len(dram) >= slots:
            vs = [e for e in dram if e[0] == "v"]
            ks = [e for e in dram if e[0] == "k"]
            victim = vs[0] if vs else (ks[0] if ks else None)
            if victim is None:
                where[tid][0] = "exp"
            else:
                dram.remove(victim)
                where[victim[1]][0 if victim[0] == "k" else 1] = "exp"
        if where[tid][0] == "?":
            dram.append(("k", tid))
            where[tid][0] = "dram"
        if len(dram) < slots:
            dram.append(("v", tid))
            where[tid][1] = "dram"
        else:
            where[tid][1] = "exp"
    return {t: tuple(v) for t, v in where.items()}


def ref_scheduler(k, k_min, strategy, t_gpu, t_cpu, t_tx, pool, up=1.25, down=0.8):
    """One feedback update written straight from the rule list."""
    if strategy == "pre":
        return k, "pre"
    if t_cpu + t_tx <= t_gpu:
        return max(k_min, min(math.ceil(k * up), max(pool, k_min))), "post"
    if k > k_min:
        return max(k_min, math.floor(k * down)), "post"
    return k, "pre"


def aog_traffic(n, d1):
    return 2 * n * d1


def aoc_traffic(d1):
    return d1
