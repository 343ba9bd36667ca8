"""Pipelined hybrid decode on a simulated clock.

Numbers are real: every step runs the toy model through the partitioned
logit path.  Time is modeled: stage latencies come from FLOP counts and the
memory tier model, never from the wall clock, so traces are reproducible.

Per layer ``i`` the GPU stage scores device-resident keys, stitches in the
host logits, and finishes the block.  The CPU stage that feeds layer ``i``
selects host tokens, scores them and ships logits plus V vectors.  With
speculation on, that CPU stage runs during GPU stage ``i-1`` using layer
``i-1``'s input; layer 0's CPU stage has nothing to hide behind and runs
serially.  Without speculation CPU and GPU stages alternate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import costmodel, linalg
from .costmodel import PlatformParams
from .errors import ConfigError, InputError
from .linalg import DTYPE
from .memory import (InterleavedMapper, KvPlacement, SemanticMapper, Tier, TierParams,
                     cost_cpu_logit_pass, default_page_size, evict_lrg)
from .model import (KvCache, Model, ModelConfig, decode_step_exact, init_model, prefill,
                    readout)
from .partition import (Executor, LogitSegment, TokenMap, compute_logit_segment, concatenate,
                        finish_attention, speculative_logit_segment)
from .scheduler import SchedulerState, init_scheduler, scheduler_step
from .selection import (PreQKT, Ranking, ScoreLedger, Timing, head_max, select_post,
                        select_pre, update_ledger)

log = logging.getLogger(__name__)

STRATEGIES = ("hybrid", "aog", "aoc")
MAPPINGS = ("semantic", "interleaved")


@dataclass
class SelectionConfig:
    timing: str = "post"
    ranking: str = "top_logit"
    n_sink: int = 4
    window: int = 1024


@dataclass
class SchedulerConfig:
    k_min: int = 8
    k_init: int | None = None
    pool: int | None = None  # defaults to prompt_len + steps
    gamma_up: float = 1.25
    gamma_down: float = 0.8
    allow_revert: bool = False


@dataclass
class EngineConfig:
    strategy: str = "hybrid"
    scheduler_enabled: bool = True
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    mapping: str = "semantic"
    page_size: int | None = None
    speculation: bool = True
    verify: bool | None = None
    steps: int = 8
    prompt_len: int = 32
    prompt_seed: int = 0
    platform: PlatformParams = field(default_factory=PlatformParams)
    tiers: TierParams = field(default_factory=TierParams)
    model: ModelConfig = field(default_factory=ModelConfig)

    @property
    def max_tokens(self) -> int:
        return self.prompt_len + self.steps

    @property
    def pool(self) -> int:
        return self.max_tokens if self.scheduler.pool is None else self.scheduler.pool

    def verify_enabled(self) -> bool:
        return self.max_tokens <= 256 if self.verify is None else bool(self.verify)

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mapping not in MAPPINGS:
            raise ConfigError(f"mapping must be one of {MAPPINGS}, got {self.mapping!r}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.prompt_len < 1:
            raise ConfigError("prompt_len must be >= 1")
        try:
            Timing(self.selection.timing)
            Ranking(self.selection.ranking)
        except ValueError as exc:
            raise ConfigError(f"selection: {exc}") from None
        PreQKT(self.selection.n_sink, self.selection.window)
        self.model.validate()
        self.platform.validate()
        self.tiers.validate()
        if self.tiers.device.capacity_tokens < 1:
            raise ConfigError("tiers.device_hbm.capacity_tokens must be >= 1 "
                              "(the token being generated lives on the device)")
        sc = self.scheduler
        init_scheduler(sc.k_min, self.pool, sc.gamma_up, sc.gamma_down,
                       sc.allow_revert, sc.k_init)
        pre_possible = self.selection.timing == "pre" or self.scheduler_enabled
        if self.strategy == "hybrid" and pre_possible and sc.k_min < self.selection.n_sink + 1:
            raise ConfigError(
                f"scheduler.k_min ({sc.k_min}) must be >= selection.n_sink+1 "
                f"({self.selection.n_sink + 1}) when pre-QK^T selection can run"
            )


@dataclass
class LayerRecord:
    step: int
    layer: int
    n_tokens: int
    n_device: int
    n_host: int
    n_selected: int
    k: int
    strategy: str
    speculative: bool
    t_gpu_stage: float
    t_cpu_stage: float
    t_cpu: float
    t_tx: float
    traffic_elements: int
    crit_bytes_dram: float
    crit_bytes_expansion: float
    dma_bytes_dram: float
    dma_bytes_expansion: float
    spec_logit_err: float | None = None
    logit_err: float | None = None


@dataclass
class StepRecord:
    step: int
    n_tokens: int
    k: int
    strategy: str
    iteration_latency: float
    t_gpu: float
    t_cpu: float
    t_tx: float
    token: int
    hidden_err: float | None = None
    oracle_token: int | None = None
    agree: bool | None = None


@dataclass
class DecodeTrace:
    strategy: str
    layers: list[LayerRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    hiddens: list[np.ndarray] = field(default_factory=list)
    prefill_latency: float = 0.0
    verified: bool = False

    @property
    def tokens(self) -> list[int]:
        return [s.token for s in self.steps]

    def summary(self) -> dict[str, Any]:
        lat = [s.iteration_latency for s in self.steps]
        out: dict[str, Any] = {
            "strategy": self.strategy,
            "steps": len(self.steps),
            "prefill_latency_s": self.prefill_latency,
            "total_decode_latency_s": float(sum(lat)),
            "mean_iteration_latency_s": float(np.mean(lat)) if lat else 0.0,
            "total_traffic_elements": int(sum(r.traffic_elements for r in self.layers)),
            "final_k": self.steps[-1].k if self.steps else None,
            "final_selection": self.steps[-1].strategy if self.steps else None,
            "verified": self.verified,
        }
        if self.verified and self.steps:
            errs = [s.hidden_err for s in self.steps]
            out["max_hidden_err"] = float(max(errs))
            out["mean_hidden_err"] = float(np.mean(errs))
            out["agreement_rate"] = float(np.mean([s.agree for s in self.steps]))
            spec = [r.spec_logit_err for r in self.layers if r.spec_logit_err is not None]
            out["max_spec_logit_err"] = float(max(spec)) if spec else 0.0
        return out


def make_prompt(width: int, length: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    return rng.standard_normal((length, width)).astype(DTYPE)


@dataclass
class HostPass:
    """What the CPU produced for one layer of one step."""

    segment: LogitSegment | None
    selected: list[int]
    logit_tokens: int


def _host_pass(model: Model, cache: KvCache, layer: int, host_ids: list[int], k: int,
               timing: Timing, ranking: Ranking, pre: PreQKT, q_exact: np.ndarray,
               prev_input: np.ndarray | None, ledger: ScoreLedger | None) -> HostPass:
    if not host_ids:
        return HostPass(None, [], 0)
    hd = model.cfg.head_dim

    def score(ids):
        if prev_input is not None:
            return speculative_logit_segment(prev_input, model.layers[layer], cache, layer,
                                             ids, hd, Executor.HOST)
        return compute_logit_segment(q_exact, cache, layer, ids, hd, Executor.HOST)

    if timing is Timing.PRE:
        selected = select_pre(host_ids, pre, k)
        return HostPass(score(selected), selected, len(selected))
    seg = score(host_ids)
    if k >= len(host_ids):
        return HostPass(seg, list(host_ids), len(host_ids))
    if ranking is Ranking.ACCUMULATED_SCORE and ledger is not None:
        values = ledger.ranking(host_ids)
    else:
        values = head_max(seg.logits)
    selected = select_post(values, k, token_ids=host_ids)
    idx = np.searchsorted(seg.token_ids, selected)
    sub = LogitSegment(seg.token_ids[idx], seg.logits[:, idx], seg.values[idx], seg.origin,
                       seg.speculative)
    return HostPass(sub, selected, len(host_ids))


def hybrid_layer(model: Model, cache: KvCache, layer: int, x: np.ndarray,
                 device_ids: list[int], host: HostPass):
    """GPU side of one layer: local logits, stitch, finish.  Returns (out, logits, scores, map)."""
    hd = model.cfg.head_dim
    q = linalg.matmul(x, model.layers[layer].w_q)
    segments = []
    if device_ids:
        segments.append(compute_logit_segment(q, cache, layer, device_ids, hd, Executor.DEVICE))
    if host.segment is not None:
        segments.append(host.segment)
    tmap = TokenMap.from_ids(device_ids, host.selected)
    logits, values, _ = concatenate(segments, tmap)
    out, scores = finish_attention(logits, values, model.layers[layer], x, hd)
    return out, logits, scores, tmap


class Engine:
    """One simulation: model, caches, placement, scheduler and trace."""

    def __init__(self, cfg: EngineConfig, model: Model | None = None):
        cfg.validate()
        self.cfg = cfg
        self.model = model if model is not None else init_model(cfg.model)
        self.width = self.model.cfg.hidden_dim
        self.bpe = cfg.platform.bytes_per_element
        if cfg.mapping == "semantic":
            self.mapper = SemanticMapper(cfg.tiers)
        else:
            page = cfg.page_size or default_page_size(self.width, int(self.bpe))
            self.mapper = InterleavedMapper(cfg.tiers, page)
        self.placement = KvPlacement()
        self.ledgers = [ScoreLedger() for _ in range(self.model.n_layers)]
        sc = cfg.scheduler
        self.sched: SchedulerState = init_scheduler(sc.k_min, cfg.pool, sc.gamma_up,
                                                    sc.gamma_down, sc.allow_revert, sc.k_init)
        if not cfg.scheduler_enabled:
            self.sched = SchedulerState(k=self.sched.k, k_min=self.sched.k_min,
                                        strategy=Timing(cfg.selection.timing))
        self.pre = PreQKT(cfg.selection.n_sink, cfg.selection.window)
        self.ranking = Ranking(cfg.selection.ranking)

    def _device_capacity(self) -> int:
        cap = self.cfg.tiers.device.capacity_tokens
        if self.cfg.strategy == "aoc":
            return 1
        return int(cap) if math.isfinite(cap) else 1 << 62

    # cost helpers

    def _gpu_time(self, n_local_logits: int, n_attended: int) -> float:
        f = (costmodel.logit_flops(n_local_logits, self.width)
             + costmodel.aggregation_flops(n_attended, self.width)
             + costmodel.projection_flops(self.width)
             + costmodel.ffn_flops(self.width, self.model.cfg.ffn_dim))
        return f / self.cfg.platform.gpu_flops

    def _dense_gpu_time(self) -> float:
        f = costmodel.projection_flops(self.width) + costmodel.ffn_flops(self.width, self.model.cfg.ffn_dim)
        return f / self.cfg.platform.gpu_flops

    def run(self, prompt=None) -> DecodeTrace:
        cfg = self.cfg
        model = self.model
        if prompt is None:
            prompt = make_prompt(self.width, cfg.prompt_len, cfg.prompt_seed)
        prompt = np.asarray(prompt, dtype=DTYPE)
        if prompt.ndim != 2 or prompt.shape[0] == 0:
            raise InputError("prompt must be a non-empty (s, hidden_dim) array")
        cache, hidden = prefill(model, prompt)
        s = prompt.shape[0]
        for _ in range(s):
            self.placement.append()
        evict_lrg(self.placement, self._device_capacity(), self.mapper)
        for ledger in self.ledgers:
            ledger.grow(s)

        verify = cfg.verify_enabled()
        trace = DecodeTrace(strategy=cfg.strategy, verified=verify)
        prefill_flops = s * (costmodel.projection_flops(self.width)
                             + costmodel.ffn_flops(self.width, model.cfg.ffn_dim)) * model.n_layers
        prefill_flops += 2 * costmodel.logit_flops(s * (s + 1) // 2, self.width) * model.n_layers
        trace.prefill_latency = prefill_flops / cfg.platform.gpu_flops

        oracle_cache = cache.copy() if verify else None
        oracle_hidden = hidden.copy()
        for step in range(cfg.steps):
            capture: dict | None = {} if verify else None
            if verify:
                oracle_hidden, _ = decode_step_exact(model, oracle_hidden, oracle_cache, capture)
            hidden = self._step(step, hidden, cache, trace, capture)
            rec = trace.steps[-1]
            if verify:
                rec.hidden_err = float(np.max(np.abs(hidden.astype(np.float64)
                                                     - oracle_hidden.astype(np.float64))))
                rec.oracle_token = readout(model, oracle_hidden)
                rec.agree = rec.oracle_token == rec.token
            trace.hiddens.append(hidden.copy())
        return trace

    def _step(self, step: int, hidden: np.ndarray, cache: KvCache, trace: DecodeTrace,
              capture: dict | None) -> np.ndarray:
        cfg = self.cfg
        model = self.model
        new_id = self.placement.append()
        evict_lrg(self.placement, self._device_capacity(), self.mapper)
        device_ids = self.placement.device_ids()
        host_ids = self.placement.host_ids()
        n_tokens = new_id + 1
        for ledger in self.ledgers:
            ledger.grow(n_tokens)

        k = self.sched.k
        timing = self.sched.strategy
        hybrid = cfg.strategy == "hybrid"
        speculate = hybrid and cfg.speculation
        bytes_k = self.width * self.bpe
        bw = cfg.platform.interconnect_bw
        n_heads = model.cfg.n_heads

        x = linalg.as_vector(hidden)
        prev_input = None
        rows: list[LayerRecord] = []
        for li, layer in enumerate(model.layers):
            cache.append(li, linalg.matmul(x, layer.w_k), linalg.matmul(x, layer.w_v))
            q = linalg.matmul(x, layer.w_q)
            if hybrid:
                spec_in = prev_input if (speculate and li > 0) else None
                host = _host_pass(model, cache, li, host_ids, k, timing, self.ranking,
                                  self.pre, q, spec_in, self.ledgers[li])
            else:
                host = HostPass(compute_logit_segment(q, cache, li, host_ids, model.cfg.head_dim)
                                if host_ids else None, list(host_ids), len(host_ids))
            out, logits, scores, tmap = hybrid_layer(model, cache, li, x, device_ids, host)
            if len(host.selected) == len(host_ids):
                tmap.check_covers(n_tokens)

            # ledger: head-averaged attention mass per participating token
            full = np.zeros(n_tokens)
            full[tmap.token_ids()] = scores.astype(np.float64).mean(axis=0)
            update_ledger(self.ledgers[li], full)

            spec_err = logit_err = None
            if capture is not None:
                if host.segment is not None and host.segment.speculative:
                    exact = compute_logit_segment(q, cache, li, host.selected, model.cfg.head_dim)
                    spec_err = float(np.max(np.abs(exact.logits.astype(np.float64)
                                                   - host.segment.logits.astype(np.float64))))
                oracle_logits = capture["logits"][li]
                if oracle_logits.shape == logits.shape:
                    logit_err = float(np.max(np.abs(oracle_logits.astype(np.float64)
                                                    - logits.astype(np.float64))))

            rows.append(self._cost_layer(step, li, n_tokens, device_ids, host_ids, host, k,
                                         timing, host.segment is not None and host.segment.speculative,
                                         bytes_k, bw, n_heads, spec_err, logit_err))
            prev_input = x
            x = out

        t_iter = self._iteration_latency(rows, speculate)
        trace.layers.extend(rows)
        t_gpu = sum(r.t_gpu_stage for r in rows)
        t_cpu = sum(r.t_cpu for r in rows)
        t_tx = sum(r.t_tx for r in rows)
        trace.steps.append(StepRecord(step, n_tokens, k, timing.value, t_iter, t_gpu, t_cpu, t_tx,
                                      readout(model, x)))
        if hybrid and cfg.scheduler_enabled:
            self.sched = scheduler_step(self.sched, t_gpu, t_cpu, t_tx,
                                        min(cfg.pool, max(len(host_ids), self.sched.k_min)))
        return x

    def _cost_layer(self, step, li, n_tokens, device_ids, host_ids, host: HostPass, k, timing,
                    speculative, bytes_k, bw, n_heads, spec_err, logit_err) -> LayerRecord:
        cfg = self.cfg
        tiers = cfg.tiers
        n_dev, n_sel = len(device_ids), len(host.selected)
        if cfg.strategy == "hybrid":
            touched = host.selected if timing is Timing.PRE else host_ids
            mem = cost_cpu_logit_pass(self.placement, touched, bytes_k, tiers,
                                      value_tokens=host.selected)
            t_cpu = (costmodel.logit_flops(host.logit_tokens, self.width) / cfg.platform.cpu_flops
                     + mem.latency_on_cpu_critical_path)
            elems = (n_sel * n_heads + n_sel * self.width + self.width) if host_ids else self.width
            t_tx = max(elems * self.bpe / bw, mem.latency_dma)
            t_gpu = self._gpu_time(n_dev, n_dev + n_sel)
        elif cfg.strategy == "aog":
            mem = cost_cpu_logit_pass(self.placement, (), bytes_k, tiers, value_tokens=host_ids)
            elems = 2 * len(host_ids) * self.width
            # K and V of every offloaded token stream over the link
            t_tx = max(elems * self.bpe / bw, 2 * mem.latency_dma)
            t_cpu = 0.0
            t_gpu = self._gpu_time(n_tokens, n_tokens)
        else:  # aoc: attention entirely on the CPU, K and V reads on its critical path
            mem = cost_cpu_logit_pass(self.placement, host_ids, bytes_k, tiers,
                                      value_tokens=host_ids)
            attn = (costmodel.logit_flops(n_tokens, self.width)
                    + costmodel.aggregation_flops(n_tokens, self.width))
            t_cpu = (attn / cfg.platform.cpu_flops + mem.latency_on_cpu_critical_path
                     + mem.latency_dma)
            elems = self.width
            t_tx = elems * self.bpe / bw
            t_gpu = self._dense_gpu_time()
        return LayerRecord(
            step=step, layer=li, n_tokens=n_tokens, n_device=n_dev, n_host=len(host_ids),
            n_selected=n_sel, k=k, strategy=timing.value if cfg.strategy == "hybrid" else "-",
            speculative=speculative, t_gpu_stage=t_gpu, t_cpu_stage=t_cpu + t_tx, t_cpu=t_cpu,
            t_tx=t_tx, traffic_elements=int(elems),
            crit_bytes_dram=mem.bytes_read[Tier.HOST_DRAM],
            crit_bytes_expansion=mem.bytes_read[Tier.EXPANSION],
            dma_bytes_dram=mem.dma_bytes[Tier.HOST_DRAM],
            dma_bytes_expansion=mem.dma_bytes[Tier.EXPANSION],
            spec_logit_err=spec_err, logit_err=logit_err,
        )

    def _iteration_latency(self, rows: list[LayerRecord], pipelined: bool) -> float:
        if not pipelined:
            return float(sum(r.t_gpu_stage + r.t_cpu_stage for r in rows))
        total = rows[0].t_cpu_stage  # pipeline fill: layer 0 has no earlier GPU stage to hide behind
        for i, r in enumerate(rows):
            nxt = rows[i + 1].t_cpu_stage if i + 1 < len(rows) else 0.0
            total += max(r.t_gpu_stage, nxt)
        return float(total)


def run_decode(cfg: EngineConfig, prompt=None, model: Model | None = None) -> DecodeTrace:
    return Engine(cfg, model).run(prompt)


def exact_trace(model: Model, prompt, steps: int) -> DecodeTrace:
    """Oracle-only trace: monolithic decode, no timing."""
    cache, hidden = prefill(model, prompt)
    trace = DecodeTrace(strategy="exact")
    for step in range(steps):
        hidden, _ = decode_step_exact(model, hidden, cache)
        trace.steps.append(StepRecord(step, cache.n_tokens, cache.n_tokens, "-", 0.0, 0.0, 0.0,
                                      0.0, readout(model, hidden)))
        trace.hiddens.append(hidden.copy())
    return trace


def accuracy_proxy(trace_hybrid: DecodeTrace, trace_exact: DecodeTrace) -> dict[str, float]:
    if len(trace_hybrid.steps) != len(trace_exact.steps) or not trace_hybrid.steps:
        raise InputError("traces must be non-empty and cover the same number of steps")
    errs = [float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))
            for a, b in zip(trace_hybrid.hiddens, trace_exact.hiddens)]
    agree = [a == b for a, b in zip(trace_hybrid.tokens, trace_exact.tokens)]
    return {"mean_hidden_err": float(np.mean(errs)), "max_hidden_err": float(max(errs)),
            "token_agreement": float(np.mean(agree))}


def measure_similarity(model: Model, prompt, steps: int) -> list[float]:
    """Mean cosine similarity of consecutive layer inputs over ``steps`` decode steps."""
    if model.n_layers < 2:
        raise ConfigError("similarity needs at least two layers")
    if steps < 1:
        raise ConfigError("similarity needs at least one decode step")
    cache, hidden = prefill(model, prompt)
    sums = np.zeros(model.n_layers - 1)
    for _ in range(steps):
        capture: dict = {}
        hidden, _ = decode_step_exact(model, hidden, cache, capture)
        xs = capture["layer_inputs"]
        for i in range(model.n_layers - 1):
            if not np.any(xs[i]) or not np.any(xs[i + 1]):
                log.warning("zero-norm layer input at pair %d; similarity taken as 0", i)
            sums[i] += linalg.cosine(xs[i], xs[i + 1])
    return (sums / steps).tolist()


def topk_decode_step(model: Model, hidden, cache: KvCache, k: int) -> np.ndarray:
    """Decode step attending to the newest token plus the top-``k`` older tokens."""
    x = linalg.as_vector(hidden)
    n = cache.n_tokens + 1
    host_ids = list(range(n - 1))
    for li, layer in enumerate(model.layers):
        cache.append(li, linalg.matmul(x, layer.w_k), linalg.matmul(x, layer.w_v))
        q = linalg.matmul(x, layer.w_q)
        host = _host_pass(model, cache, li, host_ids, k, Timing.POST, Ranking.TOP_LOGIT,
                          PreQKT(), q, None, None)
        x, _, _, _ = hybrid_layer(model, cache, li, x, [n - 1], host)
    return x


def retention_agreement(model: Model, prompt, steps: int, k: int) -> float:
    """Share of teacher-forced steps where top-``k`` attention picks the same token."""
    cache, hidden = prefill(model, prompt)
    agree = 0
    for _ in range(steps):
        sparse = topk_decode_step(model, hidden, cache.copy(), k)
        hidden, _ = decode_step_exact(model, hidden, cache)
        agree += readout(model, sparse) == readout(model, hidden)
    return agree / steps
