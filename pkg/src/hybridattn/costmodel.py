"""Back-of-envelope traffic, FLOP and latency estimates for one decode step.

Three placements of attention are compared:

* ``AoG`` - KV lives in host memory and is streamed to the GPU every step.
* ``AoC`` - attention runs on the CPU next to the KV; only the block output
  crosses the interconnect.
* ``Hybrid`` - the CPU scores the keys it holds and ships logits plus the
  selected V vectors; the GPU scores its own keys and finishes the block.

Traffic is reported in elements per layer; bytes come from
``PlatformParams.bytes_per_element``.  Compute and transfer are reported
separately and never overlapped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

from .errors import ConfigError


@dataclass
class PlatformParams:
    cpu_flops: float = 46e9
    gpu_flops: float = 1.3e12
    interconnect_bw: float = 25e9
    dram_bw: float = 200e9
    expansion_bw: float = 50e9
    gpu_mem_tokens: float = 65536
    bytes_per_element: float = 2
    host_mem_tokens: float = math.inf

    def validate(self) -> None:
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"platform.{f.name} must be positive")


# Named presets.  Only the machine-A FLOP rates come from published figures;
# bandwidths and capacities are order-of-magnitude placeholders.
PRESETS: dict[str, PlatformParams] = {
    "machine_a": PlatformParams(),
    "machine_b": PlatformParams(cpu_flops=60e9, gpu_flops=2.0e12, interconnect_bw=50e9,
                                dram_bw=300e9, expansion_bw=60e9, gpu_mem_tokens=77000),
    "machine_c": PlatformParams(cpu_flops=80e9, gpu_flops=1.6e12, interconnect_bw=50e9,
                                dram_bw=250e9, expansion_bw=40e9, gpu_mem_tokens=26000),
    "superchip": PlatformParams(interconnect_bw=250e9, gpu_mem_tokens=12288),
}


def preset(name: str) -> PlatformParams:
    try:
        return replace(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown platform preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class Workload:
    n: int  # sequence length
    d: int = 128  # per-head dim
    n_heads: int = 40
    d1: int | None = None
    d2: int | None = None
    n_layers: int = 40
    batch: int = 1

    def __post_init__(self):
        if self.d1 is None:
            self.d1 = self.n_heads * self.d
        if self.d2 is None:
            self.d2 = 4 * self.d1

    def validate(self) -> None:
        for name in ("d", "n_heads", "d1", "d2", "n_layers", "batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"workload.{name} must be positive")
        if self.n < 1:
            raise ConfigError("workload.n must be positive")
        if self.d1 != self.n_heads * self.d:
            raise ConfigError("workload.d1 must equal n_heads*d")


def opt13b_like(n: int, batch: int = 1) -> Workload:
    return Workload(n=n, d=128, n_heads=40, d1=5120, d2=20480, n_layers=40, batch=batch)


@dataclass(frozen=True)
class AoG:
    name = "AoG"


@dataclass(frozen=True)
class AoC:
    name = "AoC"


@dataclass(frozen=True)
class Hybrid:
    """``n_cpu`` host-resident tokens; ``k`` of them reach the GPU.

    ``pre`` means logits are computed only for the ``k`` selected tokens;
    otherwise the CPU scores all ``n_cpu`` tokens and keeps the top ``k``.
    """

    k: int
    n_cpu: int
    pre: bool = False
    name = "Hybrid"


def _check_hybrid(s: Hybrid, w: Workload) -> None:
    if not 0 <= s.k <= s.n_cpu <= w.n:
        raise ConfigError(f"Hybrid needs 0 <= K ({s.k}) <= N_cpu ({s.n_cpu}) <= N ({w.n})")


def traffic_elements(strategy, w: Workload) -> int:
    """CPU<->GPU elements moved per layer per step (batch 1)."""
    if isinstance(strategy, AoG):
        return 2 * w.n * w.d1
    if isinstance(strategy, AoC):
        return w.d1
    if isinstance(strategy, Hybrid):
        _check_hybrid(strategy, w)
        # one logit per head per shipped token, its V vector, then the block output
        return strategy.k * w.n_heads + strategy.k * w.d1 + w.d1
    raise ConfigError(f"unknown strategy {strategy!r}")


# Per-token, per-layer FLOP building blocks.

def logit_flops(n_tokens: int, d1: int) -> int:
    return 2 * n_tokens * d1


def aggregation_flops(n_tokens: int, d1: int) -> int:
    return 2 * n_tokens * d1


def projection_flops(d1: int) -> int:
    # Q, K, V and output projections
    return 4 * 2 * d1 * d1


def ffn_flops(d1: int, d2: int) -> int:
    return 4 * d1 * d2


def flop_breakdown(strategy, w: Workload) -> dict[str, dict[str, float]]:
    """FLOPs per step by component, split between ``cpu`` and ``gpu``."""
    scale = w.n_layers * w.batch
    dense = {"projections": projection_flops(w.d1) * scale, "ffn": ffn_flops(w.d1, w.d2) * scale}
    if isinstance(strategy, AoG):
        gpu = {"logits": logit_flops(w.n, w.d1) * scale,
               "aggregation": aggregation_flops(w.n, w.d1) * scale, **dense}
        return {"cpu": {}, "gpu": gpu}
    if isinstance(strategy, AoC):
        cpu = {"logits": logit_flops(w.n, w.d1) * scale,
               "aggregation": aggregation_flops(w.n, w.d1) * scale}
        return {"cpu": cpu, "gpu": dense}
    if isinstance(strategy, Hybrid):
        _check_hybrid(strategy, w)
        cpu_logit_tokens = strategy.k if strategy.pre else strategy.n_cpu
        n_gpu = w.n - strategy.n_cpu
        cpu = {"logits": logit_flops(cpu_logit_tokens, w.d1) * scale}
        gpu = {"logits": logit_flops(n_gpu, w.d1) * scale,
               "aggregation": aggregation_flops(n_gpu + strategy.k, w.d1) * scale, **dense}
        return {"cpu": cpu, "gpu": gpu}
    raise ConfigError(f"unknown strategy {strategy!r}")


def flops(strategy, w: Workload) -> tuple[float, float]:
    b = flop_breakdown(strategy, w)
    return float(sum(b["cpu"].values())), float(sum(b["gpu"].values()))


@dataclass
class LatencyBreakdown:
    compute_cpu: float
    compute_gpu: float
    transfer: float

    @property
    def compute(self) -> float:
        return self.compute_cpu + self.compute_gpu

    @property
    def total(self) -> float:
        return self.compute + self.transfer


def estimate_latency(p: PlatformParams, w: Workload, strategy) -> LatencyBreakdown:
    """Seconds per decode step for compute on each side and for transfer.

    Nothing overlaps here: ``total`` is the plain sum.  Pipelining is the
    engine's business.
    """
    cpu, gpu = flops(strategy, w)
    elems = traffic_elements(strategy, w) * w.n_layers * w.batch
    transfer = elems * p.bytes_per_element / p.interconnect_bw
    return LatencyBreakdown(cpu / p.cpu_flops, gpu / p.gpu_flops, transfer)


def estimate_pruned(p: PlatformParams, w: Workload, strategy, important_fraction: float,
                    cpu_share: float, gpu_share: float) -> LatencyBreakdown:
    """Latency when only ``important_fraction`` of tokens take part in attention.

    AoG and AoC attend over ``important_fraction*N`` tokens.  Hybrid keeps
    ``gpu_share*N`` tokens on the device and ships ``cpu_share*N`` from the
    host, computing logits only for those (token prediction cost excluded).
    """
    if not math.isclose(cpu_share + gpu_share, important_fraction, rel_tol=1e-9, abs_tol=1e-12):
        raise ConfigError(
            f"cpu_share + gpu_share ({cpu_share + gpu_share}) must equal "
            f"important_fraction ({important_fraction})"
        )
    if not 0 < important_fraction <= 1:
        raise ConfigError("important_fraction must be in (0, 1]")
    if isinstance(strategy, Hybrid):
        n_cpu = round(cpu_share * w.n)
        n_gpu = round(gpu_share * w.n)
        pruned = replace(w, n=n_cpu + n_gpu)
        return estimate_latency(p, pruned, Hybrid(k=n_cpu, n_cpu=n_cpu, pre=True))
    n_eff = max(1, round(important_fraction * w.n))
    return estimate_latency(p, replace(w, n=n_eff), strategy)


def default_hybrid(p: PlatformParams, w: Workload, cpu_share: float = 0.2) -> Hybrid:
    """Full-attention hybrid split: at least ``cpu_share`` of tokens on the CPU,
    more if the GPU cannot hold the rest."""
    overflow = max(0, w.n - int(p.gpu_mem_tokens // w.batch))
    n_cpu = min(w.n, max(math.ceil(cpu_share * w.n), overflow))
    return Hybrid(k=n_cpu, n_cpu=n_cpu)


@dataclass
class Feasibility:
    feasible: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.feasible


def feasibility(p: PlatformParams, w: Workload, strategy) -> Feasibility:
    tokens = w.n * w.batch
    if isinstance(strategy, AoG):
        if tokens > p.gpu_mem_tokens:
            return Feasibility(False, f"N*batch={tokens} exceeds GPU capacity {p.gpu_mem_tokens:g} tokens")
        return Feasibility(True)
    limit = p.host_mem_tokens + (p.gpu_mem_tokens if isinstance(strategy, Hybrid) else 0)
    if tokens > limit:
        return Feasibility(False, f"N*batch={tokens} exceeds host+expansion capacity {limit:g} tokens")
    return Feasibility(True)
