"""Tiered KV residency: device HBM, host DRAM and a slower expansion tier.

Tokens start on the device.  When the device is over capacity the oldest
tokens (lowest generation index) move to the host side, where a mapper
decides which host tier receives each token's K and V vector.

Capacities are counted in tokens per layer; a host tier with
``capacity_tokens = c`` holds ``2*c`` vectors (K and V are the same size).
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field

from .errors import CapacityError, ConfigError, ConsistencyError


class Tier(str, enum.Enum):
    DEVICE = "device_hbm"
    HOST_DRAM = "host_dram"
    EXPANSION = "expansion"


HOST_TIERS = (Tier.HOST_DRAM, Tier.EXPANSION)


@dataclass
class TierSpec:
    capacity_tokens: float = math.inf
    read_bandwidth: float = 100e9  # bytes/s
    access_latency: float = 100e-9  # s per access batch


@dataclass
class TierParams:
    device: TierSpec = field(default_factory=lambda: TierSpec(1024, 1.5e12, 1e-6))
    host_dram: TierSpec = field(default_factory=lambda: TierSpec(math.inf, 200e9, 100e-9))
    expansion: TierSpec = field(default_factory=lambda: TierSpec(math.inf, 50e9, 400e-9))

    def spec(self, tier: Tier) -> TierSpec:
        return {Tier.DEVICE: self.device, Tier.HOST_DRAM: self.host_dram,
                Tier.EXPANSION: self.expansion}[tier]

    def validate(self) -> None:
        for tier in Tier:
            s = self.spec(tier)
            if s.capacity_tokens < 0:
                raise ConfigError(f"tiers.{tier.value}.capacity_tokens must be >= 0")
            if not s.read_bandwidth > 0:
                raise ConfigError(f"tiers.{tier.value}.read_bandwidth must be > 0")
            if s.access_latency < 0:
                raise ConfigError(f"tiers.{tier.value}.access_latency must be >= 0")
        if self.expansion.access_latency < self.host_dram.access_latency:
            raise ConfigError("tiers.expansion.access_latency must be >= host_dram latency")


class KvPlacement:
    """Residency of each token's K and V vector.  Token id == generation order."""

    def __init__(self):
        self.k_tier: list[Tier] = []
        self.v_tier: list[Tier] = []
        self.generation: list[int] = []
        self._device: deque[int] = deque()

    def __len__(self) -> int:
        return len(self.generation)

    def append(self) -> int:
        """Register a freshly generated token on the device; returns its id."""
        tid = len(self.generation)
        self.generation.append(tid)
        self.k_tier.append(Tier.DEVICE)
        self.v_tier.append(Tier.DEVICE)
        self._device.append(tid)
        return tid

    def device_ids(self) -> list[int]:
        return list(self._device)

    def host_ids(self) -> list[int]:
        return [t for t, tier in enumerate(self.k_tier) if tier is not Tier.DEVICE]

    def members(self, which: str = "k") -> dict[Tier, list[int]]:
        tiers = self.k_tier if which == "k" else self.v_tier
        out: dict[Tier, list[int]] = {t: [] for t in Tier}
        for tid, tier in enumerate(tiers):
            out[tier].append(tid)
        return out

    def copy(self) -> "KvPlacement":
        other = KvPlacement()
        other.k_tier = list(self.k_tier)
        other.v_tier = list(self.v_tier)
        other.generation = list(self.generation)
        other._device = deque(self._device)
        return other


class SemanticMapper:
    """K vectors to host DRAM, V vectors to whatever DRAM space K leaves.

    DRAM is one shared budget with K given strict priority: when a K needs a
    slot and DRAM is full, the oldest DRAM-resident V is demoted first, then
    the oldest DRAM-resident K.  Demotion is one way.
    """

    name = "semantic"

    def __init__(self, tiers: TierParams):
        self.dram_slots = 2 * tiers.host_dram.capacity_tokens
        self.exp_slots = 2 * tiers.expansion.capacity_tokens
        self._dram_k: deque[int] = deque()
        self._dram_v: deque[int] = deque()
        self._exp_used = 0

    def _dram_used(self) -> int:
        return len(self._dram_k) + len(self._dram_v)

    def _to_expansion(self) -> None:
        if self._exp_used + 1 > self.exp_slots:
            raise CapacityError("expansion tier is full")
        self._exp_used += 1

    def place(self, placement: KvPlacement, tid: int) -> tuple[Tier, Tier]:
        # K first: it has priority over every V already in DRAM.
        if self._dram_used() < self.dram_slots:
            k_tier = Tier.HOST_DRAM
        elif self._dram_v:
            victim = self._dram_v.popleft()
            self._to_expansion()
            placement.v_tier[victim] = Tier.EXPANSION
            k_tier = Tier.HOST_DRAM
        elif self._dram_k:
            victim = self._dram_k.popleft()
            self._to_expansion()
            placement.k_tier[victim] = Tier.EXPANSION
            k_tier = Tier.HOST_DRAM
        else:
            self._to_expansion()
            k_tier = Tier.EXPANSION
        if k_tier is Tier.HOST_DRAM:
            self._dram_k.append(tid)

        if self._dram_used() < self.dram_slots:
            v_tier = Tier.HOST_DRAM
            self._dram_v.append(tid)
        else:
            self._to_expansion()
            v_tier = Tier.EXPANSION
        placement.k_tier[tid] = k_tier
        placement.v_tier[tid] = v_tier
        return k_tier, v_tier


class InterleavedMapper:
    """Page-granular round robin: even pages in DRAM, odd pages in expansion.

    K and V of a token share a tier.  A page whose tier is full spills to the
    other host tier.
    """

    name = "interleaved"

    def __init__(self, tiers: TierParams, page_size: int):
        if page_size < 1:
            raise ConfigError("page_size must be >= 1")
        self.page_size = page_size
        self.slots = {Tier.HOST_DRAM: 2 * tiers.host_dram.capacity_tokens,
                      Tier.EXPANSION: 2 * tiers.expansion.capacity_tokens}
        self.used = {Tier.HOST_DRAM: 0, Tier.EXPANSION: 0}

    def home_tier(self, generation: int) -> Tier:
        return Tier.HOST_DRAM if (generation // self.page_size) % 2 == 0 else Tier.EXPANSION

    def place(self, placement: KvPlacement, tid: int) -> tuple[Tier, Tier]:
        tier = self.home_tier(placement.generation[tid])
        if self.used[tier] + 2 > self.slots[tier]:
            other = Tier.EXPANSION if tier is Tier.HOST_DRAM else Tier.HOST_DRAM
            if self.used[other] + 2 > self.slots[other]:
                raise CapacityError("host DRAM and expansion tier are both full")
            tier = other
        self.used[tier] += 2
        placement.k_tier[tid] = tier
        placement.v_tier[tid] = tier
        return tier, tier


def default_page_size(width: int, bytes_per_element: int = 2, page_bytes: int = 4096) -> int:
    """Tokens per 4 KiB page, counting one layer's K and V of each token."""
    return max(1, page_bytes // (2 * width * bytes_per_element))


def map_semantic(placement: KvPlacement, tid: int, mapper: SemanticMapper) -> tuple[Tier, Tier]:
    return mapper.place(placement, tid)


def map_interleaved(placement: KvPlacement, tid: int, mapper: InterleavedMapper) -> tuple[Tier, Tier]:
    return mapper.place(placement, tid)


def evict_lrg(placement: KvPlacement, device_capacity: int, mapper) -> list[int]:
    """Move least-recently-generated device tokens off the device.

    Evicted tokens stay addressable in a host tier chosen by ``mapper``.
    Returns the evicted ids in eviction order.
    """
    evicted = []
    while len(placement._device) > device_capacity:
        tid = placement._device.popleft()
        mapper.place(placement, tid)
        evicted.append(tid)
    return evicted


@dataclass
class AccessCost:
    bytes_read: dict[Tier, float] = field(default_factory=lambda: {t: 0.0 for t in HOST_TIERS})
    dma_bytes: dict[Tier, float] = field(default_factory=lambda: {t: 0.0 for t in HOST_TIERS})
    latency_on_cpu_critical_path: float = 0.0
    latency_dma: float = 0.0


def _tier_counts(placement: KvPlacement, tokens, which: str) -> dict[Tier, int]:
    tiers = placement.k_tier if which == "k" else placement.v_tier
    counts = {t: 0 for t in HOST_TIERS}
    for t in tokens:
        t = int(t)
        if t < 0 or t >= len(tiers):
            raise ConsistencyError(f"token {t} has no placement")
        tier = tiers[t]
        if tier is Tier.DEVICE:
            raise ConsistencyError(f"token {t} is device resident; the host holds no copy")
        counts[tier] += 1
    return counts


def cost_cpu_logit_pass(placement: KvPlacement, tokens_touched, bytes_per_k: float,
                        tiers: TierParams, value_tokens=(), bytes_per_v: float | None = None
                        ) -> AccessCost:
    """Memory cost of a CPU logit pass.

    K reads of ``tokens_touched`` sit on the CPU critical path.  V reads of
    ``value_tokens`` go straight from their tier to the device and are billed
    to ``latency_dma`` only.  Each tier touched costs its bytes over its
    bandwidth plus one access latency.
    """
    if bytes_per_v is None:
        bytes_per_v = bytes_per_k
    cost = AccessCost()
    for tier, n in _tier_counts(placement, tokens_touched, "k").items():
        if n:
            spec = tiers.spec(tier)
            cost.bytes_read[tier] += n * bytes_per_k
            cost.latency_on_cpu_critical_path += n * bytes_per_k / spec.read_bandwidth + spec.access_latency
    for tier, n in _tier_counts(placement, value_tokens, "v").items():
        if n:
            spec = tiers.spec(tier)
            cost.dma_bytes[tier] += n * bytes_per_v
            cost.latency_dma += n * bytes_per_v / spec.read_bandwidth + spec.access_latency
    return cost
