import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridattn.errors import CapacityError, ConfigError, ConsistencyError
from hybridattn.memory import (InterleavedMapper, KvPlacement, SemanticMapper, Tier, TierParams,
                               TierSpec, cost_cpu_logit_pass, default_page_size, evict_lrg,
                               map_interleaved, map_semantic)
from oracles import lrg_device_set, replay_semantic

TAG = {Tier.HOST_DRAM: "dram", Tier.EXPANSION: "exp"}


def _tiers(dram=math.inf, exp=math.inf, dram_bw=200e9, exp_bw=50e9):
    return TierParams(host_dram=TierSpec(dram, dram_bw, 100e-9),
                      expansion=TierSpec(exp, exp_bw, 400e-9))


def _placement(n):
    p = KvPlacement()
    for _ in range(n):
        p.append()
    return p


def test_evict_under_capacity_noop():
    p = _placement(10)
    assert evict_lrg(p, 10, SemanticMapper(_tiers())) == []
    assert p.device_ids() == list(range(10))


def test_evict_oldest_first():
    p = _placement(12)
    assert evict_lrg(p, 8, SemanticMapper(_tiers())) == [0, 1, 2, 3]
    assert p.device_ids() == list(range(4, 12))
    assert p.host_ids() == [0, 1, 2, 3]


def test_evict_capacity_zero():
    p = _placement(5)
    evict_lrg(p, 0, SemanticMapper(_tiers()))
    assert p.device_ids() == []
    assert p.host_ids() == list(range(5))


def test_semantic_ample_dram():
    p = _placement(3)
    m = SemanticMapper(_tiers())
    evict_lrg(p, 0, m)
    assert all(p.k_tier[t] is Tier.HOST_DRAM and p.v_tier[t] is Tier.HOST_DRAM for t in range(3))


def test_semantic_oldest_k_demoted_when_dram_holds_only_keys():
    # 200 vector slots: 100 tokens of K+V fit exactly
    p = _placement(101)
    m = SemanticMapper(_tiers(dram=100))
    evict_lrg(p, 0, m)
    # V vectors are demoted before any K; once all V have left, K 0 is the first K to go
    assert p.k_tier[100] is Tier.HOST_DRAM
    assert all(p.k_tier[t] is Tier.HOST_DRAM for t in range(101))
    p2 = _placement(201)
    m2 = SemanticMapper(_tiers(dram=100))
    evict_lrg(p2, 0, m2)
    assert p2.k_tier[0] is Tier.EXPANSION
    assert p2.k_tier[200] is Tier.HOST_DRAM
    assert sum(t is Tier.HOST_DRAM for t in p2.k_tier) == 200


def test_semantic_v_spills_first():
    p = _placement(3)
    m = SemanticMapper(_tiers(dram=1))  # two vector slots
    evict_lrg(p, 0, m)
    assert [TAG[t] for t in p.k_tier] == ["exp", "dram", "dram"]
    assert [TAG[t] for t in p.v_tier] == ["exp", "exp", "exp"]


def test_semantic_matches_hand_replay():
    for dram in (0, 1, 3, 7.5):
        p = _placement(40)
        evict_lrg(p, 0, SemanticMapper(_tiers(dram=dram)))
        ref = replay_semantic(range(40), dram)
        got = {t: (TAG[p.k_tier[t]], TAG[p.v_tier[t]]) for t in range(40)}
        assert got == ref


def test_semantic_capacity_error():
    p = _placement(5)
    with pytest.raises(CapacityError):
        evict_lrg(p, 0, SemanticMapper(_tiers(dram=1, exp=1)))


def test_interleaved_pages():
    p = _placement(8)
    evict_lrg(p, 0, InterleavedMapper(_tiers(), 2))
    assert [TAG[t] for t in p.k_tier] == ["dram", "dram", "exp", "exp"] * 2
    assert p.k_tier == p.v_tier


def test_interleaved_page_one_alternates():
    p = _placement(6)
    evict_lrg(p, 0, InterleavedMapper(_tiers(), 1))
    assert [TAG[t] for t in p.k_tier] == ["dram", "exp"] * 3


def test_interleaved_half_in_expansion():
    p = _placement(1000)
    evict_lrg(p, 0, InterleavedMapper(_tiers(), 7))
    share = sum(t is Tier.EXPANSION for t in p.k_tier) / 1000
    assert abs(share - 0.5) < 0.01


def test_interleaved_spills_when_full():
    p = _placement(4)
    evict_lrg(p, 0, InterleavedMapper(_tiers(dram=math.inf, exp=1), 1))
    assert [TAG[t] for t in p.k_tier] == ["dram", "exp", "dram", "dram"]


def test_map_helpers_delegate():
    p = _placement(2)
    p._device.clear()
    assert map_semantic(p, 0, SemanticMapper(_tiers())) == (Tier.HOST_DRAM, Tier.HOST_DRAM)
    assert map_interleaved(p, 1, InterleavedMapper(_tiers(), 1)) == (Tier.EXPANSION, Tier.EXPANSION)


def test_cost_semantic_no_expansion_on_critical_path():
    tiers = _tiers()
    p = _placement(50)
    evict_lrg(p, 10, SemanticMapper(tiers))
    c = cost_cpu_logit_pass(p, p.host_ids(), 256, tiers)
    assert c.bytes_read[Tier.EXPANSION] == 0
    assert c.bytes_read[Tier.HOST_DRAM] == 40 * 256
    assert c.latency_on_cpu_critical_path == pytest.approx(40 * 256 / 200e9 + 100e-9)


def test_cost_interleaved_half_expansion():
    tiers = _tiers()
    p = _placement(100)
    evict_lrg(p, 0, InterleavedMapper(tiers, 1))
    c = cost_cpu_logit_pass(p, range(100), 1, tiers)
    assert c.bytes_read[Tier.EXPANSION] == 50
    assert c.bytes_read[Tier.HOST_DRAM] == 50


def test_cost_empty():
    c = cost_cpu_logit_pass(_placement(3), [], 64, _tiers())
    assert c.latency_on_cpu_critical_path == 0 and c.latency_dma == 0
    assert sum(c.bytes_read.values()) == 0


def test_cost_values_billed_to_dma():
    tiers = _tiers(dram=1)
    p = _placement(3)
    evict_lrg(p, 0, SemanticMapper(tiers))
    c = cost_cpu_logit_pass(p, [], 8, tiers, value_tokens=[0, 1, 2])
    assert c.latency_on_cpu_critical_path == 0
    assert c.dma_bytes[Tier.EXPANSION] == 24


def test_cost_device_token_inconsistent():
    p = _placement(3)
    with pytest.raises(ConsistencyError):
        cost_cpu_logit_pass(p, [0], 8, _tiers())


def test_tier_validation():
    with pytest.raises(ConfigError):
        TierParams(expansion=TierSpec(math.inf, 50e9, 1e-9)).validate()
    with pytest.raises(ConfigError):
        InterleavedMapper(_tiers(), 0)


def test_default_page_size():
    assert default_page_size(16, 2) == 64
    assert default_page_size(5120, 2) == 1


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 12)), min_size=1, max_size=30),
       st.sampled_from(["semantic", "interleaved"]))
def test_lrg_suffix_and_conservation(ops, mapping):
    tiers = _tiers(dram=4)
    mapper = SemanticMapper(tiers) if mapping == "semantic" else InterleavedMapper(tiers, 2)
    p = KvPlacement()
    on_device = 0
    for n_append, cap in ops:
        for _ in range(n_append):
            p.append()
        evict_lrg(p, cap, mapper)
        # evicted tokens never come back, so the device count only shrinks to cap
        on_device = min(on_device + n_append, cap)
        n = len(p)
        dev = p.device_ids()
        assert set(dev) == lrg_device_set(n, on_device)
        assert sorted(dev + p.host_ids()) == list(range(n))
        assert all(p.k_tier[t] is not Tier.DEVICE for t in p.host_ids())
