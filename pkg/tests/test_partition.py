import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridattn import linalg
from hybridattn.errors import CoverageError, OverlapError
from hybridattn.model import ModelConfig, decode_step_exact, init_model, layer_inputs, prefill
from hybridattn.partition import (Executor, LogitSegment, Segment, TokenMap, compute_logit_segment,
                                  concatenate, finish_attention, speculative_logit_segment)
from conftest import random_prompt, residual_model


def _setup(rng, n=16, layers=2, heads=2, hd=4, seed=0):
    model = init_model(ModelConfig(n_layers=layers, n_heads=heads, head_dim=hd, seed=seed))
    cache, hidden = prefill(model, random_prompt(rng, n, model.width))
    return model, cache, hidden


def _q(model, x, li=0):
    return linalg.matmul(x, model.layers[li].w_q)


def test_full_subset_equals_oracle_logits(rng):
    model, cache, hidden = _setup(rng)
    cap = {}
    oracle_cache = cache.copy()
    decode_step_exact(model, hidden, oracle_cache, cap)
    seg = compute_logit_segment(_q(model, hidden), oracle_cache, 0, range(17), 4)
    assert np.array_equal(seg.logits, cap["logits"][0])


def test_single_token_is_scaled_dot(rng):
    model, cache, hidden = _setup(rng)
    q = _q(model, hidden)
    seg = compute_logit_segment(q, cache, 0, [5], 4)
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        assert seg.logits[h, 0] == np.float32(linalg.scaled_dot(q[sl], cache.keys[0][5, sl], 4))


def test_disjoint_union_equals_full(rng):
    model, cache, hidden = _setup(rng)
    q = _q(model, hidden)
    full = compute_logit_segment(q, cache, 0, range(16), 4)
    a = compute_logit_segment(q, cache, 0, range(0, 16, 2), 4)
    b = compute_logit_segment(q, cache, 0, range(1, 16, 2), 4)
    merged = np.empty_like(full.logits)
    merged[:, 0::2] = a.logits
    merged[:, 1::2] = b.logits
    assert np.array_equal(merged, full.logits)


def test_concatenate_single_segment_identity(rng):
    model, cache, hidden = _setup(rng)
    seg = compute_logit_segment(_q(model, hidden), cache, 0, range(16), 4)
    logits, values, ids = concatenate([seg], TokenMap([Segment(0, 16, Executor.HOST)]))
    assert np.array_equal(logits, seg.logits)
    assert np.array_equal(values, seg.values)
    assert ids.tolist() == list(range(16))


def test_concatenate_host_then_device(rng):
    model, cache, hidden = _setup(rng)
    q = _q(model, hidden)
    host = compute_logit_segment(q, cache, 0, range(10), 4)
    dev = compute_logit_segment(q, cache, 0, range(10, 16), 4, Executor.DEVICE)
    tmap = TokenMap.from_ids(range(10, 16), range(10))
    _, _, ids = concatenate([dev, host], tmap)
    assert ids.tolist() == list(range(16))
    assert [s.executor for s in tmap.segments] == [Executor.HOST, Executor.DEVICE]


def test_three_way_split_equals_full(rng):
    model, cache, hidden = _setup(rng, n=64)
    q = _q(model, hidden)
    labels = rng.integers(0, 3, 64)
    parts = [np.flatnonzero(labels == i) for i in range(3)]
    segs = [compute_logit_segment(q, cache, 0, p, 4) for p in parts if p.size]
    dev = parts[0].tolist()
    host = np.concatenate(parts[1:]).tolist()
    logits, values, _ = concatenate(segs[::-1], TokenMap.from_ids(dev, host))
    full = compute_logit_segment(q, cache, 0, range(64), 4)
    assert np.array_equal(logits, full.logits)
    assert np.array_equal(values, full.values)


def test_missing_token_raises(rng):
    model, cache, hidden = _setup(rng)
    seg = compute_logit_segment(_q(model, hidden), cache, 0, range(15), 4)
    with pytest.raises(CoverageError):
        concatenate([seg], TokenMap.from_ids(range(16)))


def test_duplicate_token_raises(rng):
    model, cache, hidden = _setup(rng)
    q = _q(model, hidden)
    a = compute_logit_segment(q, cache, 0, range(10), 4)
    b = compute_logit_segment(q, cache, 0, range(8, 16), 4)
    with pytest.raises(OverlapError):
        concatenate([a, b], TokenMap.from_ids(range(16)))
    with pytest.raises(OverlapError):
        TokenMap.from_ids(range(10), range(8, 16))


def test_unmapped_token_raises(rng):
    model, cache, hidden = _setup(rng)
    seg = compute_logit_segment(_q(model, hidden), cache, 0, range(16), 4)
    with pytest.raises(CoverageError):
        concatenate([seg], TokenMap.from_ids(range(12)))


def test_check_covers():
    TokenMap.from_ids(range(4), range(4, 9)).check_covers(9)
    with pytest.raises(CoverageError):
        TokenMap.from_ids(range(4), range(5, 9)).check_covers(9)


def test_finish_no_split_equals_exact(rng):
    model, cache, hidden = _setup(rng)
    cap = {}
    oracle = cache.copy()
    out_exact, _ = decode_step_exact(model, hidden, oracle, cap)
    x = hidden
    for li in range(model.n_layers):
        seg = compute_logit_segment(_q(model, x, li), oracle, li, range(17), 4)
        x, _ = finish_attention(seg.logits, seg.values, model.layers[li], x, 4)
    assert np.array_equal(x, out_exact)


def test_finish_two_way_split_close(rng):
    model, cache, hidden = _setup(rng, n=30)
    oracle = cache.copy()
    out_exact, _ = decode_step_exact(model, hidden, oracle, {})
    x = hidden
    for li in range(model.n_layers):
        q = _q(model, x, li)
        a = compute_logit_segment(q, oracle, li, range(0, 31, 3), 4)
        rest = [t for t in range(31) if t % 3]
        b = compute_logit_segment(q, oracle, li, rest, 4, Executor.DEVICE)
        logits, values, _ = concatenate([a, b], TokenMap.from_ids(rest, range(0, 31, 3)))
        x, _ = finish_attention(logits, values, model.layers[li], x, 4)
    assert np.max(np.abs(x - out_exact)) <= 1e-5


def test_uniform_logits_average_values(rng):
    model, cache, hidden = _setup(rng, layers=1)
    layer = model.layers[0]
    layer.w_o[:] = np.eye(model.width, dtype=np.float32)
    layer.w_1[:] = 0
    values = cache.values[0]
    out, scores = finish_attention(np.zeros((2, 16), np.float32), values, layer, np.zeros(8), 4)
    assert np.allclose(scores, 1 / 16)
    assert np.allclose(out, values.astype(np.float64).mean(axis=0), atol=1e-6)


def test_speculative_with_true_input_is_exact(rng):
    model, cache, hidden = _setup(rng, layers=3)
    xs = layer_inputs(model, hidden, cache)
    q = _q(model, xs[2], 2)
    exact = compute_logit_segment(q, cache, 2, range(16), 4)
    spec = speculative_logit_segment(xs[2], model.layers[2], cache, 2, range(16), 4)
    assert spec.speculative
    assert np.array_equal(spec.logits, exact.logits)


def test_speculative_residual_model_exact(rng):
    model = residual_model(n_layers=4)
    cache, hidden = prefill(model, random_prompt(rng, 12, model.width))
    xs = layer_inputs(model, hidden, cache)
    for li in range(1, 4):
        spec = speculative_logit_segment(xs[li - 1], model.layers[li], cache, li, range(12), 4)
        exact = compute_logit_segment(_q(model, xs[li], li), cache, li, range(12), 4)
        assert np.array_equal(spec.logits, exact.logits)


def speculation_bound_holds(seed: int) -> tuple[float, float]:
    r = np.random.default_rng(seed)
    heads = int(r.integers(1, 5))
    hd = int(r.integers(1, 17))
    model = init_model(ModelConfig(n_layers=2, n_heads=heads, head_dim=hd, seed=seed))
    n = int(r.integers(1, 40))
    cache, hidden = prefill(model, random_prompt(r, n, model.width))
    x = r.standard_normal(model.width).astype(np.float32)
    eps = (r.standard_normal(model.width) * 10.0 ** r.uniform(-4, 0)).astype(np.float32)
    layer = model.layers[1]
    exact = compute_logit_segment(linalg.matmul(x, layer.w_q), cache, 1, range(n), hd)
    spec = speculative_logit_segment(x + eps, layer, cache, 1, range(n), hd)
    err = float(np.max(np.abs(spec.logits.astype(np.float64) - exact.logits)))
    dx = float(np.linalg.norm((x + eps).astype(np.float64) - x))
    wq = float(np.linalg.norm(layer.w_q.astype(np.float64), 2))
    kmax = float(np.max(np.linalg.norm(cache.keys[1].astype(np.float64), axis=1)))
    return err, dx * wq * kmax / math.sqrt(hd)


@pytest.mark.parametrize("seed", range(20))
def test_speculation_perturbation_bound(seed):
    err, bound = speculation_bound_holds(seed)
    assert err <= bound + 1e-6


def test_segment_ids_must_increase():
    with pytest.raises(Exception):
        LogitSegment(np.array([2, 1]), np.zeros((1, 2)), np.zeros((2, 4)), Executor.HOST)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=60))
def test_token_map_roundtrip(owner):
    dev = [i for i, d in enumerate(owner) if d]
    host = [i for i, d in enumerate(owner) if not d]
    tmap = TokenMap.from_ids(dev, host)
    tmap.check_covers(len(owner))
    assert tmap.ids_for(Executor.DEVICE).tolist() == dev
    assert tmap.ids_for(Executor.HOST).tolist() == host
    table = tmap.position_table()
    assert table.tolist() == list(range(len(owner)))
    # adjacent segments never share an executor
    ex = [s.executor for s in tmap.segments]
    assert all(a != b for a, b in zip(ex, ex[1:]))
