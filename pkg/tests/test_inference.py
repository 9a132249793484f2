import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cinelora.captions import tokenize
from cinelora.inference import (GenRequest, PlanError, assemble, blend_overlap, estimate_flow, generate_full,
                                generate_shard, generate_unsharded, is_feasible, plan_shards, warp)
from cinelora.model import VideoDiT

from conftest import tiny_config


# -- planning -----------------------------------------------------------------------------
def test_plan_examples():
    assert plan_shards(96, 1, 4).shards == ((0, 96),)
    p = plan_shards(96, 2, 4)
    assert p.shards == ((0, 50), (46, 96))
    assert p.weights == (0.2, 0.4, 0.6, 0.8)
    assert [1 - w for w in p.weights] == pytest.approx([0.8, 0.6, 0.4, 0.2])
    assert plan_shards(10, 3, 0).shards == ((0, 4), (4, 7), (7, 10))


def test_plan_rejections():
    with pytest.raises(PlanError):
        plan_shards(10, 2, 10)
    with pytest.raises(PlanError):
        plan_shards(10, 0, 1)
    with pytest.raises(PlanError):
        plan_shards(10, 2, -1)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 256), st.integers(1, 5), st.integers(0, 8))
def test_plan_invariants(total, k, overlap):
    if not is_feasible(total, k, overlap):
        return
    p = plan_shards(total, k, overlap)
    assert p.shards[0][0] == 0 and p.shards[-1][1] == total
    for (s0, e0), (s1, e1) in zip(p.shards, p.shards[1:]):
        assert e0 - s1 == overlap
    cover = np.zeros(total, int)
    for s, e in p.shards:
        cover[s:e] += 1
    assert cover.min() >= 1 and cover.max() <= 2
    assert all(w + (1 - w) == 1.0 for w in p.weights)
    lengths = p.lengths
    assert max(lengths) - min(lengths) <= 1


# -- flow & blending --------------------------------------------------------------------------
def test_flow_zero_for_identical_and_flat_frames():
    a = np.random.default_rng(0).uniform(size=(3, 16, 16))
    assert not estimate_flow(a, a).any()
    assert not estimate_flow(np.ones((3, 16, 16)), np.ones((3, 16, 16))).any()


@pytest.mark.parametrize("dy,dx", [(0, 2), (1, -3), (-2, 0), (3, 3)])
def test_flow_recovers_integer_translation(dy, dx):
    rng = np.random.default_rng(1)
    big = rng.uniform(size=(3, 30, 30))
    a = big[:, 7:23, 7:23]
    b = big[:, 7 - dy:23 - dy, 7 - dx:23 - dx]  # b(p + d) == a(p)
    flow = estimate_flow(a, b)
    interior = flow[1:3, 1:3].reshape(-1, 2)
    assert (interior == [dy, dx]).all()


def test_flow_rejects_mismatch():
    with pytest.raises(ValueError):
        estimate_flow(np.zeros((3, 16, 16)), np.zeros((3, 16, 12)))
    with pytest.raises(ValueError):
        estimate_flow(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)))


def test_warp_follows_flow():
    f = np.arange(64, dtype=float).reshape(1, 8, 8)
    flow = np.zeros((2, 2, 2), int)
    flow[..., 1] = 2
    w = warp(f, flow, 1.0)
    assert np.array_equal(w[0, :, :6], f[0, :, 2:])
    assert np.array_equal(w[0, :, 6:], np.repeat(f[0, :, 7:], 2, axis=1))
    assert np.array_equal(warp(f, flow, 0.0), f)


def test_blend_examples():
    out = np.zeros((1, 3, 4, 4))
    inc = np.ones((1, 3, 4, 4))
    flows = [np.zeros((1, 1, 2), int)]
    assert np.allclose(blend_overlap(out, inc, [0.5], flows), 0.5)
    x = np.random.default_rng(2).uniform(size=(4, 3, 8, 8))
    assert np.allclose(blend_overlap(x, x, [0.2, 0.4, 0.6, 0.8]), x)
    with pytest.raises(ValueError):
        blend_overlap(x, x[:3], [0.2, 0.4, 0.6])
    with pytest.raises(ValueError):
        blend_overlap(x, x, [0.5])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 4), st.integers(0, 4))
def test_assembled_length_matches_plan(total, k, overlap):
    if not is_feasible(total, k, overlap):
        return
    p = plan_shards(total, k, overlap)
    runs = [np.full((e - s, 3, 4, 4), float(j)) for j, (s, e) in enumerate(p.shards)]
    clip = assemble(p, runs)
    assert len(clip) == total
    for j, (s, e) in enumerate(p.shards):
        head = overlap if j else 0
        tail = overlap if j < k - 1 else 0
        assert (clip[s + head:e - tail] == j).all()


# -- sampling ----------------------------------------------------------------------------
@pytest.fixture(scope="module")
def gen_setup():
    m = VideoDiT(tiny_config())
    ff = np.random.default_rng(3).uniform(-1, 1, (3, 16, 16)).astype(np.float32)
    return m, ff


def _req(ff, **kw):
    return GenRequest(ff, tokenize("cold moonlight"), **{**dict(num_frames=14, steps=4, seed=5), **kw})


def test_generation_is_deterministic_and_seeded(gen_setup):
    m, ff = gen_setup
    a, _ = generate_full(m, _req(ff))
    b, _ = generate_full(m, _req(ff))
    c, _ = generate_full(m, _req(ff, seed=6))
    assert a.shape == (14, 3, 16, 16) and np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= -1 and a.max() <= 1


def test_single_shard_equals_unsharded_path(gen_setup):
    m, ff = gen_setup
    clip, rep = generate_full(m, _req(ff, shards=1))
    assert np.array_equal(clip, generate_unsharded(m, _req(ff)))
    assert rep.to_json()["shards"] == [[0, 14]]


def test_sharded_report_and_shape(gen_setup):
    m, ff = gen_setup
    clip, rep = generate_full(m, _req(ff, shards=2, overlap=2), compare_single=True)
    doc = rep.to_json()
    assert doc["shards"] == [[0, 8], [6, 14]] and len(doc["shard_seconds"]) == 2
    assert clip.shape == (14, 3, 16, 16)
    assert doc["proxy_divergence"] >= 0 and doc["mean_abs_divergence"] >= 0


def test_shard_interval_and_noise_checks(gen_setup):
    m, ff = gen_setup
    with pytest.raises(PlanError):
        generate_shard(m, _req(ff), (10, 20))
    with pytest.raises(ValueError):
        generate_shard(m, _req(ff), (0, 4), init_noise=np.zeros((3, 3, 16, 16)))


def test_request_validation(gen_setup):
    _, ff = gen_setup
    for bad in (dict(steps=0), dict(cfg_scale=-1.0), dict(shards=0), dict(steps=101), dict(num_frames=0)):
        with pytest.raises(ValueError):
            _req(ff, **bad)
    defaults = GenRequest(ff, [])
    assert (defaults.cfg_scale, defaults.steps, defaults.fps, defaults.overlap) == (3.8, 30, 24, 4)
