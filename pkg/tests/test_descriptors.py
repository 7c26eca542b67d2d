from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import numpy_describe, softmax_rows

from vicount.config import Config
from vicount.descriptors import (
    AgnnParams,
    DescriptorSet,
    agnn_forward,
    attention,
    describe_pair,
    encode_position,
    extract_descriptors,
)
from vicount.grid import BinaryMask, mask_from_density
from vicount.simulator import generate_scene, render_frame


def params(dim=4, layers=2, seed=0):
    return AgnnParams.init(dim, layers, np.random.default_rng(seed))


def test_extract_empty_and_ordering():
    grid = np.arange(4 * 5 * 3, dtype=float).reshape(4, 5, 3)
    assert len(extract_descriptors(grid, BinaryMask(np.zeros((4, 5), bool)))) == 0
    bits = np.zeros((4, 5), bool)
    cells = [(4, 0), (0, 1), (2, 1), (3, 2), (1, 3), (2, 3), (4, 3)]
    for x, y in cells:
        bits[y, x] = True
    s = extract_descriptors(grid, BinaryMask(bits))
    assert len(s) == 7
    assert [tuple(c) for c in s.coords] == cells  # already row-major
    for (x, y), v in zip(s.coords, s.vectors):
        assert np.array_equal(v, grid[y, x])


def test_extract_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        extract_descriptors(np.zeros((3, 3, 2)), BinaryMask(np.zeros((3, 4), bool)))


def test_retained_cells_lie_in_head_footprints():
    cfg = Config(crowd_min=3, crowd_max=3)
    scene = generate_scene(cfg, 11)
    for t in range(0, scene.n_ticks, 7):
        frame = render_frame(scene, t, cfg)
        if len(frame.points) >= 5:
            break
    mask = mask_from_density(frame.density, 0.05)
    descs = extract_descriptors(frame.features, mask)
    assert len(descs) > 0
    reach = 4 * cfg.sigma
    for x, y in descs.coords:
        assert any(
            math.hypot(x + 0.5 - p.x / cfg.downsample, y + 0.5 - p.y / cfg.downsample) <= reach + 1e-9
            for p in frame.points
        )


def test_encode_position_examples():
    p = params()
    zero = p.copy()
    zero.zero_()
    assert np.array_equal(encode_position(np.array([[3, 2]]), zero, (8, 8)).value, np.zeros((1, 4)))
    a = encode_position(np.array([[3, 2], [3, 2]]), p, (8, 8)).value
    assert np.array_equal(a[0], a[1])
    b = encode_position(np.array([[3, 2], [4, 2]]), p, (8, 8)).value
    arr = p.to_arrays()
    hidden = np.tanh(np.array([[3.5 / 8, 2.5 / 8], [4.5 / 8, 2.5 / 8]]) @ arr["pos.w0"] + arr["pos.b0"])
    assert np.allclose(b, hidden @ arr["pos.w1"] + arr["pos.b1"], atol=1e-12)
    assert not np.allclose(b[0], b[1])


def test_attention_examples():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=(2, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    out = attention(q, k, v).value
    logits = q @ k.T / math.sqrt(2)
    w = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert np.allclose(out, w @ v, atol=1e-12)
    single = attention(q, k[:1], v[:1]).value
    assert np.allclose(single, np.repeat(v[:1], 2, axis=0))
    assert np.allclose(attention(np.zeros((2, 2)), k, v).value, v.mean(axis=0))


def test_attention_stable_for_large_norms():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 64)) * 1e3 / 8
    out = attention(x, x, x).value
    assert np.all(np.isfinite(out))


def test_zero_messages_identity_projection_is_residual():
    p = params(4, 1)
    for name in p.names():
        if not name.startswith("pos"):
            p[name].value = np.zeros_like(p[name].value)
    p["proj.w"].value = np.eye(4)
    rng = np.random.default_rng(2)
    xa, xb = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    da, db = agnn_forward(xa, xb, p)
    assert np.array_equal(da.value, xa) and np.array_equal(db.value, xb)


def test_agnn_matches_straight_line_oracle():
    p = params(4, 2, seed=5)
    rng = np.random.default_rng(6)
    va, vb = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    ca, cb = np.array([[1, 2], [3, 0]]), np.array([[0, 0], [2, 3]])
    da, db = describe_pair(DescriptorSet(va, ca), DescriptorSet(vb, cb), p, (4, 5))
    ra, rb = numpy_describe(va, ca, vb, cb, p.to_arrays(), 2, (4, 5))
    assert np.abs(da.value - ra).max() < 1e-12
    assert np.abs(db.value - rb).max() < 1e-12


def test_agnn_rejects_empty():
    with pytest.raises(ValueError):
        agnn_forward(np.zeros((0, 4)), np.ones((2, 4)), params())
    with pytest.raises(ValueError):
        AgnnParams.init(4, 0, np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_permutation_equivariance(n, m, seed):
    rng = np.random.default_rng(seed)
    p = params(4, 4, seed=seed % 5)
    xa, xb = rng.normal(size=(n, 4)), rng.normal(size=(m, 4))
    da, db = agnn_forward(xa, xb, p)
    perm = rng.permutation(n)
    da2, db2 = agnn_forward(xa[perm], xb, p)
    assert np.abs(da2.value - da.value[perm]).max() < 1e-9
    assert np.abs(db2.value - db.value).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_attention_weights_are_convex(n, m, seed):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    w = softmax_rows(q @ k.T / math.sqrt(3))
    assert np.all(np.abs(w.sum(axis=1) - 1.0) < 1e-12)
    v = np.eye(m)[:, :m] if m <= 3 else rng.normal(size=(m, 3))
    if m <= 3:
        # with one-hot values the output rows are the weights themselves
        out = attention(q, k, np.eye(m)).value
        assert np.all(out >= 0) and np.allclose(out.sum(axis=1), 1.0, atol=1e-12)
    else:
        out = attention(q, k, v).value
        assert np.all(out <= v.max(axis=0) + 1e-12) and np.all(out >= v.min(axis=0) - 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_layer_parity(n, m, seed):
    rng = np.random.default_rng(seed)
    xa, xb, xb2 = rng.normal(size=(n, 4)), rng.normal(size=(m, 4)), rng.normal(size=(m, 4))
    p = params(4, 2, seed=seed % 3)
    # zero the cross layer (layer 1): frame A ignores frame B entirely
    for name in p.names():
        if name.startswith("layer1."):
            p[name].value = np.zeros_like(p[name].value)
    assert np.array_equal(agnn_forward(xa, xb, p)[0].value, agnn_forward(xa, xb2, p)[0].value)
    # zero the self layer (layer 0): B's raw inputs alone set A's cross messages
    q = params(4, 2, seed=seed % 3 + 10)
    for name in q.names():
        if name.startswith("layer0."):
            q[name].value = np.zeros_like(q[name].value)
    da = agnn_forward(xa, xb, q)[0].value
    arr = q.to_arrays()
    msg = softmax_rows((xa @ arr["layer1.wq"]) @ (xb @ arr["layer1.wk"]).T / 2.0) @ (xb @ arr["layer1.wv"])
    h = np.tanh(np.concatenate([xa, msg], axis=1) @ arr["layer1.msg.w0"] + arr["layer1.msg.b0"])
    expected = (xa + h @ arr["layer1.msg.w1"] + arr["layer1.msg.b1"]) @ arr["proj.w"] + arr["proj.b"]
    assert np.abs(da - expected).max() < 1e-12
