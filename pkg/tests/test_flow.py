from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vicount.config import Config
from vicount.descriptors import DescriptorSet, extract_descriptors
from vicount.flow import counting_metrics, decompose, video_count
from vicount.grid import BinaryMask, DensityMap, PointAnnotation, density_sum, render_density
from vicount.labels import oracle_matches
from vicount.simulator import generate_scene, render_pair


def _setup(seed=0, h=6, w=7):
    rng = np.random.default_rng(seed)
    values = rng.random((h, w))
    bits = rng.random((h, w)) < 0.6
    descs = extract_descriptors(np.zeros((h, w, 2)), BinaryMask(bits))
    return DensityMap(values, 8), descs, bits


def test_all_matched_and_all_unmatched():
    d, descs, bits = _setup()
    masked = np.where(bits, d.values, 0.0)
    everything = decompose(d, descs, np.zeros(len(descs), dtype=int))
    assert np.array_equal(everything.shared.values, masked)
    assert not everything.residual.values.any()
    nothing = decompose(d, descs, np.full(len(descs), -1), "inflow")
    assert np.array_equal(nothing.residual.values, masked)
    assert not nothing.shared.values.any() and nothing.direction == "inflow"


def test_decompose_rejects_bad_input():
    d, descs, _ = _setup()
    with pytest.raises(ValueError):
        decompose(d, descs, np.zeros(len(descs) + 1, dtype=int))
    outside = DescriptorSet(np.zeros((1, 2)), [[7, 0]])
    with pytest.raises(ValueError):
        decompose(d, outside, [0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conservation_cellwise(seed):
    d, descs, bits = _setup(seed)
    rng = np.random.default_rng(seed + 1)
    matches = np.where(rng.random(len(descs)) < 0.5, 0, -1)
    out = decompose(d, descs, matches)
    assert np.array_equal(out.shared.values + out.residual.values, np.where(bits, d.values, 0.0))
    assert not (out.shared.values * out.residual.values).any()


def test_oracle_residual_equals_true_outflow():
    cfg = Config(noise_min=0.0, noise_max=0.0)
    checked = 0
    for seed in range(6):
        scene = generate_scene(cfg, seed)
        pair = render_pair(scene, 10, 8, cfg)
        fa, fb = pair.a, pair.b
        sa = extract_descriptors(fa.features, fa.mask)
        sb = extract_descriptors(fb.features, fb.mask)
        m_a = oracle_matches(fa.owners, fb.owners, sa.coords, sb.coords, fa.centers(8), fb.centers(8))
        m_b = oracle_matches(fb.owners, fa.owners, sb.coords, sa.coords, fb.centers(8), fa.centers(8))
        out = decompose(DensityMap(np.where(fa.mask.bits, fa.density.values, 0), 8), sa, m_a)
        inn = decompose(DensityMap(np.where(fb.mask.bits, fb.density.values, 0), 8), sb, m_b)
        heads = max(len(fa.points), len(fb.points), 1)
        assert abs(density_sum(out.residual) - len(pair.outflow)) <= 0.05 * heads
        assert abs(density_sum(inn.residual) - len(pair.inflow)) <= 0.05 * heads
        checked += 1
    assert checked == 6


def test_video_count_examples():
    first = render_density([PointAnnotation(k, 12.0 + 16 * k, 12.0) for k in range(10)], 0.5, 22, 4, 8)
    assert video_count(first, []) == density_sum(first)

    def blobs(n):
        return render_density([PointAnnotation(k, 12.0 + 16 * k, 20.0) for k in range(n)], 0.5, 22, 4, 8)

    assert abs(video_count(first, [blobs(2), blobs(0), blobs(3)]) - 15) <= 0.2


def test_metric_examples():
    perfect = counting_metrics([(10, 10, 5), (3, 3, 2)], [(1, 1, 2, 2)])
    assert (perfect.mae, perfect.rmse, perfect.wrae, perfect.miae, perfect.moae) == (0, 0, 0, 0, 0)
    one = counting_metrics([(10, 12, 7)])
    assert (one.mae, one.rmse) == (2, 2) and one.wrae == pytest.approx(20.0)
    two = counting_metrics([(10, 12, 100), (20, 15, 300)])
    assert two.mae == pytest.approx(3.5)
    assert two.rmse == pytest.approx(math.sqrt(29 / 2))
    assert two.wrae == pytest.approx(23.75)
    pairs = counting_metrics([(5, 5, 1)], [(2, 1.5, 0, 1.0), (0, 0.5, 3, 3.0)])
    assert pairs.miae == pytest.approx(0.5) and pairs.moae == pytest.approx(0.5)


def test_metric_errors_and_exports():
    with pytest.raises(ValueError):
        counting_metrics([])
    with pytest.raises(ValueError):
        counting_metrics([(0, 1, 3)])
    rep = counting_metrics([(10, 12, 100), (20, 15, 300)], names=["a", "b"])
    assert rep.to_csv().splitlines()[1].startswith("a,10.0,12.000000,100,")
    assert '"MAE": 3.5' in rep.to_json()


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.integers(1, 60), st.floats(0, 80), st.integers(1, 40)), min_size=1, max_size=6),
    st.lists(st.tuples(st.integers(0, 9), st.floats(0, 9), st.integers(0, 9), st.floats(0, 9)), max_size=6),
    st.randoms(use_true_random=False),
)
def test_metrics_permutation_invariant_and_rmse_bound(clips, pairs, rnd):
    rep = counting_metrics(clips, pairs)
    assert rep.rmse >= rep.mae - 1e-12 >= -1e-12
    c2, p2 = list(clips), list(pairs)
    rnd.shuffle(c2)
    rnd.shuffle(p2)
    again = counting_metrics(c2, p2)
    for a, b in [(rep.mae, again.mae), (rep.rmse, again.rmse), (rep.wrae, again.wrae),
                 (rep.miae, again.miae), (rep.moae, again.moae)]:
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_rmse_mae_brute():
    clips = [(3, 4.5, 2), (8, 6, 1), (5, 5.25, 4)]
    rep = counting_metrics(clips)
    errs = [abs(y - p) for y, p, _ in clips]
    assert rep.mae == pytest.approx(sum(errs) / 3)
    assert rep.rmse == pytest.approx(math.sqrt(sum(e * e for e in errs) / 3))
    weights = [t / 7 for _, _, t in clips]
    assert rep.wrae == pytest.approx(100 * sum(w * e / y for w, e, (y, _, _) in zip(weights, errs, clips)))
