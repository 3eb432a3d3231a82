import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cisformer.config import SalientPointConfig
from cisformer.queries import (InvalidConfigError, LearnedQueries, SalientQueryInit, indices_to_points,
                               init_boundary_queries, sample_salient_indices)

from oracles import bilinear_at

FULL_GRID = SalientPointConfig(oversample_ratio=1e6, importance_fraction=1.0)


def _levels(d=4, sizes=(8, 4, 2), b=1, dtype=torch.float64):
    return {lvl: torch.randn(b, d, s, s, dtype=dtype) for lvl, s in zip((2, 3, 4), sizes)}


def _resize_oracle(img: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.array([[bilinear_at(img, (j + 0.5) / w, (i + 0.5) / h) for j in range(w)] for i in range(h)])


def test_integrate_zero_features_zero_bias():
    init = SalientQueryInit(4, 3, SalientPointConfig())
    for conv in init.integrate.values():
        torch.nn.init.zeros_(conv.bias)
    act = init.integrate_levels({k: torch.zeros_like(v) for k, v in _levels(dtype=torch.float32).items()})
    assert torch.equal(act, torch.zeros(1, 1, 8, 8))


@pytest.mark.parametrize("sizes", [(8, 4, 2), (12, 6, 3), (6, 3, 2)])
def test_integrate_output_at_level2_size(sizes):
    init = SalientQueryInit(4, 3, SalientPointConfig()).double()
    assert init.integrate_levels(_levels(sizes=sizes)).shape == (1, 1, sizes[0], sizes[0])


def test_integrate_matches_step_by_step_oracle():
    init = SalientQueryInit(4, 3, SalientPointConfig()).double()
    levels = _levels(sizes=(6, 3, 2))
    out = init.integrate_levels(levels)[0, 0].detach().numpy()
    expected = np.zeros((6, 6))
    for lvl, x in levels.items():
        conv = init.integrate[str(lvl)]
        wvec = conv.weight[0, :, 0, 0].detach().numpy()
        single = np.einsum("c,chw->hw", wvec, x[0].numpy()) + conv.bias.item()
        expected += _resize_oracle(single, 6, 6)
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_dominant_peaks_are_selected():
    act = torch.rand(6, 6) * 0.1
    peaks = [3, 10, 17, 29]
    act.view(-1)[peaks] = torch.tensor([5.0, -6.0, 7.0, 8.0])
    idx = sample_salient_indices(act, 4, FULL_GRID)
    assert sorted(idx.tolist()) == peaks


def test_constant_activation_reproducible_with_seed():
    act = torch.ones(8, 8)
    cfg = SalientPointConfig()
    a = sample_salient_indices(act, 5, cfg, torch.Generator().manual_seed(11))
    b = sample_salient_indices(act, 5, cfg, torch.Generator().manual_seed(11))
    assert torch.equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.data())
def test_full_grid_selection_equals_topk_with_row_major_ties(h, w, data):
    k = data.draw(st.integers(1, h * w))
    # a coarse value lattice forces plenty of ties
    vals = data.draw(st.lists(st.integers(-4, 4), min_size=h * w, max_size=h * w))
    act = torch.tensor(vals, dtype=torch.float32).reshape(h, w)
    idx = sample_salient_indices(act, k, FULL_GRID)
    expected = sorted(range(h * w), key=lambda i: (-abs(vals[i]), i))[:k]
    assert idx.tolist() == expected


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.floats(1.0, 4.0), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_selection_has_no_duplicates(k, ratio, frac, seed):
    act = torch.randn(7, 7)
    k = min(k, 49)
    idx = sample_salient_indices(act, k, SalientPointConfig(ratio, frac), torch.Generator().manual_seed(seed))
    assert len(idx) == k and len(set(idx.tolist())) == k


def test_too_many_points_rejected():
    with pytest.raises(InvalidConfigError):
        sample_salient_indices(torch.randn(3, 3), 10, SalientPointConfig())


def test_query_embeddings_equal_independent_gather():
    init = SalientQueryInit(4, 5, SalientPointConfig(seed=3)).double().eval()
    levels = _levels(sizes=(8, 4, 2))
    q = init(levels)
    source = init.source_feature(levels, init.integrate_levels(levels))[0].detach().numpy()
    for n, (x, y) in enumerate(q.points[0].tolist()):
        ref = [bilinear_at(source[c], x, y) for c in range(4)]
        np.testing.assert_allclose(q.embeddings[0, n].detach().numpy(), ref, atol=1e-12)
    assert q.embeddings.shape == (1, 5, 4) and q.positions.shape == (1, 5, 4)
    assert torch.isfinite(q.embeddings).all()


def test_salient_init_is_deterministic_in_eval():
    init = SalientQueryInit(4, 5, SalientPointConfig(seed=3)).double().eval()
    levels = _levels()
    assert torch.equal(init(levels).points, init(levels).points)


def test_indices_to_points_are_pixel_centers():
    pts = indices_to_points(torch.tensor([0, 5, 11]), 3, 4, torch.float64)
    np.testing.assert_allclose(pts.numpy(), [[0.125, 1 / 6], [0.375, 0.5], [0.875, 2.5 / 3]], rtol=1e-15)


def test_boundary_queries_same_seed_identical():
    a = init_boundary_queries(20, 16, seed=4)
    b = init_boundary_queries(20, 16, seed=4)
    assert torch.equal(a.embeddings, b.embeddings) and a.role == "boundary"


def test_boundary_queries_content_independent():
    q = LearnedQueries(20, 16, seed=1)(batch_size=2)
    assert torch.equal(q.embeddings[0], q.embeddings[1])


def test_boundary_query_statistics():
    n, d, std = 100, 128, 0.02
    e = init_boundary_queries(n, d, seed=9).embeddings
    assert abs(e.mean().item()) < 3 * std / np.sqrt(n * d)
    assert abs(e.std().item() - std) < 0.1 * std


def test_boundary_queries_reject_nonpositive_sizes():
    with pytest.raises(InvalidConfigError):
        init_boundary_queries(0, 4, seed=0)
