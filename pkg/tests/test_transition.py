import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctfwalk import engine as E
from ctfwalk.encoder import FeaturePyramid
from ctfwalk.engine import Tensor, grad_check
from ctfwalk.transition import (SparseTransition, TransitionConfig, chain, coarse_to_fine, coordinate_grid,
                                expected_flow, local_attention, product_diagonal, resize_flow, round_half_up,
                                sparse_matmul, upsample_flow, warp)

from oracles import dense_expected_flow, dense_local_attention, random_stochastic, random_unit

GRIDS = [(h, w) for h in range(1, 9) for w in range(1, 9)]


def test_coordinate_grid_is_row_major():
    D = coordinate_grid(2, 3)
    assert D.tolist() == [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]]


def test_round_half_up_breaks_ties_upward():
    assert round_half_up(np.array([0.5, 1.5, -0.5, -1.5, 2.49])).tolist() == [1, 2, 0, -1, 2]


@pytest.mark.parametrize("window", [3, 5, 7])
def test_local_attention_equals_dense_masked_softmax(window):
    for (h, w), seed in itertools.product(GRIDS, range(20)):
        rng = np.random.default_rng(seed * 1000 + h * 10 + w)
        xs, xt = random_unit(rng, h, w, 4), random_unit(rng, h, w, 4)
        flow = rng.uniform(-2, 2, (h, w, 2))
        cfg = TransitionConfig(window_size=window, temperature=0.5)
        A = local_attention(xs, xt, flow, cfg)
        np.testing.assert_allclose(A.to_dense(), dense_local_attention(xs, xt, flow, window, 0.5), atol=1e-6)


def test_local_attention_rows_are_stochastic():
    rng = np.random.default_rng(0)
    A = local_attention(random_unit(rng, 6, 7, 3), random_unit(rng, 6, 7, 3), rng.normal(0, 3, (6, 7, 2)),
                        TransitionConfig(window_size=5))
    np.testing.assert_allclose(A.row_sums(), 1.0, atol=1e-6)
    assert (A.values.data >= 0).all()
    assert A.cols.min() >= 0 and A.cols.max() < 42


def test_identical_embeddings_give_uniform_interior_rows():
    x = np.zeros((7, 7, 2))
    x[..., 0] = 1.0
    A = local_attention(x, x, np.zeros((7, 7, 2)), TransitionConfig(window_size=3))
    dense = A.to_dense()
    np.testing.assert_allclose(dense[3 * 7 + 3][dense[3 * 7 + 3] > 0], 1 / 9)


def test_self_match_dominates_at_low_temperature():
    rng = np.random.default_rng(1)
    x = random_unit(rng, 5, 5, 8)
    A = local_attention(x, x, np.zeros((5, 5, 2)), TransitionConfig(window_size=3, temperature=1e-3))
    np.testing.assert_allclose(np.diag(A.to_dense()), 1.0, atol=1e-6)
    np.testing.assert_allclose(expected_flow(A, np.zeros((5, 5, 2))).data, 0.0, atol=1e-6)


def test_expected_flow_examples():
    A = SparseTransition.identity(6, grid=(2, 3))
    np.testing.assert_array_equal(expected_flow(A).data, np.zeros((2, 3, 2)))
    M = np.zeros((6, 6))
    M[0, 1] = 1.0   # pixel (0,0) -> right neighbour
    M[np.arange(1, 6), np.arange(1, 6)] = 1.0
    f = expected_flow(SparseTransition.from_dense(M, grid=(2, 3))).data
    assert f[0, 0].tolist() == [1.0, 0.0]


def test_expected_flow_matches_dense_readout_plus_anchor_residual():
    rng = np.random.default_rng(4)
    h, w = 6, 5
    xs, xt = random_unit(rng, h, w, 3), random_unit(rng, h, w, 3)
    flow = rng.uniform(-1.5, 1.5, (h, w, 2))
    A = local_attention(xs, xt, flow, TransitionConfig(window_size=3, temperature=0.3))
    D = coordinate_grid(h, w).reshape(h, w, 2)
    target = D + flow
    anchor = np.stack([np.clip(np.floor(target[..., 0] + 0.5), 0, w - 1),
                       np.clip(np.floor(target[..., 1] + 0.5), 0, h - 1)], -1)
    want = dense_expected_flow(A.to_dense(), h, w, target - anchor)
    np.testing.assert_allclose(expected_flow(A, flow).data, want, atol=1e-10)


def test_symmetric_uniform_row_gives_zero_flow():
    x = np.ones((5, 5, 1))
    A = local_attention(x, x, np.zeros((5, 5, 2)), TransitionConfig(window_size=3))
    np.testing.assert_allclose(expected_flow(A, np.zeros((5, 5, 2))).data[2, 2], 0.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(2, 7), st.sampled_from([3, 5, 7]), st.integers(0, 10 ** 6))
def test_expected_flow_stays_within_the_window(h, w, window, seed):
    rng = np.random.default_rng(seed)
    flow = rng.uniform(-3, 3, (h, w, 2))
    A = local_attention(random_unit(rng, h, w, 3), random_unit(rng, h, w, 3), flow,
                        TransitionConfig(window_size=window))
    # clipping the anchor to the grid can move it further than the rounding slack
    D = coordinate_grid(h, w).reshape(h, w, 2)
    inside = ((D + flow)[..., 0] >= -0.5) & ((D + flow)[..., 0] <= w - 0.5) & \
             ((D + flow)[..., 1] >= -0.5) & ((D + flow)[..., 1] <= h - 0.5)
    gap = np.abs(expected_flow(A, flow).data - flow).max(-1)
    assert (gap[inside] <= (window - 1) / 2 + 0.5 + 1e-9).all()


def test_warp_examples():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5, 2))
    np.testing.assert_allclose(warp(x, np.zeros((4, 5, 2))).data, x, atol=1e-12)
    shifted = warp(x, np.broadcast_to([1.0, 0.0], (4, 5, 2))).data
    np.testing.assert_allclose(shifted[:, :-1], x[:, 1:], atol=1e-12)
    pair = np.array([[[2.0], [6.0]]])
    half = warp(pair, np.array([[[0.5, 0.0], [0.0, 0.0]]])).data
    assert half[0, 0, 0] == pytest.approx(4.0)


def test_upsample_examples():
    np.testing.assert_array_equal(upsample_flow(np.array([[[1.0, 0.0]]])).data, np.tile([2.0, 0.0], (2, 2, 1)))
    np.testing.assert_array_equal(upsample_flow(np.zeros((3, 4, 2))).data, np.zeros((6, 8, 2)))


def test_upsample_preserves_an_interior_linear_ramp():
    ramp = np.zeros((4, 4, 2))
    ramp[..., 0] = np.arange(4)[None, :]
    up = upsample_flow(ramp).data
    # pixel-centre alignment: fine x maps to coarse (x + 0.5) / 2 - 0.5
    xs = (np.arange(8) + 0.5) / 2 - 0.5
    want = 2 * np.clip(xs, 0, 3)
    np.testing.assert_allclose(up[3, :, 0], want, atol=1e-12)


def test_resize_flow_scales_units():
    f = resize_flow(np.full((2, 2, 2), 1.0), 8, 8).data
    np.testing.assert_allclose(f, 4.0)


def test_chain_identities_and_empty():
    I = SparseTransition.identity(9, grid=(3, 3))
    np.testing.assert_array_equal(chain([I, I]).to_dense(), np.eye(9))
    np.testing.assert_array_equal(chain([], n=4).to_dense(), np.eye(4))


def test_chain_of_permutations_composes():
    rng = np.random.default_rng(2)
    p1, p2 = rng.permutation(9), rng.permutation(9)
    P1, P2 = np.eye(9)[p1], np.eye(9)[p2]
    got = chain([SparseTransition.from_dense(P1), SparseTransition.from_dense(P2)]).to_dense()
    np.testing.assert_array_equal(got, P1 @ P2)


@pytest.mark.parametrize("seed", range(20))
def test_chain_matches_dense_product(seed):
    rng = np.random.default_rng(seed)
    mats = [random_stochastic(rng, 9) for _ in range(3)]
    got = chain([SparseTransition.from_dense(M) for M in mats], prune_threshold=0.0).to_dense()
    np.testing.assert_allclose(got, mats[0] @ mats[1] @ mats[2], atol=1e-6)


@pytest.mark.parametrize("window", [3, 5, 7])
def test_chain_of_local_attention_matches_dense(window):
    for (h, w), seed in itertools.product([(3, 3), (4, 6), (8, 8), (5, 2)], range(20)):
        rng = np.random.default_rng(seed + 100 * window)
        X = [random_unit(rng, h, w, 3) for _ in range(3)]
        cfg = TransitionConfig(window_size=window, temperature=0.4, prune_threshold=0.0)
        flows = [rng.uniform(-1, 1, (h, w, 2)) for _ in range(2)]
        A1 = local_attention(X[0], X[1], flows[0], cfg)
        A2 = local_attention(X[1], X[2], flows[1], cfg)
        np.testing.assert_allclose(chain([A1, A2], prune_threshold=0.0).to_dense(),
                                   A1.to_dense() @ A2.to_dense(), atol=1e-6)


def test_pruned_chain_stays_row_stochastic():
    rng = np.random.default_rng(7)
    mats = [SparseTransition.from_dense(random_stochastic(rng, 16, 0.8)) for _ in range(4)]
    out = chain(mats, prune_threshold=0.02)
    np.testing.assert_allclose(out.row_sums(), 1.0, atol=1e-6)


def test_product_diagonal_matches_dense():
    rng = np.random.default_rng(3)
    P, Q = random_stochastic(rng, 12), random_stochastic(rng, 12)
    got = product_diagonal(SparseTransition.from_dense(P), SparseTransition.from_dense(Q)).data
    np.testing.assert_allclose(got, np.diag(P @ Q), atol=1e-12)


def test_sparse_matmul_gradient():
    rng = np.random.default_rng(5)
    P = SparseTransition.from_dense(random_stochastic(rng, 6))
    Qd = random_stochastic(rng, 6)
    Q = SparseTransition.from_dense(Qd)
    weights = rng.standard_normal(6)

    def fn(v):
        Qv = SparseTransition(v, Q.rows, Q.cols, Q.shape, Q.grid)
        return E.sum_(E.mul(product_diagonal(P, Qv), weights))

    assert grad_check(fn, Q.values.data) < 1e-6


def test_attention_then_readout_gradient_on_6x6():
    rng = np.random.default_rng(6)
    xt = Tensor(random_unit(rng, 6, 6, 3))
    flow = rng.uniform(-1, 1, (6, 6, 2))
    weights = rng.standard_normal((6, 6, 2))
    cfg = TransitionConfig(window_size=3, temperature=0.5)

    def fn(xs):
        A = local_attention(E.l2_normalize(xs), xt, flow, cfg)
        return E.sum_(E.mul(expected_flow(A, flow), weights))

    assert grad_check(fn, rng.standard_normal((6, 6, 3))) < 1e-4


def _pyramid(embs):
    return FeaturePyramid([Tensor(e[None]) for e in embs], [Tensor(np.zeros(e.shape[:2] + (1,))[None]) for e in embs])


def test_coarse_to_fine_identical_frames_low_temperature_gives_zero_flow():
    rng = np.random.default_rng(8)
    embs = [random_unit(rng, 2 ** l, 2 ** l, 6) for l in (1, 2, 3)]
    pyr = _pyramid(embs)
    matches = coarse_to_fine(pyr, pyr, TransitionConfig(window_size=3, temperature=1e-3))
    for m in matches:
        np.testing.assert_allclose(m.flow.data, 0.0, atol=1e-6)


def test_coarse_to_fine_single_level_is_local_attention():
    rng = np.random.default_rng(9)
    a, b = random_unit(rng, 5, 5, 3), random_unit(rng, 5, 5, 3)
    cfg = TransitionConfig(window_size=3)
    (m,) = coarse_to_fine(_pyramid([a]), _pyramid([b]), cfg)
    np.testing.assert_allclose(m.transition.to_dense(), local_attention(a, b, np.zeros((5, 5, 2)), cfg).to_dense())


def test_translation_equivariance_of_interior_flow():
    rng = np.random.default_rng(10)
    big_s, big_t = random_unit(rng, 14, 14, 4), random_unit(rng, 14, 14, 4)
    cfg = TransitionConfig(window_size=3, temperature=0.2)
    f1 = expected_flow(local_attention(big_s[:10, :10], big_t[:10, :10], np.zeros((10, 10, 2)), cfg),
                       np.zeros((10, 10, 2))).data
    f2 = expected_flow(local_attention(big_s[2:12, 3:13], big_t[2:12, 3:13], np.zeros((10, 10, 2)), cfg),
                       np.zeros((10, 10, 2))).data
    np.testing.assert_allclose(f1[3:8, 4:8], f2[1:6, 1:5], atol=1e-6)


def test_bilinear_anchor_mode_rows_are_stochastic():
    rng = np.random.default_rng(11)
    cfg = TransitionConfig(window_size=3, anchor="bilinear")
    A = local_attention(random_unit(rng, 5, 5, 3), random_unit(rng, 5, 5, 3), rng.uniform(-1, 1, (5, 5, 2)), cfg)
    np.testing.assert_allclose(A.row_sums(), 1.0, atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        TransitionConfig(window_size=4)
    with pytest.raises(ValueError):
        TransitionConfig(temperature=0.0)
