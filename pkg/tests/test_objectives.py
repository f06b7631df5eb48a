import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probwarp import ndgraph as nd
from probwarp import objectives as ob
from probwarp import probmap as pm
from probwarp.ndgraph import ContractError, Graph, ParameterError, Tensor
from probwarp.warp import DenseWarp, pixel_grid

HB09 = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))


def onehot(idx, rows):
    P = np.zeros((rows, len(idx)))
    P[idx, np.arange(len(idx))] = 1.0
    return P


def gt_from_index(target_idx, grid):
    h, w = grid
    m = np.stack([target_idx % w, target_idx // w], -1).reshape(h, w, 2).astype(np.float64)
    return pm.gt_prob_mapping(DenseWarp.from_map(m))


@pytest.mark.parametrize("gamma", [0.2, 0.5, 0.7, 1.0])
def test_visibility_cardinality_and_sort_oracle(gamma):
    rng = np.random.default_rng(int(gamma * 10))
    for _ in range(250):
        h, w = rng.integers(1, 6, 2)
        n = h * w
        gt = gt_from_index(rng.integers(0, n, n), (h, w))
        comp = pm.ProbMapping.from_array(rng.uniform(size=(n, n)), (h, w), (h, w))
        mask = ob.estimate_visibility(comp, gt, gamma)
        k = math.ceil(round(gamma * 10) * n / 10)
        assert mask.count == k
        q = comp.array[gt.target_index, np.arange(n)]
        assert set(np.nonzero(mask.flags)[0]) == set(np.argsort(-q, kind="stable")[:k])


def test_ceil_fraction_avoids_float_error():
    assert ob.ceil_fraction(0.7, 10) == 7      # 0.7 * 10 == 7.000000000000001 in floats
    assert ob.ceil_fraction(0.2, 196) == 40
    with pytest.raises(ParameterError):
        ob.estimate_visibility(None, None, 0.0)


def test_visibility_skips_invalid_columns():
    m = pixel_grid(2, 2) + np.array([1.0, 0.0])
    gt = pm.gt_prob_mapping(DenseWarp.from_map(m))
    comp = pm.ProbMapping.from_array(np.full((4, 4), 0.25), (2, 2), (2, 2))
    mask = ob.estimate_visibility(comp, gt, 1.0)
    assert mask.flags.tolist() == [True, False, True, False]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_perfect_prediction_gives_zero_loss(h, w, seed):
    rng = np.random.default_rng(seed)
    n = h * w
    mw = rng.integers(0, n, n)          # I' cell -> I cell
    via = rng.permutation(n)            # I' cell -> J cell
    back = np.empty(n, np.int64)
    back[via] = mw                       # J cell -> I cell
    p_js = pm.ProbMapping.from_array(onehot(via, n), (h, w), (h, w))
    p_tj = pm.ProbMapping.from_array(onehot(back, n), (h, w), (h, w))
    p_ts = pm.ProbMapping.from_array(onehot(mw, n), (h, w), (h, w))
    gt = gt_from_index(mw, (h, w))
    assert ob.pw_bipath_loss(p_tj, p_js, gt).data <= 1e-9
    assert ob.pwarp_sup_loss(p_ts, gt).data <= 1e-9


def test_pneg_closed_form():
    for n in (1, 4, 16):
        P = np.full((n + 1, n), 0.1 / n)
        P[n] = 0.9
        p = pm.ProbMapping.from_array(P, (1, n), (1, n), True, False)
        assert abs(ob.pneg_loss(p, 0.9).data - HB09) < 1e-9
    assert abs(HB09 - 0.325083) < 1e-6


def test_pneg_contracts():
    p = pm.ProbMapping.from_array(np.eye(2), (1, 2), (1, 2))
    with pytest.raises(ContractError):
        ob.pneg_loss(p)
    q = pm.ProbMapping.from_array(np.full((3, 2), 1 / 3), (1, 2), (1, 2), True, False)
    with pytest.raises(ParameterError):
        ob.pneg_loss(q, 1.0)


def test_log_space_losses_match_probability_path():
    rng = np.random.default_rng(0)
    C = pm.CostVolume(Tensor(rng.normal(size=(10, 9))), (3, 3), (3, 3), True)
    p = pm.to_prob_mapping(C, 0.5)
    plain = pm.ProbMapping(p.probs, p.target_grid, p.source_grid, True, True)
    np.testing.assert_allclose(ob.pneg_loss(p).data, ob.pneg_loss(plain).data, rtol=1e-12)
    m = pixel_grid(3, 3) + np.array([0.0, 1.0])
    gt = pm.gt_prob_mapping(DenseWarp.from_map(m), "smooth", unmatched=True)
    np.testing.assert_allclose(ob.pwarp_sup_loss(p, gt).data, ob.pwarp_sup_loss(plain, gt).data, rtol=1e-12)


def test_masked_ce_is_mean_over_active_columns():
    P = np.full((4, 3), 0.25)
    gt = onehot(np.array([0, 1, 2]), 4)
    p = pm.ProbMapping.from_array(P, (2, 2), (1, 3))
    g = pm.ProbMapping.from_array(gt, (2, 2), (1, 3))
    np.testing.assert_allclose(ob.masked_ce(p, g, [1, 0, 1]).data, math.log(4), rtol=1e-12)
    assert ob.masked_ce(p, g, [0, 0, 0]).data == 0.0


def test_ratio_weight_clamps():
    assert ob.ratio_weight(2.0, 4.0) == 0.5
    assert ob.ratio_weight(1e9, 1.0) == 1e3
    assert ob.ratio_weight(1e-9, 1.0) == 1e-3
    assert ob.ratio_weight(1.0, 0.0) == 1e3


def test_combine_weak_weights_are_detached():
    a = Tensor(np.array(2.0), requires_grad=True)
    b = Tensor(np.array(4.0), requires_grad=True)
    c = Tensor(np.array(0.5), requires_grad=True)
    with Graph() as g:
        rep = ob.combine_weak(nd.scale(a, 1.0), nd.scale(b, 1.0), nd.scale(c, 1.0), lambda_pneg=2.0)
    assert rep.lambdas == {"lambda_psup": 0.5, "lambda_pneg": 2.0}
    assert rep.total_value == 2.0 + 0.5 * 4.0 + 2.0 * 0.5
    g.backward(rep.total)
    assert (a.grad, b.grad, c.grad) == (1.0, 0.5, 2.0)


def test_combine_strong_ratios():
    rep = ob.combine_strong(Tensor(np.array(3.0)), Tensor(np.array(6.0)), Tensor(np.array(2.0)))
    assert rep.lambdas["lambda_psup"] == 0.5
    assert rep.lambdas["lambda_kp"] == (3.0 + 3.0) / 2.0
    assert rep.total_value == 3.0 + 3.0 + 6.0


def test_keypoint_losses():
    P = np.zeros((9, 9))
    P[4, :] = 1.0
    p = pm.ProbMapping.from_array(P, (3, 3), (3, 3))
    assert ob.keypoint_loss(p, [((0, 0), (1, 1))], "epe").data == pytest.approx(0.0, abs=1e-5)
    assert ob.keypoint_loss(p, [((0, 0), (1, 0))], "epe").data == pytest.approx(1.0, abs=1e-5)
    with pytest.raises(ContractError):
        ob.keypoint_loss(p, [])
    with pytest.raises(ParameterError):
        ob.keypoint_loss(p, [((0, 0), (1, 1))], "l1")
    sm = pm.smooth_columns(np.array([[1.0, 1.0]]), 3, 3)
    q = pm.ProbMapping.from_array(np.repeat(sm, 9, 1), (3, 3), (3, 3))
    ce = ob.keypoint_loss(q, [((2, 2), (1, 1))], "ce").data
    entropy = -(sm * np.log(sm)).sum()
    assert ce == pytest.approx(entropy, rel=1e-9)


def test_strong_objective_refuses_unmatched_state():
    rng = np.random.default_rng(1)
    C = pm.CostVolume(Tensor(rng.normal(size=(5, 4))), (2, 2), (2, 2), True)
    p = pm.to_prob_mapping(C)
    gt = pm.gt_prob_mapping(DenseWarp.from_map(pixel_grid(2, 2)), unmatched=True)
    t = ob.TripletPrediction(p, p, p, gt, gt)
    with pytest.raises(ContractError):
        ob.strong_objective([t], [[((0, 0), (0, 0))]])
    with pytest.raises(ContractError):
        ob.weak_objective([], [])
