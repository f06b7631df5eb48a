import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probwarp import probmap as pm
from probwarp.ndgraph import ContractError, DimensionError, ParameterError, Tensor
from probwarp.warp import DenseWarp, pixel_grid


def random_mapping(rng, tgrid, sgrid, unmatched=False):
    nt, ns = tgrid[0] * tgrid[1], sgrid[0] * sgrid[1]
    rows = nt + int(unmatched)
    C = pm.CostVolume(Tensor(rng.normal(size=(rows, ns))), tgrid, sgrid, unmatched)
    return pm.to_prob_mapping(C, rng.uniform(0.05, 2.0))


def double_sum(A, B):
    out = np.zeros((A.shape[0], B.shape[1]))
    for t in range(A.shape[0]):
        for s in range(B.shape[1]):
            acc = 0.0
            for j in range(A.shape[1]):
                acc += A[t, j] * B[j, s]
            out[t, s] = acc
    return out


def test_cell_coords_y_major():
    c = pm.cell_coords(2, 3)
    assert c[4].tolist() == [1.0, 1.0]
    assert c[2].tolist() == [2.0, 0.0]


def test_cost_volume_and_bin_row():
    rng = np.random.default_rng(0)
    ft, fs = rng.normal(size=(4, 2, 3)), rng.normal(size=(4, 3, 2))
    C = pm.cost_volume(Tensor(ft), Tensor(fs), Tensor(np.array(0.7)))
    assert C.scores.shape == (7, 6)
    np.testing.assert_allclose(C.scores.data[:6], ft.reshape(4, 6).T @ fs.reshape(4, 6), atol=1e-12)
    assert np.all(C.scores.data[6] == 0.7)
    with pytest.raises(DimensionError):
        pm.cost_volume(Tensor(ft), Tensor(rng.normal(size=(3, 2, 2))))


@pytest.mark.parametrize("unmatched", [False, True])
def test_compose_matches_double_sum(unmatched):
    rng = np.random.default_rng(1)
    for _ in range(20):
        g = [(int(rng.integers(1, 5)), int(rng.integers(1, 5))) for _ in range(3)]
        a = random_mapping(rng, g[0], g[1], unmatched)
        b = random_mapping(rng, g[1], g[2], unmatched)
        c = pm.compose(a, b)
        np.testing.assert_allclose(c.array, double_sum(a.array, b.array), atol=1e-12)
        np.testing.assert_allclose(c.array.sum(0), 1.0, atol=1e-6)
        assert c.has_unmatched_state == unmatched


def test_compose_contracts():
    rng = np.random.default_rng(2)
    with pytest.raises(DimensionError):
        pm.compose(random_mapping(rng, (2, 2), (3, 3)), random_mapping(rng, (2, 2), (2, 2)))
    with pytest.raises(ContractError):
        pm.compose(random_mapping(rng, (2, 2), (2, 2)), random_mapping(rng, (2, 2), (2, 2), True))


def test_occlusion_propagates_exactly():
    rng = np.random.default_rng(3)
    a = random_mapping(rng, (3, 3), (2, 4), True)
    b = random_mapping(rng, (2, 4), (4, 2), True).array.copy()
    b[:, 5] = 0.0
    b[-1, 5] = 1.0
    c = pm.compose(a, pm.ProbMapping.from_array(b, (2, 4), (4, 2), True)).array
    assert c[-1, 5] == 1.0 and np.all(c[:-1, 5] == 0.0)
    assert c[-1, -1] == 1.0 and np.all(c[:-1, -1] == 0.0)


def test_temperature_does_not_move_the_mode():
    rng = np.random.default_rng(4)
    C = pm.CostVolume(Tensor(rng.normal(size=(9, 6))), (3, 3), (2, 3))
    m1 = pm.argmax_match(pm.to_prob_mapping(C, 0.02)).pred
    m2 = pm.argmax_match(pm.to_prob_mapping(C, 5.0)).pred
    np.testing.assert_array_equal(m1, m2)
    with pytest.raises(ParameterError):
        pm.to_prob_mapping(C, 0.0)


def test_gt_onehot_identity_and_invalid_columns():
    w = DenseWarp.from_map(pixel_grid(3, 3))
    P = pm.gt_prob_mapping(w)
    np.testing.assert_array_equal(P.array, np.eye(9))
    m = pixel_grid(3, 3) + np.array([1.0, 0.0])
    P = pm.gt_prob_mapping(DenseWarp.from_map(m), unmatched=True)
    assert P.array.shape == (10, 10)
    # column (2, 0) maps outside the grid
    assert P.array[9, 2] == 1.0 and P.column_weights[2] == 1.0
    assert P.array[1, 0] == 1.0
    P2 = pm.gt_prob_mapping(DenseWarp.from_map(m))
    assert P2.column_weights[2] == 0.0 and not P2.array[:, 2].any()
    with pytest.raises(ParameterError):
        pm.gt_prob_mapping(w, "fuzzy")


def smooth_oracle(pt, h, w, sigma=1.0):
    """Bilinear splat followed by a zero-padded 3x3 Gaussian, renormalized."""
    grid = np.zeros((h + 2, w + 2))
    x0, y0 = int(np.floor(pt[0])), int(np.floor(pt[1]))
    fx, fy = pt[0] - x0, pt[1] - y0
    for dx, wx in ((0, 1 - fx), (1, fx)):
        for dy, wy in ((0, 1 - fy), (1, fy)):
            x, y = x0 + dx, y0 + dy
            if 0 <= x < w and 0 <= y < h:
                grid[y + 1, x + 1] += wx * wy
    g = np.exp(-np.array([1.0, 0.0, 1.0]) / (2 * sigma ** 2))
    k = np.outer(g, g) / np.outer(g, g).sum()
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = (grid[y:y + 3, x:x + 3] * k).sum()
    return (out / out.sum()).reshape(-1)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 4), st.floats(0, 3))
def test_smooth_columns_match_oracle(x, y):
    col = pm.smooth_columns(np.array([[x, y]]), 4, 5)[:, 0]
    np.testing.assert_allclose(col, smooth_oracle((x, y), 4, 5), atol=1e-12)


def test_smooth_gt_columns_sum_to_one():
    m = pixel_grid(4, 4) * 0.9 + 0.3
    P = pm.gt_prob_mapping(DenseWarp.from_map(m), "smooth")
    np.testing.assert_allclose(P.array[:, P.valid].sum(0), 1.0, atol=1e-12)
    assert pm.smooth_columns(np.zeros((0, 2)), 3, 3).shape == (9, 0)


def test_argmax_examples():
    P = np.zeros((5, 3))
    P[[2, 0], [0, 1]] = 1.0
    P[:, 2] = [0.02, 0.02, 0.03, 0.03, 0.9]
    m = pm.argmax_match(pm.ProbMapping.from_array(P, (2, 2), (1, 3), True, False))
    assert m.pred[0].tolist() == [0.0, 1.0] and m.pred[1].tolist() == [0.0, 0.0]
    assert m.unmatched.tolist() == [False, False, True]
    assert m.confidence[2] == 0.9
    tie = pm.ProbMapping.from_array(np.full((4, 1), 0.25), (2, 2), (1, 1))
    assert pm.argmax_match(tie).pred[0].tolist() == [0.0, 0.0]


def test_soft_argmax_examples():
    P = np.zeros((5, 2))
    P[[0, 3], 0] = 0.5
    P[1, 1], P[4, 1] = 0.25, 0.75
    m = pm.soft_argmax_match(pm.ProbMapping.from_array(P, (2, 2), (1, 2), True, False))
    assert m.pred[0].tolist() == [0.5, 0.5]
    assert m.pred[1].tolist() == [1.0, 0.0]     # unmatched mass excluded
    assert m.confidence.tolist() == [1.0, 0.25]


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    p = random_mapping(rng, (3, 4), (2, 5), True)
    pm.save_prob_mapping(tmp_path / "p.pwim", p)
    q = pm.load_prob_mapping(tmp_path / "p.pwim")
    assert (q.target_grid, q.source_grid) == ((3, 4), (2, 5))
    assert q.has_unmatched_state and q.has_unmatched_column
    np.testing.assert_allclose(q.array, p.array, rtol=1e-6, atol=1e-7)
    pm.save_prob_mapping(tmp_path / "q.pwim", q)
    assert (tmp_path / "p.pwim").read_bytes() == (tmp_path / "q.pwim").read_bytes()
