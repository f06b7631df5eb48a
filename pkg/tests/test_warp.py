import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probwarp import warp as W
from probwarp.ndgraph import ParameterError

ZERO = W.WarpConfig(sigma_h=0.0, sigma_tps=0.0, affine_scale_range=0.0, affine_translation_range=0.0,
                    affine_angle_range=0.0, p_flip=0.0)


def test_defaults():
    cfg = W.WarpConfig()
    assert cfg.sigma_h == 0.4 and cfg.sigma_tps == 0.4 and cfg.p_flip == 0.05
    assert (cfg.resize_size, cfg.crop_size) == (64, 56)


@pytest.mark.parametrize("bad", [dict(sigma_h=1.5), dict(p_flip=-0.1), dict(crop_size=80)])
def test_config_validation(bad):
    with pytest.raises(ParameterError):
        W.WarpConfig(**bad)


def test_zero_range_config_gives_identity():
    rng = np.random.default_rng(0)
    grid = W.pixel_grid(64, 64)
    for _ in range(30):
        w = W.sample_warp(rng, ZERO, 64, 64)
        assert np.abs(w.map - grid).max() < 1e-9


def test_normalized_round_trip():
    pts = np.random.default_rng(1).uniform(0, 63, (50, 2))
    np.testing.assert_allclose(W.from_normalized(W.to_normalized(pts, 64, 48), 64, 48), pts, atol=1e-12)
    np.testing.assert_allclose(W.to_normalized([[0, 0], [63, 47]], 64, 48), [[-1, -1], [1, 1]])


def independent_dlt(src, dst):
    """Solve the 8x8 linear system with h33 = 1."""
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    h = np.linalg.solve(np.array(A), np.array(b))
    return np.append(h, 1.0).reshape(3, 3)


def test_dlt_matches_linear_solve():
    rng = np.random.default_rng(2)
    for _ in range(50):
        dst = W.CORNERS + rng.uniform(-0.4, 0.4, (4, 2))
        np.testing.assert_allclose(W.dlt_homography(W.CORNERS, dst), independent_dlt(W.CORNERS, dst), atol=1e-9)


def test_dlt_degenerate():
    with pytest.raises(W.DegenerateWarpError):
        W.dlt_homography(W.CORNERS, np.zeros((4, 2)))


def test_sampled_homographies_hit_corners():
    rng = np.random.default_rng(3)
    cfg = W.WarpConfig(p_flip=0.0)
    n = 0
    while n < 100:
        w = W.sample_warp(rng, cfg, 64, 64)
        if w.kind != "homography":
            continue
        n += 1
        target = W.from_normalized(W.CORNERS + w.params["corner_disp"], 64, 64)
        got = w.map[[0, 0, 63, 63], [0, 63, 63, 0]]
        np.testing.assert_allclose(got, target, atol=1e-6)


def test_tps_interpolates_control_points():
    rng = np.random.default_rng(4)
    disp = rng.uniform(-0.3, 0.3, (9, 2))
    coef = W.fit_tps(W.TPS_CONTROL, W.TPS_CONTROL + disp)
    np.testing.assert_allclose(W.apply_tps(W.TPS_CONTROL, coef, W.TPS_CONTROL), W.TPS_CONTROL + disp, atol=1e-9)


def test_tps_reproduces_affine_exactly():
    M = W.affine_matrix(1.1, 0.1, -0.2, 0.3, 0.05)
    coef = W.fit_tps(W.TPS_CONTROL, W.apply_affine(M, W.TPS_CONTROL))
    pts = np.random.default_rng(5).uniform(-1, 1, (40, 2))
    np.testing.assert_allclose(W.apply_tps(W.TPS_CONTROL, coef, pts), W.apply_affine(M, pts), atol=1e-9)


def test_affine_matrix_oracle():
    M = W.affine_matrix(scale=2.0, tx=0.5, ty=-1.0, angle=math.pi / 2)
    np.testing.assert_allclose(W.apply_affine(M, [[1.0, 0.0]]), [[0.5, 1.0]], atol=1e-12)


def test_flip_is_outermost():
    w = W.homography_warp(16, 16, np.random.default_rng(6).uniform(-0.2, 0.2, (4, 2)))
    f = W.flip_warp(w)
    np.testing.assert_array_equal(f.map[:, 0], w.map[:, -1])
    img = np.random.default_rng(7).uniform(0, 1, (16, 16, 3))
    np.testing.assert_allclose(W.warp_image(img, f), W.warp_image(img, w)[:, ::-1], atol=1e-12)


def test_family_frequencies_are_uniform():
    rng = np.random.default_rng(8)
    kinds = [W.TRANSFORM_KINDS[rng.integers(3)] for _ in range(10000)]
    # the sampler draws the family with the same call; check the real sampler on fewer draws
    counts = np.array([kinds.count(k) for k in W.TRANSFORM_KINDS]) / 10000
    assert np.all(np.abs(counts - 1 / 3) < 0.03)


def test_sampler_family_frequencies():
    rng = np.random.default_rng(9)
    n = 600
    draws = [W.sample_warp(rng, W.WarpConfig(), 16, 16, max_tries=64).kind for _ in range(n)]
    fam = ["affine" if d.startswith("affine") else d for d in draws]
    counts = np.array([fam.count(k) for k in ("homography", "tps", "affine")])
    chi2 = ((counts - n / 3) ** 2 / (n / 3)).sum()
    assert chi2 < 13.8   # 99.9% quantile, 2 dof


def test_sampled_warps_keep_enough_of_the_crop():
    rng = np.random.default_rng(10)
    cfg = W.WarpConfig()
    for _ in range(40):
        w = W.sample_warp(rng, cfg, 64, 64)
        assert W.crop_warp(w, 56).valid.mean() >= 0.25


def test_bilinear_sample_oracle():
    img = np.arange(12, dtype=np.float64).reshape(3, 4)
    assert W.bilinear_sample(img, np.array([1.5, 0.5])) == pytest.approx(0.5 * (1.5 + 5.5))
    assert W.bilinear_sample(img, np.array([3.0, 2.0])) == 11.0
    assert W.bilinear_sample(img, np.array([-0.1, 0.0]), fill=-7.0) == -7.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 3), st.floats(0, 2))
def test_bilinear_is_exact_on_linear_images(x, y):
    ys, xs = np.mgrid[0:3, 0:4].astype(np.float64)
    img = 2 * xs - 3 * ys + 1
    assert W.bilinear_sample(img, np.array([x, y])) == pytest.approx(2 * x - 3 * y + 1, abs=1e-9)


def test_crop_warp_shifts_coordinates():
    w = W.identity_warp(64, 64)
    c = W.crop_warp(w, 56)
    np.testing.assert_allclose(c.map, W.pixel_grid(56, 56))
    assert c.valid.all()


def test_build_triplet_identity_warp():
    img = np.random.default_rng(11).uniform(0, 1, (64, 64, 3)).astype(np.float32)
    t = W.build_triplet(img, img, W.identity_warp(64, 64), 56)
    np.testing.assert_allclose(t.image_i_prime, t.image_i, atol=1e-6)
    assert t.image_i.shape == (56, 56, 3)
    with pytest.raises(ParameterError):
        W.build_triplet(img, img, W.identity_warp(64, 64), 80)


def test_jitter_ranges():
    rng = np.random.default_rng(12)
    img = np.full((8, 8, 3), 0.5, np.float32)
    out = W.jitter(rng, img)
    assert out.dtype == np.float32 and out.min() >= 0 and out.max() <= 1
    assert abs(out.mean() - 0.5) < 0.5 * 0.2 + 0.02


def test_downscale_identity_is_identity_on_the_grid():
    d = W.downscale_warp(W.identity_warp(56, 56), 14, 14)
    np.testing.assert_allclose(d.map, W.pixel_grid(14, 14), atol=1e-12)
    assert d.valid.all()


def test_downscale_translation():
    m = W.pixel_grid(56, 56) + np.array([8.0, 0.0])
    d = W.downscale_warp(W.DenseWarp.from_map(m), 14, 14)
    np.testing.assert_allclose(d.map[d.valid][:, 0] - W.pixel_grid(14, 14)[d.valid][:, 0], 2.0, atol=1e-12)
    assert not d.valid[:, -2:].any()
