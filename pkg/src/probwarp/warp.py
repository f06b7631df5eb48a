"""Random dense warps (homography, TPS, affine-TPS, flip), bilinear warping, triplets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .ndgraph import DimensionError, ParameterError

TRANSFORM_KINDS = ("homography", "tps", "affine_tps")


class DegenerateWarpError(RuntimeError):
    pass


@dataclass(frozen=True)
class WarpConfig:
    sigma_h: float = 0.4
    sigma_tps: float = 0.4
    affine_scale_range: float = 0.45
    affine_translation_range: float = 0.25
    affine_angle_range: float = math.pi / 12
    p_flip: float = 0.05
    resize_size: int = 64
    crop_size: int = 56

    def __post_init__(self):
        if not 0 <= self.sigma_h <= 1:
            raise ParameterError(f"sigma_h must lie in [0, 1], got {self.sigma_h}")
        if not 0 <= self.p_flip <= 1:
            raise ParameterError(f"p_flip must lie in [0, 1], got {self.p_flip}")
        if self.crop_size > self.resize_size:
            raise ParameterError("crop_size must not exceed resize_size")


@dataclass
class DenseWarp:
    """Per-pixel target coordinates ``map[y, x] = (x', y')`` into the source image.

    ``width``/``height`` describe the grid the map lives on; ``src_width`` and
    ``src_height`` the image the coordinates point into (same by default).
    """

    width: int
    height: int
    map: np.ndarray
    valid: np.ndarray
    src_width: int | None = None
    src_height: int | None = None
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.src_width is None:
            self.src_width = self.width
        if self.src_height is None:
            self.src_height = self.height

    @classmethod
    def from_map(cls, m, src_width=None, src_height=None, kind="custom", params=None):
        m = np.asarray(m, dtype=np.float64)
        h, w = m.shape[:2]
        sw = w if src_width is None else src_width
        sh = h if src_height is None else src_height
        return cls(w, h, m, in_bounds(m, sw, sh), sw, sh, kind, dict(params or {}))


def in_bounds(m, w, h):
    x, y = m[..., 0], m[..., 1]
    return (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)


def pixel_grid(w, h):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def identity_warp(w, h) -> DenseWarp:
    return DenseWarp.from_map(pixel_grid(w, h), kind="identity")


def to_normalized(pts, w, h):
    pts = np.asarray(pts, dtype=np.float64)
    return np.stack([2 * pts[..., 0] / (w - 1) - 1, 2 * pts[..., 1] / (h - 1) - 1], -1)


def from_normalized(pts, w, h):
    pts = np.asarray(pts, dtype=np.float64)
    return np.stack([(pts[..., 0] + 1) * (w - 1) / 2, (pts[..., 1] + 1) * (h - 1) / 2], -1)


# ---------------------------------------------------------------------------
# parametric transforms, all acting on normalized [-1, 1] coordinates

CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def dlt_homography(src, dst):
    """Homography H with dst ~ H src from >= 4 correspondences (SVD-based DLT)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    H = vt[-1].reshape(3, 3)
    if abs(H[2, 2]) < 1e-12 or abs(np.linalg.det(H / H[2, 2])) < 1e-9:
        raise DegenerateWarpError("degenerate homography")
    return H / H[2, 2]


def apply_homography(H, pts):
    pts = np.asarray(pts, dtype=np.float64)
    hom = pts @ H[:, :2].T + H[:, 2]
    return hom[..., :2] / hom[..., 2:3]


def tps_kernel(r2):
    r2 = np.maximum(r2, 1e-12)
    return r2 * np.log(r2)


def fit_tps(ctrl, disp_ctrl):
    """Thin-plate spline coefficients mapping ``ctrl`` onto ``disp_ctrl``."""
    ctrl = np.asarray(ctrl, dtype=np.float64)
    n = len(ctrl)
    d2 = ((ctrl[:, None] - ctrl[None]) ** 2).sum(-1)
    K = tps_kernel(d2)
    np.fill_diagonal(K, 0.0)
    P = np.hstack([np.ones((n, 1)), ctrl])
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = K
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = disp_ctrl
    return np.linalg.solve(L, rhs)


def apply_tps(ctrl, coef, pts):
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    d2 = ((flat[:, None] - ctrl[None]) ** 2).sum(-1)
    U = tps_kernel(d2)
    U[d2 < 1e-12] = 0.0
    n = len(ctrl)
    out = U @ coef[:n] + coef[n] + flat @ coef[n + 1:]
    return out.reshape(pts.shape)


TPS_CONTROL = np.stack(np.meshgrid([-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]), -1).reshape(-1, 2)


def affine_matrix(scale=1.0, tx=0.0, ty=0.0, angle=0.0, shear=0.0):
    """2x3 matrix: rotation(angle) @ shear(shear) @ scale, then translation."""
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s], [s, c]])
    Sh = np.array([[1.0, math.tan(shear)], [0.0, 1.0]])
    A = R @ Sh * scale
    return np.hstack([A, [[tx], [ty]]])


def apply_affine(M, pts):
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ M[:, :2].T + M[:, 2]


def rasterize(fn, w, h, kind="custom", params=None) -> DenseWarp:
    """Evaluate a normalized-coordinate point transform on every pixel."""
    grid = to_normalized(pixel_grid(w, h), w, h)
    m = from_normalized(fn(grid), w, h)
    return DenseWarp.from_map(m, kind=kind, params=params)


def homography_warp(w, h, corner_disp) -> DenseWarp:
    corner_disp = np.asarray(corner_disp, dtype=np.float64).reshape(4, 2)
    H = dlt_homography(CORNERS, CORNERS + corner_disp)
    return rasterize(lambda p: apply_homography(H, p), w, h, "homography",
                     {"corner_disp": corner_disp, "H": H})


def tps_warp(w, h, ctrl_disp) -> DenseWarp:
    ctrl_disp = np.asarray(ctrl_disp, dtype=np.float64).reshape(9, 2)
    coef = fit_tps(TPS_CONTROL, TPS_CONTROL + ctrl_disp)
    return rasterize(lambda p: apply_tps(TPS_CONTROL, coef, p), w, h, "tps",
                     {"ctrl_disp": ctrl_disp})


def affine_warp(w, h, M, ctrl_disp=None) -> DenseWarp:
    """Affine map (2x3, normalized coords), optionally applied after a TPS."""
    M = np.asarray(M, dtype=np.float64)
    if ctrl_disp is None:
        return rasterize(lambda p: apply_affine(M, p), w, h, "affine", {"M": M})
    ctrl_disp = np.asarray(ctrl_disp, dtype=np.float64).reshape(9, 2)
    coef = fit_tps(TPS_CONTROL, TPS_CONTROL + ctrl_disp)
    return rasterize(lambda p: apply_affine(M, apply_tps(TPS_CONTROL, coef, p)), w, h,
                     "affine_tps", {"M": M, "ctrl_disp": ctrl_disp})


def flip_warp(warp: DenseWarp) -> DenseWarp:
    """Horizontal flip composed outermost: the flipped image samples the warped one mirrored."""
    return replace(warp, map=warp.map[:, ::-1].copy(), valid=warp.valid[:, ::-1].copy(),
                   params={**warp.params, "flip": True})


def _draw(rng, cfg: WarpConfig, kind, w, h) -> DenseWarp:
    if kind == "homography":
        return homography_warp(w, h, rng.uniform(-cfg.sigma_h, cfg.sigma_h, (4, 2)))
    if kind == "tps":
        return tps_warp(w, h, rng.uniform(-cfg.sigma_tps, cfg.sigma_tps, (9, 2)))
    tau, t, a = cfg.affine_scale_range, cfg.affine_translation_range, cfg.affine_angle_range
    M = affine_matrix(scale=rng.uniform(1 - tau, 1 + tau), tx=rng.uniform(-t, t),
                      ty=rng.uniform(-t, t), angle=rng.uniform(-a, a), shear=rng.uniform(-a, a))
    return affine_warp(w, h, M, rng.uniform(-cfg.sigma_tps, cfg.sigma_tps, (9, 2)))


def _crop_valid_fraction(warp: DenseWarp, cfg: WarpConfig):
    w, h = warp.width, warp.height
    if w == cfg.resize_size and h == cfg.resize_size and cfg.crop_size < w:
        return crop_warp(warp, cfg.crop_size).valid.mean()
    return warp.valid.mean()


def sample_warp(rng: np.random.Generator, cfg: WarpConfig, w: int, h: int,
                max_tries: int = 16) -> DenseWarp:
    """Draw a random dense warp.

    The transform family is chosen first (uniformly); degenerate or mostly
    out-of-view draws are redrawn within that family so the family
    frequencies stay exactly uniform.
    """
    if w < 8 or h < 8:
        raise ParameterError("warp grids must be at least 8x8")
    kind = TRANSFORM_KINDS[rng.integers(3)]
    for _ in range(max_tries):
        try:
            warp = _draw(rng, cfg, kind, w, h)
        except (DegenerateWarpError, np.linalg.LinAlgError):
            continue
        flip = rng.random() < cfg.p_flip
        if not np.all(np.isfinite(warp.map)):
            continue
        if flip:
            warp = flip_warp(warp)
        if _crop_valid_fraction(warp, cfg) >= 0.25:
            return warp
    raise DegenerateWarpError(f"no acceptable {kind} warp after {max_tries} draws")


# ---------------------------------------------------------------------------
# images


def bilinear_sample(img, coords, fill=0.0):
    """Sample ``img`` (h, w[, c]) at real (x, y) coordinates; out-of-bounds -> fill."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    x, y = coords[..., 0], coords[..., 1]
    ok = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(ok, x, 0.0)
    ys = np.where(ok, y, 0.0)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 2 if h > 1 else 0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    if img.ndim == 3:
        fx, fy, ok = fx[..., None], fy[..., None], ok[..., None]
    out = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
           + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return np.where(ok, out, fill)


def warp_image(img, warp: DenseWarp) -> np.ndarray:
    img = np.asarray(img)
    if img.shape[:2] != (warp.src_height, warp.src_width):
        raise DimensionError(f"image {img.shape[:2]} vs warp source {(warp.src_height, warp.src_width)}")
    return bilinear_sample(img, warp.map).astype(img.dtype if img.dtype.kind == "f" else np.float32)


def crop_offset(size, s):
    return (size - s) // 2


def crop_image(img, s):
    h, w = img.shape[:2]
    oy, ox = crop_offset(h, s), crop_offset(w, s)
    return img[oy:oy + s, ox:ox + s]


def crop_warp(warp: DenseWarp, s) -> DenseWarp:
    """Central crop of both domain and codomain; coordinates shift by the crop offset."""
    ox, oy = crop_offset(warp.width, s), crop_offset(warp.height, s)
    sx, sy = crop_offset(warp.src_width, s), crop_offset(warp.src_height, s)
    m = warp.map[oy:oy + s, ox:ox + s] - np.array([sx, sy], dtype=np.float64)
    valid = in_bounds(m, s, s) & warp.valid[oy:oy + s, ox:ox + s]
    return DenseWarp(s, s, m, valid, s, s, warp.kind, dict(warp.params))


def jitter(rng, img, gain=(0.8, 1.2), contrast=(0.8, 1.2), noise=0.02):
    img = np.asarray(img, dtype=np.float32)
    g = rng.uniform(*gain)
    c = rng.uniform(*contrast)
    mean = img.mean()
    out = (img - mean) * c + mean * g
    out = out + rng.normal(0.0, noise, img.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class Triplet:
    image_i: np.ndarray
    image_i_prime: np.ndarray
    image_j: np.ndarray
    warp: DenseWarp


def build_triplet(img_i, img_j, warp: DenseWarp, s: int, rng=None) -> Triplet:
    """I' = I o M_W, then central crop of all three to s x s; jitter only if ``rng`` given."""
    img_i = np.asarray(img_i, dtype=np.float32)
    img_j = np.asarray(img_j, dtype=np.float32)
    if s > min(img_i.shape[0], img_i.shape[1]):
        raise ParameterError(f"crop size {s} exceeds the image size {img_i.shape[:2]}")
    i_prime = warp_image(img_i, warp)
    t = Triplet(crop_image(img_i, s).copy(), crop_image(i_prime, s).copy(),
                crop_image(img_j, s).copy(), crop_warp(warp, s))
    if rng is not None:
        t.image_i = jitter(rng, t.image_i)
        t.image_i_prime = jitter(rng, t.image_i_prime)
        t.image_j = jitter(rng, t.image_j)
    return t


def downscale_warp(warp: DenseWarp, grid_w: int, grid_h: int) -> DenseWarp:
    """Resample the mapping at grid-cell centres and express it in cell units.

    Source-image pixel ``x`` sits at cell coordinate ``(x + 0.5) * grid_w / src_w - 0.5``.
    """
    if grid_w <= 0 or grid_h <= 0:
        raise ParameterError("grid dims must be positive")
    rx, ry = warp.width / grid_w, warp.height / grid_h
    gy, gx = np.mgrid[0:grid_h, 0:grid_w].astype(np.float64)
    centres = np.stack([(gx + 0.5) * rx - 0.5, (gy + 0.5) * ry - 0.5], -1)
    m = np.stack([bilinear_sample(warp.map[..., 0], centres, np.nan),
                  bilinear_sample(warp.map[..., 1], centres, np.nan)], -1)
    # source validity of the bilinear support
    vsrc = bilinear_sample(warp.valid.astype(np.float64), centres, 0.0) > 1 - 1e-9
    sx, sy = grid_w / warp.src_width, grid_h / warp.src_height
    out = np.stack([(m[..., 0] + 0.5) * sx - 0.5, (m[..., 1] + 0.5) * sy - 0.5], -1)
    out = np.where(np.isfinite(out), out, -1.0)
    valid = vsrc & in_bounds(out, grid_w, grid_h)
    return DenseWarp(grid_w, grid_h, out, valid, grid_w, grid_h, warp.kind, dict(warp.params))
