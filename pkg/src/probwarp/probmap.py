"""Cost volumes, column-stochastic probabilistic mappings and match extraction.

Grid cells are vectorized y-major: cell (x, y) of an (h, w) grid has index
``y * w + x``. A mapping ``P`` relating source image S to target image T has
one column per source cell and one row per target cell; with an unmatched
state an extra last row holds P(unmatched | j), and an extra last column is
the fixed unit vector P(. | unmatched).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgraph as nd
from .imageio import read_pwim, write_pwim
from .ndgraph import ContractError, DimensionError, ParameterError, Tensor

GAUSS_SIGMA = 1.0


def cell_coords(h, w):
    """(h*w, 2) array of (x, y) cell coordinates in vectorized order."""
    ys, xs = np.divmod(np.arange(h * w), w)
    return np.stack([xs, ys], -1).astype(np.float64)


@dataclass
class CostVolume:
    scores: Tensor
    target_grid: tuple
    source_grid: tuple
    has_unmatched_bin: bool = False
    z: Tensor | None = None

    @property
    def rows(self):
        return self.scores.shape[0]

    @property
    def cols(self):
        return self.scores.shape[1]


@dataclass
class ProbMapping:
    probs: Tensor
    target_grid: tuple
    source_grid: tuple
    has_unmatched_state: bool = False
    has_unmatched_column: bool = False
    # ground-truth mappings only
    column_weights: np.ndarray | None = None
    target_index: np.ndarray | None = None
    valid: np.ndarray | None = None
    # pre-softmax scores, kept so losses can work in log space
    scores: Tensor | None = None
    temperature: float | None = None

    @classmethod
    def from_array(cls, probs, target_grid, source_grid, unmatched=False, unmatched_column=None,
                   dtype=np.float64):
        if unmatched_column is None:
            unmatched_column = unmatched
        return cls(Tensor(np.asarray(probs), dtype=dtype), tuple(target_grid), tuple(source_grid),
                   unmatched, unmatched_column)

    @property
    def array(self) -> np.ndarray:
        return self.probs.data

    @property
    def n_target(self):
        return self.target_grid[0] * self.target_grid[1]

    @property
    def n_source(self):
        return self.source_grid[0] * self.source_grid[1]

    def spatial(self) -> np.ndarray:
        """Probabilities restricted to real source columns (the fixed column dropped)."""
        return self.array[:, :self.n_source]

    def unmatched_probs(self) -> np.ndarray:
        if not self.has_unmatched_state:
            raise ContractError("mapping has no unmatched state")
        return self.array[self.n_target, :self.n_source]


def unmatched_unit(rows, dtype=np.float64):
    e = np.zeros(rows, dtype=dtype)
    e[-1] = 1.0
    return e


def cost_volume(feat_t: Tensor, feat_s: Tensor, bin_z: Tensor | None = None) -> CostVolume:
    """Pairwise channel dot products between target cells (rows) and source cells (cols)."""
    if feat_t.data.ndim != 3 or feat_s.data.ndim != 3:
        raise DimensionError("features must be (d, h, w)")
    d, ht, wt = feat_t.shape
    ds, hs, ws = feat_s.shape
    if d != ds:
        raise DimensionError(f"channel mismatch: {d} vs {ds}")
    ft = nd.transpose(nd.reshape(feat_t, (d, ht * wt)))
    fs = nd.reshape(feat_s, (d, hs * ws))
    scores = nd.matmul(ft, fs)
    if bin_z is not None:
        scores = nd.append_row(scores, bin_z)
    return CostVolume(scores, (ht, wt), (hs, ws), bin_z is not None, bin_z)


def to_prob_mapping(c: CostVolume, temperature: float = 1.0 / 50.0) -> ProbMapping:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    p = nd.softmax_columns(c.scores, temperature)
    if c.has_unmatched_bin:
        p = nd.append_constant_column(p, unmatched_unit(p.shape[0], p.dtype))
    return ProbMapping(p, c.target_grid, c.source_grid, c.has_unmatched_bin, c.has_unmatched_bin,
                       scores=c.scores, temperature=temperature)


def compose(p_tj: ProbMapping, p_js: ProbMapping) -> ProbMapping:
    """Marginalize over the intermediate image: P_{T<-S} = P_{T<-J} P_{J<-S}."""
    if tuple(p_tj.source_grid) != tuple(p_js.target_grid):
        raise DimensionError(f"grid mismatch: {p_tj.source_grid} vs {p_js.target_grid}")
    if p_tj.has_unmatched_state != p_js.has_unmatched_state:
        raise ContractError("unmatched-state flags disagree")
    if p_js.has_unmatched_state and not p_tj.has_unmatched_column:
        raise ContractError("left factor needs the fixed unmatched column")
    out = nd.matmul(p_tj.probs, p_js.probs)
    return ProbMapping(out, p_tj.target_grid, p_js.source_grid, p_js.has_unmatched_state,
                       p_js.has_unmatched_column)


# ---------------------------------------------------------------------------
# ground truth


def gaussian_kernel3(sigma=GAUSS_SIGMA):
    ax = np.array([-1.0, 0.0, 1.0])
    k = np.exp(-(ax[:, None] ** 2 + ax[None] ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def smooth_columns(targets, h, w, sigma=GAUSS_SIGMA):
    """Bilinear 4-neighbour spread, 3x3 Gaussian blur, renormalization.

    ``targets`` is (n, 2) real (x, y) grid coordinates; returns (h*w, n).
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    n = len(targets)
    if n == 0:
        return np.zeros((h * w, 0))
    g = np.exp(-np.array([1.0, 0.0, 1.0]) / (2 * sigma ** 2))
    g /= g.sum()

    # spread and blur are separable, and so is the in-bounds test, so each
    # column is an outer product of two length-4 profiles at offsets -1..2
    def profile(t, size):
        c0 = np.floor(t).astype(np.int64)
        f = t - c0
        corner = np.stack([(1 - f) * ((c0 >= 0) & (c0 < size)),
                           f * ((c0 + 1 >= 0) & (c0 + 1 < size))], 1)
        p = np.zeros((len(t), 4))
        for c in range(2):
            for k in range(3):
                p[:, c + k] += corner[:, c] * g[k]
        pos = c0[:, None] - 1 + np.arange(4)
        ok = (pos >= 0) & (pos < size)
        return np.where(ok, p, 0.0), np.clip(pos, 0, size - 1)

    px, xs = profile(targets[:, 0], w)
    py, ys = profile(targets[:, 1], h)
    vals = py[:, :, None] * px[:, None, :]
    rows = ys[:, :, None] * w + xs[:, None, :]
    flat = (rows * n + np.arange(n)[:, None, None]).reshape(-1)
    out = np.bincount(flat, vals.reshape(-1), minlength=h * w * n).reshape(h * w, n)
    s = out.sum(0)
    return out / np.where(s > 0, s, 1.0)


def gt_prob_mapping(warp, mode: str = "onehot", unmatched: bool = False,
                    dtype=np.float64) -> ProbMapping:
    """Constant ground-truth mapping from a grid-resolution warp.

    Columns whose target is invalid go to the unmatched state when it exists
    and otherwise get weight 0.
    """
    if mode not in ("onehot", "smooth"):
        raise ParameterError(f"unknown mode {mode!r}")
    hs, ws = warp.height, warp.width
    ht, wt = warp.src_height, warp.src_width
    ns, nt = hs * ws, ht * wt
    targets = warp.map.reshape(-1, 2)
    valid = warp.valid.reshape(-1).copy()
    rows = nt + (1 if unmatched else 0)
    cols = ns + (1 if unmatched else 0)
    P = np.zeros((rows, cols))
    idx = np.full(ns, -1, dtype=np.int64)
    near = np.clip(np.rint(targets), 0, [wt - 1, ht - 1]).astype(np.int64)
    idx[valid] = near[valid, 1] * wt + near[valid, 0]
    src = np.nonzero(valid)[0]
    if mode == "onehot":
        P[idx[valid], src] = 1.0
    else:
        P[:nt, src] = smooth_columns(targets[valid], ht, wt)
    weights = valid.astype(np.float64)
    if unmatched:
        inv = np.nonzero(~valid)[0]
        P[nt, inv] = 1.0
        weights[inv] = 1.0
        P[nt, ns] = 1.0
        weights = np.append(weights, 0.0)
    return ProbMapping(Tensor(P, dtype=dtype), (ht, wt), (hs, ws), unmatched, unmatched,
                       column_weights=weights, target_index=idx, valid=valid)


# ---------------------------------------------------------------------------
# match extraction


@dataclass
class MatchSet:
    src: np.ndarray
    pred: np.ndarray
    confidence: np.ndarray
    unmatched: np.ndarray
    gt: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.src)

    def subset(self, mask) -> "MatchSet":
        mask = np.asarray(mask)
        return MatchSet(self.src[mask], self.pred[mask], self.confidence[mask], self.unmatched[mask],
                        None if self.gt is None else self.gt[mask], dict(self.meta))


def argmax_match(p: ProbMapping) -> MatchSet:
    P = p.spatial()
    best = P.argmax(axis=0)  # first maximum wins
    conf = P[best, np.arange(P.shape[1])]
    nt = p.n_target
    unmatched = best == nt if p.has_unmatched_state else np.zeros(P.shape[1], bool)
    th, tw = p.target_grid
    pred = np.stack([best % tw, best // tw], -1).astype(np.float64)
    pred[unmatched] = np.nan
    return MatchSet(cell_coords(*p.source_grid), pred, conf, unmatched)


def soft_argmax_match(p: ProbMapping) -> MatchSet:
    P = p.spatial()
    nt = p.n_target
    coords = cell_coords(*p.target_grid)
    spatial = P[:nt]
    mass = spatial.sum(axis=0)
    if p.has_unmatched_state:
        conf = 1.0 - P[nt]
        unmatched = mass < 1e-12
    else:
        conf = P.max(axis=0)
        unmatched = np.zeros(P.shape[1], bool)
    safe = np.where(unmatched, 1.0, mass)
    pred = (coords.T @ spatial / safe).T
    pred[unmatched] = np.nan
    return MatchSet(cell_coords(*p.source_grid), pred, conf, unmatched)


# ---------------------------------------------------------------------------
# persistence


def save_prob_mapping(path, p: ProbMapping):
    flags = int(p.has_unmatched_state) | (int(p.has_unmatched_column) << 1)
    write_pwim(path, p.array, flags=flags, reserved=(p.target_grid[1], p.source_grid[1]))


def load_prob_mapping(path) -> ProbMapping:
    arr, hdr = read_pwim(path, with_header=True)
    arr = arr[..., 0].astype(np.float64)
    unmatched = bool(hdr["flags"] & 1)
    ucol = bool(hdr["flags"] & 2)
    tw, sw = hdr["reserved"]
    nt = arr.shape[0] - int(unmatched)
    ns = arr.shape[1] - int(ucol)
    return ProbMapping(Tensor(arr), (nt // tw, tw), (ns // sw, sw), unmatched, ucol)
