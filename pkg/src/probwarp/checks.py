"""Gradient checks for every differentiable op and the two composite objectives.

All checks run in float64 on small random instances. Composite objectives use
a toy encoder on a 4x4 feature grid; their data-dependent weights (loss
ratios, visibility masks) are measured once and then frozen so the finite
differences see one fixed function.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ndgraph as nd
from .model import BatchItem, Encoder, TrainConfig, build_loss
from .ndgraph import Tensor
from .warp import WarpConfig, build_triplet, sample_warp

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    kind: str          # "primitive" or "composite"
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def ok(self):
        return self.max_rel_error < self.tolerance


def _param(rng, *shape, low=None):
    x = rng.normal(size=shape) if low is None else rng.uniform(low, 1.0, shape)
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _weighted(out, w):
    """Reduce any output to a scalar with fixed random weights."""
    return nd.sum_all(nd.mul(out, Tensor(w)))


def primitive_cases(rng):
    """(name, builder, params) triples; builders map params to a scalar."""
    cases = []

    def add_case(name, fn, params, out_shape=None):
        w = rng.normal(size=out_shape) if out_shape is not None else None
        if w is None:
            cases.append((name, fn, params))
        else:
            cases.append((name, lambda ps, fn=fn, w=w: _weighted(fn(ps), w), params))

    A, B = _param(rng, 4, 3), _param(rng, 3, 5)
    add_case("matmul", lambda p: nd.matmul(p[0], p[1]), [A, B], (4, 5))
    add_case("transpose", lambda p: nd.transpose(p[0]), [_param(rng, 3, 4)], (4, 3))
    add_case("reshape", lambda p: nd.reshape(p[0], (2, 6)), [_param(rng, 3, 4)], (2, 6))
    add_case("take_columns", lambda p: nd.take_columns(p[0], [2, 0, 2]), [_param(rng, 3, 4)], (3, 3))
    add_case("take_rows", lambda p: nd.take_rows(p[0], [1, 1, 3]), [_param(rng, 4, 3)], (3, 3))
    add_case("append_row", lambda p: nd.append_row(p[0], p[1]), [_param(rng, 3, 4), _param(rng)], (4, 4))
    e = np.zeros(3)
    e[-1] = 1.0
    add_case("append_constant_column", lambda p: nd.append_constant_column(p[0], e), [_param(rng, 3, 4)], (3, 5))
    add_case("add", lambda p: nd.add(p[0], p[1]), [_param(rng, 3, 4), _param(rng, 3, 4)], (3, 4))
    add_case("sub", lambda p: nd.sub(p[0], p[1]), [_param(rng, 3, 4), _param(rng, 3, 4)], (3, 4))
    add_case("mul", lambda p: nd.mul(p[0], p[1]), [_param(rng, 3, 4), _param(rng, 3, 4)], (3, 4))
    add_case("scale", lambda p: nd.scale(p[0], -2.5), [_param(rng, 3, 4)], (3, 4))
    # keep relu inputs away from the kink
    r = rng.normal(size=(3, 4))
    r = np.where(np.abs(r) < 0.1, 0.5, r)
    add_case("relu", lambda p: nd.relu(p[0]), [Tensor(r, requires_grad=True)], (3, 4))
    add_case("sqrt", lambda p: nd.sqrt(p[0]), [_param(rng, 3, 4, low=0.2)], (3, 4))
    add_case("log", lambda p: nd.log(p[0]), [_param(rng, 3, 4, low=0.2)], (3, 4))
    add_case("sum_all", lambda p: nd.scale(nd.sum_all(p[0]), 1.5), [_param(rng, 3, 4)])
    add_case("sum_axis", lambda p: nd.sum_axis(p[0], 1), [_param(rng, 3, 4)], (3,))
    m = rng.permutation(12).reshape(3, 4).astype(np.float64)   # distinct maxima
    add_case("max_axis0", lambda p: nd.max_axis0(p[0]), [Tensor(m, requires_grad=True)], (4,))
    add_case("softmax_columns", lambda p: nd.softmax_columns(p[0], 0.5), [_param(rng, 5, 4)], (5, 4))
    add_case("log_softmax_columns", lambda p: nd.log_softmax_columns(p[0], 0.5), [_param(rng, 5, 4)], (5, 4))
    T = rng.dirichlet(np.ones(5), 4).T
    cw = rng.uniform(0, 1, 4)
    add_case("ce_with_constant_target",
             lambda p: nd.ce_with_constant_target(nd.softmax_columns(p[0], 0.5), T, cw), [_param(rng, 5, 4)])
    add_case("ce_with_log_probs",
             lambda p: nd.ce_with_log_probs(nd.log_softmax_columns(p[0], 0.5), T, cw), [_param(rng, 5, 4)])
    add_case("bce_with_constant_target",
             lambda p: nd.bce_with_constant_target(p[0], 0.9), [_param(rng, 1, 4, low=0.1)])
    add_case("bce_bin_from_scores", lambda p: nd.bce_bin_from_scores(p[0], 0.5, 4, 0.9), [_param(rng, 5, 4)])
    add_case("l2_normalize_channels", lambda p: nd.l2_normalize_channels(p[0]), [_param(rng, 3, 2, 2)],
             (3, 2, 2))
    add_case("conv2d_stride1", lambda p: nd.conv2d(p[0], p[1], 1), [_param(rng, 2, 5, 5), _param(rng, 3, 2, 3, 3)],
             (3, 5, 5))
    add_case("conv2d_stride2_batched", lambda p: nd.conv2d(p[0], p[1], 2),
             [_param(rng, 2, 2, 6, 6), _param(rng, 3, 2, 3, 3)], (2, 3, 3, 3))
    return cases


def _toy_batch(rng, n=2, size=16):
    wcfg = WarpConfig(resize_size=size, crop_size=size)
    batch = []
    for _ in range(n):
        img_i = rng.uniform(0, 1, (size, size, 3))
        img_j = np.clip(img_i + rng.normal(0, 0.1, img_i.shape), 0, 1)
        img_a = rng.uniform(0, 1, (size, size, 3))
        trip = build_triplet(img_i, img_j, sample_warp(rng, wcfg, size, size), size)
        kps = [(rng.uniform(0, size - 1, 2), rng.uniform(0, size - 1, 2)) for _ in range(3)]
        batch.append(BatchItem(trip, (img_i, img_a), kps))
    return batch


def composite_cases(rng, temperature=1.0 / 50.0):
    """Weak and strong objectives on a 4x4 grid with frozen weights and masks."""
    cases = []
    for objective, occlusion in (("weak", True), ("strong", False)):
        cfg = TrainConfig(objective=objective, occlusion=occlusion, temperature=temperature, feature_dim=4)
        enc = Encoder(d=4, hidden=4, occlusion=cfg.uses_bin, z_init=0.3,
                      seed=int(rng.integers(1 << 16)), dtype=np.float64)
        batch = _toy_batch(rng)
        with nd.Graph():
            ref = build_loss(enc, batch, cfg)
        lambdas, masks = dict(ref.lambdas), ref.extras["masks"]
        params = enc.parameters()

        def builder(ps, enc=enc, batch=batch, cfg=cfg, lambdas=lambdas, masks=masks):
            return build_loss(enc, batch, cfg, lambdas, masks).total

        cases.append((f"{objective}_objective", builder, params))
    return cases


def run_gradchecks(seed=0, include_composites=True):
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, params in primitive_cases(rng):
        t = time.perf_counter()
        err = nd.gradcheck(fn, params, step=1e-6, floor=1e-6)
        results.append(CheckResult(name, "primitive", err, PRIMITIVE_TOL, time.perf_counter() - t))
    if include_composites:
        for name, fn, params in composite_cases(rng):
            t = time.perf_counter()
            err = nd.gradcheck(fn, params, step=1e-6, floor=1e-6)
            results.append(CheckResult(name, "composite", err, COMPOSITE_TOL, time.perf_counter() - t))
    return results


def format_results(results) -> str:
    lines = [f"{'check':<28} {'kind':<10} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<28} {r.kind:<10} {r.max_rel_error:12.3e}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
