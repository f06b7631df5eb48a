"""Training objectives on probabilistic mappings.

Every loss is normalized by its number of active columns so that the
ratio-based weights do not depend on the grid size. Loss weights computed
from other losses (``lambda_psup``, ``lambda_kp``) use detached values.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import ndgraph as nd
from .ndgraph import ContractError, DimensionError, ParameterError, Tensor
from .probmap import ProbMapping, cell_coords, compose, smooth_columns

log = logging.getLogger(__name__)

LAMBDA_MIN, LAMBDA_MAX = 1e-3, 1e3
COMPONENTS = ("vis_pw_bi", "pwarp_sup", "pneg", "kp")
LAMBDAS = ("lambda_psup", "lambda_pneg", "lambda_kp")


@dataclass
class VisibilityMask:
    flags: np.ndarray
    gamma: float
    empty: bool = False

    @property
    def count(self):
        return int(self.flags.sum())


@dataclass
class LossReport:
    components: dict
    lambdas: dict
    total: Tensor
    extras: dict = field(default_factory=dict)

    @property
    def total_value(self) -> float:
        return float(self.total.data)

    def row(self, step):
        vals = [self.components.get(k, 0.0) for k in COMPONENTS]
        lams = [self.lambdas.get(k, 0.0) for k in LAMBDAS]
        return [step, *vals, *lams, self.total_value]


@dataclass
class ObjectiveConfig:
    gamma: float = 0.7
    p_neg: float = 0.9
    lambda_pneg: float = 1.0
    use_visibility: bool = True
    use_pwarp_sup: bool = True
    use_pneg: bool = True
    kp_mode: str = "ce"


@dataclass
class TripletPrediction:
    """Predicted mappings for one (I, I', J) triplet plus its ground truth."""

    p_tj: ProbMapping       # I <- J
    p_js: ProbMapping       # J <- I'
    p_ts: ProbMapping       # I <- I'
    gt_onehot: ProbMapping
    gt_smooth: ProbMapping


def zero_like(ref: Tensor) -> Tensor:
    return nd.scale(nd.sum_all(ref), 0.0)


def ceil_fraction(gamma, n):
    return math.ceil(Fraction(str(gamma)) * n)


def estimate_visibility(p_comp: ProbMapping, gt: ProbMapping, gamma: float) -> VisibilityMask:
    """Keep the ceil(gamma * N) eligible source cells whose composed mapping
    puts the most mass on the known target."""
    if not 0 < gamma <= 1:
        raise ParameterError(f"gamma must lie in (0, 1], got {gamma}")
    ns = gt.n_source
    flags = np.zeros(ns, dtype=bool)
    eligible = np.nonzero(gt.valid)[0]
    if eligible.size == 0:
        log.warning("visibility mask: no eligible columns")
        return VisibilityMask(flags, gamma, empty=True)
    q = p_comp.array[gt.target_index[eligible], eligible]
    order = np.argsort(-q, kind="stable")
    k = ceil_fraction(gamma, eligible.size)
    flags[eligible[order[:k]]] = True
    return VisibilityMask(flags, gamma)


def _column_weights(flags, n_cols):
    w = np.zeros(n_cols)
    w[:len(flags)] = flags
    total = w.sum()
    return w / total if total > 0 else w


def masked_ce(pred: ProbMapping, gt: ProbMapping, flags) -> Tensor:
    if pred.array.shape != gt.array.shape:
        raise DimensionError(f"prediction {pred.array.shape} vs ground truth {gt.array.shape}")
    w = _column_weights(np.asarray(flags, dtype=np.float64), pred.array.shape[1])
    if not w.any():
        log.warning("cross-entropy over an empty column set")
        return zero_like(pred.probs)
    if pred.scores is not None:
        # exact log-softmax: no clamp, so gradients survive underflowed targets
        ns = pred.scores.shape[1]
        logp = nd.log_softmax_columns(pred.scores, pred.temperature)
        return nd.ce_with_log_probs(logp, gt.array[:, :ns], w[:ns])
    return nd.ce_with_constant_target(pred.probs, gt.array, w)


def pw_bipath_loss(p_tj: ProbMapping, p_js: ProbMapping, gt: ProbMapping, mask: VisibilityMask | None = None,
                   composed: ProbMapping | None = None) -> Tensor:
    """Cross-entropy between the composed mapping I <- J <- I' and the one-hot warp mapping."""
    comp = composed if composed is not None else compose(p_tj, p_js)
    flags = gt.valid if mask is None else mask.flags
    return masked_ce(comp, gt, flags)


def pwarp_sup_loss(p_ts: ProbMapping, gt: ProbMapping) -> Tensor:
    return masked_ce(p_ts, gt, gt.column_weights[:gt.n_source])


def pneg_loss(p_neg_map: ProbMapping, p_neg: float = 0.9) -> Tensor:
    """Mean binary cross-entropy pushing P(unmatched | i) toward ``p_neg``."""
    if not p_neg_map.has_unmatched_state:
        raise ContractError("negative-pair loss needs an unmatched state")
    if not 0 < p_neg < 1:
        raise ParameterError(f"p_neg must lie in (0, 1), got {p_neg}")
    ns = p_neg_map.n_source
    if p_neg_map.scores is not None:
        loss = nd.bce_bin_from_scores(p_neg_map.scores, p_neg_map.temperature, p_neg_map.n_target, p_neg)
        return nd.scale(loss, 1.0 / ns)
    row = nd.take_rows(p_neg_map.probs, [p_neg_map.n_target])
    if p_neg_map.has_unmatched_column:
        row = nd.take_columns(row, np.arange(ns))
    return nd.scale(nd.bce_with_constant_target(row, p_neg), 1.0 / ns)


def _nearest_cell(pt, grid):
    h, w = grid
    x = int(np.clip(np.rint(pt[0]), 0, w - 1))
    y = int(np.clip(np.rint(pt[1]), 0, h - 1))
    return y * w + x


def keypoint_loss(p: ProbMapping, kps, mode: str = "ce") -> Tensor:
    """Keypoint supervision; ``kps`` holds (source_point, target_point) pairs in cell units."""
    kps = list(kps)
    if not kps:
        raise ContractError("keypoint loss needs at least one keypoint")
    cols = [_nearest_cell(s, p.source_grid) for s, _ in kps]
    targets = np.array([t for _, t in kps], dtype=np.float64)
    picked = nd.take_columns(p.probs, cols)
    th, tw = p.target_grid
    k = len(kps)
    if mode == "ce":
        gt = np.zeros(picked.shape)
        gt[:th * tw] = smooth_columns(targets, th, tw)
        return nd.ce_with_constant_target(picked, gt, np.full(k, 1.0 / k))
    if mode == "epe":
        if p.has_unmatched_state:
            raise ContractError("EPE keypoint loss is defined for bin-free mappings")
        coords = Tensor(cell_coords(th, tw).T, dtype=p.probs.dtype)
        expect = nd.matmul(coords, picked)
        diff = nd.sub(expect, Tensor(targets.T, dtype=p.probs.dtype))
        dist = nd.sqrt(nd.sum_axis(nd.mul(diff, diff), 0))
        return nd.scale(nd.sum_all(dist), 1.0 / k)
    raise ParameterError(f"unknown keypoint loss mode {mode!r}")


def baseline_losses(p: ProbMapping, kind: str, sign: float = 1.0) -> Tensor:
    probs = p.probs
    if p.has_unmatched_column:
        probs = nd.take_columns(probs, np.arange(p.n_source))
    n = probs.shape[1]
    if kind == "max_score":
        val = nd.scale(nd.sum_all(nd.max_axis0(probs)), -1.0 / n)
    elif kind == "min_entropy":
        val = nd.scale(nd.sum_all(nd.mul(probs, nd.log(probs))), -1.0 / n)
    else:
        raise ParameterError(f"unknown baseline loss {kind!r}")
    return nd.scale(val, sign)


# ---------------------------------------------------------------------------
# composites


def ratio_weight(num, den):
    """Detached loss ratio clamped to [1e-3, 1e3]."""
    if den <= 0:
        return LAMBDA_MAX
    return float(np.clip(num / den, LAMBDA_MIN, LAMBDA_MAX))


def _val(t):
    return float(t.data)


def combine_weak(l_vis: Tensor, l_psup: Tensor | None, l_pneg: Tensor | None, lambda_pneg=1.0,
                 lambdas: dict | None = None) -> LossReport:
    comps = {"vis_pw_bi": _val(l_vis)}
    lams = {}
    total = l_vis
    if l_psup is not None:
        comps["pwarp_sup"] = _val(l_psup)
        lam = lambdas["lambda_psup"] if lambdas else ratio_weight(_val(l_vis), _val(l_psup))
        lams["lambda_psup"] = lam
        total = nd.add(total, nd.scale(l_psup, lam))
    if l_pneg is not None:
        comps["pneg"] = _val(l_pneg)
        lam = lambdas["lambda_pneg"] if lambdas else lambda_pneg
        lams["lambda_pneg"] = lam
        total = nd.add(total, nd.scale(l_pneg, lam))
    return LossReport(comps, lams, total)


def combine_strong(l_vis: Tensor, l_psup: Tensor, l_kp: Tensor, lambdas: dict | None = None) -> LossReport:
    if lambdas:
        lp, lk = lambdas["lambda_psup"], lambdas["lambda_kp"]
    else:
        lp = ratio_weight(_val(l_vis), _val(l_psup))
        lk = ratio_weight(lp * _val(l_psup) + _val(l_vis), _val(l_kp))
    total = nd.add(nd.add(l_vis, nd.scale(l_psup, lp)), nd.scale(l_kp, lk))
    comps = {"vis_pw_bi": _val(l_vis), "pwarp_sup": _val(l_psup), "kp": _val(l_kp)}
    return LossReport(comps, {"lambda_psup": lp, "lambda_kp": lk}, total)


def _mean(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = nd.add(acc, t)
    return nd.scale(acc, 1.0 / len(terms))


def _bipath_terms(triplets, cfg: ObjectiveConfig, masks):
    terms, used = [], []
    for k, t in enumerate(triplets):
        comp = compose(t.p_tj, t.p_js)
        if masks is not None:
            mask = masks[k]
        elif cfg.use_visibility:
            mask = estimate_visibility(comp, t.gt_onehot, cfg.gamma)
        else:
            mask = VisibilityMask(t.gt_onehot.valid.copy(), 1.0, not t.gt_onehot.valid.any())
        used.append(mask)
        terms.append(pw_bipath_loss(t.p_tj, t.p_js, t.gt_onehot, mask, composed=comp))
    return _mean(terms), used


def weak_objective(triplets, negatives, cfg: ObjectiveConfig | None = None, lambdas=None,
                   masks=None) -> LossReport:
    """Visibility-masked PW-bipath + ratio-weighted PWarp-supervision + PNeg.

    ``lambdas`` and ``masks`` freeze the data-dependent weights (used by the
    gradient checker so finite differences see the same objective).
    """
    cfg = cfg or ObjectiveConfig()
    if not triplets:
        raise ContractError("weak objective needs at least one triplet")
    l_vis, used = _bipath_terms(triplets, cfg, masks)
    l_psup = _mean([pwarp_sup_loss(t.p_ts, t.gt_smooth) for t in triplets]) if cfg.use_pwarp_sup else None
    l_pneg = None
    if cfg.use_pneg and negatives:
        l_pneg = _mean([pneg_loss(p, cfg.p_neg) for p in negatives])
    rep = combine_weak(l_vis, l_psup, l_pneg, cfg.lambda_pneg, lambdas)
    rep.extras["masks"] = used
    return rep


def strong_objective(triplets, keypoints, cfg: ObjectiveConfig | None = None, lambdas=None,
                     masks=None) -> LossReport:
    """``keypoints[k]`` lists (J point, I point) pairs in cell units for triplet k."""
    cfg = cfg or ObjectiveConfig()
    if any(t.p_tj.has_unmatched_state for t in triplets):
        raise ContractError("the strongly supervised objective runs without an unmatched state")
    l_vis, used = _bipath_terms(triplets, cfg, masks)
    l_psup = _mean([pwarp_sup_loss(t.p_ts, t.gt_smooth) for t in triplets])
    kp_terms = [keypoint_loss(t.p_tj, kps, cfg.kp_mode) for t, kps in zip(triplets, keypoints) if len(kps)]
    if not kp_terms:
        raise ContractError("strong objective needs keypoints")
    rep = combine_strong(l_vis, l_psup, _mean(kp_terms), lambdas)
    rep.extras["masks"] = used
    return rep


def warp_sup_only_objective(triplets) -> LossReport:
    l_psup = _mean([pwarp_sup_loss(t.p_ts, t.gt_smooth) for t in triplets])
    return LossReport({"pwarp_sup": _val(l_psup)}, {}, l_psup)


def baseline_objective(kind, positives, negatives) -> LossReport:
    """Prior-work comparison: sharpen positive pairs, flatten negative pairs."""
    pos = _mean([baseline_losses(p, kind, 1.0) for p in positives])
    total = pos
    if negatives:
        total = nd.add(pos, _mean([baseline_losses(p, kind, -1.0) for p in negatives]))
    return LossReport({kind: _val(total)}, {}, total)
