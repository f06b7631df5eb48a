"""PCK, dense transfer accuracy, sparsification curves / AUSE, and report files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndgraph import ContractError, ParameterError
from .probmap import MatchSet, ProbMapping, argmax_match, soft_argmax_match

DEFAULT_ALPHAS = (0.05, 0.10, 0.15)
REMOVAL_FRACTIONS = np.round(np.arange(50) * 0.02, 10)
CSV_HEADER = ("checkpoint", "metric", "alpha", "reference", "value")


@dataclass
class PckConfig:
    alphas: tuple = DEFAULT_ALPHAS
    reference: str = "image"

    def __post_init__(self):
        if any(not 0 < a <= 1 for a in self.alphas):
            raise ParameterError(f"alphas must lie in (0, 1]: {self.alphas}")
        if self.reference not in ("image", "bbox"):
            raise ParameterError(f"reference must be image or bbox, got {self.reference!r}")


@dataclass
class SparsificationResult:
    fractions_removed: np.ndarray
    pck_curve: np.ndarray
    oracle_curve: np.ndarray
    error_curve: np.ndarray
    ause: float
    extras: dict = field(default_factory=dict)


def match_errors(matches: MatchSet) -> np.ndarray:
    """Euclidean error per match; unmatched predictions get +inf."""
    if matches.gt is None:
        raise ContractError("matches carry no ground truth")
    err = np.linalg.norm(np.asarray(matches.pred) - np.asarray(matches.gt), axis=-1)
    return np.where(matches.unmatched | ~np.isfinite(err), np.inf, err)


def pck(matches: MatchSet, alpha: float, ref_dims) -> float:
    if len(matches) == 0:
        raise ContractError("PCK of an empty match set")
    return float((match_errors(matches) <= alpha * max(ref_dims)).mean())


def grid_to_pixels(pts, grid_dims, image_dims):
    """Cell coordinates -> pixel coordinates of cell centres."""
    gh, gw = grid_dims
    h, w = image_dims
    pts = np.asarray(pts, dtype=np.float64)
    return np.stack([(pts[..., 0] + 0.5) * w / gw - 0.5, (pts[..., 1] + 0.5) * h / gh - 0.5], -1)


def extract(p: ProbMapping, extractor: str) -> MatchSet:
    if extractor == "argmax":
        return argmax_match(p)
    if extractor == "soft_argmax":
        return soft_argmax_match(p)
    raise ParameterError(f"unknown extractor {extractor!r}")


def dense_matches(p: ProbMapping, gt_map, extractor="argmax", image_dims=None) -> MatchSet:
    """Matches for every valid source cell, in pixel units of ``image_dims``."""
    if tuple(p.source_grid) != (gt_map.height, gt_map.width):
        raise ContractError(f"mapping source grid {p.source_grid} vs gt {(gt_map.height, gt_map.width)}")
    valid = gt_map.valid.reshape(-1)
    if not valid.any():
        raise ContractError("no valid ground-truth cells")
    m = extract(p, extractor)
    m.gt = gt_map.map.reshape(-1, 2).copy()
    m = m.subset(valid)
    if image_dims is not None:
        m.src = grid_to_pixels(m.src, p.source_grid, image_dims)
        m.pred = grid_to_pixels(m.pred, p.target_grid, image_dims)
        m.gt = grid_to_pixels(m.gt, p.target_grid, image_dims)
    return m


def dense_transfer_pck(p: ProbMapping, gt_map, alpha, ref_dims, extractor="argmax", image_dims=None) -> float:
    """PCK over all valid (foreground) cells of a grid-resolution ground-truth map.

    Coordinates are scaled from the grid to ``image_dims`` (default ``ref_dims``)
    before thresholding at ``alpha * max(ref_dims)``.
    """
    m = dense_matches(p, gt_map, extractor, image_dims or ref_dims)
    return pck(m, alpha, ref_dims)


def _pck_after_removal(order_remove, correct, fractions):
    n = len(correct)
    out = np.empty(len(fractions))
    for k, f in enumerate(fractions):
        keep = order_remove[int(np.floor(f * n + 1e-9)):]
        out[k] = correct[keep].mean()
    return out


def sparsification(matches: MatchSet, alpha, ref_dims, fractions=REMOVAL_FRACTIONS) -> SparsificationResult:
    """Remove the least confident matches first and track PCK of the rest."""
    n = len(matches)
    if n < 5:
        raise ContractError(f"sparsification needs at least 5 matches, got {n}")
    if matches.confidence is None or len(matches.confidence) != n:
        raise ContractError("every match needs a confidence")
    err = match_errors(matches)
    correct = (err <= alpha * max(ref_dims)).astype(np.float64)
    fractions = np.asarray(fractions, dtype=np.float64)
    by_conf = np.argsort(np.asarray(matches.confidence), kind="stable")
    by_err = np.argsort(-err, kind="stable")
    actual = _pck_after_removal(by_conf, correct, fractions)
    oracle = _pck_after_removal(by_err, correct, fractions)
    error = oracle - actual
    return SparsificationResult(fractions, actual, oracle, error, float(np.trapezoid(error, fractions)))


def average_sparsification(results) -> SparsificationResult:
    """Average per-pair curves; AUSE of the mean curve plus the mean per-pair AUSE."""
    results = list(results)
    if not results:
        raise ContractError("nothing to average")
    fr = results[0].fractions_removed
    pc = np.mean([r.pck_curve for r in results], 0)
    oc = np.mean([r.oracle_curve for r in results], 0)
    ec = np.mean([r.error_curve for r in results], 0)
    out = SparsificationResult(fr, pc, oc, ec, float(np.trapezoid(ec, fr)))
    out.extras["mean_pair_ause"] = float(np.mean([r.ause for r in results]))
    return out


def bbox_dims(mask) -> tuple:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ContractError("empty foreground")
    return (int(ys.max() - ys.min() + 1), int(xs.max() - xs.min() + 1))


# ---------------------------------------------------------------------------
# reports


def fmt(v) -> str:
    if v is None or v == "":
        return ""
    return f"{float(v):.6g}"


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r["checkpoint"], r["metric"], fmt(r.get("alpha")), r.get("reference", ""), fmt(r["value"])])
    return buf.getvalue()


def curves_svg(curves: dict, width=480, height=320) -> str:
    """Sparsification / oracle / error curves as hand-written SVG polylines."""
    pad = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2:.1f}" y="{height - 8}" font-size="12" text-anchor="middle">'
             f'fraction removed</text>']
    sx = width - 2 * pad
    sy = height - 2 * pad
    for k, (name, (xs, ys)) in enumerate(sorted(curves.items())):
        pts = " ".join(f"{pad + x * sx:.2f},{height - pad - y * sy:.2f}"
                       for x, y in zip(xs, np.clip(ys, 0, 1)))
        c = colors[k % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 150}" y="{pad + 14 * k}" font-size="11" fill="{c}">'
                     f'{_xml_escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _xml_escape(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def report(results, out_dir):
    """Write metrics.csv and curves.svg.

    ``results`` maps ``rows`` to metric dicts and ``curves`` to a
    {name: SparsificationResult} mapping.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(results.get("rows", [])))
    curves = {}
    for name, res in results.get("curves", {}).items():
        curves[f"{name} actual"] = (res.fractions_removed, res.pck_curve)
        curves[f"{name} oracle"] = (res.fractions_removed, res.oracle_curve)
        curves[f"{name} error"] = (res.fractions_removed, res.error_curve)
    (out / "curves.svg").write_text(curves_svg(curves))
    return out / "metrics.csv", out / "curves.svg"
