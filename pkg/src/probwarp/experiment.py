"""Training loop and evaluation over a synthetic pair corpus."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evalkit
from .model import (Adam, BatchItem, Encoder, TrainConfig, checkpoint_bytes, images_to_tensor,
                    load_checkpoint, predict, take_item, train_step)
from .ndgraph import ParameterError
from .warp import WarpConfig, build_triplet, crop_image, crop_offset, crop_warp, downscale_warp, sample_warp

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "vis_pw_bi", "pwarp_sup", "pneg", "kp",
              "lambda_psup", "lambda_pneg", "lambda_kp", "total")


def _swap(rng, a, b):
    return (b, a) if rng.random() < 0.5 else (a, b)


def cropped_keypoints(kp_i, kp_j, size, s):
    off = crop_offset(size, s)
    out = []
    for pi, pj in zip(np.asarray(kp_i) - off, np.asarray(kp_j) - off):
        if np.all((pi >= 0) & (pi <= s - 1)) and np.all((pj >= 0) & (pj <= s - 1)):
            out.append((pj, pi))
    return out


@dataclass
class Corpus:
    positives: list
    negatives: list

    @classmethod
    def from_pairs(cls, pairs, split="train"):
        sel = [p for p in pairs if p.split == split]
        return cls([p for p in sel if p.positive], [p for p in sel if not p.positive])


def make_batch(corpus: Corpus, step: int, cfg: TrainConfig, wcfg: WarpConfig):
    """Deterministic batch for ``step``: positive triplets plus negative pairs."""
    if not corpus.positives:
        raise ParameterError("no positive training pairs")
    rng = np.random.default_rng([cfg.seed, 7, step])
    n = min(cfg.batch_size, len(corpus.positives))
    picks = rng.choice(len(corpus.positives), n, replace=False)
    needs_neg = cfg.objective in ("max_score", "min_entropy") or cfg.uses_bin
    n_neg = int(round(cfg.neg_per_pos * n)) if needs_neg and corpus.negatives else 0
    s = wcfg.crop_size
    items = []
    for k in picks:
        p = corpus.positives[k]
        (img_i, kp_i), (img_j, kp_j) = _swap(rng, (p.image_a, p.kp_a), (p.image_b, p.kp_b))
        size = img_i.shape[0]
        warp = sample_warp(rng, wcfg, size, size)
        trip = build_triplet(img_i, img_j, warp, s, rng)
        items.append(BatchItem(trip, None, cropped_keypoints(kp_i, kp_j, size, s)))
    for k, idx in enumerate(rng.choice(len(corpus.negatives), n_neg, replace=n_neg > len(corpus.negatives))
                            if n_neg else []):
        p = corpus.negatives[idx]
        img_i, img_a = _swap(rng, p.image_a, p.image_b)
        items[k % n].negative = (crop_image(img_i, s), crop_image(img_a, s))
    return items


def _fmt(v):
    return f"{v:.8g}" if isinstance(v, float) else str(v)


def train(cfg: TrainConfig, wcfg: WarpConfig, corpus: Corpus, out_dir=None, resume=None,
          checkpoint_every=0, callback=None):
    """Run (or resume) training; returns (encoder, optimizer, list of report rows)."""
    enc = Encoder(d=cfg.feature_dim, occlusion=cfg.uses_bin, z_init=cfg.z_init, seed=cfg.seed)
    opt = Adam(enc.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    start = 0
    if resume is not None:
        start = load_checkpoint(resume, enc, opt)
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "logs").mkdir(parents=True, exist_ok=True)
        log_path = out / "logs" / "train.csv"
        if resume is not None and log_path.exists():
            with open(log_path) as f:
                kept = [r for r in csv.reader(f)][1:]
            rows = [r for r in kept if int(r[0]) < start]
    for step in range(start, cfg.steps):
        lr = cfg.lr * (0.5 if cfg.lr_halve_at and step >= cfg.lr_halve_at else 1.0)
        batch = make_batch(corpus, step, cfg, wcfg)
        rep = train_step(enc, opt, batch, cfg, lr)
        rows.append([_fmt(v) for v in rep.row(step)])
        if callback is not None:
            callback(step, rep, enc)
        if out is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            (out / "checkpoints" / f"step_{step + 1:06d}.pwrc").write_bytes(checkpoint_bytes(enc, opt, step + 1))
    if out is not None:
        (out / "checkpoints" / "final.pwrc").write_bytes(checkpoint_bytes(enc, opt, cfg.steps))
        with open(out / "logs" / "train.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LOG_HEADER)
            w.writerows(rows)
    return enc, opt, rows


# ---------------------------------------------------------------------------
# evaluation


def encode_images(enc: Encoder, images, chunk=32):
    feats = []
    for k in range(0, len(images), chunk):
        f = enc.forward(images_to_tensor(images[k:k + chunk], enc.dtype))
        feats += [take_item(f, i) for i in range(f.shape[0])]
    return feats


def pair_mapping(enc, f_a, f_b, temperature):
    """P_{A <- B}: distribution over cells of image a for each cell of image b."""
    return predict(enc, f_a, f_b, temperature, enc.z is not None)


def _pair_metrics(args):
    p_ab, pair, s, alphas, temperature = args
    grid = p_ab.source_grid
    gt = downscale_warp(crop_warp(pair.gt_map_ab, s), grid[1], grid[0])
    if not gt.valid.any():
        return None
    off = crop_offset(pair.image_a.shape[0], s)
    dims = (s, s)
    mask_a = crop_image(pair.mask_a, s)
    bbox = evalkit.bbox_dims(mask_a) if mask_a.any() else dims
    res = {"dense": {}, "dense_soft": {}, "kp": {}, "n_kp": 0}
    m = evalkit.dense_matches(p_ab, gt, "argmax", dims)
    ms = evalkit.dense_matches(p_ab, gt, "soft_argmax", dims)
    for a in alphas:
        res["dense"][("image", a)] = evalkit.pck(m, a, dims)
        res["dense"][("bbox", a)] = evalkit.pck(m, a, bbox)
        res["dense_soft"][("image", a)] = evalkit.pck(ms, a, dims)
    kps = cropped_keypoints(pair.kp_a, pair.kp_b, pair.image_a.shape[0], s)
    if kps:
        src = np.array([pb for pb, _ in kps])
        tgt = np.array([pa for _, pa in kps])
        am = evalkit.extract(p_ab, "argmax")
        cells = evalkit.grid_to_pixels(am.src, grid, dims)
        nearest = np.argmin(((src[:, None] - cells[None]) ** 2).sum(-1), axis=1)
        pred = evalkit.grid_to_pixels(am.pred[nearest], p_ab.target_grid, dims)
        km = type(am)(src, pred, am.confidence[nearest], am.unmatched[nearest], tgt)
        for a in alphas:
            res["kp"][("image", a)] = evalkit.pck(km, a, dims)
            res["kp"][("bbox", a)] = evalkit.pck(km, a, bbox)
        res["n_kp"] = len(kps)
    if len(m) >= 5:
        res["sparsification"] = evalkit.sparsification(m, 0.10, dims)
    return res


def evaluate(enc: Encoder, pairs, split="test", temperature=1.0 / 50.0, crop=56,
             alphas=evalkit.DEFAULT_ALPHAS, threads=1, checkpoint_name="model"):
    """Dense/keypoint PCK, AUSE and negative-pair unmatched probability on one split."""
    pos = [p for p in pairs if p.split == split and p.positive]
    neg = [p for p in pairs if p.split == split and not p.positive]
    feats = encode_images(enc, [crop_image(p.image_a, crop) for p in pos]
                          + [crop_image(p.image_b, crop) for p in pos])
    maps = [pair_mapping(enc, feats[k], feats[len(pos) + k], temperature) for k in range(len(pos))]
    jobs = [(maps[k], pos[k], crop, alphas, temperature) for k in range(len(pos))]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            per_pair = list(ex.map(_pair_metrics, jobs))
    else:
        per_pair = [_pair_metrics(j) for j in jobs]
    per_pair = [r for r in per_pair if r is not None]
    rows = []
    summary = {}

    def add(metric, alpha, ref, value):
        rows.append({"checkpoint": checkpoint_name, "metric": metric, "alpha": alpha,
                     "reference": ref, "value": value})
        summary[(metric, alpha, ref)] = value

    for metric, key in (("dense_pck", "dense"), ("dense_pck_soft_argmax", "dense_soft"), ("kp_pck", "kp")):
        for ref in ("image", "bbox"):
            for a in alphas:
                vals = [r[key][(ref, a)] for r in per_pair if (ref, a) in r[key]]
                if vals:
                    add(metric, a, ref, float(np.mean(vals)))
    curves = {}
    sp = [r["sparsification"] for r in per_pair if "sparsification" in r]
    if sp:
        avg = evalkit.average_sparsification(sp)
        add("ause", 0.10, "image", avg.ause)
        add("ause_mean_per_pair", 0.10, "image", avg.extras["mean_pair_ause"])
        curves[checkpoint_name] = avg
    if neg and enc.z is not None:
        nf = encode_images(enc, [crop_image(p.image_a, crop) for p in neg]
                           + [crop_image(p.image_b, crop) for p in neg])
        vals = [pair_mapping(enc, nf[k], nf[len(neg) + k], temperature).unmatched_probs().mean()
                for k in range(len(neg))]
        add("neg_unmatched_prob", None, "", float(np.mean(vals)))
    if pos and enc.z is not None:
        vals = [m.unmatched_probs().mean() for m in maps]
        add("pos_unmatched_prob", None, "", float(np.mean(vals)))
    return {"rows": rows, "curves": curves, "summary": summary}
