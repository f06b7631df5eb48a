"""Procedural semantic-matching corpus with exact dense ground truth.

Each class is a star-shaped blob split into angular parts; every part has its
own striped texture. Instances are similarity placements of a template over
value-noise backgrounds with distractor blobs borrowed from other classes.
Because placements are analytic, the dense b -> a mapping is exact.
"""

from __future__ import annotations

import colorsys
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imageio import read_pwim, write_pwim
from .ndgraph import ParameterError
from .warp import DenseWarp, in_bounds, jitter, pixel_grid

SPLITS = ("train", "val", "test")


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_classes: int = 4
    n_keypoints: int = 8
    base_radius: float = 18.0
    scale_range: tuple = (0.6, 1.4)
    rotation_range: float = math.pi / 6
    min_inside: float = 0.8
    coverage_range: tuple = (0.15, 0.6)
    n_distractors: tuple = (1, 2)
    hue_margin: float = 0.1
    part_hue_spread: float = 0.35
    stripe_contrast: float = 0.28
    instance_color_gain: float = 0.0
    instance_brightness: float = 0.5     # per-instance scalar gain 1 + U(-b, b)
    jitter: bool = True


@dataclass
class ClassTemplate:
    class_id: int
    hue: float
    radius_coef: np.ndarray    # (k, 3): harmonic, amplitude, phase
    part_offset: float
    part_colors: np.ndarray    # (n_parts, 3) RGB
    stripe_dirs: np.ndarray    # (n_parts, 2)
    stripe_freq: np.ndarray    # (n_parts,)
    stripe_phase: np.ndarray   # (n_parts,)
    landmarks: np.ndarray      # (K, 2) template coordinates
    stripe_contrast: float = 0.28

    @property
    def n_parts(self):
        return len(self.part_colors)

    def radius(self, theta):
        r = np.ones_like(theta)
        for k, amp, ph in self.radius_coef:
            r = r + amp * np.cos(k * theta + ph)
        return r

    def mask(self, q):
        q = np.asarray(q, dtype=np.float64)
        theta = np.arctan2(q[..., 1], q[..., 0])
        return np.hypot(q[..., 0], q[..., 1]) <= self.radius(theta)

    def part(self, q):
        theta = np.arctan2(q[..., 1], q[..., 0])
        a = np.mod(theta - self.part_offset, 2 * np.pi)
        return np.minimum((a / (2 * np.pi / self.n_parts)).astype(np.int64), self.n_parts - 1)

    def color(self, q):
        q = np.asarray(q, dtype=np.float64)
        part = self.part(q)
        proj = (q * self.stripe_dirs[part]).sum(-1)
        wave = np.sin(2 * np.pi * self.stripe_freq[part] * proj + self.stripe_phase[part])
        c = self.stripe_contrast
        return self.part_colors[part] * (1.0 - c + c * wave)[..., None]

    def texture_pixels(self, n=48):
        """Texture colours sampled on a regular grid inside the silhouette."""
        g = np.linspace(-1.5, 1.5, n)
        q = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
        return self.color(q[self.mask(q)])


def mean_hue(rgb):
    """Circular mean hue in [0, 1) of an (n, 3) array of RGB colours."""
    hues = np.array([colorsys.rgb_to_hsv(*c)[0] for c in np.clip(rgb, 0, 1)])
    ang = 2 * np.pi * hues
    return float(np.mod(np.arctan2(np.sin(ang).mean(), np.cos(ang).mean()) / (2 * np.pi), 1.0))


def hue_distance(a, b):
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


def make_templates(rng: np.random.Generator, n_classes: int, n_keypoints: int = 8,
                   part_hue_spread: float = 0.35, stripe_contrast: float = 0.28) -> list:
    if n_classes < 2:
        raise ParameterError("at least two classes are needed (negatives pair different classes)")
    templates = []
    for c in range(n_classes):
        hue = (c + rng.uniform(-0.1, 0.1)) / n_classes % 1.0
        n_parts = int(rng.integers(4, 9))
        coef = np.array([[k, rng.uniform(0.0, 0.12), rng.uniform(0, 2 * np.pi)] for k in (2, 3, 4)])
        colors = []
        for p in range(n_parts):
            h = (hue + rng.uniform(-part_hue_spread, part_hue_spread) / n_classes) % 1.0
            s = rng.uniform(0.45, 1.0)
            v = 0.35 + 0.6 * ((p * 0.618 + rng.uniform(0, 0.2)) % 1.0)
            colors.append(colorsys.hsv_to_rgb(h, s, v))
        ang = rng.uniform(0, np.pi, n_parts)
        t = ClassTemplate(
            class_id=c, hue=hue, radius_coef=coef, part_offset=rng.uniform(0, 2 * np.pi),
            part_colors=np.array(colors), stripe_dirs=np.stack([np.cos(ang), np.sin(ang)], -1),
            stripe_freq=rng.uniform(0.8, 2.0, n_parts), stripe_phase=rng.uniform(0, 2 * np.pi, n_parts),
            landmarks=np.zeros((0, 2)), stripe_contrast=stripe_contrast)
        t.landmarks = _landmarks(t, n_keypoints)
        templates.append(t)
    return templates


def _landmarks(t: ClassTemplate, k):
    pts = []
    width = 2 * np.pi / t.n_parts
    for level in (0.55, 0.85, 0.3, 0.7):
        for p in range(t.n_parts):
            theta = t.part_offset + (p + 0.5) * width
            r = level * t.radius(np.array(theta))
            pts.append([r * np.cos(theta), r * np.sin(theta)])
            if len(pts) == k:
                return np.array(pts)
    raise ParameterError(f"too many keypoints requested ({k})")


# ---------------------------------------------------------------------------
# placements


def similarity(scale, angle, tx, ty):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[scale * c, -scale * s, tx], [scale * s, scale * c, ty], [0.0, 0.0, 1.0]])


def apply_h(T, pts):
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ T[:2, :2].T + T[:2, 2]


def _inside_fraction(t: ClassTemplate, T, size):
    g = np.linspace(-1.5, 1.5, 40)
    q = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    q = q[t.mask(q)]
    p = apply_h(T, q)
    return in_bounds(p, size, size).mean()


def place(rng, t: ClassTemplate, cfg: SynthConfig, max_tries=32):
    size = cfg.image_size
    for _ in range(max_tries):
        scale = cfg.base_radius * rng.uniform(*cfg.scale_range)
        angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
        tx, ty = rng.uniform(0, size - 1, 2)
        T = similarity(scale, angle, tx, ty)
        if _inside_fraction(t, T, size) < cfg.min_inside:
            continue
        cover = render_mask(t, T, size).mean()
        if cfg.coverage_range[0] <= cover <= cfg.coverage_range[1]:
            return T
    raise PlacementError(f"no acceptable placement after {max_tries} tries")


def render_mask(t: ClassTemplate, T, size):
    q = apply_h(np.linalg.inv(T), pixel_grid(size, size))
    return t.mask(q)


def background(rng, size):
    img = np.zeros((size, size, 3))
    for cells, amp in ((4, 1.0), (8, 0.5), (16, 0.25)):
        coarse = rng.uniform(0, 1, (cells + 1, cells + 1, 3))
        coarse = coarse * 0.35 + coarse.mean(-1, keepdims=True) * 0.65
        img += amp * ndimage.zoom(coarse, (size / (cells + 1), size / (cells + 1), 1), order=3,
                                  mode="nearest")[:size, :size]
    img /= 1.75
    return np.clip(0.15 + 0.7 * img, 0, 1)


def paint(img, t: ClassTemplate, T, gain=None):
    size = img.shape[0]
    q = apply_h(np.linalg.inv(T), pixel_grid(size, size))
    m = t.mask(q)
    col = t.color(q[m])
    img[m] = col if gain is None else np.clip(col * gain, 0, 1)
    return m


@dataclass
class InstancePair:
    index: int
    label: str
    image_a: np.ndarray
    image_b: np.ndarray
    class_a: int
    class_b: int
    fg_transform_a: np.ndarray
    fg_transform_b: np.ndarray
    mask_a: np.ndarray
    mask_b: np.ndarray
    kp_a: np.ndarray
    kp_b: np.ndarray
    split: str = "train"
    gt_map_ab: DenseWarp | None = field(default=None, repr=False)

    @property
    def positive(self):
        return self.label == "positive"


def gt_map(T_a, T_b, mask_b, size) -> DenseWarp:
    """Dense map from image b pixels to image a coordinates, valid on b's foreground."""
    M = T_a @ np.linalg.inv(T_b)
    m = apply_h(M, pixel_grid(size, size))
    valid = mask_b & in_bounds(m, size, size)
    return DenseWarp(size, size, m, valid, size, size, "instance", {"M": M})


def make_pair(rng, templates, positive: bool, cfg: SynthConfig = SynthConfig(), index: int = 0) -> InstancePair:
    if not templates:
        raise ParameterError("no templates")
    size = cfg.image_size
    ca = int(rng.integers(len(templates)))
    if positive:
        cb = ca
    else:
        cb = int((ca + 1 + rng.integers(len(templates) - 1)) % len(templates))
    ta, tb = templates[ca], templates[cb]
    Ta, Tb = place(rng, ta, cfg), place(rng, tb, cfg)
    imgs, masks = [], []
    for t, T in ((ta, Ta), (tb, Tb)):
        img = background(rng, size)
        others = [o for o in templates if o.class_id not in (ca, cb)] or \
                 [o for o in templates if o.class_id != t.class_id]
        for _ in range(int(rng.integers(cfg.n_distractors[0], cfg.n_distractors[1] + 1))):
            o = others[int(rng.integers(len(others)))]
            D = similarity(cfg.base_radius * rng.uniform(0.3, 0.5), rng.uniform(0, 2 * np.pi),
                           *rng.uniform(0, size - 1, 2))
            paint(img, o, D)
        gain = 1 + rng.uniform(-cfg.instance_color_gain, cfg.instance_color_gain, 3) if cfg.instance_color_gain else None
        if cfg.instance_brightness:
            b = 1 + rng.uniform(-cfg.instance_brightness, cfg.instance_brightness)
            gain = b if gain is None else gain * b
        masks.append(paint(img, t, T, gain))
        if cfg.jitter:
            img = jitter(rng, img)
        imgs.append(img.astype(np.float32))
    pair = InstancePair(index, "positive" if positive else "negative", imgs[0], imgs[1], ca, cb, Ta, Tb,
                        masks[0], masks[1], apply_h(Ta, ta.landmarks), apply_h(Tb, tb.landmarks))
    if positive:
        pair.gt_map_ab = gt_map(Ta, Tb, masks[1], size)
    return pair


# ---------------------------------------------------------------------------
# datasets


def split_of(rank, n):
    if rank < round(0.7 * n):
        return "train"
    if rank < round(0.85 * n):
        return "val"
    return "test"


class Dataset:
    """Deterministic, index-addressable stream of pairs.

    Labels are laid out by a seeded permutation; splits are 70/15/15 by
    index within each label.
    """

    def __init__(self, seed: int, n_pos: int, n_neg: int, cfg: SynthConfig = SynthConfig()):
        self.seed, self.cfg = seed, cfg
        self.templates = make_templates(np.random.default_rng([seed, 0xC1A55]), cfg.n_classes,
                                        cfg.n_keypoints, cfg.part_hue_spread, cfg.stripe_contrast)
        labels = np.array([True] * n_pos + [False] * n_neg)
        self.positive = labels[np.random.default_rng([seed, 0x1AB]).permutation(len(labels))]
        self.splits = [""] * len(labels)
        for flag, n in ((True, n_pos), (False, n_neg)):
            for rank, idx in enumerate(np.nonzero(self.positive == flag)[0]):
                self.splits[idx] = split_of(rank, n)

    def __len__(self):
        return len(self.positive)

    def __getitem__(self, idx) -> InstancePair:
        if not 0 <= idx < len(self):
            raise IndexError(idx)
        rng = np.random.default_rng([self.seed, 1, idx])
        pair = make_pair(rng, self.templates, bool(self.positive[idx]), self.cfg, idx)
        pair.split = self.splits[idx]
        return pair

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def indices(self, split=None, positive=None):
        return [i for i in range(len(self))
                if (split is None or self.splits[i] == split)
                and (positive is None or bool(self.positive[i]) == positive)]


def dataset(seed, n_pos, n_neg, cfg: SynthConfig = SynthConfig()) -> Dataset:
    return Dataset(seed, n_pos, n_neg, cfg)


def save_dataset(ds, out_dir, threads=1):
    """Write every pair as PWIM files plus a JSON-lines manifest.

    Pairs depend only on (seed, index), so generating them on a thread pool
    gives the same files as a serial run.
    """
    out = Path(out_dir)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    lines = []
    if threads > 1 and isinstance(ds, Dataset):
        with ThreadPoolExecutor(threads) as ex:
            pairs = list(ex.map(ds.__getitem__, range(len(ds))))
    else:
        pairs = ds
    for pair in pairs:
        stem = f"pairs/{pair.index:05d}"
        files = {}
        for key, arr in (("image_a", pair.image_a), ("image_b", pair.image_b),
                         ("mask_a", pair.mask_a.astype(np.float32)), ("mask_b", pair.mask_b.astype(np.float32))):
            files[key] = f"{stem}_{key}.pwim"
            write_pwim(out / files[key], arr)
        lines.append(json.dumps({
            "index": pair.index, "label": pair.label, "split": pair.split, **files,
            "class_a": pair.class_a, "class_b": pair.class_b,
            "transform_a": pair.fg_transform_a.tolist(), "transform_b": pair.fg_transform_b.tolist(),
            "keypoints_a": pair.kp_a.tolist(), "keypoints_b": pair.kp_b.tolist(),
        }, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return out / "manifest.jsonl"


def load_dataset(data_dir) -> list:
    root = Path(data_dir)
    pairs = []
    for line in (root / "manifest.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        mask_a = read_pwim(root / r["mask_a"])[..., 0] > 0.5
        mask_b = read_pwim(root / r["mask_b"])[..., 0] > 0.5
        Ta, Tb = np.array(r["transform_a"]), np.array(r["transform_b"])
        pair = InstancePair(r["index"], r["label"], read_pwim(root / r["image_a"]),
                            read_pwim(root / r["image_b"]), r["class_a"], r["class_b"], Ta, Tb,
                            mask_a, mask_b, np.array(r["keypoints_a"]), np.array(r["keypoints_b"]), r["split"])
        if pair.positive:
            pair.gt_map_ab = gt_map(Ta, Tb, mask_b, mask_b.shape[0])
        pairs.append(pair)
    return pairs
