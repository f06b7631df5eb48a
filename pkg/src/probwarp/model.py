"""Toy convolutional encoder, Adam, one training step, and binary checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndgraph as nd
from .ndgraph import DimensionError, Graph, NonFiniteError, ParameterError, Tensor
from .objectives import (ObjectiveConfig, TripletPrediction, baseline_objective, strong_objective,
                         warp_sup_only_objective, weak_objective)
from .probmap import cost_volume, gt_prob_mapping, to_prob_mapping
from .warp import downscale_warp

OBJECTIVES = ("weak", "strong", "warp_sup_only", "max_score", "min_entropy")
STRIDES = (2, 2, 1)


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 2000
    lr_halve_at: int = 0
    objective: str = "weak"
    gamma: float = 0.7
    temperature: float = 1.0 / 50.0
    p_neg: float = 0.9
    lambda_pneg: float = 1.0
    occlusion: bool = True
    use_visibility: bool = True
    use_pwarp_sup: bool = True
    neg_per_pos: float = 1.0
    kp_mode: str = "ce"
    z_init: float = 0.0
    feature_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ParameterError("lr must be non-negative")
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ParameterError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")

    @property
    def uses_bin(self):
        return self.occlusion and self.objective == "weak"

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(gamma=self.gamma, p_neg=self.p_neg, lambda_pneg=self.lambda_pneg,
                               use_visibility=self.use_visibility, use_pwarp_sup=self.use_pwarp_sup,
                               use_pneg=self.uses_bin, kp_mode=self.kp_mode)


class Encoder:
    """Three 3x3 convolutions (strides 2, 2, 1) with ReLU between, unit-norm cell features."""

    def __init__(self, d=16, hidden=16, occlusion=False, z_init=0.0, seed=0, dtype=np.float32):
        rng = np.random.default_rng([seed, 0xE4C])
        self.d = d
        self.dtype = dtype
        shapes = [(hidden, 3), (hidden, hidden), (d, hidden)]
        self.params = {}
        for k, (cout, cin) in enumerate(shapes, 1):
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3))
            self.params[f"conv{k}"] = Tensor(w, requires_grad=True, dtype=dtype, name=f"conv{k}")
        if occlusion:
            self.params["bin_z"] = Tensor(np.array(z_init), requires_grad=True, dtype=dtype, name="bin_z")

    @property
    def z(self):
        return self.params.get("bin_z")

    def parameters(self):
        return list(self.params.values())

    def forward(self, x: Tensor) -> Tensor:
        """(n, 3, h, w) or (3, h, w) -> unit-norm features at 1/4 resolution."""
        h = x
        for k, s in enumerate(STRIDES, 1):
            h = nd.conv2d(h, self.params[f"conv{k}"], s)
            if k < len(STRIDES):
                h = nd.relu(h)
        return nd.l2_normalize_channels(h)

    def snapshot(self):
        return {k: v.data.copy() for k, v in self.params.items()}


def images_to_tensor(images, dtype=np.float32) -> Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float64).transpose(2, 0, 1) - 0.5 for im in images])
    return Tensor(arr, dtype=dtype)


def encode(enc: Encoder, img) -> Tensor:
    img = np.asarray(img)
    if img.shape[0] % 4 or img.shape[1] % 4:
        raise DimensionError(f"image dims {img.shape[:2]} must be divisible by 4")
    return nd.reshape(enc.forward(images_to_tensor([img], enc.dtype)), (enc.d, img.shape[0] // 4, img.shape[1] // 4))


def take_item(feats: Tensor, k: int) -> Tensor:
    return nd.reshape(nd.take_rows(nd.reshape(feats, (feats.shape[0], -1)), [k]), feats.shape[1:])


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            dt = p.data.dtype.type
            self.m[k] = (dt(b1) * self.m[k] + dt(1 - b1) * g).astype(p.data.dtype)
            self.v[k] = (dt(b2) * self.v[k] + dt(1 - b2) * g * g).astype(p.data.dtype)
            mhat = self.m[k] / dt(1 - b1 ** self.t)
            vhat = self.v[k] / dt(1 - b2 ** self.t)
            p.data -= (dt(lr) * mhat / (np.sqrt(vhat) + dt(self.eps))).astype(p.data.dtype)


@dataclass
class BatchItem:
    triplet: object
    negative: tuple | None = None       # (I, A) images of different classes
    keypoints: list = field(default_factory=list)  # (J point, I point) in cropped pixels


def pixel_to_cell(pt, ratio=4.0):
    return (np.asarray(pt, dtype=np.float64) + 0.5) / ratio - 0.5


def predict(enc: Encoder, f_t: Tensor, f_s: Tensor, temperature, with_bin):
    return to_prob_mapping(cost_volume(f_t, f_s, enc.z if with_bin else None), temperature)


def build_loss(enc: Encoder, batch, cfg: TrainConfig, lambdas=None, masks=None):
    """Forward pass for a batch; returns the composite LossReport."""
    images = []
    for item in batch:
        t = item.triplet
        images += [t.image_i, t.image_i_prime, t.image_j]
    negs = [item.negative for item in batch if item.negative is not None]
    for img_i, img_a in negs:
        images += [img_i, img_a]
    feats = enc.forward(images_to_tensor(images, enc.dtype))
    grid = feats.shape[2:]
    with_bin = cfg.uses_bin and enc.z is not None
    preds, kps = [], []
    for k, item in enumerate(batch):
        f_i, f_ip, f_j = (take_item(feats, 3 * k + o) for o in range(3))
        w = downscale_warp(item.triplet.warp, grid[1], grid[0])
        ratio = item.triplet.image_i.shape[0] / grid[0]
        preds.append(TripletPrediction(
            p_tj=predict(enc, f_i, f_j, cfg.temperature, with_bin),
            p_js=predict(enc, f_j, f_ip, cfg.temperature, with_bin),
            p_ts=predict(enc, f_i, f_ip, cfg.temperature, with_bin),
            gt_onehot=gt_prob_mapping(w, "onehot", with_bin, enc.dtype),
            gt_smooth=gt_prob_mapping(w, "smooth", with_bin, enc.dtype)))
        kps.append([(pixel_to_cell(pj, ratio), pixel_to_cell(pi, ratio)) for pj, pi in item.keypoints])
    base = 3 * len(batch)
    neg_maps = []
    for n in range(len(negs)):
        f_in, f_a = take_item(feats, base + 2 * n), take_item(feats, base + 2 * n + 1)
        neg_maps.append(predict(enc, f_a, f_in, cfg.temperature, with_bin))
    ocfg = cfg.objective_config()
    if cfg.objective == "weak":
        return weak_objective(preds, neg_maps, ocfg, lambdas, masks)
    if cfg.objective == "strong":
        return strong_objective(preds, kps, ocfg, lambdas, masks)
    if cfg.objective == "warp_sup_only":
        return warp_sup_only_objective(preds)
    return baseline_objective(cfg.objective, [p.p_tj for p in preds], neg_maps)


def train_step(enc: Encoder, opt: Adam, batch, cfg: TrainConfig, lr=None):
    if not batch:
        raise ParameterError("empty batch")
    opt.zero_grad()
    try:
        with Graph() as g:
            report = build_loss(enc, batch, cfg)
        g.backward(report.total)
    except NonFiniteError as e:
        bad = _first_bad_item(enc, batch, cfg)
        raise TrainingError(f"non-finite loss ({e}); offending batch index {bad}") from e
    opt.step(lr)
    for k, p in enc.params.items():
        if not np.all(np.isfinite(p.data)):
            raise TrainingError(f"parameter {k} became non-finite")
    return report


def _first_bad_item(enc, batch, cfg):
    for k, item in enumerate(batch):
        try:
            build_loss(enc, [item], cfg)
        except NonFiniteError:
            return k
    return -1


# ---------------------------------------------------------------------------
# checkpoints
#
# "PWRC" | u32 version | u32 record count | records | u64 step
# record: u16 name length | utf-8 name | u8 rank | u32 dims[rank] | f32 payload


CK_MAGIC = b"PWRC"
CK_VERSION = 1


def checkpoint_bytes(enc: Encoder, opt: Adam, step: int) -> bytes:
    records = [(k, p.data) for k, p in enc.params.items()]
    for k in enc.params:
        records += [(k + ".m", opt.m[k]), (k + ".v", opt.v[k])]
    out = [CK_MAGIC, struct.pack("<II", CK_VERSION, len(records))]
    for name, arr in records:
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    out.append(struct.pack("<Q", step))
    return b"".join(out)


def save_checkpoint(path, enc: Encoder, opt: Adam, step: int):
    Path(path).write_bytes(checkpoint_bytes(enc, opt, step))


def read_checkpoint(path):
    """Parse a checkpoint into ({name: array}, step); raises CheckpointFormatError with offsets."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError(f"{path}: truncated while reading {what} at offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CK_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic at offset 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CK_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version} at offset 4")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        name = take(n, "name").decode()
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size, f"payload of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float32)
    (step,) = struct.unpack("<Q", take(8, "step counter"))
    if pos != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - pos} trailing bytes at offset {pos}")
    return tensors, step


def load_checkpoint(path, enc: Encoder, opt: Adam | None = None) -> int:
    tensors, step = read_checkpoint(path)
    for k, p in enc.params.items():
        if k not in tensors:
            raise CheckpointFormatError(f"{path}: missing tensor {k}")
        if tensors[k].shape != p.data.shape:
            raise CheckpointFormatError(f"{path}: tensor {k} has shape {tensors[k].shape}, "
                                        f"expected {p.data.shape}")
        p.data = tensors[k].astype(enc.dtype)
    extra = {n for n in tensors if not n.endswith((".m", ".v"))} - set(enc.params)
    if extra:
        raise CheckpointFormatError(f"{path}: unexpected tensors {sorted(extra)}")
    if opt is not None:
        for k in enc.params:
            opt.m[k] = tensors[k + ".m"].astype(enc.dtype)
            opt.v[k] = tensors[k + ".v"].astype(enc.dtype)
        opt.t = step
    return step


def encoder_from_checkpoint(path, dtype=np.float32):
    tensors, step = read_checkpoint(path)
    d = tensors["conv3"].shape[0]
    hidden = tensors["conv1"].shape[0]
    enc = Encoder(d=d, hidden=hidden, occlusion="bin_z" in tensors, dtype=dtype)
    load_checkpoint(path, enc)
    return enc, step
