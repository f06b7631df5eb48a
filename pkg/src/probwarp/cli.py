"""Batch command-line front end.

    probwarp make-dataset --out data
    probwarp train --data data --out runs/weak --objective weak
    probwarp eval --checkpoint runs/weak/checkpoints/final.pwrc --data data --out runs/weak
    probwarp gradcheck
    probwarp sample-warps --n 8 --out warps

Exit codes: 0 success, 1 contract/config error, 2 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalkit
from .checks import format_results, run_gradchecks
from .config import ExperimentConfig, echo_config, load_config
from .experiment import Corpus, evaluate, train
from .imageio import FormatError, write_ppm, write_pwim
from .model import OBJECTIVES, CheckpointFormatError, TrainingError, encoder_from_checkpoint
from .ndgraph import ContractError, DimensionError, ParameterError
from .synthdata import PlacementError, dataset, load_dataset, make_pair, make_templates, save_dataset
from .warp import DegenerateWarpError, sample_warp, warp_image

log = logging.getLogger("probwarp")

CONTRACT_ERRORS = (ContractError, ParameterError, DimensionError, TrainingError, PlacementError,
                   DegenerateWarpError)
IO_ERRORS = (OSError, FormatError, CheckpointFormatError)


def resolve_config(path=None) -> ExperimentConfig:
    """--config wins over the PWCONFIG environment variable; otherwise defaults."""
    path = path or os.environ.get("PWCONFIG")
    if not path:
        return ExperimentConfig()
    if not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return load_config(path)


def _need_dir(path, what):
    p = Path(path)
    if not (p / "manifest.jsonl").is_file():
        raise FileNotFoundError(f"{what} {p} has no manifest.jsonl")
    return p


def cmd_make_dataset(args, cfg: ExperimentConfig):
    seed = cfg.data.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = dataset(seed, cfg.data.n_pos, cfg.data.n_neg, cfg.synth)
    manifest = save_dataset(ds, out, threads=args.threads)
    (out / "config.echo").write_text(echo_config(cfg.replace("data", seed=seed)))
    print(f"wrote {len(ds)} pairs to {manifest}")


def _latest_checkpoint(out: Path):
    ck = sorted((out / "checkpoints").glob("step_*.pwrc"))
    if not ck:
        raise FileNotFoundError(f"nothing to resume: no step checkpoints in {out / 'checkpoints'}")
    return ck[-1]


def cmd_train(args, cfg: ExperimentConfig):
    tcfg = cfg.train
    updates = {}
    if args.objective is not None:
        updates["objective"] = args.objective
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.steps is not None:
        updates["steps"] = args.steps
    if updates:
        cfg = cfg.replace("train", **updates)
        tcfg = cfg.train
    pairs = load_dataset(_need_dir(args.data, "dataset"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume is not None:
        resume = _latest_checkpoint(out) if args.resume == "latest" else Path(args.resume)
        if not resume.is_file():
            raise FileNotFoundError(f"checkpoint not found: {resume}")
    (out / "config.echo").write_text(echo_config(cfg))
    _, _, rows = train(tcfg, cfg.warp, Corpus.from_pairs(pairs, "train"), out, resume,
                       cfg.run.checkpoint_every)
    last = rows[-1] if rows else None
    print(f"trained {tcfg.objective} for {tcfg.steps} steps -> {out / 'checkpoints' / 'final.pwrc'}"
          + (f" (final total loss {last[-1]})" if last else ""))


def cmd_eval(args, cfg: ExperimentConfig):
    ck = Path(args.checkpoint)
    if not ck.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ck}")
    pairs = load_dataset(_need_dir(args.data, "dataset"))
    split = args.split or cfg.eval.split
    enc, step = encoder_from_checkpoint(ck)
    res = evaluate(enc, pairs, split, cfg.train.temperature, cfg.warp.crop_size, cfg.eval.alphas,
                   args.threads, checkpoint_name=ck.stem)
    if not res["rows"]:
        raise ContractError(f"split {split!r} has no evaluable pairs")
    metrics, curves = evalkit.report(res, Path(args.out) / "eval")
    key = ("dense_pck", 0.10, cfg.eval.reference)
    if key in res["summary"]:
        print(f"{ck.name} (step {step}) dense PCK@0.10 [{cfg.eval.reference}] = {res['summary'][key]:.4f}")
    print(f"wrote {metrics} and {curves}")


def cmd_gradcheck(args, cfg: ExperimentConfig):
    seed = cfg.train.seed if args.seed is None else args.seed
    results = run_gradchecks(seed)
    print(format_results(results))
    bad = [r.name for r in results if not r.ok]
    if bad:
        raise ContractError(f"gradient check failed for: {', '.join(bad)}")


def _flow_image(warp):
    """Displacement field as RGB: x offset in red, y offset in green, validity in blue."""
    grid = np.stack(np.meshgrid(np.arange(warp.width), np.arange(warp.height)), -1)
    d = (warp.map - grid) / max(warp.width, warp.height)
    rgb = np.zeros((warp.height, warp.width, 3))
    rgb[..., 0] = np.clip(0.5 + 2 * d[..., 0], 0, 1)
    rgb[..., 1] = np.clip(0.5 + 2 * d[..., 1], 0, 1)
    rgb[..., 2] = warp.valid
    return rgb


def cmd_sample_warps(args, cfg: ExperimentConfig):
    seed = cfg.data.seed if args.seed is None else args.seed
    rng = np.random.default_rng([seed, 0x3A9])
    templates = make_templates(rng, cfg.synth.n_classes, cfg.synth.n_keypoints,
                               cfg.synth.part_hue_spread, cfg.synth.stripe_contrast)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = cfg.synth.image_size
    rows = []
    for k in range(args.n):
        img = make_pair(rng, templates, True, cfg.synth, k).image_a
        w = sample_warp(rng, cfg.warp, size, size)
        warped = warp_image(img, w)
        flow = _flow_image(w)
        write_pwim(out / f"warp_{k:03d}_map.pwim", np.concatenate([w.map, w.valid[..., None]], -1))
        write_ppm(out / f"warp_{k:03d}_flow.ppm", flow)
        write_ppm(out / f"warp_{k:03d}_image.ppm", img)
        write_ppm(out / f"warp_{k:03d}_warped.ppm", warped)
        rows.append(np.concatenate([img, warped, flow], 1))
        print(f"warp {k}: {w.kind}, valid fraction {w.valid.mean():.3f}")
    if rows:
        write_ppm(out / "grid.ppm", np.concatenate(rows, 0))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="probwarp", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="key = value config file (default: $PWCONFIG, then built-in defaults)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker cap (default: logical cores)")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-dataset", help="generate the synthetic pair corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_make_dataset)

    s = sub.add_parser("train", help="train the toy encoder")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--objective", choices=OBJECTIVES)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--resume", nargs="?", const="latest",
                   help="resume from a checkpoint (default: the newest step checkpoint under --out)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "val", "test"))
    s.add_argument("--out", required=True, help="experiment directory; results go to OUT/eval/")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and objective")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("sample-warps", help="render random warps for inspection")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_sample_warps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        cfg = resolve_config(args.config)
        args.fn(args, cfg)
    except CONTRACT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except IO_ERRORS as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
