"""Command-line workflows: train, register, warp, evaluate, synth.

Every artifact-producing run writes a manifest JSON next to its outputs
recording the command, seed, configuration, input digests, and library
versions, so results can be replayed exactly.

Exit codes: 0 success, 2 usage error, 3 data error (missing or malformed
inputs), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import cascade as casc
from . import evalmetrics as em
from . import inference as inf
from . import trainer as tr
from . import volumes as vol
from .diffcore import configure_threads
from .errors import NonFiniteLoss, PatchregError, Singular
from .inference import GlobalDDF

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_IMAGE_SUFFIXES = (".nii", ".json")


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def write_manifest(path: Path, command: str, seed, inputs: dict, artifacts: list, config: dict | None = None) -> None:
    manifest = {
        "command": command,
        "seed": seed,
        "config": config or {},
        "inputs": {name: {"path": str(p), "sha256_16": _digest(Path(p))} for name, p in inputs.items()},
        "artifacts": [str(a) for a in artifacts],
        "versions": {
            "patchreg": __version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
            "python": sys.version.split()[0],
        },
    }
    path.write_text(json.dumps(manifest, indent=1) + "\n")


def _discover_images(data_dir: Path) -> list[Path]:
    """Intensity volumes in a directory; label and field files are skipped."""
    out = []
    for p in sorted(data_dir.iterdir()):
        skip = ("labels", "field", "manifest")
        if p.suffix in _IMAGE_SUFFIXES and not any(s in p.stem for s in skip):
            out.append(p)
    return out


def cmd_train(args) -> int:
    data_dir = Path(args.data_dir)
    if not data_dir.is_dir():
        print(f"error: data directory not found: {data_dir}", file=sys.stderr)
        return EXIT_DATA
    cfg, schedule_args = tr.load_train_config(args.config)
    image_paths = _discover_images(data_dir)
    if len(image_paths) < 1:
        print(f"error: no images found in {data_dir}", file=sys.stderr)
        return EXIT_DATA
    dataset = tr.prepare_dataset([vol.load_image(p) for p in image_paths])
    schedule = casc.build_schedule(dataset, **schedule_args)
    out_dir = Path(args.out_dir)
    model = tr.train(cfg, dataset, schedule, out_dir, resume=args.resume)
    write_manifest(
        out_dir / "manifest.json",
        "train",
        cfg.seed,
        {p.name: p for p in image_paths} | {"config": Path(args.config)},
        [model, out_dir / "train_log.jsonl"],
        config=tr.parse_config_text(Path(args.config).read_text()),
    )
    print(f"model written to {model}")
    return EXIT_OK


def cmd_register(args) -> int:
    heads, schedule, _ = tr.load_model(args.model)
    fixed = vol.load_image(args.fixed)
    moving = vol.load_image(args.moving)
    started = time.perf_counter()
    ddf = inf.register(
        fixed,
        moving,
        heads,
        schedule,
        seed=args.seed,
        resolution_multiplier=args.canvas_scale,
        repeat_scales=(-1,) * args.repeat_finest,
        coverage=args.coverage,
    )
    out = Path(args.out)
    vol.save_field(out, ddf.to_field())
    write_manifest(
        out.with_name(out.stem + ".manifest.json"),
        "register",
        args.seed,
        {"model": Path(args.model), "fixed": Path(args.fixed), "moving": Path(args.moving)},
        [out],
        config={
            "repeat_finest": args.repeat_finest,
            "canvas_scale": args.canvas_scale,
            "coverage": args.coverage,
            "runtime_s": round(time.perf_counter() - started, 3),
        },
    )
    print(f"displacement field written to {out}")
    return EXIT_OK


def cmd_warp(args) -> int:
    ddf = GlobalDDF.from_field(vol.load_field(args.ddf))
    like = None
    if args.like is not None:
        like = vol.load_image(args.like)
    out = Path(args.out)
    if args.labels:
        warped = inf.warp_labels(vol.load_labels(args.input), ddf, like=like)
        vol.save_labels(out, warped)
    else:
        warped = inf.warp_image(vol.load_image(args.input), ddf, like=like)
        vol.save_image(out, warped)
    inputs = {"ddf": Path(args.ddf), "input": Path(args.input)}
    if args.like is not None:
        inputs["like"] = Path(args.like)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "warp", None, inputs, [out])
    print(f"warped volume written to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    spec = json.loads(Path(args.manifest).read_text())
    cases = spec.get("cases", [])
    if not cases:
        print("error: evaluation manifest lists no cases", file=sys.stderr)
        return EXIT_DATA
    records = []
    for case in cases:
        fixed_labels = vol.load_labels(case["fixed_labels"])
        moving_labels = vol.load_labels(case["moving_labels"])
        ddf = GlobalDDF.from_field(vol.load_field(case["ddf"]))
        zero = GlobalDDF(np.zeros_like(ddf.values), ddf.affine)
        before = em.dice(fixed_labels, inf.warp_labels(moving_labels, zero, like=fixed_labels))
        after = em.dice(fixed_labels, inf.warp_labels(moving_labels, ddf, like=fixed_labels))
        foreground = None
        if "fixed" in case:
            foreground = em.foreground_mask(vol.load_image(case["fixed"]), ddf)
        jac = em.jacobian_report(ddf, foreground)
        records.append(
            {
                "case": case.get("name", Path(case["ddf"]).stem),
                "dice_avg_before": round(before.avg, 4),
                "dice_avg_after": round(after.avg, 4),
                "dice_min_after": round(after.min, 4),
                "frac_nonpositive_jacobian_pct": round(jac.frac_nonpositive, 6),
                "median_jacobian": round(jac.median, 4),
            }
        )
    header = list(records[0].keys())
    widths = [max(len(h), *(len(str(r[h])) for r in records)) for h in header]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in records:
        print("  ".join(str(r[h]).ljust(w) for h, w in zip(header, widths)))
    if args.out is not None:
        out = Path(args.out)
        with open(out, "w") as f:
            for r in records:
                f.write(json.dumps(r) + "\n")
        write_manifest(
            out.with_name(out.stem + ".manifest.json"),
            "evaluate",
            None,
            {"manifest": Path(args.manifest)},
            [out],
        )
    return EXIT_OK


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for i in range(args.n):
        case = vol.synth_case(seed=args.seed + i, size=args.size)
        stem = out_dir / f"case{i:03d}"
        files = {
            f"{stem}_fixed.nii": (vol.save_image, case.fixed),
            f"{stem}_moving.nii": (vol.save_image, case.moving),
            f"{stem}_fixed_labels.nii": (vol.save_labels, case.fixed_labels),
            f"{stem}_moving_labels.nii": (vol.save_labels, case.moving_labels),
            f"{stem}_true_field.nii": (vol.save_field, case.true_field),
        }
        for path, (save, obj) in files.items():
            save(path, obj)
            artifacts.append(path)
    write_manifest(
        out_dir / "manifest.json",
        "synth",
        args.seed,
        {},
        artifacts,
        config={"n": args.n, "size": args.size},
    )
    print(f"{args.n} case(s) written to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchreg",
        description="Multiscale patch-based deformable registration of 3D volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train displacement predictors on a directory of images")
    p.add_argument("config", help="text config file (key = value, version = 1)")
    p.add_argument("data_dir", help="directory of .nii/.json intensity volumes")
    p.add_argument("out_dir", help="output directory for model.ckpt and the log")
    p.add_argument("--resume", default=None, help="continue from a saved model checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="assemble the displacement field for an image pair")
    p.add_argument("model", help="trained model checkpoint")
    p.add_argument("fixed", help="fixed (reference) image")
    p.add_argument("moving", help="moving image")
    p.add_argument("out", help="output displacement field (.nii or .json)")
    p.add_argument("--repeat-finest", type=int, default=0, metavar="N",
                   help="run the finest scale N extra times")
    p.add_argument("--canvas-scale", type=int, default=1, metavar="S",
                   help="output grid resolution multiplier")
    p.add_argument("--coverage", type=int, default=10, metavar="K",
                   help="jittered tilings averaged per scale; higher is "
                        "smoother and proportionally slower")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("warp", help="apply a displacement field to an image or labels")
    p.add_argument("ddf", help="displacement field file")
    p.add_argument("input", help="volume to warp")
    p.add_argument("out", help="output path")
    p.add_argument("--labels", action="store_true", help="nearest-neighbour warp of integer labels")
    p.add_argument("--like", default=None, help="volume whose grid defines the output")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("evaluate", help="score registered cases listed in a JSON manifest")
    p.add_argument("manifest", help='JSON file: {"cases": [{"fixed_labels", "moving_labels", "ddf", ...}]}')
    p.add_argument("--out", default=None, help="write per-case records as JSONL")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate synthetic image pairs with ground truth")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=1, help="number of cases")
    p.add_argument("--size", type=int, default=64, help="cube edge in voxels")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    configure_threads()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NonFiniteLoss, Singular) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PatchregError, FileNotFoundError, NotADirectoryError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
