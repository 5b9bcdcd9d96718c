"""Command-line entry point.

Subcommands: ``run`` (execute a protocol from a JSON config), ``gradcheck``
(finite-difference verification suites), ``transforms`` (sample and write
transformed copies of an image for inspection), ``report`` (render stored
reports).

Exit codes: 0 success, 1 verification failure, 2 validation/usage error,
3 training divergence.

``METADR_THREADS`` (default 1) caps kernel thread parallelism; it must be
honored before numpy loads its BLAS, so this module sets the usual thread
env vars at import time when they are not already set.
"""

from __future__ import annotations

import os

_threads = os.environ.get("METADR_THREADS", "1")
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .data import DomainSpec, Protocol
from .evaluation import RunReport, aggregate, emit, parse_report
from .gradcheck import composite_check, gradcheck
from .models import ModelConfig
from .trainers import DivergenceError, TrainerConfig, run_protocol
from .transforms import STANDARD_SETS, apply_transform, build_set, sample_transform

__all__ = ["main"]

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class ConfigError(ValueError):
    pass


def load_schema() -> dict:
    with resources.files("metadr").joinpath("config_schema.json").open() as f:
        return json.load(f)


def validate_config(doc: dict) -> None:
    """Validate a run config against the published schema; raises
    ConfigError naming the offending field."""
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as e:
        raise ConfigError(f"config field {e.json_path}: {e.message}") from e


def _build_objects(doc: dict):
    proto_doc = doc["protocol"]
    protocol = Protocol(
        domains=tuple(
            DomainSpec(
                name=d["name"],
                source=d["source"],
                fractions=tuple(d.get("fractions", (0.7, 0.15, 0.15))),
            )
            for d in proto_doc["domains"]
        ),
        sample_cap=proto_doc.get("sample_cap", 10000),
        seed=proto_doc.get("seed", 0),
    )
    m = dict(doc["model"])
    for key in ("input_shape", "hidden", "channels"):
        if key in m:
            m[key] = tuple(m[key])
    model_config = ModelConfig(**m)
    return protocol, model_config


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    try:
        with open(args.config) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    # flag > file > default
    if args.output_dir is not None:
        doc["output_dir"] = args.output_dir
    if args.steps is not None:
        doc.setdefault("trainer", {})["steps"] = args.steps
    if args.seeds is not None:
        doc["seeds"] = args.seeds
    try:
        validate_config(doc)
        protocol, model_config = _build_objects(doc)
        trainer_doc = doc.get("trainer", {})
        configs = {
            method: [
                TrainerConfig(method=method, seed=seed, **trainer_doc)
                for seed in doc["seeds"]
            ]
            for method in doc["methods"]
        }
    except (ConfigError, ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(doc.get("output_dir", "runs") )
    out_dir.mkdir(parents=True, exist_ok=True)
    name = doc["name"]
    formats = doc.get("report_formats", ["json"])
    try:
        for method, cfgs in configs.items():
            reports = []
            for cfg in cfgs:
                report = run_protocol(protocol, cfg, model_config)
                reports.append(report)
                for fmt in formats:
                    path = out_dir / f"{name}_{method}_seed{cfg.seed}.{fmt}"
                    emit(report, fmt, path)
                    print(f"wrote {path}")
            agg = aggregate(reports)
            agg_path = out_dir / f"{name}_{method}_aggregate.json"
            with open(agg_path, "w") as f:
                f.write(json.dumps(agg, indent=2, sort_keys=True) + "\n")
            print(f"wrote {agg_path}")
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    rep = gradcheck(n_instances=args.instances, seed=args.seed,
                    fault_flip=args.fault_flip)
    print(rep.summary())
    comp = composite_check(seed=args.seed)
    print(comp.summary())
    return EXIT_OK if rep.passed and comp.passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# transforms


def read_image(path) -> np.ndarray:
    """Read an (H, W, C) image in [0, 255] from .npy, binary PPM (P6), or
    binary PGM (P5)."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return arr
    with open(path, "rb") as f:
        data = f.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported image format in {path}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only 8-bit pixmaps are supported")
    c = 3 if magic == b"P6" else 1
    pix = np.frombuffer(data[pos : pos + w * h * c], dtype=np.uint8)
    if pix.size != w * h * c:
        raise ValueError(f"truncated pixmap {path}")
    return pix.reshape(h, w, c).astype(np.float64)


def write_image(path, img: np.ndarray) -> None:
    """Write an (H, W, C) image in [0, 255] as binary PPM (C=3) or PGM (C=1)."""
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"cannot write {c}-channel image")
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode())
        f.write(np.rint(np.clip(img, 0, 255)).astype(np.uint8).tobytes())


def cmd_transforms(args) -> int:
    if args.set.lower() not in STANDARD_SETS:
        print(f"error: unknown transform set {args.set!r} "
              f"(available: {', '.join(sorted(STANDARD_SETS))})", file=sys.stderr)
        return EXIT_CONFIG
    try:
        img = read_image(args.image)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    tset = build_set(args.set)
    rng = np.random.default_rng(args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"set": tset.name, "seed": args.seed, "samples": []}
    ext = "ppm" if img.shape[2] == 3 else "pgm"
    for i in range(args.samples):
        ct = sample_transform(tset, rng)
        fname = f"sample_{i:03d}.{ext}"
        write_image(out_dir / fname, apply_transform(ct, img))
        manifest["samples"].append({"file": fname, "entries": ct.describe()})
    with open(out_dir / "manifest.json", "w") as f:
        f.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.samples} samples + manifest to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    try:
        reports = [parse_report(p) for p in args.files]
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: cannot parse report: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if len(reports) == 1:
        report = reports[0]
        out = _render_single(report, args.format)
    else:
        try:
            agg = aggregate(reports)
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        out = _render_aggregate(agg, args.format)
    sys.stdout.write(out)
    return EXIT_OK


def _render_single(report: RunReport, fmt: str) -> str:
    from .evaluation import _as_csv, _as_json, _as_table

    return {"json": _as_json, "csv": _as_csv, "table": _as_table}[fmt](report)


def _render_aggregate(agg: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(agg, indent=2, sort_keys=True) + "\n"
    domains = agg["domains"]
    if fmt == "csv":
        lines = ["stage," + ",".join(domains)]
        for i, row in enumerate(agg["mean"]):
            lines.append(
                f"after_{domains[i]}," + ",".join(f"{a:.6f}" for a in row)
            )
        return "\n".join(lines) + "\n"
    width = max(16, max(len(d) for d in domains) + 2)
    head = "stage".ljust(width) + "".join(d.rjust(width) for d in domains)
    lines = [head, "-" * len(head)]
    for i, (mrow, srow) in enumerate(zip(agg["mean"], agg["std"])):
        cells = [f"{100 * m:.1f}±{100 * s:.1f}" for m, s in zip(mrow, srow)]
        lines.append(
            f"after {domains[i]}".ljust(width) + "".join(c.rjust(width) for c in cells)
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="metadr",
        description="Continual domain adaptation lab. Option precedence: "
        "command-line flag > config file > built-in default.",
    )
    sub = p.add_subparsers(dest="cmd", required=True)

    pr = sub.add_parser("run", help="run a protocol from a JSON config")
    pr.add_argument("config", help="path to a run config (JSON)")
    pr.add_argument("--output-dir", help="override the config's output_dir")
    pr.add_argument("--steps", type=int, help="override trainer.steps")
    pr.add_argument("--seeds", type=int, nargs="+", help="override the seed list")
    pr.set_defaults(fn=cmd_run)

    pg = sub.add_parser("gradcheck", help="finite-difference verification")
    pg.add_argument("--instances", type=int, default=50)
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--fault-flip", action="store_true",
                    help="negative control: flip analytic signs")
    pg.set_defaults(fn=cmd_gradcheck)

    pt = sub.add_parser("transforms", help="sample transforms over an image")
    pt.add_argument("set", help="transform set id (psi1..psi4)")
    pt.add_argument("image", help="input image (.ppm/.pgm/.npy)")
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--samples", type=int, default=8)
    pt.add_argument("--out", default="transforms_out", help="output directory")
    pt.set_defaults(fn=cmd_transforms)

    pp = sub.add_parser("report", help="render stored run reports")
    pp.add_argument("files", nargs="+", help="report JSON paths")
    pp.add_argument("--format", choices=("json", "csv", "table"), default="table")
    pp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
