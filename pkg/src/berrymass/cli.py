"""Command-line entry point.

Exit codes: 0 success, 2 bad usage or unreadable input, 3 computation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .completion import MetricMode, completion_metrics
from .core import (Manifest, ManifestEntry, Occlusion, load_manifest, load_mask, load_pointcloud,
                   save_depth, save_manifest, save_mask, save_pointcloud)
from .errors import BerryMassError, FormatError, ValidationError
from .evalreport import dumps, emit_report
from .ganloss import evaluate_file
from .massreg import fit_polynomial, load_calibration_csv, save_calibration_csv, save_model
from .pipeline import PipelineConfig, evaluate, resolve_model, run_batch, _load_results
from .pose import estimate_tilt
from .synth import (DEFAULT_INTRINSICS, OcclusionSpec, SceneDescription, ScenePose, calibration_samples,
                    random_shape, synthesize)

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 2, 3
CALIBRATION_SHAPES = 200


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _emit(doc, output: Optional[str]) -> None:
    text = dumps(doc)
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _read_json(path) -> object:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None


def random_scenes(n: int, seed: int, occluded_fraction: float = 0.0, max_tilt: float = 45.0,
                  max_coverage: float = 0.25) -> list[SceneDescription]:
    """Strawberry-sized fruit around 4 cm long and 3 cm wide at 0.4-0.6 m."""
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n):
        shape = random_shape(rng)
        pose = ScenePose(float(rng.uniform(0.0, max_tilt)),
                         (float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05)),
                          float(rng.uniform(0.4, 0.6))))
        occ = None
        if rng.random() < occluded_fraction:
            occ = OcclusionSpec(kind=("ellipse", "band")[int(rng.integers(2))],
                                coverage=float(rng.uniform(0.05, max_coverage)),
                                seed=int(rng.integers(2 ** 31)), one_sided=True)
        scenes.append(SceneDescription(shape, pose, occ, seed=int(rng.integers(2 ** 31))))
    return scenes


def write_fixtures(scenes: list[tuple[str, SceneDescription]], out: Path, rho: float = 0.95) -> Manifest:
    """Render scenes into ``out`` with a manifest and one ground-truth sidecar per fruit."""
    out.mkdir(parents=True, exist_ok=True)
    k = DEFAULT_INTRINSICS
    entries = []
    for sid, scene in scenes:
        syn = synthesize(scene, k, rho)
        stem = out / sid
        save_mask(syn.visible, f"{stem}_mask.pgm")
        save_mask(syn.mask, f"{stem}_truth.pgm")
        save_depth(syn.depth, f"{stem}_depth.pgm")
        save_pointcloud(syn.cloud, f"{stem}_cloud.txt")
        Path(f"{stem}_truth.json").write_text(dumps(syn.truth.to_dict()), encoding="utf-8")
        Path(f"{stem}_scene.json").write_text(dumps(scene.to_dict()), encoding="utf-8")
        label = Occlusion.OCCLUDED if scene.occlusion is not None else Occlusion.ISOLATED
        entries.append(ManifestEntry(sid, Path(f"{stem}_mask.pgm"), Path(f"{stem}_depth.pgm"), label,
                                     ground_truth=syn.truth, truth_mask_path=Path(f"{stem}_truth.pgm")))
    manifest = Manifest(k, tuple(entries))
    save_manifest(manifest, out / "manifest.json")
    return manifest


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    if not args.output:
        raise UsageError("synth needs --output DIR")
    seed = 0 if args.seed is None else args.seed
    if args.random is not None:
        if args.scene:
            raise UsageError("give either a scene file or --random, not both")
        scenes = random_scenes(args.random, seed, args.occluded_fraction)
        named = [(f"fruit{i:03d}", s) for i, s in enumerate(scenes)]
    else:
        if not args.scene:
            raise UsageError("synth needs a scene file or --random N")
        doc = _read_json(args.scene)
        items = doc if isinstance(doc, list) else doc.get("scenes", [doc]) if isinstance(doc, dict) else None
        if not items:
            raise UsageError(f"{args.scene}: no scenes")
        try:
            named = [(str(d.get("id", f"fruit{i:03d}")), SceneDescription.from_dict(d)) for i, d in enumerate(items)]
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ValidationError(f"{args.scene}: invalid scene ({exc})") from None
        if args.seed is not None:
            named = [(sid, replace(s, seed=s.seed + seed)) for sid, s in named]
    cfg = _config(args)
    manifest = write_fixtures(named, Path(args.output), cfg.rho)
    # exact area/volume pairs for the same shape family, ready for `calibrate`
    save_calibration_csv(calibration_samples(CALIBRATION_SHAPES, seed), Path(args.output) / "calibration.csv")
    sys.stdout.write(dumps({"manifest": str(Path(args.output) / "manifest.json"),
                            "instances": manifest.ids()}))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    samples = load_calibration_csv(args.csv)
    model = fit_polynomial(samples, args.degree)
    if args.output:
        save_model(model, args.output)
    sys.stdout.write(dumps({"r_squared": model.r_squared, "degree": model.degree, "n": len(samples),
                            "model": args.output}))
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    model = resolve_model(cfg, Path(args.model) if args.model else None)
    records = run_batch(manifest, model, cfg, args.workers or 1)
    _emit({"config": cfg.to_dict() | {"model": args.model or cfg.to_dict()["model"]}, "records": records},
          args.output)
    ok = sum(r["status"] == "ok" for r in records)
    for r in records:
        if r["status"] != "ok":
            print(f"{r['id']}: {r['error']}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    report = evaluate(manifest, _load_results(args.results), cfg)
    if args.output:
        emit_report(report, args.output)
    else:
        sys.stdout.write(dumps(report.to_dict()))
    return EXIT_OK


def cmd_pose(args) -> int:
    cfg = _config(args)
    apex = replace(cfg.apex, seed=cfg.seed)
    est = estimate_tilt(load_pointcloud(args.cloud), apex)
    _emit(est.to_dict(), args.output)
    return EXIT_OK


def cmd_ganloss(args) -> int:
    _emit(evaluate_file(args.batches), args.output)
    return EXIT_OK


def cmd_metrics(args) -> int:
    pred = load_mask(args.pred)
    truth = load_mask(args.truth)
    visible = load_mask(args.visible) if args.visible else None
    m = completion_metrics(pred, truth, MetricMode(args.mode), visible)
    _emit(m.to_dict(), args.output)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    def add_globals(p, default):
        p.add_argument("--config", default=default, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=default, help="global RNG seed")
        p.add_argument("--workers", type=int, default=default, help="parallel instances (estimate)")
        p.add_argument("--output", default=default, help="output file (directory for synth)")

    parser = argparse.ArgumentParser(prog="berrymass", description="Strawberry mass estimation from mask and depth.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    add_globals(parser, None)
    common = argparse.ArgumentParser(add_help=False)
    add_globals(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="render synthetic fruit fixtures")
    p.add_argument("scene", nargs="?", help="scene JSON (one scene, a list, or {scenes: [...]})")
    p.add_argument("--random", type=int, metavar="N", help="generate N random strawberry-sized scenes")
    p.add_argument("--occluded-fraction", type=float, default=0.0, help="share of random scenes to occlude")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", parents=[common], help="fit the area-to-volume polynomial")
    p.add_argument("csv", help="CSV with header area_cm2,volume_cm3")
    p.add_argument("--degree", type=int, default=3)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("estimate", parents=[common], help="estimate mass for every manifest instance")
    p.add_argument("manifest")
    p.add_argument("--model", help="model JSON (defaults to config, then the reference cubic)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", parents=[common], help="score estimates against ground truth")
    p.add_argument("manifest")
    p.add_argument("results", help="output of the estimate command")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pose", parents=[common], help="tilt angle of a point-cloud file")
    p.add_argument("cloud")
    p.set_defaults(func=cmd_pose)

    p = sub.add_parser("ganloss", parents=[common], help="adversarial/cycle loss arithmetic")
    gsub = p.add_subparsers(dest="action", required=True, metavar="ACTION")
    e = gsub.add_parser("eval", parents=[common], help="evaluate losses for a JSON batch file")
    e.add_argument("batches")
    e.set_defaults(func=cmd_ganloss)

    p = sub.add_parser("metrics", parents=[common], help="PAR and IoU of a restored mask")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("--visible", help="visible mask, needed for --mode region")
    p.add_argument("--mode", choices=[m.value for m in MetricMode], default=MetricMode.FRUIT.value)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers is not None and args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (FormatError, ValidationError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"berrymass: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BerryMassError, OSError) as exc:
        print(f"berrymass: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
