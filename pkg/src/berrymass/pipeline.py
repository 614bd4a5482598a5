"""Per-fruit estimation and batch orchestration.

Each instance runs in isolation: a failure is recorded in its own result
record and never stops the batch.  Instances get their own RNG seed derived
from the global seed and the instance id, so results do not depend on
ordering or on how many workers run them.
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

from .completion import (AxisMethod, CompletionMethod, MetricMode, backfill_depth, complete_symmetry, ingest_external,
                         iou, no_completion, pixel_area_ratio)
from .core import FruitInstance, Manifest, ManifestEntry, Occlusion, deproject, load_mask
from .errors import BerryMassError, ConsistencyError, DivisionUndefinedError, FormatError, ValidationError
from .evalreport import EvalReport, build_report
from .massreg import (DEFAULT_DENSITY, GradeThresholds, PolynomialModel, frontal_area, grade, load_model,
                      mass_from_volume, predict_volume, projected_area_metric)
from .pose import ApexSearchConfig, estimate_tilt


class CorrectionMode(str, Enum):
    """Which tilt angle feeds the cos correction.

    ``cos-theta`` uses the full angle between axis and vertical;
    ``out-of-plane-only`` uses only the lean towards or away from the camera,
    since a tilt inside the image plane does not shrink the silhouette.
    """
    COS_THETA = "cos-theta"
    OUT_OF_PLANE = "out-of-plane-only"


@dataclass(frozen=True)
class PipelineConfig:
    rho: float = DEFAULT_DENSITY
    thresholds: GradeThresholds = field(default_factory=GradeThresholds)
    completion: CompletionMethod = CompletionMethod.SYMMETRY
    symmetry_axis: AxisMethod = AxisMethod.PCA
    correction: CorrectionMode = CorrectionMode.COS_THETA
    metric_mode: MetricMode = MetricMode.FRUIT
    apex: ApexSearchConfig = field(default_factory=ApexSearchConfig)
    model_path: Optional[Path] = None
    seed: int = 0

    def __post_init__(self):
        if not 0.5 <= self.rho <= 1.5:
            raise ValidationError(f"density {self.rho} outside [0.5, 1.5] g/cm^3")
        object.__setattr__(self, "completion", CompletionMethod(self.completion))
        object.__setattr__(self, "symmetry_axis", AxisMethod(self.symmetry_axis))
        object.__setattr__(self, "correction", CorrectionMode(self.correction))
        object.__setattr__(self, "metric_mode", MetricMode(self.metric_mode))

    @classmethod
    def from_dict(cls, d: dict, base: Optional[Path] = None) -> "PipelineConfig":
        known = {"rho", "thresholds", "completion", "symmetry_axis", "correction", "metric_mode", "apex", "model",
                 "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        try:
            kw = {}
            if "rho" in d:
                kw["rho"] = float(d["rho"])
            if "thresholds" in d:
                t = d["thresholds"]
                kw["thresholds"] = GradeThresholds(float(t.get("a_min", 30)), float(t.get("b_min", 20)),
                                                   float(t.get("c_min", 10)))
            for key in ("completion", "symmetry_axis", "correction", "metric_mode"):
                if key in d:
                    kw[key] = d[key]
            if "apex" in d:
                kw["apex"] = ApexSearchConfig.from_dict(d["apex"])
            if d.get("model") is not None:
                p = Path(d["model"])
                kw["model_path"] = p if p.is_absolute() or base is None else base / p
            if "seed" in d:
                kw["seed"] = int(d["seed"])
            return cls(**kw)
        except (TypeError, ValueError, AttributeError) as exc:
            raise ValidationError(f"bad config: {exc}") from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from None
        return cls.from_dict(doc, path.parent)

    def to_dict(self) -> dict:
        t = self.thresholds
        return {"rho": self.rho,
                "thresholds": {"a_min": t.a_min, "b_min": t.b_min, "c_min": t.c_min},
                "completion": self.completion.value, "symmetry_axis": self.symmetry_axis.value,
                "correction": self.correction.value,
                "metric_mode": self.metric_mode.value, "apex": self.apex.to_dict(),
                "model": None if self.model_path is None else str(self.model_path), "seed": self.seed}


def instance_seed(seed: int, instance_id: str) -> int:
    return (int(seed) + zlib.crc32(instance_id.encode("utf-8"))) % (2 ** 32)


def estimate_instance(inst: FruitInstance, model: PolynomialModel, cfg: PipelineConfig) -> dict:
    """Mass estimate for one fruit; raises on failure."""
    k = inst.intrinsics
    visible = inst.mask
    if inst.occlusion_label is Occlusion.ISOLATED or cfg.completion is CompletionMethod.NONE:
        result = no_completion(visible)
    elif cfg.completion is CompletionMethod.EXTERNAL:
        if inst.completed_mask_path is None:
            raise ConsistencyError(f"{inst.id}: external completion requested but no completed_mask given")
        result = ingest_external(inst.completed_mask_path, visible)
    else:
        result = complete_symmetry(visible, cfg.symmetry_axis)
    completed = result.completed
    depth = backfill_depth(completed, visible, inst.depth)

    # restored pixels only carry the backfilled mean depth, so the shape comes from visible pixels
    cloud = deproject(visible, inst.depth, k)
    pose = estimate_tilt(cloud, replace(cfg.apex, seed=instance_seed(cfg.seed, inst.id)))
    theta = pose.theta_deg if cfg.correction is CorrectionMode.COS_THETA else pose.out_of_plane_deg

    area_vis = projected_area_metric(completed, depth, k)
    area, capped = frontal_area(area_vis, theta)
    vol = predict_volume(model, area)
    mass = mass_from_volume(vol.volume, cfg.rho)
    return {"id": inst.id, "occlusion_label": inst.occlusion_label.value, "status": "ok",
            "area_cm2": area, "theta_deg": theta, "volume_cm3": vol.volume, "mass_g": mass,
            "grade": grade(mass, cfg.thresholds),
            "visible_area_cm2": area_vis, "theta_capped": capped, "out_of_domain": vol.out_of_domain,
            "completion": result.method.value, "axis": [float(x) for x in pose.axis],
            "apex": [float(x) for x in pose.apex]}


def _run_entry(manifest: Manifest, entry: ManifestEntry, model: PolynomialModel, cfg: PipelineConfig) -> dict:
    try:
        return estimate_instance(manifest.load(entry), model, cfg)
    except (BerryMassError, OSError, ValueError) as exc:
        return {"id": entry.id, "occlusion_label": entry.occlusion_label.value, "status": "failed",
                "error": f"{type(exc).__name__}: {exc}"}


def run_batch(manifest: Manifest, model: PolynomialModel, cfg: PipelineConfig, workers: int = 1) -> list[dict]:
    """Estimate every instance; records come back sorted by id whatever the worker count."""
    if workers < 1:
        raise ValidationError("workers must be >= 1")
    entries = sorted(manifest.instances, key=lambda e: e.id)
    if workers == 1:
        records = [_run_entry(manifest, e, model, cfg) for e in entries]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda e: _run_entry(manifest, e, model, cfg), entries))
    return records


def resolve_model(cfg: PipelineConfig, override: Optional[Path] = None) -> PolynomialModel:
    """Model from the override path, then the config, else the published reference curve."""
    path = override or cfg.model_path
    return load_model(path) if path is not None else PolynomialModel.reference()


# ---------------------------------------------------------------- evaluation

def _load_results(path) -> list[dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    records = doc["records"] if isinstance(doc, dict) else doc
    if not isinstance(records, list) or not all(isinstance(r, dict) and "id" in r for r in records):
        raise FormatError(f"{path}: expected a list of records with ids")
    return records


def evaluate(manifest: Manifest, records: list[dict], cfg: PipelineConfig = PipelineConfig()) -> EvalReport:
    """Join estimates with ground truth and aggregate."""
    truth = {e.id: e for e in manifest.instances if e.ground_truth is not None}
    ids = {str(r["id"]) for r in records}
    missing = sorted(ids - set(truth))
    if missing:
        raise ConsistencyError(f"no ground truth for ids: {', '.join(missing)}")
    if not ids:
        raise ConsistencyError("results contain no instances")
    shape = manifest.intrinsics.shape
    out = []
    for r in sorted(records, key=lambda r: str(r["id"])):
        e = truth[str(r["id"])]
        gt = e.ground_truth
        rec = dict(r)
        rec.update({"true_area_cm2": gt.area_cm2, "true_theta_deg": gt.angle_deg,
                    "true_volume_cm3": gt.volume_cm3, "true_mass_g": gt.mass_g})
        if gt.mass_g is not None:
            rec["true_grade"] = grade(gt.mass_g, cfg.thresholds)
        if e.truth_mask_path is not None and rec.get("status", "ok") == "ok":
            rec.update(_mask_metrics(e, cfg, shape))
        out.append(rec)
    return build_report(out)


def _mask_metrics(e: ManifestEntry, cfg: PipelineConfig, shape) -> dict:
    truth = load_mask(e.truth_mask_path, shape)
    visible = load_mask(e.mask_path, shape)
    if e.occlusion_label is Occlusion.ISOLATED or cfg.completion is CompletionMethod.NONE:
        restored = visible
    elif cfg.completion is CompletionMethod.EXTERNAL:
        restored = ingest_external(e.completed_mask_path, visible).completed
    else:
        restored = complete_symmetry(visible, cfg.symmetry_axis).completed
    try:
        par = pixel_area_ratio(restored, truth, cfg.metric_mode,
                               visible if cfg.metric_mode is MetricMode.REGION else None)
    except DivisionUndefinedError:
        par = None          # region mode on a fruit with nothing missing
    return {"par": par, "iou": iou(restored, truth)}
