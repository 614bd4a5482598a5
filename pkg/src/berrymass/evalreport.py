"""Error statistics and the JSON batch report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ArityError, DivisionUndefinedError, FormatError, ValidationError

IOU_BINS = ((0.0, 0.6), (0.6, 0.8), (0.8, 0.9), (0.9, 1.0))
BIN_LABELS = ("[0.0,0.6)", "[0.6,0.8)", "[0.8,0.9)", "[0.9,1.0]")
QUANTITIES = ("area", "theta", "volume", "mass")
PAR_BAND = (0.85, 1.15)


def percent_error(predicted: float, truth: float) -> float:
    if not truth > 0:
        raise DivisionUndefinedError(f"percent error undefined for truth {truth}")
    return 100.0 * abs(predicted - truth) / truth


@dataclass(frozen=True)
class ErrorStats:
    mean_percent_error: float
    variance: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("ErrorStats needs n >= 1")
        if self.variance < 0:
            raise ValidationError("variance must be >= 0")

    def to_dict(self) -> dict:
        return {"mean_percent_error": self.mean_percent_error, "variance": self.variance, "n": self.n}

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorStats":
        return cls(float(d["mean_percent_error"]), float(d["variance"]), int(d["n"]))


def aggregate_stats(pairs: Iterable[tuple[float, float]]) -> ErrorStats:
    """Mean percent error and population variance of the raw deviations."""
    pairs = list(pairs)
    if not pairs:
        raise ArityError("no (predicted, truth) pairs")
    pe = [percent_error(p, t) for p, t in pairs]
    dev = np.array([p - t for p, t in pairs], dtype=np.float64)
    return ErrorStats(float(np.mean(pe)), float(np.var(dev)), len(pairs))


def iou_histogram(values: Sequence[float]) -> tuple[float, float, float, float]:
    """Fraction of values per bin; bins are lower-inclusive and the last is closed at 1."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ArityError("no values to bin")
    if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
        raise ValidationError("histogram values must lie in [0, 1]")
    idx = np.searchsorted([b[1] for b in IOU_BINS[:-1]], v, side="right")
    counts = np.bincount(idx, minlength=len(IOU_BINS))
    return tuple(float(c) / v.size for c in counts)


@dataclass(frozen=True)
class Distribution:
    """Mean and population variance of a dimensionless per-fruit score."""

    mean: float
    variance: float
    n: int

    @classmethod
    def of(cls, values: Sequence[float]) -> "Distribution":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise ArityError("no values")
        return cls(float(v.mean()), float(v.var()), int(v.size))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "variance": self.variance, "n": self.n}

    @classmethod
    def from_dict(cls, d: dict) -> "Distribution":
        return cls(float(d["mean"]), float(d["variance"]), int(d["n"]))


# ---------------------------------------------------------------- report

# per-fruit record keys, in output order
RECORD_FIELDS = ("id", "occlusion_label", "status", "error",
                 "area_cm2", "true_area_cm2", "theta_deg", "true_theta_deg",
                 "volume_cm3", "true_volume_cm3", "mass_g", "true_mass_g",
                 "grade", "true_grade", "par", "iou")


def _ordered(record: dict) -> dict:
    out = {k: record[k] for k in RECORD_FIELDS if k in record}
    for k in sorted(set(record) - set(out)):
        out[k] = record[k]
    return out


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)         # label -> quantity -> ErrorStats
    histograms: dict = field(default_factory=dict)    # "iou" -> four fractions
    par_in_band: Optional[float] = None               # fraction of PAR values inside PAR_BAND
    completion: dict = field(default_factory=dict)    # "par" / "iou" -> Distribution

    def to_dict(self) -> dict:
        doc = {"records": [_ordered(r) for r in sorted(self.records, key=lambda r: str(r["id"]))]}
        if self.stats:
            doc["stats"] = {label: {q: self.stats[label][q].to_dict() for q in QUANTITIES if q in self.stats[label]}
                            for label in sorted(self.stats)}
        if self.histograms:
            doc["histograms"] = {name: dict(zip(BIN_LABELS, self.histograms[name]))
                                 for name in sorted(self.histograms)}
        if self.completion:
            doc["completion"] = {name: self.completion[name].to_dict() for name in sorted(self.completion)}
        if self.par_in_band is not None:
            doc["par_in_band"] = self.par_in_band
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        try:
            stats = {label: {q: ErrorStats.from_dict(s) for q, s in qs.items()}
                     for label, qs in doc.get("stats", {}).items()}
            hist = {name: tuple(float(h[b]) for b in BIN_LABELS) for name, h in doc.get("histograms", {}).items()}
            band = doc.get("par_in_band")
            comp = {name: Distribution.from_dict(d) for name, d in doc.get("completion", {}).items()}
            return cls(list(doc["records"]), stats, hist, None if band is None else float(band), comp)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad report document: {exc}") from None


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def emit_report(report: EvalReport, path) -> None:
    Path(path).write_text(dumps(report.to_dict()), encoding="utf-8")


def read_report(path) -> EvalReport:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return EvalReport.from_dict(doc)


def build_report(records: Sequence[dict]) -> EvalReport:
    """Aggregate per-fruit records that carry both estimates and ground truth.

    Statistics are grouped by occlusion label and also pooled under ``all``;
    failed records are kept in the listing but left out of the statistics.
    """
    ok = [r for r in records if r.get("status", "ok") == "ok"]
    stats: dict = {}
    keys = {"area": ("area_cm2", "true_area_cm2"), "theta": ("theta_deg", "true_theta_deg"),
            "volume": ("volume_cm3", "true_volume_cm3"), "mass": ("mass_g", "true_mass_g")}
    for label in sorted({r["occlusion_label"] for r in ok}) + ["all"]:
        group = [r for r in ok if label == "all" or r["occlusion_label"] == label]
        per_q = {}
        for q, (pk, tk) in keys.items():
            pairs = [(r[pk], r[tk]) for r in group if r.get(pk) is not None and r.get(tk) is not None
                     and r[tk] > 0]
            if pairs:
                per_q[q] = aggregate_stats(pairs)
        if per_q:
            stats[label] = per_q
    ious = [r["iou"] for r in ok if r.get("iou") is not None]
    pars = [r["par"] for r in ok if r.get("par") is not None]
    hist = {"iou": iou_histogram(ious)} if ious else {}
    band = None
    comp = {}
    if pars:
        band = sum(PAR_BAND[0] <= p <= PAR_BAND[1] for p in pars) / len(pars)
        comp["par"] = Distribution.of(pars)
    if ious:
        comp["iou"] = Distribution.of(ious)
    return EvalReport(list(records), stats, hist, band, comp)
