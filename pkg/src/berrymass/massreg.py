"""From fruit pixels to grams: metric area, tilt correction, calibration, grading."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import CameraIntrinsics, DepthRaster, RasterMask, check_shapes
from .errors import AreaUnavailableError, FitError, FormatError, ValidationError

THETA_CAP_DEG = 75.0
DEFAULT_DENSITY = 0.95

# published cubic area -> volume calibration (cm^2 -> cm^3)
REFERENCE_COEFFICIENTS = (-24.9926, 7.1919, -0.3063, 0.0052)


@dataclass(frozen=True)
class CalibrationSample:
    area: float
    volume: float

    def __post_init__(self):
        if not (self.area > 0 and self.volume > 0):
            raise ValidationError(f"calibration sample needs positive area and volume, got {self}")


@dataclass(frozen=True)
class PolynomialModel:
    """``volume = sum(coefficients[k] * area**k)``, areas in cm^2."""

    coefficients: tuple
    r_squared: float = 1.0
    residual_variance: float = 0.0
    domain: tuple = (-math.inf, math.inf)

    def __post_init__(self):
        c = tuple(float(x) for x in self.coefficients)
        if len(c) < 2:
            raise ValidationError("a model needs degree >= 1")
        if not all(math.isfinite(x) for x in c):
            raise ValidationError("coefficients must be finite")
        if self.r_squared > 1 + 1e-12:
            raise ValidationError(f"r_squared {self.r_squared} > 1")
        if self.residual_variance < 0:
            raise ValidationError("residual_variance must be >= 0")
        lo, hi = (float(x) for x in self.domain)
        if lo > hi:
            raise ValidationError(f"empty domain {self.domain}")
        object.__setattr__(self, "coefficients", c)
        object.__setattr__(self, "domain", (lo, hi))

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    @classmethod
    def reference(cls) -> "PolynomialModel":
        return cls(REFERENCE_COEFFICIENTS)

    def to_dict(self) -> dict:
        return {"degree": self.degree, "coefficients": list(self.coefficients),
                "r_squared": self.r_squared, "residual_variance": self.residual_variance,
                "domain": [x if math.isfinite(x) else None for x in self.domain]}

    @classmethod
    def from_dict(cls, d: dict) -> "PolynomialModel":
        try:
            coef = [float(x) for x in d["coefficients"]]
            if "degree" in d and int(d["degree"]) != len(coef) - 1:
                raise ValidationError(f"degree {d['degree']} disagrees with {len(coef)} coefficients")
            lo, hi = d.get("domain") or (None, None)
            dom = (-math.inf if lo is None else float(lo), math.inf if hi is None else float(hi))
            return cls(tuple(coef), float(d.get("r_squared", 1.0)),
                       float(d.get("residual_variance", 0.0)), dom)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad model document: {exc}") from None


@dataclass(frozen=True)
class VolumePrediction:
    volume: float
    raw: float
    out_of_domain: bool


@dataclass(frozen=True)
class GradeThresholds:
    a_min: float = 30.0
    b_min: float = 20.0
    c_min: float = 10.0

    def __post_init__(self):
        if not (self.a_min > self.b_min > self.c_min > 0):
            raise ValidationError(f"thresholds must satisfy a > b > c > 0, got {self}")


# ---------------------------------------------------------------- area

def projected_area_metric(mask: RasterMask, depth: DepthRaster, k: CameraIntrinsics) -> float:
    """Metric area of the fruit pixels in cm^2, summing each pixel's footprint at its depth."""
    check_shapes(k, mask, depth)
    fruit = mask.fruit
    if not fruit.any():
        raise AreaUnavailableError("mask has no fruit pixels")
    z = depth.values[fruit].astype(np.float64) / 1000.0
    ok = z > 0
    if not ok.any():
        raise AreaUnavailableError("no valid depth on the fruit")
    z = np.where(ok, z, np.rint(z[ok].mean() * 1000.0) / 1000.0)
    return float(np.sum(z * z) / (k.fx * k.fy) * 1e4)


def frontal_area(area_visible: float, theta_deg: float, cap_deg: float = THETA_CAP_DEG) -> tuple[float, bool]:
    """Undo the cos(theta) foreshortening; theta is capped to keep the division sane."""
    if not 0 <= theta_deg < 90:
        raise ValidationError(f"theta must be in [0, 90), got {theta_deg}")
    capped = theta_deg > cap_deg
    t = cap_deg if capped else theta_deg
    return area_visible / math.cos(math.radians(t)), capped


# ---------------------------------------------------------------- calibration

def fit_polynomial(samples: Sequence[CalibrationSample], degree: int = 3) -> PolynomialModel:
    return fit_arrays([s.area for s in samples], [s.volume for s in samples], degree)


def fit_arrays(areas, volumes, degree: int = 3) -> PolynomialModel:
    """Least-squares fit on raw arrays; volumes are not required to be positive."""
    if degree < 1:
        raise ValidationError("degree must be >= 1")
    a = np.asarray(areas, dtype=np.float64).ravel()
    v = np.asarray(volumes, dtype=np.float64).ravel()
    if a.shape != v.shape:
        raise ValidationError(f"{len(a)} areas but {len(v)} volumes")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(v))):
        raise ValidationError("areas and volumes must be finite")
    m = len(a)
    if m < degree + 2:
        raise FitError(f"{m} samples cannot fit degree {degree}; need at least {degree + 2}")
    if len(np.unique(a)) < degree + 1:
        raise FitError(f"only {len(np.unique(a))} distinct areas for degree {degree}")
    X = np.vander(a, degree + 1, increasing=True)
    Q, R = np.linalg.qr(X)
    if np.min(np.abs(np.diag(R))) <= 1e-12 * np.max(np.abs(np.diag(R))):
        raise FitError("design matrix is rank deficient")
    beta = np.linalg.solve(R, Q.T @ v)
    resid = v - X @ beta
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((v - v.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return PolynomialModel(tuple(beta), min(r2, 1.0), ss_res / (m - degree - 1), (float(a.min()), float(a.max())))


def predict_volume(model: PolynomialModel, area: float) -> VolumePrediction:
    if not area > 0:
        raise ValidationError(f"area must be positive, got {area}")
    raw = 0.0
    for c in reversed(model.coefficients):
        raw = raw * area + c
    lo, hi = model.domain
    flag = raw < 0 or not lo <= area <= hi
    return VolumePrediction(max(raw, 0.0), raw, flag)


def mass_from_volume(volume: float, rho: float = DEFAULT_DENSITY) -> float:
    if volume < 0:
        raise ValidationError(f"volume must be >= 0, got {volume}")
    if not 0.5 <= rho <= 1.5:
        raise ValidationError(f"density {rho} outside [0.5, 1.5] g/cm^3")
    return rho * volume


def grade(mass: float, t: GradeThresholds = GradeThresholds()) -> str:
    if mass < 0:
        raise ValidationError(f"mass must be >= 0, got {mass}")
    if mass > t.a_min:
        return "A"
    if mass > t.b_min:
        return "B"
    if mass > t.c_min:
        return "C"
    return "D"


# ---------------------------------------------------------------- files

CSV_HEADER = ("area_cm2", "volume_cm3")


def load_calibration_csv(path) -> list[CalibrationSample]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise FormatError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                out.append(CalibrationSample(float(row[0]), float(row[1])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def save_calibration_csv(samples: Iterable[CalibrationSample], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in samples:
            w.writerow([repr(s.area), repr(s.volume)])


def save_model(model: PolynomialModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_model(path) -> PolynomialModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return PolynomialModel.from_dict(doc)
