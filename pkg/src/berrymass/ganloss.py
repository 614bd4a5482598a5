"""Closed-form cycle-consistent adversarial objective over supplied evaluations.

No networks are run here.  Callers provide the arrays that the mappings and
discriminators produced and get the loss values back, which keeps the loss
arithmetic testable on its own.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArityError, ShapeError, ValidationError

CLAMP = 1e-7
DEFAULT_LAMBDA = 10.0


def _batch(values, name: str) -> list[np.ndarray]:
    out = [np.asarray(v, dtype=np.float64).reshape(-1) for v in values]
    if not out:
        raise ArityError(f"{name} batch is empty")
    n = len(out[0])
    if any(len(v) != n for v in out):
        raise ShapeError(f"{name} samples differ in length")
    return out


@dataclass(frozen=True)
class MappingBatch:
    """Domain-A samples ``x``, domain-B samples ``y`` and their round trips."""

    x: Sequence
    y: Sequence
    fgx: Sequence
    gfy: Sequence

    def __post_init__(self):
        for a, b, label in ((self.x, self.fgx, "x/fgx"), (self.y, self.gfy, "y/gfy")):
            xa, xb = _batch(a, label), _batch(b, label)
            if len(xa) != len(xb):
                raise ShapeError(f"{label}: {len(xa)} vs {len(xb)} samples")
            if len(xa[0]) != len(xb[0]):
                raise ShapeError(f"{label}: sample length {len(xa[0])} vs {len(xb[0])}")
        for f in ("x", "y", "fgx", "gfy"):
            object.__setattr__(self, f, np.stack(_batch(getattr(self, f), f)))


@dataclass(frozen=True)
class DiscriminatorBatch:
    """Discriminator outputs on real and on generated samples, clamped into (0, 1)."""

    d_real: Sequence
    d_fake: Sequence

    def __post_init__(self):
        for f in ("d_real", "d_fake"):
            v = np.asarray(getattr(self, f), dtype=np.float64).reshape(-1)
            if v.size == 0:
                raise ArityError(f"{f} is empty")
            if not np.isfinite(v).all():
                raise ValidationError(f"{f} contains non-finite values")
            object.__setattr__(self, f, np.clip(v, CLAMP, 1.0 - CLAMP))


@dataclass(frozen=True)
class ObjectiveWeights:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValidationError(f"lambda must be finite and >= 0, got {self.lam}")


def cycle_loss(batch: MappingBatch) -> float:
    """Mean L1 round-trip error in both directions."""
    fwd = np.abs(batch.fgx - batch.x).sum(axis=1).mean()
    bwd = np.abs(batch.gfy - batch.y).sum(axis=1).mean()
    return float(fwd + bwd)


def adversarial_loss(batch: DiscriminatorBatch) -> float:
    return float(np.log(batch.d_real).mean() + np.log1p(-batch.d_fake).mean())


def total_objective(gan_ab: float, gan_ba: float, cyc: float,
                    w: ObjectiveWeights = ObjectiveWeights()) -> float:
    vals = (gan_ab, gan_ba, cyc)
    if not all(math.isfinite(v) for v in vals):
        raise ValidationError("objective terms must be finite")
    return float(gan_ab + gan_ba + w.lam * cyc)


def evaluate(doc: dict) -> dict:
    """Loss values for a JSON-style document.

    Expected keys: ``mapping`` {x, y, fgx, gfy}, ``adv_ab`` and ``adv_ba``
    {d_real, d_fake}, and optionally ``lambda``.
    """
    try:
        m = doc["mapping"]
        mapping = MappingBatch(m["x"], m["y"], m["fgx"], m["gfy"])
        ab = DiscriminatorBatch(doc["adv_ab"]["d_real"], doc["adv_ab"]["d_fake"])
        ba = DiscriminatorBatch(doc["adv_ba"]["d_real"], doc["adv_ba"]["d_fake"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed loss document: missing {exc}") from None
    w = ObjectiveWeights(float(doc.get("lambda", DEFAULT_LAMBDA)))
    cyc = cycle_loss(mapping)
    gab, gba = adversarial_loss(ab), adversarial_loss(ba)
    return {"cycle_loss": cyc, "adversarial_ab": gab, "adversarial_ba": gba,
            "lambda": w.lam, "total_objective": total_objective(gab, gba, cyc, w)}


def evaluate_file(path) -> dict:
    return evaluate(json.loads(Path(path).read_text(encoding="utf-8")))
