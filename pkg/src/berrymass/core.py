"""Domain types, file I/O and pinhole back-projection.

Masks and depth maps are stored as binary PGM (P5): 8-bit for masks,
16-bit big-endian millimetres for depth.  Point clouds are plain text,
one ``x y z label`` record per line.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConsistencyError, EmptyCloudError, FormatError, ValidationError

FRUIT = 255
BACKGROUND = 0
MASK_THRESHOLD = 128

DEPTH_MIN_MM = 100
DEPTH_MAX_MM = 10000

UNKNOWN, STEM, TIP, BELLY = 0, 1, 2, 3
LABELS = (UNKNOWN, STEM, TIP, BELLY)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} frame"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class RasterMask:
    """Binary instance mask; ``values`` is an (H, W) uint8 array of 0/255."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {v.shape}")
        if v.dtype == bool:
            v = np.where(v, FRUIT, BACKGROUND).astype(np.uint8)
        v = v.astype(np.uint8, copy=False)
        if not np.isin(v, (BACKGROUND, FRUIT)).all():
            raise ValidationError("mask values must be 0 or 255")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_bool(cls, fruit: np.ndarray) -> "RasterMask":
        return cls(np.where(fruit, FRUIT, BACKGROUND).astype(np.uint8))

    @property
    def fruit(self) -> np.ndarray:
        return self.values == FRUIT

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        return isinstance(other, RasterMask) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class DepthRaster:
    """Depth image in millimetres; 0 marks an invalid pixel."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValidationError(f"depth must be 2-D, got shape {v.shape}")
        if v.dtype != np.uint16:
            if np.any(v < 0) or np.any(v > 65535):
                raise ValidationError("depth values must fit in uint16")
            v = v.astype(np.uint16)
        object.__setattr__(self, "values", _frozen(v))

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        return isinstance(other, DepthRaster) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Camera-frame points in metres (+z forward, +y image-down) with region labels."""

    points: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(p).all():
            raise ValidationError("point coordinates must be finite")
        if self.labels is None:
            lab = np.zeros(len(p), dtype=np.int8)
        else:
            lab = np.asarray(self.labels).astype(np.int8).reshape(-1)
        if len(lab) != len(p):
            raise ConsistencyError(f"{len(lab)} labels for {len(p)} points")
        if len(lab) and not np.isin(lab, LABELS).all():
            raise ValidationError("labels must be in {0, 1, 2, 3}")
        object.__setattr__(self, "points", _frozen(p))
        object.__setattr__(self, "labels", _frozen(lab))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_labeled(self) -> bool:
        return bool(np.any(self.labels != UNKNOWN))

    def __eq__(self, other):
        return (isinstance(other, PointCloud)
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.labels, other.labels))


class Occlusion(str, Enum):
    OCCLUDED = "occluded"
    ISOLATED = "isolated"


@dataclass(frozen=True)
class GroundTruth:
    area_cm2: Optional[float] = None
    angle_deg: Optional[float] = None
    volume_cm3: Optional[float] = None
    mass_g: Optional[float] = None

    def __post_init__(self):
        for name in ("area_cm2", "volume_cm3", "mass_g"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValidationError(f"ground truth {name} must be positive, got {v}")
        if self.angle_deg is not None and self.angle_deg < 0:
            raise ValidationError(f"ground truth angle must be >= 0, got {self.angle_deg}")

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(**{k: (None if d.get(k) is None else float(d[k]))
                      for k in ("area_cm2", "angle_deg", "volume_cm3", "mass_g")})

    def to_dict(self) -> dict:
        return {"area_cm2": self.area_cm2, "angle_deg": self.angle_deg,
                "volume_cm3": self.volume_cm3, "mass_g": self.mass_g}


@dataclass(frozen=True)
class FruitInstance:
    id: str
    mask: RasterMask
    occlusion_label: Occlusion
    depth: DepthRaster
    intrinsics: CameraIntrinsics
    ground_truth: Optional[GroundTruth] = None
    completed_mask_path: Optional[Path] = None

    def __post_init__(self):
        check_shapes(self.intrinsics, self.mask, self.depth)


def check_shapes(k: CameraIntrinsics, *rasters) -> None:
    for r in rasters:
        if r.shape != k.shape:
            raise ConsistencyError(
                f"raster is {r.width}x{r.height}, intrinsics expect {k.width}x{k.height}"
            )


# ---------------------------------------------------------------- PGM I/O

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def _read_pgm(path) -> tuple[int, int, int, bytes]:
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: non-integer PGM header field") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad PGM header {width}x{height} maxval {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after PGM header")
    return width, height, maxval, data[pos + 1:]


def _write_pgm(path, arr: np.ndarray, maxval: int) -> None:
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    payload = arr.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    Path(path).write_bytes(header + payload)


def load_mask(path, expected_shape: Optional[tuple[int, int]] = None) -> RasterMask:
    """Read an 8-bit PGM mask; samples >= 128 become fruit (255)."""
    width, height, maxval, payload = _read_pgm(path)
    if maxval != 255:
        raise FormatError(f"{path}: mask maxval must be 255, got {maxval}")
    if len(payload) < width * height:
        raise OSError(f"{path}: truncated mask payload ({len(payload)} of {width * height} bytes)")
    raw = np.frombuffer(payload, dtype=np.uint8, count=width * height).reshape(height, width)
    if expected_shape is not None and raw.shape != tuple(expected_shape):
        raise ConsistencyError(f"{path}: mask is {width}x{height}, expected "
                               f"{expected_shape[1]}x{expected_shape[0]}")
    return RasterMask.from_bool(raw >= MASK_THRESHOLD)


def save_mask(mask: RasterMask, path) -> None:
    _write_pgm(path, mask.values, 255)


def load_depth(path, expected_shape: Optional[tuple[int, int]] = None) -> DepthRaster:
    """Read a 16-bit big-endian PGM depth map; out-of-range values become 0."""
    width, height, maxval, payload = _read_pgm(path)
    if maxval != 65535:
        raise FormatError(f"{path}: depth maxval must be 65535, got {maxval}")
    n = width * height
    if len(payload) < 2 * n:
        raise OSError(f"{path}: truncated depth payload ({len(payload)} of {2 * n} bytes)")
    raw = np.frombuffer(payload, dtype=">u2", count=n).reshape(height, width).astype(np.uint16)
    if expected_shape is not None and raw.shape != tuple(expected_shape):
        raise ConsistencyError(f"{path}: depth is {width}x{height}, expected "
                               f"{expected_shape[1]}x{expected_shape[0]}")
    ok = (raw >= DEPTH_MIN_MM) & (raw <= DEPTH_MAX_MM)
    return DepthRaster(np.where(ok, raw, 0).astype(np.uint16))


def save_depth(depth: DepthRaster, path) -> None:
    _write_pgm(path, depth.values, 65535)


# ---------------------------------------------------------------- point clouds

def load_pointcloud(path) -> PointCloud:
    points, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 'x y z label', got {len(parts)} fields")
            try:
                x, y, z = (float(t) for t in parts[:3])
                lab = int(parts[3])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric token in {s!r}") from None
            if lab not in LABELS:
                raise ValidationError(f"{path}:{lineno}: label {lab} not in {{0,1,2,3}}")
            points.append((x, y, z))
            labels.append(lab)
    return PointCloud(np.array(points, dtype=np.float64).reshape(-1, 3), np.array(labels, dtype=np.int8))


def save_pointcloud(cloud: PointCloud, path) -> None:
    lines = ["# x y z label (metres, camera frame)"]
    lines += [f"{x:.9g} {y:.9g} {z:.9g} {int(l)}" for (x, y, z), l in zip(cloud.points, cloud.labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- geometry

def mask_area_px(mask: RasterMask) -> int:
    return int(np.count_nonzero(mask.values == FRUIT))


def deproject(mask: RasterMask, depth: DepthRaster, k: CameraIntrinsics) -> PointCloud:
    """Back-project fruit pixels with valid depth through the pinhole model."""
    check_shapes(k, mask, depth)
    sel = mask.fruit & depth.valid
    v, u = np.nonzero(sel)
    if len(u) == 0:
        raise EmptyCloudError("no fruit pixel carries valid depth")
    z = depth.values[v, u].astype(np.float64) / 1000.0
    x = (u - k.cx) * z / k.fx
    y = (v - k.cy) * z / k.fy
    return PointCloud(np.column_stack([x, y, z]))


def project(points: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Continuous pixel coordinates (u, v) of camera-frame points."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u = p[:, 0] * k.fx / p[:, 2] + k.cx
    v = p[:, 1] * k.fy / p[:, 2] + k.cy
    return u, v


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    mask_path: Path
    depth_path: Path
    occlusion_label: Occlusion
    completed_mask_path: Optional[Path] = None
    ground_truth: Optional[GroundTruth] = None
    truth_mask_path: Optional[Path] = None

    def to_dict(self, base: Optional[Path] = None) -> dict:
        def rel(p):
            if p is None:
                return None
            p = Path(p)
            if base is not None:
                try:
                    return str(p.relative_to(base))
                except ValueError:
                    pass
            return str(p)

        d = {"id": self.id, "mask": rel(self.mask_path), "depth": rel(self.depth_path),
             "occlusion_label": self.occlusion_label.value}
        if self.completed_mask_path is not None:
            d["completed_mask"] = rel(self.completed_mask_path)
        if self.truth_mask_path is not None:
            d["truth_mask"] = rel(self.truth_mask_path)
        if self.ground_truth is not None:
            d["ground_truth"] = self.ground_truth.to_dict()
        return d


@dataclass(frozen=True)
class Manifest:
    intrinsics: CameraIntrinsics
    instances: tuple[ManifestEntry, ...] = field(default_factory=tuple)

    def ids(self) -> list[str]:
        return [e.id for e in self.instances]

    def load(self, entry: ManifestEntry) -> FruitInstance:
        shape = self.intrinsics.shape
        return FruitInstance(
            id=entry.id,
            mask=load_mask(entry.mask_path, shape),
            occlusion_label=entry.occlusion_label,
            depth=load_depth(entry.depth_path, shape),
            intrinsics=self.intrinsics,
            ground_truth=entry.ground_truth,
            completed_mask_path=entry.completed_mask_path,
        )


def load_manifest(path) -> Manifest:
    """Parse a manifest JSON; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    base = path.parent

    def resolve(p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else base / p

    try:
        k = CameraIntrinsics.from_dict(doc["intrinsics"])
        entries = []
        seen = set()
        for item in doc.get("instances", []):
            iid = str(item["id"])
            if iid in seen:
                raise ConsistencyError(f"{path}: duplicate instance id {iid!r}")
            seen.add(iid)
            gt = item.get("ground_truth")
            entries.append(ManifestEntry(
                id=iid,
                mask_path=resolve(item["mask"]),
                depth_path=resolve(item["depth"]),
                occlusion_label=Occlusion(item["occlusion_label"]),
                completed_mask_path=resolve(item.get("completed_mask")),
                ground_truth=GroundTruth.from_dict(gt) if gt else None,
                truth_mask_path=resolve(item.get("truth_mask")),
            ))
    except KeyError as e:
        raise FormatError(f"{path}: missing field {e}") from None
    except (ValueError, TypeError) as e:
        raise FormatError(f"{path}: {e}") from None
    return Manifest(k, tuple(entries))


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    doc = {"intrinsics": manifest.intrinsics.to_dict(),
           "instances": [e.to_dict(base=path.parent) for e in manifest.instances]}
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
