"""Synthetic strawberry oracle.

Fruits are solids of revolution with radial profile
``r(t) = R * sin(pi * t**p)`` where ``t`` runs from 0 at the stem to 1 at
the tip.  Volume and silhouette area follow from 1-D quadrature, so every
downstream stage can be checked against exact ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, ndimage

from .core import (BELLY, STEM, TIP, CameraIntrinsics, DepthRaster, GroundTruth,
                   PointCloud, RasterMask, mask_area_px)
from .errors import OcclusionError, RenderError, SamplingError, ValidationError
from .massreg import CalibrationSample

STEM_CUT = 0.15
TIP_CUT = 0.85

DEFAULT_INTRINSICS = CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass(frozen=True)
class FruitShapeParams:
    length: float          # L, metres along the axis
    max_radius: float      # R, metres
    profile_exponent: float = 1.0  # p

    def __post_init__(self):
        if not 0.01 <= self.length <= 0.10:
            raise ValidationError(f"length {self.length} m outside [0.01, 0.10]")
        if not 0.005 <= self.max_radius <= 0.05:
            raise ValidationError(f"max_radius {self.max_radius} m outside [0.005, 0.05]")
        if not 0.3 <= self.profile_exponent <= 3:
            raise ValidationError(f"profile_exponent {self.profile_exponent} outside [0.3, 3]")


@dataclass(frozen=True)
class ScenePose:
    tilt_deg: float = 0.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.5)

    def __post_init__(self):
        if not 0 <= self.tilt_deg < 90:
            raise ValidationError(f"tilt_deg {self.tilt_deg} outside [0, 90)")
        if len(self.center) != 3 or not self.center[2] > 0.2:
            raise ValidationError(f"center {self.center} must be (x, y, z) with z > 0.2 m")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))


@dataclass(frozen=True)
class OcclusionSpec:
    """Occluder description.

    ``one_sided`` confines the removed region to one side of the mask's
    major principal axis, which leaves the mirror half intact.
    """

    kind: str = "ellipse"
    coverage: float = 0.25
    seed: int = 0
    one_sided: bool = False

    def __post_init__(self):
        if self.kind not in ("ellipse", "band"):
            raise ValidationError(f"occlusion kind {self.kind!r} not in {{ellipse, band}}")
        if not 0 < self.coverage <= 0.6:
            raise ValidationError(f"coverage {self.coverage} outside (0, 0.6]")


# ---------------------------------------------------------------- analytic oracle

def profile_radius(t, params: FruitShapeParams):
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValidationError("profile parameter t must lie in [0, 1]")
    tp = t ** params.profile_exponent
    # sin(pi) is not exactly 0 in floating point; the tip must close exactly
    r = np.where(tp >= 1.0, 0.0, params.max_radius * np.sin(np.pi * tp))
    r = np.clip(r, 0.0, params.max_radius)
    return float(r) if r.ndim == 0 else r


def _profile_slope(t: np.ndarray, params: FruitShapeParams) -> np.ndarray:
    """dr/dt; finite everywhere except t=0 when p < 1."""
    p = params.profile_exponent
    with np.errstate(divide="ignore", invalid="ignore"):
        d = params.max_radius * np.cos(np.pi * t ** p) * np.pi * p * t ** (p - 1)
    return np.nan_to_num(d, nan=0.0, posinf=1e6, neginf=-1e6)


def _quad(f) -> float:
    # the integrand is only weakly singular at t=0 for small p; points help quad
    val, _ = integrate.quad(f, 0.0, 1.0, epsabs=0.0, epsrel=1e-12, limit=400, points=(0.5,))
    return val


def analytic_volume(params: FruitShapeParams) -> float:
    """Solid-of-revolution volume in cm^3."""
    I = _quad(lambda t: profile_radius(t, params) ** 2)
    return math.pi * params.length * I * 1e6


def analytic_frontal_area(params: FruitShapeParams) -> float:
    """Silhouette area in cm^2 when viewed perpendicular to the axis."""
    I = _quad(lambda t: profile_radius(t, params))
    return 2.0 * params.length * I * 1e4


def analytic_surface_area(params: FruitShapeParams) -> float:
    """Total lateral surface area in cm^2."""
    L = params.length
    I = _quad(lambda t: profile_radius(t, params) * math.hypot(L, float(_profile_slope(np.array(t), params))))
    return 2.0 * math.pi * I * 1e4


def ground_truth(params: FruitShapeParams, pose: ScenePose, rho: float = 0.95) -> GroundTruth:
    v = analytic_volume(params)
    return GroundTruth(area_cm2=analytic_frontal_area(params), angle_deg=float(pose.tilt_deg),
                       volume_cm3=v, mass_g=rho * v)


def random_shape(rng: np.random.Generator) -> FruitShapeParams:
    """Strawberry-sized profile: about 4 cm long and 3 cm wide, scaled by up to 25%."""
    s = rng.uniform(0.75, 1.25)
    return FruitShapeParams(0.04 * s * rng.uniform(0.95, 1.05), 0.015 * s * rng.uniform(0.95, 1.05),
                            rng.uniform(0.9, 1.1))


def calibration_samples(n: int, seed: int = 0) -> list[CalibrationSample]:
    """Exact (frontal area, volume) pairs for ``n`` random strawberry shapes."""
    rng = np.random.default_rng(seed)
    shapes = [random_shape(rng) for _ in range(n)]
    return [CalibrationSample(analytic_frontal_area(s), analytic_volume(s)) for s in shapes]


# ---------------------------------------------------------------- geometry

def tilt_rotation(tilt_deg: float) -> np.ndarray:
    """Rotation about the camera x-axis; positive tilt brings the tip towards the camera."""
    a = math.radians(tilt_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


CAMERA_UP = np.array([0.0, -1.0, 0.0])


def fruit_axis(pose: ScenePose) -> np.ndarray:
    """Unit vector from tip towards stem in camera coordinates."""
    return tilt_rotation(pose.tilt_deg) @ CAMERA_UP


def _surface(t, phi, params, pose):
    rot = tilt_rotation(pose.tilt_deg)
    e_ax = rot @ CAMERA_UP
    e1 = rot @ np.array([1.0, 0.0, 0.0])
    e2 = rot @ np.array([0.0, 0.0, -1.0])
    L = params.length
    r = profile_radius(t, params)
    dr = _profile_slope(t, params)
    radial = np.outer(np.cos(phi), e1) + np.outer(np.sin(phi), e2)
    pts = (np.asarray(pose.center) + np.outer((0.5 - t) * L, e_ax) + r[:, None] * radial)
    normals = radial + (dr / L)[:, None] * e_ax
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return pts, normals


def _t_sampler(params: FruitShapeParams, n_grid: int = 8193):
    u = np.linspace(0.0, 1.0, n_grid)
    t = 0.5 - 0.5 * np.cos(np.pi * u)  # clustered at both caps
    w = profile_radius(t, params) * np.hypot(params.length, _profile_slope(t, params))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(t))])
    cdf /= cdf[-1]
    return cdf, t


def generate_cloud(params: FruitShapeParams, pose: ScenePose, samples_per_cm2: float = 400.0,
                   seed: int = 0, min_points: int = 100) -> PointCloud:
    """Sample the camera-facing half of the fruit surface uniformly by area."""
    rng = np.random.default_rng(seed)
    n_total = int(round(samples_per_cm2 * analytic_surface_area(params)))
    cdf, tgrid = _t_sampler(params)
    t = np.interp(rng.random(n_total), cdf, tgrid)
    phi = rng.random(n_total) * 2.0 * np.pi
    pts, normals = _surface(t, phi, params, pose)
    visible = np.einsum("ij,ij->i", normals, pts) < 0
    if np.count_nonzero(visible) < min_points:
        raise SamplingError(
            f"only {np.count_nonzero(visible)} visible points at {samples_per_cm2} samples/cm^2"
        )
    t, pts = t[visible], pts[visible]
    labels = np.full(len(t), BELLY, dtype=np.int8)
    labels[t < STEM_CUT] = STEM
    labels[t > TIP_CUT] = TIP
    return PointCloud(pts, labels)


def expected_label_fractions(params: FruitShapeParams) -> tuple[float, float, float]:
    """Area-weighted (stem, belly, tip) fractions of a full surface."""
    L = params.length

    def w(t):
        return profile_radius(t, params) * math.hypot(L, float(_profile_slope(np.array(t), params)))

    def part(a, b):
        return integrate.quad(w, a, b, epsrel=1e-10, limit=200)[0]

    s, b, tp = part(0, STEM_CUT), part(STEM_CUT, TIP_CUT), part(TIP_CUT, 1)
    tot = s + b + tp
    return s / tot, b / tot, tp / tot


# ---------------------------------------------------------------- rendering

_CLOSE = np.ones((3, 3), dtype=bool)


def _splat(p: np.ndarray, fx, fy, cx, cy, width, height) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-point z-buffer plus a 1-pixel closing; returns (mask, depth in metres)."""
    u = np.rint(p[:, 0] * fx / p[:, 2] + cx).astype(np.int64)
    v = np.rint(p[:, 1] * fy / p[:, 2] + cy).astype(np.int64)
    inside = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    if not inside.any():
        raise RenderError("no point projects inside the frame")
    flat = v[inside] * width + u[inside]
    z = p[inside, 2]
    order = np.lexsort((z, flat))
    flat, z = flat[order], z[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]

    depth = np.zeros(width * height, dtype=np.float64)
    depth[flat[first]] = z[first]
    depth = depth.reshape(height, width)
    hit = depth > 0

    closed = ndimage.binary_closing(np.pad(hit, 1), structure=_CLOSE)[1:-1, 1:-1]
    added = closed & ~hit
    if added.any():
        total = ndimage.correlate(depth, _CLOSE.astype(float), mode="constant")
        count = ndimage.correlate(hit.astype(float), _CLOSE.astype(float), mode="constant")
        depth[added] = total[added] / np.maximum(count[added], 1)
    return closed, depth


def render(cloud: PointCloud, k: CameraIntrinsics, supersample: int = 1) -> tuple[RasterMask, DepthRaster]:
    """Z-buffer point splatting followed by a 1-pixel closing.

    With ``supersample`` s > 1 the cloud is splatted on an s-times finer grid
    and each output pixel takes the majority vote of its s*s subpixels and the
    mean of their depths.  Plain splatting grows the silhouette by roughly half
    a pixel all round, which matters for small or distant fruit; the cloud
    should then carry a few points per subpixel footprint.
    """
    p = cloud.points
    if len(p) == 0 or np.any(p[:, 2] <= 0):
        raise RenderError("all points must lie in front of the camera")
    s = int(supersample)
    if s < 1:
        raise ValueError(f"supersample must be >= 1, got {supersample}")
    off = (s - 1) / 2.0   # subpixel centres straddle the output pixel centre
    hit, depth = _splat(p, k.fx * s, k.fy * s, k.cx * s + off, k.cy * s + off, k.width * s, k.height * s)
    if s > 1:
        shape = (k.height, s, k.width, s)
        votes = hit.reshape(shape).sum(axis=(1, 3))
        zsum = depth.reshape(shape).sum(axis=(1, 3))
        hit = 2 * votes >= s * s
        depth = np.where(hit, zsum / np.maximum(votes, 1), 0.0)
    depth_mm = np.where(hit, np.clip(np.rint(depth * 1000.0), 1, 65535), 0)
    return RasterMask.from_bool(hit), DepthRaster(depth_mm.astype(np.uint16))


def silhouette_area_cm2(mask: RasterMask, z: float, k: CameraIntrinsics) -> float:
    """Pixel count scaled by the footprint of one pixel at distance ``z``."""
    return mask_area_px(mask) * (z / k.fx) * (z / k.fy) * 1e4


# ---------------------------------------------------------------- occlusion

def _principal_frame(fruit: np.ndarray):
    v, u = np.nonzero(fruit)
    pts = np.column_stack([u, v]).astype(np.float64)
    c = pts.mean(axis=0)
    cov = np.cov((pts - c).T)
    w, vecs = np.linalg.eigh(cov)
    return c, vecs[:, 1], vecs[:, 0]


def _ellipse_region(rng, cand, shape, frame):
    h, w = shape
    cy, cx = cand[rng.integers(len(cand))]
    ang = rng.uniform(0, np.pi)
    aspect = rng.uniform(0.4, 1.0)
    vv, uu = np.mgrid[0:h, 0:w]
    du, dv = uu - cx, vv - cy
    a1 = du * np.cos(ang) + dv * np.sin(ang)
    a2 = -du * np.sin(ang) + dv * np.cos(ang)
    rho2 = a1 ** 2 + (a2 / aspect) ** 2
    return lambda s: rho2 <= s * s


def _band_region(rng, cand, shape, frame):
    h, w = shape
    cy, cx = cand[rng.integers(len(cand))]
    ang = rng.uniform(0, np.pi)
    vv, uu = np.mgrid[0:h, 0:w]
    dist = np.abs((uu - cx) * -np.sin(ang) + (vv - cy) * np.cos(ang))
    return lambda s: dist <= s


def occlude(mask: RasterMask, spec: OcclusionSpec, max_tries: int = 100,
            tolerance: float = 0.05) -> tuple[RasterMask, RasterMask]:
    """Remove a random ellipse or band covering ``spec.coverage`` of the fruit.

    Returns ``(occluded, missing)`` which partition the input mask.
    """
    fruit = mask.fruit
    n = int(fruit.sum())
    if n < 100:
        raise OcclusionError(f"mask has {n} fruit pixels, need at least 100")
    rng = np.random.default_rng(spec.seed)
    allowed = fruit
    if spec.one_sided:
        c, major, minor = _principal_frame(fruit)
        vv, uu = np.mgrid[0:fruit.shape[0], 0:fruit.shape[1]]
        side = (uu - c[0]) * minor[0] + (vv - c[1]) * minor[1]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        allowed = fruit & (sign * side > 0.5)
    cand = np.argwhere(allowed)
    if len(cand) == 0:
        raise OcclusionError("no admissible occluder position")
    builder = _ellipse_region if spec.kind == "ellipse" else _band_region
    target = spec.coverage * n
    diag = float(np.hypot(*fruit.shape))

    for _ in range(max_tries):
        region_at = builder(rng, cand, fruit.shape, None)
        lo, hi = 0.0, diag
        best = None
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            removed = region_at(mid) & allowed
            cnt = int(removed.sum())
            if best is None or abs(cnt - target) < abs(int(best.sum()) - target):
                best = removed
            if cnt < target:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-3:
                break
        if abs(best.sum() / n - spec.coverage) <= tolerance:
            missing = best
            return RasterMask.from_bool(fruit & ~missing), RasterMask.from_bool(missing)
    raise OcclusionError(f"coverage {spec.coverage} unreachable with {spec.kind} after {max_tries} tries")


# ---------------------------------------------------------------- scenes

@dataclass(frozen=True)
class SceneDescription:
    shape: FruitShapeParams
    pose: ScenePose = field(default_factory=ScenePose)
    occlusion: Optional[OcclusionSpec] = None
    samples_per_cm2: float = 3000.0
    seed: int = 0
    supersample: int = 4

    def __post_init__(self):
        if self.supersample < 1:
            raise ValidationError(f"supersample must be >= 1, got {self.supersample}")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDescription":
        sh = d["shape"]
        shape = FruitShapeParams(float(sh["L"]), float(sh["R"]), float(sh.get("p", 1.0)))
        po = d.get("pose", {})
        pose = ScenePose(float(po.get("tilt_deg", 0.0)), tuple(po.get("center", (0.0, 0.0, 0.5))))
        occ = d.get("occlusion")
        occlusion = None
        if occ:
            occlusion = OcclusionSpec(kind=occ.get("kind", "ellipse"), coverage=float(occ["coverage"]),
                                      seed=int(occ.get("seed", 0)), one_sided=bool(occ.get("one_sided", False)))
        return cls(shape, pose, occlusion, float(d.get("samples_per_cm2", 3000.0)), int(d.get("seed", 0)),
                   int(d.get("supersample", 4)))

    def to_dict(self) -> dict:
        d = {"shape": {"L": self.shape.length, "R": self.shape.max_radius, "p": self.shape.profile_exponent},
             "pose": {"tilt_deg": self.pose.tilt_deg, "center": list(self.pose.center)},
             "samples_per_cm2": self.samples_per_cm2, "seed": self.seed, "supersample": self.supersample}
        if self.occlusion is not None:
            o = self.occlusion
            d["occlusion"] = {"kind": o.kind, "coverage": o.coverage, "seed": o.seed, "one_sided": o.one_sided}
        return d


@dataclass(frozen=True)
class SyntheticScene:
    cloud: PointCloud
    mask: RasterMask            # full fruit silhouette
    depth: DepthRaster
    visible: RasterMask         # mask after occlusion (== mask when unoccluded)
    missing: Optional[RasterMask]
    truth: GroundTruth


def synthesize(scene: SceneDescription, k: CameraIntrinsics = DEFAULT_INTRINSICS,
               rho: float = 0.95) -> SyntheticScene:
    cloud = generate_cloud(scene.shape, scene.pose, scene.samples_per_cm2, scene.seed)
    mask, depth = render(cloud, k, scene.supersample)
    visible, missing = mask, None
    if scene.occlusion is not None:
        visible, missing = occlude(mask, scene.occlusion)
        # an occluder hides the depth behind it as well
        depth = DepthRaster(np.where(missing.fruit, 0, depth.values).astype(np.uint16))
    return SyntheticScene(cloud, mask, depth, visible, missing, ground_truth(scene.shape, scene.pose, rho))
