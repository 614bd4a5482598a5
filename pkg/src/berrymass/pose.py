"""Tilt-angle estimation from a single-view fruit point cloud.

The cloud is split into stem, belly and tip regions and a curvature
descent over the belly locates the convex apex.  The fruit axis is then
recovered from rotational symmetry: along the true axis line, each visible
point's distance to the axis is a smooth function of its axial position.
The apex-to-tip direction orients the result.

The simpler construction (apex-to-tip vector projected onto a plane fitted
around the apex) is kept as ``axis_method="projection"``.  On single-view
clouds the visible shell pulls that plane towards the image plane, so it
underestimates strong tilts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from .core import BELLY, STEM, TIP, PointCloud
from .errors import (IndeterminateAxisError, RankDeficiencyError, SparseNeighborhoodError,
                     SplitError, ValidationError)

CAMERA_UP = (0.0, -1.0, 0.0)
REGION_FRACTION = 0.15
MIN_SPLIT_POINTS = 100

# axis-of-revolution search
_PROFILE_DEGREE = 6
_FIT_POINTS = 800
_SMOOTH_K = 24
_GRID_POINTS = 100
_ROLL_CANDIDATES = 5
_ROLL_GRID = np.radians(np.arange(0.0, 180.0, 5.0))
_ANGLE_GRID = np.radians(np.arange(-75.0, 76.0, 7.5))
_OFFSET_GRID = tuple(np.linspace(0.05, 1.2, 12))
_SHIFT_GRID = tuple(np.linspace(-0.3, 0.3, 13))
_MIRROR_KEEP = 0.85
_MIRROR_PROBES = 120
_MIRROR_CAP = 0.15                # reflection distances saturate at this fraction of the probe extent
_START_RATIO = 2.0                # local searches only from grid starts this close to the best


@dataclass(frozen=True)
class RegionSplit:
    stem_idx: np.ndarray
    tip_idx: np.ndarray
    belly_idx: np.ndarray


@dataclass(frozen=True)
class ApexSearchConfig:
    radius: float = 0.008
    k_neighbors: int = 30
    plane_samples: int = 100
    max_iters: int = 50
    seed: int = 0
    vertical: tuple = CAMERA_UP
    axis_method: str = "revolution"

    def __post_init__(self):
        if self.k_neighbors < 4:
            raise ValidationError("k_neighbors must be >= 4")
        if self.plane_samples < 3:
            raise ValidationError("plane_samples must be >= 3")
        if not self.radius > 0:
            raise ValidationError("radius must be positive")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.axis_method not in ("revolution", "projection"):
            raise ValidationError(f"axis_method {self.axis_method!r} not in {{revolution, projection}}")
        v = np.asarray(self.vertical, dtype=float)
        if v.shape != (3,) or not np.linalg.norm(v) > 0:
            raise ValidationError(f"vertical must be a non-zero 3-vector, got {self.vertical}")
        object.__setattr__(self, "vertical", tuple(float(x) for x in v))

    @classmethod
    def from_dict(cls, d: dict) -> "ApexSearchConfig":
        kw = {}
        for key, conv in (("radius", float), ("k_neighbors", int), ("plane_samples", int),
                          ("max_iters", int), ("seed", int), ("axis_method", str), ("vertical", tuple)):
            if key in d:
                kw[key] = conv(d[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {"radius": self.radius, "k_neighbors": self.k_neighbors,
                "plane_samples": self.plane_samples, "max_iters": self.max_iters,
                "seed": self.seed, "vertical": list(self.vertical), "axis_method": self.axis_method}


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float
    rmse: float


@dataclass(frozen=True)
class PoseEstimate:
    theta_deg: float
    axis: np.ndarray
    apex: np.ndarray
    plane: Plane

    @property
    def out_of_plane_deg(self) -> float:
        """Lean of the axis towards or away from the camera."""
        return math.degrees(math.asin(min(1.0, abs(float(self.axis[2])))))

    def to_dict(self) -> dict:
        return {"theta_deg": self.theta_deg,
                "out_of_plane_deg": self.out_of_plane_deg,
                "axis": [float(x) for x in self.axis],
                "apex": [float(x) for x in self.apex],
                "plane_normal": [float(x) for x in self.plane.normal],
                "plane_offset": self.plane.offset,
                "rmse": self.plane.rmse}


# ---------------------------------------------------------------- regions

def _split_along(points: np.ndarray, direction: np.ndarray) -> RegionSplit:
    d = np.asarray(direction, dtype=np.float64)
    # stem end is the extreme nearer camera-up
    if d @ np.asarray(CAMERA_UP) < 0:
        d = -d
    s = (points - points.mean(axis=0)) @ d
    lo, hi = s.min(), s.max()
    cut = REGION_FRACTION * (hi - lo)
    return RegionSplit(np.flatnonzero(s >= hi - cut), np.flatnonzero(s <= lo + cut),
                       np.flatnonzero((s > lo + cut) & (s < hi - cut)))


def _principal_axes(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, vecs = np.linalg.eigh(np.cov((points - points.mean(axis=0)).T))
    return w[::-1], vecs[:, ::-1].T


def split_regions(cloud: PointCloud) -> RegionSplit:
    """Stem/tip/belly index sets, from labels when present, otherwise by PCA extent."""
    n = len(cloud)
    if n < MIN_SPLIT_POINTS:
        raise SplitError(f"cloud has {n} points, need at least {MIN_SPLIT_POINTS}")
    if cloud.is_labeled:
        lab = cloud.labels
        return RegionSplit(np.flatnonzero(lab == STEM), np.flatnonzero(lab == TIP),
                           np.flatnonzero(lab == BELLY))
    w, axes = _principal_axes(cloud.points)
    if w[0] <= 1e-18:
        raise SplitError("degenerate covariance: all points coincide")
    return _split_along(cloud.points, axes[0])


# ---------------------------------------------------------------- apex search

def surface_variation(points: np.ndarray, k: int, tree: Optional[cKDTree] = None) -> np.ndarray:
    """lambda_min / (l1 + l2 + l3) of each point's k-nearest-neighbour covariance."""
    if tree is None:
        tree = cKDTree(points)
    k = min(k, len(points))
    _, idx = tree.query(points, k=k)
    nb = points[idx.reshape(len(points), k)]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / k
    ev = np.linalg.eigvalsh(cov)
    tot = ev.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, ev[:, 0] / tot, 0.0)


def _apex_index(belly: np.ndarray, cfg: ApexSearchConfig) -> int:
    if len(belly) == 0:
        raise SplitError("belly region is empty")
    k = cfg.k_neighbors
    if len(belly) < k:
        raise SparseNeighborhoodError(f"belly has {len(belly)} points, need {k}")
    tree = cKDTree(belly)
    curv = surface_variation(belly, k, tree)
    current = int(np.argmin(np.linalg.norm(belly - belly.mean(axis=0), axis=1)))

    for it in range(cfg.max_iters):
        d, nb = tree.query(belly[current], k=k, distance_upper_bound=cfg.radius)
        nb = nb[np.isfinite(d)]
        if it == 0 and len(nb) < k:
            raise SparseNeighborhoodError(
                f"{len(nb)} belly points within r={cfg.radius} m of the start point, need {k}")
        best = int(nb[np.argmin(curv[nb])])
        # ties (within float noise) keep the current point
        if curv[best] >= curv[current] * (1.0 - 1e-9) - 1e-15:
            break
        current = best
    return current


def find_convex_apex(cloud: PointCloud, split: RegionSplit,
                     cfg: ApexSearchConfig = ApexSearchConfig()) -> np.ndarray:
    """Minimum-curvature point reached by descent from the belly centre."""
    belly = cloud.points[split.belly_idx]
    return belly[_apex_index(belly, cfg)]


# ---------------------------------------------------------------- plane fit

def fit_plane(points) -> Plane:
    """Total-least-squares plane; normal points towards the camera (n_z <= 0)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) < 3:
        raise RankDeficiencyError(f"need at least 3 points, got {len(p)}")
    c = p.mean(axis=0)
    q = p - c
    _, s, vt = np.linalg.svd(q, full_matrices=False)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise RankDeficiencyError("points are collinear")
    n = vt[2]
    if n[2] > 0 or (n[2] == 0 and (n[1] > 0 or (n[1] == 0 and n[0] > 0))):
        n = -n
    rmse = float(np.sqrt(np.mean((q @ n) ** 2)))
    return Plane(n, float(-n @ c), rmse)


# ---------------------------------------------------------------- axis of revolution

def _profile_costs(points: np.ndarray, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Radius-profile misfit for a batch of candidate axis lines.

    For each line, distance-to-axis is regressed on the axial coordinate with a
    Legendre polynomial; the cost is the mean squared residual.
    """
    r = points[None, :, :] - origins[:, None, :]
    s = np.einsum("lnk,lk->ln", r, dirs)
    rho = np.sqrt(np.maximum(np.einsum("lnk,lnk->ln", r, r) - s * s, 0.0))
    lo = s.min(axis=1, keepdims=True)
    hi = s.max(axis=1, keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    V = np.polynomial.legendre.legvander((2.0 * s - (lo + hi)) / span, _PROFILE_DEGREE)
    G = np.einsum("lni,lnj->lij", V, V)
    b = np.einsum("lni,ln->li", V, rho)
    G += np.eye(_PROFILE_DEGREE + 1) * (1e-12 * np.trace(G, axis1=1, axis2=2))[:, None, None]
    coef = np.linalg.solve(G, b[..., None])[..., 0]
    cost = np.maximum(np.einsum("ln,ln->l", rho, rho) - np.einsum("li,li->l", coef, b), 0.0)
    cost /= points.shape[0]
    return np.where(hi[:, 0] > lo[:, 0], cost, np.inf)


def _profile_cost(points: np.ndarray, d: np.ndarray, origin: np.ndarray) -> float:
    """Single-line version of :func:`_profile_costs`, kept lean for the local search."""
    r = points - origin
    s = r @ d
    rho = np.sqrt(np.maximum(np.einsum("ij,ij->i", r, r) - s * s, 0.0))
    lo, hi = s.min(), s.max()
    if hi <= lo:
        return math.inf
    x = (2.0 * s - (lo + hi)) / (hi - lo)
    V = np.empty((len(x), _PROFILE_DEGREE + 1))
    V[:, 0] = 1.0
    for j in range(1, _PROFILE_DEGREE + 1):
        np.multiply(V[:, j - 1], x, out=V[:, j])
    b = rho @ V
    try:
        coef = np.linalg.solve(V.T @ V, b)
    except np.linalg.LinAlgError:
        return math.inf
    return max(float(rho @ rho - coef @ b), 0.0) / len(rho)


def _mirror_scores(points: np.ndarray, probe: np.ndarray, ex: np.ndarray, ey: np.ndarray,
                   rolls: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Trimmed mean squared distance from reflected probe points to the cloud.

    Planes contain the line of sight; each is set by its roll about that line
    and its lateral shift from the origin of ``points``.  The worst reflections
    are trimmed because an occluder leaves a hole that the mirror image of the
    intact side falls into.  Distances saturate at a cap, which
    keeps the tree query bounded.  Returns an array of shape (rolls, shifts).
    """
    tree = cKDTree(points)
    normals = np.cos(rolls)[:, None] * ex - np.sin(rolls)[:, None] * ey
    h = probe @ normals.T                                   # (n, rolls)
    off = h.T[:, None, :] - shifts[None, :, None]           # (rolls, shifts, n)
    refl = probe[None, None, :, :] - 2.0 * off[..., None] * normals[:, None, None, :]
    cap = _MIRROR_CAP * float(np.max(np.abs(probe)))
    dist, _ = tree.query(refl.reshape(-1, 3), distance_upper_bound=cap)
    dist = np.minimum(dist, cap)
    d2 = dist.reshape(len(rolls), len(shifts), -1) ** 2
    keep = max(1, int(round(_MIRROR_KEEP * d2.shape[2])))
    if keep < d2.shape[2]:
        d2 = np.partition(d2, keep - 1, axis=2)[:, :, :keep]
    return d2.mean(axis=2)


def _local_minima(values: np.ndarray, count: int) -> list[int]:
    """Indices of the lowest local minima of a circular sequence."""
    prev, nxt = np.roll(values, 1), np.roll(values, -1)
    idx = np.flatnonzero((values <= prev) & (values <= nxt))
    return [int(i) for i in idx[np.argsort(values[idx])][:count]]


def fit_revolution_axis(points, rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Axis line ``(direction, point, cost)`` of a surface of revolution seen from the origin.

    A single view of a solid of revolution is mirror-symmetric about the plane
    holding the camera centre and the axis.  Candidate mirror planes are
    scanned by roll about the line of sight and by lateral shift, since an
    occluder moves the centroid of the visible points off the true plane.
    The best planes seed a search for the axis inside each plane; a final
    local search frees all four degrees of freedom of the line.  ``cost`` is
    the mean squared residual of the radius profile.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < _PROFILE_DEGREE + 2:
        raise IndeterminateAxisError(f"{len(points)} points cannot determine an axis")
    rng = np.random.default_rng(0) if rng is None else rng
    cen = points.mean(axis=0)
    ev = cen / np.linalg.norm(cen)                     # along the line of sight
    ex = np.cross((0.0, 1.0, 0.0), ev)
    ex /= np.linalg.norm(ex)
    ey = np.cross(ev, ex)                              # image-down at the centroid
    q = points - cen
    half_width = float(np.sqrt(np.max(np.einsum("ij,ij->i", q, q) - (q @ ev) ** 2)))
    if half_width <= 0:
        raise IndeterminateAxisError("cloud has no lateral extent")

    basis = np.stack([ey, ex, ev])

    def coords(phi, a, off, b, lat):
        """Direction and point of a candidate line in (ey, ex, ev) coordinates; broadcasts."""
        cp, sp, ca, sa, cb, sb = np.cos(phi), np.sin(phi), np.cos(a), np.sin(a), np.cos(b), np.sin(b)
        d = np.stack(np.broadcast_arrays(cb * ca * cp - sb * sp, cb * ca * sp + sb * cp, cb * sa), axis=-1)
        o = half_width * np.stack(np.broadcast_arrays(-off * sa * cp - lat * sp, -off * sa * sp + lat * cp,
                                                      off * ca), axis=-1)
        return d @ basis, cen + o @ basis

    def line(x):
        phi, a, off = float(x[0]), float(x[1]), float(x[2])
        b, lat = (float(x[3]), float(x[4])) if len(x) > 3 else (0.0, 0.0)
        cp, sp, ca, sa, cb, sb = math.cos(phi), math.sin(phi), math.cos(a), math.sin(a), math.cos(b), math.sin(b)
        do = np.array([[cb * ca * cp - sb * sp, cb * ca * sp + sb * cp, cb * sa],
                       [-off * sa * cp - lat * sp, -off * sa * sp + lat * cp, off * ca]]) @ basis
        return do[0], cen + half_width * do[1]

    def cost_on(pts):
        return lambda x: _profile_cost(pts, *line(x))

    coarse = points[rng.choice(len(points), size=min(len(points), _GRID_POINTS), replace=False)]
    shifts = half_width * np.asarray(_SHIFT_GRID)
    mirror = _mirror_scores(q, coarse[:_MIRROR_PROBES] - cen, ex, ey, _ROLL_GRID, shifts)
    per_roll = mirror.min(axis=1)
    starts = []
    for r in _local_minima(per_roll, _ROLL_CANDIDATES):
        phi = float(_ROLL_GRID[r])
        lat = float(_SHIFT_GRID[int(np.argmin(mirror[r]))])
        a, f = (g.ravel() for g in np.meshgrid(_ANGLE_GRID, _OFFSET_GRID, indexing="ij"))
        d, o = coords(phi, a, f, 0.0, lat)
        costs = _profile_costs(coarse, o, d)
        i = int(np.argmin(costs))
        starts.append((float(costs[i]), (phi, float(a[i]), float(f[i]), 0.0, lat)))
    starts.sort()
    best = best_lat = None
    for c0, x0 in starts:
        if c0 > _START_RATIO * starts[0][0]:
            break
        lat = x0[4]
        res = minimize(lambda x: _profile_cost(coarse, *line((*x, 0.0, lat))), x0[:3], method="Nelder-Mead",
                       options={"xatol": 1e-3, "fatol": 1e-13, "maxiter": 300})
        if best is None or res.fun < best.fun:
            best, best_lat = res, lat
    # polish with the line's remaining two degrees of freedom on every point
    best = minimize(cost_on(points), (*best.x, 0.0, best_lat), method="Nelder-Mead",
                    options={"xatol": 2e-4, "fatol": 1e-13, "maxiter": 800})
    d, o = line(best.x)
    return d, o, float(best.fun)


# ---------------------------------------------------------------- tilt

def fold_angle(axis: np.ndarray, vertical) -> float:
    """Angle between axis and vertical in degrees, folded into [0, 90)."""
    v = np.asarray(vertical, dtype=np.float64)
    v = v / np.linalg.norm(v)
    ang = math.degrees(math.acos(float(np.clip(axis @ v, -1.0, 1.0))))
    if ang > 90.0:
        ang = 180.0 - ang
    return 0.0 if ang >= 90.0 else ang


def _subsample(points: np.ndarray, n: int, rng) -> np.ndarray:
    if len(points) <= n:
        return points
    return points[np.sort(rng.choice(len(points), size=n, replace=False))]


def smooth_cloud(points: np.ndarray, k: int = 16) -> np.ndarray:
    """Project every point onto the total-least-squares plane of its k neighbours."""
    k = min(k, len(points))
    if k < 3:
        return points.copy()
    _, idx = cKDTree(points).query(points, k=k)
    nb = points[idx]
    c = nb.mean(axis=1)
    q = nb - c[:, None, :]
    _, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", q, q))
    n = vecs[:, :, 0]
    return points - np.einsum("ni,ni->n", points - c, n)[:, None] * n


def estimate_tilt(cloud: PointCloud, cfg: ApexSearchConfig = ApexSearchConfig()) -> PoseEstimate:
    split = split_regions(cloud)
    pts = cloud.points
    rng = np.random.default_rng(cfg.seed)

    axis_dir = None
    if cfg.axis_method == "revolution":
        # depth noise mostly moves points along the line of sight, which biases the
        # profile fit; local plane projection removes most of it
        fit_pts = smooth_cloud(_subsample(pts, _FIT_POINTS, rng), _SMOOTH_K)
        axis_dir = fit_revolution_axis(fit_pts, rng)[0]
        if not cloud.is_labeled:
            split = _split_along(pts, axis_dir)

    # the stem cap legitimately disappears when the tip leans towards the camera
    if len(split.tip_idx) == 0:
        raise SplitError("tip region is empty")
    belly = pts[split.belly_idx]
    apex = belly[_apex_index(belly, cfg)]

    _, nb = cKDTree(belly).query(apex, k=min(cfg.k_neighbors, len(belly)))
    pool = belly[np.atleast_1d(nb)]
    if cfg.axis_method == "projection":
        pool = np.concatenate([pool, pts[split.tip_idx]])
    pick = rng.choice(len(pool), size=cfg.plane_samples, replace=len(pool) < cfg.plane_samples)
    plane = fit_plane(pool[pick])

    v = pts[split.tip_idx].mean(axis=0) - apex
    if axis_dir is None:
        proj = v - (v @ plane.normal) * plane.normal
    else:
        proj = (v @ axis_dir) * axis_dir
    norm = float(np.linalg.norm(proj))
    if norm < 1e-6:
        raise IndeterminateAxisError(f"projected axis length {norm:.3g} m")
    axis = proj / norm
    return PoseEstimate(fold_angle(axis, cfg.vertical), axis, apex, plane)
