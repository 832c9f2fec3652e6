"""Point-cloud substrate: KD-tree queries, normal estimation, RANSAC
filtering, ICP registration, multi-view merging and contour projection.

Clouds are immutable after construction; both the 3D index and the
horizontal (x, y) index are built eagerly. Normals, when present, are unit
vectors; a row of NaNs marks a point whose neighborhood was too degenerate
to orient (such points are excluded from path queries).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .errors import (
    DomainError,
    EmptyInputError,
    NoConsensusError,
    OffSurfaceError,
    ParameterError,
    RegistrationError,
)
from .geometry import Transform, rigid_fit

# Horizontal queries farther than this from every cloud point are off the
# anatomy and refuse to project.
CONTOUR_HORIZON_MM = 20.0


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    frame: str = "world"
    index: cKDTree = field(init=False, repr=False, compare=False)
    index_xy: cKDTree = field(init=False, repr=False, compare=False)
    spacing_xy: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise DomainError("normals must match points in cardinality")
            valid = ~np.isnan(nrm).any(axis=1)
            lengths = np.linalg.norm(nrm[valid], axis=1)
            if valid.any() and np.max(np.abs(lengths - 1.0), initial=0.0) > 1e-6:
                raise DomainError("normals must be unit vectors (or NaN if invalid)")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)
        if len(pts) > 0:
            object.__setattr__(self, "index", cKDTree(pts))
            object.__setattr__(self, "index_xy", cKDTree(pts[:, :2]))
            probe = pts[:: max(1, len(pts) // 512), :2]
            if len(pts) > 1:
                d, _ = self.index_xy.query(probe, k=2)
                spacing = float(np.median(d[:, 1]))
            else:
                spacing = 1.0
            object.__setattr__(self, "spacing_xy", max(spacing, 1e-6))
        else:
            object.__setattr__(self, "index", None)
            object.__setattr__(self, "index_xy", None)
            object.__setattr__(self, "spacing_xy", 1.0)

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask_or_idx) -> "PointCloud":
        nrm = self.normals[mask_or_idx] if self.normals is not None else None
        return PointCloud(self.points[mask_or_idx], nrm, self.frame)

    def valid_normal_mask(self) -> np.ndarray:
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        return ~np.isnan(self.normals).any(axis=1)

    def transformed(self, T: Transform, frame: str | None = None) -> "PointCloud":
        nrm = None
        if self.normals is not None:
            nrm = self.normals @ T.rotation.T  # rotate only; NaNs stay NaN
        return PointCloud(T.apply(self.points), nrm, frame or self.frame)


def nearest_neighbor(cloud: PointCloud, query: np.ndarray):
    """Exact nearest cloud point; equidistant candidates break ties by
    lowest index. Returns (point, index, distance)."""
    if len(cloud) == 0:
        raise EmptyInputError("nearest_neighbor on an empty cloud")
    q = geometry.as_vec3(query)
    d, i = cloud.index.query(q)
    # Collect every point at (numerically) the same distance and take the
    # smallest index so the tie-break is deterministic.
    ball = cloud.index.query_ball_point(q, d * (1.0 + 1e-12) + 1e-12)
    i = min(ball) if ball else int(i)
    return cloud.points[i].copy(), int(i), float(np.linalg.norm(cloud.points[i] - q))


def estimate_normals(cloud: PointCloud, k: int) -> PointCloud:
    """Per-point normals from the k-NN covariance, oriented so n_z >= 0.

    Collinear neighborhoods get a NaN normal and are excluded from path
    queries downstream.
    """
    if k < 3:
        raise ParameterError(f"normal estimation needs k >= 3, got {k}")
    if len(cloud) < k:
        raise ParameterError(f"k={k} exceeds cloud size {len(cloud)}")
    _, idx = cloud.index.query(cloud.points, k=k)
    neighborhoods = cloud.points[idx]                      # (N, k, 3)
    centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)                 # ascending eigenvalues
    normals = eigvecs[:, :, 0].copy()
    # Rank-1 covariance (collinear neighborhood) leaves the normal undefined.
    degenerate = eigvals[:, 1] <= 1e-9 * np.maximum(eigvals[:, 2], 1e-300)
    flip = normals[:, 2] < 0.0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = np.nan
    return PointCloud(cloud.points, normals, cloud.frame)


# ---------------------------------------------------------------------------
# RANSAC

@dataclass(frozen=True)
class RansacParams:
    model: str = "plane"              # "plane" | "ellipsoid-distance"
    inlier_threshold: float = 1.0     # mm
    iterations: int = 200
    min_inlier_fraction: float = 0.5

    def __post_init__(self):
        if self.model not in ("plane", "ellipsoid-distance"):
            raise ParameterError(f"unknown RANSAC model {self.model!r}")
        if self.inlier_threshold <= 0.0:
            raise ParameterError("inlier_threshold must be positive")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")


def _plane_from_points(p3: np.ndarray):
    n = np.cross(p3[1] - p3[0], p3[2] - p3[0])
    norm = np.linalg.norm(n)
    if norm < 1e-9:
        return None
    n = n / norm
    return n, float(np.dot(n, p3[0]))


def _plane_distances(points: np.ndarray, model) -> np.ndarray:
    n, d = model
    return np.abs(points @ n - d)


def _plane_refit(points: np.ndarray):
    c = points.mean(axis=0)
    _, _, Vt = np.linalg.svd(points - c, full_matrices=False)
    n = Vt[-1]
    return n, float(np.dot(n, c))


def _quadric_design(points: np.ndarray) -> np.ndarray:
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return np.column_stack([x * x, y * y, z * z, x * y, x * z, y * z, x, y, z])


def _ellipsoid_from_points(sample: np.ndarray):
    """General quadric x'Mx + b'x = 1 fitted by least squares.

    The full 9-coefficient form handles ellipsoids in any frame (captures
    arrive camera-aligned, not world-aligned). Returns None unless the
    quadric really is an ellipsoid: M definite with a matching-sign
    squared-radius term.
    """
    try:
        coef, *_ = np.linalg.lstsq(_quadric_design(sample), np.ones(len(sample)),
                                   rcond=None)
    except np.linalg.LinAlgError:
        return None
    a, b, c, d, e, f = coef[:6]
    M = np.array([[a, d / 2, e / 2], [d / 2, b, f / 2], [e / 2, f / 2, c]])
    eig = np.linalg.eigvalsh(M)
    if eig[0] * eig[-1] <= 0.0 or abs(eig[0]) < 1e-12 * abs(eig[-1]):
        return None  # not definite: paraboloid/hyperboloid/degenerate
    lin = coef[6:]
    center = np.linalg.solve(M, -lin / 2.0)
    s = 1.0 + center @ M @ center
    if s * eig[0] <= 0.0:
        return None  # imaginary ellipsoid
    return coef


def _ellipsoid_distances(points: np.ndarray, coef: np.ndarray) -> np.ndarray:
    # First-order geometric distance |Q(p) - 1| / ||grad Q(p)||.
    q = _quadric_design(points) @ coef
    a, b, c, d, e, f = coef[:6]
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    grad = np.column_stack([
        2 * a * x + d * y + e * z + coef[6],
        2 * b * y + d * x + f * z + coef[7],
        2 * c * z + e * x + f * y + coef[8],
    ])
    gnorm = np.maximum(np.linalg.norm(grad, axis=1), 1e-12)
    return np.abs(q - 1.0) / gnorm


_MIN_SAMPLE = {"plane": 3, "ellipsoid-distance": 9}


def ransac_inlier_mask(cloud: PointCloud, params: RansacParams, seed: int = 0) -> np.ndarray:
    """Boolean inlier mask under the best consensus model found."""
    n_pts = len(cloud)
    min_sample = _MIN_SAMPLE[params.model]
    if n_pts < min_sample:
        raise ParameterError(f"{params.model} RANSAC needs >= {min_sample} points")
    rng = np.random.default_rng(seed)
    pts = cloud.points
    best_mask = None
    best_count = -1
    for _ in range(params.iterations):
        sample = pts[rng.choice(n_pts, size=min_sample, replace=False)]
        if params.model == "plane":
            model = _plane_from_points(sample)
            if model is None:
                continue
            dist = _plane_distances(pts, model)
        else:
            coef = _ellipsoid_from_points(sample)
            if coef is None:
                continue
            dist = _ellipsoid_distances(pts, coef)
        mask = dist <= params.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < min_sample:
        raise NoConsensusError("no RANSAC sample produced a valid model")
    # Refit on the consensus set and re-classify once; tightens the model
    # found from a minimal noisy sample.
    if params.model == "plane":
        model = _plane_refit(pts[best_mask])
        best_mask = _plane_distances(pts, model) <= params.inlier_threshold
    else:
        coef = _ellipsoid_from_points(pts[best_mask])
        if coef is not None:
            best_mask = _ellipsoid_distances(pts, coef) <= params.inlier_threshold
    if best_mask.sum() < params.min_inlier_fraction * n_pts:
        raise NoConsensusError(
            f"consensus {best_mask.sum()}/{n_pts} below min_inlier_fraction={params.min_inlier_fraction}")
    return best_mask


def ransac_filter(cloud: PointCloud, params: RansacParams, seed: int = 0) -> PointCloud:
    """Inlier subset of the cloud; deterministic for a fixed seed."""
    return cloud.select(ransac_inlier_mask(cloud, params, seed))


# ---------------------------------------------------------------------------
# ICP

@dataclass(frozen=True)
class IcpParams:
    # Point-to-point ICP crawls tangentially on smooth anatomy; give it
    # room to lock in.
    max_iterations: int = 300
    convergence_epsilon: float = 1e-5   # mm change in rms
    max_correspondence_distance: float = float("inf")
    trim_fraction: float = 0.1

    def __post_init__(self):
        if self.convergence_epsilon <= 0.0:
            raise ParameterError("convergence_epsilon must be positive")
        if not 0.0 <= self.trim_fraction < 1.0:
            raise ParameterError("trim_fraction must lie in [0, 1)")


def _icp_pass(src: PointCloud, dst: PointCloud, params: IcpParams,
              initial: Transform, trim_fraction: float):
    T = initial
    moved = T.apply(src.points)
    prev_rms = None
    prev_count = None
    rms = float("inf")
    for _ in range(params.max_iterations):
        dist, idx = dst.index.query(moved)
        keep = dist <= params.max_correspondence_distance
        if trim_fraction > 0.0 and keep.sum() > 3:
            order = np.argsort(dist)
            kept_sorted = order[keep[order]]
            n_keep = max(3, int(np.ceil(len(kept_sorted) * (1.0 - trim_fraction))))
            trimmed = np.zeros(len(moved), dtype=bool)
            trimmed[kept_sorted[:n_keep]] = True
            keep = trimmed
        count = int(keep.sum())
        if count < 3:
            raise RegistrationError("fewer than 3 correspondences within range")
        rms = float(np.sqrt(np.mean(dist[keep] ** 2)))
        if prev_rms is not None and count == prev_count:
            # The trimmed mean-square error never increases between
            # comparable iterations.
            assert rms <= prev_rms + max(1e-9, 1e-6 * prev_rms), "ICP rms increased"
            if abs(prev_rms - rms) < params.convergence_epsilon:
                break
        prev_rms = rms
        prev_count = count
        step = rigid_fit(moved[keep], dst.points[idx[keep]])
        T = step.compose(T)
        moved = T.apply(src.points)
    return T, rms


def icp_register(src: PointCloud, dst: PointCloud, params: IcpParams,
                 initial: Transform | None = None):
    """Point-to-point ICP aligning src onto dst; returns (Transform, rms).

    Runs an untrimmed pass to convergence first, then a trimmed
    refinement pass. Trimming from the first iteration cuts exactly the
    far pairs that steer out of a bad initialization and is a well-known
    source of spurious fixed points; the plain pass avoids that while the
    trimmed pass keeps partial-overlap robustness. Each pass's rms is
    non-increasing.
    """
    if len(src) == 0 or len(dst) == 0:
        raise EmptyInputError("ICP needs two non-empty clouds")
    T = initial if initial is not None else Transform.identity()
    T, rms = _icp_pass(src, dst, params, T, 0.0)
    if params.trim_fraction > 0.0:
        T, rms = _icp_pass(src, dst, params, T, params.trim_fraction)
    return T, rms


def _voxel_dedupe(points: np.ndarray, normals: np.ndarray | None, voxel_mm: float):
    keys = np.floor(points / voxel_mm).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return points[first], (normals[first] if normals is not None else None)


def merge_views(views: list, params: IcpParams, dedupe_voxel_mm: float = 0.5) -> PointCloud:
    """Incrementally register each view to the accumulated cloud and append.

    View 0 is the reference frame. Registration failures abort with the
    failing view index attached. Near-duplicate points are removed with a
    voxel filter.
    """
    if len(views) == 0:
        raise EmptyInputError("merge_views needs at least one view")
    acc_points = views[0].points.copy()
    have_normals = all(v.normals is not None for v in views)
    acc_normals = views[0].normals.copy() if have_normals else None
    for k, view in enumerate(views[1:], start=1):
        acc = PointCloud(acc_points, frame=views[0].frame)
        try:
            T, _ = icp_register(view, acc, params)
        except (RegistrationError, EmptyInputError) as exc:
            raise RegistrationError(f"view {k}: {exc}") from exc
        moved = view.transformed(T)
        acc_points = np.vstack([acc_points, moved.points])
        if have_normals:
            acc_normals = np.vstack([acc_normals, moved.normals])
    acc_points, acc_normals = _voxel_dedupe(acc_points, acc_normals, dedupe_voxel_mm)
    return PointCloud(acc_points, acc_normals, views[0].frame)


# ---------------------------------------------------------------------------
# contour projection

def surface_height(cloud: PointCloud, x: float, y: float) -> float:
    """Surface height at a horizontal location.

    Inverse-distance-weighted z of the 4 nearest points in the (x, y)
    plane; raises OffSurfaceError when the location is farther than
    CONTOUR_HORIZON_MM from every point.
    """
    if len(cloud) == 0:
        raise EmptyInputError("surface_height on an empty cloud")
    k = min(4, len(cloud))
    d, idx = cloud.index_xy.query(np.array([x, y]), k=k)
    d = np.atleast_1d(d)
    idx = np.atleast_1d(idx)
    if d[0] > CONTOUR_HORIZON_MM:
        raise OffSurfaceError(
            f"({x:.1f}, {y:.1f}) is {d[0]:.1f} mm from the nearest surface point")
    if d[0] < 1e-9:
        return float(cloud.points[idx[0], 2])
    w = 1.0 / d
    return float(np.dot(w, cloud.points[idx, 2]) / w.sum())


def project_to_contour(cloud: PointCloud, p: np.ndarray) -> np.ndarray:
    """Keep the horizontal components of p; replace z with the surface
    height (vertical operator motion does not reach the robot)."""
    p = geometry.as_vec3(p)
    return np.array([p[0], p[1], surface_height(cloud, p[0], p[1])])


def surface_height_smooth(cloud: PointCloud, x: float, y: float) -> float:
    """Continuous surface height for contour following.

    The 4-NN inverse-distance height jumps by a fraction of the sampling
    noise whenever the neighbour set changes, which stalls sub-spacing
    walks along the contour. This variant fits a local plane under a
    Gaussian kernel (moving least squares) so neighbours fade out
    smoothly; it agrees with the 4-NN height to within the sampling
    noise. Raises OffSurfaceError beyond the same horizon.
    """
    if len(cloud) == 0:
        raise EmptyInputError("surface_height_smooth on an empty cloud")
    k = min(12, len(cloud))
    q = np.array([x, y])
    d, idx = cloud.index_xy.query(q, k=k)
    d = np.atleast_1d(d)
    idx = np.atleast_1d(idx)
    if d[0] > CONTOUR_HORIZON_MM:
        raise OffSurfaceError(
            f"({x:.1f}, {y:.1f}) is {d[0]:.1f} mm from the nearest surface point")
    if d[0] < 1e-12:
        return float(cloud.points[idx[0], 2])
    h = 1.5 * cloud.spacing_xy
    w = np.exp(-((d / h) ** 2))
    pts = cloud.points[idx]
    if k >= 4:
        A = np.column_stack([np.ones(k), pts[:, 0] - x, pts[:, 1] - y])
        Aw = A * w[:, None]
        try:
            coef, *_ = np.linalg.lstsq(Aw, pts[:, 2] * w, rcond=None)
            plane_z = float(coef[0])
            # A wildly extrapolating plane (collinear support) falls back
            # to the weighted mean.
            if abs(plane_z - pts[0, 2]) < 10.0 * h + 10.0:
                return plane_z
        except np.linalg.LinAlgError:
            pass
    return float(np.dot(w, pts[:, 2]) / w.sum())


# ---------------------------------------------------------------------------
# file I/O (ASCII, bit-exact round trip)

def save_cloud(path, cloud: PointCloud) -> None:
    """One `x y z [nx ny nz]` line per point; floats via repr so the
    round trip is bit-exact."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# sonoarm point cloud\n")
        has_n = 1 if cloud.normals is not None else 0
        fh.write(f"pcd frame={cloud.frame} count={len(cloud)} normals={has_n}\n")
        for i in range(len(cloud)):
            row = [repr(float(v)) for v in cloud.points[i]]
            if has_n:
                row += [repr(float(v)) for v in cloud.normals[i]]
            fh.write(" ".join(row) + "\n")


def load_cloud(path) -> PointCloud:
    frame = "world"
    count = None
    has_normals = False
    points = []
    normals = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("pcd "):
                for tok in line.split()[1:]:
                    key, _, val = tok.partition("=")
                    if key == "frame":
                        frame = val
                    elif key == "count":
                        count = int(val)
                    elif key == "normals":
                        has_normals = val == "1"
                continue
            vals = [float(t) for t in line.split()]
            if has_normals:
                if len(vals) != 6:
                    raise DomainError(f"expected 6 columns, got {len(vals)}")
                points.append(vals[:3])
                normals.append(vals[3:])
            else:
                if len(vals) != 3:
                    raise DomainError(f"expected 3 columns, got {len(vals)}")
                points.append(vals)
    if count is not None and count != len(points):
        raise DomainError(f"header count {count} != {len(points)} data lines")
    pts = np.array(points, dtype=float).reshape(-1, 3)
    nrm = np.array(normals, dtype=float).reshape(-1, 3) if has_normals else None
    return PointCloud(pts, nrm, frame)
