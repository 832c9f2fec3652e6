"""Synthetic stand-ins for the physical rig: an abdomen phantom (surface
cloud + voxel interior), noisy multi-view capture, spring contact forces
and planar ultrasound slices resampled from the voxel grid.

All randomness is keyed by explicit seeds; identical seeds give identical
outputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EmptyInputError, ParameterError
from .geometry import Pose, Transform, quat_to_matrix, unit
from .pointcloud import PointCloud, load_cloud, save_cloud

TABLE_Z = 0.0
# Fiducials sit on the table at the diagonal rim of the abdomen footprint,
# 5% outside it, standing in for the corner markers of the real setup.
FIDUCIAL_RIM_SCALE = 1.05 * np.sqrt(0.5)


@dataclass(frozen=True)
class PhantomModel:
    surface: PointCloud           # dense ground-truth upper half ellipsoid
    semi_axes: np.ndarray         # (a, b, c) mm
    center: np.ndarray            # on the table plane (z = 0)
    voxel_grid: np.ndarray        # scalar intensities, indexed [ix, iy, iz]
    voxel_spacing: float          # mm
    grid_origin: np.ndarray       # world position of voxel (0, 0, 0)
    fiducials: np.ndarray         # (4, 3) corner markers on the table
    stiffness: float = 1.0        # N/mm
    seed: int = 0

    def footprint(self, x: float, y: float) -> float:
        """Ellipse membership value at a horizontal point (<= 1 inside)."""
        a, b, _ = self.semi_axes
        dx, dy = x - self.center[0], y - self.center[1]
        return (dx / a) ** 2 + (dy / b) ** 2

    def height(self, x: float, y: float) -> float:
        """Analytic surface height; 0 outside the footprint (table level)."""
        m = self.footprint(x, y)
        if m >= 1.0:
            return TABLE_Z
        return float(self.center[2] + self.semi_axes[2] * np.sqrt(1.0 - m))

    def surface_normal(self, p: np.ndarray) -> np.ndarray:
        a, b, c = self.semi_axes
        d = np.asarray(p, dtype=float) - self.center
        g = np.array([2 * d[0] / a ** 2, 2 * d[1] / b ** 2, 2 * d[2] / c ** 2])
        return unit(g)


def half_ellipsoid_area(semi_axes) -> float:
    """Upper-half ellipsoid surface area by numerical quadrature."""
    a, b, c = [float(v) for v in semi_axes]
    # Parametrize by the unit upper hemisphere; dA = abc*sqrt(sum u_i^2/a_i^2) dOmega.
    n_t, n_p = 400, 400
    theta = (np.arange(n_t) + 0.5) * (0.5 * np.pi / n_t)   # polar, 0..pi/2
    phi = (np.arange(n_p) + 0.5) * (2.0 * np.pi / n_p)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    ux = np.outer(st, cp)
    uy = np.outer(st, sp)
    uz = np.outer(ct, np.ones(n_p))
    w = np.sqrt((ux / a) ** 2 + (uy / b) ** 2 + (uz / c) ** 2)
    d_omega = (0.5 * np.pi / n_t) * (2.0 * np.pi / n_p)
    return float(a * b * c * np.sum(w * st[:, None]) * d_omega)


def _sample_half_ellipsoid(semi_axes, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-area sampling of the upper half ellipsoid via rejection on
    the sphere-to-ellipsoid area distortion."""
    a, b, c = semi_axes
    w_max = 1.0 / min(a, b, c)
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = max(1024, 2 * (n - filled))
        u = rng.normal(size=(m, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        u[:, 2] = np.abs(u[:, 2])
        w = np.sqrt((u[:, 0] / a) ** 2 + (u[:, 1] / b) ** 2 + (u[:, 2] / c) ** 2)
        accept = rng.uniform(0.0, w_max, size=m) < w
        pts = u[accept] * np.array([a, b, c])
        take = min(len(pts), n - filled)
        out[filled:filled + take] = pts[:take]
        filled += take
    return out


def generate_phantom(semi_axes, seed: int = 0, *, center=(0.0, 0.0, 0.0),
                     stiffness: float = 1.0, voxel_spacing: float = 2.0,
                     density_mm2_per_point: float = 3.6) -> PhantomModel:
    """Deterministic oval abdomen phantom with an embedded fetus inclusion.

    The surface is sampled at one point per ``density_mm2_per_point`` mm^2
    (default keeps >= 1 point / 4 mm^2) with analytic normals.
    """
    semi_axes = np.asarray(semi_axes, dtype=float)
    if semi_axes.shape != (3,) or np.any(semi_axes <= 0.0):
        raise ParameterError("semi-axes must be 3 positive lengths")
    center = np.asarray(center, dtype=float)
    if center[2] != TABLE_Z:
        raise ParameterError("phantom center must sit on the table plane")
    rng = np.random.default_rng(seed)
    a, b, c = semi_axes

    area = half_ellipsoid_area(semi_axes)
    n_points = int(np.ceil(area / density_mm2_per_point))
    pts = _sample_half_ellipsoid(semi_axes, n_points, rng) + center
    grads = 2.0 * (pts - center) / semi_axes ** 2
    normals = grads / np.linalg.norm(grads, axis=1, keepdims=True)
    surface = PointCloud(pts, normals, frame="world")

    # Voxel interior: soft-tissue background inside the ellipsoid, a bright
    # fetus inclusion offset toward the umbilicus side.
    margin = 2.0 * voxel_spacing
    origin = center + np.array([-a - margin, -b - margin, -margin])
    shape = np.ceil((2 * np.array([a + margin, b + margin, 0.0])
                     + np.array([0.0, 0.0, c + 2 * margin])) / voxel_spacing).astype(int) + 1
    ix = origin[0] + voxel_spacing * np.arange(shape[0])
    iy = origin[1] + voxel_spacing * np.arange(shape[1])
    iz = origin[2] + voxel_spacing * np.arange(shape[2])
    X, Y, Z = np.meshgrid(ix, iy, iz, indexing="ij")
    body = ((X - center[0]) / a) ** 2 + ((Y - center[1]) / b) ** 2 + ((Z - center[2]) / c) ** 2 <= 1.0
    grid = np.zeros(tuple(shape), dtype=float)
    grid[body] = 80.0
    grid[body] += rng.normal(0.0, 6.0, size=int(body.sum()))  # speckle
    fetus_center = center + np.array([0.25 * a, 0.0, 0.45 * c])
    fetus_axes = 0.35 * semi_axes
    fetus = (((X - fetus_center[0]) / fetus_axes[0]) ** 2
             + ((Y - fetus_center[1]) / fetus_axes[1]) ** 2
             + ((Z - fetus_center[2]) / fetus_axes[2]) ** 2) <= 1.0
    grid[fetus] = 220.0
    grid = np.clip(grid, 0.0, 255.0)

    fx = FIDUCIAL_RIM_SCALE * a
    fy = FIDUCIAL_RIM_SCALE * b
    fiducials = center + np.array([
        [-fx, -fy, 0.0],   # bottom-left
        [fx, -fy, 0.0],    # bottom-right
        [-fx, fy, 0.0],    # top-left
        [fx, fy, 0.0],     # top-right
    ])
    return PhantomModel(surface, semi_axes, center, grid, voxel_spacing,
                        origin, fiducials, stiffness, seed)


# ---------------------------------------------------------------------------
# camera capture

@dataclass(frozen=True)
class CaptureParams:
    camera_pose: Pose
    fov: float = np.radians(70.0)
    noise_sigma: float = 0.0          # mm, applied along the view ray
    outlier_fraction: float = 0.0
    point_budget: int = 4000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ParameterError("outlier_fraction must lie in [0, 1)")
        if self.point_budget <= 0:
            raise ParameterError("point_budget must be positive")


def look_at_camera(eye, target) -> Pose:
    """Camera pose whose +z axis looks from eye toward target."""
    eye = np.asarray(eye, dtype=float)
    z = unit(np.asarray(target, dtype=float) - eye)
    ref = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = unit(np.cross(ref, z))
    y = np.cross(z, x)
    R = np.column_stack([x, y, z])
    from .geometry import matrix_to_quat
    return Pose(eye, matrix_to_quat(R))


def capture_view_labeled(phantom: PhantomModel, params: CaptureParams):
    """Simulated stereo capture returning (cloud, outlier_mask).

    Points are back-face culled against the view direction, restricted to
    the field of view, depth-noised along the ray, then polluted with
    uniform outliers drawn in an inflated bounding box. Output is in the
    camera frame; the mask marks injected outliers.
    """
    rng = np.random.default_rng(params.seed)
    cam_pos = params.camera_pose.position
    R_cam = quat_to_matrix(params.camera_pose.orientation)
    view_dir = R_cam[:, 2]

    pts = phantom.surface.points
    nrm = phantom.surface.normals
    rays = pts - cam_pos
    depths = np.linalg.norm(rays, axis=1)
    rays_n = rays / depths[:, None]
    facing = np.einsum("ij,ij->i", nrm, rays_n) < 0.0
    in_fov = rays_n @ view_dir >= np.cos(0.5 * params.fov)
    visible = np.where(facing & in_fov)[0]
    if len(visible) == 0:
        raise EmptyInputError("no phantom surface point is visible from this camera")
    if len(visible) > params.point_budget:
        visible = rng.choice(visible, size=params.point_budget, replace=False)
        visible.sort()
    kept = pts[visible] + rays_n[visible] * rng.normal(0.0, params.noise_sigma,
                                                       size=len(visible))[:, None]

    f = params.outlier_fraction
    n_out = int(round(f * len(kept) / (1.0 - f))) if f > 0.0 else 0
    if n_out > 0:
        lo = kept.min(axis=0)
        hi = kept.max(axis=0)
        mid = 0.5 * (lo + hi)
        half = 1.1 * (hi - lo)  # inflate 2.2x so few outliers graze the surface
        outliers = rng.uniform(mid - half, mid + half, size=(n_out, 3))
        world = np.vstack([kept, outliers])
        mask = np.zeros(len(world), dtype=bool)
        mask[len(kept):] = True
        order = rng.permutation(len(world))
        world = world[order]
        mask = mask[order]
    else:
        world = kept
        mask = np.zeros(len(world), dtype=bool)

    cam_frame = (world - cam_pos) @ R_cam
    return PointCloud(cam_frame, frame="camera"), mask


def capture_view(phantom: PhantomModel, params: CaptureParams) -> PointCloud:
    cloud, _ = capture_view_labeled(phantom, params)
    return cloud


# ---------------------------------------------------------------------------
# contact and imaging

def contact_force(phantom: PhantomModel, probe_pose: Pose) -> np.ndarray:
    """Reaction force (N, world frame) on the probe tip.

    Linear spring along the outward surface normal: F = stiffness * depth,
    zero when the tip is above the surface. Continuous in tip height.
    """
    x, y, z = probe_pose.position
    h = phantom.height(x, y)
    depth = h - z
    if depth <= 0.0 or phantom.footprint(x, y) >= 1.0:
        return np.zeros(3)
    contact_point = np.array([x, y, h])
    n = phantom.surface_normal(contact_point)
    return phantom.stiffness * depth * n


@dataclass(frozen=True)
class UsFrame:
    pixels: np.ndarray   # uint8, rows = depth, cols = width
    in_view: bool        # False when the plane missed the voxel grid entirely


def us_slice(phantom: PhantomModel, probe_pose: Pose,
             width_mm: float = 60.0, depth_mm: float = 120.0,
             resolution_px: int = 96) -> UsFrame:
    """Synthetic ultrasound: trilinear resampling of the voxel grid on the
    probe's imaging plane (x = lateral, -z = depth)."""
    if resolution_px <= 0:
        raise ParameterError("resolution must be positive")
    rows = resolution_px
    cols = max(1, int(round(resolution_px * width_mm / depth_mm)))
    R = quat_to_matrix(probe_pose.orientation)
    lateral = R[:, 0]
    beam = -R[:, 2]
    u = np.linspace(-0.5 * width_mm, 0.5 * width_mm, cols)
    v = np.linspace(0.0, depth_mm, rows)
    P = (probe_pose.position[None, None, :]
         + v[:, None, None] * beam[None, None, :]
         + u[None, :, None] * lateral[None, None, :])

    g = (P - phantom.grid_origin) / phantom.voxel_spacing
    shape = np.array(phantom.voxel_grid.shape)
    inside = np.all((g >= 0.0) & (g <= shape - 1.0), axis=-1)
    img = np.zeros((rows, cols), dtype=float)
    if inside.any():
        gi = g[inside]
        i0 = np.floor(gi).astype(int)
        i0 = np.minimum(i0, shape - 2)
        f = gi - i0
        vg = phantom.voxel_grid

        def corner(dx, dy, dz):
            return vg[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]

        vals = np.zeros(len(gi))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (np.where(dx, f[:, 0], 1 - f[:, 0])
                         * np.where(dy, f[:, 1], 1 - f[:, 1])
                         * np.where(dz, f[:, 2], 1 - f[:, 2]))
                    vals += w * corner(dx, dy, dz)
        img[inside] = vals
    return UsFrame(np.clip(img, 0.0, 255.0).astype(np.uint8), bool(inside.any()))


def save_pgm(path, pixels: np.ndarray) -> None:
    """Binary (P5) PGM export."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise DomainError("PGM expects a 2-D grayscale image")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise DomainError("not a binary PGM file")
        dims = fh.readline().split()
        while dims and dims[0].startswith(b"#"):
            dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise DomainError("only 8-bit PGM supported")
        data = fh.read(w * h)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# save/load: surface cloud in the ASCII format + sidecar generation metadata.
# The voxel grid is deterministic per seed, so load regenerates it.

def save_phantom(basepath, phantom: PhantomModel) -> None:
    base = os.fspath(basepath)
    save_cloud(base + ".pcd", phantom.surface)
    with open(base + ".meta", "w", encoding="ascii") as fh:
        fh.write("# sonoarm phantom metadata\n")
        axes = " ".join(repr(float(v)) for v in phantom.semi_axes)
        center = " ".join(repr(float(v)) for v in phantom.center)
        fh.write(f"semi_axes = {axes}\n")
        fh.write(f"center = {center}\n")
        fh.write(f"voxel_spacing = {float(phantom.voxel_spacing)!r}\n")
        fh.write(f"stiffness = {float(phantom.stiffness)!r}\n")
        fh.write(f"seed = {phantom.seed}\n")


def load_phantom(basepath) -> PhantomModel:
    base = os.fspath(basepath)
    meta = {}
    with open(base + ".meta", "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            meta[key.strip()] = val.strip()
    semi_axes = [float(t) for t in meta["semi_axes"].split()]
    center = [float(t) for t in meta["center"].split()]
    phantom = generate_phantom(
        semi_axes, seed=int(meta["seed"]), center=tuple(center),
        stiffness=float(meta["stiffness"]), voxel_spacing=float(meta["voxel_spacing"]))
    # The stored cloud is authoritative for the surface (regeneration is
    # deterministic, but honour any externally edited file).
    surface = load_cloud(base + ".pcd")
    return PhantomModel(surface, phantom.semi_axes, phantom.center,
                        phantom.voxel_grid, phantom.voxel_spacing,
                        phantom.grid_origin, phantom.fiducials,
                        phantom.stiffness, phantom.seed)
