"""Autonomous-mode planning: the five key points, the six-step scan
patterns expressed as segment programs over those points, surface
path-finding, polynomial path fitting, normal smoothing, probe orientation
and time parameterization.

Planning is pure: given an immutable cloud and key points the resulting
PathPlan is an immutable value safe to hand to the control loop.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateInputError,
    DomainError,
    InputError,
    PlanningError,
    SurfaceGapError,
)
from .geometry import (
    angular_velocity,
    axis_angle_align,
    quat_canonical,
    quat_from_axis_angle,
    quat_multiply,
    quat_rotate,
    quat_to_matrix,
    unit,
)
from .motion_filter import FilterConfig
from .pointcloud import PointCloud, nearest_neighbor, project_to_contour

DEFAULT_SAMPLING_DISTANCE = 5.0    # mm between consecutive path points
KEY_POINT_SNAP_TOL = 5.0           # mm: how far a seed point may sit off the cloud
CORNER_PULL_FRACTION = 0.15        # corners pulled toward the umbilicus


# ---------------------------------------------------------------------------
# key points

@dataclass(frozen=True)
class KeyPoints:
    """Umbilicus plus the four lateral landmarks, all on the surface."""

    U: np.ndarray
    BL: np.ndarray
    BR: np.ndarray
    TL: np.ndarray
    TR: np.ndarray

    def as_dict(self) -> dict:
        return {"U": self.U, "BL": self.BL, "BR": self.BR, "TL": self.TL, "TR": self.TR}


def _point_in_quad_xy(p, quad) -> bool:
    # quad given counter-clockwise-ish; accept either winding.
    signs = []
    for i in range(4):
        a, b = quad[i], quad[(i + 1) % 4]
        cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        signs.append(cross)
    return all(s > 0 for s in signs) or all(s < 0 for s in signs)


def validate_key_points(kp: KeyPoints, cloud: PointCloud) -> KeyPoints:
    """Check the KeyPoints invariants against the cloud; returns kp.

    Surface membership is measured against the contour (the continuous
    surface the cloud samples), not the nearest discrete sample: a point
    exactly on the true surface can still be ~1 sampling-spacing away
    from the closest cloud member.
    """
    for name, p in kp.as_dict().items():
        try:
            on_surface = project_to_contour(cloud, p)
        except Exception as exc:
            raise InputError(f"key point {name} is off the surface: {exc}") from exc
        if abs(p[2] - on_surface[2]) > 1.0:
            raise InputError(f"key point {name} is {abs(p[2] - on_surface[2]):.2f} mm "
                             "off the surface")
    hull = [kp.BL[:2], kp.BR[:2], kp.TR[:2], kp.TL[:2]]
    if not _point_in_quad_xy(kp.U[:2], hull):
        raise InputError("U must lie strictly inside the BL/BR/TR/TL quadrilateral")
    return kp


def _snap(cloud: PointCloud, p: np.ndarray) -> np.ndarray:
    """Pull a seed point onto the contour (keeps its horizontal position)."""
    return project_to_contour(cloud, p)


def compute_key_points(U: np.ndarray, cloud: PointCloud, fiducials) -> KeyPoints:
    """Derive BL/BR/TL/TR from the table fiducials and the chosen umbilicus.

    Each fiducial is pulled 15% toward U in the horizontal plane and
    projected onto the surface. The umbilicus itself is snapped to the
    cloud.
    """
    U = np.asarray(U, dtype=float)
    _, _, d = nearest_neighbor(cloud, U)
    if d > KEY_POINT_SNAP_TOL:
        raise InputError(f"umbilicus is {d:.1f} mm off the surface (max {KEY_POINT_SNAP_TOL})")
    fid = np.asarray(fiducials, dtype=float).reshape(-1, 3)
    if len(fid) < 4:
        raise InputError(f"need at least 4 fiducials, got {len(fid)}")
    fid = fid[:4]
    spread = fid[:, :2] - fid[:, :2].mean(axis=0)
    if np.linalg.svd(spread, compute_uv=False)[1] < 1e-6:
        raise InputError("fiducials are collinear; cannot orient the footprint")

    centroid = fid[:, :2].mean(axis=0)
    corners = {}
    for f in fid:
        dx, dy = f[0] - centroid[0], f[1] - centroid[1]
        name = ("T" if dy >= 0 else "B") + ("R" if dx >= 0 else "L")
        if name in corners:
            raise InputError("fiducials do not span four distinct quadrants")
        corners[name] = f
    if set(corners) != {"BL", "BR", "TL", "TR"}:
        raise InputError("fiducials do not span four distinct quadrants")

    snapped = {}
    for name, f in corners.items():
        pulled = f.copy()
        pulled[:2] = f[:2] + CORNER_PULL_FRACTION * (U[:2] - f[:2])
        snapped[name] = _snap(cloud, pulled)
    kp = KeyPoints(U=_snap(cloud, U), **snapped)
    return validate_key_points(kp, cloud)


# ---------------------------------------------------------------------------
# Algorithm: surface path finding

def find_path(p_s: np.ndarray, p_e: np.ndarray, cloud: PointCloud, sd: float):
    """March from p_s to p_e over the cloud at sampling distance sd.

    Pseudo-points advance along the straight start-to-end direction while
    inheriting the height of the previously snapped point, so nearest
    neighbour queries track the contour instead of cutting chords through
    the anatomy. Returns (points, normals); every point is a cloud member.
    """
    if sd <= 0.0:
        raise DomainError(f"sampling distance must be positive, got {sd}")
    p_s = np.asarray(p_s, dtype=float)
    p_e = np.asarray(p_e, dtype=float)
    if np.allclose(p_s, p_e):
        raise DomainError("start and end of a path segment coincide")
    if cloud.normals is None:
        raise InputError("path finding needs a cloud with normals")
    eligible = cloud.select(cloud.valid_normal_mask())
    if len(eligible) == 0:
        raise InputError("no cloud point has a valid normal")
    for name, p in (("start", p_s), ("end", p_e)):
        _, _, d = nearest_neighbor(eligible, p)
        if d > KEY_POINT_SNAP_TOL:
            raise InputError(f"{name} point is {d:.1f} mm off the surface")

    v_se = p_e - p_s
    m_se = float(np.linalg.norm(v_se))
    v_hat = v_se / m_se
    n_steps = int(math.ceil(m_se / sd - 1e-9))

    points = []
    normals = []
    # Carried vertical component: how far the previous snap sat above the
    # straight start-to-end chord (zero on the first step). For level
    # chords this equals the height above the start plane; for sloped
    # chords it avoids double-counting the chord's own descent.
    pz_prev = 0.0
    for i in range(n_steps + 1):
        along = min(i * sd, m_se)
        carry = pz_prev if along < m_se else 0.0  # final station aims at p_e itself
        pseudo = p_s + v_hat * along + np.array([0.0, 0.0, carry])
        p_i, idx, dist = nearest_neighbor(eligible, pseudo)
        if dist > 3.0 * sd:
            raise SurfaceGapError(
                f"nearest surface point {dist:.1f} mm away at step {i} (limit {3.0 * sd:.1f})")
        pz_prev = float(p_i[2] - (p_s + v_hat * along)[2])
        if points and np.array_equal(points[-1], p_i):
            continue  # sparse sampling snapped twice to the same point
        points.append(p_i)
        normals.append(eligible.normals[idx])
    return np.array(points), np.array(normals)


def fit_path(P: np.ndarray, sd: float) -> np.ndarray:
    """Smooth a snapped point sequence with per-coordinate cubic fits over
    cumulative chord length and resample at spacing sd.

    Endpoints are preserved exactly. If the cubic deviates from a sample
    by more than sd the fit falls back to linear resampling along the
    polyline (zero deviation). Fewer than 4 points pass through unchanged.
    """
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    if len(P) < 4:
        return P.copy()
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    u = np.concatenate([[0.0], np.cumsum(seg)])
    total = u[-1]
    n_out = max(2, int(math.ceil(total / sd - 1e-9)) + 1)
    u_new = np.linspace(0.0, total, n_out)

    coeffs = np.polyfit(u, P, deg=3)  # one cubic per coordinate
    fitted_at_samples = np.column_stack([np.polyval(coeffs[:, k], u) for k in range(3)])
    deviation = np.linalg.norm(fitted_at_samples - P, axis=1).max()
    if deviation > sd:
        out = np.column_stack([np.interp(u_new, u, P[:, k]) for k in range(3)])
    else:
        out = np.column_stack([np.polyval(coeffs[:, k], u_new) for k in range(3)])
    out[0] = P[0]
    out[-1] = P[-1]
    return out


def smooth_normals(N: np.ndarray, window: int = 5) -> np.ndarray:
    """Moving-average low-pass over the normal sequence, renormalized.

    The window is clamped at the ends; output length equals input length.
    """
    N = np.asarray(N, dtype=float).reshape(-1, 3)
    if len(N) == 0:
        raise InputError("cannot smooth an empty normal sequence")
    norms = np.linalg.norm(N, axis=1)
    if not np.all(np.isfinite(N)) or np.max(np.abs(norms - 1.0)) > 1e-6:
        raise InputError("normals must be finite unit vectors")
    half = window // 2
    out = np.empty_like(N)
    for i in range(len(N)):
        lo = max(0, i - half)
        hi = min(len(N), i + half + 1)
        avg = N[lo:hi].mean(axis=0)
        length = np.linalg.norm(avg)
        out[i] = avg / length if length > 1e-9 else N[i]
    return out


def probe_orientation(normal: np.ndarray, mode: str, travel_dir: np.ndarray) -> np.ndarray:
    """Probe orientation at a path point.

    The probe's -z axis points along -normal (into the surface); the long
    (x) axis follows the travel direction for longitudinal scans and is
    rotated 90 degrees in the tangent plane for transverse scans.
    """
    if mode not in ("longitudinal", "transverse"):
        raise DomainError(f"unknown probe mode {mode!r}")
    n = unit(normal)
    t = np.asarray(travel_dir, dtype=float)
    tangential = t - np.dot(t, n) * n
    if np.linalg.norm(tangential) < 1e-9:
        raise DegenerateInputError("travel direction is parallel to the surface normal")
    t_hat = tangential / np.linalg.norm(tangential)

    q_align = axis_angle_align(np.array([0.0, 0.0, 1.0]), n)
    x_now = quat_rotate(q_align, np.array([1.0, 0.0, 0.0]))
    x_want = t_hat if mode == "longitudinal" else np.cross(n, t_hat)
    cosr = float(np.clip(np.dot(x_now, x_want), -1.0, 1.0))
    sinr = float(np.dot(np.cross(x_now, x_want), n))
    roll = math.atan2(sinr, cosr)
    return quat_canonical(quat_multiply(quat_from_axis_angle(n, roll), q_align))


# ---------------------------------------------------------------------------
# plans

@dataclass(frozen=True)
class PathPlan:
    points: np.ndarray        # (k, 3) mm
    normals: np.ndarray       # (k, 3) unit
    orientations: np.ndarray  # (k, 4) unit quaternions
    timestamps: np.ndarray    # (k,) s, strictly increasing
    linear_twists: np.ndarray   # (k, 3) mm/s
    angular_twists: np.ndarray  # (k, 3) rad/s
    sd: float

    def __post_init__(self):
        k = len(self.points)
        arrays = (self.points, self.normals, self.orientations, self.timestamps,
                  self.linear_twists, self.angular_twists)
        if any(len(a) != k for a in arrays) or k < 2:
            raise DomainError("plan arrays must share a length >= 2")
        if np.any(np.diff(self.timestamps) <= 0.0):
            raise DomainError("timestamps must be strictly increasing")
        spacing = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        if np.any(spacing > 2.0 * self.sd + 1e-9):
            raise DomainError("consecutive plan points farther apart than 2*sd")

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0])

    def sample(self, t: float):
        """Pose (position, orientation) at time t, clamped to the plan span."""
        from .geometry import lerp, slerp
        ts = self.timestamps
        if t <= ts[0]:
            return self.points[0].copy(), self.orientations[0].copy()
        if t >= ts[-1]:
            return self.points[-1].copy(), self.orientations[-1].copy()
        j = int(np.searchsorted(ts, t, side="right")) - 1
        f = (t - ts[j]) / (ts[j + 1] - ts[j])
        return (lerp(self.points[j], self.points[j + 1], f),
                slerp(self.orientations[j], self.orientations[j + 1], f))


def _travel_directions(points: np.ndarray) -> np.ndarray:
    d = np.empty_like(points)
    d[0] = points[1] - points[0]
    d[-1] = points[-1] - points[-2]
    if len(points) > 2:
        d[1:-1] = points[2:] - points[:-2]
    lengths = np.linalg.norm(d, axis=1, keepdims=True)
    lengths[lengths < 1e-12] = 1.0
    return d / lengths


def time_parameterize(points: np.ndarray, normals: np.ndarray, mode: str,
                      cfg: FilterConfig, sd: float = DEFAULT_SAMPLING_DISTANCE) -> PathPlan:
    """Constant-speed schedule over a geometric path.

    The speed is the largest value that keeps the linear rate at
    ``v_lin_max`` and the angular rate (from consecutive probe
    orientations) at or below ``v_ang_max``. Twists come from central
    differences of position and the rotation-difference map of
    consecutive orientations.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(points) < 2:
        raise DomainError("need at least 2 points to schedule")
    travel = _travel_directions(points)
    orientations = np.array([probe_orientation(n, mode, t)
                             for n, t in zip(normals, travel)])

    seg_len = np.linalg.norm(np.diff(points, axis=0), axis=1)
    from .geometry import quat_angle
    seg_ang = np.array([quat_angle(orientations[i], orientations[i + 1])
                        for i in range(len(points) - 1)])
    speed = cfg.v_lin_max
    nonzero = seg_ang > 1e-12
    if nonzero.any():
        speed = min(speed, float(np.min(cfg.v_ang_max * seg_len[nonzero] / seg_ang[nonzero])))
    if speed <= 0.0:
        raise DomainError("path has coincident points with differing orientation")

    dt_seg = seg_len / speed
    timestamps = np.concatenate([[0.0], np.cumsum(dt_seg)])

    k = len(points)
    lin = np.empty((k, 3))
    ang = np.empty((k, 3))
    R = [quat_to_matrix(q) for q in orientations]
    for i in range(k):
        lo = max(0, i - 1)
        hi = min(k - 1, i + 1)
        span = timestamps[hi] - timestamps[lo]
        lin[i] = (points[hi] - points[lo]) / span
        ang[i] = angular_velocity(R[lo], R[hi], span)
    return PathPlan(points, normals, orientations, timestamps, lin, ang, sd)


# ---------------------------------------------------------------------------
# scan patterns

PATTERN_IDS = (
    "presentation", "cardiac", "fetus-count", "placenta", "amniotic-fluid",
    "biometry-BPD-HC", "biometry-AC", "biometry-FL",
)


@dataclass(frozen=True)
class ScanPattern:
    """A scan step as a program over key-point references.

    Segment references are key-point names or ``mid(A,B)`` midpoints;
    ``dwell`` seconds of zero-twist hold follow each segment (a segment
    whose start equals its end is a pure dwell).
    """

    id: str
    probe_mode: str
    segments: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.id not in PATTERN_IDS:
            raise DomainError(f"unknown pattern id {self.id!r}")
        if self.probe_mode not in ("longitudinal", "transverse"):
            raise DomainError(f"unknown probe mode {self.probe_mode!r}")
        if len(self.segments) == 0:
            raise DomainError("a pattern needs at least one segment")


def default_patterns() -> dict:
    """The fixed option menu offered to the operator (data, not code)."""
    return {p.id: p for p in (
        ScanPattern("presentation", "longitudinal",
                    (("U", "mid(BL,BR)", 0.0),)),
        ScanPattern("cardiac", "transverse",
                    (("U", "U", 5.0),)),
        ScanPattern("fetus-count", "transverse",
                    (("BL", "BR", 0.0), ("BR", "TR", 0.0), ("TR", "TL", 0.0))),
        ScanPattern("placenta", "transverse",
                    (("TL", "TR", 0.0),
                     ("mid(TR,BR)", "mid(TL,BL)", 0.0),
                     ("BL", "BR", 0.0))),
        ScanPattern("amniotic-fluid", "transverse",
                    (("mid(U,TL)", "mid(U,TL)", 3.0),
                     ("mid(U,TR)", "mid(U,TR)", 3.0),
                     ("mid(U,BR)", "mid(U,BR)", 3.0),
                     ("mid(U,BL)", "mid(U,BL)", 3.0))),
        ScanPattern("biometry-BPD-HC", "transverse",
                    (("TL", "TR", 2.0),)),
        ScanPattern("biometry-AC", "transverse",
                    (("mid(U,BL)", "mid(U,BR)", 2.0),)),
        ScanPattern("biometry-FL", "transverse",
                    (("U", "mid(BR,TR)", 2.0),)),
    )}


_MID_RE = re.compile(r"^mid\((\w+),(\w+)\)$")


def resolve_reference(ref: str, kp: KeyPoints, cloud: PointCloud) -> np.ndarray:
    """Key-point name or mid(A,B) -> surface point."""
    named = kp.as_dict()
    if ref in named:
        return named[ref]
    m = _MID_RE.match(ref.replace(" ", ""))
    if m:
        a = resolve_reference(m.group(1), kp, cloud)
        b = resolve_reference(m.group(2), kp, cloud)
        return _snap(cloud, 0.5 * (a + b))
    raise InputError(f"unresolvable key-point reference {ref!r}")


def load_patterns(path) -> dict:
    """Pattern definition file: `pattern <id>` / `mode <m>` / `segment A B dwell`."""
    patterns = {}
    current_id = None
    mode = None
    segments = []

    def flush():
        if current_id is not None:
            patterns[current_id] = ScanPattern(current_id, mode or "transverse",
                                               tuple(segments))

    with open(path, "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if tokens[0] == "pattern":
                flush()
                current_id = tokens[1]
                mode = None
                segments = []
            elif tokens[0] == "mode":
                mode = tokens[1]
            elif tokens[0] == "segment":
                if len(tokens) != 4:
                    raise InputError(f"line {ln}: segment needs start, end, dwell")
                segments.append((tokens[1], tokens[2], float(tokens[3])))
            else:
                raise InputError(f"line {ln}: unknown directive {tokens[0]!r}")
    flush()
    return patterns


def _dwell_plan(point: np.ndarray, normal: np.ndarray, mode: str,
                dwell: float, cfg: FilterConfig, sd: float,
                travel_hint: np.ndarray) -> PathPlan:
    q = probe_orientation(normal, mode, travel_hint)
    pts = np.vstack([point, point])
    return PathPlan(pts, np.vstack([normal, normal]), np.vstack([q, q]),
                    np.array([0.0, dwell]), np.zeros((2, 3)), np.zeros((2, 3)), sd)


def concatenate_plans(plans, sd: float) -> PathPlan:
    """Join plans end to end, offsetting timestamps; the duplicated
    junction sample of each follower is dropped."""
    plans = [p for p in plans if p is not None]
    if not plans:
        raise PlanningError("nothing to concatenate")
    if len(plans) == 1:
        return plans[0]
    parts = {"points": [], "normals": [], "orientations": [], "timestamps": [],
             "lin": [], "ang": []}
    t_off = 0.0
    for i, plan in enumerate(plans):
        start = 0
        if i > 0 and np.allclose(plan.points[0], parts["points"][-1][-1], atol=1e-9):
            start = 1
        parts["points"].append(plan.points[start:])
        parts["normals"].append(plan.normals[start:])
        parts["orientations"].append(plan.orientations[start:])
        parts["timestamps"].append(plan.timestamps[start:] + t_off)
        parts["lin"].append(plan.linear_twists[start:])
        parts["ang"].append(plan.angular_twists[start:])
        t_off += plan.timestamps[-1]
    return PathPlan(np.vstack(parts["points"]), np.vstack(parts["normals"]),
                    np.vstack(parts["orientations"]), np.concatenate(parts["timestamps"]),
                    np.vstack(parts["lin"]), np.vstack(parts["ang"]), sd)


def _segment_plan(start: np.ndarray, end: np.ndarray, mode: str,
                  cloud: PointCloud, sd: float, cfg: FilterConfig) -> PathPlan:
    P, _ = find_path(start, end, cloud, sd)
    fitted = fit_path(P, sd)
    eligible = cloud.select(cloud.valid_normal_mask())
    normals = np.array([eligible.normals[nearest_neighbor(eligible, p)[1]]
                        for p in fitted])
    return time_parameterize(fitted, smooth_normals(normals), mode, cfg, sd)


def plan_pattern(pattern: ScanPattern, kp: KeyPoints, cloud: PointCloud,
                 sd: float = DEFAULT_SAMPLING_DISTANCE,
                 cfg: FilterConfig | None = None,
                 speed_fraction: float = 0.8) -> PathPlan:
    """Compile a scan pattern into one time-parameterized plan.

    Transit paths are planned automatically between non-contiguous
    segments so the probe never leaves the surface. Dwells become
    zero-twist holds. Execution is scheduled at ``speed_fraction`` of the
    velocity caps: the caps are safety bounds, and a tracking controller
    saturated at the plan speed has no authority left to regulate force.
    """
    cfg = cfg or FilterConfig()
    if not 0.0 < speed_fraction <= 1.0:
        raise DomainError("speed_fraction must lie in (0, 1]")
    import dataclasses
    cfg = dataclasses.replace(cfg,
                              v_lin_max=cfg.v_lin_max * speed_fraction,
                              v_ang_max_deg=cfg.v_ang_max_deg * speed_fraction)
    eligible = cloud.select(cloud.valid_normal_mask())
    if len(eligible) == 0:
        raise PlanningError("no cloud point has a valid normal")

    def member(p):
        # Plans are sequences of actual cloud points; anchoring the
        # resolved references to members makes segment junctions exact.
        return nearest_neighbor(eligible, p)[0]

    plans = []
    prev_end = None
    for i, (ref_a, ref_b, dwell) in enumerate(pattern.segments):
        try:
            a = member(resolve_reference(ref_a, kp, cloud))
            b = member(resolve_reference(ref_b, kp, cloud))
            if prev_end is not None and not np.allclose(prev_end, a, atol=1e-9):
                plans.append(_segment_plan(prev_end, a, pattern.probe_mode, cloud, sd, cfg))
            if np.allclose(a, b, atol=1e-9):
                hint = (a - prev_end) if prev_end is not None else np.array([1.0, 0.0, 0.0])
                if np.linalg.norm(hint) < 1e-9:
                    hint = np.array([1.0, 0.0, 0.0])
                n = eligible.normals[nearest_neighbor(eligible, a)[1]]
                plans.append(_dwell_plan(a, n, pattern.probe_mode,
                                         max(dwell, 1e-3), cfg, sd, hint))
            else:
                plans.append(_segment_plan(a, b, pattern.probe_mode, cloud, sd, cfg))
                if dwell > 0.0:
                    last = plans[-1]
                    plans.append(_dwell_plan(last.points[-1], last.normals[-1],
                                             pattern.probe_mode, dwell, cfg, sd,
                                             last.points[-1] - last.points[-2]))
            prev_end = plans[-1].points[-1]
        except (SurfaceGapError, InputError, DomainError, DegenerateInputError) as exc:
            raise PlanningError(f"pattern {pattern.id!r} segment {i}: {exc}") from exc
    return concatenate_plans(plans, sd)


# ---------------------------------------------------------------------------
# CSV export

PLAN_CSV_HEADER = "t,x,y,z,qw,qx,qy,qz,nx,ny,nz,vx,vy,vz,wx,wy,wz"


def save_plan_csv(path, plan: PathPlan) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(PLAN_CSV_HEADER + "\n")
        for i in range(len(plan.points)):
            row = ([plan.timestamps[i]] + list(plan.points[i])
                   + list(plan.orientations[i]) + list(plan.normals[i])
                   + list(plan.linear_twists[i]) + list(plan.angular_twists[i]))
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
