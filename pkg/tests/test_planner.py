"""Key points, surface path finding, path fitting, orientation, plans."""

import numpy as np
import pytest

from sonoarm import planner as pl
from sonoarm.errors import (
    DegenerateInputError,
    DomainError,
    InputError,
    PlanningError,
    SurfaceGapError,
)
from sonoarm.geometry import quat_angle, quat_rotate
from sonoarm.motion_filter import FilterConfig
from sonoarm.phantom import generate_phantom
from sonoarm.pointcloud import PointCloud, nearest_neighbor

CFG = FilterConfig()


def unit_grid_plane(extent=120.0, step=1.0, z=0.0):
    xs = np.arange(-extent, extent + step / 2, step)
    X, Y = np.meshgrid(xs, xs)
    pts = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, z)])
    normals = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    return PointCloud(pts, normals)


def dense_hemisphere(radius=100.0, n=60000, seed=4):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v[:, 2] = np.abs(v[:, 2])
    return PointCloud(radius * v, v)


PLANE = unit_grid_plane()
HEMISPHERE = dense_hemisphere()


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom((150.0, 100.0, 80.0), seed=3)


@pytest.fixture(scope="module")
def scene():
    model = generate_phantom((150.0, 100.0, 80.0), seed=6)
    u_seed = model.center + [0, 0, model.semi_axes[2]]
    kp = pl.compute_key_points(u_seed, model.surface, model.fiducials)
    return model, kp


class TestKeyPoints:
    def test_symmetric_phantom_symmetric_key_points(self, phantom):
        u_seed = phantom.center + [0, 0, phantom.semi_axes[2]]
        kp = pl.compute_key_points(u_seed, phantom.surface, phantom.fiducials)
        c = phantom.center
        # mirror pairs agree in |x|, |y| and z within a millimetre
        for a, b in ((kp.BL, kp.BR), (kp.TL, kp.TR)):
            assert a[0] - c[0] == pytest.approx(-(b[0] - c[0]), abs=1e-9)
            assert a[1] - c[1] == pytest.approx(b[1] - c[1], abs=1e-9)
            assert a[2] == pytest.approx(b[2], abs=1.0)
        for a, b in ((kp.BL, kp.TL), (kp.BR, kp.TR)):
            assert a[1] - c[1] == pytest.approx(-(b[1] - c[1]), abs=1e-9)
            assert a[2] == pytest.approx(b[2], abs=1.0)

    def test_degenerate_fiducials(self, phantom):
        u_seed = phantom.center + [0, 0, phantom.semi_axes[2]]
        line = np.array([[k * 10.0, 0.0, 0.0] for k in range(4)]) + phantom.center
        with pytest.raises(InputError):
            pl.compute_key_points(u_seed, phantom.surface, line)

    def test_umbilicus_off_surface(self, phantom):
        with pytest.raises(InputError):
            pl.compute_key_points(phantom.center + [0, 0, 500.0],
                                  phantom.surface, phantom.fiducials)

    def test_manual_override_passes_validation(self, phantom):
        u_seed = phantom.center + [0, 0, phantom.semi_axes[2]]
        kp = pl.compute_key_points(u_seed, phantom.surface, phantom.fiducials)
        manual = pl.KeyPoints(U=kp.U.copy(), BL=kp.BL.copy(), BR=kp.BR.copy(),
                              TL=kp.TL.copy(), TR=kp.TR.copy())
        out = pl.validate_key_points(manual, phantom.surface)
        np.testing.assert_array_equal(out.U, manual.U)

    def test_u_outside_hull_rejected(self, phantom):
        u_seed = phantom.center + [0, 0, phantom.semi_axes[2]]
        kp = pl.compute_key_points(u_seed, phantom.surface, phantom.fiducials)
        bad = pl.KeyPoints(U=kp.BL.copy(), BL=kp.BL, BR=kp.BR, TL=kp.TL, TR=kp.TR)
        with pytest.raises(InputError):
            pl.validate_key_points(bad, phantom.surface)


class TestFindPath:
    def test_planar_closed_form(self):
        # 21 points at x = 0, 5, ..., 100 on the unit grid, normals all +z
        P, N = pl.find_path(np.zeros(3), np.array([100.0, 0, 0]), PLANE, sd=5.0)
        assert len(P) == 21
        np.testing.assert_allclose(P[:, 0], np.arange(0.0, 101.0, 5.0), atol=1e-12)
        np.testing.assert_allclose(P[:, 1], 0.0, atol=1e-12)
        np.testing.assert_allclose(P[:, 2], 0.0, atol=1e-12)
        np.testing.assert_allclose(N, np.tile([0, 0, 1.0], (21, 1)))

    def test_every_point_is_a_cloud_member(self):
        P, _ = pl.find_path(np.zeros(3), np.array([80.0, 40.0, 0]), PLANE, sd=5.0)
        members = {tuple(p) for p in PLANE.points}
        assert all(tuple(p) in members for p in P)

    def test_large_sd_gives_two_endpoint_snaps(self):
        P, _ = pl.find_path(np.zeros(3), np.array([40.0, 0, 0]), PLANE, sd=100.0)
        assert len(P) == 2
        np.testing.assert_allclose(P[0], [0, 0, 0], atol=1e-12)
        np.testing.assert_allclose(P[1], [40, 0, 0], atol=1e-12)

    def test_hemisphere_membership_and_progress(self):
        p_s = nearest_neighbor(HEMISPHERE, [-70.0, 0, 71.0])[0]
        p_e = nearest_neighbor(HEMISPHERE, [70.0, 0, 71.0])[0]
        P, N = pl.find_path(p_s, p_e, HEMISPHERE, sd=5.0)
        v = p_e - p_s
        v_hat = v / np.linalg.norm(v)
        progress = P @ v_hat
        assert np.all(np.diff(progress) > 0), "progress along v_se must increase"
        # arc length at least the chord
        arc = np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1))
        assert arc >= np.linalg.norm(v) - 1e-9
        # every point on the sphere
        np.testing.assert_allclose(np.linalg.norm(P, axis=1), 100.0, atol=1e-9)

    def test_surface_gap_error(self):
        # two distant patches: pseudo points in the gap have no close snap
        a = unit_grid_plane(extent=20.0)
        b_pts = a.points + [300.0, 0, 0]
        cloud = PointCloud(np.vstack([a.points, b_pts]),
                           np.vstack([a.normals, a.normals]))
        with pytest.raises(SurfaceGapError):
            pl.find_path(np.array([0.0, 0, 0]), np.array([300.0, 0, 0]), cloud, sd=5.0)

    def test_coincident_endpoints(self):
        with pytest.raises(DomainError):
            pl.find_path(np.zeros(3), np.zeros(3), PLANE, sd=5.0)


class TestFitPath:
    def test_collinear_unchanged(self):
        P = np.column_stack([np.arange(0.0, 50.0, 5.0), np.zeros(10), np.zeros(10)])
        out = pl.fit_path(P, sd=5.0)
        np.testing.assert_allclose(out, P, atol=1e-6)

    def test_endpoints_exact(self):
        rng = np.random.default_rng(2)
        t = np.linspace(0, np.pi / 2, 15)
        P = np.column_stack([100 * np.cos(t), 100 * np.sin(t), np.zeros_like(t)])
        P[1:-1] += rng.normal(0, 0.5, size=(13, 3))
        out = pl.fit_path(P, sd=5.0)
        np.testing.assert_array_equal(out[0], P[0])
        np.testing.assert_array_equal(out[-1], P[-1])

    def test_noise_reduction_on_arc(self):
        rng = np.random.default_rng(8)
        t = np.linspace(0, 1.2, 30)
        arc = np.column_stack([80 * np.cos(t), 80 * np.sin(t), 10 * t])
        noisy = arc + rng.normal(0, 0.5, size=arc.shape)
        fitted = pl.fit_path(noisy, sd=4.0)

        def rms_to_arc(points):
            # distance to the densely sampled true arc
            tt = np.linspace(0, 1.2, 2000)
            dense = np.column_stack([80 * np.cos(tt), 80 * np.sin(tt), 10 * tt])
            from scipy.spatial import cKDTree
            d, _ = cKDTree(dense).query(points)
            return float(np.sqrt(np.mean(d ** 2)))

        assert rms_to_arc(fitted[1:-1]) < rms_to_arc(noisy[1:-1])

    def test_deviation_bounded_by_sd(self):
        rng = np.random.default_rng(3)
        t = np.linspace(0, 2.0, 25)
        P = np.column_stack([60 * t, 30 * np.sin(t), 5 * t]) + rng.normal(0, 0.8, (25, 3))
        sd = 4.0
        out = pl.fit_path(P, sd)
        from scipy.spatial import cKDTree
        d, _ = cKDTree(out).query(P)
        assert d.max() <= sd + 1e-9

    def test_passthrough_below_four_points(self):
        P = np.array([[0.0, 0, 0], [5.0, 0, 0], [10.0, 0, 0]])
        np.testing.assert_array_equal(pl.fit_path(P, 5.0), P)


class TestSmoothNormals:
    def test_constant_unchanged(self):
        N = np.tile([0, 0, 1.0], (12, 1))
        np.testing.assert_allclose(pl.smooth_normals(N), N)

    def test_flipped_outlier_restored(self):
        N = np.tile([0, 0, 1.0], (11, 1))
        N[5] = [0, 0, -1.0]
        out = pl.smooth_normals(N)
        ang = np.degrees(np.arccos(np.clip(out[5] @ np.array([0, 0, 1.0]), -1, 1)))
        assert ang <= 15.0

    def test_alternating_tilt_attenuated(self):
        tilt = np.radians(5.0)
        N = np.array([[np.sin(tilt) * (-1) ** i, 0, np.cos(tilt)] for i in range(20)])
        out = pl.smooth_normals(N)
        in_amp = np.abs(N[2:-2, 0]).max()
        out_amp = np.abs(out[2:-2, 0]).max()
        assert out_amp < in_amp

    def test_output_unit(self):
        rng = np.random.default_rng(10)
        N = rng.normal(size=(30, 3))
        N /= np.linalg.norm(N, axis=1, keepdims=True)
        N[:, 2] = np.abs(N[:, 2])
        N /= np.linalg.norm(N, axis=1, keepdims=True)
        out = pl.smooth_normals(N)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    def test_invalid_input_rejected(self):
        with pytest.raises(InputError):
            pl.smooth_normals(np.array([[0, 0, 2.0]]))
        with pytest.raises(InputError):
            pl.smooth_normals(np.array([[np.nan, 0, 1.0]]))


class TestProbeOrientation:
    def test_canonical_longitudinal(self):
        q = pl.probe_orientation(np.array([0, 0, 1.0]), "longitudinal",
                                 np.array([1.0, 0, 0]))
        np.testing.assert_allclose(quat_rotate(q, [0, 0, -1]), [0, 0, -1], atol=1e-12)
        np.testing.assert_allclose(quat_rotate(q, [1, 0, 0]), [1, 0, 0], atol=1e-12)

    def test_canonical_transverse(self):
        q = pl.probe_orientation(np.array([0, 0, 1.0]), "transverse",
                                 np.array([1.0, 0, 0]))
        np.testing.assert_allclose(quat_rotate(q, [0, 0, -1]), [0, 0, -1], atol=1e-12)
        np.testing.assert_allclose(quat_rotate(q, [1, 0, 0]), [0, 1, 0], atol=1e-9)

    def test_probe_axis_tracks_normal(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            n = rng.normal(size=3)
            n[2] = abs(n[2]) + 0.2
            n /= np.linalg.norm(n)
            travel = rng.normal(size=3)
            travel -= (travel @ n) * n * 0.6  # keep it non-parallel
            q = pl.probe_orientation(n, "longitudinal", travel)
            np.testing.assert_allclose(quat_rotate(q, [0, 0, -1]), -n, atol=1e-9)

    def test_parallel_travel_rejected(self):
        with pytest.raises(DegenerateInputError):
            pl.probe_orientation(np.array([0, 0, 1.0]), "transverse",
                                 np.array([0, 0, 5.0]))


class TestTimeParameterize:
    def test_straight_100mm_path(self):
        pts = np.column_stack([np.arange(0.0, 101.0, 5.0), np.zeros(21), np.zeros(21)])
        normals = np.tile([0, 0, 1.0], (21, 1))
        plan = pl.time_parameterize(pts, normals, "longitudinal", CFG)
        assert plan.duration == pytest.approx(5.0)
        np.testing.assert_allclose(plan.linear_twists,
                                   np.tile([20.0, 0, 0], (21, 1)), atol=1e-9)
        np.testing.assert_allclose(plan.angular_twists, 0.0, atol=1e-9)

    def test_two_point_plan(self):
        pts = np.array([[0.0, 0, 0], [10.0, 0, 0]])
        normals = np.tile([0, 0, 1.0], (2, 1))
        plan = pl.time_parameterize(pts, normals, "longitudinal", CFG)
        assert len(plan.points) == 2
        np.testing.assert_allclose(plan.linear_twists[0], [20.0, 0, 0])

    def test_hemisphere_caps(self):
        p_s = nearest_neighbor(HEMISPHERE, [-65.0, 0, 76.0])[0]
        p_e = nearest_neighbor(HEMISPHERE, [65.0, 0, 76.0])[0]
        P, N = pl.find_path(p_s, p_e, HEMISPHERE, sd=5.0)
        fitted = pl.fit_path(P, 5.0)
        normals = np.array([HEMISPHERE.normals[nearest_neighbor(HEMISPHERE, p)[1]]
                            for p in fitted])
        plan = pl.time_parameterize(fitted, pl.smooth_normals(normals),
                                    "transverse", CFG)
        # post-hoc differentiation: both caps hold at every sample
        assert np.all(np.linalg.norm(plan.linear_twists, axis=1) <= CFG.v_lin_max + 1e-9)
        assert np.all(np.linalg.norm(plan.angular_twists, axis=1) <= CFG.v_ang_max + 1e-9)
        assert np.all(np.diff(plan.timestamps) > 0)


class TestPatterns:
    def test_menu_has_all_steps(self):
        menu = pl.default_patterns()
        assert set(menu) == set(pl.PATTERN_IDS)

    def test_cardiac_is_dwell_only(self, scene):
        phantom, kp = scene
        plan = pl.plan_pattern(pl.default_patterns()["cardiac"], kp,
                               phantom.surface, sd=5.0, cfg=CFG)
        np.testing.assert_allclose(plan.linear_twists, 0.0)
        np.testing.assert_allclose(plan.angular_twists, 0.0)
        assert plan.duration == pytest.approx(5.0)
        spread = np.linalg.norm(plan.points - plan.points[0], axis=1)
        assert spread.max() == pytest.approx(0.0)

    def test_fetus_count_crosses_all_lateral_points(self, scene):
        phantom, kp = scene
        plan = pl.plan_pattern(pl.default_patterns()["fetus-count"], kp,
                               phantom.surface, sd=5.0, cfg=CFG)
        for name in ("BL", "BR", "TR", "TL"):
            target = getattr(kp, name)
            d = np.linalg.norm(plan.points - target, axis=1).min()
            assert d <= 5.0, f"plan misses {name} by {d:.1f} mm"
        # visiting order: BL before BR before TR before TL
        order = [int(np.argmin(np.linalg.norm(plan.points - getattr(kp, n), axis=1)))
                 for n in ("BL", "BR", "TR", "TL")]
        assert order == sorted(order)

    def test_plan_points_on_surface(self, scene):
        phantom, kp = scene
        plan = pl.plan_pattern(pl.default_patterns()["fetus-count"], kp,
                               phantom.surface, sd=5.0, cfg=CFG)
        d, _ = phantom.surface.index.query(plan.points)
        assert d.max() <= 5.0

    def test_plan_invariants(self, scene):
        phantom, kp = scene
        for pid in ("presentation", "placenta", "amniotic-fluid", "biometry-AC"):
            plan = pl.plan_pattern(pl.default_patterns()[pid], kp,
                                   phantom.surface, sd=5.0, cfg=CFG)
            assert np.all(np.diff(plan.timestamps) > 0)
            assert np.all(np.linalg.norm(np.diff(plan.points, axis=0), axis=1)
                          <= 2 * plan.sd + 1e-9)
            assert np.all(np.linalg.norm(plan.linear_twists, axis=1)
                          <= CFG.v_lin_max + 1e-9)

    def test_pattern_file_round_trip(self, tmp_path):
        path = tmp_path / "patterns.txt"
        path.write_text(
            "# custom program\n"
            "pattern fetus-count\n"
            "mode transverse\n"
            "segment BL BR 0\n"
            "segment BR TR 0.5\n"
            "\n"
            "pattern cardiac\n"
            "mode longitudinal\n"
            "segment U U 4\n")
        loaded = pl.load_patterns(path)
        assert loaded["fetus-count"].segments == (("BL", "BR", 0.0), ("BR", "TR", 0.5))
        assert loaded["cardiac"].probe_mode == "longitudinal"

    def test_error_carries_segment_index(self, scene):
        phantom, kp = scene
        bad = pl.ScanPattern("presentation", "longitudinal",
                             (("U", "mid(BL,BR)", 0.0), ("nowhere", "U", 0.0)))
        with pytest.raises(PlanningError, match="segment 1"):
            pl.plan_pattern(bad, kp, phantom.surface, sd=5.0, cfg=CFG)

    def test_csv_export(self, scene, tmp_path):
        phantom, kp = scene
        plan = pl.plan_pattern(pl.default_patterns()["presentation"], kp,
                               phantom.surface, sd=5.0, cfg=CFG)
        path = tmp_path / "plan.csv"
        pl.save_plan_csv(path, plan)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == pl.PLAN_CSV_HEADER
        assert len(lines) == len(plan.points) + 1
        assert len(lines[1].split(",")) == 17
