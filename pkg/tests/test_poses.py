"""Pose grid geometry and active-set maintenance."""

import numpy as np
import pytest

from pmpdeblur.poses import Pose, PoseGrid, active_set_update, build_pose_grid


class TestBuildGrid:
    def test_cartesian_count_and_identity(self):
        grid = build_pose_grid(0.02, 0.01, max_shift=2.0, shift_step=1.0,
                               corner_radius=50.0)
        assert len(grid) == 5 * 5 * 5
        ident = grid.poses[grid.identity_index()]
        assert (ident.theta, ident.tx, ident.ty) == (0.0, 0.0, 0.0)

    def test_translation_only_grid(self):
        grid = build_pose_grid(0.0, None, max_shift=1.0, shift_step=1.0)
        assert len(grid) == 9
        assert all(p.theta == 0.0 for p in grid.poses)

    def test_auto_rotation_step_bounds_corner_motion(self):
        radius = 80.0
        grid = build_pose_grid(0.05, None, corner_radius=radius)
        thetas = np.unique(grid.thetas)
        step = np.min(np.diff(thetas))
        assert step * radius <= 1.0 + 1e-9

    def test_pose_cap(self):
        with pytest.raises(ValueError, match="2500"):
            build_pose_grid(0.1, 0.001, max_shift=5.0, shift_step=1.0)

    def test_rejects_bad_ranges(self):
        with pytest.raises(ValueError):
            build_pose_grid(-0.1, 0.01)
        with pytest.raises(ValueError):
            build_pose_grid(0.1, 0.01, max_shift=1.0, shift_step=0.0)

    def test_distinct_poses_required(self):
        with pytest.raises(ValueError):
            PoseGrid([Pose(0, 0, 0), Pose(0, 0, 0)])


class TestDisplacements:
    def test_pure_translation(self):
        grid = PoseGrid([Pose(0.0, 3.0, -2.0)])
        d = grid.displacements([(10.0, 20.0)], (16.0, 16.0))
        # returns (drow, dcol) = (ty, tx)
        assert d.shape == (1, 1, 2)
        np.testing.assert_allclose(d[0, 0], [-2.0, 3.0])

    def test_rotation_fixes_center(self):
        grid = PoseGrid([Pose(0.3, 0.0, 0.0)])
        d = grid.displacements([(16.0, 16.0)], (16.0, 16.0))
        np.testing.assert_allclose(d[0, 0], [0.0, 0.0], atol=1e-12)

    def test_rotation_arc_length(self):
        theta = 0.01
        grid = PoseGrid([Pose(theta, 0.0, 0.0)])
        pt = (16.0, 26.0)  # 10 px right of center
        d = grid.displacements([pt], (16.0, 16.0))[0, 0]
        # small-angle: displacement magnitude ~ r * theta, direction +row
        assert np.hypot(*d) == pytest.approx(
            2 * 10 * np.sin(theta / 2), rel=1e-9)
        assert d[0] > 0 and abs(d[1]) < d[0]

    def test_rotation_direction_ccw_in_rc(self):
        # oracle: exact rigid rotation of the point about the center
        theta = 0.2
        grid = PoseGrid([Pose(theta, 0.0, 0.0)])
        pt = np.array([10.0, 25.0])
        c = np.array([16.0, 16.0])
        rel = pt - c
        rot = np.array([
            np.sin(theta) * rel[1] + np.cos(theta) * rel[0],
            np.cos(theta) * rel[1] - np.sin(theta) * rel[0],
        ])
        expected = rot + c - pt
        d = grid.displacements([pt], tuple(c))[0, 0]
        np.testing.assert_allclose(d, expected, atol=1e-12)

    def test_max_displacement_is_corner_arc(self):
        grid = PoseGrid([Pose(0.1, 0.0, 0.0)])
        h, w = 33, 33
        radius = np.hypot(16.0, 16.0)
        expected = 2 * radius * np.sin(0.05)
        assert grid.max_displacement((h, w)) == pytest.approx(expected,
                                                              rel=1e-9)


class TestActiveSet:
    def _grid(self):
        return build_pose_grid(0.0, None, max_shift=1.0, shift_step=1.0)

    def test_prunes_low_weights(self):
        grid = self._grid()
        w = np.full(9, 1e-6)
        w[grid.identity_index()] = 1.0
        w_new, grid_new = active_set_update(w, grid, prune_fraction=0.02,
                                            rng_seed=0)
        assert len(grid_new) <= len(grid)
        assert 1.0 in list(w_new)
        # resampled poses join at weight zero
        assert np.count_nonzero(w_new) == 1

    def test_no_prune_when_uniform(self):
        grid = self._grid()
        w = np.full(9, 1.0 / 9)
        w_new, grid_new = active_set_update(w, grid, rng_seed=0)
        assert grid_new.poses == grid.poses
        np.testing.assert_allclose(w_new, w)

    def test_deterministic_given_seed(self):
        grid = self._grid()
        w = np.linspace(0.0, 1.0, 9)
        a = active_set_update(w, grid, rng_seed=7)
        b = active_set_update(w, grid, rng_seed=7)
        assert a[1].poses == b[1].poses
        np.testing.assert_array_equal(a[0], b[0])

    def test_rejects_zero_weights(self):
        grid = self._grid()
        with pytest.raises(ValueError):
            active_set_update(np.zeros(9), grid)
