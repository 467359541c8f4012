import math

import numpy as np
import pytest

from svpsf.core import CameraConfig, DataError, DepthMap, DimensionError, ParameterError, ProtocolError, delta_kernel
from svpsf.estimator import PsfGridEstimator
from svpsf.evalkit import (
    EvalReport,
    HoldoutSpec,
    centroid_drift,
    check_holdout,
    depth_mae,
    eval_psf_grid,
    holdout_positions,
    psf_mae,
    render_psf_mosaic,
)
from svpsf.optics import AberrationModel, OracleSource, gen_pair_dataset, random_textures
from svpsf.psf_model import PsfGrid

from conftest import random_kernel


class TestPsfMae:
    def test_identical(self, rng):
        k = random_kernel(rng)
        assert psf_mae(k, k) == 0.0

    def test_delta_vs_uniform(self):
        expected = (abs(1 - 1 / 625) + 624 / 625) / 625
        assert psf_mae(delta_kernel(12), np.full((25, 25), 1 / 625)) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.003195, abs=1e-6)

    def test_symmetric_and_scale_free(self, rng):
        a, b = random_kernel(rng), random_kernel(rng)
        assert psf_mae(a, b) == psf_mae(b, a)
        assert psf_mae(3 * a, b) == pytest.approx(psf_mae(a, b), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            psf_mae(delta_kernel(12), delta_kernel(3))


class TestHoldout:
    def test_positions(self):
        pos = holdout_positions(96, 96, 8)
        assert len(pos) == 64
        assert max(p[0] for p in pos) == pytest.approx(math.hypot(42, 42) / math.hypot(47.5, 47.5))

    def test_protocol_violation(self):
        with pytest.raises(ProtocolError):
            check_holdout([0.7, 0.9], [0.5, 0.9, 1.2])
        check_holdout([0.7], [0.5, 0.9])

    def test_range_mismatch(self, small_camera, aberration):
        grid = PsfGrid.uniform((0.5, 1.0))
        with pytest.raises(ParameterError):
            eval_psf_grid(grid, OracleSource(small_camera, aberration, 0), HoldoutSpec((1.2,), 96, 96, 2))

    def test_oracle_against_itself(self, small_camera, aberration):
        o = OracleSource(small_camera, aberration, 1)
        rep = eval_psf_grid(o, o, HoldoutSpec((0.6, 1.1), 96, 96, 3))
        assert rep.aggregate == 0.0 and len(rep.records) == 18
        assert rep.records[0]["focus_index"] == 1

    def test_closed_loop_single_depth(self, tmp_path):
        cam = CameraConfig(
            focal_length=0.012, f2=2.8, focus_distances=(0.5,), pixel_pitch=8e-6, image_width=96, image_height=96
        )
        ab = AberrationModel.ideal()
        m = gen_pair_dataset(cam, ab, random_textures(cam, 3, 1), [1.0], tmp_path)
        est = PsfGridEstimator(steps=400, patch_size=32, n_ih_bins=3, depth_range=(1.0, 1.0)).fit(m)
        rep = eval_psf_grid(est.grid_, OracleSource(cam, ab, 0), HoldoutSpec((1.0,), 96, 96))
        assert rep.aggregate < 1e-3


class TestReport:
    def test_aggregate_and_round_trip(self, small_camera, aberration, tmp_path):
        grid = PsfGrid.uniform((0.5, 1.415))
        rep = eval_psf_grid(grid, OracleSource(small_camera, aberration, 0), HoldoutSpec((0.6, 1.1), 96, 96, 4), [0.5, 1.4], {"seed": 3}, {"grid_sha256": "ab"})
        assert abs(rep.aggregate - np.mean([r["mae"] for r in rep.records])) <= 1e-12
        rep.save(tmp_path / "r.json")
        back = EvalReport.load(tmp_path / "r.json")
        assert back.records == rep.records and back.config == rep.config and back.provenance == rep.provenance
        assert back.dumps() == rep.dumps()
        assert rep.config["holdout"]["depths"] == [0.6, 1.1]

    def test_empty(self):
        with pytest.raises(DataError):
            EvalReport([])


class TestDepthMae:
    def _map(self, d, valid=None):
        d = np.asarray(d, float)
        return DepthMap(d, np.ones(d.shape, bool) if valid is None else valid, (0.5, 1.5))

    def test_cases(self):
        gt = self._map(np.full((8, 8), 0.9))
        assert depth_mae(gt, gt) == (0.0, 1.0)
        assert depth_mae(self._map(np.full((8, 8), 0.95)), gt)[0] == pytest.approx(0.05, rel=1e-12)
        half = np.full((8, 8), 0.9)
        half[:, :4] += 0.1
        assert depth_mae(self._map(half), gt)[0] == pytest.approx(0.05, rel=1e-12)

    def test_valid_only(self):
        gt = self._map(np.full((4, 4), 1.0))
        est_d = np.full((4, 4), 1.0)
        est_d[0] = 9.0
        valid = np.ones((4, 4), bool)
        valid[0] = False
        mae, frac = depth_mae(self._map(est_d, valid), gt)
        assert mae == 0.0 and frac == 0.75

    def test_no_valid(self):
        gt = self._map(np.ones((3, 3)))
        with pytest.raises(DataError):
            depth_mae(self._map(np.ones((3, 3)), np.zeros((3, 3), bool)), gt)


class TestCentroidAndMosaic:
    def test_no_breathing(self, small_camera, aberration):
        sources = [OracleSource(small_camera, aberration, n) for n in range(3)]
        drift = centroid_drift(sources, [0.3, 0.6, 0.9], 1.0)
        assert drift.shape == (3, 3) and np.abs(drift).max() < 0.15

    def test_breathing_monotone(self, small_camera, aberration):
        cam = CameraConfig(**{**small_camera.to_dict(), "breathing_mags": (1.0, 1.01, 1.02)})
        drift = centroid_drift([OracleSource(cam, aberration, 2)], [0.3, 0.6, 0.9], 1.0)[0]
        assert drift[0] < drift[1] < drift[2]
        assert drift[2] == pytest.approx(0.02 * 0.9 * cam.r_max, rel=1e-6)

    @pytest.mark.parametrize("theta", [math.pi / 4, 3 * math.pi / 4, 5.5])
    def test_breathing_at_angle(self, small_camera, aberration, theta):
        cam = CameraConfig(**{**small_camera.to_dict(), "breathing_mags": (1.0, 1.01, 1.02)})
        drift = centroid_drift([OracleSource(cam, aberration, 2)], [0.3, 0.6, 0.9], 1.0, theta)[0]
        assert drift == pytest.approx([0.02 * ih * cam.r_max for ih in (0.3, 0.6, 0.9)], rel=1e-6)

    def test_mosaic_sizes(self, small_camera, aberration):
        o = OracleSource(small_camera, aberration, 0)
        one = render_psf_mosaic(o, [0.5], [1.0])
        assert one.shape == (25, 25) and one.max() == 1.0
        m = render_psf_mosaic(o, [0.0, 0.5, 1.0], [0.7, 1.2])
        assert m.shape == (2 * 26 - 1, 3 * 26 - 1)
        for r in range(2):
            for c in range(3):
                assert m[r * 26 : r * 26 + 25, c * 26 : c * 26 + 25].max() == 1.0
        assert np.all(m[25, :] == 0.5) and np.all(m[:, 25] == 0.5)
