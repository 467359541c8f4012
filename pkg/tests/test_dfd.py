import json

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from svpsf.core import DimensionError, FormatError, ParameterError
from svpsf.dfd import DepthFromDefocus, FocalStack, _second_best, estimate_depth, pair_cost, save_depth
from svpsf.imageio import read_pfm, read_pgm
from svpsf.optics import OracleSource, gen_one_plane_scene, random_textures


@pytest.fixture(scope="module")
def oracles(small_camera, aberration):
    return [OracleSource(small_camera, aberration, n) for n in range(small_camera.n_focus)]


@pytest.fixture(scope="module")
def scene(small_camera, aberration):
    tex = random_textures(small_camera, 1, seed=21)[0]
    stack, gt = gen_one_plane_scene(small_camera, aberration, tex, 0.7)
    return FocalStack(stack, small_camera), gt


class TestPairCost:
    def test_identical_images_same_psf(self, scene, oracles):
        stack, _ = scene
        same = FocalStack([stack.images[0]] * 3)
        cost = pair_cost(same, [oracles[1]] * 3, 0, 2, (48, 48), 0.9)
        assert cost == pytest.approx(1e-6, rel=1e-6)

    def test_swap_symmetry(self, scene, oracles):
        stack, _ = scene
        for d in (0.6, 0.9):
            assert pair_cost(stack, oracles, 0, 2, (40, 50), d) == pair_cost(stack, oracles, 2, 0, (40, 50), d)

    def test_true_depth_is_minimum(self, scene, oracles):
        stack, _ = scene
        cands = 0.7 + 0.025 * np.arange(-8, 28)
        for center in [(30, 30), (60, 45), (48, 64)]:
            costs = [sum(pair_cost(stack, oracles, i, j, center, d) for i, j in [(0, 1), (0, 2), (1, 2)]) for d in cands]
            assert int(np.argmin(costs)) == 8

    def test_matches_cost_curve(self, scene, oracles):
        stack, _ = scene
        dfd = DepthFromDefocus(n_candidates=5).fit(oracles)
        x0, y0 = 28, 12
        curve = dfd.cost_curve(stack.images, x0, y0)
        for c, d in enumerate(dfd.candidates_):
            direct = sum(pair_cost(stack, oracles, i, j, (x0 + 16, y0 + 16), d) for i, j in [(0, 1), (0, 2), (1, 2)])
            assert curve[c] == pytest.approx(direct, rel=1e-9)

    def test_errors(self, scene, oracles):
        stack, _ = scene
        with pytest.raises(ParameterError):
            pair_cost(stack, oracles, 1, 1, (48, 48), 0.7)
        with pytest.raises(DimensionError):
            pair_cost(stack, oracles, 0, 1, (10, 48), 0.7)


class TestDepthFromDefocus:
    def test_closed_loop_plane(self, scene, oracles):
        stack, gt = scene
        dfd = DepthFromDefocus().fit(oracles)
        dm = dfd.predict(stack)
        step = dfd.candidates_[1] - dfd.candidates_[0]
        assert step == pytest.approx(0.0286, abs=1e-4)
        depths = np.array([p[2] for p in dfd.patches_])
        assert np.mean(np.abs(depths - 0.7) <= step + 1e-12) >= 0.9
        assert np.median(np.abs(dm.depths - gt.depths)[dm.valid]) <= step

    def test_textureless_invalid(self, small_camera, oracles):
        flat = FocalStack([np.full((96, 96), 0.4)] * 3)
        dm = DepthFromDefocus().fit(oracles).predict(flat)
        assert not dm.valid.any()

    def test_scale_invariance(self, scene, oracles):
        stack, _ = scene
        dfd = DepthFromDefocus().fit(oracles)
        a = dfd.predict(stack)
        first = list(dfd.patches_)
        b = dfd.predict([im * 2.5 for im in stack.images])
        assert [p[2:] for p in dfd.patches_] == [p[2:] for p in first]
        assert np.array_equal(a.depths, b.depths) and np.array_equal(a.valid, b.valid)

    def test_thread_count_independent(self, scene, oracles):
        stack, _ = scene
        with threadpool_limits(1):
            a = estimate_depth(stack, oracles, n_candidates=9)
        b = estimate_depth(stack, oracles, n_candidates=9)
        assert np.array_equal(a.depths, b.depths) and np.array_equal(a.valid, b.valid)

    def test_ties_prefer_nearer(self):
        costs = np.array([3.0, 1.0, 1.0, 2.0, 5.0])
        assert int(np.argmin(costs)) == 1
        assert _second_best(costs, 1) == 2.0

    def test_parameter_checks(self, oracles):
        with pytest.raises(ParameterError):
            DepthFromDefocus(mode="psfnet").fit(oracles)
        with pytest.raises(ParameterError):
            DepthFromDefocus(candidates=[0.3, 0.8]).fit(oracles)
        with pytest.raises(ParameterError):
            DepthFromDefocus().fit(oracles[:1])
        with pytest.raises(DimensionError):
            DepthFromDefocus().fit(oracles).predict([np.zeros((96, 96))] * 2)


class TestIO:
    def test_stack_round_trip(self, scene, tmp_path):
        stack, gt = scene
        path = stack.save(tmp_path / "s", depth_gt=gt)
        back = FocalStack.load(path)
        assert back.camera == stack.camera
        for a, b in zip(back.images, stack.images):
            assert np.array_equal(a, b)
        assert np.array_equal(read_pfm(tmp_path / "s" / "depth_gt.pfm"), gt.depths.astype(np.float32))
        assert json.loads(path.read_text())["images"][2] == "stack_f02.pfm"

    def test_malformed_stack(self, tmp_path):
        (tmp_path / "stack.json").write_text("{\"imgs\": []}")
        with pytest.raises(FormatError):
            FocalStack.load(tmp_path / "stack.json")

    def test_mismatched_sizes(self):
        with pytest.raises(DimensionError):
            FocalStack([np.zeros((10, 10)), np.zeros((10, 12))])

    def test_save_depth(self, scene, oracles, tmp_path):
        stack, _ = scene
        dm = estimate_depth(stack, oracles, n_candidates=9)
        dm.valid[:5] = False
        save_depth(dm, tmp_path / "est")
        d = read_pfm(tmp_path / "est.pfm")
        assert np.all(d[:5] == 0)
        mask = read_pgm(tmp_path / "est_mask.pgm", raw=True)
        assert np.array_equal(mask > 0, dm.valid)
        vis = read_pgm(tmp_path / "est_vis.pgm", raw=True)
        assert vis.shape == (96, 96) and vis.max() <= 255
