import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from patchwise_nerf.errors import ContractViolation
from patchwise_nerf.fields.triplane import (
    MlpParams,
    TriPlaneScene,
    decode,
    decode_backward,
    export_density_grid,
    lattice_centers,
    plane_features,
)


def random_scene(seed=0, plane_res=5, features=4, hidden=8) -> TriPlaneScene:
    return TriPlaneScene.initialize(plane_res, features, hidden, np.random.default_rng(seed))


def node(k: int, res: int) -> float:
    """World coordinate of grid node k."""
    return -1.0 + 2.0 * k / (res - 1)


class TestPlaneFeatures:
    def test_at_grid_node(self):
        scene = random_scene(plane_res=5)
        x = np.array([node(1, 5), node(3, 5), node(2, 5)])
        expected = scene.planes[0][1, 3] + scene.planes[1][3, 2] + scene.planes[2][1, 2]
        assert_allclose(plane_features(scene, x), expected, atol=1e-12)

    def test_at_cell_center(self):
        scene = random_scene(plane_res=5)
        c = 0.5 * (node(1, 5) + node(2, 5))
        x = np.array([c, c, c])
        expected = sum(scene.planes[k][1:3, 1:3].mean(axis=(0, 1)) for k in range(3))
        assert_allclose(plane_features(scene, x), expected, atol=1e-12)

    def test_constant_planes(self):
        scene = TriPlaneScene.zeros(plane_res=6, features=3, hidden=4)
        scene.planes[:] = 0.7
        x = np.random.default_rng(0).uniform(-1, 1, (50, 3))
        assert_allclose(plane_features(scene, x), 2.1, atol=1e-12)

    def test_plane_projections(self):
        # Swapping x and y while swapping P_yz with P_xz and transposing P_xy
        # leaves the three projections, and hence the features, unchanged.
        scene = random_scene(plane_res=7)
        swapped = TriPlaneScene(
            planes=np.stack(
                [scene.planes[0].transpose(1, 0, 2), scene.planes[2], scene.planes[1]]
            ),
            mlp=scene.mlp,
        )
        x = np.random.default_rng(1).uniform(-1, 1, (20, 3))
        assert_allclose(plane_features(scene, x), plane_features(swapped, x[:, [1, 0, 2]]), atol=1e-12)


class TestDecode:
    def test_zero_scene(self):
        sample = decode(TriPlaneScene.zeros(4, 3, 5), np.array([0.1, -0.2, 0.3]))
        assert sample.density == pytest.approx(math.log(2))
        assert_allclose(sample.color, 0.5)

    def test_outside_cube_is_empty(self):
        sample = decode(random_scene(), np.array([[1.5, 0.0, 0.0], [0.0, 0.0, -1.01]]))
        assert_array_equal(sample.density, 0.0)

    def test_ranges(self):
        sample = decode(random_scene(), np.random.default_rng(2).uniform(-1, 1, (500, 3)))
        assert np.all(sample.density >= 0)
        assert np.all((sample.color >= 0) & (sample.color <= 1))

    def test_batch_shape(self):
        sample = decode(random_scene(), np.zeros((4, 6, 3)))
        assert sample.color.shape == (4, 6, 3)
        assert sample.density.shape == (4, 6)

    def test_matches_finite_differences(self):
        scene = random_scene(seed=3, plane_res=5, features=4, hidden=6)
        rng = np.random.default_rng(4)
        x = rng.uniform(-0.95, 0.95, (7, 3))
        d_color = rng.standard_normal((7, 3))
        d_density = rng.standard_normal(7)

        def objective():
            s = decode(scene, x)
            return float(np.sum(d_color * s.color) + np.sum(d_density * s.density))

        grads = decode_backward(scene, x, d_color, d_density)
        params = scene.parameters()
        h = 1e-4
        for name, p in params.items():
            flat = p.reshape(-1)
            candidates = np.flatnonzero(grads[name]) if name == "planes" else np.arange(flat.size)
            for index in rng.choice(candidates, min(5, candidates.size), replace=False):
                original = flat[index]
                flat[index] = original + h
                plus = objective()
                flat[index] = original - h
                minus = objective()
                flat[index] = original
                numeric = (plus - minus) / (2 * h)
                assert grads[name].reshape(-1)[index] == pytest.approx(numeric, rel=1e-3, abs=1e-8)


class TestDecodeBackward:
    def test_zero_upstream(self):
        scene = random_scene()
        grads = decode_backward(scene, np.full((3, 3), 0.2), np.zeros((3, 3)), np.zeros(3))
        for g in grads.values():
            assert_array_equal(g, 0.0)

    def test_plane_support_is_the_stencil(self):
        scene = random_scene(plane_res=5)
        c = 0.5 * (node(1, 5) + node(2, 5))
        grads = decode_backward(scene, np.array([[c, c, c]]), np.ones((1, 3)), np.ones(1))
        touched = np.argwhere(np.any(grads["planes"] != 0, axis=-1))
        assert len(touched) <= 12
        assert set(map(tuple, touched[:, 1:])) <= {(1, 1), (1, 2), (2, 1), (2, 2)}

    def test_accumulates_into_given_buffer(self):
        scene = random_scene()
        x = np.full((2, 3), 0.3)
        once = decode_backward(scene, x, np.ones((2, 3)), np.ones(2))
        buffer = decode_backward(scene, x, np.ones((2, 3)), np.ones(2))
        twice = decode_backward(scene, x, np.ones((2, 3)), np.ones(2), grads=buffer)
        assert_allclose(twice["mlp.w1"], 2 * once["mlp.w1"])


class TestTriPlaneScene:
    def test_rejects_mismatched_features(self):
        with pytest.raises(ContractViolation):
            TriPlaneScene(planes=np.zeros((3, 4, 4, 5)), mlp=MlpParams.zeros(6, 8))

    def test_rejects_bad_mlp_shapes(self):
        mlp = MlpParams.zeros(4, 8)
        with pytest.raises(ContractViolation):
            MlpParams(mlp.w1, mlp.b1, mlp.w2, mlp.b2, np.zeros((8, 3)), mlp.b3)

    def test_parameters_are_views(self):
        scene = random_scene()
        scene.parameters()["planes"][0, 0, 0, 0] = 42.0
        assert scene.planes[0, 0, 0, 0] == 42.0

    def test_single_precision(self):
        scene = random_scene().astype(np.float32)
        sample = decode(scene, np.zeros((2, 3)))
        assert sample.color.dtype == np.float32


class TestExportDensityGrid:
    def test_zero_scene_is_ln2(self):
        grid = export_density_grid(TriPlaneScene.zeros(4, 3, 5), 32)
        assert grid.shape == (32, 32, 32)
        assert grid.dtype == np.float32
        assert_allclose(grid, math.log(2), atol=1e-6)

    def test_matches_decode_at_lattice(self):
        scene = random_scene(seed=5)
        grid = export_density_grid(scene, 6, slab=4)
        c = lattice_centers(6)
        for z, y, x in [(0, 0, 0), (5, 2, 1), (3, 4, 5)]:
            expected = decode(scene, np.array([c[x], c[y], c[z]])).density
            assert grid[z, y, x] == pytest.approx(float(expected), rel=1e-6)

    def test_rejects_tiny_resolution(self):
        with pytest.raises(ContractViolation):
            export_density_grid(random_scene(), 1)
