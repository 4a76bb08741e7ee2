import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from patchwise_nerf.core.geometry import (
    CameraPose,
    PatchSpec,
    Ray,
    RayBundle,
    full_frame_rays,
    patch_rays,
)
from patchwise_nerf.core.renderer import (
    RenderConfig,
    backprop_rays,
    composite,
    compositing_weights,
    importance_resample,
    inverse_sphere_param,
    render_background,
    render_full_frame,
    render_patch,
    render_rays,
    stratify,
)
from patchwise_nerf.errors import ContractViolation
from patchwise_nerf.fields.background import BackgroundField
from patchwise_nerf.fields.oracles import AnalyticSphere, ConstantField
from patchwise_nerf.fields.triplane import TriPlaneScene

UNIT_RAY = Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]), t_near=0.0, t_far=1.0)
NO_JITTER = RenderConfig(n_coarse=16, n_fine=16, stratified_jitter=False)


def small_scene(seed=0) -> TriPlaneScene:
    return TriPlaneScene.initialize(8, 4, 8, np.random.default_rng(seed))


class TestStratify:
    def test_single_sample_is_midpoint(self):
        ray = Ray(origin=np.zeros(3), direction=np.array([1.0, 0.0, 0.0]), t_near=2.0, t_far=5.0)
        assert_allclose(stratify(ray, 1, jitter=False), [3.5])

    def test_bin_centers(self):
        assert_allclose(stratify(UNIT_RAY, 4, jitter=False), [0.125, 0.375, 0.625, 0.875])

    def test_jitter_stays_in_bins(self):
        rng = np.random.default_rng(0)
        n = 8
        for _ in range(10_000 // n):
            depths = stratify(UNIT_RAY, n, jitter=True, rng=rng)
            assert np.all(np.diff(depths) > 0)
            assert_array_equal(np.floor(depths * n), np.arange(n))

    def test_jitter_needs_rng(self):
        with pytest.raises(ContractViolation):
            stratify(UNIT_RAY, 4, jitter=True)


class TestComposite:
    def test_empty_medium_shows_background(self):
        depths = np.linspace(0.1, 0.9, 5)
        rgb = composite(np.ones((5, 3)), np.zeros(5), depths, 1.0, (0.2, 0.4, 0.6))
        assert_allclose(rgb, [0.2, 0.4, 0.6])

    def test_homogeneous_medium(self):
        depths = np.linspace(0.0, 2.0, 256, endpoint=False)
        color = np.array([0.3, 0.6, 0.9])
        rgb = composite(np.tile(color, (256, 1)), np.ones(256), depths, 2.0)
        assert_allclose(rgb, color * (1 - math.exp(-2.0)), atol=1e-3)

    def test_opaque_sample(self):
        colors = np.array([[0.1, 0.7, 0.2], [1.0, 1.0, 1.0]])
        rgb = composite(colors, np.array([1e4, 1e4]), np.array([0.5, 0.6]), 1.0, (1.0, 1.0, 1.0))
        assert_allclose(rgb, colors[0], atol=1e-6)

    def test_equal_depths_allowed(self):
        rgb = composite(np.ones((3, 3)), np.ones(3), np.array([0.2, 0.2, 0.5]), 1.0)
        assert np.all(np.isfinite(rgb))

    def test_decreasing_depths_rejected(self):
        with pytest.raises(ContractViolation):
            composite(np.ones((3, 3)), np.ones(3), np.array([0.2, 0.1, 0.5]), 1.0)


class TestCompositingWeights:
    def test_partition_of_unity(self):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            depths = np.sort(rng.uniform(0.0, 4.0, 12))
            densities = rng.exponential(2.0, 12)
            weights, t_final = compositing_weights(densities, depths, 4.0)
            assert np.all(weights >= 0)
            assert weights.sum() + t_final == pytest.approx(1.0, abs=1e-6)


class TestImportanceResample:
    coarse = (np.arange(8) + 0.5) / 8

    def test_contract(self):
        merged = importance_resample(self.coarse, np.ones(8), 16, np.random.default_rng(0), 0.0, 1.0)
        assert merged.shape == (24,)
        assert np.all(np.diff(merged) >= 0)

    def test_concentrated_weights(self):
        weights = np.zeros(8)
        weights[3] = 1.0
        merged = importance_resample(self.coarse, weights, 10_000, np.random.default_rng(2), 0.0, 1.0)
        fine = merged[~np.isin(merged, self.coarse)]
        in_bin = np.mean((fine >= 3 / 8) & (fine <= 4 / 8))
        assert in_bin >= 0.9

    def test_uniform_weights_give_uniform_depths(self):
        merged = importance_resample(self.coarse, np.ones(8), 10_000, np.random.default_rng(3), 0.0, 1.0)
        fine = merged[~np.isin(merged, self.coarse)]
        assert stats.kstest(fine, "uniform").pvalue > 1e-3

    def test_zero_weights_fall_back_to_uniform(self):
        merged = importance_resample(self.coarse, np.zeros(8), 7, None, 0.0, 1.0)
        fine = merged[~np.isin(merged, self.coarse)]
        assert_allclose(fine, (np.arange(7) + 1) / 8, atol=1e-9)

    def test_deterministic_without_rng(self):
        w = np.random.default_rng(4).random(8)
        assert_array_equal(
            importance_resample(self.coarse, w, 16), importance_resample(self.coarse, w, 16)
        )

    def test_rejects_negative_weights(self):
        with pytest.raises(ContractViolation):
            importance_resample(self.coarse, -np.ones(8), 4)


class TestInverseSphereParam:
    def test_known_point(self):
        assert_allclose(inverse_sphere_param(np.array([2.0, 0.0, 0.0])), [1.0, 0.0, 0.0, 0.5])

    def test_unit_direction_and_limit(self):
        x = np.random.default_rng(5).standard_normal((100, 3)) * 50
        x = x[np.linalg.norm(x, axis=-1) > 1]
        out = inverse_sphere_param(x)
        assert_allclose(np.linalg.norm(out[:, :3], axis=-1), 1.0)
        assert inverse_sphere_param(np.array([1e9, 0.0, 0.0]))[3] < 1e-8

    def test_rejects_inside_points(self):
        with pytest.raises(ContractViolation):
            inverse_sphere_param(np.array([0.5, 0.0, 0.0]))


class TestRenderPatch:
    pose = CameraPose(yaw=0.4, pitch=1.2)

    def test_empty_scene_is_white(self):
        spec = PatchSpec(scale=0.5, offset_x=0.1, offset_y=0.3, patch_res=8, full_res=16)
        image = render_patch(ConstantField(density=0.0), self.pose, spec, NO_JITTER)
        assert image.shape == (8, 8, 3)
        assert_array_equal(image, 1.0)

    def test_full_patch_equals_full_frame(self):
        cfg = RenderConfig(n_coarse=8, n_fine=8)
        scene = small_scene()
        spec = PatchSpec(scale=1.0, offset_x=0.0, offset_y=0.0, patch_res=64, full_res=64)
        a = render_patch(scene, self.pose, spec, cfg, rng=np.random.default_rng(9))
        b = render_rays(scene, full_frame_rays(self.pose, 64), cfg, rng=np.random.default_rng(9)).rgb
        assert_array_equal(a, b)

    def test_sphere_silhouette(self):
        res, radius = 128, 0.5
        pose = CameraPose(yaw=0.0, pitch=math.pi / 2, radius=3.5)
        sphere = AnalyticSphere(radius=radius, density=50.0, color=(0.0, 0.0, 0.0))
        cfg = RenderConfig(n_coarse=64, n_fine=64, stratified_jitter=False)
        image = render_full_frame(sphere, pose, res, cfg)
        measured = math.sqrt(np.sum(image.mean(axis=-1) < 0.5) / math.pi)
        angular = math.asin(radius / pose.radius)
        predicted = math.tan(angular) / math.tan(pose.fov / 2) * res / 2
        assert measured == pytest.approx(predicted, abs=1.0)

    def test_expected_depth_of_opaque_sphere(self):
        pose = CameraPose(yaw=1.0, pitch=1.0, radius=3.5)
        sphere = AnalyticSphere(radius=0.5, density=1e3)
        cfg = RenderConfig(n_coarse=128, n_fine=128, stratified_jitter=False)
        result = render_rays(sphere, full_frame_rays(pose, 1), cfg)
        assert result.depth[0, 0] == pytest.approx(3.0, abs=0.02)

    def test_jitter_needs_rng(self):
        with pytest.raises(ContractViolation):
            render_rays(small_scene(), full_frame_rays(self.pose, 4), RenderConfig())

    def test_homogeneous_medium_converges_with_sample_count(self):
        rays = RayBundle(
            origins=np.zeros((1, 3)),
            directions=np.array([[0.0, 0.0, 1.0]]),
            t_near=np.array([0.0]),
            t_far=np.array([2.0]),
        )
        color = np.array([0.3, 0.6, 0.9])
        exact = color * (1 - math.exp(-2.0))
        errors = []
        for n in (4, 8, 16, 32, 64, 128):
            cfg = RenderConfig(n_coarse=n, n_fine=n, stratified_jitter=False, background="black")
            rgb = render_rays(ConstantField(color, density=1.0), rays, cfg).rgb[0]
            errors.append(np.max(np.abs(rgb - exact)))
        assert np.all(np.diff(errors) < 0)
        assert errors[-1] < 1e-3


class TestBackground:
    pose = CameraPose(yaw=0.0, pitch=1.3)

    def test_constant_background(self):
        color = (0.2, 0.5, 0.7)
        background = BackgroundField.constant(color, density=1.0)
        cfg = RenderConfig(n_coarse=8, n_fine=8, stratified_jitter=False, background="nerfpp", n_background=8)
        image = render_full_frame(ConstantField(density=0.0), self.pose, 4, cfg, background)
        assert_allclose(image, np.broadcast_to(color, image.shape), atol=1e-9)

    def test_background_alone(self):
        background = BackgroundField.constant((0.9, 0.1, 0.4), density=2.0)
        rgb = render_background(background, full_frame_rays(self.pose, 3), 16)
        assert_allclose(rgb[1, 2], [0.9, 0.1, 0.4], atol=1e-9)

    def test_random_background_is_bounded(self):
        background = BackgroundField.initialize(hidden=16, rng=np.random.default_rng(0))
        cfg = RenderConfig(n_coarse=8, n_fine=0, background="nerfpp", n_background=8)
        image = render_full_frame(
            ConstantField(density=0.0), self.pose, 6, cfg, background, np.random.default_rng(1)
        )
        assert np.all((image >= 0) & (image <= 1))

    def test_needs_background_field(self):
        cfg = RenderConfig(background="nerfpp", stratified_jitter=False)
        with pytest.raises(ContractViolation):
            render_full_frame(ConstantField(density=0.0), self.pose, 4, cfg)


class TestWorkerIndependence:
    pose = CameraPose(yaw=-0.8, pitch=1.1)

    def test_render_is_independent_of_workers(self):
        cfg = RenderConfig(n_coarse=8, n_fine=8, chunk_rays=37)
        rays = patch_rays(self.pose, PatchSpec.full_frame(24))
        scene = small_scene(1)
        one = render_rays(scene, rays, cfg, rng=np.random.default_rng(5), workers=1)
        many = render_rays(scene, rays, cfg, rng=np.random.default_rng(5), workers=8)
        assert_array_equal(one.rgb, many.rgb)
        assert_array_equal(one.depths, many.depths)

    def test_backprop_is_independent_of_workers(self):
        cfg = RenderConfig(n_coarse=8, n_fine=8, chunk_rays=37)
        rays = patch_rays(self.pose, PatchSpec.full_frame(24))
        scene = small_scene(2)
        result = render_rays(scene, rays, cfg, rng=np.random.default_rng(6))
        d_rgb = np.random.default_rng(7).standard_normal(result.rgb.shape)
        one = backprop_rays(scene, rays, result, d_rgb, cfg.chunk_rays, workers=1)
        many = backprop_rays(scene, rays, result, d_rgb, cfg.chunk_rays, workers=8)
        for name in one:
            assert_array_equal(one[name], many[name])
