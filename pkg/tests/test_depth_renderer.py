import math
import sys, os, unittest, tempfile, time

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../src")))
import torch
from torch.testing import assert_close
from depth_renderer import (
    RenderSettings,
    depth_loss,
    project_gaussians,
    read_pgm,
    render_depth,
    workspace_mask,
    write_pgm,
)
from geometry_predictor import GaussianSet
from geopredict_architecture import CameraModel, WorkspaceSpec
from gradcheck import check_renderer, random_gaussians
from numerics import ShapeError
from synth_env import SceneSpec

TARGET = (0.32, 0.0, 0.16)


def project_one(gaussians, covariances, index, camera, settings):
    """Screen-space mean, regularized 2D covariance and depth of one Gaussian, or None when behind the near plane."""
    rotation = camera.rotation_matrix(gaussians.dtype)
    point = rotation @ gaussians.means[index] + camera.translation_vector(gaussians.dtype)
    x, y, z = point[0], point[1], point[2]
    if z.item() <= settings.near_plane:
        return None
    zero = torch.zeros((), dtype=gaussians.dtype)
    jacobian = torch.stack(
        [
            torch.stack([camera.fx / z, zero, -camera.fx * x / (z * z)]),
            torch.stack([zero, camera.fy / z, -camera.fy * y / (z * z)]),
        ]
    )
    jw = jacobian @ rotation
    cov_world = covariances[index]
    cov2d = jw @ cov_world @ jw.T + settings.cov2d_regularization * torch.eye(2, dtype=gaussians.dtype)
    mean2d = torch.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])
    return mean2d, cov2d, z


def oracle_depth(gaussians, camera, settings):
    """Every Gaussian against every pixel, one Gaussian at a time, with no tiling and no off-image culling."""
    dtype = gaussians.dtype
    covariances = gaussians.covariances()
    projected = []
    for index in gaussians.canonical_order().tolist():
        record = project_one(gaussians, covariances, index, camera, settings)
        if record is not None:
            projected.append((record[2].item(), len(projected), index, record))
    projected.sort(key=lambda entry: entry[:2])

    u, v = camera.pixel_centers(dtype)
    depth = torch.zeros(camera.height, camera.width, dtype=dtype)
    transmittance = torch.ones_like(depth)
    for _, _, index, (mean2d, cov2d, z) in projected:
        radii = settings.cull_sigma * torch.sqrt(torch.diagonal(cov2d.detach()))
        conic = torch.linalg.inv(cov2d)
        dx = u - mean2d[0]
        dy = v - mean2d[1]
        covered = (dx.abs() <= radii[0]) & (dy.abs() <= radii[1])
        power = 0.5 * (conic[0, 0] * dx * dx + (conic[0, 1] + conic[1, 0]) * dx * dy + conic[1, 1] * dy * dy)
        alpha = torch.clamp(gaussians.opacities[index] * torch.exp(-power), max=settings.alpha_clamp)
        alpha = torch.where(covered, alpha, torch.zeros_like(alpha))
        active = transmittance >= settings.min_transmittance
        depth = depth + torch.where(active, transmittance * alpha * z, torch.zeros_like(depth))
        transmittance = transmittance * (1.0 - alpha)
    return depth


def isotropic_gaussian(center, sigma):
    return GaussianSet(
        means=torch.tensor([center], dtype=torch.float64),
        opacities=torch.tensor([0.5], dtype=torch.float64),
        log_scales=torch.full((1, 3), math.log(sigma), dtype=torch.float64),
        quaternions=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64),
        provenance=torch.zeros(1, dtype=torch.long),
        voxel_index=torch.zeros(1, dtype=torch.long),
        slot=torch.zeros(1, dtype=torch.long),
    )


def pixel_of(camera, world_point):
    x, y, z = camera.world_to_camera(world_point.unsqueeze(0))[0].tolist()
    return torch.tensor([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], dtype=torch.float64)


class TestProjection(unittest.TestCase):
    def test_isotropic_on_axis_closed_form(self):
        settings = RenderSettings()
        for depth, sigma in ((1.0, 0.05), (0.6, 0.02), (2.5, 0.1)):
            camera = CameraModel.look_at((0.0, 0.0, depth), (0.0, 0.0, 0.0), 16, 16, up=(0.0, 1.0, 0.0))
            splats = project_gaussians(isotropic_gaussian((0.0, 0.0, 0.0), sigma), camera, settings)
            self.assertEqual(len(splats), 1)
            expected = torch.diag(
                torch.tensor(
                    [(camera.fx * sigma / depth) ** 2 + 0.3, (camera.fy * sigma / depth) ** 2 + 0.3],
                    dtype=torch.float64,
                )
            )
            assert_close(splats.cov2d[0], expected, rtol=1e-10, atol=1e-12)
            self.assertAlmostEqual(splats.depths[0].item(), depth, places=12)

    def test_covariance_matches_numerical_jacobian(self):
        settings = RenderSettings()
        scene = SceneSpec.toy(image_size=32, num_cameras=2)
        gaussians = random_gaussians(16, TARGET, torch.Generator().manual_seed(6))
        step = 1e-6
        for camera in scene.cameras:
            splats = project_gaussians(gaussians, camera, settings)
            covariances = gaussians.covariances()
            for row, index in enumerate(splats.source_index.tolist()):
                mean = gaussians.means[index].detach()
                columns = []
                for axis in range(3):
                    offset = torch.zeros(3, dtype=torch.float64)
                    offset[axis] = step
                    columns.append((pixel_of(camera, mean + offset) - pixel_of(camera, mean - offset)) / (2 * step))
                jacobian = torch.stack(columns, dim=-1)
                expected = jacobian @ covariances[index].detach() @ jacobian.T + 0.3 * torch.eye(2, dtype=torch.float64)
                error = (splats.cov2d[row].detach() - expected).abs().max() / expected.abs().max()
                self.assertLess(error.item(), 1e-4)
                assert_close(splats.means2d[row].detach(), pixel_of(camera, mean), rtol=0, atol=1e-10)

    def test_near_plane_culls(self):
        camera = CameraModel.look_at((0.0, 0.0, 1.0), (0.0, 0.0, 0.0), 16, 16, up=(0.0, 1.0, 0.0))
        self.assertEqual(len(project_gaussians(isotropic_gaussian((0.0, 0.0, 0.995), 0.05), camera)), 0)
        self.assertEqual(len(project_gaussians(isotropic_gaussian((0.0, 0.0, 0.98), 0.05), camera)), 1)


class TestRendererOracle(unittest.TestCase):
    def test_tiled_render_matches_oracle(self):
        started = time.time()
        scene = SceneSpec.toy(image_size=32, num_cameras=2)
        settings = RenderSettings()
        for seed in range(10):
            generator = torch.Generator().manual_seed(seed)
            gaussians = random_gaussians(64, TARGET, generator)
            for camera in scene.cameras:
                tiled = render_depth(gaussians, camera, settings)
                assert_close(tiled, oracle_depth(gaussians, camera, settings), rtol=0, atol=1e-10)
        self.assertLess(time.time() - started, 60)

    def test_tile_size_does_not_change_the_image(self):
        camera = SceneSpec.toy(image_size=32).cameras[0]
        gaussians = random_gaussians(32, TARGET, torch.Generator().manual_seed(5))
        reference = render_depth(gaussians, camera, RenderSettings(tile_size=16))
        for tile in (1, 5, 8, 32):
            assert_close(render_depth(gaussians, camera, RenderSettings(tile_size=tile)), reference, rtol=0, atol=1e-12)

    def test_input_order_does_not_matter(self):
        camera = SceneSpec.toy(image_size=16).cameras[1]
        gaussians = random_gaussians(20, TARGET, torch.Generator().manual_seed(2))
        shuffled = gaussians.select(torch.randperm(20, generator=torch.Generator().manual_seed(9)))
        self.assertTrue(torch.equal(render_depth(gaussians, camera), render_depth(shuffled, camera)))

    def test_empty_and_behind_camera(self):
        camera = SceneSpec.toy(image_size=16).cameras[0]
        self.assertTrue(torch.equal(render_depth(GaussianSet.empty(), camera), torch.zeros(16, 16, dtype=torch.float64)))
        gaussians = random_gaussians(4, TARGET, torch.Generator().manual_seed(0))
        eye = -camera.rotation_matrix().T @ camera.translation_vector()
        behind = GaussianSet(
            means=eye + (eye - torch.tensor(TARGET, dtype=torch.float64)) + gaussians.means * 0,
            opacities=gaussians.opacities,
            log_scales=gaussians.log_scales,
            quaternions=gaussians.quaternions,
            provenance=gaussians.provenance,
            voxel_index=gaussians.voxel_index,
            slot=gaussians.slot,
        )
        self.assertEqual(len(project_gaussians(behind, camera)), 0)
        self.assertTrue((render_depth(behind, camera) == 0).all())

    def test_single_opaque_splat_depth(self):
        camera = CameraModel.look_at((0.0, 0.0, 1.0), (0.0, 0.0, 0.0), 16, 16, up=(0.0, 1.0, 0.0))
        gaussians = GaussianSet.from_raw(
            torch.zeros(1, 3, dtype=torch.float64),
            torch.tensor([50.0], dtype=torch.float64),
            torch.full((1, 3), -1.0, dtype=torch.float64),
            torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64),
        )
        depth = render_depth(gaussians, camera, RenderSettings(alpha_clamp=0.99))
        self.assertAlmostEqual(depth[8, 8].item(), 0.99, places=6)


class TestRendererGradients(unittest.TestCase):
    def test_backward_matches_autograd_through_oracle(self):
        camera = SceneSpec.toy(image_size=16).cameras[0]
        settings = RenderSettings()
        generator = torch.Generator().manual_seed(4)
        weights = torch.randn(16, 16, generator=generator, dtype=torch.float64)
        grads = []
        for renderer in (render_depth, oracle_depth):
            gaussians = random_gaussians(12, TARGET, torch.Generator().manual_seed(4))
            params = [gaussians.means, gaussians.opacities, gaussians.log_scales, gaussians.quaternions]
            for p in params:
                p.requires_grad_(True)
            (renderer(gaussians, camera, settings) * weights).sum().backward()
            grads.append([p.grad.clone() for p in params])
        for tiled, dense in zip(*grads):
            assert_close(tiled, dense, rtol=1e-8, atol=1e-10)

    def test_finite_differences(self):
        started = time.time()
        report = check_renderer(seed=0)
        self.assertTrue(report.passed, report.to_record())
        self.assertEqual(report.checked, 8 * 11)
        self.assertLess(time.time() - started, 120)

    def test_shape_mismatch_in_loss(self):
        with self.assertRaises(ShapeError):
            depth_loss(torch.zeros(2, 4, 4), torch.zeros(2, 4, 5), torch.ones(2, 4, 4, dtype=torch.bool))


class TestSupervision(unittest.TestCase):
    def test_depth_loss_value(self):
        prediction = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
        target = torch.tensor([[1.5, 0.0], [3.0, 1.0]], dtype=torch.float64)
        mask = torch.tensor([[True, False], [True, True]])
        loss, empty = depth_loss(prediction, target, mask)
        self.assertFalse(empty)
        self.assertAlmostEqual(loss.item(), (0.5 + 0.0 + 3.0) / 3)

    def test_empty_mask_warns_and_returns_zero(self):
        prediction = torch.ones(2, 2, dtype=torch.float64, requires_grad=True)
        with self.assertLogs("geopredict.renderer", level="WARNING"):
            loss, empty = depth_loss(prediction, torch.zeros(2, 2, dtype=torch.float64), torch.zeros(2, 2, dtype=torch.bool))
        self.assertTrue(empty)
        self.assertEqual(loss.item(), 0.0)

    def test_workspace_mask_excludes_background_and_outside(self):
        workspace = WorkspaceSpec(lower=(0.0, -0.32, 0.0), upper=(0.64, 0.32, 0.64), voxel_size=0.08)
        camera = CameraModel.look_at((0.32, 0.0, 2.0), (0.32, 0.0, 0.0), 8, 8, up=(0.0, 1.0, 0.0))
        depth = torch.full((8, 8), 1.8, dtype=torch.float64)  # plane z = 0.2 inside the box
        depth[0, 0] = 0.0
        depth[7, 7] = 1.0  # z = 1.0 is above the box
        mask = workspace_mask(depth, camera, workspace)
        self.assertFalse(mask[0, 0])
        self.assertFalse(mask[7, 7])
        self.assertTrue(mask[4, 4])
        with self.assertRaises(ShapeError):
            workspace_mask(torch.zeros(4, 8), camera, workspace)


class TestPgm(unittest.TestCase):
    def test_millimeter_round_trip_and_clamp(self):
        depth = torch.tensor([[0.0, 0.5], [1.2346, 80.0]], dtype=torch.float64)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "depth.pgm")
            write_pgm(path, depth)
            with open(path, "rb") as handle:
                self.assertTrue(handle.read().startswith(b"P5\n2 2\n65535\n"))
            loaded = read_pgm(path)
        assert_close(loaded, torch.tensor([[0.0, 0.5], [1.235, 65.535]], dtype=torch.float64))


if __name__ == "__main__":
    unittest.main()
