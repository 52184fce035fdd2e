"""
Depth Renderer
--------------
Depth-only differentiable splatting of a GaussianSet through a pinhole camera.

Rendering happens in two stages:

1. ``project_gaussians`` maps every primitive into screen space (2D mean,
   first-order 2D covariance, camera depth, 3-sigma box) with plain torch ops,
   so autograd carries gradients from screen space back to the 3D parameters.
2. ``_RasterizeDepth`` composites the sorted splats front to back in 16x16
   tiles. Its backward pass is analytic (``render_depth_backward``) and
   accumulates per-tile partials in a fixed tile order.

Ground-truth depth maps use 0 as the "no hit" sentinel.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch

from geopredict_architecture import BACKGROUND_DEPTH, CameraModel, WorkspaceSpec
from geometry_predictor import GaussianSet
from numerics import ShapeError

logger = logging.getLogger("geopredict.renderer")

# slack on box/tile overlap tests so rounding never drops a covered pixel
OVERLAP_SLACK = 1e-6
MILLIMETERS_PER_METER = 1000.0
PGM_MAX_VALUE = 65535


@dataclass(frozen=True)
class RenderSettings:
    near_plane: float = 0.01
    cov2d_regularization: float = 0.3
    cull_sigma: float = 3.0
    alpha_clamp: float = 0.99
    min_transmittance: float = 1e-4
    tile_size: int = 16
    falloff: bool = True

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError(f"tile size must be >= 1, got {self.tile_size}")
        if not 0.0 < self.alpha_clamp < 1.0:
            raise ValueError(f"alpha clamp must lie in (0, 1), got {self.alpha_clamp}")


@dataclass
class ProjectedSplats:
    """
    Screen-space records sorted front to back. ``source_index`` maps each splat
    back to its row in the rendered GaussianSet.
    """

    source_index: torch.Tensor
    means2d: torch.Tensor  # (P, 2) pixel coordinates (u, v)
    cov2d: torch.Tensor  # (P, 2, 2) px^2, regularized
    depths: torch.Tensor  # (P,) camera z, meters
    opacities: torch.Tensor  # (P,)
    radii: torch.Tensor  # (P, 2) half extents of the cull box, constant

    def __len__(self) -> int:
        return self.source_index.shape[0]


def projection_jacobian(points_cam: torch.Tensor, fx: float, fy: float) -> torch.Tensor:
    """(N, 2, 3) Jacobian of (fx x / z, fy y / z) at camera-frame points."""
    x, y, z = points_cam.unbind(dim=-1)
    zeros = torch.zeros_like(z)
    return torch.stack(
        [
            torch.stack([fx / z, zeros, -fx * x / (z * z)], dim=-1),
            torch.stack([zeros, fy / z, -fy * y / (z * z)], dim=-1),
        ],
        dim=-2,
    )


def project_covariance(
    points_cam: torch.Tensor,
    cov_world: torch.Tensor,
    camera: CameraModel,
    regularization: float,
) -> torch.Tensor:
    """2D covariance J W Sigma W^T J^T + reg I."""
    rot = camera.rotation_matrix(cov_world.dtype)
    jac = projection_jacobian(points_cam, camera.fx, camera.fy)
    jw = jac @ rot
    cov2d = jw @ cov_world @ jw.transpose(-1, -2)
    eye = torch.eye(2, dtype=cov2d.dtype)
    return cov2d + regularization * eye


def project_gaussians(
    gaussians: GaussianSet,
    camera: CameraModel,
    settings: Optional[RenderSettings] = None,
) -> ProjectedSplats:
    """
    Project, cull (near plane, boxes fully off-image) and sort front to back.
    Ties in depth keep the canonical (provenance, voxel, slot) order.
    """
    settings = settings or RenderSettings()
    dtype = gaussians.dtype
    canonical = gaussians.canonical_order()
    with torch.no_grad():
        depth_all = camera.world_to_camera(gaussians.means.detach()[canonical])[:, 2]
    front = canonical[depth_all > settings.near_plane]
    if front.numel() == 0:
        return _empty_splats(dtype)

    points_cam = camera.world_to_camera(gaussians.means[front])
    z = points_cam[:, 2]
    means2d = torch.stack(
        [camera.fx * points_cam[:, 0] / z + camera.cx, camera.fy * points_cam[:, 1] / z + camera.cy],
        dim=-1,
    )
    cov_world = gaussians.select(front).covariances()
    cov2d = project_covariance(points_cam, cov_world, camera, settings.cov2d_regularization)

    with torch.no_grad():
        radii = settings.cull_sigma * torch.sqrt(torch.diagonal(cov2d.detach(), dim1=-2, dim2=-1))
        mean = means2d.detach()
        upper = torch.tensor([camera.width - 0.5, camera.height - 0.5], dtype=dtype)
        on_image = ((mean + radii + OVERLAP_SLACK >= 0.5) & (mean - radii - OVERLAP_SLACK <= upper)).all(dim=-1)
    keep = torch.nonzero(on_image).squeeze(-1)
    if keep.numel() == 0:
        return _empty_splats(dtype)

    # stable sort keeps canonical order among equal depths
    order = keep[torch.argsort(z.detach()[keep], stable=True)]
    return ProjectedSplats(
        source_index=front[order],
        means2d=means2d[order],
        cov2d=cov2d[order],
        depths=z[order],
        opacities=gaussians.opacities[front[order]],
        radii=radii[order],
    )


def _empty_splats(dtype: torch.dtype) -> ProjectedSplats:
    return ProjectedSplats(
        source_index=torch.zeros(0, dtype=torch.long),
        means2d=torch.zeros(0, 2, dtype=dtype),
        cov2d=torch.zeros(0, 2, 2, dtype=dtype),
        depths=torch.zeros(0, dtype=dtype),
        opacities=torch.zeros(0, dtype=dtype),
        radii=torch.zeros(0, 2, dtype=dtype),
    )


# --- Rasterization ---


@dataclass
class TileBin:
    pixels: torch.Tensor  # flat pixel indices (row * width + col)
    splats: torch.Tensor  # indices into the sorted splat list


@dataclass
class RasterState:
    """Everything the backward pass needs: inputs and the per-tile splat lists."""

    means2d: torch.Tensor
    cov2d: torch.Tensor
    depths: torch.Tensor
    opacities: torch.Tensor
    radii: torch.Tensor
    height: int
    width: int
    settings: RenderSettings
    tiles: List[TileBin] = field(default_factory=list)


@dataclass
class SplatGradients:
    means2d: torch.Tensor
    cov2d: torch.Tensor
    depths: torch.Tensor
    opacities: torch.Tensor


@dataclass
class _TileTerms:
    dx: torch.Tensor
    dy: torch.Tensor
    conic: torch.Tensor
    falloff: torch.Tensor
    raw_alpha: torch.Tensor
    covered: torch.Tensor
    alpha: torch.Tensor
    transmittance: torch.Tensor
    active: torch.Tensor
    weights: torch.Tensor


def _conic(cov2d: torch.Tensor) -> torch.Tensor:
    """Inverse of each 2x2 covariance."""
    a, b = cov2d[:, 0, 0], cov2d[:, 0, 1]
    c, d = cov2d[:, 1, 0], cov2d[:, 1, 1]
    det = a * d - b * c
    return torch.stack([torch.stack([d, -b], dim=-1), torch.stack([-c, a], dim=-1)], dim=-2) / det[:, None, None]


def _bin_tiles(state: RasterState) -> List[TileBin]:
    tile = state.settings.tile_size
    height, width = state.height, state.width
    mean = state.means2d
    radii = state.radii
    bins = []
    for row0 in range(0, height, tile):
        row1 = min(row0 + tile, height)
        for col0 in range(0, width, tile):
            col1 = min(col0 + tile, width)
            overlaps = (
                (mean[:, 0] - radii[:, 0] - OVERLAP_SLACK <= col1 - 0.5)
                & (mean[:, 0] + radii[:, 0] + OVERLAP_SLACK >= col0 + 0.5)
                & (mean[:, 1] - radii[:, 1] - OVERLAP_SLACK <= row1 - 0.5)
                & (mean[:, 1] + radii[:, 1] + OVERLAP_SLACK >= row0 + 0.5)
            )
            splats = torch.nonzero(overlaps).squeeze(-1)
            if splats.numel() == 0:
                continue
            rows = torch.arange(row0, row1)
            cols = torch.arange(col0, col1)
            pixels = (rows[:, None] * width + cols[None, :]).reshape(-1)
            bins.append(TileBin(pixels=pixels, splats=splats))
    return bins


def _tile_terms(state: RasterState, bin_: TileBin) -> _TileTerms:
    settings = state.settings
    dtype = state.means2d.dtype
    u = (bin_.pixels % state.width).to(dtype) + 0.5
    v = torch.div(bin_.pixels, state.width, rounding_mode="floor").to(dtype) + 0.5
    mean = state.means2d[bin_.splats]
    radii = state.radii[bin_.splats]
    conic = _conic(state.cov2d[bin_.splats])

    dx = u[None, :] - mean[:, 0:1]
    dy = v[None, :] - mean[:, 1:2]
    covered = (dx.abs() <= radii[:, 0:1]) & (dy.abs() <= radii[:, 1:2])
    if settings.falloff:
        power = 0.5 * (
            conic[:, 0, 0, None] * dx * dx
            + (conic[:, 0, 1, None] + conic[:, 1, 0, None]) * dx * dy
            + conic[:, 1, 1, None] * dy * dy
        )
        falloff = torch.exp(-power)
    else:
        falloff = torch.ones_like(dx)
    raw_alpha = state.opacities[bin_.splats, None] * falloff
    alpha = torch.where(covered, torch.clamp(raw_alpha, max=settings.alpha_clamp), torch.zeros_like(raw_alpha))
    through = torch.cumprod(1.0 - alpha, dim=0)
    transmittance = torch.cat([torch.ones_like(through[:1]), through[:-1]], dim=0)
    active = transmittance >= settings.min_transmittance
    weights = torch.where(active, transmittance * alpha, torch.zeros_like(alpha))
    return _TileTerms(dx, dy, conic, falloff, raw_alpha, covered, alpha, transmittance, active, weights)


def rasterize_forward(
    means2d: torch.Tensor,
    cov2d: torch.Tensor,
    depths: torch.Tensor,
    opacities: torch.Tensor,
    radii: torch.Tensor,
    height: int,
    width: int,
    settings: RenderSettings,
) -> Tuple[torch.Tensor, RasterState]:
    """Composite sorted splats; returns the (height, width) depth map and the raster state."""
    state = RasterState(
        means2d=means2d.detach(),
        cov2d=cov2d.detach(),
        depths=depths.detach(),
        opacities=opacities.detach(),
        radii=radii.detach(),
        height=height,
        width=width,
        settings=settings,
    )
    depth = torch.zeros(height * width, dtype=means2d.dtype)
    state.tiles = _bin_tiles(state) if len(depths) else []
    for bin_ in state.tiles:
        terms = _tile_terms(state, bin_)
        depth[bin_.pixels] = (terms.weights * state.depths[bin_.splats, None]).sum(dim=0)
    return depth.reshape(height, width), state


def render_depth_backward(state: RasterState, grad_depth: torch.Tensor) -> SplatGradients:
    """
    Reverse-mode pass of the compositing sum D = sum_i T_i a'_i d_i. Skipped
    (early-terminated) splats and uncovered pixels contribute nothing.
    """
    if grad_depth.shape != (state.height, state.width):
        raise ShapeError("render_depth_backward", grad_depth.shape, (state.height, state.width))
    count = state.depths.shape[0]
    dtype = state.means2d.dtype
    grad_means = torch.zeros(count, 2, dtype=dtype)
    grad_cov = torch.zeros(count, 2, 2, dtype=dtype)
    grad_depths = torch.zeros(count, dtype=dtype)
    grad_opacities = torch.zeros(count, dtype=dtype)
    flat_grad = grad_depth.reshape(-1)

    for bin_ in state.tiles:
        terms = _tile_terms(state, bin_)
        upstream = flat_grad[bin_.pixels][None, :]
        d = state.depths[bin_.splats, None]
        weighted = terms.weights * d
        behind = torch.flip(torch.cumsum(torch.flip(weighted, [0]), dim=0), [0]) - weighted
        contribution = terms.active.to(dtype) * terms.transmittance * d
        grad_alpha = upstream * (contribution - behind / (1.0 - terms.alpha))
        unclamped = terms.covered & (terms.raw_alpha < state.settings.alpha_clamp)
        grad_raw = torch.where(unclamped, grad_alpha, torch.zeros_like(grad_alpha))

        grad_depths.index_add_(0, bin_.splats, (upstream * terms.weights).sum(dim=1))
        grad_opacities.index_add_(0, bin_.splats, (grad_raw * terms.falloff).sum(dim=1))
        if not state.settings.falloff:
            continue

        opac = state.opacities[bin_.splats, None]
        grad_power = -grad_raw * opac * terms.falloff
        conic = terms.conic
        sym = conic[:, 0, 1, None] + conic[:, 1, 0, None]
        dpow_dx = conic[:, 0, 0, None] * terms.dx + 0.5 * sym * terms.dy
        dpow_dy = conic[:, 1, 1, None] * terms.dy + 0.5 * sym * terms.dx
        tile_means = -torch.stack([(grad_power * dpow_dx).sum(dim=1), (grad_power * dpow_dy).sum(dim=1)], dim=-1)

        gxx = 0.5 * (grad_power * terms.dx * terms.dx).sum(dim=1)
        gxy = 0.5 * (grad_power * terms.dx * terms.dy).sum(dim=1)
        gyy = 0.5 * (grad_power * terms.dy * terms.dy).sum(dim=1)
        grad_conic = torch.stack([torch.stack([gxx, gxy], dim=-1), torch.stack([gxy, gyy], dim=-1)], dim=-2)
        conic_t = conic.transpose(-1, -2)
        tile_cov = -conic_t @ grad_conic @ conic_t

        grad_means.index_add_(0, bin_.splats, tile_means)
        grad_cov.index_add_(0, bin_.splats, tile_cov)

    return SplatGradients(grad_means, grad_cov, grad_depths, grad_opacities)


class _RasterizeDepth(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, cov2d, depths, opacities, radii, height, width, settings):
        depth, state = rasterize_forward(means2d, cov2d, depths, opacities, radii, height, width, settings)
        ctx.state = state
        return depth

    @staticmethod
    @torch.autograd.function.once_differentiable
    def backward(ctx, grad_depth):
        grads = render_depth_backward(ctx.state, grad_depth.contiguous())
        return grads.means2d, grads.cov2d, grads.depths, grads.opacities, None, None, None, None


def rasterize_depth(splats: ProjectedSplats, camera: CameraModel, settings: RenderSettings) -> torch.Tensor:
    if len(splats) == 0:
        return torch.zeros(camera.height, camera.width, dtype=splats.depths.dtype)
    return _RasterizeDepth.apply(
        splats.means2d,
        splats.cov2d,
        splats.depths,
        splats.opacities,
        splats.radii,
        camera.height,
        camera.width,
        settings,
    )


def render_depth(
    gaussians: GaussianSet,
    camera: CameraModel,
    settings: Optional[RenderSettings] = None,
) -> torch.Tensor:
    """(height, width) depth map; differentiable w.r.t. every Gaussian parameter."""
    settings = settings or RenderSettings()
    splats = project_gaussians(gaussians, camera, settings)
    return rasterize_depth(splats, camera, settings)


# --- Supervision ---


def workspace_mask(gt_depth: torch.Tensor, camera: CameraModel, workspace: WorkspaceSpec) -> torch.Tensor:
    """Pixels whose ground-truth hit back-projects inside the workspace box."""
    if gt_depth.shape[-2:] != (camera.height, camera.width):
        raise ShapeError("workspace_mask", gt_depth.shape, (camera.height, camera.width))
    depth = gt_depth.to(torch.float64)
    u, v = camera.pixel_centers(torch.float64)
    points_cam = torch.stack(
        [(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth], dim=-1
    )
    points = camera.camera_to_world(points_cam)
    return (gt_depth != BACKGROUND_DEPTH) & workspace.contains(points)


def depth_loss(prediction: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    """
    Masked L1 over every camera, step and pixel, normalised by the mask total.
    Returns ``(loss, mask_empty)``; an empty mask gives a zero loss.
    """
    if prediction.shape != target.shape:
        raise ShapeError("depth_loss", prediction.shape, target.shape)
    if mask.shape != prediction.shape:
        raise ShapeError("depth_loss", prediction.shape, mask.shape, "mask")
    weights = mask.to(prediction.dtype)
    total = weights.sum()
    if total.item() == 0:
        logger.warning("Depth loss mask is empty; reporting zero depth loss")
        return (prediction * weights).sum(), True
    return (weights * (prediction - target).abs()).sum() / total, False


# --- Export ---


def write_pgm(path: str, depth: torch.Tensor) -> None:
    """16-bit binary PGM holding depth in millimeters, clamped to the format range."""
    if depth.dim() != 2:
        raise ShapeError("write_pgm", depth.shape, ("height", "width"))
    millimeters = np.clip(np.rint(depth.detach().cpu().numpy() * MILLIMETERS_PER_METER), 0, PGM_MAX_VALUE)
    height, width = millimeters.shape
    with open(path, "wb") as handle:
        handle.write(f"P5\n{width} {height}\n{PGM_MAX_VALUE}\n".encode("ascii"))
        handle.write(millimeters.astype(">u2").tobytes())
    logger.info(f"Wrote {width}x{height} depth map to {path}")


def read_pgm(path: str) -> torch.Tensor:
    """Inverse of ``write_pgm``; returns depth in meters."""
    with open(path, "rb") as handle:
        data = handle.read()
    magic, extents, max_value, payload = data.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    width, height = (int(v) for v in extents.split())
    if int(max_value) != PGM_MAX_VALUE:
        raise ValueError(f"unexpected PGM max value {int(max_value)}")
    pixels = np.frombuffer(payload[: width * height * 2], dtype=">u2").reshape(height, width)
    return torch.from_numpy(pixels.astype(np.float64) / MILLIMETERS_PER_METER)
