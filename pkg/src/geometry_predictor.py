"""
Geometry Predictor
------------------
Turns coarse spatial query embeddings into per-timestep 3D Gaussian sets:
temporal shifting, two-stage voxel decoding to a dense feature volume, the
per-voxel Gaussian head, and track-guided refinement that adds finer
primitives only in voxels holding a predicted keypoint.

Voxel and token order is raster order throughout: x fastest, then y, then z.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from geopredict_architecture import Provenance, WorkspaceSpec
from numerics import (
    ShapeError,
    build_spatial_encoding,
    exp,
    load_tensor,
    save_tensor,
)

logger = logging.getLogger("geopredict.geometry")

RAW_VALUES_PER_GAUSSIAN = 11  # 3 offset, 1 opacity logit, 3 log-scales, 4 quaternion
RECORD_WIDTH = 12  # mean (3), opacity, log-scales (3), quaternion (4), provenance
OFFSET_RANGE_FACTOR = 1.5


def grid_to_tokens(grid: torch.Tensor) -> torch.Tensor:
    """(..., X, Y, Z, C) -> (..., X*Y*Z, C) in raster order."""
    lead = grid.shape[:-4]
    return grid.transpose(-4, -2).reshape(*lead, -1, grid.shape[-1])


def tokens_to_grid(tokens: torch.Tensor, extents: Tuple[int, int, int]) -> torch.Tensor:
    """Inverse of ``grid_to_tokens``."""
    nx, ny, nz = extents
    if tokens.shape[-2] != nx * ny * nz:
        raise ShapeError("tokens_to_grid", tokens.shape, extents)
    lead = tokens.shape[:-2]
    return tokens.reshape(*lead, nz, ny, nx, tokens.shape[-1]).transpose(-4, -2)


def quaternion_to_rotation(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) quaternions (w, x, y, z) -> (..., 3, 3) rotation matrices."""
    q = F.normalize(q, dim=-1)
    w, x, y, z = q.unbind(dim=-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


@dataclass
class GaussianSet:
    """
    Activated primitives: centers (N, 3), opacities in (0, 1), log-scales (N, 3)
    and unit quaternions (N, 4), with provenance, source voxel and slot per primitive.
    """

    means: torch.Tensor
    opacities: torch.Tensor
    log_scales: torch.Tensor
    quaternions: torch.Tensor
    provenance: torch.Tensor
    voxel_index: torch.Tensor
    slot: torch.Tensor

    def __post_init__(self):
        count = self.means.shape[0]
        for name in ("opacities", "log_scales", "quaternions", "provenance", "voxel_index", "slot"):
            if getattr(self, name).shape[0] != count:
                raise ShapeError("gaussian_set", self.means.shape, getattr(self, name).shape, name)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.means.dtype

    def count(self, provenance: Optional[Provenance] = None) -> int:
        if provenance is None:
            return len(self)
        return int((self.provenance == int(provenance)).sum().item())

    def covariances(self) -> torch.Tensor:
        """(N, 3, 3) R diag(exp(2s)) R^T."""
        rot = quaternion_to_rotation(self.quaternions)
        variances = exp(2.0 * self.log_scales)
        return (rot * variances.unsqueeze(-2)) @ rot.transpose(-1, -2)

    def canonical_order(self) -> torch.Tensor:
        """Permutation sorting primitives by (provenance, voxel index, slot)."""
        order = torch.argsort(self.slot, stable=True)
        order = order[torch.argsort(self.voxel_index[order], stable=True)]
        return order[torch.argsort(self.provenance[order], stable=True)]

    def select(self, index: torch.Tensor) -> "GaussianSet":
        return GaussianSet(
            means=self.means[index],
            opacities=self.opacities[index],
            log_scales=self.log_scales[index],
            quaternions=self.quaternions[index],
            provenance=self.provenance[index],
            voxel_index=self.voxel_index[index],
            slot=self.slot[index],
        )

    @classmethod
    def empty(cls, dtype: torch.dtype = torch.float64) -> "GaussianSet":
        index = torch.zeros(0, dtype=torch.long)
        return cls(
            means=torch.zeros(0, 3, dtype=dtype),
            opacities=torch.zeros(0, dtype=dtype),
            log_scales=torch.zeros(0, 3, dtype=dtype),
            quaternions=torch.zeros(0, 4, dtype=dtype),
            provenance=index,
            voxel_index=index,
            slot=index,
        )

    @classmethod
    def from_raw(
        cls,
        means: torch.Tensor,
        opacity_logits: torch.Tensor,
        log_scales: torch.Tensor,
        quaternions: torch.Tensor,
        provenance: Provenance = Provenance.INITIAL,
    ) -> "GaussianSet":
        """Activate raw parameters: sigmoid opacity, normalised quaternion."""
        count = means.shape[0]
        return cls(
            means=means,
            opacities=torch.sigmoid(opacity_logits),
            log_scales=log_scales,
            quaternions=F.normalize(quaternions, dim=-1),
            provenance=torch.full((count,), int(provenance), dtype=torch.long),
            voxel_index=torch.zeros(count, dtype=torch.long),
            slot=torch.arange(count, dtype=torch.long),
        )

    def to_records(self) -> torch.Tensor:
        """(N, 12) rows of mean, opacity, log-scales, quaternion, provenance tag."""
        return torch.cat(
            [
                self.means.detach(),
                self.opacities.detach().unsqueeze(-1),
                self.log_scales.detach(),
                self.quaternions.detach(),
                self.provenance.to(self.dtype).unsqueeze(-1),
            ],
            dim=-1,
        )

    def dump(self, path: str) -> None:
        """Debug dump: one tensor of shape (count, 12) in the tensor serialization format."""
        save_tensor(path, self.to_records())

    @classmethod
    def load(cls, path: str) -> "GaussianSet":
        records = load_tensor(path)
        if records.dim() != 2 or records.shape[1] != RECORD_WIDTH:
            raise ShapeError("gaussian_set_load", records.shape, (-1, RECORD_WIDTH))
        count = records.shape[0]
        return cls(
            means=records[:, 0:3],
            opacities=records[:, 3],
            log_scales=records[:, 4:7],
            quaternions=records[:, 7:11],
            provenance=records[:, 11].round().long(),
            voxel_index=torch.zeros(count, dtype=torch.long),
            slot=torch.arange(count, dtype=torch.long),
        )


def union_gaussians(initial: GaussianSet, refined: GaussianSet) -> GaussianSet:
    """G_total = G_init followed by G_refine; provenance tags travel with each primitive."""
    return GaussianSet(
        means=torch.cat([initial.means, refined.means]),
        opacities=torch.cat([initial.opacities, refined.opacities]),
        log_scales=torch.cat([initial.log_scales, refined.log_scales]),
        quaternions=torch.cat([initial.quaternions, refined.quaternions]),
        provenance=torch.cat([initial.provenance, refined.provenance]),
        voxel_index=torch.cat([initial.voxel_index, refined.voxel_index]),
        slot=torch.cat([initial.slot, refined.slot]),
    )


# --- Spatial queries ---


class SpatialQueryGrid(nn.Module):
    """Learnable coarse voxel-token grid plus its fixed 3D sinusoidal encoding."""

    def __init__(self, extents: Tuple[int, int, int], dim: int, split: Optional[Tuple[int, int, int]] = None):
        super().__init__()
        self.extents = tuple(extents)
        self.dim = dim
        self.initial = nn.Parameter(torch.randn(*self.extents, dim) * 0.02)
        self.register_buffer("encoding", build_spatial_encoding(self.extents, dim, split))

    @property
    def num_tokens(self) -> int:
        nx, ny, nz = self.extents
        return nx * ny * nz

    def forward(self) -> torch.Tensor:
        return assemble_spatial_queries(self.initial, self.encoding)


def assemble_spatial_queries(initial: torch.Tensor, encoding: torch.Tensor) -> torch.Tensor:
    """(N_x*N_y*N_z, C) tokens Q_init + PE_spatial in raster order."""
    if initial.shape != encoding.shape:
        raise ShapeError("assemble_spatial_queries", initial.shape, encoding.shape)
    return grid_to_tokens(initial + encoding.to(initial.dtype))


def shift_temporal(embeddings: torch.Tensor, temporal_encoding: torch.Tensor, step: int) -> torch.Tensor:
    """Add PE_time[step] to every spatial token."""
    horizon = temporal_encoding.shape[0] - 1
    if not 0 <= step <= horizon:
        raise ValueError(f"temporal shift step {step} outside [0, {horizon}]")
    if embeddings.shape[-1] != temporal_encoding.shape[-1]:
        raise ShapeError("shift_temporal", embeddings.shape, temporal_encoding.shape)
    return embeddings + temporal_encoding[step].to(embeddings.dtype)


def shift_all_steps(embeddings: torch.Tensor, temporal_encoding: torch.Tensor) -> torch.Tensor:
    """(..., N, C) -> (..., H+1, N, C): one shifted copy per future step."""
    if embeddings.shape[-1] != temporal_encoding.shape[-1]:
        raise ShapeError("shift_temporal", embeddings.shape, temporal_encoding.shape)
    pe = temporal_encoding.to(embeddings.dtype)
    return embeddings.unsqueeze(-3) + pe.unsqueeze(-2)


# --- Voxel decoding ---


class UpsampleStage(nn.Module):
    """
    x2 learned block upsampling: each coarse cell maps linearly to a 2x2x2 block
    of child features, then a pointwise tanh layer.
    """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.out_dim = out_dim
        self.expand = nn.Linear(in_dim, 8 * out_dim, bias=False)
        self.pointwise = nn.Sequential(nn.Linear(out_dim, out_dim), nn.Tanh())

    def child_features(self, grid: torch.Tensor) -> torch.Tensor:
        """Pre-activation child features at doubled resolution."""
        lead = grid.shape[:-4]
        nx, ny, nz = grid.shape[-4:-1]
        n = len(lead)
        blocks = self.expand(grid).reshape(*lead, nx, ny, nz, 2, 2, 2, self.out_dim)
        order = list(range(n)) + [n, n + 3, n + 1, n + 4, n + 2, n + 5, n + 6]
        return blocks.permute(*order).reshape(*lead, 2 * nx, 2 * ny, 2 * nz, self.out_dim)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        return self.pointwise(self.child_features(grid))


class VoxelDecoder(nn.Module):
    """Two x2 stages restore the fine grid from the coarse query grid; weights shared across steps."""

    def __init__(self, workspace: WorkspaceSpec, dim: int, decoder_dim: int):
        super().__init__()
        self.coarse_extents = workspace.coarse_extents
        self.fine_extents = workspace.fine_extents
        if any(f != 4 * c for f, c in zip(self.fine_extents, self.coarse_extents)):
            raise ValueError(f"fine extents {self.fine_extents} are not 4x coarse {self.coarse_extents}")
        self.stages = nn.ModuleList([UpsampleStage(dim, decoder_dim), UpsampleStage(decoder_dim, decoder_dim)])

    def forward(self, shifted: torch.Tensor) -> torch.Tensor:
        if tuple(shifted.shape[-4:-1]) != self.coarse_extents:
            raise ShapeError("voxel_decode", shifted.shape, self.coarse_extents)
        volume = shifted
        for stage in self.stages:
            volume = stage(volume)
        return volume


def voxel_decode(shifted: torch.Tensor, decoder: VoxelDecoder) -> torch.Tensor:
    """(..., coarse X, Y, Z, C) -> (..., fine X, Y, Z, C') feature volume."""
    return decoder(shifted)


# --- Gaussian heads ---


def _primitives_from_raw(
    raw: torch.Tensor,
    centers: torch.Tensor,
    voxel_index: torch.Tensor,
    voxel_size: float,
    base_log_scale: float,
    offset_range_factor: float,
    provenance: Provenance,
) -> GaussianSet:
    count, per_voxel, _ = raw.shape
    offsets = torch.tanh(raw[..., 0:3]) * (0.5 * voxel_size * offset_range_factor)
    identity = raw.new_tensor([1.0, 0.0, 0.0, 0.0])
    means = centers.unsqueeze(1) + offsets
    quaternions = F.normalize(raw[..., 7:11] + identity, dim=-1)
    return GaussianSet(
        means=means.reshape(-1, 3),
        opacities=torch.sigmoid(raw[..., 3]).reshape(-1),
        log_scales=(raw[..., 4:7] + base_log_scale).reshape(-1, 3),
        quaternions=quaternions.reshape(-1, 4),
        provenance=torch.full((count * per_voxel,), int(provenance), dtype=torch.long),
        voxel_index=voxel_index.repeat_interleave(per_voxel),
        slot=torch.arange(per_voxel, dtype=torch.long).repeat(count),
    )


class GaussianHead(nn.Module):
    """Pointwise linear map: N_G x 11 raw values per fine voxel."""

    def __init__(
        self,
        workspace: WorkspaceSpec,
        decoder_dim: int,
        per_voxel: int,
        base_log_scale: float,
        offset_range_factor: float = OFFSET_RANGE_FACTOR,
    ):
        super().__init__()
        if per_voxel < 1:
            raise ValueError(f"gaussians per voxel must be >= 1, got {per_voxel}")
        self.workspace = workspace
        self.per_voxel = per_voxel
        self.base_log_scale = base_log_scale
        self.offset_range_factor = offset_range_factor
        self.linear = nn.Linear(decoder_dim, per_voxel * RAW_VALUES_PER_GAUSSIAN)

    def forward(self, volume: torch.Tensor) -> GaussianSet:
        features = grid_to_tokens(volume)
        raw = self.linear(features).reshape(-1, self.per_voxel, RAW_VALUES_PER_GAUSSIAN)
        centers = self.workspace.voxel_centers(volume.dtype)
        return _primitives_from_raw(
            raw,
            centers,
            torch.arange(features.shape[0], dtype=torch.long),
            self.workspace.voxel_size,
            self.base_log_scale,
            self.offset_range_factor,
            Provenance.INITIAL,
        )


def gaussian_head(volume: torch.Tensor, head: GaussianHead) -> GaussianSet:
    return head(volume)


class RefinementHead(nn.Module):
    """Shared MLP emitting N_G' finer primitives for each marked voxel."""

    def __init__(
        self,
        workspace: WorkspaceSpec,
        decoder_dim: int,
        per_voxel: int,
        base_log_scale: float,
        offset_range_factor: float = OFFSET_RANGE_FACTOR,
    ):
        super().__init__()
        self.workspace = workspace
        self.per_voxel = per_voxel
        self.base_log_scale = base_log_scale
        self.offset_range_factor = offset_range_factor
        self.mlp = nn.Sequential(
            nn.Linear(decoder_dim, decoder_dim),
            nn.Tanh(),
            nn.Linear(decoder_dim, per_voxel * RAW_VALUES_PER_GAUSSIAN),
        )

    def forward(self, volume: torch.Tensor, mask: torch.Tensor) -> GaussianSet:
        marked = torch.nonzero(grid_to_tokens(mask.unsqueeze(-1)).squeeze(-1)).squeeze(-1)
        if marked.numel() == 0:
            return GaussianSet.empty(volume.dtype)
        features = grid_to_tokens(volume)[marked]
        raw = self.mlp(features).reshape(-1, self.per_voxel, RAW_VALUES_PER_GAUSSIAN)
        centers = self.workspace.voxel_centers(volume.dtype)[marked]
        return _primitives_from_raw(
            raw,
            centers,
            marked,
            self.workspace.voxel_size,
            self.base_log_scale,
            self.offset_range_factor,
            Provenance.REFINED,
        )


def refine_gaussians(
    volume: torch.Tensor,
    mask: torch.Tensor,
    head: RefinementHead,
    initial_per_voxel: Optional[int] = None,
) -> GaussianSet:
    if initial_per_voxel is not None and head.per_voxel <= initial_per_voxel:
        raise ValueError(
            f"refined primitives per voxel ({head.per_voxel}) must exceed initial ({initial_per_voxel})"
        )
    return head(volume, mask)


def refinement_mask(tracks: torch.Tensor, workspace: WorkspaceSpec) -> torch.Tensor:
    """
    Boolean fine-grid occupancy: a voxel is marked iff a keypoint of ``tracks``
    (K, 3) falls in its half-open cell. Keypoints are treated as constants.
    """
    points = tracks.detach().reshape(-1, 3).to(torch.float64)
    extents = workspace.fine_extents
    mask = torch.zeros(extents, dtype=torch.bool)
    inside = workspace.contains(points)
    if not inside.any():
        return mask
    lower = workspace.lower_tensor(torch.float64)
    index = torch.floor((points[inside] - lower) / workspace.voxel_size).long()
    index = torch.minimum(index, torch.tensor(extents) - 1).clamp(min=0)
    mask[index[:, 0], index[:, 1], index[:, 2]] = True
    return mask


def expected_total_count(workspace: WorkspaceSpec, mask: torch.Tensor, per_voxel: int, refined_per_voxel: int) -> int:
    """|G_total| = N_voxels * N_G + |marked| * N_G'."""
    return workspace.num_fine_voxels * per_voxel + int(mask.sum().item()) * refined_per_voxel
