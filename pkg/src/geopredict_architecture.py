"""
GeoPredict Architecture
-----------------------
This module defines the core records shared across the GeoPredict system:
workspace and camera geometry, episode records, token-block identifiers,
ablation switches, and the loss / metric reports emitted by training.
"""

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import torch


# --- Enums ---
class Provenance(IntEnum):
    """Where a Gaussian primitive came from."""

    INITIAL = 0
    REFINED = 1


class TokenBlock(IntEnum):
    """Ordered token groups of the block-causal sequence."""

    VISION_LANGUAGE = 0
    HISTORY_TRACK = 1
    QUERY = 2
    STATE = 3
    ACTION_NOISE = 4


class AblationSwitch(Enum):
    """Pathways that can be disabled from the CLI."""

    HISTORY_TRACK = "history-track"
    FUTURE_TRACK = "future-track"
    DEPTH = "depth"
    REFINEMENT = "refinement"


# --- Basic Type Aliases ---
Vec3 = Tuple[float, float, float]
ActionChunk = torch.Tensor  # (H, 7): dx (3), axis-angle dtheta (3), gripper
StateVector = torch.Tensor  # joint angles + gripper
DepthMap = torch.Tensor  # (height, width), meters, 0 = no hit

ACTION_DIM = 7
BACKGROUND_DEPTH = 0.0


# --- Data Classes ---
@dataclass(frozen=True)
class WorkspaceSpec:
    """
    Axis-aligned workspace box discretised into cubic voxels.
    The fine grid must be divisible by 4 so the coarse query grid is integral.
    """

    lower: Vec3
    upper: Vec3
    voxel_size: float

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError(f"voxel size must be positive, got {self.voxel_size}")
        for axis, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            if hi <= lo:
                raise ValueError(f"workspace axis {axis} is empty: [{lo}, {hi})")
            cells = (hi - lo) / self.voxel_size
            if abs(cells - round(cells)) > 1e-6:
                raise ValueError(
                    f"workspace axis {axis} length {hi - lo} is not a multiple of voxel size {self.voxel_size}"
                )
            if round(cells) % 4:
                raise ValueError(
                    f"fine extent {round(cells)} on axis {axis} is not divisible by 4"
                )

    @property
    def fine_extents(self) -> Tuple[int, int, int]:
        return tuple(
            int(round((hi - lo) / self.voxel_size)) for lo, hi in zip(self.lower, self.upper)
        )

    @property
    def coarse_extents(self) -> Tuple[int, int, int]:
        return tuple(extent // 4 for extent in self.fine_extents)

    @property
    def num_fine_voxels(self) -> int:
        return math.prod(self.fine_extents)

    def lower_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor(self.lower, dtype=dtype)

    def upper_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor(self.upper, dtype=dtype)

    def contains(self, points: torch.Tensor) -> torch.Tensor:
        """Half-open containment [lower, upper) per axis for (..., 3) points."""
        lo = self.lower_tensor(points.dtype)
        hi = self.upper_tensor(points.dtype)
        return ((points >= lo) & (points < hi)).all(dim=-1)

    def voxel_centers(self, dtype=torch.float64) -> torch.Tensor:
        """(N_voxels, 3) centers in raster order: x fastest, then y, then z."""
        nx, ny, nz = self.fine_extents
        zz, yy, xx = torch.meshgrid(
            torch.arange(nz, dtype=dtype),
            torch.arange(ny, dtype=dtype),
            torch.arange(nx, dtype=dtype),
            indexing="ij",
        )
        index = torch.stack([xx, yy, zz], dim=-1).reshape(-1, 3)
        return self.lower_tensor(dtype) + (index + 0.5) * self.voxel_size

    def to_dict(self) -> Dict:
        return {
            "lower": list(self.lower),
            "upper": list(self.upper),
            "voxel_size": self.voxel_size,
        }

    @classmethod
    def from_dict(cls, data: Dict):
        return cls(
            lower=tuple(float(v) for v in data["lower"]),
            upper=tuple(float(v) for v in data["upper"]),
            voxel_size=float(data["voxel_size"]),
        )


@dataclass(frozen=True)
class CameraModel:
    """
    Pinhole camera. Extrinsics map world points into an x-right, y-down,
    z-forward camera frame; pixel (row, col) has its center at (col + 0.5, row + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: Tuple[Tuple[float, float, float], ...]
    translation: Vec3

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image extents must be positive, got {self.width}x{self.height}")
        rot = torch.tensor(self.rotation, dtype=torch.float64)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {tuple(rot.shape)}")
        error = (rot @ rot.T - torch.eye(3, dtype=torch.float64)).abs().max().item()
        if error > 1e-9:
            raise ValueError(f"rotation is not orthonormal (max deviation {error:.3e})")

    def rotation_matrix(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor(self.rotation, dtype=dtype)

    def translation_vector(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor(self.translation, dtype=dtype)

    def world_to_camera(self, points: torch.Tensor) -> torch.Tensor:
        return points @ self.rotation_matrix(points.dtype).T + self.translation_vector(points.dtype)

    def camera_to_world(self, points: torch.Tensor) -> torch.Tensor:
        return (points - self.translation_vector(points.dtype)) @ self.rotation_matrix(points.dtype)

    def pixel_centers(self, dtype=torch.float64) -> Tuple[torch.Tensor, torch.Tensor]:
        """(height, width) grids of pixel-center u and v coordinates."""
        rows = torch.arange(self.height, dtype=dtype) + 0.5
        cols = torch.arange(self.width, dtype=dtype) + 0.5
        v, u = torch.meshgrid(rows, cols, indexing="ij")
        return u, v

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float],
        width: int,
        height: int,
        fov_degrees: float = 60.0,
        up: Sequence[float] = (0.0, 0.0, 1.0),
    ):
        """Camera at ``eye`` looking at ``target`` with a horizontal field of view."""
        eye_t = torch.tensor(eye, dtype=torch.float64)
        forward = torch.tensor(target, dtype=torch.float64) - eye_t
        forward = forward / forward.norm()
        right = torch.linalg.cross(forward, torch.tensor(up, dtype=torch.float64))
        right = right / right.norm()
        down = torch.linalg.cross(forward, right)
        rot = torch.stack([right, down, forward])
        trans = -(rot @ eye_t)
        focal = 0.5 * width / math.tan(math.radians(fov_degrees) / 2.0)
        return cls(
            fx=focal,
            fy=focal,
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
            rotation=tuple(tuple(float(v) for v in row) for row in rot.tolist()),
            translation=tuple(float(v) for v in trans.tolist()),
        )

    def to_dict(self) -> Dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": [list(row) for row in self.rotation],
            "translation": list(self.translation),
        }

    @classmethod
    def from_dict(cls, data: Dict):
        return cls(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
            rotation=tuple(tuple(float(v) for v in row) for row in data["rotation"]),
            translation=tuple(float(v) for v in data["translation"]),
        )

    def to_manifest_value(self) -> str:
        """Comma-separated fx,fy,cx,cy,width,height,R (row-major),t."""
        values = [self.fx, self.fy, self.cx, self.cy, self.width, self.height]
        values += [v for row in self.rotation for v in row]
        values += list(self.translation)
        return ",".join(repr(float(v)) for v in values)

    @classmethod
    def from_manifest_value(cls, text: str):
        values = [float(v) for v in text.split(",")]
        if len(values) != 18:
            raise ValueError(f"camera manifest entry needs 18 values, got {len(values)}")
        return cls(
            fx=values[0],
            fy=values[1],
            cx=values[2],
            cy=values[3],
            width=int(values[4]),
            height=int(values[5]),
            rotation=(tuple(values[6:9]), tuple(values[9:12]), tuple(values[12:15])),
            translation=tuple(values[15:18]),
        )


@dataclass
class EpisodeRecord:
    """One synthetic demonstration, all arrays indexed by step first."""

    task_id: int
    joint_angles: torch.Tensor  # (T, J)
    keypoints: torch.Tensor  # (T, K, 3)
    depths: torch.Tensor  # (T, N_cam, height, width)
    proprio: torch.Tensor  # (T, J + 1)
    actions: torch.Tensor  # (T, 7)
    object_centers: torch.Tensor  # (T, 3)
    cameras: List[CameraModel]
    horizon: int

    @property
    def num_steps(self) -> int:
        return self.joint_angles.shape[0]

    @property
    def num_keypoints(self) -> int:
        return self.keypoints.shape[1]


@dataclass
class LossBreakdown:
    """Per-step losses; ``total`` is the weighted sum actually optimised."""

    action: float
    track: float
    depth: float
    total: float
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    gaussians_initial: int = 0
    gaussians_total: int = 0
    depth_mask_empty: bool = False

    def to_dict(self) -> Dict:
        return {
            "loss_action": self.action,
            "loss_track": self.track,
            "loss_depth": self.depth,
            "loss_total": self.total,
            "gaussians_initial": self.gaussians_initial,
            "gaussians_total": self.gaussians_total,
        }

    def to_record(self) -> str:
        return format_record(self.to_dict())


@dataclass
class EvaluationMetrics:
    """Held-out metrics; units: m^2 for tracks, m for depth."""

    track_mse: float
    depth_l1: float
    action_mse: float
    refined_voxels: float
    windows: int
    track_mse_per_step: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "track_mse": self.track_mse,
            "depth_l1": self.depth_l1,
            "action_mse": self.action_mse,
            "refined_voxels": self.refined_voxels,
            "windows": self.windows,
            **{f"track_mse_step{step}": value for step, value in enumerate(self.track_mse_per_step)},
        }

    def to_record(self) -> str:
        return format_record(self.to_dict())


def format_record(values: Dict, prefix: Optional[str] = None) -> str:
    """Line-oriented ``key=value`` record; floats use repr for bit-exact logs."""
    parts = [] if prefix is None else [prefix]
    for key, value in values.items():
        parts.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return " ".join(parts)
