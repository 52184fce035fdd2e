"""
Run Configuration
-----------------
Flat ``key = value`` run configuration. Files are parsed with python-dotenv,
unknown keys are rejected, tuples are comma separated and booleans are
``true`` / ``false``. A file may start from a preset with ``preset = tiny``
(or ``toy`` / ``full_scale``); later keys override it.

Keys
~~~~
workspace_lower, workspace_upper   workspace box corners (m)
voxel_size                         fine voxel edge v (m)
horizon                            H, predicted steps after the current one
num_keypoints                      K
history_length                     L_max, history window (steps, current included)
dim, decoder_dim                   C and C'
num_layers, num_heads              trunk depth and attention heads
spatial_split                      C_x,C_y,C_z of the spatial encoding (optional). C need not be a
                                   multiple of 6: without this key the split is equal thirds when it
                                   is, otherwise (2*(C//6), 2*(C//6), rest), e.g. 10,10,12 for C = 32
gaussians_per_voxel                N_G
refined_per_voxel                  N_G'
loss_weights                       lambda_action,lambda_track,lambda_depth
lr, betas, weight_decay            AdamW settings
batch_size, iterations, seed       training loop
denoising_steps                    a, Euler steps of the action sampler
image_size, patch_size             square depth images and patch edge P
num_cameras, num_tasks             environment cameras and task-id table size
dtype                              float32 or float64
log_every                          training record period (iterations)
near_plane, cov2d_regularization, cull_sigma, alpha_clamp,
min_transmittance, tile_size, falloff      renderer constants
use_history_track, use_future_track, use_depth, use_refinement   ablation switches
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, fields
from typing import Dict, Optional, Tuple

import torch
from dotenv import dotenv_values

from geopredict_architecture import AblationSwitch, WorkspaceSpec
from depth_renderer import RenderSettings
from numerics import near_thirds_split

logger = logging.getLogger("geopredict.config")

DTYPES = {"float32": torch.float32, "float64": torch.float64}
ABLATION_FIELDS = {
    AblationSwitch.HISTORY_TRACK: "use_history_track",
    AblationSwitch.FUTURE_TRACK: "use_future_track",
    AblationSwitch.DEPTH: "use_depth",
    AblationSwitch.REFINEMENT: "use_refinement",
}

# component-ablation columns: baseline, +history track, +future track,
# depth from initial Gaussians only, track + depth without refinement, full
ABLATION_PRESETS: Dict[str, Dict[str, bool]] = {
    "baseline": dict(use_history_track=False, use_future_track=False, use_depth=False, use_refinement=False),
    "history-track": dict(use_history_track=True, use_future_track=False, use_depth=False, use_refinement=False),
    "future-track": dict(use_history_track=True, use_future_track=True, use_depth=False, use_refinement=False),
    "initial-depth": dict(use_history_track=False, use_future_track=False, use_depth=True, use_refinement=False),
    "no-refinement": dict(use_history_track=True, use_future_track=True, use_depth=True, use_refinement=False),
    "full": dict(use_history_track=True, use_future_track=True, use_depth=True, use_refinement=True),
}


@dataclass
class RunConfig:
    workspace_lower: Tuple[float, float, float] = (0.0, -0.32, 0.0)
    workspace_upper: Tuple[float, float, float] = (0.64, 0.32, 0.64)
    voxel_size: float = 0.08
    horizon: int = 8
    num_keypoints: int = 4
    history_length: int = 8
    dim: int = 64
    decoder_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    spatial_split: Optional[Tuple[int, int, int]] = None
    gaussians_per_voxel: int = 2
    refined_per_voxel: int = 8
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    batch_size: int = 2
    iterations: int = 2000
    seed: int = 0
    denoising_steps: int = 10
    image_size: int = 32
    patch_size: int = 8
    num_cameras: int = 2
    num_tasks: int = 4
    dtype: str = "float32"
    log_every: int = 50
    near_plane: float = 0.01
    cov2d_regularization: float = 0.3
    cull_sigma: float = 3.0
    alpha_clamp: float = 0.99
    min_transmittance: float = 1e-4
    tile_size: int = 16
    falloff: bool = True
    use_history_track: bool = True
    use_future_track: bool = True
    use_depth: bool = True
    use_refinement: bool = True

    def __post_init__(self):
        if self.use_refinement and not self.use_future_track:
            logger.warning("Future tracks disabled: refinement depends on predicted tracks and is disabled too")
            self.use_refinement = False
        self.validate()

    def validate(self) -> None:
        WorkspaceSpec(lower=tuple(self.workspace_lower), upper=tuple(self.workspace_upper), voxel_size=self.voxel_size)
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype}")
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.num_heads} heads")
        if self.dim % 2:
            raise ValueError(f"dim must be even for the sinusoidal encodings, got {self.dim}")
        split = self.resolved_spatial_split
        if sum(split) != self.dim or any(part <= 0 or part % 2 for part in split):
            raise ValueError(f"spatial split {split} must be positive even parts summing to {self.dim}")
        if self.horizon < 1 or self.history_length < 1 or self.num_keypoints < 1:
            raise ValueError("horizon, history_length and num_keypoints must be >= 1")
        if self.gaussians_per_voxel < 1:
            raise ValueError(f"gaussians_per_voxel must be >= 1, got {self.gaussians_per_voxel}")
        if self.use_refinement and self.refined_per_voxel <= self.gaussians_per_voxel:
            raise ValueError(
                f"refined_per_voxel ({self.refined_per_voxel}) must exceed gaussians_per_voxel "
                f"({self.gaussians_per_voxel})"
            )
        if any(w < 0 for w in self.loss_weights):
            raise ValueError(f"loss weights must be non-negative, got {self.loss_weights}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        if self.denoising_steps < 1 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("denoising_steps and batch_size must be >= 1, iterations >= 0")

    # --- Derived values ---

    @property
    def workspace(self) -> WorkspaceSpec:
        return WorkspaceSpec(lower=tuple(self.workspace_lower), upper=tuple(self.workspace_upper), voxel_size=self.voxel_size)

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    @property
    def resolved_spatial_split(self) -> Tuple[int, int, int]:
        if self.spatial_split is not None:
            return tuple(self.spatial_split)
        if self.dim % 6 == 0:
            return (self.dim // 3,) * 3
        return near_thirds_split(self.dim)

    @property
    def render_settings(self) -> RenderSettings:
        return RenderSettings(
            near_plane=self.near_plane,
            cov2d_regularization=self.cov2d_regularization,
            cull_sigma=self.cull_sigma,
            alpha_clamp=self.alpha_clamp,
            min_transmittance=self.min_transmittance,
            tile_size=self.tile_size,
            falloff=self.falloff,
        )

    def disabled_pathways(self) -> Tuple[str, ...]:
        return tuple(switch.value for switch, name in ABLATION_FIELDS.items() if not getattr(self, name))

    # --- Presets ---

    @classmethod
    def tiny(cls, **overrides):
        """Gradient-check scale, 64-bit, no early termination and wide cull boxes."""
        values = dict(
            horizon=4,
            history_length=4,
            dim=32,
            decoder_dim=16,
            num_layers=2,
            num_heads=2,
            spatial_split=(10, 10, 12),
            gaussians_per_voxel=1,
            refined_per_voxel=2,
            batch_size=1,
            iterations=20,
            image_size=16,
            dtype="float64",
            cull_sigma=8.0,
            min_transmittance=0.0,
            log_every=5,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def toy(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides):
        """Large-workspace hyperparameters at full model width (accepted, not exercised by tests)."""
        values = dict(
            workspace_lower=(0.0, -0.8, 0.0),
            workspace_upper=(1.6, 0.8, 1.12),
            voxel_size=0.04,
            horizon=50,
            num_keypoints=8,
            history_length=16,
            dim=2048,
            decoder_dim=256,
            num_layers=18,
            num_heads=8,
            gaussians_per_voxel=4,
            refined_per_voxel=64,
            lr=2.5e-5,
            batch_size=32,
            iterations=40000,
            image_size=224,
            patch_size=8,
        )
        values.update(overrides)
        return cls(**values)

    # --- Ablations ---

    def with_disabled(self, *switches: AblationSwitch) -> "RunConfig":
        changes = {ABLATION_FIELDS[switch]: False for switch in switches}
        return dataclasses.replace(self, **changes)

    def with_ablation_preset(self, name: str) -> "RunConfig":
        if name not in ABLATION_PRESETS:
            raise ValueError(f"unknown ablation preset {name!r} (known: {', '.join(ABLATION_PRESETS)})")
        return dataclasses.replace(self, **ABLATION_PRESETS[name])

    # --- Files ---

    @classmethod
    def from_dict(cls, values: Dict[str, Optional[str]]) -> "RunConfig":
        values = dict(values)
        preset = values.pop("preset", None) or "toy"
        factories = {"tiny": cls.tiny, "toy": cls.toy, "full_scale": cls.full_scale}
        if preset not in factories:
            raise ValueError(f"unknown preset {preset!r} (known: {', '.join(factories)})")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        base = dataclasses.asdict(factories[preset]())
        base.update({key: _parse_value(key, text, base[key]) for key, text in values.items()})
        return cls(**base)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        if not os.path.exists(path):
            raise ValueError(f"config file {path} does not exist")
        config = cls.from_dict(dotenv_values(path))
        logger.info(f"Loaded run config from {path}")
        return config

    def to_dict(self) -> Dict[str, str]:
        return {f.name: _format_value(getattr(self, f.name)) for f in fields(self)}

    def to_file(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for key, value in self.to_dict().items():
                handle.write(f"{key} = {value}\n")


def _parse_value(key: str, text: Optional[str], default):
    text = (text or "").strip()
    if key == "spatial_split" and text in ("", "none"):
        return None
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            return text.lower() == "true"
        if isinstance(default, tuple) or key == "spatial_split":
            cast = int if key == "spatial_split" else float
            return tuple(cast(part) for part in text.split(","))
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as e:
        raise ValueError(f"config key {key}: {e}") from e


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)
