"""
GeoPredict Model
----------------
Assembles the track, geometry, renderer and policy modules into one model.

Training runs a single block-causal trunk pass over the full sequence. The
action-noise outputs give the flow-matching velocity; the future track query
outputs are decoded into tracks; the spatial query outputs are shifted to every
future step, voxel-decoded, turned into Gaussians (refined around predicted
keypoints) and rendered for every camera.

Inference (``sample_actions``) embeds the context once, caches its keys and
values, and runs only the action pathway; no predictive decoder is executed.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from depth_renderer import depth_loss, render_depth, workspace_mask
from geometry_predictor import (
    GaussianHead,
    GaussianSet,
    RefinementHead,
    SpatialQueryGrid,
    VoxelDecoder,
    refine_gaussians,
    refinement_mask,
    shift_all_steps,
    tokens_to_grid,
    union_gaussians,
)
from geopredict_architecture import CameraModel, EpisodeRecord, LossBreakdown, TokenBlock
from numerics import build_temporal_encoding
from policy_core import (
    ActionExpert,
    BlockMaskedSequence,
    ContextEmbedder,
    Trunk,
    VelocityField,
    cfm_loss,
    flow_sample,
    sample_actions,
    total_loss,
)
from run_config import RunConfig
from track_predictor import FutureTrackDecoder, KeypointHistory, TrackEncoder, track_loss

logger = logging.getLogger("geopredict.model")

GAUSSIAN_SOURCES = ("initial", "total")


@dataclass
class WindowBatch:
    """Training windows: history up to and including step t, ground truth for t..t+H."""

    task_ids: torch.Tensor  # (B,)
    images: torch.Tensor  # (B, N_cam, h, w) current depth maps
    history: KeypointHistory
    state: torch.Tensor  # (B, J+1)
    actions: torch.Tensor  # (B, H, 7)
    future_tracks: torch.Tensor  # (B, H+1, K, 3)
    future_depths: torch.Tensor  # (B, H+1, N_cam, h, w)
    depth_masks: torch.Tensor  # (B, H+1, N_cam, h, w) bool
    cameras: List[CameraModel]

    @property
    def batch_size(self) -> int:
        return self.task_ids.shape[0]

    def to(self, dtype: torch.dtype) -> "WindowBatch":
        return WindowBatch(
            task_ids=self.task_ids,
            images=self.images.to(dtype),
            history=KeypointHistory(self.history.positions.to(dtype), self.history.valid),
            state=self.state.to(dtype),
            actions=self.actions.to(dtype),
            future_tracks=self.future_tracks.to(dtype),
            future_depths=self.future_depths.to(dtype),
            depth_masks=self.depth_masks,
            cameras=self.cameras,
        )


def valid_window_starts(episode: EpisodeRecord, horizon: int) -> range:
    """Window starts t with the full (H+1)-step future available."""
    return range(max(episode.num_steps - horizon, 0))


def make_window(episode: EpisodeRecord, start: int, config: RunConfig) -> WindowBatch:
    horizon = config.horizon
    if start not in valid_window_starts(episode, horizon):
        raise ValueError(f"window start {start} invalid for a {episode.num_steps}-step episode with H={horizon}")
    if episode.num_keypoints != config.num_keypoints:
        raise ValueError(f"episode has {episode.num_keypoints} keypoints, config expects {config.num_keypoints}")
    if len(episode.cameras) != config.num_cameras or episode.cameras[0].width != config.image_size:
        raise ValueError("episode cameras do not match the configured camera count / image size")
    workspace = config.workspace
    future_depths = episode.depths[start : start + horizon + 1]
    masks = torch.stack(
        [
            torch.stack([workspace_mask(step[c], camera, workspace) for c, camera in enumerate(episode.cameras)])
            for step in future_depths
        ]
    )
    past = episode.keypoints[max(0, start - config.history_length + 1) : start + 1]
    return WindowBatch(
        task_ids=torch.tensor([episode.task_id], dtype=torch.long),
        images=episode.depths[start].unsqueeze(0),
        history=KeypointHistory.from_window(past, config.history_length),
        state=episode.proprio[start].unsqueeze(0),
        actions=episode.actions[start : start + horizon].unsqueeze(0),
        future_tracks=episode.keypoints[start : start + horizon + 1].unsqueeze(0),
        future_depths=future_depths.unsqueeze(0),
        depth_masks=masks.unsqueeze(0),
        cameras=list(episode.cameras),
    )


def collate_windows(windows: Sequence[WindowBatch]) -> WindowBatch:
    cameras = windows[0].cameras
    if any(list(w.cameras) != list(cameras) for w in windows[1:]):
        raise ValueError("cannot batch windows rendered through different cameras")
    cat = lambda name: torch.cat([getattr(w, name) for w in windows])
    return WindowBatch(
        task_ids=cat("task_ids"),
        images=cat("images"),
        history=KeypointHistory(
            torch.cat([w.history.positions for w in windows]), torch.cat([w.history.valid for w in windows])
        ),
        state=cat("state"),
        actions=cat("actions"),
        future_tracks=cat("future_tracks"),
        future_depths=cat("future_depths"),
        depth_masks=cat("depth_masks"),
        cameras=cameras,
    )


@dataclass
class GeometryOutput:
    depths: torch.Tensor  # (B, H+1, N_cam, h, w)
    gaussians_initial: int
    gaussians_total: int
    refined_voxels: int


@dataclass
class Prediction:
    """Predictive-decoder outputs for evaluation; None where the pathway is disabled."""

    tracks: Optional[torch.Tensor]
    depths: Optional[torch.Tensor]
    refined_voxels: float = 0.0
    gaussians_initial: int = 0
    gaussians_total: int = 0


@dataclass
class ForwardResult:
    action: torch.Tensor
    track: torch.Tensor
    depth: torch.Tensor
    total: torch.Tensor
    velocity: torch.Tensor
    tracks: Optional[torch.Tensor]
    depths: Optional[torch.Tensor]
    depth_mask_empty: bool = False
    gaussians_initial: int = 0
    gaussians_total: int = 0

    def named_tensors(self) -> List[Tuple[str, Optional[torch.Tensor]]]:
        """Forward order, predictions before the loss terms they feed."""
        return [
            ("predicted_tracks", self.tracks),
            ("rendered_depths", self.depths),
            ("predicted_velocity", self.velocity),
            ("loss_action", self.action),
            ("loss_track", self.track),
            ("loss_depth", self.depth),
            ("loss_total", self.total),
        ]

    def breakdown(self, weights: Tuple[float, float, float]) -> LossBreakdown:
        return LossBreakdown(
            action=self.action.item(),
            track=self.track.item(),
            depth=self.depth.item(),
            total=self.total.item(),
            weights=tuple(weights),
            gaussians_initial=self.gaussians_initial,
            gaussians_total=self.gaussians_total,
            depth_mask_empty=self.depth_mask_empty,
        )


class GeoPredictModel(nn.Module):
    def __init__(self, config: RunConfig, state_dim: int = 4):
        super().__init__()
        self.config = config
        workspace = config.workspace
        self.workspace = workspace
        self.render_settings = config.render_settings
        dim = config.dim

        self.register_buffer("temporal_encoding", build_temporal_encoding(config.horizon, dim))
        self.track_encoder = TrackEncoder(dim)
        self.track_decoder = FutureTrackDecoder(dim)
        self.spatial_queries = SpatialQueryGrid(workspace.coarse_extents, dim, config.resolved_spatial_split)
        self.voxel_decoder = VoxelDecoder(workspace, dim, config.decoder_dim)
        self.gaussian_head = GaussianHead(
            workspace, config.decoder_dim, config.gaussians_per_voxel, math.log(workspace.voxel_size / 2)
        )
        self.refine_head = RefinementHead(
            workspace, config.decoder_dim, config.refined_per_voxel, math.log(workspace.voxel_size / 4)
        )
        self.embedder = ContextEmbedder(
            config.num_tasks, dim, config.image_size, config.patch_size, state_dim, config.num_keypoints
        )
        self.trunk = Trunk(dim, config.num_heads, config.num_layers)
        self.action_expert = ActionExpert(dim, config.horizon)

        # predicted tracks start inside the voxel holding the workspace center so refinement is active from step 0
        center = workspace.lower_tensor() + workspace.voxel_size * (
            torch.tensor(workspace.fine_extents, dtype=torch.float64) // 2 + 0.5
        )
        with torch.no_grad():
            self.track_decoder.mlp[-1].bias.copy_(center.to(self.track_decoder.mlp[-1].bias.dtype))

        self.to(config.torch_dtype)
        logger.info(
            f"Built model: {sum(p.numel() for p in self.parameters())} parameters, "
            f"disabled pathways: {', '.join(config.disabled_pathways()) or 'none'}"
        )

    # --- Context ---

    def encode_context(self, batch: WindowBatch) -> BlockMaskedSequence:
        config = self.config
        history_tokens = self.track_encoder(batch.history) if config.use_history_track else None
        spatial_tokens = self.spatial_queries() if config.use_depth else None
        return self.embedder(
            batch.task_ids,
            batch.images,
            batch.state,
            history_tokens=history_tokens,
            spatial_tokens=spatial_tokens,
            use_future_queries=config.use_future_track,
        )

    # --- Predictive decoders ---

    def decode_tracks(self, outputs: torch.Tensor, sequence: BlockMaskedSequence) -> torch.Tensor:
        return self.track_decoder(outputs[:, sequence.future_query_slice], self.temporal_encoding)

    def decode_volumes(self, outputs: torch.Tensor, sequence: BlockMaskedSequence) -> torch.Tensor:
        """(B, H+1, X, Y, Z, C') fine feature volumes, one per future step."""
        shifted = shift_all_steps(outputs[:, sequence.spatial_query_slice], self.temporal_encoding)
        return self.voxel_decoder(tokens_to_grid(shifted, self.workspace.coarse_extents))

    def gaussians_for_step(
        self, volume: torch.Tensor, tracks: Optional[torch.Tensor], source: str = "total"
    ) -> Tuple[GaussianSet, int, int]:
        """Gaussian set for one (sample, step), its initial count and the marked-voxel count."""
        if source not in GAUSSIAN_SOURCES:
            raise ValueError(f"gaussian source must be one of {GAUSSIAN_SOURCES}, got {source!r}")
        initial = self.gaussian_head(volume)
        if source == "initial" or not self.config.use_refinement or tracks is None:
            return initial, len(initial), 0
        mask = refinement_mask(tracks, self.workspace)
        refined = refine_gaussians(volume, mask, self.refine_head, self.config.gaussians_per_voxel)
        return union_gaussians(initial, refined), len(initial), int(mask.sum().item())

    def render_geometry(
        self,
        volumes: torch.Tensor,
        tracks: Optional[torch.Tensor],
        cameras: Sequence[CameraModel],
        source: str = "total",
    ) -> GeometryOutput:
        batch, steps = volumes.shape[:2]
        depths, initial_count, total_count, marked = [], 0, 0, 0
        for b in range(batch):
            per_step = []
            for tau in range(steps):
                step_tracks = None if tracks is None else tracks[b, tau]
                gaussians, n_initial, n_marked = self.gaussians_for_step(volumes[b, tau], step_tracks, source)
                initial_count += n_initial
                total_count += len(gaussians)
                marked += n_marked
                per_step.append(torch.stack([render_depth(gaussians, cam, self.render_settings) for cam in cameras]))
            depths.append(torch.stack(per_step))
        return GeometryOutput(torch.stack(depths), initial_count, total_count, marked)

    # --- Training ---

    def forward_losses(self, batch: WindowBatch, noise: torch.Tensor, flow_time: torch.Tensor) -> ForwardResult:
        config = self.config
        context = self.encode_context(batch)
        sample = flow_sample(batch.actions, noise, flow_time)
        sequence = context.with_actions(self.action_expert.embed(sample.noisy, sample.time))
        outputs = self.trunk(sequence)

        velocity = self.action_expert.readout(outputs[:, sequence.block_slice(TokenBlock.ACTION_NOISE)])
        loss_action = cfm_loss(velocity, sample)
        zero = loss_action.new_zeros(())

        tracks, loss_track = None, zero
        if config.use_future_track:
            tracks = self.decode_tracks(outputs, sequence)
            loss_track = track_loss(tracks, batch.future_tracks)

        depths, loss_depth, empty, n_initial, n_total = None, zero, False, 0, 0
        if config.use_depth:
            geometry = self.render_geometry(self.decode_volumes(outputs, sequence), tracks, batch.cameras)
            depths = geometry.depths
            loss_depth, empty = depth_loss(depths, batch.future_depths, batch.depth_masks)
            n_initial, n_total = geometry.gaussians_initial, geometry.gaussians_total

        loss_total = total_loss(loss_action, loss_track, loss_depth, config.loss_weights)
        return ForwardResult(
            action=loss_action,
            track=loss_track,
            depth=loss_depth,
            total=loss_total,
            velocity=velocity,
            tracks=tracks,
            depths=depths,
            depth_mask_empty=empty,
            gaussians_initial=n_initial,
            gaussians_total=n_total,
        )

    # --- Evaluation and inference ---

    @torch.no_grad()
    def predict(self, batch: WindowBatch, source: str = "total") -> Prediction:
        """Track and depth predictions from a context-only trunk pass."""
        context = self.encode_context(batch)
        outputs = self.trunk(context)
        tracks = self.decode_tracks(outputs, context) if self.config.use_future_track else None
        if not self.config.use_depth:
            return Prediction(tracks=tracks, depths=None)
        geometry = self.render_geometry(self.decode_volumes(outputs, context), tracks, batch.cameras, source)
        windows = batch.batch_size * (self.config.horizon + 1)
        return Prediction(
            tracks=tracks,
            depths=geometry.depths,
            refined_voxels=geometry.refined_voxels / windows,
            gaussians_initial=geometry.gaussians_initial,
            gaussians_total=geometry.gaussians_total,
        )

    @torch.no_grad()
    def predict_gaussians(self, batch: WindowBatch, step: int, source: str = "total") -> List[GaussianSet]:
        """Gaussian sets at future step ``step`` for every sample in the batch."""
        if not self.config.use_depth:
            raise ValueError("depth pathway is disabled; no Gaussians are predicted")
        if not 0 <= step <= self.config.horizon:
            raise ValueError(f"step {step} outside [0, {self.config.horizon}]")
        context = self.encode_context(batch)
        outputs = self.trunk(context)
        tracks = self.decode_tracks(outputs, context) if self.config.use_future_track else None
        volumes = self.decode_volumes(outputs, context)
        return [
            self.gaussians_for_step(volumes[b, step], None if tracks is None else tracks[b, step], source)[0]
            for b in range(batch.batch_size)
        ]

    @torch.no_grad()
    def sample_actions(
        self,
        batch: WindowBatch,
        steps: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
        noise: Optional[torch.Tensor] = None,
        velocity_fn: Optional[VelocityField] = None,
    ) -> torch.Tensor:
        """(B, H, 7) action chunk; the cache is built once and shared by every denoising step."""
        cache = self.trunk.build_kv_cache(self.encode_context(batch))
        return sample_actions(
            cache,
            self.trunk,
            self.action_expert,
            steps or self.config.denoising_steps,
            generator=generator,
            noise=noise,
            velocity_fn=velocity_fn,
        )
