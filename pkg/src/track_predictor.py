"""
Track Predictor
---------------
Compresses each keypoint's motion history into one history track token and
decodes future track query embeddings into explicit multi-step 3D keypoint
trajectories supervised with a mean squared error.
"""

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from numerics import ShapeError, expect_shape, masked_softmax

logger = logging.getLogger("geopredict.tracks")


@dataclass
class KeypointHistory:
    """
    Left-padded history window: ``positions`` is (B, K, L_max, 3) in workspace
    meters and ``valid`` (B, K, L_max) marks a contiguous valid suffix.
    """

    positions: torch.Tensor
    valid: torch.Tensor

    def __post_init__(self):
        expect_shape("keypoint_history", self.positions, (None, None, None, 3))
        if self.valid.shape != self.positions.shape[:-1]:
            raise ShapeError("keypoint_history", self.positions.shape, self.valid.shape)

    def validate(self) -> None:
        counts = self.valid.sum(dim=-1)
        if (counts == 0).any():
            raise ValueError("every keypoint needs at least one valid history step")
        # a valid suffix means once a step is valid every later step is too
        if (self.valid[..., :-1] & ~self.valid[..., 1:]).any():
            raise ValueError("history validity mask must mark a contiguous suffix")
        if not torch.isfinite(self.positions[self.valid]).all():
            raise ValueError("history positions must be finite")

    @classmethod
    def from_window(cls, trajectory: torch.Tensor, max_length: int):
        """Build a single-sample history from a (L, K, 3) trajectory, keeping the last ``max_length`` steps."""
        length = min(trajectory.shape[0], max_length)
        num_keypoints = trajectory.shape[1]
        positions = trajectory.new_zeros(1, num_keypoints, max_length, 3)
        valid = torch.zeros(1, num_keypoints, max_length, dtype=torch.bool)
        positions[0, :, max_length - length :] = trajectory[-length:].transpose(0, 1)
        valid[0, :, max_length - length :] = True
        return cls(positions=positions, valid=valid)


class TrackEncoder(nn.Module):
    """
    Shared trajectory MLP followed by a single learnable history query that
    attends over each keypoint's embedded steps (keys = values = embeddings
    after their projections), producing one token per keypoint.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.embed = nn.Sequential(nn.Linear(3, dim), nn.Tanh(), nn.Linear(dim, dim))
        self.history_query = nn.Parameter(torch.randn(dim) * 0.02)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)

    def _weights(self, embedded: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        scores = (self.key(embedded) @ self.history_query) / math.sqrt(self.dim)
        return masked_softmax(scores, valid)

    def attention_weights(self, history: KeypointHistory) -> torch.Tensor:
        """(B, K, L_max) weights of the history query over each keypoint's steps."""
        return self._weights(self.embed(history.positions), history.valid)

    def forward(self, history: KeypointHistory) -> torch.Tensor:
        history.validate()
        embedded = self.embed(history.positions)
        weights = self._weights(embedded, history.valid)
        values = self.value(embedded)
        return (weights.unsqueeze(-1) * values).sum(dim=-2)


def encode_history(history: KeypointHistory, encoder: TrackEncoder) -> torch.Tensor:
    """(B, K, C) history track tokens."""
    return encoder(history)


class FutureTrackDecoder(nn.Module):
    """MLP shared across keypoints and timesteps: p(k, tau) = MLP(e_k + PE[tau])."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.Tanh(), nn.Linear(dim, 3))

    def forward(self, embeddings: torch.Tensor, temporal_encoding: torch.Tensor) -> torch.Tensor:
        if embeddings.shape[-1] != temporal_encoding.shape[-1]:
            raise ShapeError("decode_future_tracks", embeddings.shape, temporal_encoding.shape)
        pe = temporal_encoding.to(embeddings.dtype)
        # (B, 1, K, C) + (1, H+1, 1, C) -> (B, H+1, K, C)
        shifted = embeddings.unsqueeze(-3) + pe.unsqueeze(-2)
        return self.mlp(shifted)


def decode_future_tracks(
    embeddings: torch.Tensor, temporal_encoding: torch.Tensor, decoder: FutureTrackDecoder
) -> torch.Tensor:
    """(B, H+1, K, 3) predicted positions; index 0 is the current step."""
    return decoder(embeddings, temporal_encoding)


def track_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared L2 norm per keypoint-step, averaged over K(H+1) (and batch)."""
    if prediction.shape != target.shape:
        raise ShapeError("track_loss", prediction.shape, target.shape)
    expect_shape("track_loss", prediction, (None,) * (prediction.dim() - 1) + (3,))
    return ((prediction - target) ** 2).sum(dim=-1).mean()
