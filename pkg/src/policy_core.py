"""
Policy Core
-----------
The five-block token sequence and its block-causal mask, toy perception
embedders, the shared transformer trunk with a KV-cached action pathway, the
flow-matching action expert, the joint objective and checkpoint IO.

Block order: vision-language, history tracks, queries (future track queries
then spatial queries), state, action noise. A token may attend to every token
of its own block and of earlier blocks.
"""

import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from dotenv import dotenv_values

from geopredict_architecture import ACTION_DIM, TokenBlock
from numerics import (
    DTYPE_TAGS,
    ShapeError,
    additive_mask,
    build_temporal_encoding,
    masked_softmax,
    read_tensor,
    sinusoidal_embedding,
    write_tensor,
)

logger = logging.getLogger("geopredict.policy")

NUM_BLOCKS = len(TokenBlock)
MANIFEST_FILE = "manifest.txt"
TENSORS_FILE = "tensors.bin"
DTYPE_NAMES = {dtype: str(dtype).replace("torch.", "") for dtype in DTYPE_TAGS}


# --- Block mask ---


def _check_sizes(sizes: Sequence[int]) -> Tuple[int, ...]:
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != NUM_BLOCKS:
        raise ValueError(f"expected {NUM_BLOCKS} block sizes, got {len(sizes)}")
    if any(s < 0 for s in sizes):
        raise ValueError(f"block sizes must be non-negative, got {sizes}")
    if sum(sizes) == 0:
        raise ValueError("block-causal sequence must contain at least one token")
    return sizes


def block_ids(sizes: Sequence[int]) -> torch.Tensor:
    """Block index of every token position."""
    sizes = _check_sizes(sizes)
    return torch.repeat_interleave(torch.arange(NUM_BLOCKS), torch.tensor(sizes))


def build_block_mask(sizes: Sequence[int]) -> torch.Tensor:
    """Boolean (N, N) matrix; entry (q, k) is True iff block(k) <= block(q)."""
    ids = block_ids(sizes)
    return ids[None, :] <= ids[:, None]


@dataclass
class BlockMaskedSequence:
    tokens: torch.Tensor  # (B, N, C)
    sizes: Tuple[int, int, int, int, int]
    num_future_queries: int = 0
    num_spatial_queries: int = 0

    def __post_init__(self):
        self.sizes = _check_sizes(self.sizes)
        if sum(self.sizes) != self.tokens.shape[-2]:
            raise ShapeError("block_masked_sequence", self.tokens.shape, self.sizes, "sizes must partition tokens")
        if self.num_future_queries + self.num_spatial_queries != self.sizes[TokenBlock.QUERY]:
            raise ValueError("query block must hold exactly the future and spatial query tokens")

    @property
    def boundaries(self) -> Tuple[int, ...]:
        offsets = [0]
        for size in self.sizes:
            offsets.append(offsets[-1] + size)
        return tuple(offsets)

    def block_slice(self, block: TokenBlock) -> slice:
        start = self.boundaries[block]
        return slice(start, start + self.sizes[block])

    @property
    def future_query_slice(self) -> slice:
        start = self.boundaries[TokenBlock.QUERY]
        return slice(start, start + self.num_future_queries)

    @property
    def spatial_query_slice(self) -> slice:
        start = self.boundaries[TokenBlock.QUERY] + self.num_future_queries
        return slice(start, start + self.num_spatial_queries)

    @property
    def context_length(self) -> int:
        return sum(self.sizes) - self.sizes[TokenBlock.ACTION_NOISE]

    def mask(self) -> torch.Tensor:
        return build_block_mask(self.sizes)

    def with_actions(self, action_tokens: torch.Tensor) -> "BlockMaskedSequence":
        """Append the action-noise block to a context-only sequence."""
        if self.sizes[TokenBlock.ACTION_NOISE]:
            raise ValueError("sequence already holds action tokens")
        sizes = self.sizes[:-1] + (action_tokens.shape[-2],)
        return BlockMaskedSequence(
            tokens=torch.cat([self.tokens, action_tokens], dim=-2),
            sizes=sizes,
            num_future_queries=self.num_future_queries,
            num_spatial_queries=self.num_spatial_queries,
        )


# --- Context embedding ---


class ContextEmbedder(nn.Module):
    """
    Task-id instruction table, linear P x P patch embedder over depth images,
    state projection, per-keypoint history tags, learned future track queries
    and one additive type embedding per block.
    """

    def __init__(
        self,
        num_tasks: int,
        dim: int,
        image_size: int,
        patch_size: int,
        state_dim: int,
        num_keypoints: int,
        depth_image_scale: float = 2.0,
    ):
        super().__init__()
        if image_size % patch_size:
            raise ValueError(f"image size {image_size} is not divisible by patch size {patch_size}")
        self.num_tasks = num_tasks
        self.dim = dim
        self.image_size = image_size
        self.patch_size = patch_size
        self.num_keypoints = num_keypoints
        self.depth_image_scale = depth_image_scale
        self.instruction = nn.Embedding(num_tasks, dim)
        self.patch = nn.Linear(patch_size * patch_size, dim)
        self.state = nn.Linear(state_dim, dim)
        self.block_type = nn.Embedding(NUM_BLOCKS, dim)
        self.keypoint_tag = nn.Parameter(torch.randn(num_keypoints, dim) * 0.02)
        self.future_queries = nn.Parameter(torch.randn(num_keypoints, dim) * 0.02)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, N_cam, h, w) -> (B, N_cam * h/P * w/P, P*P), views in order then row-major patches."""
        batch, cams, height, width = images.shape
        p = self.patch_size
        if height % p or width % p:
            raise ValueError(f"image extents {height}x{width} are not divisible by patch size {p}")
        patches = images.reshape(batch, cams, height // p, p, width // p, p)
        return patches.permute(0, 1, 2, 4, 3, 5).reshape(batch, -1, p * p)

    def _typed(self, tokens: torch.Tensor, block: TokenBlock) -> torch.Tensor:
        return tokens + self.block_type.weight[int(block)]

    def forward(
        self,
        task_ids: torch.Tensor,
        images: torch.Tensor,
        state: torch.Tensor,
        history_tokens: Optional[torch.Tensor] = None,
        spatial_tokens: Optional[torch.Tensor] = None,
        use_future_queries: bool = True,
    ) -> BlockMaskedSequence:
        if ((task_ids < 0) | (task_ids >= self.num_tasks)).any():
            raise ValueError(f"unknown task id in {task_ids.tolist()} (known: 0..{self.num_tasks - 1})")
        batch = task_ids.shape[0]
        instruction = self.instruction(task_ids).unsqueeze(1)
        patches = self.patch(self.patchify(images / self.depth_image_scale))
        blocks = [self._typed(torch.cat([instruction, patches], dim=1), TokenBlock.VISION_LANGUAGE)]

        if history_tokens is not None:
            if history_tokens.shape[1:] != (self.num_keypoints, self.dim):
                raise ShapeError("embed_context", history_tokens.shape, (batch, self.num_keypoints, self.dim))
            blocks.append(self._typed(history_tokens + self.keypoint_tag, TokenBlock.HISTORY_TRACK))
        else:
            blocks.append(instruction[:, :0])

        queries = []
        if use_future_queries:
            queries.append(self.future_queries.expand(batch, -1, -1))
        if spatial_tokens is not None:
            queries.append(spatial_tokens.expand(batch, -1, -1))
        query_block = torch.cat(queries, dim=1) if queries else instruction[:, :0]
        blocks.append(self._typed(query_block, TokenBlock.QUERY))
        blocks.append(self._typed(self.state(state).unsqueeze(1), TokenBlock.STATE))

        sizes = tuple(block.shape[1] for block in blocks) + (0,)
        return BlockMaskedSequence(
            tokens=torch.cat(blocks, dim=1),
            sizes=sizes,
            num_future_queries=self.num_keypoints if use_future_queries else 0,
            num_spatial_queries=0 if spatial_tokens is None else spatial_tokens.shape[-2],
        )


def embed_context(embedder: ContextEmbedder, *args, **kwargs) -> BlockMaskedSequence:
    return embedder(*args, **kwargs)


# --- Trunk ---


@dataclass(frozen=True)
class KVCache:
    """Per-layer keys/values of the context blocks; never mutated after construction."""

    keys: Tuple[torch.Tensor, ...]  # each (B, heads, N_ctx, head_dim)
    values: Tuple[torch.Tensor, ...]
    context_length: int

    def __len__(self) -> int:
        return self.context_length

    @property
    def batch_size(self) -> int:
        return self.keys[0].shape[0]


class TrunkLayer(nn.Module):
    """Pre-norm attention + GELU MLP; action-noise tokens use their own layer norms."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.norm_attn = nn.LayerNorm(dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.action_norm_attn = nn.LayerNorm(dim)
        self.action_norm_mlp = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    @staticmethod
    def _norm(x: torch.Tensor, norm: nn.LayerNorm, action_norm: nn.LayerNorm, num_context: int) -> torch.Tensor:
        if num_context == x.shape[1]:
            return norm(x)
        if num_context == 0:
            return action_norm(x)
        return torch.cat([norm(x[:, :num_context]), action_norm(x[:, num_context:])], dim=1)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.num_heads, self.head_dim).transpose(1, 2)

    def _attend(self, q, k, v, mask: Optional[torch.Tensor]) -> torch.Tensor:
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        weights = masked_softmax(scores, mask)
        out = weights @ v
        batch, _, length, _ = out.shape
        return self.proj(out.transpose(1, 2).reshape(batch, length, self.dim))

    def forward(
        self, x: torch.Tensor, mask: Optional[torch.Tensor], num_context: int
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns the layer output plus this layer's keys and values."""
        h = self._norm(x, self.norm_attn, self.action_norm_attn, num_context)
        q, k, v = (self._heads(part) for part in self.qkv(h).chunk(3, dim=-1))
        x = x + self._attend(q, k, v, mask)
        x = x + self.mlp(self._norm(x, self.norm_mlp, self.action_norm_mlp, num_context))
        return x, k, v

    def forward_actions(self, x: torch.Tensor, cached_k: torch.Tensor, cached_v: torch.Tensor) -> torch.Tensor:
        """Action tokens attend to the cached context plus their own block; no mask needed."""
        h = self.action_norm_attn(x)
        q, k, v = (self._heads(part) for part in self.qkv(h).chunk(3, dim=-1))
        keys = torch.cat([cached_k, k], dim=2)
        values = torch.cat([cached_v, v], dim=2)
        x = x + self._attend(q, keys, values, None)
        return x + self.mlp(self.action_norm_mlp(x))


class Trunk(nn.Module):
    def __init__(self, dim: int, num_heads: int, num_layers: int):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList([TrunkLayer(dim, num_heads) for _ in range(num_layers)])
        self.final_norm = nn.LayerNorm(dim)
        self.final_action_norm = nn.LayerNorm(dim)

    def forward(self, sequence: BlockMaskedSequence, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        length = sequence.tokens.shape[-2]
        if sequence.tokens.shape[-1] != self.dim:
            raise ShapeError("trunk_forward", sequence.tokens.shape, (length, self.dim))
        mask = sequence.mask() if mask is None else mask
        if mask.shape != (length, length):
            raise ShapeError("trunk_forward", mask.shape, (length, length), "mask")
        additive = additive_mask(mask, sequence.tokens.dtype)
        num_context = sequence.context_length
        x = sequence.tokens
        for layer in self.layers:
            x, _, _ = layer(x, additive, num_context)
        return TrunkLayer._norm(x, self.final_norm, self.final_action_norm, num_context)

    def build_kv_cache(self, context: BlockMaskedSequence) -> KVCache:
        if context.sizes[TokenBlock.ACTION_NOISE]:
            raise ValueError("KV cache context must exclude action-noise tokens")
        additive = additive_mask(context.mask(), context.tokens.dtype)
        keys, values = [], []
        x = context.tokens
        for layer in self.layers:
            x, k, v = layer(x, additive, context.context_length)
            keys.append(k)
            values.append(v)
        return KVCache(keys=tuple(keys), values=tuple(values), context_length=context.context_length)

    def forward_actions(self, action_tokens: torch.Tensor, cache: KVCache) -> torch.Tensor:
        if action_tokens.shape[0] != cache.batch_size:
            raise ShapeError("forward_actions", action_tokens.shape, cache.keys[0].shape, "batch")
        x = action_tokens
        for layer, k, v in zip(self.layers, cache.keys, cache.values):
            x = layer.forward_actions(x, k, v)
        return self.final_action_norm(x)


def trunk_forward(
    sequence: BlockMaskedSequence, mask: Optional[torch.Tensor], trunk: Trunk
) -> torch.Tensor:
    """(B, N, C) final-layer embeddings."""
    return trunk(sequence, mask)


def build_kv_cache(context: BlockMaskedSequence, trunk: Trunk) -> KVCache:
    return trunk.build_kv_cache(context)


# --- Action expert and flow matching ---


@dataclass
class FlowSample:
    time: torch.Tensor  # (B,)
    noisy: torch.Tensor  # x_s, (B, H, 7)
    target: torch.Tensor  # action - noise


def flow_sample(action: torch.Tensor, noise: torch.Tensor, time: torch.Tensor) -> FlowSample:
    """Linear path x_s = (1 - s) noise + s action."""
    if action.shape != noise.shape:
        raise ShapeError("flow_sample", action.shape, noise.shape)
    if ((time < 0) | (time > 1)).any():
        raise ValueError("flow time must lie in [0, 1]")
    s = time.reshape(-1, *([1] * (action.dim() - 1)))
    return FlowSample(time=time, noisy=(1 - s) * noise + s * action, target=action - noise)


class ActionExpert(nn.Module):
    """Dedicated action-token embed/readout over the shared trunk."""

    def __init__(self, dim: int, horizon: int, action_dim: int = ACTION_DIM):
        super().__init__()
        self.dim = dim
        self.horizon = horizon
        self.action_dim = action_dim
        self.action_in = nn.Linear(action_dim, dim)
        self.action_out = nn.Linear(dim, action_dim)
        self.type_embedding = nn.Parameter(torch.randn(dim) * 0.02)
        self.register_buffer("position_encoding", build_temporal_encoding(horizon - 1, dim))

    def embed(self, noisy: torch.Tensor, time: torch.Tensor) -> torch.Tensor:
        """(B, H, 7) noised chunk + flow time (B,) -> (B, H, C) action tokens."""
        if noisy.shape[1:] != (self.horizon, self.action_dim):
            raise ShapeError("action_embed", noisy.shape, (self.horizon, self.action_dim))
        time_embedding = sinusoidal_embedding(time.to(noisy.dtype), self.dim).unsqueeze(1)
        return self.action_in(noisy) + time_embedding + self.position_encoding.to(noisy.dtype) + self.type_embedding

    def readout(self, outputs: torch.Tensor) -> torch.Tensor:
        return self.action_out(outputs)


def cfm_loss(predicted_velocity: torch.Tensor, sample: FlowSample) -> torch.Tensor:
    """Mean squared error between predicted and target velocity over all H x 7 entries."""
    if predicted_velocity.shape != sample.target.shape:
        raise ShapeError("cfm_loss", predicted_velocity.shape, sample.target.shape)
    return ((predicted_velocity - sample.target) ** 2).mean()


def total_loss(
    action_loss: torch.Tensor,
    track_loss: torch.Tensor,
    depth_loss: torch.Tensor,
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> torch.Tensor:
    if any(w < 0 for w in weights):
        raise ValueError(f"loss weights must be non-negative, got {weights}")
    w_action, w_track, w_depth = weights
    return w_action * action_loss + w_track * track_loss + w_depth * depth_loss


def predict_velocity(
    noisy: torch.Tensor, time: torch.Tensor, cache: KVCache, trunk: Trunk, expert: ActionExpert
) -> torch.Tensor:
    return expert.readout(trunk.forward_actions(expert.embed(noisy, time), cache))


VelocityField = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def sample_actions(
    cache: KVCache,
    trunk: Trunk,
    expert: ActionExpert,
    steps: int = 10,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
    velocity_fn: Optional[VelocityField] = None,
) -> torch.Tensor:
    """
    Euler integration from noise at s = 0 to s = 1 in ``steps`` uniform steps.
    Only the action pathway runs against the cache; ``velocity_fn`` replaces
    the learned field when given.
    """
    if steps < 1:
        raise ValueError(f"denoising steps must be >= 1, got {steps}")
    dtype = cache.keys[0].dtype
    if noise is None:
        noise = torch.randn(
            cache.batch_size, expert.horizon, expert.action_dim, generator=generator, dtype=dtype
        )
    x = noise
    dt = 1.0 / steps
    for i in range(steps):
        time = torch.full((x.shape[0],), i * dt, dtype=x.dtype)
        if velocity_fn is None:
            velocity = predict_velocity(x, time, cache, trunk, expert)
        else:
            velocity = velocity_fn(x, time)
        x = x + dt * velocity
    return x


# --- Checkpoints ---


def save_checkpoint(directory: str, tensors: Dict[str, torch.Tensor]) -> None:
    """``manifest.txt`` (name = dtype:shape, in write order) plus concatenated tensor records."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, MANIFEST_FILE), "w", encoding="utf-8") as manifest, open(
        os.path.join(directory, TENSORS_FILE), "wb"
    ) as payload:
        for name, tensor in tensors.items():
            shape = ",".join(str(extent) for extent in tensor.shape)
            manifest.write(f"{name}={DTYPE_NAMES[tensor.dtype]}:{shape}\n")
            write_tensor(payload, tensor)
    logger.info(f"Saved {len(tensors)} tensors to {directory}")


def load_checkpoint(directory: str) -> "OrderedDict[str, torch.Tensor]":
    manifest = dotenv_values(os.path.join(directory, MANIFEST_FILE))
    tensors = OrderedDict()
    with open(os.path.join(directory, TENSORS_FILE), "rb") as payload:
        for name, entry in manifest.items():
            dtype_name, _, shape_text = (entry or "").partition(":")
            shape = tuple(int(v) for v in shape_text.split(",") if v)
            tensor = read_tensor(payload)
            if tuple(tensor.shape) != shape or DTYPE_NAMES[tensor.dtype] != dtype_name:
                raise ValueError(
                    f"checkpoint entry {name}: manifest says {dtype_name}{shape}, "
                    f"payload holds {DTYPE_NAMES[tensor.dtype]}{tuple(tensor.shape)}"
                )
            tensors[name] = tensor
        if payload.read(1):
            raise ValueError(f"checkpoint payload in {directory} has trailing data")
    return tensors
