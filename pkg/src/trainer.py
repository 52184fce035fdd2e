"""
Trainer
-------
Window sampling, the AdamW training step over the weighted three-term loss,
train-state checkpoints and held-out evaluation.

All randomness flows from ``RunConfig.seed``: parameter initialisation uses the
seed itself and three generators (data, noise, flow time) are derived from it,
so that a run is reproducible and a checkpoint can resume it exactly.
"""

import logging
import os
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from geopredict_architecture import ACTION_DIM, EpisodeRecord, EvaluationMetrics, LossBreakdown
from geopredict_model import GeoPredictModel, WindowBatch, collate_windows, make_window, valid_window_starts
from numerics import backward, first_non_finite
from policy_core import load_checkpoint, save_checkpoint
from run_config import RunConfig

logger = logging.getLogger("geopredict.trainer")

CONFIG_FILE = "config.cfg"
GENERATOR_NAMES = ("data", "noise", "time")
STATE_DIM = 4  # three joint angles and the gripper command


class NonFiniteLossError(RuntimeError):
    """A train step produced a NaN or Inf; carries the name of the first offending tensor."""

    def __init__(self, tensor_name: str, iteration: int):
        super().__init__(f"non-finite value in {tensor_name} at iteration {iteration}")
        self.tensor_name = tensor_name
        self.iteration = iteration


@dataclass
class TrainState:
    config: RunConfig
    model: GeoPredictModel
    optimizer: torch.optim.AdamW
    iteration: int
    generators: Dict[str, torch.Generator]


def build_optimizer(model: GeoPredictModel, config: RunConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=config.lr, betas=tuple(config.betas), weight_decay=config.weight_decay
    )


def create_train_state(config: RunConfig, state_dim: int = STATE_DIM) -> TrainState:
    torch.manual_seed(config.seed)
    model = GeoPredictModel(config, state_dim=state_dim)
    generators = {
        name: torch.Generator().manual_seed(config.seed + offset + 1) for offset, name in enumerate(GENERATOR_NAMES)
    }
    return TrainState(config, model, build_optimizer(model, config), 0, generators)


# --- Windows ---


class WindowPool:
    """Every valid (episode, start) pair of a dataset; windows are built once and cached."""

    def __init__(self, episodes: Sequence[EpisodeRecord], config: RunConfig):
        self.episodes = list(episodes)
        self.config = config
        self.index: List[Tuple[int, int]] = []
        for number, episode in enumerate(self.episodes):
            starts = valid_window_starts(episode, config.horizon)
            if len(starts) == 0:
                logger.warning(
                    f"Skipping episode {number}: {episode.num_steps} steps cannot hold an H+1={config.horizon + 1} future"
                )
            self.index.extend((number, start) for start in starts)
        if not self.index:
            raise ValueError(f"no episode is long enough for horizon {config.horizon}")
        self._cache: Dict[Tuple[int, int], WindowBatch] = {}

    def __len__(self) -> int:
        return len(self.index)

    def window(self, position: int) -> WindowBatch:
        key = self.index[position]
        if key not in self._cache:
            episode_number, start = key
            self._cache[key] = make_window(self.episodes[episode_number], start, self.config).to(
                self.config.torch_dtype
            )
        return self._cache[key]

    def sample(self, batch_size: int, generator: torch.Generator) -> WindowBatch:
        """Uniform draw (with replacement) over all valid windows."""
        picks = torch.randint(len(self.index), (batch_size,), generator=generator)
        return collate_windows([self.window(int(p)) for p in picks])


# --- Training ---


def train_step(
    state: TrainState,
    batch: WindowBatch,
    noise: Optional[torch.Tensor] = None,
    flow_time: Optional[torch.Tensor] = None,
) -> LossBreakdown:
    config = state.config
    dtype = config.torch_dtype
    if noise is None:
        noise = torch.randn(
            batch.batch_size, config.horizon, ACTION_DIM, generator=state.generators["noise"], dtype=dtype
        )
    if flow_time is None:
        flow_time = torch.rand(batch.batch_size, generator=state.generators["time"], dtype=dtype)

    state.model.train()
    state.optimizer.zero_grad()
    result = state.model.forward_losses(batch.to(dtype), noise, flow_time)
    bad = first_non_finite(result.named_tensors())
    if bad is not None:
        raise NonFiniteLossError(bad, state.iteration)
    backward(result.total)
    state.optimizer.step()
    state.iteration += 1
    return result.breakdown(config.loss_weights)


def train(
    state: TrainState,
    episodes: Sequence[EpisodeRecord],
    iterations: Optional[int] = None,
    on_record: Optional[Callable[[Dict], None]] = None,
) -> List[LossBreakdown]:
    """
    Runs ``iterations`` steps (default: the configured count). Every
    ``log_every`` steps and at the last step a record with the loss breakdown,
    Gaussian counts and ``seconds_per_step`` is logged and passed to ``on_record``.
    """
    config = state.config
    iterations = config.iterations if iterations is None else iterations
    pool = WindowPool(episodes, config)
    if episodes and episodes[0].proprio.shape[-1] != state.model.embedder.state.in_features:
        raise ValueError(
            f"episodes carry {episodes[0].proprio.shape[-1]} proprio values, "
            f"model expects {state.model.embedder.state.in_features}"
        )
    logger.info(f"Training for {iterations} iterations over {len(pool)} windows from {len(episodes)} episodes")
    history = []
    elapsed = 0.0
    since_record = 0
    for step in range(iterations):
        batch = pool.sample(config.batch_size, state.generators["data"])
        started = time.perf_counter()
        breakdown = train_step(state, batch)
        elapsed += time.perf_counter() - started
        since_record += 1
        history.append(breakdown)
        if state.iteration % config.log_every == 0 or step == iterations - 1:
            record = OrderedDict(iteration=state.iteration)
            record.update(breakdown.to_dict())
            record["seconds_per_step"] = elapsed / since_record
            logger.info(" ".join(f"{k}={v}" for k, v in record.items()))
            if on_record is not None:
                on_record(record)
            elapsed, since_record = 0.0, 0
    return history


# --- Checkpoints ---


def save_train_state(directory: str, state: TrainState) -> None:
    """Model tensors, AdamW moments, the iteration counter, generator states and the run config."""
    tensors = OrderedDict()
    for name, tensor in state.model.state_dict().items():
        tensors[f"model.{name}"] = tensor.detach().clone()
    for index, parameter in enumerate(state.model.parameters()):
        moments = state.optimizer.state.get(parameter)
        if not moments:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            value = moments[key]
            tensors[f"optim.{index}.{key}"] = (value if torch.is_tensor(value) else torch.tensor(float(value))).detach()
    tensors["iteration"] = torch.tensor(state.iteration, dtype=torch.int64)
    for name, generator in state.generators.items():
        tensors[f"rng.{name}"] = generator.get_state()
    save_checkpoint(directory, tensors)
    state.config.to_file(os.path.join(directory, CONFIG_FILE))


def load_train_state(directory: str) -> TrainState:
    config_path = os.path.join(directory, CONFIG_FILE)
    if not os.path.exists(config_path):
        raise ValueError(f"{directory} is not a checkpoint (missing {CONFIG_FILE})")
    config = RunConfig.from_file(config_path)
    tensors = load_checkpoint(directory)
    state_weight = tensors.get("model.embedder.state.weight")
    state = create_train_state(config, STATE_DIM if state_weight is None else state_weight.shape[1])

    model_tensors = {name[len("model.") :]: t for name, t in tensors.items() if name.startswith("model.")}
    state.model.load_state_dict(model_tensors, strict=True)
    for index, parameter in enumerate(state.model.parameters()):
        prefix = f"optim.{index}."
        if prefix + "step" in tensors:
            state.optimizer.state[parameter] = {
                key: tensors[prefix + key].clone() for key in ("step", "exp_avg", "exp_avg_sq")
            }
    state.iteration = int(tensors["iteration"].item())
    for name, generator in state.generators.items():
        generator.set_state(tensors[f"rng.{name}"])
    logger.info(f"Loaded train state at iteration {state.iteration} from {directory}")
    return state


# --- Evaluation ---


def evaluate(model, episodes: Sequence[EpisodeRecord], config: RunConfig) -> EvaluationMetrics:
    """
    Held-out metrics over every valid window. ``model`` needs ``predict`` and
    ``sample_actions``; disabled pathways report NaN for their metric.
    """
    pool = WindowPool(episodes, config)
    generator = torch.Generator().manual_seed(config.seed)
    steps = config.horizon + 1
    track_sq = torch.zeros(steps, dtype=torch.float64)
    depth_abs = depth_count = action_sq = refined = 0.0
    has_tracks = has_depths = False
    for position in range(len(pool)):
        batch = pool.window(position)
        prediction = model.predict(batch)
        if prediction.tracks is not None:
            has_tracks = True
            error = (prediction.tracks.double() - batch.future_tracks.double()).pow(2).sum(-1)
            track_sq += error.mean(dim=(0, 2))
        if prediction.depths is not None:
            has_depths = True
            mask = batch.depth_masks.double()
            depth_abs += (mask * (prediction.depths.double() - batch.future_depths.double()).abs()).sum().item()
            depth_count += mask.sum().item()
            refined += float(prediction.refined_voxels)
        sampled = model.sample_actions(batch, generator=generator)
        action_sq += (sampled.double() - batch.actions.double()).pow(2).mean().item()

    windows = len(pool)
    per_step = (track_sq / windows).tolist() if has_tracks else []
    metrics = EvaluationMetrics(
        track_mse=sum(per_step) / steps if has_tracks else float("nan"),
        depth_l1=(depth_abs / depth_count if depth_count else 0.0) if has_depths else float("nan"),
        action_mse=action_sq / windows,
        refined_voxels=refined / windows if has_depths else 0.0,
        windows=windows,
        track_mse_per_step=per_step,
    )
    logger.info(f"Evaluated {windows} windows: {metrics.to_record()}")
    return metrics
