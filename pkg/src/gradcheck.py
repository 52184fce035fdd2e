"""
Gradient checks: analytic gradients against central finite differences at 64-bit.

``renderer`` checks every parameter of a handful of random Gaussians through
``depth_loss``; ``trunk`` checks random trunk parameters through a linear
readout; ``full`` checks random parameters of the whole tiny model through the
weighted training loss.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import torch

from depth_renderer import RenderSettings, depth_loss, render_depth
from geometry_predictor import GaussianSet
from geopredict_architecture import ACTION_DIM, CameraModel, Provenance, format_record
from geopredict_model import GeoPredictModel, make_window
from policy_core import BlockMaskedSequence, Trunk
from run_config import RunConfig
from synth_env import SceneSpec, generate_episode

logger = logging.getLogger("geopredict.gradcheck")

SCOPES = ("renderer", "trunk", "full")
SMALL_GRADIENT = 1e-6
SMALL_GRADIENT_TOLERANCE = 1e-8


@dataclass
class GradcheckReport:
    scope: str
    max_rel_error: float
    checked: int
    failures: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_record(self) -> str:
        return format_record(
            {
                "scope": self.scope,
                "passed": self.passed,
                "max_rel_error": self.max_rel_error,
                "checked": self.checked,
                "failures": self.failures,
                "tolerance": self.tolerance,
            }
        )


def central_difference(loss_fn: Callable[[], torch.Tensor], tensor: torch.Tensor, index: int, eps: float) -> float:
    """(f(x + eps) - f(x - eps)) / 2 eps for one flat entry of ``tensor``, restored afterwards."""
    flat = tensor.data.view(-1)
    original = flat[index].item()
    with torch.no_grad():
        flat[index] = original + eps
        plus = loss_fn().item()
        flat[index] = original - eps
        minus = loss_fn().item()
        flat[index] = original
    return (plus - minus) / (2 * eps)


def compare(
    scope: str,
    loss_fn: Callable[[], torch.Tensor],
    entries: Sequence[Tuple[str, torch.Tensor, int]],
    eps: float,
    tolerance: float,
) -> GradcheckReport:
    """
    Entry-wise check of ``tensor.grad`` against finite differences. Entries whose
    analytic gradient is below ``SMALL_GRADIENT`` are judged on absolute error.
    """
    for _, tensor, _ in entries:
        tensor.grad = None
    loss_fn().backward()
    worst, failures = 0.0, 0
    for name, tensor, index in entries:
        analytic = 0.0 if tensor.grad is None else tensor.grad.view(-1)[index].item()
        numeric = central_difference(loss_fn, tensor, index, eps)
        difference = abs(analytic - numeric)
        if abs(analytic) < SMALL_GRADIENT:
            ok = difference < SMALL_GRADIENT_TOLERANCE
            error = 0.0 if ok else difference
        else:
            error = difference / max(abs(analytic), abs(numeric))
            ok = error < tolerance
        worst = max(worst, error)
        if not ok:
            failures += 1
            logger.warning(f"{scope}: {name}[{index}] analytic={analytic!r} numeric={numeric!r}")
    report = GradcheckReport(scope, worst, len(entries), failures, tolerance)
    logger.info(report.to_record())
    return report


def sample_entries(
    named_tensors: Sequence[Tuple[str, torch.Tensor]], count: int, generator: torch.Generator
) -> List[Tuple[str, torch.Tensor, int]]:
    """``count`` flat entries drawn uniformly over the concatenation of all tensors."""
    sizes = torch.tensor([t.numel() for _, t in named_tensors])
    offsets = torch.cumsum(sizes, 0)
    picks = torch.randint(int(offsets[-1]), (count,), generator=generator)
    entries = []
    for pick in picks.tolist():
        owner = int(torch.searchsorted(offsets, pick, right=True))
        start = int(offsets[owner] - sizes[owner])
        name, tensor = named_tensors[owner]
        entries.append((name, tensor, pick - start))
    return entries


# --- Scopes ---


def random_gaussians(count: int, center: Sequence[float], generator: torch.Generator) -> GaussianSet:
    def uniform(shape, low, high):
        return low + (high - low) * torch.rand(shape, generator=generator, dtype=torch.float64)

    quaternions = torch.randn(count, 4, generator=generator, dtype=torch.float64)
    return GaussianSet(
        means=torch.tensor(center, dtype=torch.float64) + uniform((count, 3), -0.12, 0.12),
        opacities=uniform((count,), 0.2, 0.8),
        log_scales=torch.log(uniform((count, 3), 0.03, 0.08)),
        quaternions=quaternions / quaternions.norm(dim=-1, keepdim=True),
        provenance=torch.full((count,), int(Provenance.INITIAL), dtype=torch.long),
        voxel_index=torch.arange(count),
        slot=torch.zeros(count, dtype=torch.long),
    )


def check_renderer(
    seed: int = 0, num_gaussians: int = 8, image_size: int = 16, eps: float = 1e-5, tolerance: float = 1e-3
) -> GradcheckReport:
    generator = torch.Generator().manual_seed(seed)
    target = (0.3, 0.0, 0.2)
    camera = CameraModel.look_at((1.0, -0.4, 0.7), target, image_size, image_size)
    settings = RenderSettings(cull_sigma=8.0, min_transmittance=0.0)
    gaussians = random_gaussians(num_gaussians, target, generator)
    gt = 0.5 + 1.5 * torch.rand(image_size, image_size, generator=generator, dtype=torch.float64)
    mask = torch.ones(image_size, image_size, dtype=torch.bool)
    parameters = [
        (name, getattr(gaussians, name).requires_grad_(True))
        for name in ("means", "opacities", "log_scales", "quaternions")
    ]

    def loss_fn():
        return depth_loss(render_depth(gaussians, camera, settings), gt, mask)[0]

    entries = [(name, tensor, index) for name, tensor in parameters for index in range(tensor.numel())]
    return compare("renderer", loss_fn, entries, eps, tolerance)


def check_trunk(
    seed: int = 0, dim: int = 12, heads: int = 2, layers: int = 2, count: int = 100, eps: float = 1e-6, tolerance: float = 1e-4
) -> GradcheckReport:
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    trunk = Trunk(dim, heads, layers).double()
    sizes = (3, 2, 2, 1, 2)
    sequence = BlockMaskedSequence(
        tokens=torch.randn(1, sum(sizes), dim, generator=generator, dtype=torch.float64),
        sizes=sizes,
        num_future_queries=2,
        num_spatial_queries=0,
    )
    readout = torch.randn(1, sum(sizes), dim, generator=generator, dtype=torch.float64)

    def loss_fn():
        return (trunk(sequence) * readout).sum()

    entries = sample_entries(list(trunk.named_parameters()), count, generator)
    return compare("trunk", loss_fn, entries, eps, tolerance)


def check_full(
    seed: int = 0, count: int = 100, eps: float = 1e-6, tolerance: float = 1e-4, config: RunConfig = None
) -> GradcheckReport:
    config = config or RunConfig.tiny(seed=seed)
    if config.torch_dtype != torch.float64:
        raise ValueError("the end-to-end gradient check needs a float64 config")
    scene = SceneSpec.toy(image_size=config.image_size, num_cameras=config.num_cameras)
    episode = generate_episode(0, seed, scene, horizon=config.horizon)
    batch = make_window(episode, 2, config).to(torch.float64)

    torch.manual_seed(seed)
    model = GeoPredictModel(config)
    generator = torch.Generator().manual_seed(seed)
    noise = torch.randn(1, config.horizon, ACTION_DIM, generator=generator, dtype=torch.float64)
    flow_time = torch.rand(1, generator=generator, dtype=torch.float64)

    def loss_fn():
        return model.forward_losses(batch, noise, flow_time).total

    entries = sample_entries(list(model.named_parameters()), count, generator)
    return compare("full", loss_fn, entries, eps, tolerance)


def run_gradcheck(scope: str, seed: int = 0) -> GradcheckReport:
    checks = {"renderer": check_renderer, "trunk": check_trunk, "full": check_full}
    if scope not in checks:
        raise ValueError(f"unknown gradcheck scope {scope!r} (known: {', '.join(SCOPES)})")
    report = checks[scope](seed=seed)
    if not math.isfinite(report.max_rel_error):
        report.failures = max(report.failures, 1)
    return report
