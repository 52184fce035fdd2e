"""
Numerics
--------
Dense tensor operations with reverse-mode automatic differentiation, the
sinusoidal encodings shared by the track, geometry and policy modules, and the
binary tensor serialization used by every persisted artifact.

Tensors are ``torch.Tensor`` objects; every op here validates shapes up front
so a mismatch is reported with the op name and both operand shapes instead of
a backend traceback.
"""

import logging
import math
import struct
from typing import BinaryIO, Iterable, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger("geopredict.numerics")

EXP_INPUT_CEILING = 30.0

TENSOR_MAGIC = b"GPT0"

# element width tags for the serialization header
DTYPE_TAGS = {
    torch.float32: 1,
    torch.float64: 2,
    torch.int64: 3,
    torch.uint8: 4,
    torch.bool: 5,
}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}
NUMPY_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "u1",
    torch.bool: "u1",
}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, left: Sequence[int], right: Sequence[int], detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        message = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


def _broadcast_check(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    """Trailing-dimension broadcasting only; anything else is a ShapeError."""
    for da, db in zip(reversed(a.shape), reversed(b.shape)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(op, a.shape, b.shape)


def expect_shape(op: str, tensor: torch.Tensor, shape: Sequence[Optional[int]]) -> None:
    """Check a tensor against an expected shape; ``None`` entries match any extent."""
    if tensor.dim() != len(shape) or any(
        want is not None and got != want for got, want in zip(tensor.shape, shape)
    ):
        raise ShapeError(op, tensor.shape, tuple(-1 if s is None else s for s in shape))


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast_check("add", a, b)
    return a + b


def sub(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast_check("sub", a, b)
    return a - b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast_check("mul", a, b)
    return a * b


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, "inner extents differ")
    if a.dim() > 2 and b.dim() > 2:
        _broadcast_check("matmul", a[..., :1, :1], b[..., :1, :1])
    return a @ b


def transpose(x: torch.Tensor, dim0: int = -2, dim1: int = -1) -> torch.Tensor:
    if x.dim() < 2:
        raise ShapeError("transpose", x.shape, (dim0, dim1), "rank below 2")
    return x.transpose(dim0, dim1)


def reshape(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    if -1 not in shape and math.prod(shape) != x.numel():
        raise ShapeError("reshape", x.shape, shape, "element counts differ")
    return x.reshape(*shape)


def concat(tensors: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    first = tensors[0]
    for other in tensors[1:]:
        if other.dim() != first.dim():
            raise ShapeError("concat", first.shape, other.shape, "ranks differ")
        for axis in range(first.dim()):
            if axis != dim % first.dim() and first.shape[axis] != other.shape[axis]:
                raise ShapeError("concat", first.shape, other.shape, f"axis {axis} differs")
    return torch.cat(list(tensors), dim=dim)


def slice_along(x: torch.Tensor, dim: int, start: int, stop: int) -> torch.Tensor:
    if not 0 <= start <= stop <= x.shape[dim]:
        raise ShapeError("slice", x.shape, (start, stop), f"range outside axis {dim}")
    return x.narrow(dim, start, stop - start)


def reduce_sum(x: torch.Tensor, dim: Optional[int] = None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


def reduce_mean(x: torch.Tensor, dim: Optional[int] = None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def exp(x: torch.Tensor) -> torch.Tensor:
    """Exponential with inputs clamped to ``EXP_INPUT_CEILING``."""
    return torch.exp(torch.clamp(x, max=EXP_INPUT_CEILING))


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def additive_mask(allowed: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """Turn a boolean allow-mask into 0 / -inf additive form."""
    zeros = torch.zeros(allowed.shape, dtype=dtype, device=allowed.device)
    return zeros.masked_fill(~allowed, float("-inf"))


def masked_softmax(
    scores: torch.Tensor, mask: Optional[torch.Tensor] = None, dim: int = -1
) -> torch.Tensor:
    """
    Softmax with an additive mask. A boolean mask is converted with
    ``additive_mask``; masked entries receive exactly zero weight.
    """
    if mask is not None:
        _broadcast_check("softmax", scores, mask)
        if mask.dtype == torch.bool:
            mask = additive_mask(mask, scores.dtype)
        scores = scores + mask
    return torch.softmax(scores, dim=dim)


def layer_norm(
    x: torch.Tensor,
    weight: Optional[torch.Tensor] = None,
    bias: Optional[torch.Tensor] = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    if weight is not None and weight.shape[-1] != x.shape[-1]:
        raise ShapeError("layer_norm", x.shape, weight.shape)
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def squared_error(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if prediction.shape != target.shape:
        raise ShapeError("squared_error", prediction.shape, target.shape)
    return (prediction - target) ** 2


def absolute_error(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if prediction.shape != target.shape:
        raise ShapeError("absolute_error", prediction.shape, target.shape)
    return (prediction - target).abs()


def backward(loss: torch.Tensor) -> None:
    """Reverse-mode pass from a scalar; gradients accumulate into ``.grad``."""
    if loss.numel() != 1:
        raise ValueError(f"backward requires a scalar output, got shape {tuple(loss.shape)}")
    loss.backward()


# --- Sinusoidal encodings ---


def _sinusoid_table(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Rows of ``[sin(p / 10000^(2i/dim)), cos(p / 10000^(2i/dim))]`` interleaved."""
    half = torch.arange(0, dim, 2, dtype=torch.float64)
    inv_freq = torch.pow(torch.tensor(10000.0, dtype=torch.float64), -half / dim)
    angles = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    table = torch.empty(positions.shape[0], dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles)
    return table


def build_temporal_encoding(
    horizon: int, dim: int, dtype: torch.dtype = torch.float64
) -> torch.Tensor:
    """(horizon + 1) x dim table; row tau encodes integer step tau."""
    if dim % 2:
        raise ValueError(f"temporal encoding dim must be even, got {dim}")
    if horizon < 0:
        raise ValueError(f"horizon must be non-negative, got {horizon}")
    steps = torch.arange(horizon + 1, dtype=torch.float64)
    return _sinusoid_table(steps, dim).to(dtype)


def near_thirds_split(dim: int) -> Tuple[int, int, int]:
    """Equal even thirds when possible, otherwise remainder goes to z."""
    part = 2 * (dim // 6)
    return part, part, dim - 2 * part


def build_spatial_encoding(
    grid: Tuple[int, int, int],
    dim: int,
    split: Optional[Tuple[int, int, int]] = None,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """
    N_x x N_y x N_z x dim table formed by concatenating independent 1D encodings
    of the x, y and z voxel indices along the channel axis.
    """
    if split is None:
        if dim % 6:
            raise ValueError(f"spatial encoding dim {dim} is not divisible by 6; pass a split")
        split = (dim // 3,) * 3
    if sum(split) != dim:
        raise ValueError(f"spatial split {tuple(split)} does not sum to {dim}")
    if any(part % 2 or part <= 0 for part in split):
        raise ValueError(f"spatial split {tuple(split)} must have positive even parts")
    nx, ny, nz = grid
    axes = []
    for axis, (extent, part) in enumerate(zip(grid, split)):
        table = _sinusoid_table(torch.arange(extent, dtype=torch.float64), part)
        view = [1, 1, 1, part]
        view[axis] = extent
        axes.append(table.reshape(view).expand(nx, ny, nz, part))
    return torch.cat(axes, dim=-1).to(dtype)


def sinusoidal_embedding(
    values: torch.Tensor, dim: int, scale: float = 1000.0
) -> torch.Tensor:
    """Continuous-value sinusoidal embedding (flow time s in [0, 1] is scaled first)."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    flat = values.reshape(-1)
    return _sinusoid_table(flat * scale, dim).to(values.dtype).reshape(*values.shape, dim)


# --- Serialization ---


def write_tensor(handle: BinaryIO, tensor: torch.Tensor) -> None:
    """Header (magic, rank, extents, width tag) then little-endian elements."""
    tensor = tensor.detach().cpu().contiguous()
    if tensor.dtype not in DTYPE_TAGS:
        raise ValueError(f"unsupported dtype for serialization: {tensor.dtype}")
    handle.write(TENSOR_MAGIC)
    handle.write(struct.pack("<Q", tensor.dim()))
    for extent in tensor.shape:
        handle.write(struct.pack("<Q", extent))
    handle.write(struct.pack("<Q", DTYPE_TAGS[tensor.dtype]))
    array = tensor.to(torch.uint8) if tensor.dtype == torch.bool else tensor
    handle.write(array.numpy().astype(NUMPY_DTYPES[tensor.dtype], copy=False).tobytes())


def read_tensor(handle: BinaryIO) -> torch.Tensor:
    magic = handle.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<Q", handle.read(8))
    shape = tuple(struct.unpack("<Q", handle.read(8))[0] for _ in range(rank))
    (tag,) = struct.unpack("<Q", handle.read(8))
    if tag not in TAG_DTYPES:
        raise ValueError(f"unknown element width tag {tag}")
    dtype = TAG_DTYPES[tag]
    np_dtype = np.dtype(NUMPY_DTYPES[dtype])
    count = math.prod(shape)
    payload = handle.read(count * np_dtype.itemsize)
    if len(payload) != count * np_dtype.itemsize:
        raise ValueError("truncated tensor payload")
    array = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
    tensor = torch.from_numpy(array)
    return tensor.to(torch.bool) if dtype == torch.bool else tensor


def save_tensor(path: str, tensor: torch.Tensor) -> None:
    with open(path, "wb") as handle:
        write_tensor(handle, tensor)


def load_tensor(path: str) -> torch.Tensor:
    with open(path, "rb") as handle:
        return read_tensor(handle)


def first_non_finite(named: Iterable[Tuple[str, torch.Tensor]]) -> Optional[str]:
    """Name of the first tensor holding a NaN or Inf, if any."""
    for name, tensor in named:
        if tensor is not None and not torch.isfinite(tensor.detach()).all():
            return name
    return None
