"""
======
Tensor
======

Dense four dimensional tensors in (batch, channels, height, width) order.

Tensors are plain C-contiguous :class:`numpy.ndarray` objects; this module only
fixes the conventions every other module relies on: the element type
(``float32`` for training, ``float64`` for gradient checks), the row-major
(N, C, H, W) layout and the seeded random stream used for initialization.

Random numbers come from :class:`numpy.random.Generator` driven by the PCG64
bit generator (a 128-bit linear congruential state advanced by a multiply and
add, with an xor-shift/rotate output permutation). The same seed gives the same
stream within one numpy release; nothing here relies on bit equality across
implementations.

"""

import math
import sys
from collections.abc import Sequence

import numpy as np

from nerveseg.exceptions import DomainError, ShapeError
from nerveseg.types import Rng, Tensor

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64

Dims = tuple[int, int, int, int]


def make_rng(seed: int) -> Rng:
    """Returns a deterministic generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


def validate_dims(dims: Sequence[int]) -> Dims:
    """Checks that ``dims`` describe a 4-D tensor that can be allocated.

    Raises
    ------
    ShapeError
        If ``dims`` does not have four entries or any entry is negative.
    DomainError
        If the flat length overflows the addressable size.

    """
    if len(dims) != 4:
        raise ShapeError(f"Tensors have four dims (N, C, H, W), got {tuple(dims)}.")
    if any(int(d) < 0 for d in dims):
        raise ShapeError(f"Tensor dims must be non-negative, got {tuple(dims)}.")
    length = math.prod(int(d) for d in dims)
    if length > sys.maxsize // np.dtype(DEFAULT_DTYPE).itemsize:
        raise DomainError(f"Tensor of dims {tuple(dims)} overflows the flat length.")
    n, c, h, w = (int(d) for d in dims)
    return n, c, h, w


def check_tensor(x: Tensor, name: str = "tensor") -> Tensor:
    """Raises :class:`ShapeError` unless ``x`` is a 4-D array."""
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}.", name)
    return x


def create_filled(dims: Sequence[int], value: float, dtype: type = DEFAULT_DTYPE) -> Tensor:
    """Creates a tensor of ``dims`` with every element equal to ``value``."""
    return np.full(validate_dims(dims), value, dtype=dtype)


def pad2d(x: Tensor, pad: int, value: float = 0.0) -> Tensor:
    """Pads both spatial axes of ``x`` by ``pad`` elements on every side.

    The interior of the result equals ``x`` and the border equals ``value``.

    """
    if pad < 0:
        raise DomainError(f"Padding must be non-negative, got {pad}.", "pad")
    check_tensor(x)
    if pad == 0:
        return x.copy()
    return np.pad(
        x,
        ((0, 0), (0, 0), (pad, pad), (pad, pad)),
        mode="constant",
        constant_values=value,
    )


def crop2d(x: Tensor, pad: int) -> Tensor:
    """Removes ``pad`` elements from every side of both spatial axes."""
    check_tensor(x)
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


def he_normal_init(
    dims: Sequence[int], fan_in: int, rng: Rng, dtype: type = DEFAULT_DTYPE
) -> Tensor:
    """Draws a tensor from N(0, 2 / fan_in).

    This is the variance rule for rectifier networks, which keeps activation
    variance roughly constant through parametric ReLU layers.

    Raises
    ------
    DomainError
        If ``fan_in`` is not positive.

    """
    if fan_in <= 0:
        raise DomainError(f"fan_in must be positive, got {fan_in}.", "fan_in")
    shape = validate_dims(dims)
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape, dtype=np.float64) * std).astype(dtype)
