"""Adam with bias correction over a named parameter set."""

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from nerveseg.exceptions import DivergenceError, DomainError, ShapeError
from nerveseg.types import GradDict, ParamDict, Tensor


@dataclass
class AdamState:
    """Moment estimates and hyperparameters of one Adam run.

    Attributes
    ----------
    lr
        Step size.
    beta1
        Decay rate of the first moment (mean of past gradients).
    beta2
        Decay rate of the second moment (mean of past squared gradients).
    eps
        Added to the denominator to avoid division by zero.
    t
        Number of steps taken.

    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, Tensor] = field(default_factory=dict, repr=False)
    v: dict[str, Tensor] = field(default_factory=dict, repr=False)


def adam_init(
    params: Mapping[str, Tensor],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Creates zeroed moments for every parameter.

    Raises
    ------
    DomainError
        If ``lr`` is not positive.

    """
    if lr <= 0:
        raise DomainError(f"Learning rate must be positive, got {lr}.", "lr")
    return AdamState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        m={name: np.zeros_like(value) for name, value in params.items()},
        v={name: np.zeros_like(value) for name, value in params.items()},
    )


def adam_step(params: ParamDict, grads: GradDict, state: AdamState) -> tuple[ParamDict, AdamState]:
    """Applies one bias-corrected Adam update to ``params`` in place.

    Raises
    ------
    ShapeError
        If a gradient is missing or its dims differ from its parameter.
    DivergenceError
        If any gradient contains NaN. Nothing is updated in that case.

    """
    for name, value in params.items():
        if name not in grads or grads[name].shape != value.shape:
            raise ShapeError(f"Gradient for {name} is missing or has the wrong dims.", name)
        if np.isnan(grads[name]).any():
            raise DivergenceError(f"NaN gradient for {name}; training diverged.", name)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1**state.t
    correction2 = 1 - b2**state.t
    for name, value in params.items():
        g = grads[name].astype(value.dtype, copy=False)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        value -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype)
    return params, state
