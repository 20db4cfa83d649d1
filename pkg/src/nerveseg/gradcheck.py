"""
==============
Gradient suite
==============

Finite-difference checks of every differentiable operator and of a complete
dilated U-Net, run in double precision.

Operator outputs are reduced to a scalar with a fixed random weighting, so
every output element contributes a distinct amount to the checked gradient.

"""

import logging
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass

from nerveseg import autograd as ag
from nerveseg.autograd import Graph, Variable, finite_diff_sweep
from nerveseg.exceptions import GradientCheckError
from nerveseg.model import Architecture, Model, ModelConfig
from nerveseg.tensor import CHECK_DTYPE, make_rng
from nerveseg.trainer import training_loss
from nerveseg.types import Rng, Tensor

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4
STEP = 1e-4
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
# Elements sampled per parameter tensor in the end-to-end check
MODEL_POINTS = 8


@dataclass(frozen=True)
class GradCheckRecord:
    """One finite-difference check; a check that compared no point fails."""

    check: str
    seed: int
    max_rel_error: float
    tolerance: float
    points: int

    @property
    def passed(self) -> bool:
        return self.points > 0 and self.max_rel_error <= self.tolerance


Builder = Callable[[Graph, Mapping[str, Variable]], Variable]
CheckCase = Callable[[Rng], tuple[Builder, dict[str, Tensor]]]


def _normal(rng: Rng, *dims: int) -> Tensor:
    return rng.standard_normal(dims, dtype=CHECK_DTYPE)


def _reduced(
    op: Callable[..., Variable], names: Iterable[str], rng: Rng, dims: tuple[int, ...]
) -> Builder:
    weights = _normal(rng, *dims)
    order = list(names)

    def build(graph: Graph, v: Mapping[str, Variable]) -> Variable:
        return ag.weighted_sum(op(*(v[n] for n in order)), graph.constant(weights))

    return build


def _conv_case(dilation: int) -> CheckCase:
    def case(rng: Rng) -> tuple[Builder, dict[str, Tensor]]:
        inputs = {
            "x": _normal(rng, 2, 2, 9, 9),
            "w": _normal(rng, 3, 2, 3, 3),
            "b": _normal(rng, 3),
        }

        def op(x: Variable, w: Variable, b: Variable) -> Variable:
            return ag.conv2d(x, w, b, padding=dilation, dilation=dilation)

        return _reduced(op, ["x", "w", "b"], rng, (2, 3, 9, 9)), inputs

    return case


def _transposed_case(rng: Rng) -> tuple[Builder, dict[str, Tensor]]:
    inputs = {"x": _normal(rng, 2, 3, 4, 4), "w": _normal(rng, 3, 2, 2, 2), "b": _normal(rng, 2)}
    return _reduced(ag.transposed_conv2d, ["x", "w", "b"], rng, (2, 2, 8, 8)), inputs


def _maxpool_case(rng: Rng) -> tuple[Builder, dict[str, Tensor]]:
    return _reduced(ag.maxpool2d, ["x"], rng, (2, 2, 3, 3)), {"x": _normal(rng, 2, 2, 6, 6)}


def _prelu_case(rng: Rng) -> tuple[Builder, dict[str, Tensor]]:
    inputs = {"x": _normal(rng, 2, 3, 5, 5), "a": rng.uniform(0.05, 0.5, 3)}
    return _reduced(ag.prelu, ["x", "a"], rng, (2, 3, 5, 5)), inputs


def _sigmoid_case(rng: Rng) -> tuple[Builder, dict[str, Tensor]]:
    return _reduced(ag.sigmoid, ["x"], rng, (2, 2, 4, 4)), {"x": _normal(rng, 2, 2, 4, 4)}


def _bilinear_case(rng: Rng) -> tuple[Builder, dict[str, Tensor]]:
    inputs = {"x": _normal(rng, 2, 2, 4, 5)}
    return _reduced(ag.bilinear_upsample2d, ["x"], rng, (2, 2, 8, 10)), inputs


def _concat_case(rng: Rng) -> tuple[Builder, dict[str, Tensor]]:
    inputs = {"a": _normal(rng, 2, 2, 4, 4), "b": _normal(rng, 2, 3, 4, 4)}
    return _reduced(ag.concat_channels, ["a", "b"], rng, (2, 5, 4, 4)), inputs


def _residual_case(rng: Rng) -> tuple[Builder, dict[str, Tensor]]:
    inputs = {"a": _normal(rng, 2, 3, 4, 4), "b": _normal(rng, 2, 3, 4, 4)}
    return _reduced(ag.residual_add, ["a", "b"], rng, (2, 3, 4, 4)), inputs


def _bce_case(rng: Rng) -> tuple[Builder, dict[str, Tensor]]:
    target = (rng.uniform(size=(2, 1, 5, 5)) < 0.5).astype(CHECK_DTYPE)

    def build(graph: Graph, v: Mapping[str, Variable]) -> Variable:
        return ag.bce_loss(v["z"], graph.constant(target))

    return build, {"z": _normal(rng, 2, 1, 5, 5) * 2}


OP_CASES: dict[str, CheckCase] = {
    "conv2d[d=1]": _conv_case(1),
    "conv2d[d=2]": _conv_case(2),
    "conv2d[d=4]": _conv_case(4),
    "transposed_conv2d": _transposed_case,
    "maxpool2d": _maxpool_case,
    "prelu": _prelu_case,
    "sigmoid": _sigmoid_case,
    "bilinear_upsample2d": _bilinear_case,
    "concat_channels": _concat_case,
    "residual_add": _residual_case,
    "bce_loss": _bce_case,
}


def check_operator(name: str, seed: int) -> GradCheckRecord:
    builder, inputs = OP_CASES[name](make_rng(seed))
    result = finite_diff_sweep(builder, inputs, h=STEP)
    return GradCheckRecord(name, seed, result.max_rel_error, OP_TOLERANCE, result.points)


def check_model(seed: int, points: int = MODEL_POINTS) -> GradCheckRecord:
    """End-to-end check of the dilated U-Net (base 4) on a 16x16 input."""
    config = ModelConfig(arch=Architecture.DILATED, base_channels=4, input_size=(16, 16))
    rng = make_rng(seed)
    params = Model.initialize(config, seed).params
    image = rng.uniform(size=(1, 1, 16, 16))
    target = (rng.uniform(size=(1, 1, 16, 16)) < 0.3).astype(CHECK_DTYPE)

    def build(graph: Graph, v: Mapping[str, Variable]) -> Variable:
        # The model adds its own parameter leaves under the same names, so
        # their gradients are summed with the (zero) gradients of ``v``
        model = Model(config, {name: var.value for name, var in v.items()})
        return training_loss(model, graph, image, target)

    result = finite_diff_sweep(build, params, h=STEP, max_points=points, seed=seed)
    return GradCheckRecord(
        "dilated_unet", seed, result.max_rel_error, MODEL_TOLERANCE, result.points
    )


def run_gradient_suite(
    seeds: Iterable[int] = DEFAULT_SEEDS, include_model: bool = True
) -> list[GradCheckRecord]:
    """Checks every operator, then the whole network, once per seed."""
    records = []
    for seed in seeds:
        for name in OP_CASES:
            records.append(check_operator(name, seed))
            logger.debug("%s seed %d: %.3e", name, seed, records[-1].max_rel_error)
        if include_model:
            records.append(check_model(seed))
            logger.debug("dilated_unet seed %d: %.3e", seed, records[-1].max_rel_error)
    return records


def assert_passed(records: Iterable[GradCheckRecord]) -> None:
    """Raises :class:`GradientCheckError` naming every failed check."""
    failed = [r for r in records if not r.passed]
    if failed:
        details = ", ".join(_failure(r) for r in failed)
        raise GradientCheckError(f"Gradient check failed for {details}.")


def _failure(record: GradCheckRecord) -> str:
    if record.points == 0:
        return f"{record.check} (seed {record.seed}: no points compared)"
    return (
        f"{record.check} (seed {record.seed}: "
        f"{record.max_rel_error:.2e} > {record.tolerance:.0e})"
    )
