from collections.abc import Mapping
from typing import Optional

import numpy as np
import pytest
from pytest_mock import MockerFixture

from nerveseg.autograd import Graph, MaxPool2d, Variable, weighted_sum
from nerveseg.exceptions import GradientCheckError
from nerveseg.gradcheck import (
    DEFAULT_SEEDS,
    MODEL_TOLERANCE,
    OP_CASES,
    OP_TOLERANCE,
    Builder,
    CheckCase,
    GradCheckRecord,
    assert_passed,
    check_model,
    check_operator,
    run_gradient_suite,
)
from nerveseg.tensor import make_rng
from nerveseg.types import Rng, Tensor


class DoubledMaxPool(MaxPool2d):
    """Max pooling whose backward is off by a factor of two."""

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        (routed,) = super().backward(grad)
        return (None if routed is None else 2 * routed,)


def doubled_maxpool_case(x: Tensor) -> CheckCase:
    def case(rng: Rng) -> tuple[Builder, dict[str, Tensor]]:
        def build(graph: Graph, v: Mapping[str, Variable]) -> Variable:
            out = DoubledMaxPool.apply(v["x"])
            return weighted_sum(out, graph.constant(np.ones(out.shape)))

        return build, {"x": x}

    return case


@pytest.mark.parametrize("name", list(OP_CASES))
def test_operator_gradients(name: str) -> None:
    record = check_operator(name, seed=0)
    assert record.check == name
    assert record.tolerance == OP_TOLERANCE
    assert record.passed, record


@pytest.mark.slow
@pytest.mark.parametrize("seed", DEFAULT_SEEDS)
def test_model_gradients(seed: int) -> None:
    record = check_model(seed)
    assert record.tolerance == MODEL_TOLERANCE
    assert record.passed, record


@pytest.mark.slow
def test_full_suite() -> None:
    records = run_gradient_suite()
    assert len(records) == len(DEFAULT_SEEDS) * (len(OP_CASES) + 1)
    assert_passed(records)


def test_suite_without_model() -> None:
    records = run_gradient_suite(seeds=[1], include_model=False)
    assert [r.check for r in records] == list(OP_CASES)
    assert_passed(records)


def test_assert_passed_names_failures() -> None:
    records = [
        GradCheckRecord("prelu", 0, 1e-7, OP_TOLERANCE, 153),
        GradCheckRecord("sigmoid", 3, 2e-3, OP_TOLERANCE, 64),
    ]
    with pytest.raises(GradientCheckError, match="sigmoid \\(seed 3"):
        assert_passed(records)
    assert_passed(records[:1])


def test_check_that_compares_nothing_fails(mocker: MockerFixture) -> None:
    mocker.patch.dict(OP_CASES, {"flat_maxpool": doubled_maxpool_case(np.ones((1, 1, 4, 4)))})
    record = check_operator("flat_maxpool", seed=0)
    assert record.points == 0
    assert not record.passed
    with pytest.raises(GradientCheckError, match="no points compared"):
        assert_passed([record])


def test_wrong_backward_fails(mocker: MockerFixture) -> None:
    x = make_rng(2).permutation(16).reshape(1, 1, 4, 4).astype(float)
    mocker.patch.dict(OP_CASES, {"doubled_maxpool": doubled_maxpool_case(x)})
    record = check_operator("doubled_maxpool", seed=0)
    assert record.points == 16
    assert not record.passed
