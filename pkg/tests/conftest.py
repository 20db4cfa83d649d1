from pathlib import Path

import numpy as np
import pytest

from nerveseg.data import Sample, SubjectSet, gen_phantom_subjects
from nerveseg.model import Architecture, ModelConfig
from nerveseg.tensor import make_rng


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "slow: mark test as slow to run")


def pytest_collection_modifyitems(
    config: pytest.Config, items: list[pytest.Function]
) -> None:
    if config.getoption("--runslow"):
        # --runslow given in cli: do not skip slow tests
        return
    skip_slow = pytest.mark.skip(reason="need --runslow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def test_data_dir() -> Path:
    data_dir = Path(__file__).resolve().parent / "test_data"
    assert data_dir.exists(), "Test directory structure is broken"
    return data_dir


@pytest.fixture(params=[".yaml", ".yml"])
def settings_file(request: pytest.FixtureRequest, test_data_dir: Path) -> Path:
    return test_data_dir / f"run_settings{request.param}"


def make_square_samples(
    subject: int, count: int, size: int = 16, seed: int = 0
) -> tuple[Sample, ...]:
    """Dark squares on a bright noisy background; the square is the mask."""
    rng = make_rng(seed + 1000 * subject)
    samples = []
    for i in range(count):
        side = int(rng.integers(4, 8))
        top, left = rng.integers(1, size - side - 1, size=2)
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[top : top + side, left : left + side] = 1
        image = np.clip(0.7 - 0.5 * mask + rng.normal(0, 0.05, (size, size)), 0, 1)
        samples.append(
            Sample(image.astype(np.float32)[None, None], mask, f"frame_{i:03d}.pgm", subject)
        )
    return tuple(samples)


@pytest.fixture
def tiny_subjects() -> list[SubjectSet]:
    """Three 16x16 subjects of four frames each."""
    return [SubjectSet(k, make_square_samples(k, 4)) for k in (1, 2, 3)]


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        arch=Architecture.DILATED,
        depth=2,
        base_channels=2,
        input_size=(16, 16),
    )


@pytest.fixture(scope="session")
def phantom_subjects() -> list[SubjectSet]:
    return gen_phantom_subjects(2, 3, make_rng(7))
