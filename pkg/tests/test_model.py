import math

import numpy as np
import pytest

from nerveseg.autograd import Graph, backward
from nerveseg.exceptions import ConfigurationError, ShapeError
from nerveseg.model import (
    Architecture,
    ConvBlock,
    Model,
    ModelConfig,
    RFStep,
    UpsampleMode,
    build_dilated_unet,
    build_model,
    build_unet,
    covers_input,
    parameter_count,
    parameter_table,
    receptive_field_table,
    walk_receptive_field,
)
from nerveseg.tensor import make_rng
from nerveseg.trainer import training_loss


@pytest.fixture
def small_plain() -> ModelConfig:
    return ModelConfig(arch=Architecture.PLAIN, base_channels=4, input_size=(32, 32))


def test_channel_sequence() -> None:
    cfg = ModelConfig()
    assert [cfg.channels(level) for level in range(1, 5)] == [16, 32, 64, 128]


def test_plain_receptive_field_is_68() -> None:
    rows = receptive_field_table(ModelConfig(arch=Architecture.PLAIN))
    assert rows[-1].receptive_field == 68
    assert rows[-1].jump == 8
    assert rows[-1].extent == (16, 16)
    assert not covers_input(ModelConfig(arch=Architecture.PLAIN), rows)


def test_dilated_receptive_field_covers_input() -> None:
    cfg = ModelConfig(arch=Architecture.DILATED, dilations=(2, 4))
    rows = receptive_field_table(cfg)
    assert [r.receptive_field for r in rows[-3:]] == [68, 100, 164]
    assert covers_input(cfg, rows)


def test_single_conv_receptive_field() -> None:
    assert walk_receptive_field([RFStep("conv", 3)], (8, 8))[0].receptive_field == 3


def test_receptive_field_table_walks_shrinking_path() -> None:
    rows = receptive_field_table(ModelConfig(arch=Architecture.PLAIN))
    assert [r.receptive_field for r in rows] == [3, 5, 6, 10, 14, 16, 24, 32, 36, 52, 68]


def test_conv_block_counts() -> None:
    block = ConvBlock("down1", 1, 8, convs=1, residual=False)
    counts = {spec.name: math.prod(spec.dims) for spec in block.param_specs()}
    assert counts["down1.conv1.weight"] + counts["down1.conv1.bias"] == 80
    assert counts["down1.act1.slope"] == 8


def test_dilated_minus_plain_parameter_count() -> None:
    plain = build_unet(ModelConfig(arch=Architecture.PLAIN))
    dilated = build_dilated_unet(ModelConfig(arch=Architecture.DILATED))
    c = 128
    # two dilated 3x3 convs with bias
    assert parameter_count(dilated) - parameter_count(plain) == 2 * (9 * c * c + c)
    assert not any(".act" in name for name in dilated.params if name.startswith("dilated"))


def test_parameter_table_matches_count(small_plain: ModelConfig) -> None:
    model = build_model(small_plain)
    table = parameter_table(model)
    assert sum(count for _, _, count in table) == parameter_count(model)
    assert table[0][0] == "down1.conv1.weight"
    assert table[0][1] == (4, 1, 3, 3)


def test_initialization() -> None:
    model = Model.initialize(ModelConfig(base_channels=4, input_size=(32, 32)), seed=3)
    assert np.all(model.params["down1.act1.slope"] == 0.25)
    assert np.all(model.params["head.bias"] == 0)
    assert model.params["up1.upsample.weight"].shape == (8, 4, 2, 2)
    assert all(value.dtype == np.float32 for value in model.params.values())
    again = Model.initialize(ModelConfig(base_channels=4, input_size=(32, 32)), seed=3)
    for name, value in model.params.items():
        np.testing.assert_array_equal(value, again.params[name])


def test_forward_shapes_at_full_size() -> None:
    model = build_model(ModelConfig(base_channels=4))
    logits, aux = model.forward(np.zeros((1, 1, 128, 128), dtype=np.float32), Graph())
    assert logits.shape == (1, 1, 128, 128)
    assert [a.shape for a in aux] == [(1, 1, 64, 64), (1, 1, 32, 32), (1, 1, 16, 16)]


def test_forward_other_divisible_size(small_plain: ModelConfig) -> None:
    model = build_model(small_plain)
    logits, _ = model.forward(np.zeros((1, 1, 64, 64), dtype=np.float32), Graph())
    assert logits.shape == (1, 1, 64, 64)


def test_no_aux_without_deep_supervision() -> None:
    cfg = ModelConfig(base_channels=2, deep_supervision=False, input_size=(16, 16))
    _, aux = build_model(cfg).forward(np.zeros((1, 1, 16, 16), dtype=np.float32), Graph())
    assert aux == []


@pytest.mark.parametrize("mode", list(UpsampleMode))
@pytest.mark.parametrize("residual", [True, False])
def test_forward_variants(mode: UpsampleMode, residual: bool) -> None:
    cfg = ModelConfig(
        arch=Architecture.DILATED,
        base_channels=2,
        depth=2,
        upsample_mode=mode,
        residual_blocks=residual,
        input_size=(16, 16),
    )
    logits, aux = build_model(cfg).forward(np.zeros((2, 1, 16, 16), dtype=np.float32), Graph())
    assert logits.shape == (2, 1, 16, 16)
    assert len(aux) == 2


def test_zero_head_gives_constant_logits(small_plain: ModelConfig) -> None:
    model = build_model(small_plain)
    model.params["head.weight"][...] = 0
    model.params["head.bias"][...] = 0.3
    image = make_rng(0).uniform(size=(1, 1, 32, 32)).astype(np.float32)
    logits, _ = model.forward(image, Graph())
    np.testing.assert_array_equal(logits.value, np.full((1, 1, 32, 32), np.float32(0.3)))


def test_batch_matches_single_forwards() -> None:
    cfg = ModelConfig(arch=Architecture.DILATED, base_channels=2, input_size=(16, 16))
    model = build_model(cfg, seed=5)
    batch = make_rng(1).uniform(size=(2, 1, 16, 16)).astype(np.float32)
    together, _ = model.forward(batch, Graph())
    first, _ = model.forward(batch[:1], Graph())
    second, _ = model.forward(batch[1:], Graph())
    np.testing.assert_array_equal(together.value, np.concatenate([first.value, second.value]))


@pytest.mark.parametrize("arch", list(Architecture))
def test_every_parameter_receives_gradient(arch: Architecture) -> None:
    cfg = ModelConfig(arch=arch, base_channels=4, depth=2, input_size=(16, 16))
    model = build_model(cfg, seed=2)
    rng = make_rng(9)
    images = rng.uniform(size=(2, 1, 16, 16)).astype(np.float32)
    target = (rng.uniform(size=(2, 1, 16, 16)) < 0.3).astype(np.float32)
    graph = Graph()
    grads = backward(graph, training_loss(model, graph, images, target))
    assert set(grads) == set(model.params)
    silent = [name for name, grad in grads.items() if not np.any(grad)]
    assert silent == []


def test_forward_rejects_bad_input(small_plain: ModelConfig) -> None:
    model = build_model(small_plain)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 2, 32, 32), dtype=np.float32), Graph())
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 1, 30, 32), dtype=np.float32), Graph())


def test_builders_check_arch(small_plain: ModelConfig) -> None:
    with pytest.raises(ConfigurationError):
        build_dilated_unet(small_plain)
    with pytest.raises(ConfigurationError):
        build_unet(ModelConfig(arch=Architecture.DILATED, input_size=(32, 32)))


@pytest.mark.parametrize(
    "kwargs, name",
    [
        ({"depth": 0}, "depth"),
        ({"input_size": (100, 128)}, "input_size"),
        ({"arch": "dilated", "dilations": (4, 2)}, "dilations"),
        ({"arch": "dilated", "dilations": (1, 2)}, "dilations"),
        ({"arch": "resnet"}, "arch"),
        ({"upsample_mode": "nearest"}, "upsample_mode"),
    ],
)
def test_invalid_config(kwargs: dict[str, object], name: str) -> None:
    with pytest.raises(ConfigurationError) as error:
        ModelConfig(**kwargs)  # type: ignore[arg-type]
    assert error.value.value_name == name


def test_config_pairs_round_trip() -> None:
    cfg = ModelConfig(
        arch="dilated",  # type: ignore[arg-type]
        base_channels=8,
        upsample_mode="bilinear",  # type: ignore[arg-type]
        dilations=[2, 4, 8],  # type: ignore[arg-type]
    )
    assert cfg.arch is Architecture.DILATED
    assert dict(cfg.to_pairs())["dilations"] == "2,4,8"
    assert ModelConfig.from_pairs(cfg.to_pairs()) == cfg


def test_config_from_bad_pairs() -> None:
    with pytest.raises(ConfigurationError):
        ModelConfig.from_pairs([("depth", "three")])
    with pytest.raises(ConfigurationError):
        ModelConfig.from_pairs([("width", "3")])


def test_model_rejects_mismatched_params(small_plain: ModelConfig) -> None:
    params = build_model(small_plain).params
    del params["head.bias"]
    with pytest.raises(ShapeError):
        Model(small_plain, params)
