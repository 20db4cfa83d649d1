"""
=============
Configuration
=============

Layered, provenance-tracking run settings.

Values are set at one of three layers, lowest priority first:
``package_defaults``, ``config_file`` and ``command_line``. Reading a key returns
the value from the outermost layer that sets it, and every layer's value and
source stay available for inspection.

.. code-block:: python

    >>> settings = LayeredSettings()
    >>> settings.update({"training": {"epochs": 10}}, layer="config_file", source="run.yaml")
    >>> settings.update({"training": {"epochs": 3}}, layer="command_line")
    >>> settings.get("training.epochs")
    3
    >>> [m["layer"] for m in settings.metadata("training.epochs")]
    ['package_defaults', 'config_file', 'command_line']

Only keys that exist in the package defaults can be set by the higher layers.

"""

from __future__ import annotations

from collections.abc import Iterator
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from nerveseg.data import AugmentConfig
from nerveseg.exceptions import (
    ConfigurationError,
    ConfigurationKeyError,
    DuplicatedConfigurationError,
    NerveSegError,
)
from nerveseg.model import ModelConfig
from nerveseg.trainer import TrainConfig
from nerveseg.types import SettingsInput, SettingValue

LAYERS = ["package_defaults", "config_file", "command_line"]

DEFAULTS = """
model:
    arch: dilated
    depth: 3
    convs_per_level: 2
    base_channels: 16
    channel_growth: 2
    residual_blocks: true
    deep_supervision: true
    upsample_mode: transposed
    dilations: [2, 4]
    input_size: 128
training:
    epochs: 40
    patience: 5
    batch_size: 8
    lr: 0.001
    seed: 0
    deterministic: true
    aux_weight: 1.0
    min_delta: 1.0e-6
augmentation:
    enabled: true
    max_rotation_deg: 15.0
    max_shift_frac: 0.1
"""

# Command-line spelling of the plain network
ARCH_ALIASES = {"unet": "plain"}


class SettingNode:
    """One setting's value at each layer, with the source it came from.

    A value can be set once per layer; setting it again at the same layer
    raises :class:`DuplicatedConfigurationError`.

    """

    def __init__(self, layers: list[str], name: str):
        self._name = name
        self._layers = layers
        self._values: dict[str, tuple[Optional[str], SettingValue]] = {}
        self._frozen = False

    @property
    def name(self) -> str:
        return self._name

    @property
    def metadata(self) -> list[dict[str, Any]]:
        """Every layer's value and source, lowest priority first."""
        return [
            {"layer": layer, "source": self._values[layer][0], "value": self._values[layer][1]}
            for layer in self._layers
            if layer in self._values
        ]

    def freeze(self) -> None:
        self._frozen = True

    def get_value(self, layer: Optional[str] = None) -> SettingValue:
        """The value at ``layer``, or at the outermost layer that has one."""
        if layer is not None:
            if layer not in self._values:
                raise ConfigurationKeyError(
                    f"No value for {self.name} at layer {layer}.", self.name
                )
            return self._values[layer][1]
        for candidate in reversed(self._layers):
            if candidate in self._values:
                return self._values[candidate][1]
        raise ConfigurationKeyError(f"No value stored for {self.name}.", self.name)

    def update(self, value: SettingValue, layer: Optional[str], source: Optional[str]) -> None:
        if self._frozen:
            raise ConfigurationError(f"Setting {self.name} is frozen.", self.name)
        layer = layer if layer else self._layers[-1]
        if layer not in self._layers:
            raise ConfigurationKeyError(f"No layer {layer} for setting {self.name}.", self.name)
        if layer in self._values:
            previous_source, previous = self._values[layer]
            raise DuplicatedConfigurationError(
                f"{self.name} has already been set at layer {layer}.",
                name=self.name,
                layer=layer,
                source=previous_source,
                value=previous,
            )
        self._values[layer] = (source, value)

    def __repr__(self) -> str:
        return "\n".join(
            f"{m['layer']}: {m['value']}\n    source: {m['source']}"
            for m in reversed(self.metadata)
        )


class LayeredSettings:
    """A tree of :class:`SettingNode` objects under named sections.

    Children are reached with ``settings["model"]["arch"]``, attribute access
    ``settings.model.arch`` or a dotted key ``settings.get("model.arch")``.

    """

    def __init__(
        self,
        data: Optional[SettingsInput] = None,
        layers: Optional[list[str]] = None,
        name: str = "",
    ):
        """
        Parameters
        ----------
        data
            Values for the lowest layer. Defaults to the package defaults when
            this is the root of the tree.
        layers
            Layer names, lowest priority first.
        name
            Dotted path of this subtree; empty for the root.

        """
        self.__dict__["_layers"] = list(layers) if layers else list(LAYERS)
        self.__dict__["_children"] = {}
        self.__dict__["_frozen"] = False
        self.__dict__["_name"] = name
        if data is None and not name:
            data = DEFAULTS
        self.update(data, layer=self._layers[0], source="package defaults")

    def _path(self, key: str) -> str:
        return f"{self._name}.{key}" if self._name else key

    def freeze(self) -> None:
        """Makes the tree read only."""
        self.__dict__["_frozen"] = True
        for child in self._children.values():
            child.freeze()

    def keys(self) -> Iterator[str]:
        return iter(self._children)

    def to_dict(self) -> dict[str, Any]:
        """The outermost value of every setting as a nested dict."""
        return {
            key: child.get_value() if isinstance(child, SettingNode) else child.to_dict()
            for key, child in self._children.items()
        }

    def get(self, key: str) -> Any:
        """Looks up a dotted key such as ``training.epochs``."""
        node: Union[LayeredSettings, SettingNode] = self
        for part in key.split("."):
            if not isinstance(node, LayeredSettings) or part not in node._children:
                raise ConfigurationKeyError(f"No setting named {self._path(key)}.", self._path(key))
            node = node._children[part]
        return node.get_value() if isinstance(node, SettingNode) else node

    def metadata(self, key: str) -> list[dict[str, Any]]:
        """Per-layer (layer, source, value) records of a dotted setting key."""
        head, _, rest = key.partition(".")
        if head not in self._children:
            raise ConfigurationKeyError(f"No setting named {self._path(key)}.", self._path(key))
        child = self._children[head]
        if rest:
            if isinstance(child, SettingNode):
                raise ConfigurationKeyError(
                    f"{self._path(head)} is not a section.", self._path(key)
                )
            return child.metadata(rest)
        if isinstance(child, LayeredSettings):
            raise ConfigurationKeyError(
                f"{self._path(key)} is a section, not a setting.", self._path(key)
            )
        return child.metadata

    def update(
        self,
        data: Optional[SettingsInput],
        layer: Optional[str] = None,
        source: Optional[str] = None,
    ) -> None:
        """Sets values from a nested dict, a YAML string or a YAML file path.

        Raises
        ------
        ConfigurationError
            If the tree is frozen, the data is not a mapping, or a section is
            given a plain value (or the reverse).
        ConfigurationKeyError
            If a higher layer names a key the package defaults lack, or the
            layer does not exist.
        DuplicatedConfigurationError
            If a key is set twice at the same layer.

        """
        if data is None:
            return
        values, source = self._coerce(data, source)
        for key, value in values.items():
            self._set(str(key), value, layer, source)

    @staticmethod
    def _coerce(data: SettingsInput, source: Optional[str]) -> tuple[dict[str, Any], Optional[str]]:
        if isinstance(data, dict):
            return data, source
        if isinstance(data, Path) or (isinstance(data, str) and data.endswith((".yaml", ".yml"))):
            source = source if source else str(data)
            try:
                text = Path(data).read_text()
            except OSError as e:
                raise ConfigurationError(f"Cannot read settings file {data}: {e}") from e
        elif isinstance(data, str):
            text = data
        else:
            raise ConfigurationError(
                "Settings can only be updated from dicts, YAML strings and paths, "
                f"got {type(data)}."
            )
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Settings are not valid YAML: {e}") from e
        if loaded is None:
            return {}, source
        if not isinstance(loaded, dict):
            raise ConfigurationError(
                f"Settings YAML must be a mapping, got {type(loaded).__name__}."
            )
        return loaded, source

    def _set(self, key: str, value: Any, layer: Optional[str], source: Optional[str]) -> None:
        path = self._path(key)
        if self._frozen:
            raise ConfigurationError(f"Frozen settings do not support assignment of {path}.", path)
        if key not in self._children:
            if layer != self._layers[0]:
                raise ConfigurationKeyError(f"Unknown setting {path}.", path)
            self._children[key] = (
                LayeredSettings(layers=self._layers, name=path)
                if isinstance(value, dict)
                else SettingNode(self._layers, path)
            )
        child = self._children[key]
        if isinstance(value, dict):
            if isinstance(child, SettingNode):
                raise ConfigurationError(f"Can't assign a section to the setting {path}.", path)
            child.update(value, layer, source)
        else:
            if isinstance(child, LayeredSettings):
                raise ConfigurationError(f"Can't assign a value to the section {path}.", path)
            child.update(value, layer, source)

    def __getattr__(self, name: str) -> Any:
        if name.startswith("_"):
            raise AttributeError(name)
        return self.get(name)

    def __getitem__(self, name: str) -> Any:
        return self.get(name)

    def __setattr__(self, name: str, value: Any) -> None:
        raise ConfigurationError(
            "Settings are changed with update() so that each value records its layer.", name
        )

    def __contains__(self, name: str) -> bool:
        return name in self._children

    def __len__(self) -> int:
        return len(self._children)

    # Pickle looks up __getstate__/__setstate__ through __getattr__
    def __getstate__(self) -> dict[str, Any]:
        return self.__dict__

    def __setstate__(self, state: dict[str, Any]) -> None:
        self.__dict__.update(state)

    def __repr__(self) -> str:
        return "\n".join(
            "{}:\n    {}".format(key, repr(child).replace("\n", "\n    "))
            for key, child in self._children.items()
        )


def _size_pair(value: Any) -> tuple[int, int]:
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ValueError(f"input_size needs two values, got {value}")
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _int_tuple(value: Any) -> tuple[int, ...]:
    if isinstance(value, str):
        return tuple(int(v) for v in value.split(",") if v.strip())
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return (int(value),)


def build_model_config(settings: LayeredSettings) -> ModelConfig:
    section = settings.get("model").to_dict()
    arch = str(section.pop("arch"))
    try:
        section["dilations"] = _int_tuple(section["dilations"])
        section["input_size"] = _size_pair(section["input_size"])
        return ModelConfig(arch=ARCH_ALIASES.get(arch, arch), **section)
    except ConfigurationError as e:
        raise ConfigurationError(str(e), f"model.{e.value_name}") from e
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"Invalid model settings: {e}", "model") from e


def build_train_config(settings: LayeredSettings) -> TrainConfig:
    """Converts settings to a validated :class:`~nerveseg.trainer.TrainConfig`.

    Raises
    ------
    ConfigurationError
        If any value has the wrong type or fails validation; ``value_name``
        names the offending key where it is known.

    """
    model = build_model_config(settings)
    try:
        augment = AugmentConfig(**settings.get("augmentation").to_dict())
    except NerveSegError as e:
        raise ConfigurationError(str(e), f"augmentation.{e.value_name}") from e
    except TypeError as e:
        raise ConfigurationError(f"Invalid augmentation settings: {e}", "augmentation") from e
    training = settings.get("training").to_dict()
    try:
        return TrainConfig(
            model=model,
            augment=augment,
            epochs=int(training["epochs"]),
            patience=int(training["patience"]),
            batch_size=int(training["batch_size"]),
            lr=float(training["lr"]),
            seed=int(training["seed"]),
            deterministic=bool(training["deterministic"]),
            aux_weight=float(training["aux_weight"]),
            min_delta=float(training["min_delta"]),
        )
    except ConfigurationError as e:
        raise ConfigurationError(str(e), f"training.{e.value_name}") from e
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"Invalid training settings: {e}", "training") from e
