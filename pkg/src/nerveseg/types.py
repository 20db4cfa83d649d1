from pathlib import Path
from typing import Mapping, Union

import numpy as np
import numpy.typing as npt

# NOTE: py 3.9 does not support typing.TypeAlias

# A dense (N, C, H, W) array. float32 on the training path, float64 for gradient checks.
Tensor = npt.NDArray[np.floating]
# Binary masks are stored as uint8 arrays holding only 0 and 1
MaskArray = npt.NDArray[np.uint8]
Rng = np.random.Generator

# Named parameter tensors of a model and gradients keyed the same way
ParamDict = dict[str, Tensor]
GradDict = dict[str, Tensor]

# Settings leaves cannot be another mapping
SettingValue = Union[str, int, float, bool, list[Union[str, int, float]]]
NestedSettings = Mapping[str, Union[SettingValue, "NestedSettings"]]
SettingsInput = Union[NestedSettings, str, Path]
