from nerveseg.__about__ import (
    __author__,
    __copyright__,
    __email__,
    __license__,
    __summary__,
    __title__,
    __uri__,
    __version__,
)

__all__ = [
    "Architecture",
    "AugmentConfig",
    "Checkpoint",
    "DiceReport",
    "Graph",
    "LayeredSettings",
    "Model",
    "ModelConfig",
    "NerveSegError",
    "RunHistory",
    "Sample",
    "SubjectSet",
    "TrainConfig",
    "UpsampleMode",
    "aggregate_report",
    "backward",
    "binarize",
    "build_dilated_unet",
    "build_train_config",
    "build_unet",
    "dice",
    "evaluate_subject",
    "gen_phantom_subjects",
    "load_checkpoint",
    "load_dataset",
    "nested_cv_plan",
    "receptive_field_table",
    "run_nested_cv",
    "save_checkpoint",
    "train_run",
]

from nerveseg.autograd import Graph, backward
from nerveseg.config import LayeredSettings, build_train_config
from nerveseg.data import (
    AugmentConfig,
    Sample,
    SubjectSet,
    gen_phantom_subjects,
    load_dataset,
    nested_cv_plan,
)
from nerveseg.exceptions import NerveSegError
from nerveseg.metrics import DiceReport, aggregate_report, binarize, dice
from nerveseg.model import (
    Architecture,
    Model,
    ModelConfig,
    UpsampleMode,
    build_dilated_unet,
    build_unet,
    receptive_field_table,
)
from nerveseg.trainer import (
    Checkpoint,
    RunHistory,
    TrainConfig,
    evaluate_subject,
    load_checkpoint,
    run_nested_cv,
    save_checkpoint,
    train_run,
)
