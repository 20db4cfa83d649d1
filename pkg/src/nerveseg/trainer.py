"""
=======
Trainer
=======

Training with early stopping and best-weight selection, evaluation, the
subject-wise nested cross validation experiment and the binary checkpoint
format.

Checkpoint layout, all integers little-endian::

    b"NSCK"                      magic
    u32                          format version (1)
    u32 + bytes                  UTF-8 ``key=value`` lines of the model config
    u32                          tensor count
    per tensor:
        u16 + bytes              UTF-8 name
        u8                       rank
        rank x u32               dims
        prod(dims) x f32         values, row-major

"""

import logging
import math
import struct
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from nerveseg import data
from nerveseg.autograd import Graph, Variable, backward, bce_loss, residual_add, scale, sigmoid
from nerveseg.data import AugmentConfig, Fold, Sample, SubjectSet, nested_cv_plan
from nerveseg.exceptions import (
    BadMagicError,
    CheckpointError,
    ConfigurationError,
    DatasetError,
    DivergenceError,
    ShapeError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from nerveseg.metrics import DiceReport, aggregate_report, binarize, count_components, dice
from nerveseg.model import Architecture, Model, ModelConfig, build_model
from nerveseg.optim import adam_init, adam_step
from nerveseg.types import ParamDict, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"NSCK"
FORMAT_VERSION = 1
# Second word of the data stream seed; the first is the run seed
DATA_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    """Everything a single training run needs besides its data.

    Attributes
    ----------
    model
        Architecture and size of the network.
    augment
        On-the-fly augmentation of training samples.
    epochs
        Upper bound on training epochs.
    patience
        Epochs without validation improvement before stopping.
    batch_size
        Samples per Adam step.
    lr
        Adam step size.
    seed
        Seeds weight initialization, shuffling and augmentation.
    deterministic
        When false, shuffling and augmentation draw from fresh OS entropy;
        weight initialization still follows ``seed``.
    aux_weight
        Weight of every deep supervision loss term.
    min_delta
        Validation dice must exceed the best so far by more than this to count
        as an improvement.

    """

    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    epochs: int = 40
    patience: int = 5
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    deterministic: bool = True
    aux_weight: float = 1.0
    min_delta: float = 1e-6

    def __post_init__(self) -> None:
        for name in ("epochs", "patience", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"Training {name} must be at least 1.", name)
        if not self.lr > 0:
            raise ConfigurationError(f"Learning rate must be positive, got {self.lr}.", "lr")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"Seed must fit in 64 unsigned bits, got {self.seed}.", "seed")
        if self.aux_weight < 0:
            raise ConfigurationError("aux_weight must be non-negative.", "aux_weight")
        if self.min_delta < 0:
            raise ConfigurationError("min_delta must be non-negative.", "min_delta")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamDict
    version: int = FORMAT_VERSION

    def to_model(self) -> Model:
        return Model(self.config, self.params)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float


@dataclass
class RunHistory:
    """Per-epoch training loss and validation dice of one run.

    ``best_epoch`` is 1-based and 0 while no epoch has been recorded.
    """

    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_val_dice(self) -> float:
        if not self.best_epoch:
            return math.nan
        return self.epochs[self.best_epoch - 1].val_dice

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.epoch, r.train_loss, r.val_dice) for r in self.epochs],
            columns=["epoch", "train_loss", "val_dice"],
        )

    def to_jsonl(self, path: Union[str, Path]) -> None:
        """Writes one ``{"epoch", "train_loss", "val_dice"}`` object per line."""
        self.to_frame().to_json(path, orient="records", lines=True)


class EarlyStopping:
    """Tracks the best validation score and counts epochs without improvement."""

    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best_value = -math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, value: float) -> bool:
        """Records ``value`` for ``epoch``; returns True if it is a new best."""
        if value > self.best_value + self.min_delta:
            self.best_value = value
            self.best_epoch = epoch
            self.wait = 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


def training_loss(
    model: Model, graph: Graph, images: Tensor, target: Tensor, aux_weight: float = 1.0
) -> Variable:
    """Main BCE plus ``aux_weight`` times the BCE of every auxiliary head.

    Auxiliary targets are the masks downsampled by nearest neighbour to each
    head's extent.
    """
    logits, aux = model.forward(images, graph)
    loss = bce_loss(logits, graph.constant(target))
    for level, aux_logits in enumerate(aux, start=1):
        aux_target = data.downsample_mask(target, 2**level)
        term = bce_loss(aux_logits, graph.constant(aux_target))
        loss = residual_add(loss, scale(term, aux_weight))
    return loss


def predict_probabilities(model: Model, images: Tensor, batch_size: int = 8) -> Tensor:
    """Sigmoid outputs [N, 1, H, W] of ``model`` for ``images`` [N, 1, H, W]."""
    outputs = []
    for start in range(0, images.shape[0], batch_size):
        graph = Graph()
        logits, _ = model.forward(images[start : start + batch_size], graph)
        outputs.append(sigmoid(logits).value)
    return np.concatenate(outputs, axis=0)


def evaluate_samples(model: Model, samples: Sequence[Sample], batch_size: int = 8) -> np.ndarray:
    """Dice of every sample after thresholding at 0.5. Never augments."""
    probs = predict_probabilities(model, data.stack_images(samples), batch_size)
    return np.array([dice(binarize(p[0]), s.mask) for p, s in zip(probs, samples)])


def evaluate_subject(ck: Checkpoint, subject: SubjectSet, batch_size: int = 8) -> float:
    """Mean per-image dice of the checkpointed model over ``subject``.

    Raises
    ------
    ShapeError
        If the subject's images do not have the checkpoint's input size.

    """
    _check_extent(ck, subject)
    return float(np.mean(evaluate_samples(ck.to_model(), subject.samples, batch_size)))


def subject_breakdown(ck: Checkpoint, subject: SubjectSet, batch_size: int = 8) -> pd.DataFrame:
    """Per-image dice and number of predicted connected regions."""
    _check_extent(ck, subject)
    probs = predict_probabilities(ck.to_model(), data.stack_images(subject.samples), batch_size)
    rows = []
    for prob, sample in zip(probs, subject):
        pred = binarize(prob[0])
        rows.append((sample.source, dice(pred, sample.mask), count_components(pred)))
    return pd.DataFrame(rows, columns=["source", "dice", "components"])


def _check_extent(ck: Checkpoint, subject: SubjectSet) -> None:
    for sample in subject:
        if sample.mask.shape != ck.config.input_size:
            raise ShapeError(
                f"Sample {sample.source} is {sample.mask.shape}, the checkpoint "
                f"expects {ck.config.input_size}.",
                "subject",
            )


def _data_rng(cfg: TrainConfig) -> np.random.Generator:
    if cfg.deterministic:
        return np.random.Generator(np.random.PCG64([cfg.seed, DATA_STREAM]))
    return np.random.Generator(np.random.PCG64())


def train_run(
    train: Sequence[Sample], val: Sequence[Sample], cfg: TrainConfig
) -> tuple[Checkpoint, RunHistory]:
    """Trains a fresh model and returns its best-epoch weights.

    Each epoch shuffles and augments the training samples, takes one Adam step
    per batch and then scores the unaugmented validation samples. Training
    stops after ``cfg.patience`` epochs without improvement or after
    ``cfg.epochs``.

    Raises
    ------
    ValueError
        If ``train`` or ``val`` is empty.
    DivergenceError
        If the loss becomes NaN or infinite.

    """
    train, val = list(train), list(val)
    if not train or not val:
        raise ValueError("train_run needs non-empty training and validation samples.")

    model = build_model(cfg.model, seed=cfg.seed)
    state = adam_init(model.params, lr=cfg.lr)
    rng = _data_rng(cfg)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    history = RunHistory()
    best_params = {name: value.copy() for name, value in model.params.items()}

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [
                data.augment_sample(train[i], cfg.augment, rng)
                for i in order[start : start + cfg.batch_size]
            ]
            graph = Graph()
            loss = training_loss(
                model, graph, data.stack_images(batch), data.stack_masks(batch), cfg.aux_weight
            )
            value = float(loss.value.reshape(()))
            if not math.isfinite(value):
                raise DivergenceError(f"Training loss became {value} in epoch {epoch}.", "loss")
            adam_step(model.params, backward(graph, loss), state)
            total += value * len(batch)

        val_dice = float(np.mean(evaluate_samples(model, val, cfg.batch_size)))
        history.epochs.append(EpochRecord(epoch, total / len(train), val_dice))
        if stopper.update(epoch, val_dice):
            best_params = {name: value.copy() for name, value in model.params.items()}
        logger.info(
            "epoch %d: train loss %.5f, val dice %.4f (best %.4f at epoch %d)",
            epoch,
            total / len(train),
            val_dice,
            stopper.best_value,
            stopper.best_epoch,
        )
        if stopper.should_stop:
            logger.info("Early stop after epoch %d, best epoch %d", epoch, stopper.best_epoch)
            break

    history.best_epoch = stopper.best_epoch
    return Checkpoint(cfg.model, best_params), history


@dataclass(frozen=True)
class FoldRun:
    arch: Architecture
    fold_index: int
    fold: Fold
    seed: int
    test_dice: float
    history: RunHistory


@dataclass
class CrossValidationResult:
    report: DiceReport
    runs: list[FoldRun]


def fold_seed(base_seed: int, fold_index: int, arch_index: int) -> int:
    """Mixes a run seed with fold and architecture indices.

    The words are hashed by :class:`numpy.random.SeedSequence` into one
    64-bit seed, so every (fold, arch) pair gets an independent but
    reproducible stream.
    """
    sequence = np.random.SeedSequence([base_seed, fold_index, arch_index])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def _run_fold(
    subjects: Mapping[int, SubjectSet],
    fold_index: int,
    fold: Fold,
    arch_index: int,
    cfg: TrainConfig,
) -> FoldRun:
    seed = fold_seed(cfg.seed, fold_index, arch_index)
    run_cfg = replace(cfg, seed=seed)
    logger.info(
        "Fold %d (%s): test %d, val %d, train %s",
        fold_index,
        cfg.model.arch.value,
        fold.test,
        fold.val,
        list(fold.train),
    )
    train = [s for subject in fold.train for s in subjects[subject]]
    ck, history = train_run(train, subjects[fold.val].samples, run_cfg)
    test_dice = evaluate_subject(ck, subjects[fold.test], cfg.batch_size)
    logger.info("Fold %d (%s): test dice %.4f", fold_index, cfg.model.arch.value, test_dice)
    return FoldRun(cfg.model.arch, fold_index, fold, seed, test_dice, history)


def run_nested_cv(
    subjects: Sequence[SubjectSet], configs: Sequence[TrainConfig], jobs: int = 1
) -> CrossValidationResult:
    """Trains every fold of :func:`nested_cv_plan` for every config.

    Each test subject's row is the mean test dice over the folds in which it
    was the test subject. Folds may run on ``jobs`` worker threads; results
    are assembled in fold order, so the report does not depend on ``jobs``.

    """
    if not configs:
        raise ConfigurationError("run_nested_cv needs at least one training config.", "configs")
    by_id = {s.subject_id: s for s in subjects}
    plan = nested_cv_plan([s.subject_id for s in subjects])
    tasks = [
        (fold_index, fold, arch_index, cfg)
        for arch_index, cfg in enumerate(configs)
        for fold_index, fold in enumerate(plan)
    ]
    logger.info("Nested cross validation: %d folds x %d configs", len(plan), len(configs))

    if jobs <= 1:
        runs = [_run_fold(by_id, *task) for task in tasks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(lambda task: _run_fold(by_id, *task), tasks))

    report = aggregate_report((run.fold.test, run.arch.value, run.test_dice) for run in runs)
    return CrossValidationResult(report, runs)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    config = "\n".join(f"{k}={v}" for k, v in ck.config.to_pairs()).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", ck.version, len(config)), config]
    parts.append(struct.pack("<I", len(ck.params)))
    for name, value in ck.params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise TruncatedPayloadError(
                f"Checkpoint ends at byte {len(self.payload)}, expected at least "
                f"{self.offset + size}."
            )
        chunk = self.payload[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self, size: int, what: str) -> str:
        start = self.offset
        try:
            return self.take(size).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"Checkpoint {what} at byte {start} is not UTF-8: {e}") from e


def decode_checkpoint(payload: bytes) -> Checkpoint:
    """Parses :func:`encode_checkpoint` output.

    Raises
    ------
    BadMagicError
        If the payload does not start with ``NSCK``.
    VersionMismatchError
        If the format version is not 1.
    TruncatedPayloadError
        If the payload ends before its declared content.
    CheckpointError
        If text is not valid UTF-8, a config line has no ``=``, trailing
        bytes follow the last tensor or the tensors do not match the stored
        config.

    """
    if payload[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"Not a checkpoint: magic bytes are {payload[:4]!r}.")
    reader = _Reader(payload)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"Checkpoint format version {version} is not supported (expected {FORMAT_VERSION})."
        )
    (config_length,) = reader.unpack("<I")
    pairs = []
    for line in reader.text(config_length, "config").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"Malformed config line {line!r} in checkpoint.")
        pairs.append((key, value))
    config = ModelConfig.from_pairs(pairs)

    (count,) = reader.unpack("<I")
    params: ParamDict = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.text(name_length, "tensor name")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        raw = reader.take(4 * math.prod(dims))
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if reader.offset != len(payload):
        extra = len(payload) - reader.offset
        raise CheckpointError(f"{extra} trailing bytes after the last tensor.")

    try:
        Model(config, params)
    except ShapeError as e:
        raise CheckpointError(f"Checkpoint tensors do not match its config: {e}") from e
    return Checkpoint(config, params, version)


def save_checkpoint(ck: Checkpoint, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_model(path: Union[str, Path]) -> Model:
    return load_checkpoint(path).to_model()


def subject_by_id(subjects: Sequence[SubjectSet], subject_id: int) -> SubjectSet:
    for subject in subjects:
        if subject.subject_id == subject_id:
            return subject
    raise DatasetError(f"No subject {subject_id} in the dataset.", "subject")


def split_subjects(
    subjects: Sequence[SubjectSet], test: int, val: int
) -> tuple[list[Sample], SubjectSet, SubjectSet]:
    """Training samples, validation subject and test subject of one fold."""
    if test == val:
        raise DatasetError("Test and validation subjects must differ.", "val")
    train = [s for subject in subjects if subject.subject_id not in (test, val) for s in subject]
    if not train:
        raise DatasetError("No subjects left for training.", "subjects")
    return train, subject_by_id(subjects, val), subject_by_id(subjects, test)
