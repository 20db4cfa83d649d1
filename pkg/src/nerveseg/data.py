"""
====
Data
====

Ultrasound samples, dataset I/O, augmentation, subject-wise fold planning and
a synthetic phantom generator.

A dataset directory is laid out as::

    root/
        subject_1/
            images/frame_000.pgm
            masks/frame_000.pgm
        subject_2/
            ...

Images are 8-bit grayscale PGM (P5) or PNG files; a mask has the same file
name as its image and marks foreground with values above 127. Everything is
resized to the working resolution on load, bilinearly for images and by
nearest neighbour for masks so masks stay binary.

"""

import itertools
import logging
import math
import re
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from nerveseg.exceptions import DatasetError, DomainError, ShapeError
from nerveseg.types import MaskArray, Rng, Tensor

logger = logging.getLogger(__name__)

IMAGE_SIZE = (128, 128)
IMAGE_SUFFIXES = (".pgm", ".png")
MASK_THRESHOLD = 127
SUBJECT_DIR = re.compile(r"^subject_(\d+)$")


@dataclass(frozen=True)
class Sample:
    """One grayscale image and its binary mask.

    Attributes
    ----------
    image
        (1, 1, H, W) float32 values in [0, 1].
    mask
        (H, W) uint8 values in {0, 1}.
    source
        Where the sample came from, e.g. a file name.
    subject
        Identity of the subject the frame was acquired from.

    """

    image: Tensor
    mask: MaskArray
    source: str
    subject: int

    def __post_init__(self) -> None:
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 1):
            raise ShapeError(f"Sample image must be (1, 1, H, W), got {self.image.shape}.")
        if self.image.shape[2:] != self.mask.shape:
            raise ShapeError(
                f"Sample image {self.image.shape[2:]} and mask {self.mask.shape} differ in size."
            )
        if self.image.size and (self.image.min() < 0 or self.image.max() > 1):
            raise DomainError(f"Sample {self.source} has image values outside [0, 1].")
        if not np.isin(self.mask, (0, 1)).all():
            raise DomainError(f"Sample {self.source} has a non-binary mask.")


@dataclass(frozen=True)
class SubjectSet:
    subject_id: int
    samples: tuple[Sample, ...]

    def __post_init__(self) -> None:
        if not self.samples:
            raise DatasetError(f"Subject {self.subject_id} has no samples.", "samples")
        if any(s.subject != self.subject_id for s in self.samples):
            raise DatasetError(f"Subject {self.subject_id} holds another subject's samples.")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)


@dataclass(frozen=True)
class AugmentConfig:
    """Random rotation and shift magnitudes.

    Attributes
    ----------
    max_rotation_deg
        Rotations are drawn uniformly from +/- this many degrees.
    max_shift_frac
        Height and width shifts are drawn uniformly from +/- this fraction of
        the image extent.
    enabled
        When false, :func:`augment_sample` returns samples unchanged.

    """

    max_rotation_deg: float = 15.0
    max_shift_frac: float = 0.1
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.max_rotation_deg < 0:
            raise DomainError("max_rotation_deg must be non-negative.", "max_rotation_deg")
        if not 0 <= self.max_shift_frac < 1:
            raise DomainError("max_shift_frac must lie in [0, 1).", "max_shift_frac")


@dataclass(frozen=True)
class Fold:
    test: int
    val: int
    train: tuple[int, ...]


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[Fold, ...]

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self) -> Iterator[Fold]:
        return iter(self.folds)

    def by_test_subject(self) -> dict[int, list[Fold]]:
        """Folds grouped by their test subject, in plan order."""
        groups: dict[int, list[Fold]] = {}
        for fold in self.folds:
            groups.setdefault(fold.test, []).append(fold)
        return groups


def stack_images(samples: Sequence[Sample]) -> Tensor:
    return np.concatenate([s.image for s in samples], axis=0)


def stack_masks(samples: Sequence[Sample]) -> Tensor:
    """Masks as an (N, 1, H, W) float32 target."""
    return np.stack([s.mask for s in samples])[:, None].astype(np.float32)


def downsample_mask(target: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour downsampling of an (N, 1, H, W) target, top-left anchored."""
    return target[:, :, ::factor, ::factor]


def read_grayscale(path: Path) -> np.ndarray:
    """Decodes an 8-bit grayscale image file."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"Cannot decode image {path}: {e}", str(path)) from e


def write_grayscale(path: Path, pixels: np.ndarray) -> None:
    """Encodes an (H, W) uint8 array; the format follows the file suffix."""
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path)


def _resize(pixels: np.ndarray, size: tuple[int, int], resample: Image.Resampling) -> np.ndarray:
    if pixels.shape == size:
        return pixels
    img = Image.fromarray(pixels).resize((size[1], size[0]), resample=resample)
    return np.asarray(img, dtype=np.uint8)


def load_image(path: Path, size: tuple[int, int] = IMAGE_SIZE) -> Tensor:
    """Reads one image as a (1, 1, H, W) float32 tensor in [0, 1], resized bilinearly."""
    image = _resize(read_grayscale(path), size, Image.Resampling.BILINEAR)
    return (image.astype(np.float32) / 255.0)[None, None]


def load_sample(
    image_path: Path, mask_path: Path, subject: int, size: tuple[int, int] = IMAGE_SIZE
) -> Sample:
    mask = _resize(read_grayscale(mask_path), size, Image.Resampling.NEAREST)
    return Sample(
        image=load_image(image_path, size),
        mask=(mask > MASK_THRESHOLD).astype(np.uint8),
        source=image_path.name,
        subject=subject,
    )


def load_subject(
    directory: Path, subject: int, size: tuple[int, int] = IMAGE_SIZE
) -> SubjectSet:
    images = sorted(
        p for p in (directory / "images").glob("*") if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not images:
        raise DatasetError(f"Subject directory {directory} has no images.", str(directory))
    samples = []
    for image_path in images:
        mask_path = directory / "masks" / image_path.name
        if not mask_path.exists():
            raise DatasetError(f"Missing mask for image {image_path}.", str(image_path))
        samples.append(load_sample(image_path, mask_path, subject, size))
    return SubjectSet(subject, tuple(samples))


def load_dataset(
    root: Union[str, Path], size: tuple[int, int] = IMAGE_SIZE
) -> list[SubjectSet]:
    """Loads every ``subject_<k>`` directory under ``root``, ordered by ``k``.

    Raises
    ------
    DatasetError
        If ``root`` has no subject directories, a subject has no images, an
        image has no mask, or a file cannot be decoded.

    """
    root = Path(root)
    found = []
    for path in root.iterdir() if root.is_dir() else []:
        match = SUBJECT_DIR.match(path.name)
        if match and path.is_dir():
            found.append((int(match.group(1)), path))
    if not found:
        raise DatasetError(f"No subject_<k> directories under {root}.", str(root))
    subjects = [load_subject(path, subject, size) for subject, path in sorted(found)]
    logger.info(
        "Loaded %d subjects (%d samples) from %s",
        len(subjects),
        sum(len(s) for s in subjects),
        root,
    )
    return subjects


def export_dataset(subjects: Sequence[SubjectSet], root: Union[str, Path]) -> None:
    """Writes ``subjects`` as PGM files in the layout :func:`load_dataset` reads."""
    root = Path(root)
    for subject in subjects:
        images = root / f"subject_{subject.subject_id}" / "images"
        masks = root / f"subject_{subject.subject_id}" / "masks"
        images.mkdir(parents=True, exist_ok=True)
        masks.mkdir(parents=True, exist_ok=True)
        for sample in subject:
            name = Path(sample.source).with_suffix(".pgm").name
            write_grayscale(images / name, np.rint(sample.image[0, 0] * 255))
            write_grayscale(masks / name, sample.mask * 255)
    logger.info("Exported %d subjects to %s", len(subjects), root)


def affine_resample(sample: Sample, angle_deg: float, shift: tuple[float, float]) -> Sample:
    """Rotates ``sample`` by ``angle_deg`` about its center, then shifts it.

    ``shift`` is (rows, columns) in pixels. Each output pixel is mapped back
    into the input; the image is sampled bilinearly, the mask by nearest
    neighbour, and anything falling outside the input reads as 0.

    """
    h, w = sample.mask.shape
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    rotation = np.array([[cos, -sin], [sin, cos]])
    inverse = rotation.T
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - inverse @ (center + np.asarray(shift, dtype=float))

    image = ndimage.affine_transform(
        sample.image[0, 0].astype(np.float64),
        inverse,
        offset=offset,
        order=1,
        mode="constant",
        cval=0.0,
    )
    mask = ndimage.affine_transform(
        sample.mask, inverse, offset=offset, order=0, mode="constant", cval=0
    )
    return Sample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32)[None, None],
        mask=mask.astype(np.uint8),
        source=sample.source,
        subject=sample.subject,
    )


def augment_sample(sample: Sample, cfg: AugmentConfig, rng: Rng) -> Sample:
    """Applies a random rotation and height/width shift drawn from ``rng``."""
    if not cfg.enabled:
        return sample
    h, w = sample.mask.shape
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    dy = rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * h
    dx = rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * w
    return affine_resample(sample, angle, (dy, dx))


def nested_cv_plan(subject_ids: Sequence[int]) -> SplitPlan:
    """One fold per ordered (test, validation) pair of distinct subjects.

    The remaining subjects train. ``n`` subjects give ``n * (n - 1)`` folds, so
    every subject is the test subject of ``n - 1`` folds.

    Raises
    ------
    DatasetError
        If ids repeat or there are fewer than three subjects.

    """
    ids = [int(i) for i in subject_ids]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"Subject ids must be distinct, got {ids}.", "subject_ids")
    if len(ids) < 3:
        raise DatasetError(f"Nested cross validation needs 3 subjects, got {len(ids)}.")
    folds = [
        Fold(test=test, val=val, train=tuple(i for i in ids if i not in (test, val)))
        for test, val in itertools.permutations(ids, 2)
    ]
    return SplitPlan(tuple(folds))


def _ellipse(
    shape: tuple[int, int], center: tuple[float, float], axes: tuple[float, float], angle: float
) -> np.ndarray:
    rows, cols = np.mgrid[: shape[0], : shape[1]]
    dy, dx = rows - center[0], cols - center[1]
    cos, sin = math.cos(angle), math.sin(angle)
    u = dx * cos + dy * sin
    v = -dx * sin + dy * cos
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def _phantom_frame(
    rng: Rng,
    center: tuple[float, float],
    scale: float,
    size: tuple[int, int],
    source: str,
    subject: int,
) -> Sample:
    h, w = size
    jitter = rng.uniform(-6, 6, size=2)
    cy, cx = center[0] + jitter[0], center[1] + jitter[1]

    mask = np.zeros(size, dtype=bool)
    for _ in range(rng.integers(3, 7)):
        offset = rng.uniform(-10, 10, size=2)
        axes = rng.uniform(8, 12, size=2) * scale
        center_i = (cy + offset[0], cx + offset[1])
        mask |= _ellipse(size, center_i, (axes[0], axes[1]), rng.uniform(0, math.pi))

    # Dark regions that are not nerve, kept clear of the annotated cluster
    keep_out = ndimage.binary_dilation(mask, iterations=4)
    distractors = np.zeros(size, dtype=bool)
    wanted = int(rng.integers(1, 3))
    for _ in range(200):
        if wanted == 0:
            break
        axes = rng.uniform(6, 10, size=2)
        spot = (rng.uniform(12, h - 12), rng.uniform(12, w - 12))
        region = _ellipse(size, spot, (axes[0], axes[1]), rng.uniform(0, math.pi))
        if not (region & keep_out).any():
            distractors |= region
            keep_out |= ndimage.binary_dilation(region, iterations=4)
            wanted -= 1

    field = ndimage.gaussian_filter(rng.standard_normal(size), sigma=12)
    field /= field.std() + 1e-12
    depth = np.linspace(0, math.pi * rng.uniform(1.5, 3.0), h)[:, None]
    background = 0.55 + 0.1 * field + 0.08 * np.cos(depth)
    dark = ndimage.gaussian_filter((mask | distractors).astype(float), sigma=1.5)
    speckle = rng.gamma(shape=4.0, scale=0.25, size=size)
    image = np.clip(background * (1 - 0.6 * dark) * speckle, 0.0, 1.0)
    return Sample(
        image=image.astype(np.float32)[None, None],
        mask=mask.astype(np.uint8),
        source=source,
        subject=subject,
    )


def gen_phantom_subjects(
    count: int, per_subject: int, rng: Rng, size: tuple[int, int] = IMAGE_SIZE
) -> list[SubjectSet]:
    """Generates synthetic ultrasound-like subjects.

    Every frame has a dark cluster of three to six overlapping ellipses (the
    mask) over a speckled, smoothly varying background, plus one or two dark
    distractor regions that are not part of the mask. Each subject has its own
    characteristic cluster position and scale, jittered per frame. Ellipse
    sizes keep every mask between 1% and 25% of a 128x128 frame.

    """
    if count < 1 or per_subject < 1:
        raise DomainError("Phantom generation needs at least one subject and one frame.")
    h, w = size
    subjects = []
    for subject in range(1, count + 1):
        center = (rng.uniform(0.28 * h, 0.72 * h), rng.uniform(0.28 * w, 0.72 * w))
        scale = rng.uniform(1.0, 1.15)
        frames = tuple(
            _phantom_frame(rng, center, scale, size, f"frame_{i:03d}.pgm", subject)
            for i in range(per_subject)
        )
        subjects.append(SubjectSet(subject, frames))
    return subjects
