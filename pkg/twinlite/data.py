"""
Datasets: ingestion, preprocessing, synthetic road scenes and batching.

A dataset directory holds one sub-directory per split::

    root/train/images/<id>.png
    root/train/da_masks/<id>.png
    root/train/lane_masks/<id>.png
    root/val/...

Images are 8-bit RGB, masks 8-bit single channel with 0 for background and
255 for foreground. PNG, PPM and PGM files are accepted.

.. highlight:: python
.. code-block:: python

    from twinlite import data

    samples = data.synth_generate(20, seed=7, size=(64, 64))
    data.write_dataset(samples[:18], "synthetic", "train")
    index = data.load_dataset("synthetic", "train")
    train_samples = data.read_samples(index, data.PreprocessConfig(64, 64))
"""
import logging
import math
import os
import typing

import imageio.v2 as imageio
import numpy as np
import scipy.ndimage
from PIL import Image, ImageDraw

from twinlite.concurrency import prefetch
from twinlite.errors import ConfigError, DatasetError, TwinLiteValidationError
from twinlite.model import SINGLE_HEAD, TWO_HEADS
from twinlite.poolchain import PoolChain
from twinlite.tensor import Tensor

logger = logging.getLogger(__name__)

TRAIN = "train"
VAL = "val"
SPLITS = (TRAIN, VAL)

IMAGE_DIR = "images"
DA_DIR = "da_masks"
LANE_DIR = "lane_masks"
EXTENSIONS = (".png", ".ppm", ".pgm")

# Raw drivable-area label values before merging.
RAW_BACKGROUND = 0
RAW_DIRECT = 1
RAW_ALTERNATIVE = 2

# Lane dilation extents are given for images of this width.
REFERENCE_WIDTH = 640

# Share of generated samples that go to the validation split.
VAL_FRACTION = 0.1


class Sample(typing.NamedTuple):
    """One image with its two binary masks."""

    id: str
    image: np.ndarray  # float32, 3 x H x W, values in [0, 1]
    da_mask: np.ndarray  # uint8, H x W, values in {0, 1}
    lane_mask: np.ndarray  # uint8, H x W, values in {0, 1}

    @property
    def size(self) -> typing.Tuple[int, int]:
        """``(width, height)``."""
        return self.image.shape[2], self.image.shape[1]

    def validate(self) -> "Sample":
        """
        Raises:
            DatasetError: If shapes disagree or a mask is not binary.
        """
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DatasetError(f"{self.id}: image must be 3 x H x W, got {self.image.shape}")
        for label, mask in (("drivable", self.da_mask), ("lane", self.lane_mask)):
            if mask.shape != self.image.shape[1:]:
                raise DatasetError(
                    f"{self.id}: {label} mask is {mask.shape}, image is {self.image.shape[1:]}"
                )
            if mask.size and mask.max() > 1:
                raise DatasetError(f"{self.id}: {label} mask is not binary")
        return self


class DatasetIndex(typing.NamedTuple):
    """The sorted sample ids of one split and where their files live."""

    root: str
    split: str
    ids: typing.Tuple[str, ...]
    paths: typing.Tuple[typing.Tuple[str, str, str], ...]

    def __len__(self) -> int:
        return len(self.ids)


class PreprocessConfig(typing.NamedTuple):
    """Resize target and lane dilation.

    `lane_dilation` is the extent of the square structuring element used on
    training lanes (8 gives a 9x9 element). With `scale_dilation` the extent is
    read as a value for 640-pixel-wide images and scaled to `width`, rounding
    down to an even number.
    """

    width: int = 640
    height: int = 360
    lane_dilation: int = 8
    dilate_train: bool = True
    scale_dilation: bool = False

    def validate(self) -> "PreprocessConfig":
        """
        Raises:
            ConfigError: On a size not divisible by 8 or a negative extent.
        """
        if self.width <= 0 or self.height <= 0 or self.width % 8 or self.height % 8:
            raise ConfigError(
                f"target size {self.width}x{self.height} must be positive and divisible by 8"
            )
        if self.lane_dilation < 0:
            raise ConfigError(f"lane dilation must be >= 0, got {self.lane_dilation}")
        return self

    @property
    def effective_dilation(self) -> int:
        """The extent actually applied to training lanes."""
        if not self.scale_dilation:
            return self.lane_dilation
        return 2 * math.floor(self.lane_dilation * self.width / REFERENCE_WIDTH / 2)

    def dilates(self, split: str) -> bool:
        """Whether samples of `split` get their lanes dilated. Validation never does."""
        return split == TRAIN and self.dilate_train and self.effective_dilation > 0


class Batch(typing.NamedTuple):
    """Stacked samples ready for the model."""

    ids: typing.Tuple[str, ...]
    images: Tensor
    targets: typing.Tuple[Tensor, ...]
    da_masks: np.ndarray
    lane_masks: np.ndarray


def parse_size(text: str) -> typing.Tuple[int, int]:
    """
    Parse ``"WxH"``.

    Raises:
        ConfigError: If the text is malformed or a side is not divisible by 8.
    """
    try:
        width, height = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"size must look like 64x64, got {text!r}") from None
    if width <= 0 or height <= 0 or width % 8 or height % 8:
        raise ConfigError(f"size {width}x{height} must be positive and divisible by 8")
    return width, height


# Ingestion


def _find(directory: str, sample_id: str) -> typing.Optional[str]:
    for extension in EXTENSIONS:
        path = os.path.join(directory, sample_id + extension)
        if os.path.isfile(path):
            return path
    return None


def _ids_in(directory: str) -> typing.Set[str]:
    if not os.path.isdir(directory):
        return set()
    return {
        os.path.splitext(name)[0]
        for name in os.listdir(directory)
        if os.path.splitext(name)[1].lower() in EXTENSIONS
    }


def load_dataset(
    root: str, split: str, config: typing.Optional[PreprocessConfig] = None
) -> DatasetIndex:
    """
    Index one split of a dataset directory.

    Args:
        root: The dataset root.
        split: ``"train"`` or ``"val"``.
        config: Validated up front when given.

    Returns:
        An index sorted by sample id. A split with no images gives an empty index.

    Raises:
        DatasetError: If the root is missing, a mask has no image (or the other
            way round), or an image cannot be decoded. Messages name the id.
    """
    if config is not None:
        config.validate()
    if split not in SPLITS:
        raise DatasetError(f"split must be one of {SPLITS}, got {split!r}")
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root!r} does not exist")
    base = os.path.join(root, split)
    directories = [os.path.join(base, name) for name in (IMAGE_DIR, DA_DIR, LANE_DIR)]
    image_ids = _ids_in(directories[0])
    for directory in directories[1:]:
        orphans = sorted(_ids_in(directory) - image_ids)
        if orphans:
            raise DatasetError(
                f"{orphans[0]}: mask in {directory} has no matching image"
            )
    ids = sorted(image_ids)
    paths = []
    for sample_id in ids:
        found = [_find(directory, sample_id) for directory in directories]
        for directory, path in zip(directories[1:], found[1:]):
            if path is None:
                raise DatasetError(f"{sample_id}: missing mask in {directory}")
        try:
            with Image.open(found[0]) as image:
                image.verify()
        except Exception as exc:
            raise DatasetError(f"{sample_id}: unreadable image {found[0]}: {exc}") from exc
        paths.append(tuple(found))
    logger.info("indexed %d %s samples under %s", len(ids), split, root)
    return DatasetIndex(root=root, split=split, ids=tuple(ids), paths=tuple(paths))


def read_image(path: str, sample_id: str) -> np.ndarray:
    try:
        array = np.asarray(imageio.imread(path))
    except Exception as exc:
        raise DatasetError(f"{sample_id}: cannot read {path}: {exc}") from exc
    if array.ndim == 2:
        array = np.stack([array] * 3, axis=-1)
    return (array[..., :3].astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def _read_mask(path: str, sample_id: str) -> np.ndarray:
    try:
        array = np.asarray(imageio.imread(path))
    except Exception as exc:
        raise DatasetError(f"{sample_id}: cannot read {path}: {exc}") from exc
    if array.ndim == 3:
        array = array[..., 0]
    return (array > 127).astype(np.uint8)


def read_sample(index: DatasetIndex, position: int) -> Sample:
    """Decode the sample at `position` of `index` at its stored size."""
    sample_id = index.ids[position]
    image_path, da_path, lane_path = index.paths[position]
    return Sample(
        id=sample_id,
        image=read_image(image_path, sample_id),
        da_mask=_read_mask(da_path, sample_id),
        lane_mask=_read_mask(lane_path, sample_id),
    ).validate()


# Preprocessing


def merge_drivable(raw: np.ndarray) -> np.ndarray:
    """
    Collapse direct (1) and alternative (2) drivable labels into one class.

    Raises:
        DatasetError: On a value other than 0, 1 or 2.
    """
    raw = np.asarray(raw)
    unknown = ~np.isin(raw, (RAW_BACKGROUND, RAW_DIRECT, RAW_ALTERNATIVE))
    if unknown.any():
        raise DatasetError(
            f"unknown drivable label value {raw[unknown].flat[0]}; expected 0, 1 or 2"
        )
    return (raw != RAW_BACKGROUND).astype(np.uint8)


def dilate_lane(mask: np.ndarray, extent: int) -> np.ndarray:
    """
    Grow a binary lane mask with a square element of side ``extent + 1``.

    An extent of 8 turns a single pixel into a 9x9 block, clipped at the borders.
    """
    if extent < 0:
        raise TwinLiteValidationError(f"dilation extent must be >= 0, got {extent}")
    mask = np.asarray(mask).astype(bool)
    if extent == 0 or not mask.any():
        return mask.astype(np.uint8)
    element = np.ones((extent + 1, extent + 1), dtype=bool)
    return scipy.ndimage.binary_dilation(mask, structure=element).astype(np.uint8)


def _resize_plane(plane: np.ndarray, width: int, height: int, resample) -> np.ndarray:
    return np.asarray(Image.fromarray(plane).resize((width, height), resample=resample))


def resize_pair(sample: Sample, width: int, height: int) -> Sample:
    """
    Resize an image bilinearly and its masks by nearest neighbour.

    A sample already at the target size comes back as an unchanged copy.

    Raises:
        TwinLiteValidationError: On a non-positive target.
    """
    if width <= 0 or height <= 0:
        raise TwinLiteValidationError(f"resize target must be positive, got {width}x{height}")
    if sample.size == (width, height):
        return Sample(
            sample.id, sample.image.copy(), sample.da_mask.copy(), sample.lane_mask.copy()
        )
    image = np.stack(
        [
            _resize_plane(channel, width, height, Image.Resampling.BILINEAR)
            for channel in sample.image.astype(np.float32)
        ]
    )
    return Sample(
        id=sample.id,
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        da_mask=_resize_plane(sample.da_mask, width, height, Image.Resampling.NEAREST),
        lane_mask=_resize_plane(sample.lane_mask, width, height, Image.Resampling.NEAREST),
    )


def preprocess(sample: Sample, config: PreprocessConfig, split: str) -> Sample:
    """Resize to the target size, then dilate lanes for the training split."""
    sample = resize_pair(sample, config.width, config.height)
    if config.dilates(split):
        sample = sample._replace(lane_mask=dilate_lane(sample.lane_mask, config.effective_dilation))
    return sample


def read_samples(
    index: DatasetIndex,
    config: PreprocessConfig,
    *,
    split: typing.Optional[str] = None,
    max_workers: typing.Optional[int] = None,
) -> typing.List[Sample]:
    """
    Decode and preprocess every sample of `index`, in index order.

    Args:
        index: From :func:`load_dataset`.
        config: Resize target and lane dilation.
        split: Preprocess as this split instead of the index's own; pass
            ``"val"`` to score a training split on thin labels.
        max_workers: Threads per stage.
    """
    config.validate()
    split = split or index.split
    samples = (
        PoolChain()
        .add_threadpool(lambda position: read_sample(index, position), name="read", max_workers=max_workers)
        .add_threadpool(lambda sample: preprocess(sample, config, split), name="preprocess", max_workers=max_workers)
    ).execute_eager(range(len(index)))
    logger.info("loaded %d samples from %s/%s", len(samples), index.root, index.split)
    return samples


# Synthetic road scenes


def _render_scene(seed: np.random.SeedSequence, sample_id: str, width: int, height: int) -> Sample:
    rng = np.random.default_rng(seed)
    horizon = rng.uniform(0.35, 0.55) * height
    bottom_center = rng.uniform(0.4, 0.6) * width
    bottom_half = rng.uniform(0.5, 0.9) * width / 2
    top_center = bottom_center + rng.uniform(-0.1, 0.1) * width
    top_half = rng.uniform(0.05, 0.2) * width / 2
    bottom = height - 1
    left_bottom, right_bottom = bottom_center - bottom_half, bottom_center + bottom_half
    left_top, right_top = top_center - top_half, top_center + top_half

    road = Image.new("L", (width, height), 0)
    ImageDraw.Draw(road).polygon(
        [(left_bottom, bottom), (right_bottom, bottom), (right_top, horizon), (left_top, horizon)],
        fill=1,
    )
    da_mask = np.asarray(road, dtype=np.uint8)

    lanes = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(lanes)
    lane_count = int(rng.integers(1, 4))
    positions = np.sort(rng.uniform(0.15, 0.85, size=lane_count))
    for position in positions:
        start = (left_bottom + position * (right_bottom - left_bottom), bottom)
        end = (left_top + position * (right_top - left_top), horizon + 1)
        bend = rng.uniform(-0.03, 0.03) * width
        middle = ((start[0] + end[0]) / 2 + bend, (start[1] + end[1]) / 2)
        draw.line([start, middle, end], fill=1, width=int(rng.integers(1, 3)))
    lane_mask = np.asarray(lanes, dtype=np.uint8) & da_mask

    rows = np.linspace(0.0, 1.0, height, dtype=np.float64)[:, None, None]
    sky = rng.uniform(0.5, 0.9, size=3) * (1 - 0.3 * rows)
    ground = rng.uniform(0.15, 0.5, size=3) + rng.normal(0, 0.05, size=(height, width, 1))
    image = np.where(rows * height < horizon, sky, ground)
    asphalt = rng.uniform(0.2, 0.4) + rng.normal(0, 0.03, size=(height, width, 1))
    image = np.where(da_mask[..., None] > 0, asphalt, image)
    paint = np.array([0.95, 0.95, 0.95]) if rng.random() < 0.5 else np.array([0.95, 0.8, 0.2])
    image = np.where(lane_mask[..., None] > 0, paint, image)
    image = np.clip(image * rng.uniform(0.6, 1.2), 0.0, 1.0)
    image = np.round(image * 255.0) / 255.0

    return Sample(
        id=sample_id,
        image=image.transpose(2, 0, 1).astype(np.float32),
        da_mask=da_mask.copy(),
        lane_mask=lane_mask,
    ).validate()


def synth_generate(
    count: int,
    seed: int,
    size: typing.Tuple[int, int] = (64, 64),
    *,
    max_workers: typing.Optional[int] = None,
) -> typing.List[Sample]:
    """
    Render `count` synthetic road scenes.

    Each scene has a road trapezoid (the drivable mask) and one to three thin
    lane polylines inside it, over a textured background with random lighting.
    Every sample draws from its own child of ``SeedSequence(seed)``, so the
    output is bitwise deterministic for ``(count, seed, size)``.

    Args:
        count: Number of samples.
        seed: Master seed.
        size: ``(width, height)``, both divisible by 8.
        max_workers: Rendering threads.
    """
    width, height = size
    if width <= 0 or height <= 0 or width % 8 or height % 8:
        raise ConfigError(f"size {width}x{height} must be positive and divisible by 8")
    if count < 0:
        raise TwinLiteValidationError(f"count must be >= 0, got {count}")
    children = np.random.SeedSequence(seed).spawn(count)
    jobs = [(child, f"{position:06d}") for position, child in enumerate(children)]
    samples = (
        PoolChain().add_threadpool(
            lambda job: _render_scene(job[0], job[1], width, height),
            name="render",
            max_workers=max_workers,
        )
    ).execute_eager(jobs)
    logger.info("rendered %d synthetic %dx%d samples from seed %d", count, width, height, seed)
    return samples


def split_counts(count: int) -> typing.Tuple[int, int]:
    """
    Train and validation sizes for `count` generated samples (90/10).

    The validation share rounds half up and holds at least one sample once
    there are two to split.
    """
    val = math.floor(count * VAL_FRACTION + 0.5)
    if count >= 2:
        val = max(val, 1)
    return count - val, val


def write_dataset(samples: typing.Sequence[Sample], root: str, split: str):
    """Write samples as PNG files in the dataset layout."""
    if split not in SPLITS:
        raise DatasetError(f"split must be one of {SPLITS}, got {split!r}")
    directories = [os.path.join(root, split, name) for name in (IMAGE_DIR, DA_DIR, LANE_DIR)]
    for directory in directories:
        os.makedirs(directory, exist_ok=True)
    for sample in samples:
        image = np.round(sample.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        imageio.imwrite(os.path.join(directories[0], sample.id + ".png"), image)
        imageio.imwrite(os.path.join(directories[1], sample.id + ".png"), sample.da_mask * 255)
        imageio.imwrite(os.path.join(directories[2], sample.id + ".png"), sample.lane_mask * 255)
    logger.info("wrote %d samples to %s/%s", len(samples), root, split)


# Batching


def one_hot(mask: np.ndarray, classes: int) -> np.ndarray:
    """``N, H, W`` class indices to ``N, C, H, W`` float32 indicators."""
    return (mask[:, None, :, :] == np.arange(classes).reshape(1, -1, 1, 1)).astype(np.float32)


def combined_mask(da_mask: np.ndarray, lane_mask: np.ndarray) -> np.ndarray:
    """Background 0, drivable 1, lane 2; lane pixels win where both are set."""
    combined = da_mask.astype(np.int64)
    combined[lane_mask > 0] = 2
    return combined


def collate(samples: typing.Sequence[Sample], head_mode: str = TWO_HEADS) -> Batch:
    """Stack samples into a batch with one-hot targets for each head."""
    if head_mode not in (TWO_HEADS, SINGLE_HEAD):
        raise ConfigError(f"unknown head mode {head_mode!r}")
    da = np.stack([sample.da_mask for sample in samples])
    lane = np.stack([sample.lane_mask for sample in samples])
    if head_mode == TWO_HEADS:
        targets = (Tensor(one_hot(da, 2)), Tensor(one_hot(lane, 2)))
    else:
        targets = (Tensor(one_hot(combined_mask(da, lane), 3)),)
    return Batch(
        ids=tuple(sample.id for sample in samples),
        images=Tensor(np.stack([sample.image for sample in samples])),
        targets=targets,
        da_masks=da,
        lane_masks=lane,
    )


def epoch_order(count: int, seed: int, epoch: int) -> np.ndarray:
    """The shuffled sample order of one epoch; a function of ``(seed, epoch)`` only."""
    return np.random.default_rng([seed, epoch]).permutation(count)


def batch_iter(
    samples: typing.Sequence[Sample],
    batch_size: int,
    *,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
    head_mode: str = TWO_HEADS,
) -> typing.Iterator[Batch]:
    """
    Yield batches covering every sample exactly once.

    The next batch is stacked in a background thread while the current one is
    consumed; delivery order is the serial order. The last batch may be short.

    Raises:
        TwinLiteValidationError: If `batch_size` is below 1.
    """
    if batch_size < 1:
        raise TwinLiteValidationError(f"batch size must be >= 1, got {batch_size}")
    order = epoch_order(len(samples), seed, epoch) if shuffle else np.arange(len(samples))
    chunks = [order[start : start + batch_size] for start in range(0, len(order), batch_size)]
    return prefetch(lambda chunk: collate([samples[i] for i in chunk], head_mode), chunks)
