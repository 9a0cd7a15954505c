"""Raster data model, synthetic dataset generator, splits, samplers and on-disk format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy import ndimage

RasterKind = Literal["image", "label", "probability"]

FORMAT_NAME = "ictseg-dataset"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class DatasetFormatError(Exception):
    """Base class for on-disk dataset problems."""


class MalformedManifestError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class PayloadShapeError(DatasetFormatError):
    pass


class MissingSliceError(DatasetFormatError):
    def __init__(self, path: Path):
        super().__init__(f"slice file missing: {path}")
        self.path = path


class SplitError(ValueError):
    pass


@dataclass(eq=False)
class Raster:
    """Dense H x W x C grid with physical spacing in mm.

    Images hold normalized intensities, label rasters hold integer class ids in a
    single channel, probability rasters hold one channel per class.
    """

    values: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)
    kind: RasterKind = "image"

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"raster values must be H x W x C with positive sizes, got {values.shape}")
        self.values = values
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 2 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be two positive numbers, got {self.spacing}")
        if self.kind == "label":
            if values.shape[2] != 1:
                raise ValueError("label rasters have exactly one channel")
            if not np.issubdtype(values.dtype, np.integer):
                raise ValueError("label rasters hold integer class ids")
            if values.size and values.min() < 0:
                raise ValueError("label values must be nonnegative")
        elif self.kind == "probability":
            if values.size and values.min() < 0:
                raise ValueError("probabilities must be nonnegative")
            if np.abs(values.sum(axis=2) - 1.0).max() > 1e-6:
                raise ValueError("probability channels must sum to 1")
        elif self.kind != "image":
            raise ValueError(f"unknown raster kind {self.kind!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.spacing == other.spacing
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )


@dataclass(eq=False)
class Volume:
    """Ordered stack of 2-D slices sharing shape and spacing.

    ``labels`` is None for volumes without annotations.
    """

    id: str
    images: list[Raster]
    labels: list[Raster] | None = None

    def __post_init__(self) -> None:
        if not self.images:
            raise ValueError(f"volume {self.id!r} has no slices")
        first = self.images[0]
        for r in self.images:
            if r.shape != first.shape or r.spacing != first.spacing:
                raise ValueError(f"volume {self.id!r} mixes slice shapes or spacings")
        if self.labels is not None:
            if len(self.labels) != len(self.images):
                raise ValueError(f"volume {self.id!r} has {len(self.labels)} labels for {len(self.images)} slices")
            for lab in self.labels:
                if lab.shape[:2] != first.shape[:2] or lab.spacing != first.spacing:
                    raise ValueError(f"volume {self.id!r} label/image geometry mismatch")

    @property
    def spacing(self) -> tuple[float, float]:
        return self.images[0].spacing

    def __len__(self) -> int:
        return len(self.images)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return self.id == other.id and self.images == other.images and self.labels == other.labels


@dataclass
class DatasetSplit:
    labelled: list[str]
    unlabelled: list[str]
    validation: list[str]
    test: list[str]
    seed: int
    label_fraction: float


@dataclass
class BatchPair:
    """A labelled mini-batch (images, labels) or an unlabelled pair (u_i, u_j)."""

    mode: Literal["labelled", "unlabelled"]
    first: list[Raster]
    second: list[Raster]

    def __post_init__(self) -> None:
        if len(self.first) != len(self.second):
            raise ValueError("batch halves differ in length")

    def __len__(self) -> int:
        return len(self.first)


def normalize_minmax(image: np.ndarray) -> np.ndarray:
    """Scale a slice to [0, 1]; constant slices map to zeros."""
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def volume_from_arrays(
    volume_id: str,
    images: np.ndarray,
    labels: np.ndarray | None = None,
    spacing: tuple[float, float] = (1.0, 1.0),
) -> Volume:
    """Converter hook for external data: S x H x W arrays to a normalized Volume.

    Reading NIfTI/DICOM is left to the caller; hand the decoded, resampled slice
    stack in here and write it out with :func:`write_dataset`.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ValueError("expected an S x H x W image stack")
    img_rasters = [
        Raster(normalize_minmax(s).astype(np.float32), spacing, "image") for s in images
    ]
    lab_rasters = None
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != images.shape:
            raise ValueError(f"label stack {labels.shape} does not match image stack {images.shape}")
        lab_rasters = [Raster(s.astype(np.uint8), spacing, "label") for s in labels]
    return Volume(volume_id, img_rasters, lab_rasters)


# --------------------------------------------------------------------------- #
# synthetic data
# --------------------------------------------------------------------------- #

_MAX_DRAWS = 1000


def _ellipse_mask(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    short = min(height, width)
    cy = rng.uniform(0.2, 0.8) * (height - 1)
    cx = rng.uniform(0.2, 0.8) * (width - 1)
    ry = max(2.0, rng.uniform(0.1, 0.28) * short)
    rx = max(2.0, rng.uniform(0.1, 0.28) * short)
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:height, 0:width]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _draw_label_map(rng: np.random.Generator, height: int, width: int, n_classes: int) -> np.ndarray:
    for _ in range(_MAX_DRAWS):
        label = np.zeros((height, width), dtype=np.uint8)
        for k in range(1, n_classes):
            label[_ellipse_mask(rng, height, width)] = k
        ok = True
        for k in range(1, n_classes):
            mask = label == k
            if mask.sum() < 9 or ndimage.label(mask)[1] != 1:
                ok = False
                break
        if ok:
            return label
    raise RuntimeError(f"could not place {n_classes - 1} separable ellipses on a {height}x{width} grid")


def _intensity_bands(rng: np.random.Generator, n_classes: int) -> np.ndarray:
    # background in [0, 0.25]; foreground classes split [0.35, 1.0] into disjoint bands
    levels = np.empty(n_classes)
    levels[0] = rng.uniform(0.0, 0.25)
    width = 0.65 / (n_classes - 1)
    for k in range(1, n_classes):
        lo = 0.35 + (k - 1) * width
        levels[k] = rng.uniform(lo, lo + 0.6 * width)
    return levels


# generator arguments for the desk-scale toy protocol: 200 training volumes after
# 2 validation and 20 test volumes are held out
TOY_DATASET = {
    "n_volumes": 222,
    "slices_per_volume": 1,
    "height": 64,
    "width": 64,
    "n_classes": 2,
    "noise_sigma": 0.6,
    "seed": 1,
}


def generate_synthetic_dataset(
    n_volumes: int,
    slices_per_volume: int,
    height: int,
    width: int,
    n_classes: int,
    noise_sigma: float,
    seed: int,
    spacing: tuple[float, float] = (1.0, 1.0),
) -> list[Volume]:
    """Ellipse phantoms, one filled ellipse per foreground class per slice.

    Each class is painted at its own intensity band, Gaussian noise is added and
    the slice is min-max normalized. Labels are the exact noise-free masks.
    """
    if n_volumes < 1 or slices_per_volume < 1:
        raise ValueError("n_volumes and slices_per_volume must be >= 1")
    if height < 8 or width < 8:
        raise ValueError(f"slices must be at least 8x8, got {height}x{width}")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2 (class 0 is background)")
    if n_classes > 256:
        raise ValueError("labels are stored as uint8; n_classes must be <= 256")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")

    rng = np.random.default_rng(seed)
    width_digits = max(3, len(str(n_volumes - 1)))
    volumes = []
    for v in range(n_volumes):
        images, labels = [], []
        for _ in range(slices_per_volume):
            label = _draw_label_map(rng, height, width, n_classes)
            image = _intensity_bands(rng, n_classes)[label]
            if noise_sigma > 0:
                image = image + rng.normal(0.0, noise_sigma, size=image.shape)
            images.append(Raster(normalize_minmax(image).astype(np.float32), spacing, "image"))
            labels.append(Raster(label, spacing, "label"))
        volumes.append(Volume(f"vol{v:0{width_digits}d}", images, labels))
    return volumes


# --------------------------------------------------------------------------- #
# splitting and sampling
# --------------------------------------------------------------------------- #


def make_split(
    volumes: Sequence[Volume],
    label_fraction: float,
    n_validation: int,
    n_test: int,
    seed: int,
) -> DatasetSplit:
    """Volume-level partition into labelled / unlabelled / validation / test."""
    if not 0.0 < label_fraction <= 1.0:
        raise SplitError(f"label_fraction must lie in (0, 1], got {label_fraction}")
    if n_validation < 0 or n_test < 0:
        raise SplitError("n_validation and n_test must be >= 0")
    n_train = len(volumes) - n_validation - n_test
    if n_train < 1:
        raise SplitError(
            f"{len(volumes)} volumes cannot cover {n_validation} validation + {n_test} test"
            f" + 1 training volume (short by {1 - n_train})"
        )
    ids = [v.id for v in volumes]
    if len(set(ids)) != len(ids):
        raise SplitError("volume ids are not unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    validation = shuffled[:n_validation]
    test = shuffled[n_validation : n_validation + n_test]
    train = shuffled[n_validation + n_test :]
    n_labelled = max(1, int(round(label_fraction * len(train))))
    by_id = {v.id: v for v in volumes}
    for vid in train[:n_labelled]:
        if by_id[vid].labels is None:
            raise SplitError(f"volume {vid} was chosen as labelled but has no annotations")
    return DatasetSplit(
        labelled=sorted(train[:n_labelled]),
        unlabelled=sorted(train[n_labelled:]),
        validation=sorted(validation),
        test=sorted(test),
        seed=seed,
        label_fraction=label_fraction,
    )


@dataclass
class SlicePool:
    """Slices of a split flattened into the two pools sampled during training.

    Labelled volumes contribute their images to the unlabelled pool as well.
    """

    labelled: list[tuple[Raster, Raster]] = field(default_factory=list)
    unlabelled: list[Raster] = field(default_factory=list)

    @classmethod
    def from_split(cls, split: DatasetSplit, volumes: Sequence[Volume]) -> "SlicePool":
        by_id = {v.id: v for v in volumes}
        pool = cls()
        for vid in split.labelled:
            vol = by_id[vid]
            pool.labelled.extend(zip(vol.images, vol.labels))
            pool.unlabelled.extend(vol.images)
        for vid in split.unlabelled:
            pool.unlabelled.extend(by_id[vid].images)
        return pool


def sample_batch(
    pool: SlicePool,
    mode: Literal["labelled", "unlabelled"],
    batch_size: int,
    rng: np.random.Generator,
) -> BatchPair:
    """Draw one mini-batch with replacement; advances ``rng``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if mode == "labelled":
        if not pool.labelled:
            raise ValueError("labelled pool is empty")
        idx = rng.integers(0, len(pool.labelled), size=batch_size)
        return BatchPair(
            "labelled",
            [pool.labelled[i][0] for i in idx],
            [pool.labelled[i][1] for i in idx],
        )
    if mode == "unlabelled":
        if not pool.unlabelled:
            raise ValueError("unlabelled pool is empty")
        idx_i = rng.integers(0, len(pool.unlabelled), size=batch_size)
        idx_j = rng.integers(0, len(pool.unlabelled), size=batch_size)
        return BatchPair(
            "unlabelled",
            [pool.unlabelled[i] for i in idx_i],
            [pool.unlabelled[i] for i in idx_j],
        )
    raise ValueError(f"unknown batch mode {mode!r}")


def stack_images(rasters: Sequence[Raster]) -> np.ndarray:
    """Rasters to an N x C x H x W array."""
    return np.stack([r.values for r in rasters]).transpose(0, 3, 1, 2)


def stack_labels(rasters: Sequence[Raster]) -> np.ndarray:
    """Label rasters to an N x H x W int64 array."""
    return np.stack([r.values[:, :, 0] for r in rasters]).astype(np.int64)


# --------------------------------------------------------------------------- #
# on-disk format: manifest.json + one little-endian raw file per slice
# --------------------------------------------------------------------------- #

_ENCODINGS = {"image": "<f4", "label": "|u1"}


def write_dataset(volumes: Sequence[Volume], directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for vol in volumes:
        h, w, c = vol.images[0].shape
        slices = []
        for s, img in enumerate(vol.images):
            item = {"image": f"{vol.id}/{s:04d}_image.raw"}
            _write_raw(directory / item["image"], img.values, _ENCODINGS["image"])
            if vol.labels is not None:
                item["label"] = f"{vol.id}/{s:04d}_label.raw"
                _write_raw(directory / item["label"], vol.labels[s].values, _ENCODINGS["label"])
            slices.append(item)
        entries.append(
            {"id": vol.id, "shape": [h, w, c], "spacing_mm": list(vol.spacing), "slices": slices}
        )
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "encoding": {"image": "float32 little-endian row-major", "label": "uint8 row-major"},
        "volumes": entries,
    }
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=1))
    return path


def _write_raw(path: Path, values: np.ndarray, dtype: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(values, dtype=dtype).tofile(path)


def _read_raw(path: Path, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    if not path.is_file():
        raise MissingSliceError(path)
    data = np.fromfile(path, dtype=dtype)
    if data.size != int(np.prod(shape)):
        raise PayloadShapeError(f"{path}: {data.size} values on disk, manifest shape {shape}")
    return data.reshape(shape)


def read_dataset(directory: str | Path) -> list[Volume]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise MalformedManifestError(f"no {MANIFEST} in {directory}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedManifestError(f"{path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise MalformedManifestError(f"{path}: not an {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: version {manifest.get('version')!r}, expected {FORMAT_VERSION}")
    volumes = []
    try:
        for entry in manifest["volumes"]:
            h, w, c = (int(x) for x in entry["shape"])
            spacing = tuple(float(x) for x in entry["spacing_mm"])
            images, labels = [], []
            for item in entry["slices"]:
                img = _read_raw(directory / item["image"], _ENCODINGS["image"], (h, w, c))
                images.append(Raster(img.astype(np.float32), spacing, "image"))
                if "label" in item:
                    lab = _read_raw(directory / item["label"], _ENCODINGS["label"], (h, w, 1))
                    labels.append(Raster(lab.astype(np.uint8), spacing, "label"))
            if labels and len(labels) != len(images):
                raise MalformedManifestError(f"volume {entry['id']}: some slices lack labels")
            volumes.append(Volume(str(entry["id"]), images, labels or None))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedManifestError(f"{path}: {exc}") from exc
    return volumes
