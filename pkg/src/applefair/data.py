"""Dataset abstraction, sensitive-attribute encoding and on-disk ingestion.

On-disk layout shared by real and synthetic datasets::

    root/images/<id>.png
    root/masks/<id>.png        # pixel value = class id
    root/metadata.csv          # header: id,sex,age
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

SEX_CODES = {"F": 0, "M": 1}
DEFAULT_AGE_EDGES = (0.0, 20.0, 40.0, 60.0, 80.0, 100.0)


class DatasetError(ValueError):
    """Raised when a dataset on disk is malformed or inconsistent."""


class AttributeRangeError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSpec:
    """How a metadata column maps onto subgroup ids.

    ``categorical`` uses ``categories`` (value -> id) and ``binned-numeric``
    uses ``bins`` as ordered edges, giving ``len(bins) - 1`` subgroups.
    """

    name: str
    kind: str = "categorical"
    bins: tuple[float, ...] = ()
    categories: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("categorical", "binned-numeric"):
            raise ValueError(f"unknown attribute kind {self.kind!r}")
        if self.kind == "binned-numeric":
            if len(self.bins) < 2:
                raise ValueError("binned-numeric attribute needs at least two edges")
            if any(b <= a for a, b in zip(self.bins, self.bins[1:])):
                raise ValueError(f"bin edges must be strictly increasing: {self.bins}")
        elif not self.categories:
            raise ValueError("categorical attribute needs categories")

    @property
    def K(self) -> int:
        if self.kind == "binned-numeric":
            return len(self.bins) - 1
        return len(self.categories)

    @property
    def labels(self) -> list[str]:
        if self.kind == "categorical":
            return list(self.categories)
        return [f"{_fmt(a)}-{_fmt(b)}" for a, b in zip(self.bins, self.bins[1:])]

    @classmethod
    def sex(cls) -> "AttributeSpec":
        return cls(name="sex", kind="categorical", categories=("F", "M"))

    @classmethod
    def age(cls, edges: Sequence[float] = DEFAULT_AGE_EDGES) -> "AttributeSpec":
        return cls(name="age", kind="binned-numeric", bins=tuple(float(e) for e in edges))

    @classmethod
    def for_name(cls, name: str) -> "AttributeSpec":
        if name == "sex":
            return cls.sex()
        if name == "age":
            return cls.age()
        raise ValueError(f"no default attribute spec for {name!r}")


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else str(x)


def bin_attribute(value: float, spec: AttributeSpec) -> int:
    """Map a numeric value to its bin index.

    Bins are half-open ``[edge_k, edge_k+1)`` except the last one, which is
    closed so that the final edge itself is in range.
    """
    if spec.kind != "binned-numeric":
        raise ValueError(f"attribute {spec.name!r} is not binned-numeric")
    edges = spec.bins
    v = float(value)
    if math.isnan(v) or v < edges[0] or v > edges[-1]:
        raise AttributeRangeError(
            f"value {value!r} outside [{edges[0]}, {edges[-1]}] for attribute {spec.name!r}"
        )
    if v == edges[-1]:
        return len(edges) - 2
    return int(np.searchsorted(np.asarray(edges), v, side="right")) - 1


def encode_attribute(raw: str, spec: AttributeSpec) -> int:
    if spec.kind == "categorical":
        try:
            return spec.categories.index(raw.strip())
        except ValueError:
            raise DatasetError(
                f"unparseable {spec.name!r} value {raw!r}; expected one of {spec.categories}"
            ) from None
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise DatasetError(f"unparseable {spec.name!r} value {raw!r}") from None
    return bin_attribute(value, spec)


@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray  # float32, C x H x W, in [0, 1]
    mask: np.ndarray  # int64, H x W
    attribute: int
    raw_attribute: Optional[object] = None


@dataclass
class SegDataset:
    samples: list[Sample]
    K: int
    L: int
    attribute_name: str
    subgroup_labels: list[str]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.subgroup_labels) != self.K:
            raise ValueError("subgroup_labels must have K entries")
        for s in self.samples:
            if s.image.shape[1:] != s.mask.shape:
                raise ValueError(f"sample {s.id}: image and mask spatial dims differ")
            if not 0 <= s.attribute < self.K:
                raise ValueError(f"sample {s.id}: attribute {s.attribute} not in [0, {self.K})")
            if s.mask.size and (s.mask.min() < 0 or s.mask.max() >= self.L):
                raise ValueError(f"sample {s.id}: mask values outside [0, {self.L})")
        counts = self.counts()
        for k, c in enumerate(counts):
            if c == 0:
                logger.warning("subgroup %d (%s) is empty", k, self.subgroup_labels[k])

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def attributes(self) -> np.ndarray:
        return np.array([s.attribute for s in self.samples], dtype=np.int64)

    def counts(self) -> list[int]:
        return np.bincount(self.attributes, minlength=self.K).tolist() if self.samples else [0] * self.K

    def subgroup_indices(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.K)]
        for i, s in enumerate(self.samples):
            out[s.attribute].append(i)
        return out

    def subset(self, indices: Sequence[int]) -> "SegDataset":
        return SegDataset(
            samples=[self.samples[i] for i in indices],
            K=self.K,
            L=self.L,
            attribute_name=self.attribute_name,
            subgroup_labels=list(self.subgroup_labels),
        )

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Stacked (images, masks, attributes); computed once and cached."""
        if "tensors" not in self._cache:
            if not self.samples:
                raise DatasetError("empty dataset")
            images = torch.from_numpy(np.stack([s.image for s in self.samples]).astype(np.float32))
            masks = torch.from_numpy(np.stack([s.mask for s in self.samples]).astype(np.int64))
            attrs = torch.from_numpy(self.attributes)
            self._cache["tensors"] = (images, masks, attrs)
        return self._cache["tensors"]

    @property
    def in_channels(self) -> int:
        return int(self.samples[0].image.shape[0])

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.samples[0].mask.shape)  # type: ignore[return-value]


def read_image(path: Path, resolution: Optional[int] = None) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "I;16", "I"):
            im = im.convert("RGB")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im)
    # normalize by the container's maximum value
    scale = float(np.iinfo(arr.dtype).max) if np.issubdtype(arr.dtype, np.integer) else 1.0
    arr = arr.astype(np.float32) / scale
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def read_mask(path: Path, resolution: Optional[int] = None) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            im = im.convert("L")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.NEAREST)
        return np.asarray(im).astype(np.int64)


def write_image(path: Path, image: np.ndarray) -> None:
    """Write a C x H x W float image in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG")


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path, format="PNG")


def load_dataset(
    root_path: str | Path,
    attribute_name: str,
    spec: Optional[AttributeSpec] = None,
    resolution: Optional[int] = 256,
    num_classes: Optional[int] = None,
) -> SegDataset:
    """Load a dataset from the standard directory layout.

    Samples are ordered by id. ``num_classes`` defaults to one more than the
    largest mask value found. Any inconsistency raises ``DatasetError``.
    """
    root = Path(root_path)
    spec = spec or AttributeSpec.for_name(attribute_name)
    if spec.name != attribute_name:
        raise ValueError(f"spec is for {spec.name!r}, not {attribute_name!r}")
    meta_path = root / "metadata.csv"
    if not meta_path.is_file():
        raise DatasetError(f"missing {meta_path}")
    with open(meta_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "id" not in reader.fieldnames:
            raise DatasetError(f"{meta_path}: header must contain 'id'")
        if attribute_name not in reader.fieldnames:
            raise DatasetError(f"{meta_path}: no column {attribute_name!r}")
        rows = {}
        for row in reader:
            sid = row["id"].strip()
            if sid in rows:
                raise DatasetError(f"duplicate metadata id {sid!r}")
            rows[sid] = row

    image_ids = {p.stem for p in (root / "images").glob("*.png")}
    missing_meta = sorted(image_ids - rows.keys())
    if missing_meta:
        raise DatasetError(f"images without metadata rows: {missing_meta[:5]}")
    missing_img = sorted(rows.keys() - image_ids)
    if missing_img:
        raise DatasetError(f"metadata ids without images: {missing_img[:5]}")

    samples = []
    for sid in sorted(rows):
        mask_path = root / "masks" / f"{sid}.png"
        if not mask_path.is_file():
            raise DatasetError(f"missing mask for image id {sid!r}")
        raw = rows[sid][attribute_name]
        try:
            attr = encode_attribute(raw, spec)
        except AttributeRangeError as exc:
            raise DatasetError(f"sample {sid!r}: {exc}") from None
        image = read_image(root / "images" / f"{sid}.png", resolution)
        mask = read_mask(mask_path, resolution)
        if image.shape[1:] != mask.shape:
            raise DatasetError(f"sample {sid!r}: image {image.shape[1:]} vs mask {mask.shape}")
        raw_value: object = raw
        if spec.kind == "binned-numeric":
            raw_value = float(raw)
        samples.append(Sample(sid, image, mask, attr, raw_value))

    if not samples:
        raise DatasetError(f"no samples under {root}")
    L = num_classes or int(max(s.mask.max() for s in samples)) + 1
    return SegDataset(samples, K=spec.K, L=max(L, 2), attribute_name=attribute_name,
                      subgroup_labels=spec.labels)


def split_dataset(ds: SegDataset, ratio: float, seed: int) -> tuple[SegDataset, SegDataset]:
    """Stratified split; each subgroup is shuffled and cut independently.

    Per subgroup the test share is ``floor((1 - ratio) * n)`` and the rest
    goes to train. Subgroups with fewer than two samples stay in train.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for k, idx in enumerate(ds.subgroup_indices()):
        n = len(idx)
        if n == 0:
            continue
        if n < 2:
            warnings.warn(f"subgroup {k} has {n} sample(s); placed entirely in train", stacklevel=2)
            train_idx.extend(idx)
            continue
        perm = rng.permutation(n)
        n_test = int(math.floor((1.0 - ratio) * n + 1e-9))
        test_idx.extend(idx[j] for j in perm[:n_test])
        train_idx.extend(idx[j] for j in perm[n_test:])
    train_idx.sort()
    test_idx.sort()
    return ds.subset(train_idx), ds.subset(test_idx)
