"""Synthetic segmentation datasets with an attribute-dependent appearance confound.

Every image holds one foreground shape. Shapes are drawn independently of
the attribute, so the mask distribution is identical across subgroups;
harder subgroups only see reduced contrast and extra noise.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DEFAULT_AGE_EDGES, AttributeSpec, Sample, SegDataset, write_image, write_mask

logger = logging.getLogger(__name__)

BASE_CONTRAST = (0.30, 0.45)
BASE_NOISE = 0.04
GAP_NOISE = 0.45  # extra noise std per unit of difficulty_gap
MIN_AREA, MAX_AREA = 0.01, 0.50


@dataclass
class SynthConfig:
    """Generator settings.

    ``attribute="sex"`` draws a binary attribute with P(M) = attribute_balance
    and degrades subgroup 1 by ``difficulty_gap``. ``attribute="age"`` draws
    one of ``len(age_probs)`` age bins and degrades bin k by
    ``difficulty_gap * k / (K - 1)``.
    """

    n_samples: int = 1000
    resolution: int = 64
    attribute_balance: float = 0.5
    difficulty_gap: float = 0.5
    shape: str = "ellipse"
    seed: int = 0
    attribute: str = "sex"
    age_probs: Optional[list[float]] = None
    age_edges: list[float] = field(default_factory=lambda: list(DEFAULT_AGE_EDGES))

    def __post_init__(self) -> None:
        if not 0.0 < self.attribute_balance < 1.0:
            raise ValueError(f"attribute_balance must lie in (0, 1), got {self.attribute_balance}")
        if self.difficulty_gap < 0:
            raise ValueError(f"difficulty_gap must be >= 0, got {self.difficulty_gap}")
        if self.resolution < 32:
            raise ValueError(f"resolution must be >= 32, got {self.resolution}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.shape not in ("ellipse", "blob"):
            raise ValueError(f"shape must be 'ellipse' or 'blob', got {self.shape!r}")
        if self.attribute not in ("sex", "age"):
            raise ValueError(f"attribute must be 'sex' or 'age', got {self.attribute!r}")
        if self.attribute == "age":
            k = len(self.age_edges) - 1
            if self.age_probs is None:
                self.age_probs = [1.0 / k] * k
            if len(self.age_probs) != k or any(p < 0 for p in self.age_probs):
                raise ValueError("age_probs needs one non-negative entry per age bin")
            total = float(sum(self.age_probs))
            self.age_probs = [p / total for p in self.age_probs]

    @property
    def attribute_spec(self) -> AttributeSpec:
        return AttributeSpec.sex() if self.attribute == "sex" else AttributeSpec.age(self.age_edges)

    def difficulty(self, group: int) -> float:
        if self.attribute == "sex":
            return self.difficulty_gap * group
        K = len(self.age_edges) - 1
        return self.difficulty_gap * group / max(K - 1, 1)


def _shape_mask(rng: np.random.Generator, res: int, family: str) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    while True:
        r1, r2 = rng.uniform(0.10, 0.28, size=2) * res
        theta = rng.uniform(0, np.pi)
        margin = max(r1, r2) * (1.3 if family == "blob" else 1.0) + 1
        cy, cx = rng.uniform(margin, res - margin, size=2)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        rho = np.sqrt((u / r1) ** 2 + (v / r2) ** 2)
        if family == "blob":
            phi = np.arctan2(v, u)
            amps = rng.uniform(0.0, 0.15, size=3)
            phases = rng.uniform(0, 2 * np.pi, size=3)
            wobble = 1.0 + sum(a * np.cos((k + 2) * phi + p) for k, (a, p) in enumerate(zip(amps, phases)))
            rho = rho / wobble
        mask = rho <= 1.0
        frac = mask.mean()
        if MIN_AREA <= frac <= MAX_AREA:
            return mask


def _render(rng: np.random.Generator, mask: np.ndarray, difficulty: float) -> np.ndarray:
    res = mask.shape[0]
    background = rng.uniform(0.25, 0.45)
    contrast = rng.uniform(*BASE_CONTRAST) * max(1.0 - difficulty, 0.0)
    # smooth illumination gradient shared by both regions
    gy, gx = rng.uniform(-0.08, 0.08, size=2)
    ramp = np.linspace(-0.5, 0.5, res)
    image = background + gy * ramp[:, None] + gx * ramp[None, :] + contrast * mask
    image = image + rng.normal(0.0, BASE_NOISE + GAP_NOISE * difficulty, size=mask.shape)
    return np.clip(image, 0.0, 1.0)[None].astype(np.float32)


def _draw_attribute(rng: np.random.Generator, cfg: SynthConfig) -> tuple[int, str, float]:
    """Returns (group, sex code, age)."""
    if cfg.attribute == "sex":
        group = int(rng.random() < cfg.attribute_balance)
        age = float(rng.integers(0, 100))
        return group, "FM"[group], age
    group = int(rng.choice(len(cfg.age_probs), p=cfg.age_probs))
    lo, hi = cfg.age_edges[group], cfg.age_edges[group + 1]
    age = float(rng.integers(int(lo), int(hi)))
    sex = "FM"[int(rng.random() < 0.5)]
    return group, sex, age


def generate(cfg: SynthConfig, out_root: Optional[str | Path] = None) -> SegDataset:
    """Generate a dataset; when ``out_root`` is given it is also written to disk.

    Each sample has its own RNG stream derived from ``(seed, index)``.
    Returned images are quantized to 8 bits so they match what
    ``load_dataset`` reads back from the PNG files.
    """
    spec = cfg.attribute_spec
    samples = []
    rows = []
    width = len(str(cfg.n_samples - 1))
    for i in range(cfg.n_samples):
        rng = np.random.default_rng([cfg.seed, i])
        group, sex, age = _draw_attribute(rng, cfg)
        shape_rng, pixel_rng = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(2))
        mask = _shape_mask(shape_rng, cfg.resolution, cfg.shape)
        image = _render(pixel_rng, mask, cfg.difficulty(group))
        image = np.rint(image * 255.0).astype(np.float32) / 255.0
        sid = f"s{i:0{width}d}"
        raw = sex if cfg.attribute == "sex" else age
        samples.append(Sample(sid, image, mask.astype(np.int64), group, raw))
        rows.append((sid, sex, int(age)))

    ds = SegDataset(samples, K=spec.K, L=2, attribute_name=cfg.attribute, subgroup_labels=spec.labels)
    if out_root is not None:
        write_dataset(ds, rows, Path(out_root), cfg)
    return ds


def write_dataset(ds: SegDataset, rows, root: Path, cfg: SynthConfig) -> None:
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        write_image(root / "images" / f"{s.id}.png", s.image)
        write_mask(root / "masks" / f"{s.id}.png", s.mask)
    with open(root / "metadata.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "sex", "age"])
        writer.writerows(rows)
    (root / "synth_manifest.json").write_text(json.dumps(asdict(cfg), indent=2))
    logger.info("wrote %d samples to %s", len(ds), root)
