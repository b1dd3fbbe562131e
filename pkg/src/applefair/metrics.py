"""Dice utility and subgroup fairness metrics (max disparity, SER, STD)."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

SER_EPS = 1e-8
DDOF = {"sample": 1, "population": 0}


class FairnessError(ValueError):
    pass


def dice(pred_mask, gt_mask) -> float:
    """Binary Dice ``2|P & G| / (|P| + |G|)``; two empty masks score 1.0."""
    p = np.asarray(pred_mask)
    g = np.asarray(gt_mask)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    p = p.astype(bool)
    g = g.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def multiclass_dice(pred_mask, gt_mask, num_classes: int) -> float:
    """Mean Dice over foreground classes 1..L-1."""
    p = np.asarray(pred_mask)
    g = np.asarray(gt_mask)
    return float(np.mean([dice(p == c, g == c) for c in range(1, num_classes)]))


@dataclass
class UtilityVector:
    values: list[float]  # NaN marks an empty subgroup
    counts: list[int]

    @property
    def K(self) -> int:
        return len(self.values)

    def populated(self) -> np.ndarray:
        v = np.asarray(self.values, dtype=float)
        return v[np.asarray(self.counts) > 0]


def subgroup_utilities(per_sample_scores: Iterable[tuple[float, int]], K: int) -> UtilityVector:
    sums = np.zeros(K)
    counts = np.zeros(K, dtype=int)
    for score, attr in per_sample_scores:
        if not 0 <= attr < K:
            raise FairnessError(f"attribute {attr} outside [0, {K})")
        sums[attr] += score
        counts[attr] += 1
    if counts.sum() == 0:
        raise FairnessError("all subgroups are empty")
    values = []
    for k in range(K):
        if counts[k] == 0:
            warnings.warn(f"subgroup {k} is empty; excluded from fairness metrics", stacklevel=2)
            values.append(float("nan"))
        else:
            values.append(float(sums[k] / counts[k]))
    return UtilityVector(values, counts.tolist())


@dataclass
class FairnessReport:
    delta: float
    ser: float
    std: float
    ddof: str
    mean_utility: float
    ser_infinite: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def fairness(u: UtilityVector, ddof: str = "sample") -> FairnessReport:
    if ddof not in DDOF:
        raise ValueError(f"ddof must be one of {sorted(DDOF)}")
    vals = u.populated()
    if len(vals) < 2:
        raise FairnessError(f"need at least 2 populated subgroups, got {len(vals)}")
    if np.any(vals < 0.0) or np.any(vals > 1.0):
        raise FairnessError(f"utilities must lie in [0, 1]: {vals.tolist()}")
    err = 1.0 - vals
    min_err = float(err.min())
    infinite = min_err < SER_EPS
    ser = float(err.max() / max(min_err, SER_EPS))
    return FairnessReport(
        delta=float(vals.max() - vals.min()),
        ser=math.inf if infinite else ser,
        std=float(np.std(vals, ddof=DDOF[ddof])),
        ddof=ddof,
        mean_utility=float(vals.mean()),
        ser_infinite=infinite,
    )


@dataclass
class MetricStat:
    mean: float
    std: float
    infinite: bool = False


def aggregate_runs(reports: Sequence[FairnessReport]) -> dict[str, MetricStat]:
    """Mean and sample std (0 for a single run) of each metric across repeats."""
    if not reports:
        raise FairnessError("no reports to aggregate")
    out = {}
    for name in ("mean_utility", "delta", "ser", "std"):
        vals = np.array([getattr(r, name) for r in reports], dtype=float)
        if name == "ser" and any(r.ser_infinite for r in reports):
            out[name] = MetricStat(math.inf, math.nan, infinite=True)
            continue
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out[name] = MetricStat(float(vals.mean()), sd)
    return out


def aggregate_values(values: Sequence[float]) -> MetricStat:
    vals = np.asarray(values, dtype=float)
    return MetricStat(float(vals.mean()), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0)
