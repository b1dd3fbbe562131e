import csv
import sys
from pathlib import Path

import numpy as np
import pytest

from applefair.data import Sample, SegDataset, write_image, write_mask


def write_fixture(root: Path, rows, res: int = 8, skip_mask=()):
    """Write a tiny dataset in the standard layout; ``rows`` are (id, sex, age)."""
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for sid, _, _ in rows:
        write_image(root / "images" / f"{sid}.png", rng.random((1, res, res)).astype(np.float32))
        if sid not in skip_mask:
            m = np.zeros((res, res), np.int64)
            m[2:5, 2:5] = 1
            write_mask(root / "masks" / f"{sid}.png", m)
    with open(root / "metadata.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "sex", "age"])
        w.writerows(rows)
    return root


def make_dataset(attrs, K=2, res=8, L=2, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for i, a in enumerate(attrs):
        m = np.zeros((res, res), np.int64)
        m[1:4, 1:4] = 1
        samples.append(Sample(f"s{i:03d}", rng.random((1, res, res)).astype(np.float32), m, int(a)))
    return SegDataset(samples, K=K, L=L, attribute_name="sex" if K == 2 else "age",
                      subgroup_labels=[str(k) for k in range(K)])


@pytest.fixture
def four_sample_root(tmp_path):
    rows = [("a", "F", 5), ("b", "M", 25), ("c", "F", 85), ("d", "M", 40)]
    return write_fixture(tmp_path / "ds", rows)


@pytest.fixture(scope="session")
def small_baseline():
    """A desk U-Net trained briefly on 240 synthetic 32x32 samples, frozen."""
    from applefair.data import split_dataset
    from applefair.segmentors import build_reference_segmentor, freeze
    from applefair.synth import SynthConfig, generate
    from applefair.training import TrainConfig, train_baseline

    ds = generate(SynthConfig(n_samples=240, resolution=32, difficulty_gap=0.5, seed=11))
    train, test = split_dataset(ds, 0.75, 0)
    seg = build_reference_segmentor("desk", 2, (1, 32, 32))
    train_baseline(seg, train, TrainConfig(epochs=8, batch_size=8, seed=0))
    return freeze(seg), train, test


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
