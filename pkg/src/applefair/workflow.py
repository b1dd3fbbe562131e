"""Experiment configuration, run directories and the train / evaluate / sweep workflow."""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import DEFAULT_AGE_EDGES, AttributeSpec, DatasetError, SegDataset, load_dataset, split_dataset
from .metrics import FairnessError, fairness, subgroup_utilities
from .perturbation import AppleHyperparams, PerturberBundle
from .reporting import (
    Evaluation,
    beta_sweep_summary,
    build_table,
    sweep_to_dict,
    sweep_to_text,
)
from .segmentors import build_reference_segmentor, freeze, load_segmentor, parameter_hash
from .synth import SynthConfig
from .training import (
    SubgroupModels,
    TrainConfig,
    attribute_probe,
    evaluate_predictions,
    predict_apple,
    predict_segmentor,
    seed_everything,
    train_apple,
    train_baseline,
    train_resampled,
    train_subgroup_models,
    write_history_csv,
)

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "APPLEFAIR_OUTPUT_ROOT"
KINDS = ("baseline", "apple", "rs", "sm")
METHOD_LABELS = {"baseline": "U-Net", "apple": "U-Net + APPLE", "rs": "U-Net + RS", "sm": "U-Net + SM"}

PROFILES = {
    "full": {"data": {"resolution": 256}, "synth": {"resolution": 256}, "segmentor": {"channels": "full"}},
    "desk": {"data": {"resolution": 64}, "synth": {"resolution": 64}, "segmentor": {"channels": "desk"}},
}


class ConfigError(ValueError):
    pass


class RunExistsError(FileExistsError):
    pass


class CheckpointError(FileNotFoundError):
    pass


@dataclass
class DataConfig:
    root: Optional[str] = None
    attribute: str = "sex"
    resolution: int = 256
    split_ratio: float = 0.7
    split_seed: int = 0
    age_edges: list = field(default_factory=lambda: list(DEFAULT_AGE_EDGES))

    def attribute_spec(self) -> AttributeSpec:
        if self.attribute == "age":
            return AttributeSpec.age(self.age_edges)
        return AttributeSpec.for_name(self.attribute)


@dataclass
class ExperimentConfig:
    profile: str = "full"
    seed: int = 0
    output_root: str = "out"
    device: str = "cpu"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    segmentor: dict = field(default_factory=lambda: {"channels": "full"})
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section or 'config'}: {', '.join(sorted(unknown))}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_config(raw: Optional[dict] = None, profile: Optional[str] = None,
                 overrides: Optional[dict] = None) -> ExperimentConfig:
    """Defaults, then profile, then config file values, then overrides."""
    raw = dict(raw or {})
    overrides = overrides or {}
    profile = profile or overrides.get("profile") or raw.get("profile") or "full"
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    top = {f.name for f in fields(ExperimentConfig)}
    _check_keys("", raw, top)
    _check_keys("", overrides, top)
    merged = _merge(_merge(PROFILES[profile], raw), overrides)
    merged["profile"] = profile
    sections = {"data": DataConfig, "synth": SynthConfig, "train": TrainConfig}
    try:
        built = {}
        for name, cls in sections.items():
            sec = merged.get(name, {})
            _check_keys(name, sec, {f.name for f in fields(cls)})
            built[name] = cls(**sec)
        _check_keys("segmentor", merged.get("segmentor", {}), {"channels"})
        cfg = ExperimentConfig(
            profile=profile,
            seed=int(merged.get("seed", 0)),
            output_root=str(merged.get("output_root", "out")),
            device=str(merged.get("device", "cpu")),
            segmentor=dict(merged.get("segmentor", {"channels": "full"})),
            **built,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if os.environ.get(OUTPUT_ROOT_ENV) and "output_root" not in overrides:
        cfg.output_root = os.environ[OUTPUT_ROOT_ENV]
    cfg.train.device = cfg.device
    return cfg


def load_config(path: Optional[str | Path], profile: Optional[str] = None,
                overrides: Optional[dict] = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    return build_config(raw, profile, overrides)


# ---------------------------------------------------------------------------
# data


def load_full(cfg: ExperimentConfig, root: Optional[str] = None,
              attribute: Optional[str] = None) -> SegDataset:
    data = replace(cfg.data, root=root or cfg.data.root, attribute=attribute or cfg.data.attribute)
    if not data.root:
        raise ConfigError("no dataset root configured (data.root or --data)")
    return load_dataset(data.root, data.attribute, data.attribute_spec(), resolution=data.resolution)


def load_split(cfg: ExperimentConfig, root: Optional[str] = None,
               attribute: Optional[str] = None) -> tuple[SegDataset, SegDataset]:
    return split_dataset(load_full(cfg, root, attribute), cfg.data.split_ratio, cfg.data.split_seed)


def select_ids(ds: SegDataset, ids: Sequence[str]) -> SegDataset:
    pos = {sid: i for i, sid in enumerate(ds.ids)}
    missing = [i for i in ids if i not in pos]
    if missing:
        raise DatasetError(f"ids not in dataset: {missing[:5]}")
    return ds.subset(sorted(pos[i] for i in ids))


# ---------------------------------------------------------------------------
# run directories


def run_dirs_for(cfg: ExperimentConfig, name: str, repeats: int) -> list[Path]:
    base = Path(cfg.output_root) / "runs"
    if repeats == 1:
        return [base / name]
    return [base / f"{name}-r{i}" for i in range(repeats)]


def claim_run_dir(path: Path, force: bool) -> Path:
    if path.exists():
        if not force:
            raise RunExistsError(f"run directory {path} exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def read_manifest(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise CheckpointError(f"no manifest.json in {run_dir}")
    return json.loads(path.read_text())


def _segmentor_for(cfg: ExperimentConfig, ds: SegDataset):
    return build_reference_segmentor(cfg.segmentor["channels"], ds.L, (ds.in_channels, *ds.resolution))


def baseline_checkpoint(run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    ckpt = run_dir / "checkpoints" / "segmentor"
    if not (ckpt / "manifest.json").is_file():
        raise CheckpointError(
            f"no baseline checkpoint under {run_dir}; run `applefair train baseline` first")
    return ckpt


def train_runs(kind: str, cfg: ExperimentConfig, name: str, repeats: int = 1,
               baselines: Sequence[str | Path] = (), force: bool = False,
               data_root: Optional[str] = None, method: Optional[str] = None) -> list[Path]:
    """Train ``repeats`` seeded runs of one kind; run i uses seed ``cfg.seed + i``."""
    if kind not in KINDS:
        raise ConfigError(f"unknown training kind {kind!r}")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if kind == "apple":
        if not baselines:
            raise CheckpointError("APPLE needs a frozen baseline; run `applefair train baseline` first "
                                  "and pass it with --baseline")
        if len(baselines) not in (1, repeats):
            raise ConfigError("give one baseline run or one per repeat")
        for b in baselines:
            baseline_checkpoint(b)
    train_ds, test_ds = load_split(cfg, data_root)
    dirs = run_dirs_for(cfg, name, repeats)
    for d in dirs:
        if d.exists() and not force:
            raise RunExistsError(f"run directory {d} exists; pass --force to overwrite")
    for i, run_dir in enumerate(dirs):
        seed = cfg.seed + i
        run_cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
        claim_run_dir(run_dir, force)
        seed_everything(seed)  # network construction draws from the global RNG
        meta = {
            "kind": kind,
            "method": method or METHOD_LABELS[kind],
            "seed": seed,
            "repeat": i,
            "attribute": train_ds.attribute_name,
            "data_root": str(Path(data_root or cfg.data.root).resolve()),
            "test_ids": test_ds.ids,
            "effective_config": run_cfg.to_dict(),
        }
        if kind == "apple":
            base = baselines[i if len(baselines) > 1 else 0]
            _train_apple_run(run_cfg, train_ds, base, run_dir, meta)
        else:
            _train_segmentor_run(kind, run_cfg, train_ds, run_dir, meta)
        logger.info("finished %s run %s", kind, run_dir)
    return dirs


def _train_segmentor_run(kind: str, cfg: ExperimentConfig, train_ds: SegDataset, run_dir: Path, meta: dict) -> None:
    ckpt_dir = run_dir / "checkpoints"
    if kind == "sm":
        _, results = train_subgroup_models(train_ds, cfg.train, lambda: _segmentor_for(cfg, train_ds), ckpt_dir)
        meta["checkpoints"] = {f"subgroup_{k}": r.checkpoint for k, r in enumerate(results)}
        meta["requires_attribute_at_inference"] = True
        meta["history"] = {f"subgroup_{k}": r.history for k, r in enumerate(results)}
    else:
        seg = _segmentor_for(cfg, train_ds)
        fn = train_resampled if kind == "rs" else train_baseline
        result = fn(seg, train_ds, cfg.train, ckpt_dir / "segmentor")
        meta["checkpoints"] = {"segmentor": result.checkpoint}
        meta["history"] = result.history
        meta["best_epoch"] = result.best_epoch
        meta["segmentor_sha256"] = parameter_hash(result.segmentor)
        write_history_csv_baseline(run_dir / "history.csv", result.history, train_ds.K)
    (run_dir / "manifest.json").write_text(json.dumps(meta, indent=2))


def write_history_csv_baseline(path: Path, history: list[dict], K: int) -> None:
    cols = ["epoch", "loss", "val_dice"] + [f"val_dice_k{k}" for k in range(K)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _train_apple_run(cfg: ExperimentConfig, train_ds: SegDataset, baseline_run: str | Path,
                     run_dir: Path, meta: dict) -> None:
    base_meta = read_manifest(baseline_run)
    seg = load_segmentor(baseline_checkpoint(baseline_run), frozen=True)
    h, w = train_ds.resolution
    bundle = PerturberBundle(seg.embedding_channels, seg.embedding_spatial((h, w)), train_ds.K,
                             AppleHyperparams(cfg.train.alpha, cfg.train.beta))
    meta["baseline_run"] = str(Path(baseline_run).resolve())
    meta["baseline_data_root"] = base_meta.get("data_root")
    manifest = train_apple(seg, bundle, train_ds, cfg.train, run_dir)
    full = {**meta, **manifest.to_dict()}
    full["config"] = asdict(cfg.train)
    (run_dir / "manifest.json").write_text(json.dumps(full, indent=2))


# ---------------------------------------------------------------------------
# evaluation


def predict_run(run_dir: str | Path, test_ds: SegDataset, device: str = "cpu") -> torch.Tensor:
    run_dir = Path(run_dir)
    meta = read_manifest(run_dir)
    kind = meta.get("kind")
    images, _, attrs = test_ds.tensors()
    if kind in ("baseline", "rs"):
        seg = load_segmentor(baseline_checkpoint(run_dir))
        return predict_segmentor(seg, images, device=device)
    if kind == "apple":
        seg = load_segmentor(baseline_checkpoint(meta["baseline_run"]))
        if parameter_hash(seg) != meta["frozen_hash_start"]:
            raise CheckpointError(f"baseline of {run_dir} changed since APPLE training")
        bundle = PerturberBundle.load(meta["checkpoints"]["apple"])
        return predict_apple(seg, bundle.generator, images, device=device)
    if kind == "sm":
        models = [load_segmentor(meta["checkpoints"][f"subgroup_{k}"]) for k in range(test_ds.K)]
        return SubgroupModels(models).predict(images, attrs, device=device)
    raise CheckpointError(f"{run_dir}: unknown run kind {kind!r}")


def evaluate_dataset(pred: torch.Tensor, ds: SegDataset, method: str, dataset_name: str) -> dict:
    rows = evaluate_predictions(pred, ds)
    util = subgroup_utilities([(r["dice"], r["attribute"]) for r in rows], ds.K)
    avg = float(np.mean([r["dice"] for r in rows]))
    populated = util.populated()
    out = {
        "method": method,
        "dataset": dataset_name,
        "attribute": ds.attribute_name,
        "subgroup_labels": ds.subgroup_labels,
        "utilities": asdict(util),
        "avg": avg,
        "macro_avg": float(populated.mean()),
        "per_sample": rows,
        "fairness": {},
    }
    try:
        for ddof in ("sample", "population"):
            out["fairness"][ddof] = fairness(util, ddof).to_dict()
    except FairnessError as exc:
        out["fairness_error"] = str(exc)
    return out


def evaluation_from_dict(d: dict, ddof: str = "sample") -> Evaluation:
    from .metrics import FairnessReport

    return Evaluation(d["method"], d["dataset"], d["attribute"], d["avg"],
                      FairnessReport(**d["fairness"][ddof]), d.get("macro_avg"))


def evaluate_runs(run_dirs: Sequence[str | Path], out_dir: str | Path, cfg: ExperimentConfig,
                  data_root: Optional[str] = None, attribute: Optional[str] = None,
                  ddof: str = "sample") -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for run_dir in run_dirs:
        meta = read_manifest(run_dir)
        attr = attribute or meta["attribute"]
        if meta["kind"] != "baseline" and meta["attribute"] != attr:
            raise DatasetError(f"run {run_dir} was trained for attribute {meta['attribute']!r}, "
                               f"evaluation requested {attr!r}")
        root = data_root or meta["data_root"]
        if data_root is None:
            test_ds = select_ids(load_full(cfg, root, attr), meta["test_ids"])
        else:
            _, test_ds = load_split(cfg, root, attr)
        pred = predict_run(run_dir, test_ds, cfg.device)
        result = evaluate_dataset(pred, test_ds, meta["method"], Path(root).name)
        result["run"] = str(run_dir)
        result["seed"] = meta.get("seed")
        result["requires_attribute_at_inference"] = meta["kind"] == "sm"
        run_out = out_dir / Path(run_dir).name
        run_out.mkdir(parents=True, exist_ok=True)
        with open(run_out / "per_sample.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["id", "attribute", "dice"])
            writer.writeheader()
            writer.writerows(result["per_sample"])
        runs.append(result)

    report = {"runs": [{k: v for k, v in r.items() if k != "per_sample"} for r in runs]}
    if all("fairness_error" not in r for r in runs):
        grouped: dict[str, list[Evaluation]] = {}
        for r in runs:
            grouped.setdefault(r["method"], []).append(evaluation_from_dict(r, ddof))
        table = build_table(grouped)
        table.write(out_dir)
        report["aggregate"] = {
            d: _aggregate_dict({m: [evaluation_from_dict(r, d) for r in runs if r["method"] == m]
                                for m in grouped})
            for d in ("sample", "population")
        }
        report["table_ddof"] = ddof
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, default=_json_default))
    return report


def _aggregate_dict(grouped: dict[str, list[Evaluation]]) -> dict:
    table = build_table(grouped)
    return {row.method: {k: asdict(c) for k, c in row.cells.items()} | {"n_runs": row.n_runs}
            for row in table.rows}


def _json_default(o):
    if isinstance(o, float):
        return repr(o)
    raise TypeError(type(o))


def report_from_files(report_paths: Sequence[str | Path], out_dir: str | Path, ddof: str = "sample"):
    grouped: dict[str, list[Evaluation]] = {}
    for path in report_paths:
        path = Path(path)
        if path.is_dir():
            path = path / "report.json"
        data = json.loads(path.read_text())
        for r in data["runs"]:
            grouped.setdefault(r["method"], []).append(evaluation_from_dict(r, ddof))
    table = build_table(grouped)
    table.write(out_dir)
    return table


# ---------------------------------------------------------------------------
# beta sweep


def _sweep_job(job: tuple) -> list[Path]:
    cfg, name, repeats, baselines, force, data_root, method = job
    return train_runs("apple", cfg, name, repeats, baselines, force, data_root, method=method)


def sweep_beta(cfg: ExperimentConfig, baselines: Sequence[str | Path], betas: Sequence[float],
               name: str = "sweep", repeats: int = 1, force: bool = False, probe: bool = True,
               data_root: Optional[str] = None, parallel: int = 1) -> dict:
    """One APPLE run set per beta, then evaluation and attribute probes.

    With ``parallel > 1`` the training runs execute in separate processes;
    each writes only its own run directory.
    """
    sweep_dir = Path(cfg.output_root) / "sweeps" / name
    if sweep_dir.exists() and not force:
        raise RunExistsError(f"sweep directory {sweep_dir} exists; pass --force to overwrite")
    sweep_dir.mkdir(parents=True, exist_ok=True)
    sweep_cfg = replace(cfg, output_root=str(sweep_dir))
    train_ds, test_ds = load_split(cfg, data_root)
    betas = sorted(float(b) for b in betas)
    jobs = [(replace(sweep_cfg, train=replace(cfg.train, beta=beta)), f"beta{beta:g}", repeats,
             list(baselines), force, data_root, f"APPLE (beta={beta:g})") for beta in betas]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            all_dirs = list(pool.map(_sweep_job, jobs))
    else:
        all_dirs = [_sweep_job(job) for job in jobs]
    evals: dict[float, list[Evaluation]] = {}
    probes: dict[float, list[float]] = {}
    for beta, dirs in zip(betas, all_dirs):
        for run_dir in dirs:
            pred = predict_run(run_dir, test_ds, cfg.device)
            ev = evaluate_dataset(pred, test_ds, f"APPLE (beta={beta:g})", Path(data_root or cfg.data.root).name)
            evals.setdefault(beta, []).append(evaluation_from_dict(ev))
            if probe:
                meta = read_manifest(run_dir)
                seg = load_segmentor(baseline_checkpoint(meta["baseline_run"]))
                bundle = PerturberBundle.load(meta["checkpoints"]["apple"])
                probes.setdefault(beta, []).append(
                    attribute_probe(seg, bundle.generator, train_ds, test_ds, replace(cfg.train, seed=meta["seed"])))
    rows = beta_sweep_summary(evals, probes or None)
    summary = {"betas": sorted(evals), "rows": sweep_to_dict(rows)}
    (sweep_dir / "sweep_summary.json").write_text(json.dumps(summary, indent=2))
    (sweep_dir / "sweep_summary.txt").write_text(sweep_to_text(rows))
    return summary
