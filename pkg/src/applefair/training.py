"""Training loops: baseline segmentor, APPLE adversarial perturbation, RS and SM baselines."""

from __future__ import annotations

import copy
import csv
import json
import logging
import random
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import WeightedRandomSampler

from .data import SegDataset, split_dataset
from .metrics import dice, multiclass_dice
from .perturbation import (
    AttributeDiscriminator,
    PerturbationGenerator,
    PerturberBundle,
    loss_discriminator,
    loss_fair,
    loss_generator,
    loss_seg,
    perturb,
)
from .segmentors import (
    SplitSegmentor,
    build_reference_segmentor,
    check_trainable,
    parameter_hash,
    save_segmentor,
)

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr_generator: float = 1e-3
    lr_discriminator: float = 1e-3
    lr_segmentor: float = 1e-2
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    alpha: float = 0.1
    beta: float = 1.0
    seed: int = 0
    device: str = "cpu"
    val_fraction: float = 0.1
    augment: bool = True
    eval_batch_size: int = 64
    probe_epochs: int = 30

    def __post_init__(self) -> None:
        for name in ("lr_generator", "lr_discriminator", "lr_segmentor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def augment_batch(images: torch.Tensor, masks: torch.Tensor, gen: torch.Generator):
    """Random horizontal/vertical flips and 90-degree rotations, per sample."""
    images = images.clone()
    masks = masks.clone()
    draws = torch.randint(0, 2, (images.shape[0], 3), generator=gen).bool()
    fh, fv, rot = draws.unbind(1)
    images[fh], masks[fh] = images[fh].flip(-1), masks[fh].flip(-1)
    images[fv], masks[fv] = images[fv].flip(-2), masks[fv].flip(-2)
    if images.shape[-1] == images.shape[-2]:
        images[rot], masks[rot] = images[rot].transpose(-1, -2), masks[rot].transpose(-1, -2)
    return images, masks


def _batches(n: int, batch_size: int, gen: torch.Generator, order: Optional[Sequence[int]] = None):
    """Shuffled index batches, ``ceil(n / batch_size)`` per epoch.

    A trailing batch of one sample gets one extra random sample from the
    epoch, since batch norm cannot train on a single example.
    """
    idx = torch.randperm(n, generator=gen) if order is None else torch.as_tensor(list(order))
    for start in range(0, len(idx), batch_size):
        batch = idx[start:start + batch_size]
        if len(batch) == 1 and len(idx) > 1:
            extra = idx[torch.randint(0, len(idx) - 1, (1,), generator=gen)]
            batch = torch.cat([batch, extra])
        yield batch


def _check_finite(value: torch.Tensor, what: str, step: int) -> None:
    if not torch.isfinite(value):
        raise TrainingDivergedError(f"non-finite {what} at step {step}: {value.item()}")


def validation_split(ds: SegDataset, fraction: float, seed: int) -> tuple[SegDataset, Optional[SegDataset]]:
    if fraction <= 0 or len(ds) * fraction < 1:
        if fraction > 0:
            warnings.warn(f"{len(ds)} samples too few for a validation split; training without one",
                          stacklevel=3)
        return ds, None
    train, val = split_dataset(ds, 1.0 - fraction, seed)
    if len(val) == 0:
        warnings.warn("validation split is empty; training without one", stacklevel=3)
        return ds, None
    return train, val


# ---------------------------------------------------------------------------
# inference and evaluation


@torch.no_grad()
def predict_logits(fn: Callable[[torch.Tensor], torch.Tensor], images: torch.Tensor,
                   batch_size: int = 64, device: str = "cpu") -> torch.Tensor:
    out = [fn(images[i:i + batch_size].to(device)).cpu() for i in range(0, len(images), batch_size)]
    return torch.cat(out)


def per_sample_dice(pred: torch.Tensor, masks: torch.Tensor, num_classes: int) -> list[float]:
    pred = pred.numpy()
    masks = masks.numpy()
    if num_classes == 2:
        return [dice(p == 1, m == 1) for p, m in zip(pred, masks)]
    return [multiclass_dice(p, m, num_classes) for p, m in zip(pred, masks)]


def predict_segmentor(segmentor: SplitSegmentor, images: torch.Tensor, batch_size: int = 64,
                      device: str = "cpu") -> torch.Tensor:
    was_training = segmentor.training
    segmentor.eval()
    try:
        return predict_logits(segmentor, images, batch_size, device).argmax(1)
    finally:
        segmentor.train(was_training)


def predict_apple(segmentor: SplitSegmentor, generator: PerturbationGenerator, images: torch.Tensor,
                  batch_size: int = 64, device: str = "cpu") -> torch.Tensor:
    """Masks from ``D_s(f_o + G(f_o))``; the discriminator plays no part at test time."""
    was_training = generator.training
    generator.eval()
    segmentor.eval()

    def fn(x):
        return segmentor.decode(perturb(generator, segmentor.encode(x)))

    try:
        return predict_logits(fn, images, batch_size, device).argmax(1)
    finally:
        generator.train(was_training)


def evaluate_predictions(pred: torch.Tensor, ds: SegDataset) -> list[dict]:
    _, masks, _ = ds.tensors()
    scores = per_sample_dice(pred, masks, ds.L)
    return [{"id": s.id, "attribute": s.attribute, "dice": d} for s, d in zip(ds.samples, scores)]


def subgroup_dice(pred: torch.Tensor, ds: SegDataset) -> list[float]:
    rows = evaluate_predictions(pred, ds)
    out = []
    for k in range(ds.K):
        vals = [r["dice"] for r in rows if r["attribute"] == k]
        out.append(float(np.mean(vals)) if vals else float("nan"))
    return out


# ---------------------------------------------------------------------------
# baseline segmentor


@dataclass
class BaselineResult:
    segmentor: SplitSegmentor
    history: list[dict]
    best_epoch: int
    best_val_dice: float
    checkpoint: Optional[str] = None


def train_baseline(segmentor: SplitSegmentor, train_ds: SegDataset, cfg: TrainConfig,
                   out_dir: Optional[str | Path] = None,
                   resample: bool = False) -> BaselineResult:
    """Dice-CE training with plain SGD, keeping the best validation-Dice weights.

    With ``resample`` each epoch draws samples with replacement at weight
    ``1 / |D_k|`` instead of shuffling.
    """
    seed_everything(cfg.seed)
    device = cfg.device
    params = check_trainable(segmentor.parameters())
    fit_ds, val_ds = validation_split(train_ds, cfg.val_fraction, cfg.seed)
    sampler_weights = inverse_frequency_weights(fit_ds.attributes, fit_ds.K) if resample else None

    images, masks, _ = fit_ds.tensors()
    segmentor.to(device, memory_format=torch.channels_last).train()
    opt = torch.optim.SGD(params, lr=cfg.lr_segmentor, momentum=cfg.momentum)
    gen = torch.Generator().manual_seed(cfg.seed)

    best_state = copy.deepcopy(segmentor.state_dict())
    best_dice, best_epoch = -1.0, -1
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        segmentor.train()
        order = None
        if sampler_weights is not None:
            order = list(WeightedRandomSampler(sampler_weights, len(fit_ds), replacement=True, generator=gen))
        losses = []
        for idx in _batches(len(fit_ds), cfg.batch_size, gen, order):
            x, y = images[idx], masks[idx]
            if cfg.augment:
                x, y = augment_batch(x, y, gen)
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            loss = loss_seg(segmentor(x.to(device)), y.to(device))
            _check_finite(loss, "segmentation loss", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        record = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan")}
        if val_ds is not None:
            rows = evaluate_predictions(
                predict_segmentor(segmentor, val_ds.tensors()[0], cfg.eval_batch_size, device), val_ds)
            mean_val = float(np.mean([r["dice"] for r in rows]))
            record["val_dice"] = mean_val
            for k in range(val_ds.K):
                vals = [r["dice"] for r in rows if r["attribute"] == k]
                record[f"val_dice_k{k}"] = float(np.mean(vals)) if vals else float("nan")
            if mean_val > best_dice:
                best_dice, best_epoch = mean_val, epoch
                best_state = copy.deepcopy(segmentor.state_dict())
        else:
            best_epoch = epoch
            best_state = copy.deepcopy(segmentor.state_dict())
        history.append(record)
        logger.debug("baseline epoch %d %s", epoch, record)

    segmentor.load_state_dict(best_state)
    segmentor.eval()
    checkpoint = None
    if out_dir is not None:
        checkpoint = str(save_segmentor(segmentor, Path(out_dir), seed=cfg.seed,
                                        extra={"best_epoch": best_epoch, "best_val_dice": best_dice}))
    return BaselineResult(segmentor, history, best_epoch, best_dice, checkpoint)


def inverse_frequency_weights(attributes: Sequence[int], K: int) -> torch.Tensor:
    """Per-sample weight ``1 / |D_k|`` so every subgroup has equal expected mass."""
    attrs = np.asarray(attributes)
    counts = np.bincount(attrs, minlength=K)
    present = np.unique(attrs)
    if np.any(counts[present] == 0) or len(attrs) == 0:
        raise ValueError("cannot weight an empty subgroup")
    return torch.as_tensor(1.0 / counts[attrs], dtype=torch.double)


def resampling_sampler(attributes: Sequence[int], K: int, num_samples: int,
                       generator: Optional[torch.Generator] = None) -> WeightedRandomSampler:
    return WeightedRandomSampler(inverse_frequency_weights(attributes, K), num_samples,
                                 replacement=True, generator=generator)


def train_resampled(segmentor: SplitSegmentor, train_ds: SegDataset, cfg: TrainConfig,
                    out_dir: Optional[str | Path] = None) -> BaselineResult:
    """RS baseline: subgroups drawn with equal expected frequency during training."""
    counts = train_ds.counts()
    if any(c == 0 for c in counts):
        raise ValueError(f"RS needs every subgroup populated, got counts {counts}")
    return train_baseline(segmentor, train_ds, cfg, out_dir, resample=True)


class SubgroupModels:
    """SM baseline: one segmentor per subgroup, routed by the attribute at inference."""

    def __init__(self, models: list[SplitSegmentor]):
        self.models = models

    def predict(self, images: torch.Tensor, attributes: torch.Tensor, batch_size: int = 64,
                device: str = "cpu") -> torch.Tensor:
        out = torch.empty((images.shape[0], *images.shape[2:]), dtype=torch.long)
        for k, model in enumerate(self.models):
            sel = (attributes == k).nonzero(as_tuple=True)[0]
            if len(sel):
                out[sel] = predict_segmentor(model, images[sel], batch_size, device)
        return out


def train_subgroup_models(train_ds: SegDataset, cfg: TrainConfig,
                          build: Callable[[], SplitSegmentor],
                          out_dir: Optional[str | Path] = None) -> tuple[SubgroupModels, list[BaselineResult]]:
    groups = train_ds.subgroup_indices()
    empty = [k for k, g in enumerate(groups) if not g]
    if empty:
        raise ValueError(f"SM needs every subgroup populated; empty: {empty}")
    results = []
    for k, idx in enumerate(groups):
        sub = train_ds.subset(idx)
        sub_cfg = replace(cfg, seed=cfg.seed * 1000 + k)
        target = Path(out_dir) / f"subgroup_{k}" if out_dir is not None else None
        seed_everything(sub_cfg.seed)
        results.append(train_baseline(build(), sub, sub_cfg, target))
    return SubgroupModels([r.segmentor for r in results]), results


# ---------------------------------------------------------------------------
# APPLE


@dataclass
class RunManifest:
    config: dict
    history: list[dict] = field(default_factory=list)
    steps: dict = field(default_factory=lambda: {"L_D": [], "L_G": [], "L_G_seg": [], "L_G_fair": []})
    checkpoints: dict = field(default_factory=dict)
    frozen_hash_start: str = ""
    frozen_hash_end: str = ""
    status: str = "running"

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, run_dir: Path, K: int) -> None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "manifest.json").write_text(json.dumps(self.to_dict(), indent=2))
        write_history_csv(run_dir / "history.csv", self.history, K)


HISTORY_FIELDS = ["epoch", "L_D", "L_G", "L_G_seg", "L_G_fair"]


def write_history_csv(path: Path, history: list[dict], K: int) -> None:
    fields = HISTORY_FIELDS + [f"val_dice_k{k}" for k in range(K)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train_apple(segmentor: SplitSegmentor, bundle: PerturberBundle, train_ds: SegDataset,
                cfg: TrainConfig, run_dir: Optional[str | Path] = None,
                on_step: Optional[Callable[[str, dict], None]] = None) -> RunManifest:
    """Alternating discriminator / generator updates against a frozen segmentor.

    Per batch: embed, perturb, step the discriminator on the detached
    perturbed embedding, then recompute the perturbation and step the
    generator on ``seg + beta * fair`` using the just-updated discriminator.
    """
    if not segmentor.frozen:
        raise ValueError("train_apple requires a frozen segmentor; call freeze() first")
    seed_everything(cfg.seed)
    device = cfg.device
    res = train_ds.resolution
    expected = (segmentor.embedding_channels, *segmentor.embedding_spatial(res))
    actual = (bundle.generator.embedding_channels, *bundle.generator.embedding_spatial)
    if expected != actual:
        raise ValueError(f"perturber built for embedding {actual}, segmentor produces {expected}")
    if bundle.discriminator.num_groups != train_ds.K:
        raise ValueError(f"discriminator has {bundle.discriminator.num_groups} outputs, dataset K={train_ds.K}")

    run_path = Path(run_dir) if run_dir is not None else None
    manifest = RunManifest(config=asdict(cfg))
    manifest.frozen_hash_start = parameter_hash(segmentor)
    fit_ds, val_ds = validation_split(train_ds, cfg.val_fraction, cfg.seed)
    images, masks, attrs = fit_ds.tensors()

    segmentor.to(device).eval()
    G, D = bundle.generator.to(device), bundle.discriminator.to(device)
    betas = tuple(cfg.adam_betas)
    opt_g = torch.optim.Adam(check_trainable(G.parameters()), lr=cfg.lr_generator, betas=betas)
    opt_d = torch.optim.Adam(check_trainable(D.parameters()), lr=cfg.lr_discriminator, betas=betas)
    gen = torch.Generator().manual_seed(cfg.seed)
    alpha, beta = cfg.alpha, cfg.beta
    bundle.hparams.alpha, bundle.hparams.beta = alpha, beta

    step = 0
    last_good = {"generator": copy.deepcopy(G.state_dict()), "discriminator": copy.deepcopy(D.state_dict())}
    try:
        for epoch in range(cfg.epochs):
            G.train()
            D.train()
            sums = {k: 0.0 for k in manifest.steps}
            n_steps = 0
            for idx in _batches(len(fit_ds), cfg.batch_size, gen):
                x, y, a = images[idx], masks[idx], attrs[idx]
                if cfg.augment:
                    x, y = augment_batch(x, y, gen)
                x, y, a = x.to(device), y.to(device), a.to(device)
                if len(idx) < 2:
                    continue  # batch norm needs more than one sample
                with torch.no_grad():
                    f_o = segmentor.encode(x)

                # discriminator step on the current perturbation
                with torch.no_grad():
                    f_p = perturb(G, f_o)
                l_d = loss_discriminator(D(f_p.tensor), a)
                _check_finite(l_d, "L_D", step)
                opt_d.zero_grad()
                l_d.backward()
                opt_d.step()

                # generator step against the updated discriminator
                f_p = perturb(G, f_o)
                l_fair = loss_fair(D(f_p.tensor), a, alpha)
                l_seg = loss_seg(segmentor.decode(f_p), y)
                l_g = loss_generator(l_seg, l_fair, beta)
                _check_finite(l_g, "L_G", step)
                opt_g.zero_grad()
                l_g.backward()
                opt_g.step()
                opt_d.zero_grad(set_to_none=True)

                vals = {"L_D": l_d.item(), "L_G": l_g.item(), "L_G_seg": l_seg.item(), "L_G_fair": l_fair.item()}
                for k, v in vals.items():
                    manifest.steps[k].append(v)
                    sums[k] += v
                n_steps += 1
                step += 1
                if on_step is not None:
                    on_step("step", vals)
            record = {"epoch": epoch, **{k: v / max(n_steps, 1) for k, v in sums.items()}}
            if val_ds is not None:
                vd = subgroup_dice(predict_apple(segmentor, G, val_ds.tensors()[0], cfg.eval_batch_size, device), val_ds)
                for k, v in enumerate(vd):
                    record[f"val_dice_k{k}"] = v
            manifest.history.append(record)
            last_good = {"generator": copy.deepcopy(G.state_dict()), "discriminator": copy.deepcopy(D.state_dict())}
            logger.debug("apple epoch %d %s", epoch, record)
    except TrainingDivergedError:
        G.load_state_dict(last_good["generator"])
        D.load_state_dict(last_good["discriminator"])
        manifest.status = "diverged"
        if run_path is not None:
            manifest.checkpoints["apple"] = str(bundle.save(run_path / "checkpoints" / "apple_last_good"))
            manifest.frozen_hash_end = parameter_hash(segmentor)
            manifest.write(run_path, train_ds.K)
        raise

    G.eval()
    D.eval()
    manifest.frozen_hash_end = parameter_hash(segmentor)
    manifest.status = "completed"
    if run_path is not None:
        ckpt = bundle.save(run_path / "checkpoints" / "apple",
                           extra={"segmentor_sha256": manifest.frozen_hash_start, "seed": cfg.seed})
        manifest.checkpoints["apple"] = str(ckpt)
        manifest.write(run_path, train_ds.K)
    return manifest


@torch.no_grad()
def perturbed_embeddings(segmentor: SplitSegmentor, generator: Optional[PerturbationGenerator],
                         images: torch.Tensor, batch_size: int = 64, device: str = "cpu") -> torch.Tensor:
    segmentor.eval()
    if generator is not None:
        generator.eval()
    out = []
    for i in range(0, len(images), batch_size):
        f = segmentor.encode(images[i:i + batch_size].to(device))
        if generator is not None:
            f = perturb(generator, f)
        out.append(f.tensor.cpu())
    return torch.cat(out)


def attribute_probe(segmentor: SplitSegmentor, generator: Optional[PerturbationGenerator],
                    train_ds: SegDataset, test_ds: SegDataset, cfg: TrainConfig) -> float:
    """Accuracy of a freshly trained discriminator on fixed perturbed embeddings.

    The probe is fit on the training embeddings and scored on the test
    embeddings; chance level is ``1 / K`` for balanced subgroups.
    """
    seed_everything(cfg.seed + 7919)
    f_train = perturbed_embeddings(segmentor, generator, train_ds.tensors()[0], cfg.eval_batch_size, cfg.device)
    f_test = perturbed_embeddings(segmentor, generator, test_ds.tensors()[0], cfg.eval_batch_size, cfg.device)
    a_train = train_ds.tensors()[2]
    a_test = test_ds.tensors()[2]
    probe = AttributeDiscriminator(f_train.shape[1], train_ds.K)
    opt = torch.optim.Adam(probe.parameters(), lr=cfg.lr_discriminator)
    gen = torch.Generator().manual_seed(cfg.seed + 7919)
    batch = max(cfg.batch_size, 32)
    for _ in range(cfg.probe_epochs):
        probe.train()
        for idx in _batches(len(f_train), batch, gen):
            if len(idx) < 2:
                continue
            loss = loss_discriminator(probe(f_train[idx]), a_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    probe.eval()
    with torch.no_grad():
        pred = probe(f_test).argmax(1)
    return float((pred == a_test).float().mean())
