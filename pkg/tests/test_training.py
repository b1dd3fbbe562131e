import copy
import math

import numpy as np
import pytest
import torch

import applefair.training as training
from applefair.perturbation import (
    PerturberBundle,
    loss_discriminator,
    loss_fair,
    loss_generator,
    loss_seg,
    perturb,
)
from applefair.segmentors import build_reference_segmentor, freeze, parameter_hash
from applefair.synth import SynthConfig, generate
from applefair.training import (
    SubgroupModels,
    TrainConfig,
    TrainingDivergedError,
    attribute_probe,
    inverse_frequency_weights,
    predict_apple,
    predict_segmentor,
    resampling_sampler,
    subgroup_dice,
    train_apple,
    train_resampled,
    train_subgroup_models,
)

from conftest import make_dataset


def tiny_setup(n=8, res=32, seed=0):
    ds = generate(SynthConfig(n_samples=n, resolution=res, seed=seed))
    torch.manual_seed(seed)
    seg = build_reference_segmentor("desk", 2, (1, res, res))
    # default init shrinks activations to ~1e-4 at the bottleneck, which
    # leaves the discriminator's batch norm badly conditioned
    for m in seg.encoder.modules():
        if isinstance(m, torch.nn.Conv2d):
            torch.nn.init.kaiming_normal_(m.weight)
    seg = freeze(seg)
    bundle = PerturberBundle(128, seg.embedding_spatial((res, res)), 2)
    return ds, seg, bundle


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"epochs": 1, "lr": 0.1})

    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"lr_generator": 0.0}, {"beta": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestBatches:
    @pytest.mark.parametrize("n, bs", [(8, 3), (8, 7), (8, 8), (8, 1), (10, 4)])
    def test_count_and_min_size(self, n, bs):
        batches = list(training._batches(n, bs, torch.Generator().manual_seed(0)))
        assert len(batches) == math.ceil(n / bs)
        assert all(len(b) >= 2 for b in batches)
        covered = torch.cat(batches).unique()
        assert covered.tolist() == list(range(n))


class TestApple:
    @pytest.mark.parametrize("bs", [3, 7, 8])
    def test_step_bookkeeping(self, bs):
        ds, seg, bundle = tiny_setup()
        m = train_apple(seg, bundle, ds, TrainConfig(epochs=1, batch_size=bs, val_fraction=0.0))
        for key in ("L_D", "L_G", "L_G_seg", "L_G_fair"):
            assert len(m.steps[key]) == math.ceil(8 / bs)
        assert len(m.history) == 1

    def test_frozen_hash_and_manifest(self, tmp_path):
        ds, seg, bundle = tiny_setup()
        before = parameter_hash(seg)
        m = train_apple(seg, bundle, ds, TrainConfig(epochs=2, batch_size=4, val_fraction=0.0),
                        run_dir=tmp_path / "run")
        assert m.frozen_hash_start == m.frozen_hash_end == before == parameter_hash(seg)
        header = (tmp_path / "run" / "history.csv").read_text().splitlines()[0]
        assert header == "epoch,L_D,L_G,L_G_seg,L_G_fair,val_dice_k0,val_dice_k1"
        assert (tmp_path / "run" / "checkpoints" / "apple" / "generator.pt").is_file()

    def test_requires_frozen(self):
        ds, _, bundle = tiny_setup()
        seg = build_reference_segmentor("desk", 2, (1, 32, 32))
        with pytest.raises(ValueError, match="frozen"):
            train_apple(seg, bundle, ds, TrainConfig(epochs=1))

    def test_shape_mismatch(self):
        ds, seg, _ = tiny_setup()
        with pytest.raises(ValueError, match="embedding"):
            train_apple(seg, PerturberBundle(64, (2, 2), 2), ds, TrainConfig(epochs=1))

    def test_algorithm_order_matches_manual_step(self):
        ds, seg, bundle = tiny_setup(n=4)
        ref = copy.deepcopy(bundle)
        cfg = TrainConfig(epochs=1, batch_size=4, val_fraction=0.0, augment=False, alpha=0.1, beta=1.0)
        train_apple(seg, bundle, ds, cfg)

        idx = next(training._batches(4, 4, torch.Generator().manual_seed(cfg.seed)))
        x, y, a = (t[idx] for t in ds.tensors())
        G, D = ref.generator.train(), ref.discriminator.train()
        opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr_generator)
        opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_discriminator)
        with torch.no_grad():
            f_o = seg.encode(x)
            f_p = perturb(G, f_o)
        opt_d.zero_grad()
        loss_discriminator(D(f_p.tensor), a).backward()
        opt_d.step()
        f_p = perturb(G, f_o)
        l_g = loss_generator(loss_seg(seg.decode(f_p), y), loss_fair(D(f_p.tensor), a, 0.1), 1.0)
        opt_g.zero_grad()
        l_g.backward()
        opt_g.step()

        for p, q in zip(bundle.parameters(), ref.parameters()):
            assert torch.allclose(p, q, atol=1e-6)

    def test_gradient_routing(self, monkeypatch):
        # the discriminator optimizer must only ever see L_D gradients
        ds, seg, bundle = tiny_setup(n=4)
        seen = []
        real_step = torch.optim.Adam.step

        def spy(self, *args, **kwargs):
            params = [p for g in self.param_groups for p in g["params"]]
            seen.append([None if p.grad is None else p.grad.clone() for p in params])
            return real_step(self, *args, **kwargs)

        monkeypatch.setattr(torch.optim.Adam, "step", spy)
        ref = copy.deepcopy(bundle)
        train_apple(seg, bundle, ds, TrainConfig(epochs=1, batch_size=4, val_fraction=0.0, augment=False))
        d_grads, g_grads = seen
        idx = next(training._batches(4, 4, torch.Generator().manual_seed(0)))
        x, a = ds.tensors()[0][idx], ds.tensors()[2][idx]
        with torch.no_grad():
            f_p = perturb(ref.generator.train(), seg.encode(x)).tensor
        ref.discriminator.train()
        expect = torch.autograd.grad(loss_discriminator(ref.discriminator(f_p), a),
                                     list(ref.discriminator.parameters()))
        for got, want in zip(d_grads, expect):
            assert torch.allclose(got, want, atol=1e-6)
        assert len(g_grads) == len(list(bundle.generator.parameters()))

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            ds, seg, bundle = tiny_setup(n=8)
            runs.append(train_apple(seg, bundle, ds, TrainConfig(epochs=2, batch_size=4, val_fraction=0.0)))
        assert runs[0].steps == runs[1].steps
        assert runs[0].history == runs[1].history

    def test_divergence_keeps_last_good(self, tmp_path, monkeypatch):
        ds, seg, bundle = tiny_setup()
        monkeypatch.setattr(training, "loss_seg", lambda logits, y: torch.tensor(float("nan")))
        with pytest.raises(TrainingDivergedError, match="L_G"):
            train_apple(seg, bundle, ds, TrainConfig(epochs=1, batch_size=4, val_fraction=0.0),
                        run_dir=tmp_path / "r")
        assert (tmp_path / "r" / "checkpoints" / "apple_last_good" / "generator.pt").is_file()
        assert torch.count_nonzero(bundle.generator.out.weight) == 0


class TestPrediction:
    def test_zero_init_matches_baseline_bitwise(self):
        ds, seg, bundle = tiny_setup(n=6)
        x = ds.tensors()[0]
        assert torch.equal(predict_apple(seg, bundle.generator, x), predict_segmentor(seg, x))

    def test_batching_and_repeat(self):
        ds, seg, bundle = tiny_setup(n=6)
        torch.nn.init.normal_(bundle.generator.out.weight, std=0.05)
        x = ds.tensors()[0]
        full = predict_apple(seg, bundle.generator, x, batch_size=6)
        single = predict_apple(seg, bundle.generator, x, batch_size=1)
        assert torch.equal(full, single)
        assert torch.equal(full, predict_apple(seg, bundle.generator, x, batch_size=6))


class TestResampling:
    def test_draw_frequencies(self):
        attrs = [0] * 100 + [1] * 50
        sampler = resampling_sampler(attrs, 2, 10_000, torch.Generator().manual_seed(0))
        drawn = np.asarray(attrs)[list(sampler)]
        assert abs(np.mean(drawn == 0) - 0.5) <= 0.02

    def test_equal_counts_uniform(self):
        w = inverse_frequency_weights([0, 1, 0, 1, 1, 0], 2)
        assert torch.all(w == w[0])

    def test_tiny_subgroup(self):
        attrs = [0] * 40 + [1] * 30 + [2] * 20 + [3] * 10 + [4] * 5
        sampler = resampling_sampler(attrs, 5, 5000, torch.Generator().manual_seed(1))
        drawn = np.bincount(np.asarray(attrs)[list(sampler)], minlength=5) / 5000
        assert np.all(np.abs(drawn - 0.2) < 0.03)

    def test_train_resampled_runs_on_tiny_subgroup(self):
        ds = make_dataset([0] * 10 + [1] * 2, K=2, res=16)
        seg = build_reference_segmentor("desk", 2, (1, 16, 16))
        res = train_resampled(seg, ds, TrainConfig(epochs=1, batch_size=4, val_fraction=0.0))
        assert len(res.history) == 1

    def test_empty_subgroup(self):
        ds = make_dataset([0, 0, 0], K=2, res=16)
        with pytest.raises(ValueError, match="subgroup"):
            train_resampled(build_reference_segmentor("desk", 2, (1, 16, 16)), ds, TrainConfig(epochs=1))


class _Constant(torch.nn.Module):
    def __init__(self, cls):
        super().__init__()
        self.cls = cls

    def forward(self, x):
        out = torch.zeros(x.shape[0], 2, *x.shape[2:])
        out[:, self.cls] = 1.0
        return out


class TestSubgroupModels:
    def test_routing(self):
        sm = SubgroupModels([_Constant(0), _Constant(1)])
        x = torch.rand(4, 1, 8, 8)
        pred = sm.predict(x, torch.tensor([1, 0, 1, 0]))
        assert pred[0].eq(1).all() and pred[2].eq(1).all()
        assert pred[1].eq(0).all() and pred[3].eq(0).all()

    def test_one_checkpoint_per_subgroup(self, tmp_path):
        ds = make_dataset([0] * 6 + [1] * 6, K=2, res=16)
        sm, results = train_subgroup_models(ds, TrainConfig(epochs=1, batch_size=4, val_fraction=0.0),
                                            lambda: build_reference_segmentor("desk", 2, (1, 16, 16)),
                                            tmp_path / "sm")
        assert len(sm.models) == 2
        assert sorted(p.name for p in (tmp_path / "sm").iterdir()) == ["subgroup_0", "subgroup_1"]

    def test_empty_subgroup(self):
        ds = make_dataset([0] * 4, K=2, res=16)
        with pytest.raises(ValueError, match="empty"):
            train_subgroup_models(ds, TrainConfig(epochs=1), lambda: None)


class TestWithTrainedBaseline:
    def test_beta_zero_keeps_dice(self, small_baseline):
        seg, train, test = small_baseline
        base = np.mean(subgroup_dice(predict_segmentor(seg, test.tensors()[0]), test))
        bundle = PerturberBundle(128, seg.embedding_spatial((32, 32)), 2)
        train_apple(seg, bundle, train, TrainConfig(epochs=2, batch_size=16, beta=0.0))
        after = np.mean(subgroup_dice(predict_apple(seg, bundle.generator, test.tensors()[0]), test))
        assert abs(after - base) <= 0.01

    def test_probe_detects_attribute_in_raw_embedding(self, small_baseline):
        seg, train, test = small_baseline
        acc = attribute_probe(seg, None, train, test, TrainConfig(probe_epochs=10))
        assert acc >= 0.9
