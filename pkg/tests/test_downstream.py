"""Tests for classifier training, exact-ratio batch mixing, and the
augmentation baselines (cutout, mixup, cutmix, input-space ascent).

Counting oracles are computed with plain loops/arithmetic; the mixed-loss
identities at the endpoints are asserted bitwise.
"""

from __future__ import annotations

import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from latentaug.data import ImageDataset
from latentaug.downstream import (
    AdversarialAugmentConfig,
    ClassifierConfig,
    ScalingCell,
    TrainReport,
    adversarial_perturb,
    build_classifier,
    cutmix,
    cutout,
    cutout_side,
    evaluate,
    me_ada_rounds,
    mix_real_synthetic,
    mixed_criterion,
    mixing_counts,
    mixup,
    penultimate_features,
    scaling_experiment,
    single_source,
    train_classifier,
)

PAPER_RATIOS = [(1, 7), (1, 3), (1, 1), (3, 1), (7, 1)]


def _flat_dataset(n, value, label, prefix, res=4):
    return ImageDataset(
        images=torch.full((n, 3, res, res), value),
        labels=torch.full((n,), label, dtype=torch.long),
        ids=tuple(f"{prefix}-{i:03d}" for i in range(n)),
    )


class TestMixingCounts:
    @pytest.mark.parametrize("ratio", PAPER_RATIOS)
    def test_batch128_counts_exact(self, ratio):
        r, s = ratio
        n_real, n_syn = mixing_counts(128, ratio)
        assert n_real + n_syn == 128
        assert n_real == round(128 * r / (r + s))

    def test_hand_values(self):
        assert mixing_counts(128, (1, 1)) == (64, 64)
        assert mixing_counts(128, (7, 1)) == (112, 16)
        assert mixing_counts(128, (1, 7)) == (16, 112)
        assert mixing_counts(128, (3, 1)) == (96, 32)
        assert mixing_counts(128, (1, 3)) == (32, 96)

    @pytest.mark.parametrize("ratio", [(0, 1), (1, 0), (-1, 2)])
    def test_zero_or_negative_component_rejected(self, ratio):
        with pytest.raises(ValueError, match="single-source"):
            mixing_counts(64, ratio)

    @given(
        r=st.integers(1, 9), s=st.integers(1, 9), batch=st.integers(1, 256)
    )
    @settings(max_examples=80, deadline=None)
    def test_share_within_half_sample_of_ratio(self, r, s, batch):
        n_real, n_syn = mixing_counts(batch, (r, s))
        assert n_real + n_syn == batch
        assert abs(n_real - batch * r / (r + s)) <= 0.5


class TestMixRealSynthetic:
    @pytest.mark.parametrize("ratio", PAPER_RATIOS)
    def test_every_batch_respects_ratio(self, ratio):
        real = _flat_dataset(40, 0.25, 0, "real")
        syn = _flat_dataset(40, 0.75, 1, "syn")
        stream = mix_real_synthetic(real, syn, ratio, batch_size=128, seed=0)
        n_real, n_syn = mixing_counts(128, ratio)
        for _ in range(5):
            batch = next(stream)
            assert (batch.n_real, batch.n_synthetic) == (n_real, n_syn)
            # sources are concatenated real-first; values identify membership
            assert torch.all(batch.images[:n_real] == 0.25)
            assert torch.all(batch.images[n_real:] == 0.75)
            assert batch.labels[:n_real].eq(0).all()
            assert batch.labels[n_real:].eq(1).all()

    def test_long_run_per_sample_frequency_uniform(self):
        real = _flat_dataset(6, 0.25, 0, "real", res=2)
        syn = _flat_dataset(2, 0.75, 1, "syn", res=2)
        # give every real image a distinguishable value
        real = ImageDataset(
            images=torch.stack(
                [torch.full((3, 2, 2), i / 10.0) for i in range(6)]
            ),
            labels=real.labels,
            ids=real.ids,
        )
        stream = mix_real_synthetic(real, syn, (1, 3), batch_size=8, seed=1)
        counts = {i: 0 for i in range(6)}
        n_batches = 300  # 2 real draws per batch -> 600 = 100 full passes
        for _ in range(n_batches):
            batch = next(stream)
            for img in batch.images[: batch.n_real]:
                counts[int(round(float(img[0, 0, 0]) * 10))] += 1
        assert sum(counts.values()) == 600
        assert set(counts.values()) == {100}  # exactly equal use of each image

    def test_deterministic_per_seed(self):
        real = ImageDataset(
            images=torch.stack([torch.full((3, 4, 4), i / 20.0) for i in range(10)]),
            labels=torch.zeros(10, dtype=torch.long),
            ids=tuple(f"real-{i}" for i in range(10)),
        )
        syn = ImageDataset(
            images=torch.stack([torch.full((3, 4, 4), 0.5 + i / 40.0) for i in range(10)]),
            labels=torch.ones(10, dtype=torch.long),
            ids=tuple(f"syn-{i}" for i in range(10)),
        )
        a = mix_real_synthetic(real, syn, (1, 1), 8, seed=7)
        b = mix_real_synthetic(real, syn, (1, 1), 8, seed=7)
        c = mix_real_synthetic(real, syn, (1, 1), 8, seed=8)
        same, diff = True, False
        for _ in range(4):
            ba, bb, bc = next(a), next(b), next(c)
            same &= torch.equal(ba.images, bb.images)
            diff |= not torch.equal(ba.images, bc.images)
        assert same and diff

    def test_empty_source_rejected(self):
        real = _flat_dataset(4, 0.25, 0, "real")
        empty = ImageDataset(
            images=torch.empty(0, 3, 4, 4), labels=torch.empty(0, dtype=torch.long), ids=()
        )
        with pytest.raises(ValueError):
            next(mix_real_synthetic(real, empty, (1, 1), 8))

    def test_single_source_counts(self):
        ds = _flat_dataset(5, 0.5, 0, "only")
        batch = next(single_source(ds, 8, seed=0))
        assert batch.n_real == 8 and batch.n_synthetic == 0
        assert batch.images.shape[0] == 8


class TestCutout:
    def test_side_under_area_reading(self):
        assert cutout_side(32, area_fraction=True) == round(32 * math.sqrt(1 / 8))
        assert cutout_side(32, area_fraction=True) == 11

    def test_side_under_literal_reading(self):
        assert cutout_side(32, area_fraction=False) == 4

    def test_masked_pixel_count_exact(self):
        side = 11
        x = torch.ones(6, 3, 32, 32)
        out = cutout(x, side, torch.Generator().manual_seed(0))
        for i in range(6):
            assert int((out[i] == 0).sum()) == side * side * 3

    def test_all_ones_sum_drop_exact(self):
        side = 5
        x = torch.ones(4, 3, 16, 16)
        out = cutout(x, side, torch.Generator().manual_seed(1))
        for i in range(4):
            assert float(x[i].sum() - out[i].sum()) == side * side * 3

    def test_fixed_seed_identical_placement(self):
        x = torch.rand(3, 3, 16, 16)
        a = cutout(x, 4, torch.Generator().manual_seed(5))
        b = cutout(x, 4, torch.Generator().manual_seed(5))
        assert torch.equal(a, b)

    def test_source_not_mutated(self):
        x = torch.ones(2, 3, 8, 8)
        cutout(x, 3, torch.Generator().manual_seed(0))
        assert torch.all(x == 1.0)

    def test_oversized_side_rejected(self):
        with pytest.raises(ValueError):
            cutout(torch.ones(1, 3, 8, 8), 9, torch.Generator())


class TestMixedLossIdentities:
    def test_endpoint_identities_bitwise(self):
        gen = torch.Generator().manual_seed(0)
        pred = torch.randn(8, 3, generator=gen)
        y_a = torch.randint(0, 3, (8,), generator=gen)
        y_b = torch.randint(0, 3, (8,), generator=gen)
        assert torch.equal(mixed_criterion(pred, y_a, y_b, 1.0), F.cross_entropy(pred, y_a))
        assert torch.equal(mixed_criterion(pred, y_a, y_b, 0.0), F.cross_entropy(pred, y_b))

    def test_interior_is_convex_combination(self):
        pred = torch.randn(4, 2)
        y_a = torch.tensor([0, 1, 0, 1])
        y_b = torch.tensor([1, 0, 1, 0])
        lam = 0.3
        expect = lam * F.cross_entropy(pred, y_a) + (1 - lam) * F.cross_entropy(pred, y_b)
        assert torch.equal(mixed_criterion(pred, y_a, y_b, lam), expect)


class TestMixup:
    def test_equal_pair_idempotent(self):
        x = torch.rand(1, 3, 4, 4).expand(6, -1, -1, -1).clone()
        y = torch.zeros(6, dtype=torch.long)
        mixed, y_a, y_b, lam = mixup(x, y, torch.Generator().manual_seed(3))
        assert 0.0 <= lam <= 1.0
        assert torch.allclose(mixed, x, atol=1e-6)

    def test_convex_combination_of_batch_and_permutation(self):
        # batch of constant images with distinct values; the mix must land
        # exactly on lam*x + (1-lam)*x[perm] for a permutation recoverable
        # from the returned partner labels
        x = torch.stack([torch.full((3, 2, 2), float(v)) for v in range(4)])
        y = torch.arange(4)
        mixed, y_a, y_b, lam = mixup(x, y, torch.Generator().manual_seed(1))
        assert torch.equal(y_a, y)
        expect = lam * x + (1.0 - lam) * x[y_b]
        assert torch.allclose(mixed, expect, atol=1e-7)

    def test_beta11_draws_are_uniform(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.zeros(2, 1, 2, 2)
        y = torch.zeros(2, dtype=torch.long)
        lams = [mixup(x, y, gen)[3] for _ in range(10_000)]
        mean = sum(lams) / len(lams)
        assert abs(mean - 0.5) < 0.02
        assert all(0.0 <= l <= 1.0 for l in lams)

    def test_tiny_batch_rejected(self):
        with pytest.raises(ValueError):
            mixup(torch.zeros(1, 3, 4, 4), torch.zeros(1, dtype=torch.long),
                  torch.Generator())

    def test_deterministic_per_seed(self):
        x = torch.rand(4, 3, 4, 4)
        y = torch.arange(4)
        a = mixup(x, y, torch.Generator().manual_seed(2))
        b = mixup(x, y, torch.Generator().manual_seed(2))
        assert torch.equal(a[0], b[0]) and a[3] == b[3]


class TestCutmix:
    def test_lambda_matches_pixel_count_oracle(self):
        x = torch.stack([torch.zeros(3, 8, 8), torch.ones(3, 8, 8)])
        y = torch.arange(2)
        seen_swap = False
        for seed in range(24):
            mixed, y_a, y_b, lam = cutmix(x, y, torch.Generator().manual_seed(seed))
            assert 0.0 <= lam <= 1.0
            if torch.equal(y_b, y):
                continue  # identity permutation: box invisible on equal pairs
            seen_swap = True
            for i in range(2):
                pasted = int((mixed[i] != x[i]).sum()) // 3
                assert lam == 1.0 - pasted / 64.0
        assert seen_swap

    def test_deterministic_per_seed(self):
        x = torch.rand(4, 3, 8, 8)
        y = torch.arange(4)
        a = cutmix(x, y, torch.Generator().manual_seed(6))
        b = cutmix(x, y, torch.Generator().manual_seed(6))
        assert torch.equal(a[0], b[0]) and a[3] == b[3]

    def test_tiny_batch_rejected(self):
        with pytest.raises(ValueError):
            cutmix(torch.zeros(1, 3, 4, 4), torch.zeros(1, dtype=torch.long),
                   torch.Generator())


# ---------------------------------------------------------------------------
# Classifier training


def _separable_pair(n_train=64, n_test=40, res=8, seed=0):
    gen = torch.Generator().manual_seed(seed)

    def build(n, prefix):
        labels = torch.arange(n) % 2
        base = torch.where(labels[:, None, None, None] == 0,
                           torch.tensor(0.2), torch.tensor(0.8))
        images = (base + 0.02 * torch.randn(n, 3, res, res, generator=gen)).clamp(0, 1)
        return ImageDataset(images=images, labels=labels,
                            ids=tuple(f"{prefix}-{i:03d}" for i in range(n)))

    return build(n_train, "tr"), build(n_test, "te")


class TestTrainClassifier:
    def test_separable_data_high_accuracy(self):
        train, test = _separable_pair()
        cfg = ClassifierConfig(arch="resnet8-16", epochs=8, batch_size=32, seeds=(0,))
        report = train_classifier(train, test, cfg)
        assert report.mean_accuracy > 0.95
        assert not report.failed_seeds

    def test_same_seed_identical_accuracy(self):
        train, test = _separable_pair(n_train=32, n_test=16)
        cfg = ClassifierConfig(arch="resnet8-16", epochs=1, batch_size=16, seeds=(0,))
        r1 = train_classifier(train, test, cfg)
        r2 = train_classifier(train, test, cfg)
        assert r1.accuracies == r2.accuracies

    def test_random_labels_hit_chance_level(self):
        torch.manual_seed(3)
        gen = torch.Generator().manual_seed(1)
        mk = lambda n, prefix: ImageDataset(
            images=torch.rand(n, 3, 8, 8, generator=gen),
            labels=torch.randint(0, 2, (n,), generator=gen),
            ids=tuple(f"{prefix}-{i:03d}" for i in range(n)),
        )
        cfg = ClassifierConfig(arch="resnet8-16", epochs=2, batch_size=32, seeds=(0,))
        report = train_classifier(mk(64, "tr"), mk(200, "te"), cfg)
        assert abs(report.mean_accuracy - 0.5) <= 0.1

    def test_id_overlap_rejected(self):
        train, _ = _separable_pair(n_train=8, n_test=8)
        with pytest.raises(ValueError, match="share"):
            train_classifier(train, train, ClassifierConfig(seeds=(0,), epochs=1))

    def test_equal_step_budget_overrides_dataset_size(self):
        small, test = _separable_pair(n_train=16, n_test=8)
        big, _ = _separable_pair(n_train=64, n_test=8, seed=2)
        cfg = ClassifierConfig(
            arch="resnet8-16", epochs=2, batch_size=16, seeds=(0,),
            equal_steps_reference=48,
        )
        r_small = train_classifier(small, test, cfg)
        r_big = train_classifier(big, test, cfg)
        expect = 2 * math.ceil(48 / 16)
        assert r_small.provenance["total_steps"] == expect
        assert r_big.provenance["total_steps"] == expect

    def test_nan_seed_recorded_not_fatal(self):
        train, test = _separable_pair(n_train=16, n_test=8)
        cfg = ClassifierConfig(
            arch="resnet8-16", epochs=2, batch_size=8, seeds=(0,), lr=float("inf")
        )
        report = train_classifier(train, test, cfg)
        assert 0 in report.failed_seeds
        assert report.accuracies == {}
        assert report.mean_accuracy == 0.0

    def test_mixed_stream_training_runs(self):
        train, test = _separable_pair(n_train=24, n_test=8)
        syn, _ = _separable_pair(n_train=24, n_test=8, seed=3)
        syn = ImageDataset(images=syn.images, labels=syn.labels,
                           ids=tuple(f"syn-{i}" for i in range(24)))
        cfg = ClassifierConfig(arch="resnet8-16", epochs=1, batch_size=16, seeds=(0,))
        report = train_classifier(train, test, cfg, synthetic=syn, mix_ratio=(1, 1))
        assert report.provenance["mix_ratio"] == [1, 1]
        assert not report.failed_seeds

    def test_penultimate_feature_width(self):
        model = build_classifier("resnet8-16", num_classes=3)
        ds, _ = _separable_pair(n_train=6, n_test=6)
        feats = penultimate_features(model, ds)
        assert feats.shape == (6, 64)
        assert feats.dtype.name == "float64"


class TestTrainReport:
    def _report(self):
        import numpy as np

        return TrainReport(
            accuracies={0: 0.9, 1: 0.8},
            mean_accuracy=float(np.mean([0.9, 0.8])),
            std_accuracy=float(np.std([0.9, 0.8])),
            provenance={"note": "x"},
            wall_time_s=1.5,
        )

    def test_roundtrip(self, tmp_path):
        rep = self._report()
        rep.save(tmp_path / "report.json")
        back = TrainReport.load(tmp_path / "report.json")
        assert back.accuracies == rep.accuracies
        assert back.mean_accuracy == rep.mean_accuracy
        assert back.std_accuracy == rep.std_accuracy
        assert back.provenance == rep.provenance
        assert back.failed_seeds == {}

    def test_inconsistent_mean_rejected(self):
        with pytest.raises(ValueError, match="mean"):
            TrainReport(accuracies={0: 0.9}, mean_accuracy=0.5, std_accuracy=0.0,
                        provenance={}, wall_time_s=0.0)

    def test_out_of_range_accuracy_rejected(self):
        with pytest.raises(ValueError):
            TrainReport(accuracies={0: 1.5}, mean_accuracy=1.5, std_accuracy=0.0,
                        provenance={}, wall_time_s=0.0)


class TestScalingExperiment:
    def test_single_cell_matches_direct_training(self):
        train, test = _separable_pair(n_train=24, n_test=8)
        cfg = ClassifierConfig(arch="resnet8-16", epochs=1, batch_size=16, seeds=(0,))
        direct = train_classifier(train, test, cfg)
        table = scaling_experiment([ScalingCell(name="base", train_set=train)], test, cfg)
        assert table["base"].accuracies == direct.accuracies

    def test_cell_failure_recorded_not_fatal(self):
        train, test = _separable_pair(n_train=8, n_test=8)
        cfg = ClassifierConfig(arch="resnet8-16", epochs=1, batch_size=8, seeds=(0,))
        table = scaling_experiment(
            [
                ScalingCell(name="ok", train_set=train),
                ScalingCell(name="broken", train_set=test),  # overlaps the test ids
            ],
            test,
            cfg,
        )
        assert not table["ok"].failed_seeds
        assert table["broken"].failed_seeds
        assert "error" in table["broken"].provenance


# ---------------------------------------------------------------------------
# Input-space ascent augmentation


class TestAdversarialAugment:
    def test_single_ascent_step_raises_per_sample_loss(self):
        torch.manual_seed(0)
        gen = torch.Generator().manual_seed(0)
        images = torch.rand(96, 3, 8, 8, generator=gen)
        labels = torch.randint(0, 3, (96,), generator=gen)
        model = build_classifier("resnet8-16", 3)
        model.eval()
        cfg = AdversarialAugmentConfig(ascent_steps=1, step_size=1e-3)
        perturbed = adversarial_perturb(model, images, labels, cfg)
        with torch.no_grad():
            before = F.cross_entropy(model(images), labels, reduction="none")
            after = F.cross_entropy(model(perturbed), labels, reduction="none")
        frac = float((after >= before).float().mean())
        assert frac >= 0.99

    def test_step_clip_bounds_displacement(self):
        torch.manual_seed(1)
        images = torch.rand(8, 3, 8, 8)
        labels = torch.randint(0, 3, (8,))
        model = build_classifier("resnet8-16", 3)
        cfg = AdversarialAugmentConfig(ascent_steps=1, step_size=1e6, step_clip=0.05)
        perturbed = adversarial_perturb(model, images, labels, cfg)
        assert float((perturbed - images).abs().max()) <= 0.05 + 1e-7

    def test_entropy_bonus_branch_runs(self):
        torch.manual_seed(2)
        images = torch.rand(4, 3, 8, 8)
        labels = torch.randint(0, 3, (4,))
        model = build_classifier("resnet8-16", 3)
        cfg = AdversarialAugmentConfig(ascent_steps=1, step_size=1e-3, entropy_weight=0.1)
        perturbed = adversarial_perturb(model, images, labels, cfg)
        assert perturbed.shape == images.shape
        assert torch.isfinite(perturbed).all()

    def test_zero_rounds_keeps_dataset(self):
        train, test = _separable_pair(n_train=16, n_test=8)
        clf_cfg = ClassifierConfig(arch="resnet8-16", epochs=1, batch_size=8, seeds=(0,))
        adv_cfg = AdversarialAugmentConfig(rounds=0, train_steps_per_round=2)
        pool, model = me_ada_rounds(train, test, clf_cfg, adv_cfg)
        assert pool.ids == train.ids
        assert torch.equal(pool.images, train.images)
        assert isinstance(evaluate(model, test), float)

    def test_two_rounds_triple_the_pool(self):
        train, test = _separable_pair(n_train=12, n_test=8)
        clf_cfg = ClassifierConfig(arch="resnet8-16", epochs=1, batch_size=8, seeds=(0,))
        adv_cfg = AdversarialAugmentConfig(rounds=2, train_steps_per_round=2)
        pool, _ = me_ada_rounds(train, test, clf_cfg, adv_cfg)
        assert len(pool) == 3 * len(train)
        assert pool.ids[: len(train)] == train.ids
        assert any(i.endswith("-adv0") for i in pool.ids)
        assert any(i.endswith("-adv1") for i in pool.ids)
        assert torch.equal(pool.labels, torch.cat([train.labels] * 3))
