# *******************************************************************************
# Copyright (c) 2026 Contributors to the bpu project
#
# See the NOTICE file(s) distributed with this work for additional
# information regarding copyright ownership.
#
# This program and the accompanying materials are made available under the
# terms of the Apache License Version 2.0 which is available at
# https://www.apache.org/licenses/LICENSE-2.0
#
# SPDX-License-Identifier: Apache-2.0
# *******************************************************************************
import numpy as np
import pytest
from test_properties import add_test_properties

from bpu.adapters import AdapterKind, attach_adapters
from bpu.config import DataKind, PretrainSection
from bpu.core_math import RngStream
from bpu.errors import ContractViolation
from bpu.evalkit import (
    BLOB_RADIUS_SCALE,
    Dataset,
    DatasetSpec,
    ReferenceCache,
    SplitSpec,
    accuracy,
    attack_accuracy_from_losses,
    evaluate,
    generate,
    harmonic_mean,
    ks_pvalue,
    ks_statistic,
    membership_disjoint,
    split,
    train_reference,
)
from bpu.nnet import init_mlp


def brute_force_ks(a: np.ndarray, b: np.ndarray) -> float:
    worst = 0.0
    for t in np.concatenate([a, b]):
        worst = max(worst, abs(np.mean(a <= t) - np.mean(b <= t)))
    return float(worst)


def blobs(n: int = 60, seed: int = 1, seq_len: int | None = None) -> Dataset:
    return generate(DatasetSpec(DataKind.BLOBS, n, 3, 4, 0.5, seed, seq_len))


@add_test_properties(
    partially_verifies=["comp_req__bpu__synthetic_data"],
    test_type="requirements-based",
    derivation_technique="requirements-analysis",
)
class TestGenerate:
    def test_blobs(self):
        data = blobs()
        assert data.inputs.shape == (60, 4)
        assert data.labels.tolist() == [i % 3 for i in range(60)]
        assert np.array_equal(data.indices, np.arange(60))
        for c in range(3):
            centre = data.inputs[data.labels == c].mean(axis=0)
            assert np.linalg.norm(centre) == pytest.approx(BLOB_RADIUS_SCALE * 0.5, abs=0.4)

    def test_sequences(self):
        data = blobs(seq_len=5)
        assert data.inputs.shape == (60, 5, 4)

    def test_tight_blobs(self):
        data = generate(DatasetSpec(DataKind.BLOBS, 60, 3, 16, 0.1, seed=6))
        assert np.bincount(data.labels).tolist() == [20, 20, 20]
        centres = np.stack([data.inputs[data.labels == c].mean(axis=0) for c in range(3)])
        for centre in centres:
            assert np.linalg.norm(centre) == pytest.approx(BLOB_RADIUS_SCALE * 0.1, abs=0.08)
        dist = np.linalg.norm(data.inputs[:, None, :] - centres[None, :, :], axis=2)
        assert np.mean(np.argmin(dist, axis=1) == data.labels) >= 0.95

    def test_geometry_scales_with_spread(self):
        wide = generate(DatasetSpec(DataKind.BLOBS, 30, 3, 8, 1.0, seed=2))
        tight = generate(DatasetSpec(DataKind.BLOBS, 30, 3, 8, 0.1, seed=2))
        np.testing.assert_allclose(tight.inputs, 0.1 * wide.inputs, rtol=1e-12, atol=1e-15)
        assert np.array_equal(tight.labels, wide.labels)

    def test_random_label(self):
        data = generate(DatasetSpec(DataKind.RANDOM_LABEL, 200, 4, 3, seed=9))
        assert data.inputs.shape == (200, 3)
        assert set(data.labels.tolist()) == {0, 1, 2, 3}
        assert abs(float(np.mean(data.inputs))) < 0.2

    def test_random_label_histogram(self):
        data = generate(DatasetSpec(DataKind.RANDOM_LABEL, 8000, 8, 1, seed=2))
        counts = np.bincount(data.labels, minlength=8)
        assert np.all(np.abs(counts - 1000) <= 110)

    @pytest.mark.parametrize("kind", list(DataKind))
    def test_deterministic(self, kind: DataKind):
        spec = DatasetSpec(kind, 30, 3, 4, seed=4)
        first, second = generate(spec), generate(spec)
        assert np.array_equal(first.inputs, second.inputs)
        assert np.array_equal(first.labels, second.labels)
        other = generate(DatasetSpec(kind, 30, 3, 4, seed=5))
        assert not np.array_equal(first.inputs, other.inputs)

    def test_too_few_blobs(self):
        with pytest.raises(ContractViolation):
            generate(DatasetSpec(DataKind.BLOBS, 2, 3, 4))

    def test_labels_checked(self):
        data = blobs()
        with pytest.raises(ContractViolation):
            Dataset(data.inputs, data.labels + 1, data.spec)


@add_test_properties(
    partially_verifies=["comp_req__bpu__synthetic_data"],
    test_type="requirements-based",
    derivation_technique="boundary-values",
)
class TestSplit:
    def test_sizes_and_cover(self):
        data = blobs(100)
        retain, forget, holdout = split(data, SplitSpec(0.1, 0.2, seed=3))
        assert (len(retain), len(forget), len(holdout)) == (70, 10, 20)
        joined = np.concatenate([retain.indices, forget.indices, holdout.indices])
        assert sorted(joined.tolist()) == list(range(100))
        assert membership_disjoint(retain, forget)
        assert membership_disjoint(retain, holdout)
        assert not membership_disjoint(retain.union(forget), forget)

    def test_cut_uses_exact_fraction(self):
        _, forget, _ = split(blobs(100), SplitSpec(0.29, 0.1))
        assert len(forget) == 29

    def test_seeded(self):
        data = blobs(50)
        first = split(data, SplitSpec(0.2, 0.2, seed=8))
        second = split(data, SplitSpec(0.2, 0.2, seed=8))
        other = split(data, SplitSpec(0.2, 0.2, seed=9))
        assert np.array_equal(first[1].indices, second[1].indices)
        assert not np.array_equal(first[1].indices, other[1].indices)

    def test_rows_follow_indices(self):
        data = blobs(40)
        _, forget, _ = split(data, SplitSpec(0.25, 0.25))
        assert np.array_equal(forget.inputs, data.inputs[forget.indices])
        assert np.array_equal(forget.labels, data.labels[forget.indices])

    @pytest.mark.parametrize("fractions", [(0.0, 0.2), (0.5, 0.5), (0.1, 1.0), (0.7, 0.4)])
    def test_invalid_fractions(self, fractions):
        with pytest.raises(ContractViolation):
            SplitSpec(*fractions)


@add_test_properties(
    partially_verifies=["comp_req__bpu__evaluation_proxies"],
    test_type="requirements-based",
    derivation_technique="requirements-analysis",
)
class TestStatistics:
    @pytest.mark.parametrize("seed", range(6))
    def test_ks_matches_brute_force(self, seed: int):
        stream = RngStream(seed)
        a = np.round(stream.gaussian_vector(13 + seed), 1)
        b = np.round(stream.gaussian_vector(9, 0.3), 1)
        assert ks_statistic(a, b) == pytest.approx(brute_force_ks(a, b), abs=1e-15)

    def test_ks_hand_case(self):
        assert ks_statistic([1.0, 2.0, 3.0], [2.5, 3.5]) == pytest.approx(2.0 / 3.0)

    def test_ks_extremes(self):
        assert ks_statistic([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]) == 0.0
        assert ks_statistic([1.0, 2.0], [5.0, 6.0, 7.0]) == 1.0
        with pytest.raises(ContractViolation):
            ks_statistic([], [1.0])

    @pytest.mark.parametrize(
        "d, n1, n2, expected",
        [
            (0.5, 20, 20, 0.0081616786591430686),
            (0.3, 50, 30, 0.054348407759054286),
        ],
    )
    def test_pvalue(self, d: float, n1: int, n2: int, expected: float):
        assert ks_pvalue(d, n1, n2) == pytest.approx(expected, rel=1e-10)

    def test_pvalue_of_identical_samples(self):
        assert ks_pvalue(0.0, 10, 10) == 1.0
        assert ks_pvalue(1.0, 100, 100) < 1e-12
        assert ks_pvalue(1e-6, 10, 10) == 1.0

    def test_pvalue_is_monotone(self):
        values = [ks_pvalue(d, 30, 30) for d in np.linspace(0.05, 1.0, 20)]
        assert all(0.0 <= v <= 1.0 for v in values)
        assert values == sorted(values, reverse=True)

    @pytest.mark.parametrize("args", [(-0.1, 5, 5), (1.1, 5, 5), (0.5, 0, 5)])
    def test_pvalue_domain(self, args):
        with pytest.raises(ContractViolation):
            ks_pvalue(*args)

    def test_attack_accuracy(self):
        assert attack_accuracy_from_losses([0.1, 0.2, 0.3], [1.0, 2.0]) == 1.0
        assert attack_accuracy_from_losses([1.0, 2.0], [0.1, 0.2, 0.3]) == 1.0
        assert attack_accuracy_from_losses([0.5, 0.5], [0.5, 0.5]) == 0.5
        assert attack_accuracy_from_losses([0.1, 0.9], [0.5, 1.0]) == 0.75
        assert attack_accuracy_from_losses([0.1, 0.2], [0.15, 0.3]) == 0.75
        with pytest.raises(ContractViolation):
            attack_accuracy_from_losses([], [1.0])

    def test_harmonic_mean(self):
        assert harmonic_mean(1.0, 1.0) == 1.0
        assert harmonic_mean(0.5, 1.0) == pytest.approx(2.0 / 3.0)
        assert harmonic_mean(0.0, 1.0) == 0.0


@add_test_properties(
    partially_verifies=["comp_req__bpu__reference_model"],
    test_type="interface-test",
    derivation_technique="requirements-analysis",
)
class TestReference:
    section = PretrainSection(iterations=150, learning_rate=0.05, batch_size=8)

    def test_cache_round_trip(self, tmp_path):
        params = {"layer1.W": np.arange(6.0).reshape(2, 3), "layer1.b": np.ones(2)}
        ReferenceCache(tmp_path).put("abc", params)
        assert (tmp_path / "reference-abc.npz").is_file()
        assert not list(tmp_path.glob("*.tmp"))
        loaded = ReferenceCache(tmp_path).get("abc")
        assert loaded.keys() == params.keys()
        assert np.array_equal(loaded["layer1.W"], params["layer1.W"])
        assert ReferenceCache(tmp_path).get("missing") is None

    def test_memory_cache_returns_copies(self):
        cache = ReferenceCache()
        cache.put("k", {"w": np.zeros(2)})
        cache.get("k")["w"][0] = 5.0
        assert cache.get("k")["w"][0] == 0.0

    def test_train_reference_uses_cache(self, tmp_path):
        retain, _, _ = split(blobs(), SplitSpec(0.2, 0.2))
        template = init_mlp(RngStream(0), [4, 6, 3])
        cache = ReferenceCache(tmp_path)
        first = train_reference(retain, template, self.section, RngStream(1), cache, "key")
        second = train_reference(retain, template, self.section, RngStream(2), ReferenceCache(tmp_path), "key")
        for name, value in first.parameters().items():
            assert np.array_equal(value, second.parameters()[name])
        assert first.adapters == {}

    def test_reference_fits_tight_blobs(self):
        data = generate(DatasetSpec(DataKind.BLOBS, 90, 3, 16, 0.1, seed=6))
        retain, forget, _ = split(data, SplitSpec(0.1, 0.2, seed=1))
        reference = train_reference(retain, init_mlp(RngStream(3), [16, 16, 3]), PretrainSection(), RngStream(4))
        assert accuracy(reference, retain) >= 0.95
        assert membership_disjoint(retain, forget)

    def test_train_reference_leaves_template(self):
        retain, _, _ = split(blobs(), SplitSpec(0.2, 0.2))
        template = init_mlp(RngStream(0), [4, 6, 3])
        before = template.weights[0].copy()
        train_reference(retain, template, self.section, RngStream(1))
        assert np.array_equal(template.weights[0], before)

    def test_evaluate_against_itself(self):
        retain, forget, holdout = split(blobs(), SplitSpec(0.2, 0.2))
        template = init_mlp(RngStream(0), [4, 6, 3])
        reference = train_reference(retain, template, self.section, RngStream(1))
        report = evaluate(reference, reference, retain, forget, holdout)
        assert report.forget_quality_proxy == 1.0
        assert 0.5 <= report.membership_attack_acc <= 1.0
        assert report.model_utility_proxy == pytest.approx(harmonic_mean(report.retain_acc, report.holdout_acc))
        assert set(report.to_dict()) == {
            "forget_quality_proxy",
            "model_utility_proxy",
            "membership_attack_acc",
            "retain_acc",
            "forget_acc",
            "holdout_acc",
            "forget_loss_mean",
        }

    def test_adapted_model_scores(self):
        retain, forget, holdout = split(blobs(), SplitSpec(0.2, 0.2))
        model = attach_adapters(init_mlp(RngStream(0), [4, 6, 3]), [1], AdapterKind(), 2, RngStream(1))
        report = evaluate(model, model, retain, forget, holdout)
        assert report.forget_loss_mean > 0.0
