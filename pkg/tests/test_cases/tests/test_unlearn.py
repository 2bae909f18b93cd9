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
import math

import numpy as np
import pytest
from test_properties import add_test_properties

import bpu.unlearn
from bpu.adapters import AdaptedMlp, AdapterKind, AdapterVariant, attach_adapters
from bpu.config import (
    AdamWSettings,
    DataKind,
    GuardMode,
    GuardSettings,
    ObjectiveMode,
    OptimizerKind,
    PretrainSection,
    TrainConfig,
)
from bpu.core_math import RngStream
from bpu.errors import ContractViolation, NumericEvent
from bpu.evalkit import Dataset, DatasetSpec, generate
from bpu.nnet import init_mlp
from bpu.unlearn import (
    DivergenceGuard,
    OptState,
    Outcome,
    UnlearnSession,
    adamw_step,
    compute_objective_grads,
    grad_difference_step,
    objective_coefficients,
    pretrain,
    run_unlearning,
    sample_batch,
    sgd_step,
    step_direction,
)


def blobs(n: int = 30, seed: int = 5) -> Dataset:
    return generate(DatasetSpec(DataKind.BLOBS, n, 3, 4, 1.0, seed))


def adapted(kind: AdapterKind | None = None) -> AdaptedMlp:
    return attach_adapters(init_mlp(RngStream(1), [4, 8, 3]), [1, 2], kind or AdapterKind(), 2, RngStream(2))


def plain_mlp() -> AdaptedMlp:
    return attach_adapters(init_mlp(RngStream(1), [4, 8, 3]), [], AdapterKind(), 1, RngStream(2), full_finetune=True)


def session(config: TrainConfig, seed: int = 11, kind: AdapterKind | None = None, **kwargs) -> UnlearnSession:
    data = blobs()
    retain, forget = data.take(range(20)), data.take(range(20, 30))
    return UnlearnSession(adapted(kind), retain, forget, config, RngStream(seed), **kwargs)


@add_test_properties(
    partially_verifies=["comp_req__bpu__unlearning_update"],
    test_type="requirements-based",
    derivation_technique="requirements-analysis",
)
class TestUpdateRules:
    theta = {"w": np.array([[1.0, -2.0], [0.5, 0.0]]), "b": np.array([3.0])}
    grad_r = {"w": np.array([[0.1, 0.2], [0.3, 0.4]]), "b": np.array([1.0])}
    grad_f = {"w": np.array([[-1.0, 1.0], [2.0, 0.0]]), "b": np.array([-2.0])}

    def test_grad_difference_step(self):
        new = grad_difference_step(self.theta, self.grad_r, self.grad_f, 0.5, 0.25)
        assert np.allclose(new["w"], [[0.7, -1.85], [0.85, -0.2]], atol=1e-15)
        assert np.allclose(new["b"], [2.0], atol=1e-15)
        assert self.theta["w"][0, 0] == 1.0

    def test_scalar_case(self):
        new = grad_difference_step({"t": np.array(1.0)}, {"t": np.array(2.0)}, {"t": np.array(3.0)}, 0.1, 0.2)
        assert float(new["t"]) == pytest.approx(1.4)

    def test_zero_rates_keep_parameters(self):
        new = grad_difference_step(self.theta, self.grad_r, self.grad_f, 0.0, 0.0)
        for key, value in self.theta.items():
            assert np.array_equal(new[key], value)

    def test_sgd_step(self):
        new = sgd_step(self.theta, self.grad_f, 0.1)
        assert np.allclose(new["w"], [[0.9, -1.9], [0.7, 0.0]], atol=1e-15)

    def test_step_direction(self):
        direction = step_direction(self.grad_r, self.grad_f, 0.5, 0.25)
        assert np.allclose(direction["w"], [[-0.3, 0.15], [0.35, -0.2]], atol=1e-15)
        assert np.allclose(direction["b"], [-1.0], atol=1e-15)

    def test_mismatched_gradients(self):
        with pytest.raises(ContractViolation):
            grad_difference_step(self.theta, {"w": self.grad_r["w"]}, self.grad_f, 1.0, 1.0)
        with pytest.raises(ContractViolation):
            sgd_step(self.theta, {"w": np.zeros(2), "b": np.zeros(1)}, 1.0)

    def test_adamw_first_step_is_sign(self):
        new, state = adamw_step(self.theta, self.grad_f, OptState(), 1e-3, weight_decay=0.0)
        expected = self.theta["w"] - 1e-3 * np.sign(self.grad_f["w"])
        assert np.allclose(new["w"], expected, atol=1e-10)
        assert state.step == 1
        assert np.allclose(state.first["w"], 0.1 * self.grad_f["w"])

    def test_adamw_matches_reference(self):
        lr, b1, b2, eps, wd = 1e-2, 0.8, 0.95, 1e-8, 0.1
        state = OptState()
        theta = dict(self.theta)
        m = np.zeros((2, 2))
        v = np.zeros((2, 2))
        w = self.theta["w"].copy()
        for t, g in enumerate([self.grad_r["w"], self.grad_f["w"], self.grad_r["w"]], start=1):
            theta, state = adamw_step(
                theta, {"w": g, "b": np.zeros(1)}, state, lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd
            )
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w * (1 - lr * wd) - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert np.allclose(theta["w"], w, atol=1e-14)
        assert state.step == 3

    def test_adamw_decay_only(self):
        new, _ = adamw_step(self.theta, {k: np.zeros_like(v) for k, v in self.theta.items()}, OptState(), 0.1)
        assert np.allclose(new["b"], [3.0 * (1 - 0.1 * 0.01)], atol=1e-15)

    def test_adamw_leaves_state_untouched(self):
        state = OptState()
        adamw_step(self.theta, self.grad_r, state, 1e-3)
        assert state.step == 0
        assert not state.first


@add_test_properties(
    partially_verifies=["comp_req__bpu__unlearning_update"],
    test_type="requirements-based",
    derivation_technique="equivalence-classes",
)
class TestObjective:
    @pytest.mark.parametrize(
        "mode, alpha_r, alpha_f, lam, expected",
        [
            (ObjectiveMode.GRADIENT_DIFFERENCE, 1.0, 1.0, 1.0, (1.0, -1.0)),
            (ObjectiveMode.GRADIENT_DIFFERENCE, 0.5, 2.0, 1.0, (1.0, -4.0)),
            (ObjectiveMode.GRADIENT_DIFFERENCE, 0.0, 2.0, 1.0, (0.0, -1.0)),
            (ObjectiveMode.GRADIENT_DIFFERENCE, 0.0, 0.0, 1.0, (0.0, 0.0)),
            (ObjectiveMode.PURE_ASCENT, 1.0, 1.0, 1.0, (0.0, -1.0)),
            (ObjectiveMode.COMBINED, 1.0, 1.0, 0.25, (1.0, -0.25)),
        ],
    )
    def test_coefficients(self, mode, alpha_r, alpha_f, lam, expected):
        assert objective_coefficients(mode, alpha_r, alpha_f, lam) == expected

    def test_combined_gradient(self):
        model = adapted()
        data = blobs()
        retain, forget = (data.inputs[:6], data.labels[:6]), (data.inputs[6:10], data.labels[6:10])
        grads = compute_objective_grads(model, retain, forget, ObjectiveMode.COMBINED, lam=0.5)
        for key, value in grads.params.items():
            assert np.allclose(value, grads.retain.params[key] - 0.5 * grads.forget.params[key], atol=1e-15)
        for key, value in grads.weights.items():
            assert np.allclose(value, grads.retain.weights[key] - 0.5 * grads.forget.weights[key], atol=1e-15)

    def test_pure_ascent_ignores_retain(self):
        model = adapted()
        data = blobs()
        retain, forget = (data.inputs[:6], data.labels[:6]), (data.inputs[6:10], data.labels[6:10])
        grads = compute_objective_grads(model, retain, forget, ObjectiveMode.PURE_ASCENT)
        assert grads.retain is not None
        assert math.isfinite(grads.retain.loss)
        for key, value in grads.params.items():
            assert np.array_equal(value, -grads.forget.params[key])

    def test_missing_batches(self):
        model = adapted()
        data = blobs()
        batch = (data.inputs[:4], data.labels[:4])
        empty = (data.inputs[:0], data.labels[:0])
        with pytest.raises(ContractViolation):
            compute_objective_grads(model, batch, None, ObjectiveMode.GRADIENT_DIFFERENCE)
        with pytest.raises(ContractViolation):
            compute_objective_grads(model, empty, batch, ObjectiveMode.COMBINED)
        grads = compute_objective_grads(model, None, batch, ObjectiveMode.PURE_ASCENT)
        assert grads.retain is None

    def test_sample_batch_is_seeded(self):
        data = blobs()
        x1, y1 = sample_batch(RngStream(4), data, 7)
        x2, y2 = sample_batch(RngStream(4), data, 7)
        assert x1.shape == (7, 4)
        assert np.array_equal(x1, x2)
        assert np.array_equal(y1, y2)


@add_test_properties(
    partially_verifies=["comp_req__bpu__divergence_guard"],
    test_type="requirements-based",
    derivation_technique="boundary-values",
)
class TestDivergenceGuard:
    def test_baseline_is_first_positive_norm(self):
        guard = DivergenceGuard(10.0)
        assert not guard.check(1, 0.0)
        assert guard.baseline is None
        assert not guard.check(2, 2.0)
        assert guard.baseline == 2.0
        assert not guard.check(3, 20.0)
        assert guard.check(4, 20.000001)
        assert guard.events == [4]

    @pytest.mark.parametrize("norm", [math.inf, math.nan])
    def test_nonfinite_fires(self, norm: float):
        guard = DivergenceGuard(10.0)
        assert guard.check(1, norm)
        assert guard.events == [1]

    def test_keeps_recording(self):
        guard = DivergenceGuard(2.0)
        for it, norm in enumerate([1.0, 3.0, 1.5, 5.0], start=1):
            guard.check(it, norm)
        assert guard.events == [2, 4]


@add_test_properties(
    partially_verifies=["comp_req__bpu__unlearning_update", "comp_req__bpu__divergence_guard"],
    test_type="interface-test",
    derivation_technique="requirements-analysis",
)
class TestRunUnlearning:
    def test_completes(self):
        config = TrainConfig(iterations=6, batch_size=4, learning_rate=1e-3)
        s = session(config)
        base = {k: w.copy() for k, w in s.model.base_weights().items()}
        result = run_unlearning(s)
        assert result.outcome is Outcome.COMPLETED
        assert not result.diverged
        assert result.stopped_at is None
        assert [rec.iter for rec in result.history] == list(range(1, 7))
        assert result.bound_violations == 0
        for name, w in result.model.base_weights().items():
            assert np.array_equal(w, base[name])
        assert not np.array_equal(result.model.adapters["layer1"].b, np.zeros((4, 2)))

    @pytest.mark.parametrize("optimizer", list(OptimizerKind))
    @pytest.mark.parametrize("mode", list(ObjectiveMode))
    def test_deterministic(self, optimizer: OptimizerKind, mode: ObjectiveMode):
        config = TrainConfig(iterations=4, batch_size=3, learning_rate=1e-3, optimizer=optimizer, objective_mode=mode)
        first = run_unlearning(session(config))
        second = run_unlearning(session(config))
        np.testing.assert_array_equal(
            [r.loss_forget for r in first.history], [r.loss_forget for r in second.history]
        )
        for key, value in first.model.parameters().items():
            np.testing.assert_array_equal(value, second.model.parameters()[key])

    def test_forget_loss_rises_under_ascent(self):
        config = TrainConfig(
            iterations=30,
            batch_size=10,
            learning_rate=0.01,
            objective_mode=ObjectiveMode.PURE_ASCENT,
        )
        result = run_unlearning(session(config, kind=AdapterKind(AdapterVariant.PLAIN)))
        losses = [r.loss_forget for r in result.history]
        assert np.mean(losses[-5:]) > np.mean(losses[:5])

    def test_trace_scalars(self):
        config = TrainConfig(iterations=2, batch_size=4, objective_mode=ObjectiveMode.PURE_ASCENT)
        result = run_unlearning(session(config, check_every=1, theorem_layer=1))
        record = result.history[0]
        assert math.isfinite(record.loss_retain)
        assert record.logit_norm_mean > 0.0
        assert record.margin_violations == 0
        assert record.assumptions is not None
        assert record.assumptions.layer == 1
        assert record.components == {"ffn", "classifier"}

    def test_halt_mode(self, monkeypatch: pytest.MonkeyPatch):
        monkeypatch.setattr(DivergenceGuard, "check", lambda self, it, norm: it >= 3)
        config = TrainConfig(iterations=6, batch_size=4, guard=GuardSettings(mode=GuardMode.HALT))
        result = run_unlearning(session(config))
        assert result.outcome is Outcome.GUARD_HALT
        assert result.stopped_at == 3
        assert len(result.history) == 3
        assert result.history[-1].guard_flag

    def test_record_mode_continues(self, monkeypatch: pytest.MonkeyPatch):
        monkeypatch.setattr(DivergenceGuard, "check", lambda self, it, norm: it >= 3)
        config = TrainConfig(iterations=5, batch_size=4)
        result = run_unlearning(session(config))
        assert result.outcome is Outcome.COMPLETED
        assert [r.guard_flag for r in result.history] == [False, False, True, True, True]

    def test_numeric_event(self, monkeypatch: pytest.MonkeyPatch):
        def explode(*args, **kwargs):
            raise NumericEvent("non-finite logits")

        monkeypatch.setattr(bpu.unlearn, "compute_objective_grads", explode)
        result = run_unlearning(session(TrainConfig(iterations=3, batch_size=4)))
        assert result.outcome is Outcome.NUMERIC
        assert result.stopped_at == 1
        assert result.diverged
        assert result.history == []

    def test_zero_iterations(self):
        result = run_unlearning(session(TrainConfig(iterations=0)))
        assert result.outcome is Outcome.COMPLETED
        assert result.history == []

    @pytest.mark.parametrize("mode", [ObjectiveMode.GRADIENT_DIFFERENCE, ObjectiveMode.PURE_ASCENT])
    def test_sgd_scales_rates_by_learning_rate(self, mode: ObjectiveMode):
        config = TrainConfig(
            iterations=1,
            batch_size=4,
            learning_rate=0.1,
            grad_accumulation=1,
            alpha_r=0.5,
            alpha_f=0.25,
            optimizer=OptimizerKind.SGD,
            objective_mode=mode,
        )
        s = session(config, kind=AdapterKind(AdapterVariant.TANH))
        theta = {k: v.copy() for k, v in s.model.parameters().items()}
        retain_batch = sample_batch(s.rng.spawn(bpu.unlearn.RETAIN_STREAM), s.retain, 4)
        forget_batch = sample_batch(s.rng.spawn(bpu.unlearn.FORGET_STREAM), s.forget, 4)
        grads = compute_objective_grads(s.model, retain_batch, forget_batch, mode)
        alpha_r = 0.5 if mode is ObjectiveMode.GRADIENT_DIFFERENCE else 0.0
        result = run_unlearning(s)
        for key, value in result.model.parameters().items():
            expected = theta[key] + 0.1 * (-alpha_r * grads.retain.params[key] + 0.25 * grads.forget.params[key])
            np.testing.assert_allclose(value, expected, rtol=0.0, atol=1e-15)

    def test_accumulation_averages_micro_batches(self):
        config = TrainConfig(
            iterations=1, batch_size=3, grad_accumulation=2, learning_rate=0.1, optimizer=OptimizerKind.SGD
        )
        s = session(config, kind=AdapterKind(AdapterVariant.TANH))
        theta = {k: v.copy() for k, v in s.model.parameters().items()}
        retain_stream = s.rng.spawn(bpu.unlearn.RETAIN_STREAM)
        forget_stream = s.rng.spawn(bpu.unlearn.FORGET_STREAM)
        parts = []
        for _ in range(2):
            retain_batch = sample_batch(retain_stream, s.retain, 3)
            forget_batch = sample_batch(forget_stream, s.forget, 3)
            parts.append(compute_objective_grads(s.model, retain_batch, forget_batch, config.objective_mode))
        result = run_unlearning(s)
        for key, value in result.model.parameters().items():
            g_r = (parts[0].retain.params[key] + parts[1].retain.params[key]) / 2.0
            g_f = (parts[0].forget.params[key] + parts[1].forget.params[key]) / 2.0
            np.testing.assert_allclose(value, theta[key] + 0.1 * (-g_r + g_f), rtol=0.0, atol=1e-14)

    def test_frozen_base_is_byte_identical(self):
        config = TrainConfig(iterations=40, batch_size=4, learning_rate=1e-2)
        s = session(config)
        before = {name: w.tobytes() for name, w in s.model.base_weights().items()}
        biases = [b.tobytes() for b in s.model.base.biases]
        result = run_unlearning(s)
        assert result.outcome is Outcome.COMPLETED
        assert {name: w.tobytes() for name, w in result.model.base_weights().items()} == before
        assert [b.tobytes() for b in result.model.base.biases] == biases
        assert all(ap.w0.tobytes() == before[name] for name, ap in result.model.adapters.items())

    def test_retain_only_descent(self):
        config = TrainConfig(iterations=0, batch_size=8, learning_rate=1e-2, alpha_f=0.0)
        losses = []
        for iterations in range(0, 51, 10):
            s = session(config.model_copy(update={"iterations": iterations}), kind=AdapterKind(AdapterVariant.TANH))
            model = run_unlearning(s).model
            losses.append(float(np.mean(model.per_example_loss(s.retain.inputs, s.retain.labels))))
        assert all(later <= earlier for earlier, later in zip(losses, losses[1:])), losses
        assert losses[-1] < losses[0]

    def test_modes_share_a_trajectory(self):
        lr, lam = 0.05, 0.5
        kind = AdapterKind(AdapterVariant.TANH)
        split_rates = TrainConfig(
            iterations=20, batch_size=4, learning_rate=1.0, alpha_r=lr, alpha_f=lam * lr, optimizer=OptimizerKind.SGD
        )
        combined = split_rates.model_copy(
            update={
                "learning_rate": lr,
                "alpha_r": 1.0,
                "alpha_f": 1.0,
                "lam": lam,
                "objective_mode": ObjectiveMode.COMBINED,
            }
        )
        first = run_unlearning(session(split_rates, kind=kind))
        second = run_unlearning(session(combined, kind=kind))
        assert len(first.history) == len(second.history) == 20
        for a, b in zip(first.history, second.history, strict=True):
            assert a.loss_retain == pytest.approx(b.loss_retain, abs=1e-12)
            assert a.loss_forget == pytest.approx(b.loss_forget, abs=1e-12)
        for key, value in first.model.parameters().items():
            np.testing.assert_allclose(value, second.model.parameters()[key], rtol=0.0, atol=1e-12)


@add_test_properties(
    partially_verifies=["comp_req__bpu__unlearning_update"],
    test_type="requirements-based",
    derivation_technique="requirements-analysis",
)
class TestPretrain:
    @pytest.mark.parametrize("optimizer", list(OptimizerKind))
    def test_loss_decreases(self, optimizer: OptimizerKind):
        model = plain_mlp()
        section = PretrainSection(iterations=100, learning_rate=0.05, batch_size=16, optimizer=optimizer)
        losses = pretrain(model, blobs(60), section, RngStream(3))
        assert len(losses) == 100
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_empty_dataset(self):
        with pytest.raises(ContractViolation):
            pretrain(adapted(), blobs().take([]), PretrainSection(), RngStream(0))

    def test_settings_forwarded(self):
        model = plain_mlp()
        section = PretrainSection(iterations=1, adamw=AdamWSettings(weight_decay=0.5), learning_rate=0.1)
        before = model.parameters()["layer1.W"].copy()
        pretrain(model, blobs(), section, RngStream(0))
        assert not np.array_equal(model.parameters()["layer1.W"], before)
