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
"""
Synthetic datasets, splits, the retain-only reference model and the
forget-quality, utility and membership-attack proxies.
"""

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import numpy.typing as npt

from bpu.adapters import AdaptedModel, AdapterKind, attach_adapters
from bpu.config import DataKind, PretrainSection
from bpu.core_math import RngStream, Vector
from bpu.errors import ContractViolation
from bpu.nnet import MlpParams
from bpu.transformer import ToyTransformerParams
from bpu.unlearn import pretrain

logger = logging.getLogger(__name__)

# Blob centres lie on a sphere of radius BLOB_RADIUS_SCALE * spread; the cluster stddev is the spread.
BLOB_RADIUS_SCALE = 4.0
KS_TERM_TOL = 1e-12
KS_MAX_TERMS = 1000


@dataclass(frozen=True)
class DatasetSpec:
    kind: DataKind
    n: int
    num_classes: int
    dim: int
    noise: float = 1.0
    seed: int = 0
    seq_len: int | None = None


@dataclass
class Dataset:
    """
    Inputs are ``n x dim`` (or ``n x seq_len x dim`` for token sequences).
    ``indices`` are positions in the generated dataset, kept through splits.
    """

    inputs: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]
    spec: DatasetSpec
    indices: npt.NDArray[np.int64] = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self) -> None:
        if self.indices.shape[0] == 0 and self.labels.shape[0] > 0:
            self.indices = np.arange(self.labels.shape[0], dtype=np.int64)
        if np.any((self.labels < 0) | (self.labels >= self.spec.num_classes)):
            raise ContractViolation("labels out of range", classes=self.spec.num_classes)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, positions: npt.ArrayLike) -> "Dataset":
        pos = np.asarray(positions, dtype=np.int64)
        return Dataset(self.inputs[pos], self.labels[pos], self.spec, self.indices[pos])

    def union(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.concatenate([self.inputs, other.inputs]),
            np.concatenate([self.labels, other.labels]),
            self.spec,
            np.concatenate([self.indices, other.indices]),
        )


def _draw_inputs(
    stream: RngStream, n: int, dim: int, seq_len: int | None, mean: list[Vector], stddev: float
) -> npt.NDArray[np.float64]:
    rows = []
    for i in range(n):
        tokens = 1 if seq_len is None else seq_len
        rows.append(np.vstack([mean[i] + stream.gaussian_vector(dim, 0.0, stddev) for _ in range(tokens)]))
    arr = np.stack(rows)
    return arr[:, 0, :] if seq_len is None else arr


def gen_blobs(
    stream: RngStream,
    n: int,
    num_classes: int,
    dim: int,
    spread: float,
    seq_len: int | None = None,
    seed: int = 0,
) -> Dataset:
    """
    Gaussian clusters with balanced round-robin labels.

    The ``num_classes`` centres are drawn first as Gaussian directions scaled to
    ``BLOB_RADIUS_SCALE * spread``; each example (each token, for sequences) then adds
    ``N(0, spread^2)`` noise per coordinate to its class centre.
    """
    if n < num_classes:
        raise ContractViolation("blobs need at least one example per class", n=n, classes=num_classes)
    if not spread > 0.0:
        raise ContractViolation("blob spread must be positive", spread=spread)
    radius = BLOB_RADIUS_SCALE * spread
    centres = []
    for _ in range(num_classes):
        direction = stream.gaussian_vector(dim)
        norm = float(np.linalg.norm(direction))
        centres.append(direction * (radius / norm) if norm > 0.0 else np.full(dim, radius / math.sqrt(dim)))
    labels = np.arange(n, dtype=np.int64) % num_classes
    inputs = _draw_inputs(stream, n, dim, seq_len, [centres[c] for c in labels], spread)
    spec = DatasetSpec(DataKind.BLOBS, n, num_classes, dim, spread, seed, seq_len)
    return Dataset(inputs, labels, spec)


def gen_random_label(
    stream: RngStream, n: int, num_classes: int, dim: int, seq_len: int | None = None, seed: int = 0
) -> Dataset:
    """
    Standard Gaussian inputs (all inputs drawn first) with labels drawn
    uniformly and independently afterwards.
    """
    if n < 1:
        raise ContractViolation("random-label data needs n >= 1", n=n)
    inputs = _draw_inputs(stream, n, dim, seq_len, [np.zeros(dim)] * n, 1.0)
    labels = np.array([stream.randbelow(num_classes) for _ in range(n)], dtype=np.int64)
    spec = DatasetSpec(DataKind.RANDOM_LABEL, n, num_classes, dim, 1.0, seed, seq_len)
    return Dataset(inputs, labels, spec)


def generate(spec: DatasetSpec) -> Dataset:
    """Regenerates a dataset from its spec."""
    stream = RngStream(spec.seed)
    if spec.kind is DataKind.BLOBS:
        return gen_blobs(stream, spec.n, spec.num_classes, spec.dim, spec.noise, spec.seq_len, spec.seed)
    return gen_random_label(stream, spec.n, spec.num_classes, spec.dim, spec.seq_len, spec.seed)


@dataclass(frozen=True)
class SplitSpec:
    forget_fraction: float
    holdout_fraction: float
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("forget_fraction", "holdout_fraction"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ContractViolation("split fraction out of range", field=name, value=value)
        if self.forget_fraction + self.holdout_fraction >= 1.0:
            raise ContractViolation(
                "split fractions must sum below 1", forget=self.forget_fraction, holdout=self.holdout_fraction
            )


def _cut(n: int, fraction: float) -> int:
    # floor(n * f) in exact decimal arithmetic.
    return math.floor(Fraction(repr(fraction)) * n)


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """
    Seeded permutation then contiguous cut into ``(retain, forget, holdout)``.
    """
    n = len(dataset)
    perm = np.array(RngStream(spec.seed).permutation(n), dtype=np.int64)
    n_forget = _cut(n, spec.forget_fraction)
    n_holdout = _cut(n, spec.holdout_fraction)
    forget = dataset.take(perm[:n_forget])
    holdout = dataset.take(perm[n_forget : n_forget + n_holdout])
    retain = dataset.take(perm[n_forget + n_holdout :])
    logger.debug("dataset split", extra={"retain": len(retain), "forget": len(forget), "holdout": len(holdout)})
    return retain, forget, holdout


def membership_disjoint(trained_on: Dataset, excluded: Dataset) -> bool:
    """True when no example of ``excluded`` is among ``trained_on``."""
    return not set(trained_on.indices.tolist()) & set(excluded.indices.tolist())


class ReferenceCache:
    """
    Reference-model parameters keyed by configuration hash.

    Kept in memory and, when ``directory`` is set, as ``reference-<key>.npz``
    files so later runs and sweep cells reuse them.
    """

    def __init__(self, directory: Path | None = None) -> None:
        self.directory = directory
        self._entries: dict[str, dict[str, npt.NDArray[np.float64]]] = {}

    def _path(self, key: str) -> Path | None:
        return None if self.directory is None else self.directory / f"reference-{key}.npz"

    def get(self, key: str) -> dict[str, npt.NDArray[np.float64]] | None:
        if key in self._entries:
            return {k: v.copy() for k, v in self._entries[key].items()}
        path = self._path(key)
        if path is not None and path.is_file():
            with np.load(path) as data:
                entry = {k: data[k].copy() for k in data.files}
            self._entries[key] = entry
            return {k: v.copy() for k, v in entry.items()}
        return None

    def put(self, key: str, params: dict[str, npt.NDArray[np.float64]]) -> None:
        self._entries[key] = {k: v.copy() for k, v in params.items()}
        path = self._path(key)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            # Sweep cells may share a key; publish by rename.
            tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
            with tmp.open("wb") as fh:
                np.savez(fh, **self._entries[key])
            tmp.replace(path)


def train_reference(
    retain: Dataset,
    template: MlpParams | ToyTransformerParams,
    section: PretrainSection,
    stream: RngStream,
    cache: ReferenceCache | None = None,
    key: str | None = None,
) -> AdaptedModel:
    """
    Trains a full fine-tune copy of ``template`` on ``retain`` only.

    With a cache and key, a stored result is reused instead of retraining.
    Divergence raises ``DivergenceError``.
    """
    model = attach_adapters(template, [], AdapterKind(), 1, stream, full_finetune=True)
    if cache is not None and key is not None:
        stored = cache.get(key)
        if stored is not None:
            logger.info("reference cache hit", extra={"key": key})
            model.set_parameters(stored)
            return model
        logger.info("reference cache miss", extra={"key": key})
    pretrain(model, retain, section, stream)
    if cache is not None and key is not None:
        cache.put(key, model.parameters())
    return model


def ks_statistic(s1: npt.ArrayLike, s2: npt.ArrayLike) -> float:
    """
    Two-sample KS statistic ``sup |F1 - F2|`` evaluated at every sample point.
    """
    a = np.sort(np.asarray(s1, dtype=np.float64))
    b = np.sort(np.asarray(s2, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ContractViolation("KS statistic needs two non-empty samples", n1=a.size, n2=b.size)
    points = np.concatenate([a, b])
    cdf1 = np.searchsorted(a, points, side="right") / a.size
    cdf2 = np.searchsorted(b, points, side="right") / b.size
    return float(np.max(np.abs(cdf1 - cdf2)))


def ks_pvalue(d: float, n1: int, n2: int) -> float:
    """
    Asymptotic two-sample p-value with the small-sample correction on the
    effective size. Returns 1.0 when the series does not settle.
    """
    if not 0.0 <= d <= 1.0 or n1 < 1 or n2 < 1:
        raise ContractViolation("KS p-value needs d in [0, 1] and positive sizes", d=d, n1=n1, n2=n2)
    en = math.sqrt(n1 * n2 / (n1 + n2))
    lam = d * (en + 0.12 + 0.11 / en)
    total = 0.0
    sign = 1.0
    for j in range(1, KS_MAX_TERMS + 1):
        term = 2.0 * sign * math.exp(-2.0 * j * j * lam * lam)
        total += term
        if abs(term) < KS_TERM_TOL:
            return min(max(total, 0.0), 1.0)
        sign = -sign
    return 1.0


def per_example_scores(model: AdaptedModel, data: Dataset) -> Vector:
    """``log p_y`` for every example."""
    return -model.per_example_loss(data.inputs, data.labels)


def accuracy(model: AdaptedModel, data: Dataset) -> float:
    if len(data) == 0:
        return 0.0
    predictions = np.argmax(model.predict_logits(data.inputs), axis=1)
    return float(np.mean(predictions == data.labels))


def harmonic_mean(a: float, b: float) -> float:
    if a <= 0.0 or b <= 0.0:
        return 0.0
    return 2.0 * a * b / (a + b)


def forget_quality_proxy(unlearned: AdaptedModel, reference: AdaptedModel, forget: Dataset) -> float:
    s_u = per_example_scores(unlearned, forget)
    s_r = per_example_scores(reference, forget)
    return ks_pvalue(ks_statistic(s_u, s_r), s_u.size, s_r.size)


def model_utility_proxy(model: AdaptedModel, retain: Dataset, holdout: Dataset) -> float:
    """Harmonic mean of retain and holdout accuracy."""
    return harmonic_mean(accuracy(model, retain), accuracy(model, holdout))


def attack_accuracy_from_losses(member_losses: npt.ArrayLike, nonmember_losses: npt.ArrayLike) -> float:
    """
    Best balanced accuracy of the rule "member iff loss <= t" over every
    threshold, folded with its complement into [0.5, 1].
    """
    members = np.sort(np.asarray(member_losses, dtype=np.float64))
    nonmembers = np.sort(np.asarray(nonmember_losses, dtype=np.float64))
    if members.size == 0 or nonmembers.size == 0:
        raise ContractViolation(
            "membership attack needs members and nonmembers", members=members.size, nonmembers=nonmembers.size
        )
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([members, nonmembers]))])
    tpr = np.searchsorted(members, thresholds, side="right") / members.size
    fpr = np.searchsorted(nonmembers, thresholds, side="right") / nonmembers.size
    balanced = (tpr + (1.0 - fpr)) / 2.0
    return float(np.max(np.maximum(balanced, 1.0 - balanced)))


def membership_attack_acc(model: AdaptedModel, members: Dataset, nonmembers: Dataset) -> float:
    return attack_accuracy_from_losses(
        model.per_example_loss(members.inputs, members.labels),
        model.per_example_loss(nonmembers.inputs, nonmembers.labels),
    )


@dataclass(frozen=True)
class EvalReport:
    """
    Desk-scale proxies for one model. Utility is the two-term harmonic mean of
    retain and holdout accuracy.
    """

    forget_quality_proxy: float
    model_utility_proxy: float
    membership_attack_acc: float
    retain_acc: float
    forget_acc: float
    holdout_acc: float
    forget_loss_mean: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def evaluate(
    model: AdaptedModel, reference: AdaptedModel, retain: Dataset, forget: Dataset, holdout: Dataset
) -> EvalReport:
    retain_acc = accuracy(model, retain)
    holdout_acc = accuracy(model, holdout)
    return EvalReport(
        forget_quality_proxy=forget_quality_proxy(model, reference, forget),
        model_utility_proxy=harmonic_mean(retain_acc, holdout_acc),
        membership_attack_acc=membership_attack_acc(model, forget, holdout),
        retain_acc=retain_acc,
        forget_acc=accuracy(model, forget),
        holdout_acc=holdout_acc,
        forget_loss_mean=float(np.mean(model.per_example_loss(forget.inputs, forget.labels))),
    )
