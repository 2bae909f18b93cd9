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
Deterministic float64 kernel.

Matrices are plain ``numpy`` float64 arrays with two dimensions; vectors are
one-dimensional float64 arrays. Everything stochastic in the package draws from
``RngStream`` so a seed pins every run bit-for-bit.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from bpu.errors import ContractViolation, NonConvergence

logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]

SVD_SIZE_CAP = 256
OPERATOR_NORM_SEED = 0x5EED_0F_0B

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_TWO_POW_53 = float(1 << 53)


def _mix64(z: int) -> int:
    # splitmix64 finalizer (Stafford variant 13).
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass
class RngStream:
    """
    splitmix64 generator with a Box-Muller Gaussian front end.

    Gaussian draws come in pairs: the first uniform feeds the radius
    (``u1 = 1 - U`` so that ``u1`` is in (0, 1]), the second the angle; the cosine
    branch is emitted first and the sine branch is cached and emitted on the next
    call. ``draws`` counts every scalar handed out (uniforms, integers, Gaussians).

    A stream must be owned by one execution flow at a time.
    """

    seed: int
    state: int = field(init=False)
    draws: int = field(default=0, init=False)
    _spare: float | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        self.seed &= _MASK64
        self.state = self.seed

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN_GAMMA) & _MASK64
        return _mix64(self.state)

    def _unit(self) -> float:
        return (self.next_u64() >> 11) / _TWO_POW_53

    def uniform(self) -> float:
        """Uniform draw in [0, 1)."""
        self.draws += 1
        return self._unit()

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n < 1:
            raise ContractViolation("randbelow needs n >= 1", n=n)
        limit = ((1 << 64) // n) * n
        while True:
            x = self.next_u64()
            if x < limit:
                self.draws += 1
                return x % n

    def gaussian(self) -> float:
        self.draws += 1
        if self._spare is not None:
            value, self._spare = self._spare, None
            return value
        u1 = 1.0 - self._unit()
        u2 = self._unit()
        radius = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = radius * math.sin(theta)
        return radius * math.cos(theta)

    def gaussian_vector(self, n: int, mean: float = 0.0, stddev: float = 1.0) -> Vector:
        return np.array([mean + stddev * self.gaussian() for _ in range(n)], dtype=np.float64)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, label: int) -> "RngStream":
        """
        Independent child stream keyed by ``label``.

        Depends only on this stream's seed, not on its current position.
        """
        return RngStream(_mix64((self.seed ^ ((label * _GOLDEN_GAMMA) & _MASK64)) & _MASK64))


@dataclass(frozen=True)
class SvdResult:
    """
    Thin SVD: ``u`` is m x k, ``s`` has k entries (nonincreasing), ``v`` is n x k.
    """

    u: Matrix
    s: Vector
    v: Matrix

    def reconstruct(self) -> Matrix:
        return (self.u * self.s) @ self.v.T


def as_matrix(values: npt.ArrayLike, rows: int | None = None, cols: int | None = None) -> Matrix:
    """
    Build a float64 matrix, optionally from a flat row-major sequence.
    """
    m = np.asarray(values, dtype=np.float64)
    if rows is not None and cols is not None:
        if m.size != rows * cols:
            raise ContractViolation("value count does not match shape", size=m.size, rows=rows, cols=cols)
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ContractViolation("matrix must be two-dimensional", shape=m.shape)
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation("matmul dimension mismatch", left=a.shape, right=b.shape)
    return a @ b


def frobenius_norm(m: npt.ArrayLike) -> float:
    arr = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(arr * arr)))


def operator_norm(m: Matrix, tol: float = 1e-12, max_iters: int = 100_000) -> float:
    """
    Largest singular value by power iteration on ``m.T @ m``.

    The start vector comes from a dedicated seeded stream, so the result is
    deterministic. Raises ``NonConvergence`` (carrying the last estimate) when
    successive estimates still differ by ``tol`` or more after ``max_iters``.
    """
    if tol <= 0:
        raise ContractViolation("operator_norm needs tol > 0", tol=tol)
    gram = m.T @ m
    v = RngStream(OPERATOR_NORM_SEED).gaussian_vector(gram.shape[0])
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(max_iters):
        w = gram @ v
        # Rayleigh quotient of the Gram matrix is sigma_1 squared.
        rayleigh = float(v @ w)
        current = math.sqrt(max(rayleigh, 0.0))
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        if abs(current - estimate) < tol:
            return current
        estimate = current
    raise NonConvergence("power iteration did not converge", last_estimate=estimate, max_iters=max_iters)


def _complete_orthonormal(u: Matrix, keep: npt.NDArray[np.bool_]) -> Matrix:
    # Replace columns not in ``keep`` with unit vectors orthogonal to the rest.
    u = u.copy()
    rows = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if keep[j]]
    candidates = iter(np.eye(rows))
    for j in range(u.shape[1]):
        if keep[j]:
            continue
        for e in candidates:
            w = e.copy()
            for b in basis:
                w -= (b @ w) * b
            norm = np.linalg.norm(w)
            if norm > 1e-8:
                u[:, j] = w / norm
                basis.append(u[:, j])
                break
    return u


def _one_sided_jacobi(a: Matrix, max_sweeps: int, eps: float) -> tuple[Matrix, Vector, Matrix]:
    # Hestenes one-sided Jacobi on a tall matrix (rows >= cols).
    u = a.copy()
    n = u.shape[1]
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                up, uq = u[:, p], u[:, q]
                alpha = float(up @ up)
                beta = float(uq @ uq)
                gamma = float(up @ uq)
                if gamma == 0.0 or abs(gamma) <= eps * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * up - s * uq
                new_q = s * up + c * uq
                u[:, p], u[:, q] = new_p, new_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    sigma = np.linalg.norm(u, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    u = u[:, order]
    v = v[:, order]
    scale = sigma[0] if sigma.size and sigma[0] > 0 else 1.0
    keep = sigma > scale * 1e-15
    u[:, keep] = u[:, keep] / sigma[keep]
    if not np.all(keep):
        u = _complete_orthonormal(u, keep)
    return u, sigma, v


def svd_small(m: Matrix, max_sweeps: int = 100, eps: float = 1e-15) -> SvdResult:
    """
    One-sided Jacobi SVD with cyclic column-pair sweeps.

    Meant for small diagnostic matrices: ``min(rows, cols)`` must not exceed
    ``SVD_SIZE_CAP``.
    """
    if m.ndim != 2:
        raise ContractViolation("svd_small needs a matrix", shape=m.shape)
    if min(m.shape) > SVD_SIZE_CAP:
        raise ContractViolation("matrix exceeds the diagnostic SVD cap", shape=m.shape, cap=SVD_SIZE_CAP)
    if m.shape[0] >= m.shape[1]:
        u, s, v = _one_sided_jacobi(m, max_sweeps, eps)
        return SvdResult(u=u, s=s, v=v)
    u, s, v = _one_sided_jacobi(m.T, max_sweeps, eps)
    return SvdResult(u=v, s=s, v=u)


def jacobi_eigh(sym: Matrix, max_sweeps: int = 100, tol: float = 1e-15) -> tuple[Vector, Matrix]:
    """
    Cyclic two-sided Jacobi eigensolver for symmetric matrices.

    Returns eigenvalues sorted nonincreasing and the matching eigenvectors as
    columns. Independent of ``svd_small``; the test suite uses it as an oracle.
    """
    a = np.array(sym, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolation("jacobi_eigh needs a square matrix", shape=a.shape)
    n = a.shape[0]
    vecs = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(a * a) - np.sum(np.diag(a) ** 2)))
        if off <= tol * max(1.0, float(np.linalg.norm(a))):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                vecs = vecs @ rot
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], vecs[:, order]


def project_onto(v: npt.ArrayLike, u: npt.ArrayLike) -> Vector:
    """Orthogonal projection of ``v`` onto the line spanned by ``u``."""
    v_arr = np.asarray(v, dtype=np.float64)
    u_arr = np.asarray(u, dtype=np.float64)
    if v_arr.shape != u_arr.shape:
        raise ContractViolation("projection needs equal dimensions", v=v_arr.shape, u=u_arr.shape)
    uu = float(u_arr @ u_arr)
    if uu == 0.0:
        raise ContractViolation("cannot project onto the zero vector")
    return (float(v_arr @ u_arr) / uu) * u_arr


def rng_gaussian_matrix(stream: RngStream, rows: int, cols: int, mean: float = 0.0, stddev: float = 1.0) -> Matrix:
    """
    Matrix of Gaussian draws filled in row-major order.

    The stream always advances by ``rows * cols`` draws, also for ``stddev == 0``.
    """
    if stddev < 0:
        raise ContractViolation("stddev must be non-negative", stddev=stddev)
    values = stream.gaussian_vector(rows * cols, mean=mean, stddev=stddev)
    if stddev == 0.0:
        values[:] = mean
    return values.reshape(rows, cols)
