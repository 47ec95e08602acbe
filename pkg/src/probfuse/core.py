"""Diagonal-Gaussian embeddings and the probability product kernel.

The kernel between two diagonal Gaussians ``(mu_a, var_a)`` and ``(mu_b, var_b)`` is

    K = prod_d ((r_d + 1 / r_d) / 2) ** -0.5 * exp(-sum_d (mu_a - mu_b)**2 / (4 (var_a + var_b)))

with ``r_d = var_a / var_b``.  Everything here is evaluated in log space: with
``t = log_var_a - log_var_b`` the prefactor term is ``-0.5 * log(cosh(t))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_VAR_MIN = math.log(1e-6)
LOG_VAR_MAX = math.log(1e6)
DEFAULT_N_DIMS = 3

_LN2 = math.log(2.0)


def clamp_log_var(log_var):
    return np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)


def _log_cosh(t):
    a = np.abs(t)
    return a + np.log1p(np.exp(-2.0 * a)) - _LN2


@dataclass(frozen=True)
class GaussianEmbedding:
    """A diagonal Gaussian with per-dimension mean and log-variance."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        log_var = np.atleast_1d(np.asarray(self.log_var, dtype=np.float64))
        if mu.ndim != 1 or log_var.shape != mu.shape or mu.size < 1:
            raise ValueError(
                f"mu and log_var must be 1-D of equal length >= 1, got {mu.shape} and {log_var.shape}"
            )
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_var))):
            raise ValueError("embedding parameters must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", log_var)

    @classmethod
    def from_variance(cls, mu, var) -> GaussianEmbedding:
        return cls(mu, np.log(np.asarray(var, dtype=np.float64)))

    @property
    def n_dims(self) -> int:
        return self.mu.size

    @property
    def var(self) -> np.ndarray:
        return np.exp(clamp_log_var(self.log_var))

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "log_var": self.log_var.tolist()}


@dataclass(frozen=True)
class KernelGradient:
    """Partial derivatives of the kernel value with respect to both arguments."""

    d_mu_a: np.ndarray
    d_logvar_a: np.ndarray
    d_mu_b: np.ndarray
    d_logvar_b: np.ndarray


class EmbeddingTable:
    """One Gaussian embedding per scene point, stored as two ``(P, N)`` arrays."""

    def __init__(self, mu, log_var):
        mu = np.array(mu, dtype=np.float64)
        log_var = np.array(log_var, dtype=np.float64)
        if mu.ndim != 2 or mu.shape != log_var.shape or mu.shape[1] < 1:
            raise ValueError(f"table arrays must be (P, N) and equal shape, got {mu.shape}, {log_var.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_var))):
            raise ValueError("table parameters must be finite")
        self.mu = mu
        self.log_var = log_var

    @property
    def n_points(self) -> int:
        return self.mu.shape[0]

    @property
    def n_dims(self) -> int:
        return self.mu.shape[1]

    def __len__(self) -> int:
        return self.n_points

    def __getitem__(self, idx: int) -> GaussianEmbedding:
        return GaussianEmbedding(self.mu[idx], self.log_var[idx])

    def copy(self) -> EmbeddingTable:
        return EmbeddingTable(self.mu.copy(), self.log_var.copy())

    def variance_product(self) -> np.ndarray:
        """Per-point product of the (clamped) variances."""
        return np.exp(np.sum(clamp_log_var(self.log_var), axis=1))

    def to_dict(self) -> dict:
        return {
            "n_dims": self.n_dims,
            "points": self.n_points,
            "mu": self.mu.tolist(),
            "log_var": self.log_var.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> EmbeddingTable:
        n_dims, n_points = int(data["n_dims"]), int(data["points"])
        mu = np.asarray(data["mu"], dtype=np.float64).reshape(n_points, n_dims)
        log_var = np.asarray(data["log_var"], dtype=np.float64).reshape(n_points, n_dims)
        return cls(mu, log_var)


# ---------------------------------------------------------------------------
# Array-level kernel.  All functions broadcast over leading axes; the last
# axis is the embedding dimension.
# ---------------------------------------------------------------------------


def log_pp_kernel_arrays(mu_a, lv_a, mu_b, lv_b):
    """Elementwise ``log K`` for stacked embeddings."""
    lv_a = clamp_log_var(lv_a)
    lv_b = clamp_log_var(lv_b)
    diff = mu_a - mu_b
    s = np.exp(lv_a) + np.exp(lv_b)
    return -0.5 * np.sum(_log_cosh(lv_a - lv_b), axis=-1) - np.sum(diff * diff / (4.0 * s), axis=-1)


def log_pp_kernel_grad_arrays(mu_a, lv_a, mu_b, lv_b):
    """``log K`` plus its gradients w.r.t. ``(mu_a, lv_a, mu_b, lv_b)``.

    Log-variance components outside the clamp range receive zero gradient.
    """
    lv_a_c = clamp_log_var(lv_a)
    lv_b_c = clamp_log_var(lv_b)
    va = np.exp(lv_a_c)
    vb = np.exp(lv_b_c)
    s = va + vb
    diff = mu_a - mu_b
    t = lv_a_c - lv_b_c
    sq = diff * diff / (4.0 * s * s)
    log_k = -0.5 * np.sum(_log_cosh(t), axis=-1) - np.sum(diff * diff / (4.0 * s), axis=-1)

    g_mu_a = -diff / (2.0 * s)
    half_tanh = 0.5 * np.tanh(t)
    g_lv_a = -half_tanh + sq * va
    g_lv_b = half_tanh + sq * vb
    g_lv_a = np.where(lv_a_c == lv_a, g_lv_a, 0.0)
    g_lv_b = np.where(lv_b_c == lv_b, g_lv_b, 0.0)
    return log_k, g_mu_a, g_lv_a, -g_mu_a, g_lv_b


def pairwise_log_kernel(mu_a, lv_a, mu_b, lv_b):
    """``(A, B)`` matrix of ``log K`` between rows of two embedding stacks."""
    return log_pp_kernel_arrays(mu_a[:, None, :], lv_a[:, None, :], mu_b[None, :, :], lv_b[None, :, :])


def pairwise_kernel(mu_a, lv_a, mu_b, lv_b):
    return np.exp(pairwise_log_kernel(mu_a, lv_a, mu_b, lv_b))


class SymmetricPairwise:
    """All-pairs ``log K`` within one ``(B, N)`` stack, with a fast gradient contraction.

    Training-path specialisation of :func:`log_pp_kernel_grad_arrays`: it loops
    over the (small) embedding dimension and uses
    ``log cosh(la - lb) = log(va^2 + vb^2) - log 2 - la - lb``.
    """

    def __init__(self, mu, lv):
        lv_c = clamp_log_var(lv)
        self.in_range = lv_c == lv
        va = np.exp(lv_c)
        va2 = va * va
        b, n = mu.shape
        self.log_k = np.zeros((b, b))
        self.c_mu = []
        self.c_lv = []
        for d in range(n):
            diff = mu[:, d, None] - mu[None, :, d]
            s = va[:, d, None] + va[None, :, d]
            q = va2[:, d, None] + va2[None, :, d]
            r = diff * diff / (4.0 * s)
            self.log_k -= 0.5 * (np.log(q) - _LN2 - lv_c[:, d, None] - lv_c[None, :, d]) + r
            self.c_mu.append(-diff / (2.0 * s))
            tanh = (va2[:, d, None] - va2[None, :, d]) / q
            self.c_lv.append(-0.5 * tanh + r * va[:, d, None] / s)

    def contract(self, d_log_k):
        """Per-sample gradients given ``dL/d(log K)`` for every ordered pair."""
        h = d_log_k + d_log_k.T
        g_mu = np.stack([np.sum(h * c, axis=1) for c in self.c_mu], axis=1)
        g_lv = np.stack([np.sum(h * c, axis=1) for c in self.c_lv], axis=1)
        return g_mu, np.where(self.in_range, g_lv, 0.0)


# ---------------------------------------------------------------------------
# Single-embedding API
# ---------------------------------------------------------------------------


def _check_pair(a: GaussianEmbedding, b: GaussianEmbedding) -> None:
    if a.n_dims != b.n_dims:
        raise ValueError(f"dimension mismatch: {a.n_dims} vs {b.n_dims}")


def log_pp_kernel(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    _check_pair(a, b)
    return float(log_pp_kernel_arrays(a.mu, a.log_var, b.mu, b.log_var))


def pp_kernel(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    """Probability product similarity in (0, 1]; 1 iff ``a == b``."""
    return math.exp(log_pp_kernel(a, b))


def pp_kernel_grad(a: GaussianEmbedding, b: GaussianEmbedding) -> tuple[float, KernelGradient]:
    """Kernel value and its gradient w.r.t. the mean and log-variance of both arguments."""
    _check_pair(a, b)
    log_k, g_mu_a, g_lv_a, g_mu_b, g_lv_b = log_pp_kernel_grad_arrays(a.mu, a.log_var, b.mu, b.log_var)
    k = math.exp(float(log_k))
    return k, KernelGradient(k * g_mu_a, k * g_lv_a, k * g_mu_b, k * g_lv_b)


def rbf_kernel(x, y, sigma2: float) -> float:
    """``exp(-||x - y||^2 / (8 sigma2))``: the PP kernel for equal isotropic variance ``sigma2``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    d = x - y
    return math.exp(-float(d @ d) / (8.0 * sigma2))
