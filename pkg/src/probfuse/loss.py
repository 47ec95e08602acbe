"""Training objectives for probabilistic instance embeddings.

Each loss returns its value together with a dense gradient over the embedding
table.  Gradients are assembled from per-sample terms with ``np.add.at`` so the
reduction order is fixed and results are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._fast import mine_pairs_kernel, pixel_contrastive_kernel
from .core import (
    EmbeddingTable,
    GaussianEmbedding,
    SymmetricPairwise,
    clamp_log_var,
    log_pp_kernel_arrays,
    log_pp_kernel_grad_arrays,
)

AVERAGE_MODES = ("parameter", "independent")


@dataclass
class SampleBatch:
    """Pixel samples from a single view: table rows and view-local instance IDs."""

    point_ids: np.ndarray
    instance_ids: np.ndarray
    view_id: int

    def __post_init__(self):
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        if self.point_ids.ndim != 1 or self.point_ids.shape != self.instance_ids.shape:
            raise ValueError("point_ids and instance_ids must be 1-D arrays of equal length")
        if self.point_ids.size == 0:
            raise ValueError("empty sample batch")
        if np.any(self.instance_ids < 0):
            raise ValueError("instance IDs must be non-negative")

    def __len__(self) -> int:
        return self.point_ids.size

    def embeddings(self, table: EmbeddingTable) -> tuple[np.ndarray, np.ndarray]:
        if self.point_ids.min() < 0 or self.point_ids.max() >= table.n_points:
            raise IndexError("sample references a point outside the table")
        return table.mu[self.point_ids], table.log_var[self.point_ids]


@dataclass
class PositivePairSet:
    """Index pairs ``(r, s)`` into the sample lists of two views."""

    pairs: np.ndarray

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return self.pairs.shape[0]


@dataclass
class TableGradient:
    d_mu: np.ndarray
    d_log_var: np.ndarray

    @classmethod
    def zeros(cls, table: EmbeddingTable) -> TableGradient:
        return cls(np.zeros_like(table.mu), np.zeros_like(table.log_var))

    def __add__(self, other: TableGradient) -> TableGradient:
        return TableGradient(self.d_mu + other.d_mu, self.d_log_var + other.d_log_var)

    def __mul__(self, w: float) -> TableGradient:
        return TableGradient(self.d_mu * w, self.d_log_var * w)

    __rmul__ = __mul__


@dataclass
class LossBreakdown:
    pixel_contra: float = 0.0
    concen: float = 0.0
    cross: float = 0.0
    reg: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return {
            "pixel_contra": self.pixel_contra,
            "concen": self.concen,
            "cross": self.cross,
            "reg": self.reg,
            "total": self.total,
        }


def _check_contrastive_batch(batch: SampleBatch) -> None:
    if len(batch) < 2:
        raise ValueError("contrastive losses need at least 2 samples")
    if np.ndim(batch.view_id) != 0:
        raise ValueError("a contrastive batch must come from exactly one view")


def _scatter(table: EmbeddingTable, point_ids, g_mu, g_lv) -> TableGradient:
    grad = TableGradient.zeros(table)
    np.add.at(grad.d_mu, point_ids, g_mu)
    np.add.at(grad.d_log_var, point_ids, g_lv)
    return grad


# ---------------------------------------------------------------------------
# Sample-level kernels.  Inputs are (B, N) arrays; outputs are per-sample grads.
# ---------------------------------------------------------------------------


def pixel_contrastive_arrays(mu, lv, ids):
    """Vectorised reference for the compiled kernel used in training."""
    b = mu.shape[0]
    pw = SymmetricPairwise(mu, lv)
    k = np.exp(pw.log_k)
    e = np.exp(k)
    pos = ids[:, None] == ids[None, :]
    e_pos = np.where(pos, e, 0.0)
    num = e_pos.sum(axis=1)
    den = e.sum(axis=1)
    loss = float(np.mean(np.log(den) - np.log(num)))

    # dL/dK_ij from row i's term, chained through K = exp(log K)
    d_log_k = (e / den[:, None] - e_pos / num[:, None]) * k / b
    g_mu, g_lv = pw.contract(d_log_k)
    return loss, g_mu, g_lv


def _group_means(mu, lv, inverse, n_groups, mode):
    counts = np.bincount(inverse, minlength=n_groups).astype(np.float64)
    var = np.exp(clamp_log_var(lv))
    mu_sum = np.zeros((n_groups, mu.shape[1]))
    var_sum = np.zeros((n_groups, mu.shape[1]))
    np.add.at(mu_sum, inverse, mu)
    np.add.at(var_sum, inverse, var)
    mu_bar = mu_sum / counts[:, None]
    if mode == "parameter":
        var_bar = var_sum / counts[:, None]
    elif mode == "independent":
        var_bar = var_sum / (counts[:, None] ** 2)
    else:
        raise ValueError(f"unknown average mode {mode!r}; expected one of {AVERAGE_MODES}")
    return mu_bar, np.log(var_bar), counts, var, var_sum


def concentration_arrays(mu, lv, ids, mode="parameter"):
    b = mu.shape[0]
    _, inverse = np.unique(ids, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_groups = int(inverse.max()) + 1
    mu_bar, lv_bar, counts, var, var_sum = _group_means(mu, lv, inverse, n_groups, mode)

    log_k, gmu_a, glv_a, gmu_b, glv_b = log_pp_kernel_grad_arrays(mu, lv, mu_bar[inverse], lv_bar[inverse])
    loss = float(-np.mean(log_k))

    g_mu = -gmu_a / b
    g_lv = -glv_a / b
    gbar_mu = np.zeros_like(mu_bar)
    gbar_lv = np.zeros_like(lv_bar)
    np.add.at(gbar_mu, inverse, -gmu_b / b)
    np.add.at(gbar_lv, inverse, -glv_b / b)

    # d mean(mu) / d mu_j = 1 / n;  d log(avg var) / d log_var_j = var_j / sum(var) in both modes
    g_mu = g_mu + gbar_mu[inverse] / counts[inverse][:, None]
    in_range = clamp_log_var(lv) == lv
    g_lv = g_lv + np.where(in_range, gbar_lv[inverse] * var / var_sum[inverse], 0.0)
    return loss, g_mu, g_lv


def cross_view_arrays(mu_m, lv_m, mu_n, lv_n, pairs):
    if len(pairs) == 0:
        return 0.0, np.zeros_like(mu_m), np.zeros_like(lv_m), np.zeros_like(mu_n), np.zeros_like(lv_n)
    r, s = pairs[:, 0], pairs[:, 1]
    log_k, gmu_a, glv_a, gmu_b, glv_b = log_pp_kernel_grad_arrays(mu_m[r], lv_m[r], mu_n[s], lv_n[s])
    p = len(pairs)
    loss = float(-np.mean(log_k))
    g_mu_m = np.zeros_like(mu_m)
    g_lv_m = np.zeros_like(lv_m)
    g_mu_n = np.zeros_like(mu_n)
    g_lv_n = np.zeros_like(lv_n)
    np.add.at(g_mu_m, r, -gmu_a / p)
    np.add.at(g_lv_m, r, -glv_a / p)
    np.add.at(g_mu_n, s, -gmu_b / p)
    np.add.at(g_lv_n, s, -glv_b / p)
    return loss, g_mu_m, g_lv_m, g_mu_n, g_lv_n


# ---------------------------------------------------------------------------
# Public losses
# ---------------------------------------------------------------------------


def pixel_contrastive_loss(batch: SampleBatch, table: EmbeddingTable) -> tuple[float, TableGradient]:
    """Contrastive loss over all ordered sample pairs, self-pairs included.

    For each sample the positives are the samples sharing its instance ID; the
    per-sample term is ``-log(sum_pos exp(K) / sum_all exp(K))``.
    """
    _check_contrastive_batch(batch)
    mu, lv = batch.embeddings(table)
    loss, g_mu, g_lv = pixel_contrastive_kernel(mu, lv, batch.instance_ids)
    return float(loss), _scatter(table, batch.point_ids, g_mu, g_lv)


def average_embeddings(members: Sequence[GaussianEmbedding], mode: str = "parameter") -> GaussianEmbedding:
    """Average a group of embeddings.

    ``mode="parameter"`` averages means and variances; ``mode="independent"``
    uses the variance of a mean of independent Gaussians (``sum(var) / n**2``).
    """
    if len(members) == 0:
        raise ValueError("cannot average an empty list of embeddings")
    n_dims = members[0].n_dims
    if any(m.n_dims != n_dims for m in members):
        raise ValueError("all embeddings must share the same dimension")
    mu = np.stack([m.mu for m in members])
    lv = np.stack([m.log_var for m in members])
    if len(members) == 1 and mode == "parameter":
        return members[0]
    mu_bar, lv_bar, *_ = _group_means(mu, lv, np.zeros(len(members), dtype=np.int64), 1, mode)
    return GaussianEmbedding(mu_bar[0], lv_bar[0])


def concentration_loss(
    batch: SampleBatch, table: EmbeddingTable, mode: str = "parameter"
) -> tuple[float, TableGradient]:
    """Mean of ``-log K(F_u, avg of u's positives)`` over the batch."""
    _check_contrastive_batch(batch)
    mu, lv = batch.embeddings(table)
    loss, g_mu, g_lv = concentration_arrays(mu, lv, batch.instance_ids, mode)
    return loss, _scatter(table, batch.point_ids, g_mu, g_lv)


def combined_contrastive_loss(
    batch: SampleBatch, table: EmbeddingTable, mode: str = "parameter"
) -> tuple[float, TableGradient]:
    l1, g1 = pixel_contrastive_loss(batch, table)
    l2, g2 = concentration_loss(batch, table, mode)
    return l1 + l2, g1 + g2


def _as_arrays(embs):
    if isinstance(embs, tuple) and len(embs) == 2 and isinstance(embs[0], np.ndarray):
        return embs
    embs = list(embs)
    if not embs:
        raise ValueError("embedding list is empty")
    return np.stack([e.mu for e in embs]), np.stack([e.log_var for e in embs])


def mine_cross_view_pairs(emb_m, emb_n, tau: float, view_m: int, view_n: int) -> PositivePairSet:
    """All index pairs across two views whose kernel exceeds ``tau``.

    ``emb_m`` / ``emb_n`` are sequences of embeddings or ``(mu, log_var)`` array
    pairs.  Mining is pure set construction: no gradient flows through it.
    """
    if view_m == view_n:
        raise ValueError(f"cross-view mining needs two distinct views, got {view_m} twice")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    mu_m, lv_m = _as_arrays(emb_m)
    mu_n, lv_n = _as_arrays(emb_n)
    if mu_m.shape[0] == 0 or mu_n.shape[0] == 0:
        raise ValueError("embedding list is empty")
    if mu_m.shape[1] != mu_n.shape[1]:
        raise ValueError("dimension mismatch between views")
    return PositivePairSet(
        mine_pairs_kernel(
            np.ascontiguousarray(mu_m, dtype=np.float64),
            np.ascontiguousarray(lv_m, dtype=np.float64),
            np.ascontiguousarray(mu_n, dtype=np.float64),
            np.ascontiguousarray(lv_n, dtype=np.float64),
            float(tau),
        )
    )


def cross_view_loss(
    pairs: PositivePairSet, batch_m: SampleBatch, batch_n: SampleBatch, table: EmbeddingTable
) -> tuple[float, TableGradient]:
    """``-mean log K`` over mined pairs; zero (with zero gradient) for an empty set."""
    p = pairs.pairs
    if len(p) and (p[:, 0].min() < 0 or p[:, 0].max() >= len(batch_m) or p[:, 1].min() < 0 or p[:, 1].max() >= len(batch_n)):
        raise IndexError("positive pair index out of range")
    mu_m, lv_m = batch_m.embeddings(table)
    mu_n, lv_n = batch_n.embeddings(table)
    loss, gmm, glm, gmn, gln = cross_view_arrays(mu_m, lv_m, mu_n, lv_n, p)
    grad = _scatter(table, batch_m.point_ids, gmm, glm)
    np.add.at(grad.d_mu, batch_n.point_ids, gmn)
    np.add.at(grad.d_log_var, batch_n.point_ids, gln)
    return loss, grad


def regularization_loss(e: GaussianEmbedding) -> tuple[float, np.ndarray]:
    """``log(prod var) = sum(log_var)``; its gradient w.r.t. each log-variance is 1."""
    return float(np.sum(e.log_var)), np.ones_like(e.log_var)


def batch_regularization(batches: Sequence[SampleBatch], table: EmbeddingTable) -> tuple[float, TableGradient]:
    """Mean regularizer over every sample of the given batches."""
    ids = np.concatenate([b.point_ids for b in batches])
    value = float(np.mean(np.sum(table.log_var[ids], axis=1)))
    grad = TableGradient.zeros(table)
    np.add.at(grad.d_log_var, ids, np.full((ids.size, table.n_dims), 1.0 / ids.size))
    return value, grad


def total_loss(
    batches: Sequence[SampleBatch],
    pairs: PositivePairSet | None,
    table: EmbeddingTable,
    w_cross: float,
    w_reg: float,
    mode: str = "parameter",
) -> tuple[LossBreakdown, TableGradient]:
    """Contrastive terms (averaged over views) + weighted cross-view and covariance terms.

    With two batches, ``pairs`` index into ``batches[0]`` and ``batches[1]``.
    """
    if w_cross < 0 or w_reg < 0:
        raise ValueError("loss weights must be non-negative")
    if not 1 <= len(batches) <= 2:
        raise ValueError("total_loss takes one or two view batches")
    out = LossBreakdown()
    grad = TableGradient.zeros(table)
    scale = 1.0 / len(batches)
    for batch in batches:
        lp, gp = pixel_contrastive_loss(batch, table)
        lc, gc = concentration_loss(batch, table, mode)
        out.pixel_contra += scale * lp
        out.concen += scale * lc
        grad = grad + (gp + gc) * scale
    out.total = out.pixel_contra + out.concen

    if pairs is not None and w_cross > 0:
        if len(batches) != 2:
            raise ValueError("cross-view pairs need exactly two batches")
        lx, gx = cross_view_loss(pairs, batches[0], batches[1], table)
        out.cross = lx
        out.total += w_cross * lx
        grad = grad + gx * w_cross

    lr, gr = batch_regularization(batches, table)
    out.reg = lr
    if w_reg > 0:
        out.total += w_reg * lr
        grad = grad + gr * w_reg
    return out, grad
