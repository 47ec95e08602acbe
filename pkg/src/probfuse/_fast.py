"""Compiled all-pairs pixel-contrastive loss.

Same arithmetic as ``loss.pixel_contrastive_arrays`` (which stays the reference);
loops run in a fixed order so results are reproducible.
"""

import math

import numba
import numpy as np

from .core import LOG_VAR_MAX, LOG_VAR_MIN

_LN2 = math.log(2.0)


@numba.njit(cache=True)
def pixel_contrastive_kernel(mu, lv, ids):
    b, n = mu.shape
    lvc = np.empty_like(lv)
    va = np.empty_like(lv)
    for i in range(b):
        for d in range(n):
            x = min(max(lv[i, d], LOG_VAR_MIN), LOG_VAR_MAX)
            lvc[i, d] = x
            va[i, d] = math.exp(x)

    lv_sum = np.zeros(b)
    for i in range(b):
        for d in range(n):
            lv_sum[i] += lvc[i, d]
    k = np.empty((b, b))
    e = np.empty((b, b))
    e_one = math.exp(1.0)
    for i in range(b):
        k[i, i] = 1.0
        e[i, i] = e_one
        for j in range(i + 1, b):
            # one log of the product of per-dimension prefactor terms; each lies in [2e-12, 2e12]
            prod = 1.0
            log_prod = 0.0
            expo = 0.0
            for d in range(n):
                diff = mu[i, d] - mu[j, d]
                prod *= va[i, d] * va[i, d] + va[j, d] * va[j, d]
                if prod > 1e250 or prod < 1e-250:
                    log_prod += math.log(prod)
                    prod = 1.0
                expo += diff * diff / (4.0 * (va[i, d] + va[j, d]))
            log_prod += math.log(prod)
            acc = -0.5 * (log_prod - n * _LN2 - lv_sum[i] - lv_sum[j]) - expo
            kij = math.exp(acc)
            k[i, j] = kij
            k[j, i] = kij
            eij = math.exp(kij)
            e[i, j] = eij
            e[j, i] = eij

    num = np.zeros(b)
    den = np.zeros(b)
    for i in range(b):
        for j in range(b):
            den[i] += e[i, j]
            if ids[i] == ids[j]:
                num[i] += e[i, j]
    loss = 0.0
    for i in range(b):
        loss += math.log(den[i]) - math.log(num[i])
    loss /= b

    g_mu = np.zeros((b, n))
    g_lv = np.zeros((b, n))
    for i in range(b):
        for j in range(i + 1, b):
            dij = e[i, j] / den[i]
            dji = e[j, i] / den[j]
            if ids[i] == ids[j]:
                dij -= e[i, j] / num[i]
                dji -= e[j, i] / num[j]
            h = (dij + dji) * k[i, j] / b
            for d in range(n):
                vi = va[i, d]
                vj = va[j, d]
                diff = mu[i, d] - mu[j, d]
                inv_s = 1.0 / (vi + vj)
                half_tanh = 0.5 * (vi * vi - vj * vj) / (vi * vi + vj * vj)
                c_mu = -0.5 * diff * inv_s
                r_s = 0.25 * diff * diff * inv_s * inv_s
                g_mu[i, d] += h * c_mu
                g_mu[j, d] -= h * c_mu
                g_lv[i, d] += h * (r_s * vi - half_tanh)
                g_lv[j, d] += h * (r_s * vj + half_tanh)
    for i in range(b):
        for d in range(n):
            if lvc[i, d] != lv[i, d]:
                g_lv[i, d] = 0.0
    return loss, g_mu, g_lv


@numba.njit(cache=True)
def mine_pairs_kernel(mu_m, lv_m, mu_n, lv_n, tau):
    """Row-major list of ``(r, s)`` with ``K(m_r, n_s) > tau``."""
    bm, n = mu_m.shape
    bn = mu_n.shape[0]
    out = np.empty((bm * bn, 2), dtype=np.int64)
    count = 0
    for r in range(bm):
        for s in range(bn):
            acc = 0.0
            for d in range(n):
                la = min(max(lv_m[r, d], LOG_VAR_MIN), LOG_VAR_MAX)
                lb = min(max(lv_n[s, d], LOG_VAR_MIN), LOG_VAR_MAX)
                diff = mu_m[r, d] - mu_n[s, d]
                t = abs(la - lb)
                acc -= 0.5 * (t + math.log1p(math.exp(-2.0 * t)) - _LN2)
                acc -= diff * diff / (4.0 * (math.exp(la) + math.exp(lb)))
            if math.exp(acc) > tau:
                out[count, 0] = r
                out[count, 1] = s
                count += 1
    return out[:count].copy()
