"""Slow, independent reference implementations used as test oracles.

Nothing here imports the code paths it checks: kernels are evaluated from the
closed form with plain floats, matching is brute force, and the prototype
selection follows the pseudocode step by step.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def kernel_scalar(mu_a, var_a, mu_b, var_b) -> float:
    """The product kernel straight from its closed form (no log-space tricks)."""
    pref = 1.0
    expo = 0.0
    for ma, va, mb, vb in zip(mu_a, var_a, mu_b, var_b):
        pref *= ((va / vb + vb / va) / 2.0) ** -0.5
        expo += (ma - mb) ** 2 / (4.0 * (va + vb))
    return pref * math.exp(-expo)


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def grad_close(analytic, numeric, rel=1e-4, floor=1e-8) -> bool:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return bool(np.all(np.abs(analytic - numeric) <= rel * np.abs(numeric) + floor))


def pixel_contrastive_loops(mu, var, ids) -> float:
    b = len(ids)
    total = 0.0
    for u in range(b):
        num = den = 0.0
        for v in range(b):
            e = math.exp(kernel_scalar(mu[u], var[u], mu[v], var[v]))
            den += e
            if ids[u] == ids[v]:
                num += e
        total += -math.log(num / den)
    return total / b


def alg1_reference(scores, edges, threshold, keys):
    """Greedy prototype selection written out like the printed pseudocode.

    ``keys`` gives each feature's (view_id, local_instance_id) for tie-breaking.
    Returns selected feature indices in selection order.
    """
    remaining = list(range(len(scores)))
    selected = []
    while remaining:
        best = remaining[0]
        for j in remaining[1:]:
            if scores[j] > scores[best] or (scores[j] == scores[best] and keys[j] < keys[best]):
                best = j
        selected.append(best)
        remaining.remove(best)
        survivors = []
        for j in remaining:
            if edges[best][j] >= threshold:
                continue
            survivors.append(j)
        remaining = survivors
    return selected


def segments_from_masks(masks, stuff=(0,)):
    """{(class, id): set of (view, y, x)}; stuff classes ignore the instance ID."""
    segs: dict = {}
    for v, (sem, inst) in enumerate(masks):
        h, w = sem.shape
        for y in range(h):
            for x in range(w):
                c = int(sem[y, x])
                i = 0 if c in stuff else int(inst[y, x])
                segs.setdefault((c, i), set()).add((v, y, x))
    return segs


def brute_force_pq(pred_masks, gt_masks):
    """PQ by enumerating every class-respecting one-to-one matching.

    The matching kept is the one with the most IoU > 0.5 pairs (ties: larger
    IoU sum).  Returns (pq, sq, rq, {class: (tp, fp, fn, sq, rq, pq)}).
    """
    pred = segments_from_masks(pred_masks)
    gt = segments_from_masks(gt_masks)
    per_class = {}
    for c in sorted({k[0] for k in gt}):
        gts = [s for k, s in sorted(gt.items()) if k[0] == c]
        preds = [s for k, s in sorted(pred.items()) if k[0] == c]
        best = None
        slots = list(range(len(preds))) + [None] * len(gts)
        for assign in itertools.permutations(slots, len(gts)):
            used = [a for a in assign if a is not None]
            if len(used) != len(set(used)):
                continue
            ious = []
            for g, a in zip(gts, assign):
                if a is None:
                    continue
                p = preds[a]
                iou = len(g & p) / len(g | p)
                if iou > 0.5:
                    ious.append(iou)
            cand = (len(ious), sum(ious), ious)
            if best is None or cand[:2] > best[:2]:
                best = cand
        tp, _, ious = best
        fp, fn = len(preds) - tp, len(gts) - tp
        sq = sum(ious) / tp if tp else 0.0
        rq = tp / (tp + 0.5 * fp + 0.5 * fn)
        per_class[c] = (tp, fp, fn, sq, rq, sq * rq)
    n = len(per_class)
    pq = sum(v[5] for v in per_class.values()) / n
    sq = sum(v[3] for v in per_class.values()) / n
    rq = sum(v[4] for v in per_class.values()) / n
    return pq, sq, rq, per_class
