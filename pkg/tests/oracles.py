"""Independent reference implementations used only by the tests.

Everything here is written as plainly as possible (python loops, direct
formulas) so disagreements with the package point at the package.
"""

import math

import numpy as np


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_masked_attention(q, k, v, positions, band, rho=0.0, scale=None):
    """Row-by-row softmax attention with the integer-exact band rule."""
    n, d = q.shape
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    pos = np.asarray(positions, dtype=np.int64)
    out = np.zeros((n, v.shape[1]))
    band2 = None if math.isinf(band) else band * band
    for i in range(n):
        scores = []
        cols = []
        for j in range(n):
            dx = int(pos[i, 0]) - int(pos[j, 0])
            dy = int(pos[i, 1]) - int(pos[j, 1])
            dist2 = dx * dx + dy * dy
            if band2 is not None and dist2 > band2:
                continue
            s = scale * float(np.dot(q[i], k[j]))
            if rho != 0.0:
                s -= rho * math.sqrt(dist2)
            scores.append(s)
            cols.append(j)
        m = max(scores)
        w = [math.exp(s - m) for s in scores]
        z = sum(w)
        for wj, j in zip(w, cols):
            out[i] += (wj / z) * v[j]
    return out


def rank_by_svd(m, rel_tol=1e-8):
    s = np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def pairwise_auc(y, s):
    """One-vs-rest AUC for binary y by direct pair counting, 0.5 per tie."""
    pos = [si for yi, si in zip(y, s) if yi == 1]
    neg = [si for yi, si in zip(y, s) if yi == 0]
    assert pos and neg
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def f1_per_class(preds, labels, cls):
    tp = sum(1 for p, t in zip(preds, labels) if p == cls and t == cls)
    fp = sum(1 for p, t in zip(preds, labels) if p == cls and t != cls)
    fn = sum(1 for p, t in zip(preds, labels) if p != cls and t == cls)
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2.0 * tp / (2 * tp + fp + fn)


def adamw_step_by_hand(theta, grad, m, v, t, lr, beta1, beta2, eps, wd):
    """One decoupled-decay update on plain floats; returns new state."""
    theta = theta * (1.0 - lr * wd)
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
    return theta, m, v


def finite_diff_grads(f, arrays, h=1e-6):
    """Central differences of scalar f with respect to each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f()
            flat[i] = keep - h
            lo = f()
            flat[i] = keep
            gflat[i] = (up - lo) / (2.0 * h)
        grads.append(g)
    return grads
