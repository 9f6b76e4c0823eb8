"""Independent numeric oracles shared by the tests."""

from __future__ import annotations

import numpy as np


def numeric_grad(f, arrays, step=3e-5):
    """Fourth-order central differences of scalar ``f()`` w.r.t. every array in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            vals = []
            for k in (2, 1, -1, -2):
                a[idx] = orig + k * step
                vals.append(f())
            a[idx] = orig
            g[idx] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * step)
        grads.append(g)
    return grads


def rel_error(analytic, numeric, eps=1e-5):
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + eps))) if analytic.size else 0.0


def mtsa_reference(hidden, original, down_w, down_b, gate_w, enh_w, up_w, up_b, alpha, temperature=0.1):
    """Plain numpy forward of the adapter (MTSA aggregator) for one (K, D) token set."""
    relu = lambda x: np.maximum(x, 0.0)
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    enhanced = []
    for h, w, b, g, e in zip(hidden, down_w, down_b, gate_w, enh_w):
        f = relu(h @ w + b)
        enhanced.append(sig(f @ g) * (f @ e + f))
    guide = enhanced[-1]
    early = np.stack(enhanced[:-1], axis=1)  # (K, M, d)
    out = np.empty_like(guide)
    for k in range(guide.shape[0]):
        rows = early[k]
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        unit = np.where(norms > 1e-12, rows / np.where(norms > 1e-12, norms, 1.0), 0.0)
        rate = relu(unit @ unit.T).sum(axis=1)
        scores = relu(rows @ guide[k])
        scores = np.where(np.abs(rate) >= 1e-12, scores / np.where(np.abs(rate) >= 1e-12, rate, 1.0), 0.0)
        total = np.abs(scores).sum()
        weights = scores / total if total >= 1e-12 else np.zeros_like(scores)
        out[k] = weights @ rows + guide[k]
    u = np.tanh(alpha / temperature)
    return u * (out @ up_w + up_b) + (1 - u) * original


def redundancy_reference(rows):
    """Row sums of the rectified cosine matrix of ``rows`` (M, d)."""
    unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    return np.maximum(unit @ unit.T, 0.0).sum(axis=1)


def blend_reference(guidance, rows, normalize=True):
    """Guidance plus score-weighted rows; ``normalize`` divides scores by the redundancy rate."""
    scores = np.maximum(rows @ guidance, 0.0)
    if normalize:
        scores = scores / redundancy_reference(rows)
    return guidance + (scores / scores.sum()) @ rows
