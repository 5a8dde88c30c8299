"""Loop-based reference implementations used by the self-test and test suite.

Deliberately naive: every output element is an explicit sum over taps.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loop(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, stride: int = 1,
                dilation: int = 1, pad: int = 0, groups: int = 1) -> tuple[np.ndarray, int]:
    """Cross-correlation of C×H×W ``x``; returns (output, multiply-accumulate count)."""
    C, H, W = x.shape
    O, Cg, k, _ = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        H += 2 * pad
        W += 2 * pad
    k_eff = k + (k - 1) * (dilation - 1)
    Ho = (H - k_eff) // stride + 1
    Wo = (W - k_eff) // stride + 1
    out = np.zeros((O, Ho, Wo))
    per_group_out = O // groups
    macs = 0
    for o in range(O):
        g = o // per_group_out
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(Cg):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, c, u, v] * x[g * Cg + c, i * stride + u * dilation, j * stride + v * dilation]
                            macs += 1
                out[o, i, j] = acc
    return out, macs


def valid_placements(H: int, k: int, d: int, s: int) -> int:
    """Count top-left positions whose dilated footprint fits inside ``H``."""
    k_eff = k + (k - 1) * (d - 1)
    return sum(1 for start in range(0, H, s) if start + k_eff <= H)


def attention_loop(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Spatial attention for d×S Q, K, V; returns (d×S output, S×S weights)."""
    d, S = q.shape
    weights = np.zeros((S, S))
    for i in range(S):
        scores = [sum(q[c, i] * k[c, j] for c in range(d)) / math.sqrt(d) for j in range(S)]
        top = max(scores)
        e = [math.exp(s - top) for s in scores]
        z = sum(e)
        for j in range(S):
            weights[i, j] = e[j] / z
    out = np.zeros((v.shape[0], S))
    for c in range(v.shape[0]):
        for i in range(S):
            out[c, i] = sum(weights[i, j] * v[c, j] for j in range(S))
    return out, weights


def dsconv_loop(x: np.ndarray, dw_w: np.ndarray, dw_b: np.ndarray | None, pw_w: np.ndarray,
                pw_b: np.ndarray | None, dilation: int = 1) -> np.ndarray:
    """Depthwise ("same") then pointwise convolution by explicit loops."""
    k = dw_w.shape[-1]
    pad = (k + (k - 1) * (dilation - 1) - 1) // 2
    mid, _ = conv2d_loop(x, dw_w, dw_b, 1, dilation, pad, groups=x.shape[0])
    out, _ = conv2d_loop(mid, pw_w, pw_b)
    return out
