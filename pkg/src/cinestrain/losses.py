"""Differentiable similarity/overlap losses: global NCC, Parzen-window NMI, soft Dice.

Each returns a LossValueGrad carrying the value and the analytic gradients with
respect to both sample vectors.  Callers turn values into loss contributions
(-ncc, -nmi, 1 - dice).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError

_TINY = 1e-30
_PLOG = 1e-12


@dataclass(frozen=True)
class LossValueGrad:
    value: float
    grad_a: np.ndarray
    grad_b: np.ndarray


def _pair(a, b, min_n):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError("sample vectors differ in length")
    if a.size < min_n:
        raise ValueError(f"need at least {min_n} samples")
    return a, b


def ncc(a, b) -> LossValueGrad:
    """Pearson correlation of two sample sets, with gradients.

    Both inputs constant is degenerate; exactly one constant input yields
    value 0 with zero gradients (no direction improves correlation to a
    constant signal).
    """
    a, b = _pair(a, b, 2)
    za = a - a.mean()
    zb = b - b.mean()
    sa = float(za @ za)
    sb = float(zb @ zb)
    if sa < _TINY and sb < _TINY:
        raise DegenerateInputError("ncc: both inputs are constant")
    if sa < _TINY or sb < _TINY:
        z = np.zeros_like(a)
        return LossValueGrad(0.0, z, z.copy())
    c = float(za @ zb)
    denom = np.sqrt(sa * sb)
    r = c / denom
    grad_a = (zb - (c / sa) * za) / denom
    grad_b = (za - (c / sb) * zb) / denom
    return LossValueGrad(r, grad_a, grad_b)


def _parzen_weights(x, centers, sig2):
    # row-normalized Gaussian bin weights, (n, bins)
    d = centers[None, :] - x[:, None]
    g = np.exp(-0.5 * d * d / sig2)
    w = g / g.sum(axis=1, keepdims=True)
    t = d / sig2  # dlog g / dx up to sign bookkeeping below
    return w, t


def nmi_parzen(a, b, bins=32, sigma=1.0) -> LossValueGrad:
    """Normalized mutual information (H(A)+H(B))/H(A,B) from a Gaussian Parzen
    joint histogram.

    Inputs are rescaled to [0,1] by their joint min/max, which is treated as
    constant for the gradient.  sigma is in units of one bin width.
    """
    a, b = _pair(a, b, 2)
    if bins < 2:
        raise ValueError("need at least 2 bins")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    span = hi - lo
    if span < 1e-12:
        raise DegenerateInputError("nmi: constant joint distribution")
    x = (a - lo) / span
    y = (b - lo) / span
    n = a.size

    centers = (np.arange(bins) + 0.5) / bins
    sig2 = (sigma / bins) ** 2
    wa, ta = _parzen_weights(x, centers, sig2)
    wb, tb = _parzen_weights(y, centers, sig2)

    joint = wa.T @ wb / n
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    log_j = np.log(np.maximum(joint, _PLOG))
    log_a = np.log(np.maximum(pa, _PLOG))
    log_b = np.log(np.maximum(pb, _PLOG))
    ha = -float(pa @ log_a)
    hb = -float(pb @ log_b)
    hj = -float((joint * log_j).sum())
    hj = max(hj, _PLOG)
    value = (ha + hb) / hj

    # d value / d joint[i, j], then chain through the normalized Parzen rows
    dv_dj = (-(log_a[:, None] + 1.0) - (log_b[None, :] + 1.0) + value * (log_j + 1.0)) / hj
    ga = (wb @ dv_dj.T) / n  # (n, bins): d value / d wa[n, i]
    gb = (wa @ dv_dj) / n
    grad_x = (ga * wa * (ta - (wa * ta).sum(axis=1, keepdims=True))).sum(axis=1)
    grad_y = (gb * wb * (tb - (wb * tb).sum(axis=1, keepdims=True))).sum(axis=1)
    return LossValueGrad(value, grad_x / span, grad_y / span)


def soft_dice(p, q) -> LossValueGrad:
    """2*sum(pq) / (sum(p) + sum(q) + eps) over soft masks in [0, 1]."""
    p, q = _pair(p, q, 1)
    s = float(p @ q)
    d = float(p.sum() + q.sum()) + 1e-7
    value = 2.0 * s / d
    grad_p = (2.0 * q * d - 2.0 * s) / (d * d)
    grad_q = (2.0 * p * d - 2.0 * s) / (d * d)
    return LossValueGrad(value, grad_p, grad_q)
