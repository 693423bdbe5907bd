"""Vectorized numpy implementation of the hot kernels.

This is the reference backend; the compiled Cython extension implements the
same contract.  All network math runs in float64; layer weights arrive as
lists of (d_out, d_in) float64 arrays.  The first layer's pre-activation is
scaled by omega0, hidden layers use plain sin, the last layer is linear.
A single-layer parameter list therefore describes a pure affine map.
"""

from __future__ import annotations

import numpy as np


def _lmul(w: np.ndarray, t: np.ndarray) -> np.ndarray:
    """(d_out, d_in) @ (n, d_in, k) -> (n, d_out, k) as one GEMM."""
    n, d_in, k = t.shape
    out = w @ t.transpose(1, 0, 2).reshape(d_in, n * k)
    return out.reshape(w.shape[0], n, k).transpose(1, 0, 2)


def mlp_forward(ws, bs, omega0, x):
    """Evaluate the sine MLP at a batch of inputs, (n, d_in) -> (n, d_out)."""
    h = np.asarray(x, dtype=np.float64)
    n_layers = len(ws)
    for l in range(n_layers - 1):
        a = h @ ws[l].T + bs[l]
        if l == 0:
            a *= omega0
        h = np.sin(a)
    return h @ ws[-1].T + bs[-1]


def mlp_forward_jacobian(ws, bs, omega0, x):
    """Forward evaluation plus the exact input Jacobian per sample.

    Returns ``(u, jac)`` with ``u`` of shape (n, d_out) and ``jac`` of shape
    (n, d_out, d_in), propagated in closed form through the cosine chain.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d_in = x.shape
    h = x
    d = np.broadcast_to(np.eye(d_in), (n, d_in, d_in))
    n_layers = len(ws)
    for l in range(n_layers - 1):
        a = h @ ws[l].T + bs[l]
        p = _lmul(ws[l], d)
        if l == 0:
            a *= omega0
            p = p * omega0
        h = np.sin(a)
        d = np.cos(a)[:, :, None] * p
    u = h @ ws[-1].T + bs[-1]
    jac = _lmul(ws[-1], d)
    return u, jac


def mlp_backward(ws, bs, omega0, x, grad_u, grad_jac=None):
    """Reverse-mode parameter gradients of sum_n <grad_u, u> (+ <grad_jac, jac>).

    ``grad_u`` is (n, d_out); ``grad_jac``, when given, is (n, d_out, d_in)
    and backpropagates through the forward-mode Jacobian as well.  Returns
    ``(grad_ws, grad_bs)`` shaped like the parameter lists.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_u = np.asarray(grad_u, dtype=np.float64)
    n, d_in = x.shape
    n_layers = len(ws)
    need_jac = grad_jac is not None

    # forward pass, keeping what the reverse sweep needs
    hs = [x]
    cos_a = []
    ps = []
    ds = [np.broadcast_to(np.eye(d_in), (n, d_in, d_in))] if need_jac else [None]
    h = x
    for l in range(n_layers - 1):
        a = h @ ws[l].T + bs[l]
        if l == 0:
            a *= omega0
        c = np.cos(a)
        h = np.sin(a)
        hs.append(h)
        cos_a.append(c)
        if need_jac:
            p = _lmul(ws[l], ds[-1])
            if l == 0:
                p = p * omega0
            ps.append(p)
            ds.append(c[:, :, None] * p)
        else:
            ps.append(None)
            ds.append(None)

    grad_ws = [None] * n_layers
    grad_bs = [None] * n_layers

    gw = grad_u.T @ hs[-1]
    if need_jac:
        grad_jac = np.asarray(grad_jac, dtype=np.float64)
        gw = gw + np.einsum("nij,nkj->ik", grad_jac, ds[-1])
        gd = _lmul(ws[-1].T, grad_jac)
    grad_ws[-1] = gw
    grad_bs[-1] = grad_u.sum(axis=0)
    gh = grad_u @ ws[-1]

    for l in range(n_layers - 2, -1, -1):
        ga = cos_a[l] * gh
        if need_jac:
            ga -= hs[l + 1] * np.einsum("nij,nij->ni", gd, ps[l])
            gp = cos_a[l][:, :, None] * gd
        gw = ga.T @ hs[l]
        gb = ga.sum(axis=0)
        if need_jac:
            gw = gw + np.einsum("nij,nkj->ik", gp, ds[l])
        if l == 0:
            gw *= omega0
            gb *= omega0
        grad_ws[l] = gw
        grad_bs[l] = gb
        if l > 0:
            gh = ga @ ws[l]
            if need_jac:
                gd = _lmul(ws[l].T, gp)
    return grad_ws, grad_bs


def trilinear(data: np.ndarray, idx: np.ndarray):
    """Trilinear interpolation on the voxel lattice, with index-space gradient.

    ``data`` is (nx, ny, nz) float32; ``idx`` is (n, 3) continuous voxel
    indices.  Returns ``(values, grad_idx, inside)``; points outside the
    lattice hull [0, n-1] per axis yield 0 value, 0 gradient, inside False.
    """
    idx = np.asarray(idx, dtype=np.float64)
    nx, ny, nz = data.shape
    hi = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
    inside = np.all((idx >= 0.0) & (idx <= hi), axis=1)

    q = np.clip(idx, 0.0, hi)
    i0 = np.minimum(np.floor(q).astype(np.intp), np.maximum(np.array([nx, ny, nz]) - 2, 0))
    f = q - i0
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)

    flat = np.ravel(data, order="F")

    def at(i, j, k):
        return flat[i + nx * (j + ny * k)].astype(np.float64)

    v000 = at(x0, y0, z0)
    v100 = at(x1, y0, z0)
    v010 = at(x0, y1, z0)
    v110 = at(x1, y1, z0)
    v001 = at(x0, y0, z1)
    v101 = at(x1, y0, z1)
    v011 = at(x0, y1, z1)
    v111 = at(x1, y1, z1)

    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    c00 = v000 * gx + v100 * fx
    c10 = v010 * gx + v110 * fx
    c01 = v001 * gx + v101 * fx
    c11 = v011 * gx + v111 * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    vals = c0 * gz + c1 * fz

    grad = np.empty_like(idx)
    grad[:, 0] = ((v100 - v000) * gy + (v110 - v010) * fy) * gz + (
        (v101 - v001) * gy + (v111 - v011) * fy
    ) * fz
    grad[:, 1] = (c10 - c00) * gz + (c11 - c01) * fz
    grad[:, 2] = c1 - c0

    vals = np.where(inside, vals, 0.0)
    grad[~inside] = 0.0
    return vals, grad, inside
