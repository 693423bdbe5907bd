# Compiled implementation of the hot kernels (see numpy_backend for the
# reference semantics).  Matrix products go through BLAS dgemm; sin/cos and
# tangent scaling are fused loops.  Tangent stacks are kept feature-major,
# shape (d, n, 3), so every layer update is a single GEMM.

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, floor, sin

from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _mm_nn(double* a, double* b, double* c, int m, int n, int k,
                 double beta) noexcept nogil:
    # row-major C(m,k) = A(m,n) @ B(n,k) + beta*C
    cdef char cn = b'N'
    cdef double alpha = 1.0
    dgemm(&cn, &cn, &k, &m, &n, &alpha, b, &k, a, &n, &beta, c, &k)


cdef void _mm_nt(double* a, double* b, double* c, int m, int n, int k,
                 double beta) noexcept nogil:
    # row-major C(m,k) = A(m,n) @ B(k,n)^T + beta*C
    cdef char ct = b'T'
    cdef char cn = b'N'
    cdef double alpha = 1.0
    dgemm(&ct, &cn, &k, &m, &n, &alpha, b, &n, a, &n, &beta, c, &k)


cdef void _mm_tn(double* a, double* b, double* c, int m, int n, int k,
                 double beta) noexcept nogil:
    # row-major C(m,k) = A(n,m)^T @ B(n,k) + beta*C
    cdef char cn = b'N'
    cdef char ct = b'T'
    cdef double alpha = 1.0
    dgemm(&cn, &ct, &k, &m, &n, &alpha, b, &k, a, &m, &beta, c, &k)


cdef void _affine(double[:, ::1] h, double[:, ::1] w, double[::1] b,
                  double[:, ::1] out, double scale) noexcept nogil:
    # out = scale * (h @ w^T + b)
    cdef Py_ssize_t n = h.shape[0], dout = w.shape[0], i, j
    _mm_nt(&h[0, 0], &w[0, 0], &out[0, 0], <int>n, <int>h.shape[1], <int>dout, 0.0)
    for i in range(n):
        for j in range(dout):
            out[i, j] = scale * (out[i, j] + b[j])


cdef void _sin_cos(double[:, ::1] a, double[:, ::1] s, double[:, ::1] c) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            s[i, j] = sin(a[i, j])
            c[i, j] = cos(a[i, j])


cdef void _scale_tangent(double[:, ::1] c, double[:, :, ::1] p,
                         double[:, :, ::1] out) noexcept nogil:
    # out[j,i,m] = c[i,j] * p[j,i,m]   (tangents are feature-major)
    cdef Py_ssize_t d = p.shape[0], n = p.shape[1], k = p.shape[2], i, j, m
    cdef double cij
    for j in range(d):
        for i in range(n):
            cij = c[i, j]
            for m in range(k):
                out[j, i, m] = cij * p[j, i, m]


cdef void _tangent_dot(double[:, :, ::1] gd, double[:, :, ::1] p,
                       double[:, ::1] out) noexcept nogil:
    # out[i,j] = sum_m gd[j,i,m] * p[j,i,m]
    cdef Py_ssize_t d = p.shape[0], n = p.shape[1], k = p.shape[2], i, j, m
    cdef double acc
    for j in range(d):
        for i in range(n):
            acc = 0.0
            for m in range(k):
                acc += gd[j, i, m] * p[j, i, m]
            out[i, j] = acc


cdef _as_f64(arr):
    return np.ascontiguousarray(arr, dtype=np.float64)


def mlp_forward(ws, bs, omega0, x):
    """Evaluate the sine MLP at a batch of inputs, (n, d_in) -> (n, d_out)."""
    cdef double om = float(omega0)
    cdef Py_ssize_t n_layers = len(ws)
    x = _as_f64(x)
    cdef Py_ssize_t n = x.shape[0]
    cdef double[:, ::1] h = x
    cdef double[:, ::1] w
    cdef double[::1] b
    cdef double[:, ::1] a
    cdef Py_ssize_t l, i, j
    for l in range(n_layers - 1):
        w = _as_f64(ws[l])
        b = _as_f64(bs[l])
        out = np.empty((n, w.shape[0]), dtype=np.float64)
        a = out
        _affine(h, w, b, a, om if l == 0 else 1.0)
        for i in range(n):
            for j in range(a.shape[1]):
                a[i, j] = sin(a[i, j])
        h = a
    w = _as_f64(ws[n_layers - 1])
    b = _as_f64(bs[n_layers - 1])
    u = np.empty((n, w.shape[0]), dtype=np.float64)
    cdef double[:, ::1] uv = u
    _affine(h, w, b, uv, 1.0)
    return u


def mlp_forward_jacobian(ws, bs, omega0, x):
    """Forward evaluation plus the exact input Jacobian per sample."""
    cdef double om = float(omega0)
    cdef Py_ssize_t n_layers = len(ws)
    x = _as_f64(x)
    cdef Py_ssize_t n = x.shape[0], d_in = x.shape[1]
    cdef Py_ssize_t l, i, j, m, dout
    cdef double[:, ::1] h = x
    cdef double[:, ::1] w
    cdef double[::1] b
    cdef double[:, ::1] a, s, c
    cdef double[:, :, ::1] d = None, p

    for l in range(n_layers - 1):
        w = _as_f64(ws[l])
        b = _as_f64(bs[l])
        dout = w.shape[0]
        a_arr = np.empty((n, dout), dtype=np.float64)
        a = a_arr
        _affine(h, w, b, a, om if l == 0 else 1.0)
        p_arr = np.empty((dout, n, d_in), dtype=np.float64)
        p = p_arr
        if l == 0:
            for j in range(dout):
                for i in range(n):
                    for m in range(d_in):
                        p[j, i, m] = om * w[j, m]
        else:
            _mm_nn(&w[0, 0], &d[0, 0, 0], &p[0, 0, 0],
                   <int>dout, <int>w.shape[1], <int>(n * d_in), 0.0)
        s_arr = np.empty((n, dout), dtype=np.float64)
        c_arr = np.empty((n, dout), dtype=np.float64)
        s = s_arr
        c = c_arr
        _sin_cos(a, s, c)
        d_arr = np.empty((dout, n, d_in), dtype=np.float64)
        d = d_arr
        _scale_tangent(c, p, d)
        h = s

    w = _as_f64(ws[n_layers - 1])
    b = _as_f64(bs[n_layers - 1])
    dout = w.shape[0]
    u = np.empty((n, dout), dtype=np.float64)
    cdef double[:, ::1] uv = u
    _affine(h, w, b, uv, 1.0)
    jac_fm = np.empty((dout, n, d_in), dtype=np.float64)
    cdef double[:, :, ::1] jv = jac_fm
    if n_layers == 1:
        for j in range(dout):
            for i in range(n):
                for m in range(d_in):
                    jv[j, i, m] = w[j, m]
    else:
        _mm_nn(&w[0, 0], &d[0, 0, 0], &jv[0, 0, 0],
               <int>dout, <int>w.shape[1], <int>(n * d_in), 0.0)
    return u, np.ascontiguousarray(jac_fm.transpose(1, 0, 2))


def mlp_backward(ws, bs, omega0, x, grad_u, grad_jac=None):
    """Reverse-mode parameter gradients, optionally through the Jacobian."""
    cdef double om = float(omega0)
    cdef Py_ssize_t n_layers = len(ws)
    x = _as_f64(x)
    grad_u = _as_f64(grad_u)
    cdef bint need_jac = grad_jac is not None
    cdef Py_ssize_t n = x.shape[0], d_in = x.shape[1]
    cdef Py_ssize_t l, i, j, m, dout, dprev

    ws64 = [_as_f64(wl) for wl in ws]
    bs64 = [_as_f64(bl) for bl in bs]

    # forward sweep, storing activations (n,d) and tangents (d,n,3)
    hs = [x]
    cs = []
    ps = []
    ds = []
    cdef double[:, ::1] h = x, w, a, s, c
    cdef double[::1] b
    cdef double[:, :, ::1] p, d, gp, gd, gjfm
    cdef double[:, ::1] ga, gh, gw
    for l in range(n_layers - 1):
        w = ws64[l]
        b = bs64[l]
        dout = w.shape[0]
        a_arr = np.empty((n, dout), dtype=np.float64)
        a = a_arr
        _affine(h, w, b, a, om if l == 0 else 1.0)
        s_arr = np.empty((n, dout), dtype=np.float64)
        c_arr = np.empty((n, dout), dtype=np.float64)
        s = s_arr
        c = c_arr
        _sin_cos(a, s, c)
        hs.append(s_arr)
        cs.append(c_arr)
        if need_jac:
            p_arr = np.empty((dout, n, d_in), dtype=np.float64)
            p = p_arr
            if l == 0:
                for j in range(dout):
                    for i in range(n):
                        for m in range(d_in):
                            p[j, i, m] = om * w[j, m]
            else:
                d = ds[l - 1]
                _mm_nn(&w[0, 0], &d[0, 0, 0], &p[0, 0, 0],
                       <int>dout, <int>w.shape[1], <int>(n * d_in), 0.0)
            d_arr = np.empty((dout, n, d_in), dtype=np.float64)
            d = d_arr
            _scale_tangent(c, p, d)
            ps.append(p_arr)
            ds.append(d_arr)
        h = hs[l + 1]

    grad_ws = [None] * n_layers
    grad_bs = [None] * n_layers

    w = ws64[n_layers - 1]
    dout = w.shape[0]
    dprev = w.shape[1]
    gw_arr = np.empty((dout, dprev), dtype=np.float64)
    gw = gw_arr
    cdef double[:, ::1] gu = grad_u
    cdef double[:, ::1] hlast = hs[n_layers - 1]
    _mm_tn(&gu[0, 0], &hlast[0, 0], &gw[0, 0], <int>dout, <int>n, <int>dprev, 0.0)
    gd_arr = None
    if need_jac:
        # feature-major copy of the upstream Jacobian cotangent
        gj = np.ascontiguousarray(np.asarray(grad_jac, dtype=np.float64).transpose(1, 0, 2))
        gjfm = gj
        if n_layers > 1:
            d = ds[n_layers - 2]
            _mm_nt(&gjfm[0, 0, 0], &d[0, 0, 0], &gw[0, 0],
                   <int>dout, <int>(n * d_in), <int>dprev, 1.0)
            gd_arr = np.empty((dprev, n, d_in), dtype=np.float64)
            gd = gd_arr
            _mm_tn(&w[0, 0], &gjfm[0, 0, 0], &gd[0, 0, 0],
                   <int>dprev, <int>dout, <int>(n * d_in), 0.0)
        else:
            for j in range(dout):
                for m in range(d_in):
                    for i in range(n):
                        gw[j, m] += gjfm[j, i, m]
    grad_ws[n_layers - 1] = gw_arr
    grad_bs[n_layers - 1] = np.asarray(grad_u).sum(axis=0)
    if n_layers == 1:
        return grad_ws, grad_bs

    gh_arr = np.empty((n, dprev), dtype=np.float64)
    gh = gh_arr
    _mm_nn(&gu[0, 0], &w[0, 0], &gh[0, 0], <int>n, <int>dout, <int>dprev, 0.0)

    cdef double[:, ::1] hl, hprev
    cdef double scale
    for l in range(n_layers - 2, -1, -1):
        w = ws64[l]
        dout = w.shape[0]
        dprev = w.shape[1]
        c = cs[l]
        hl = hs[l + 1]
        ga_arr = np.empty((n, dout), dtype=np.float64)
        ga = ga_arr
        if need_jac:
            gd = gd_arr
            p = ps[l]
            _tangent_dot(gd, p, ga)  # ga <- sum_m gd*p
            for i in range(n):
                for j in range(dout):
                    ga[i, j] = c[i, j] * gh[i, j] - hl[i, j] * ga[i, j]
            gp_arr = np.empty((dout, n, d_in), dtype=np.float64)
            gp = gp_arr
            _scale_tangent(c, gd, gp)
        else:
            for i in range(n):
                for j in range(dout):
                    ga[i, j] = c[i, j] * gh[i, j]
        scale = om if l == 0 else 1.0
        gw_arr = np.empty((dout, dprev), dtype=np.float64)
        gw = gw_arr
        hprev = hs[l]
        _mm_tn(&ga[0, 0], &hprev[0, 0], &gw[0, 0], <int>dout, <int>n, <int>dprev, 0.0)
        if need_jac:
            if l == 0:
                for j in range(dout):
                    for m in range(d_in):
                        for i in range(n):
                            gw[j, m] += gp[j, i, m]
            else:
                d = ds[l - 1]
                _mm_nt(&gp[0, 0, 0], &d[0, 0, 0], &gw[0, 0],
                       <int>dout, <int>(n * d_in), <int>dprev, 1.0)
        gb = np.asarray(ga_arr).sum(axis=0)
        if scale != 1.0:
            gw_np = np.asarray(gw_arr)
            gw_np *= scale
            gb *= scale
        grad_ws[l] = gw_arr
        grad_bs[l] = gb
        if l > 0:
            gh_arr = np.empty((n, dprev), dtype=np.float64)
            gh = gh_arr
            _mm_nn(&ga[0, 0], &w[0, 0], &gh[0, 0], <int>n, <int>dout, <int>dprev, 0.0)
            if need_jac:
                gd_arr = np.empty((dprev, n, d_in), dtype=np.float64)
                gd = gd_arr
                _mm_tn(&w[0, 0], &gp[0, 0, 0], &gd[0, 0, 0],
                       <int>dprev, <int>dout, <int>(n * d_in), 0.0)
    return grad_ws, grad_bs


def trilinear(data, idx):
    """Trilinear interpolation with index-space gradient; see numpy backend."""
    flat64 = np.asarray(np.ravel(data, order="F"), dtype=np.float64)
    cdef Py_ssize_t nx = data.shape[0], ny = data.shape[1], nz = data.shape[2]
    idx = _as_f64(idx)
    cdef double[:, ::1] q = idx
    cdef Py_ssize_t n = q.shape[0], i
    vals = np.zeros(n, dtype=np.float64)
    grad = np.zeros((n, 3), dtype=np.float64)
    inside = np.zeros(n, dtype=bool)
    cdef double[::1] vv = vals
    cdef double[:, ::1] gv = grad
    cdef cnp.uint8_t[::1] iv = inside.view(np.uint8)
    cdef double[::1] fv = flat64
    cdef double x, y, z, fx, fy, fz, gx, gy, gz
    cdef double v000, v100, v010, v110, v001, v101, v011, v111
    cdef double c00, c10, c01, c11, c0, c1
    cdef Py_ssize_t x0, y0, z0, x1, y1, z1
    with nogil:
        for i in range(n):
            x = q[i, 0]
            y = q[i, 1]
            z = q[i, 2]
            if x < 0 or y < 0 or z < 0 or x > nx - 1 or y > ny - 1 or z > nz - 1:
                continue
            iv[i] = 1
            x0 = <Py_ssize_t>floor(x)
            y0 = <Py_ssize_t>floor(y)
            z0 = <Py_ssize_t>floor(z)
            if x0 > nx - 2:
                x0 = nx - 2 if nx > 1 else 0
            if y0 > ny - 2:
                y0 = ny - 2 if ny > 1 else 0
            if z0 > nz - 2:
                z0 = nz - 2 if nz > 1 else 0
            if x0 < 0:
                x0 = 0
            if y0 < 0:
                y0 = 0
            if z0 < 0:
                z0 = 0
            x1 = x0 + 1 if x0 + 1 <= nx - 1 else nx - 1
            y1 = y0 + 1 if y0 + 1 <= ny - 1 else ny - 1
            z1 = z0 + 1 if z0 + 1 <= nz - 1 else nz - 1
            fx = x - x0
            fy = y - y0
            fz = z - z0
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            v000 = fv[x0 + nx * (y0 + ny * z0)]
            v100 = fv[x1 + nx * (y0 + ny * z0)]
            v010 = fv[x0 + nx * (y1 + ny * z0)]
            v110 = fv[x1 + nx * (y1 + ny * z0)]
            v001 = fv[x0 + nx * (y0 + ny * z1)]
            v101 = fv[x1 + nx * (y0 + ny * z1)]
            v011 = fv[x0 + nx * (y1 + ny * z1)]
            v111 = fv[x1 + nx * (y1 + ny * z1)]
            c00 = v000 * gx + v100 * fx
            c10 = v010 * gx + v110 * fx
            c01 = v001 * gx + v101 * fx
            c11 = v011 * gx + v111 * fx
            c0 = c00 * gy + c10 * fy
            c1 = c01 * gy + c11 * fy
            vv[i] = c0 * gz + c1 * fz
            gv[i, 0] = ((v100 - v000) * gy + (v110 - v010) * fy) * gz + \
                       ((v101 - v001) * gy + (v111 - v011) * fy) * fz
            gv[i, 1] = (c10 - c00) * gz + (c11 - c01) * fz
            gv[i, 2] = c1 - c0
    return vals, grad, inside
