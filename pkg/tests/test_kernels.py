"""Backend-agnostic contract tests for the hot kernels.

The numpy backend is the readable reference; the Cython extension must agree
with it to float64 round-off.  Gradient claims are checked against central
differences, never against the sibling backend alone.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cinestrain.kernels import BACKEND, numpy_backend

try:
    from cinestrain.kernels import _cykernels

    HAVE_CYTHON = True
except ImportError:
    HAVE_CYTHON = False

BACKENDS = [numpy_backend] + ([_cykernels] if HAVE_CYTHON else [])
IDS = ["numpy"] + (["cython"] if HAVE_CYTHON else [])


def make_net(rng, sizes=(3, 8, 6, 3)):
    ws = [rng.standard_normal((sizes[l + 1], sizes[l])) * 0.4 for l in range(len(sizes) - 1)]
    bs = [rng.standard_normal(sizes[l + 1]) * 0.1 for l in range(len(sizes) - 1)]
    return ws, bs


def manual_forward(ws, bs, omega0, x):
    h = x
    for l in range(len(ws) - 1):
        a = h @ ws[l].T + bs[l]
        if l == 0:
            a = a * omega0
        h = np.sin(a)
    return h @ ws[-1].T + bs[-1]


def test_compiled_extension_present():
    # the build ships a compiled core; the numpy path remains selectable
    assert BACKEND in ("cython", "numpy")
    if BACKEND == "numpy" and HAVE_CYTHON:
        pytest.fail("extension importable but auto-selection picked numpy")


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
class TestForward:
    def test_matches_manual_composition(self, impl):
        rng = np.random.default_rng(0)
        for trial in range(10):
            ws, bs = make_net(rng)
            x = rng.standard_normal((17, 3))
            got = impl.mlp_forward(ws, bs, 30.0, x)
            assert_allclose(got, manual_forward(ws, bs, 30.0, x), rtol=1e-12, atol=1e-12)

    def test_single_affine_layer(self, impl):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((2, 3))
        b = rng.standard_normal(2)
        x = rng.standard_normal((5, 3))
        got = impl.mlp_forward([w], [b], 30.0, x)
        assert_allclose(got, x @ w.T + b, rtol=1e-13)

    def test_omega0_only_scales_first_layer(self, impl):
        rng = np.random.default_rng(2)
        ws, bs = make_net(rng)
        x = rng.standard_normal((9, 3))
        half = impl.mlp_forward(ws, bs, 15.0, x)
        same = impl.mlp_forward([ws[0] * 0.5] + ws[1:], [bs[0] * 0.5] + bs[1:], 30.0, x)
        assert_allclose(half, same, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
class TestJacobian:
    def test_value_agrees_with_forward(self, impl):
        rng = np.random.default_rng(3)
        ws, bs = make_net(rng)
        x = rng.standard_normal((11, 3))
        u, _ = impl.mlp_forward_jacobian(ws, bs, 30.0, x)
        assert_allclose(u, impl.mlp_forward(ws, bs, 30.0, x), rtol=1e-12, atol=1e-12)

    def test_jacobian_vs_central_differences(self, impl):
        rng = np.random.default_rng(4)
        h = 1e-6
        for trial in range(5):
            ws, bs = make_net(rng)
            x = rng.standard_normal((7, 3))
            _, jac = impl.mlp_forward_jacobian(ws, bs, 30.0, x)
            for ax in range(3):
                dp = np.zeros(3)
                dp[ax] = h
                fp = impl.mlp_forward(ws, bs, 30.0, x + dp)
                fm = impl.mlp_forward(ws, bs, 30.0, x - dp)
                assert_allclose(jac[:, :, ax], (fp - fm) / (2 * h), atol=1e-7)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
class TestBackward:
    def scalar_loss(self, impl, ws, bs, x, cu, cj):
        u, jac = impl.mlp_forward_jacobian(ws, bs, 30.0, x)
        return float((cu * u).sum() + (cj * jac).sum())

    def test_parameter_gradients_vs_central_differences(self, impl):
        rng = np.random.default_rng(5)
        for trial in range(4):
            ws, bs = make_net(rng)
            x = rng.standard_normal((6, 3))
            cu = rng.standard_normal((6, 3))
            cj = rng.standard_normal((6, 3, 3))
            gw, gb = impl.mlp_backward(ws, bs, 30.0, x, cu, cj)
            h = 1e-6
            for l in range(len(ws)):
                for arr, g in ((ws[l], gw[l]), (bs[l], gb[l])):
                    for probe in range(3):
                        flat = int(rng.integers(arr.size))
                        old = arr.flat[flat]
                        arr.flat[flat] = old + h
                        lp = self.scalar_loss(impl, ws, bs, x, cu, cj)
                        arr.flat[flat] = old - h
                        lm = self.scalar_loss(impl, ws, bs, x, cu, cj)
                        arr.flat[flat] = old
                        assert abs((lp - lm) / (2 * h) - g.flat[flat]) < 2e-5

    def test_no_jacobian_term_path(self, impl):
        rng = np.random.default_rng(6)
        ws, bs = make_net(rng)
        x = rng.standard_normal((6, 3))
        cu = rng.standard_normal((6, 3))
        gw, gb = impl.mlp_backward(ws, bs, 30.0, x, cu, None)
        h = 1e-6
        for l in range(len(ws)):
            flat = int(rng.integers(ws[l].size))
            old = ws[l].flat[flat]
            ws[l].flat[flat] = old + h
            lp = float((cu * impl.mlp_forward(ws, bs, 30.0, x)).sum())
            ws[l].flat[flat] = old - h
            lm = float((cu * impl.mlp_forward(ws, bs, 30.0, x)).sum())
            ws[l].flat[flat] = old
            assert abs((lp - lm) / (2 * h) - gw[l].flat[flat]) < 2e-5


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
class TestTrilinear:
    def test_against_scipy(self, impl):
        scipy_nd = pytest.importorskip("scipy.ndimage")
        rng = np.random.default_rng(7)
        data = rng.standard_normal((9, 6, 5)).astype(np.float32)
        data = np.asfortranarray(data)
        idx = rng.uniform(0, [8, 5, 4], size=(300, 3))
        vals, grad, inside = impl.trilinear(data, idx)
        ref = scipy_nd.map_coordinates(data.astype(np.float64), idx.T, order=1)
        assert inside.all()
        assert_allclose(vals, ref, atol=1e-6)

    def test_gradient_vs_differences(self, impl):
        rng = np.random.default_rng(8)
        data = np.asfortranarray(rng.standard_normal((8, 7, 6)).astype(np.float32))
        idx = rng.uniform(0.2, 0.8, size=(60, 3)) + rng.integers(0, 4, size=(60, 3))
        vals, grad, inside = impl.trilinear(data, idx)
        h = 1e-6
        for ax in range(3):
            dp = np.zeros(3)
            dp[ax] = h
            vp = impl.trilinear(data, idx + dp)[0]
            vm = impl.trilinear(data, idx - dp)[0]
            assert_allclose(grad[:, ax], (vp - vm) / (2 * h), atol=1e-4)

    def test_outside_zeroed(self, impl):
        data = np.asfortranarray(np.ones((4, 4, 4), dtype=np.float32))
        idx = np.array([[-0.01, 1.0, 1.0], [3.01, 1.0, 1.0], [1.0, 1.0, 7.0]])
        vals, grad, inside = impl.trilinear(data, idx)
        assert not inside.any()
        assert (vals == 0).all() and (grad == 0).all()

    def test_corners_exact(self, impl):
        rng = np.random.default_rng(9)
        data = np.asfortranarray(rng.standard_normal((5, 4, 3)).astype(np.float32))
        ii, jj, kk = np.meshgrid(np.arange(5), np.arange(4), np.arange(3), indexing="ij")
        idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], 1).astype(np.float64)
        vals, _, inside = impl.trilinear(data, idx)
        assert inside.all()
        assert_allclose(vals, data.ravel(order="C")[
            (idx[:, 0] * 12 + idx[:, 1] * 3 + idx[:, 2]).astype(int)], atol=1e-7)


@pytest.mark.skipif(not HAVE_CYTHON, reason="compiled extension not built")
class TestBackendEquivalence:
    def test_forward_jacobian_backward_agree(self):
        rng = np.random.default_rng(10)
        for trial in range(6):
            ws, bs = make_net(rng, sizes=(3, 16, 16, 16, 3))
            x = rng.standard_normal((23, 3))
            cu = rng.standard_normal((23, 3))
            cj = rng.standard_normal((23, 3, 3))
            un, jn = numpy_backend.mlp_forward_jacobian(ws, bs, 30.0, x)
            uc, jc = _cykernels.mlp_forward_jacobian(ws, bs, 30.0, x)
            assert_allclose(uc, un, rtol=1e-12, atol=1e-13)
            assert_allclose(jc, jn, rtol=1e-12, atol=1e-11)
            gwn, gbn = numpy_backend.mlp_backward(ws, bs, 30.0, x, cu, cj)
            gwc, gbc = _cykernels.mlp_backward(ws, bs, 30.0, x, cu, cj)
            for a, b in zip(gwn + gbn, gwc + gbc):
                assert_allclose(b, a, rtol=1e-11, atol=1e-10)

    def test_trilinear_agrees(self):
        rng = np.random.default_rng(11)
        data = np.asfortranarray(rng.standard_normal((12, 11, 7)).astype(np.float32))
        idx = rng.uniform(-1, 13, size=(500, 3))
        vn, gn, mn = numpy_backend.trilinear(data, idx)
        vc, gc, mc = _cykernels.trilinear(data, idx)
        assert (mn == mc).all()
        assert_allclose(vc, vn, rtol=1e-12, atol=1e-12)
        assert_allclose(gc, gn, rtol=1e-12, atol=1e-12)
