"""Sine-activated coordinate network: init, forward/backward, Jacobian, Adam, I/O.

Parameters are stored float32 (bit-exact serialization); all arithmetic runs
in float64 so analytic gradients can be checked against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import OptimizerError, ParamsIOError

_MAGIC = "cinestrain-mlp"
_VERSION = 1


def _frozen32(a):
    out = np.asarray(a, dtype=np.float32)
    out = np.ascontiguousarray(out)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class MlpParams:
    """Weights/biases of the displacement network; layer l maps (d_l -> d_{l+1})."""

    weights: tuple
    biases: tuple
    omega0: float = 30.0

    def __post_init__(self):
        ws = tuple(_frozen32(w) for w in self.weights)
        bs = tuple(_frozen32(b) for b in self.biases)
        if len(ws) != len(bs) or not ws:
            raise ValueError("need one bias vector per weight matrix")
        for l, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: weight {w.shape} / bias {b.shape} mismatch")
            if l and w.shape[1] != ws[l - 1].shape[0]:
                raise ValueError(f"layer {l}: fan-in {w.shape[1]} != previous width")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {l}: non-finite parameters")
        if not self.omega0 > 0:
            raise ValueError("omega0 must be positive")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "omega0", float(self.omega0))

    @property
    def layer_sizes(self):
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def weights64(self):
        return [np.asarray(w, dtype=np.float64) for w in self.weights]

    def biases64(self):
        return [np.asarray(b, dtype=np.float64) for b in self.biases]


def init_siren(seed, omega0=30.0, hidden=(256, 256, 256), d_in=3, d_out=3):
    """Frequency-scaled uniform init; output layer damped 1e-2 for a near-identity start."""
    rng = np.random.default_rng(seed)
    sizes = (d_in,) + tuple(hidden) + (d_out,)
    ws, bs = [], []
    for l in range(len(sizes) - 1):
        fan_in = sizes[l]
        if l == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / omega0
        w = rng.uniform(-bound, bound, size=(sizes[l + 1], fan_in))
        if l == len(sizes) - 2:
            w = w * 1e-2
        ws.append(w.astype(np.float32))
        bs.append(np.zeros(sizes[l + 1], dtype=np.float32))
    return MlpParams(tuple(ws), tuple(bs), omega0=float(omega0))


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    return (x[None, :] if single else x), single


def forward(params: MlpParams, x):
    """Displacement u(x); x is (3,) or (n, 3) in canonical coordinates."""
    xb, single = _batched(x)
    u = kernels.mlp_forward(params.weights64(), params.biases64(), params.omega0, xb)
    return u[0] if single else u


def forward_with_jacobian(params: MlpParams, x):
    """(u, J) with J[n] = du/dx, exact via the cosine chain; no finite differencing."""
    xb, single = _batched(x)
    u, jac = kernels.mlp_forward_jacobian(
        params.weights64(), params.biases64(), params.omega0, xb
    )
    return (u[0], jac[0]) if single else (u, jac)


def spatial_jacobian(params: MlpParams, x):
    return forward_with_jacobian(params, x)[1]


def backward_params(params: MlpParams, x, upstream, upstream_jac=None):
    """Gradients of sum_n <upstream_n, u_n> (+ <upstream_jac_n, J_n>) w.r.t. all layers."""
    xb, _ = _batched(x)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(xb.shape[0], -1)
    if upstream_jac is not None:
        upstream_jac = np.asarray(upstream_jac, dtype=np.float64).reshape(
            xb.shape[0], upstream.shape[1], xb.shape[1]
        )
    return kernels.mlp_backward(
        params.weights64(), params.biases64(), params.omega0, xb, upstream, upstream_jac
    )


@dataclass
class AdamState:
    """Adam moment accumulators, kept float64 in memory."""

    m_w: list
    v_w: list
    m_b: list
    v_b: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: MlpParams) -> AdamState:
    return AdamState(
        m_w=[np.zeros(w.shape, dtype=np.float64) for w in params.weights],
        v_w=[np.zeros(w.shape, dtype=np.float64) for w in params.weights],
        m_b=[np.zeros(b.shape, dtype=np.float64) for b in params.biases],
        v_b=[np.zeros(b.shape, dtype=np.float64) for b in params.biases],
    )


def adam_step(params: MlpParams, grad_ws, grad_bs, state: AdamState, lr):
    """One Adam update; returns new MlpParams (float32 masters), mutates state."""
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_ws, new_bs = [], []
    for l in range(len(params.weights)):
        for tag, g in (("weights", grad_ws[l]), ("biases", grad_bs[l])):
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient in layer {l} {tag}")
        for theta, g, m, v, out in (
            (params.weights[l], grad_ws[l], state.m_w[l], state.v_w[l], new_ws),
            (params.biases[l], grad_bs[l], state.m_b[l], state.v_b[l], new_bs),
        ):
            g = np.asarray(g, dtype=np.float64)
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            out.append((theta.astype(np.float64) - step).astype(np.float32))
    return replace(params, weights=tuple(new_ws), biases=tuple(new_bs))


def save_params(params: MlpParams, path):
    """JSON header line + little-endian float32 payload (weights then biases, in order)."""
    header = {
        "format": _MAGIC,
        "version": _VERSION,
        "layer_sizes": list(params.layer_sizes),
        "omega0": params.omega0,
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode("ascii"))
        for w in params.weights:
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        for b in params.biases:
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_params(path) -> MlpParams:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ParamsIOError(f"unreadable parameter header: {e}") from e
        payload = f.read()
    if header.get("format") != _MAGIC:
        raise ParamsIOError(f"not a {_MAGIC} file")
    if header.get("version") != _VERSION:
        raise ParamsIOError(f"unsupported parameter file version {header.get('version')!r}")
    sizes = header.get("layer_sizes")
    if not isinstance(sizes, list) or len(sizes) < 2:
        raise ParamsIOError("invalid layer_sizes in parameter header")
    n_w = sum(sizes[l + 1] * sizes[l] for l in range(len(sizes) - 1))
    n_b = sum(sizes[1:])
    expected = 4 * (n_w + n_b)
    if len(payload) != expected:
        raise ParamsIOError(
            f"parameter payload is {len(payload)} bytes, expected {expected}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    ws, bs, off = [], [], 0
    for l in range(len(sizes) - 1):
        n = sizes[l + 1] * sizes[l]
        ws.append(flat[off : off + n].reshape(sizes[l + 1], sizes[l]).copy())
        off += n
    for l in range(len(sizes) - 1):
        n = sizes[l + 1]
        bs.append(flat[off : off + n].copy())
        off += n
    return MlpParams(tuple(ws), tuple(bs), omega0=float(header["omega0"]))
