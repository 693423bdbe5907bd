"""Per-slice in-plane translation of the SAX stack, fitted against the
long-axis views.

Each SAX slice gets a 2-DOF (tx, ty) mm shift; the aligned stack reads
aligned(u, v, k) = original(u - tx_k/sx, v - ty_k/sy, k).  The optimization
warps the shifted stack into the 2CH/4CH planes and scores masked NCC +
scaled NMI on intensities plus soft Dice on the LV blood pool.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, OptimizerError
from .geometry import LabelMask, Volume3D, plane_grid_world, world_to_voxel
from .kernels import trilinear
from .losses import ncc, nmi_parzen, soft_dice


@dataclass(frozen=True)
class SliceTranslations:
    """(tx, ty) mm per SAX slice, in the slice plane."""

    shifts: np.ndarray  # (nz, 2)

    def __post_init__(self):
        shifts = np.asarray(self.shifts, dtype=np.float64).copy()
        if shifts.ndim != 2 or shifts.shape[1] != 2:
            raise ConfigError("shifts must be (n_slices, 2)")
        if not np.all(np.isfinite(shifts)):
            raise ConfigError("shifts must be finite")
        shifts.flags.writeable = False
        object.__setattr__(self, "shifts", shifts)

    @classmethod
    def zeros(cls, n_slices: int) -> "SliceTranslations":
        return cls(np.zeros((n_slices, 2)))


@dataclass(frozen=True)
class AlignConfig:
    iterations: int = 2000
    lr: float = 0.01
    nmi_scale_mode: str = "balance"  # "balance" freezes s = |NCC0|/|NMI0|; "off" drops NMI
    max_shift: float = 20.0
    seed: int = 0
    nmi_bins: int = 32

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.nmi_scale_mode not in ("balance", "off"):
            raise ConfigError(f"unknown nmi_scale_mode {self.nmi_scale_mode!r}")


@dataclass
class AlignResult:
    translations: SliceTranslations
    loss_trace: np.ndarray
    nmi_scales: dict
    wall_time: float


def _warp_points(data, vol: Volume3D, shifts: np.ndarray, pts_world: np.ndarray):
    """Sample the shifted stack at world points, differentiably in the shifts.

    The per-slice shift is interpolated at the continuous slice coordinate k,
    subtracted in-plane, and the stack sampled trilinearly.  Returns
    (values, inside, d_value/d_shifts as a scatter spec).
    """
    nz = vol.dims[2]
    idx = world_to_voxel(vol, pts_world)
    k = idx[:, 2]
    k0 = np.clip(np.floor(k).astype(np.intp), 0, max(nz - 2, 0))
    k1 = np.minimum(k0 + 1, nz - 1)
    w = k - k0
    tx = (1.0 - w) * shifts[k0, 0] + w * shifts[k1, 0]
    ty = (1.0 - w) * shifts[k0, 1] + w * shifts[k1, 1]
    q = idx.copy()
    q[:, 0] -= tx / vol.spacing[0]
    q[:, 1] -= ty / vol.spacing[1]
    vals, grad_idx, inside = trilinear(data, q)
    # d value / d tx = -g_u / sx, split between the two bracketing slices
    return vals, inside, (k0, k1, w, grad_idx)


def _scatter_shift_grad(dvals, vol, scatter, nz):
    k0, k1, w, grad_idx = scatter
    gx = -dvals * grad_idx[:, 0] / vol.spacing[0]
    gy = -dvals * grad_idx[:, 1] / vol.spacing[1]
    g = np.zeros((nz, 2))
    np.add.at(g[:, 0], k0, (1.0 - w) * gx)
    np.add.at(g[:, 0], k1, w * gx)
    np.add.at(g[:, 1], k0, (1.0 - w) * gy)
    np.add.at(g[:, 1], k1, w * gy)
    return g


def warp_stack_to_lax(sax: Volume3D, trans: SliceTranslations, lax_plane: Volume3D):
    """Resample the shifted SAX stack on a long-axis plane; returns (image, inside)."""
    pts = plane_grid_world(lax_plane)
    vals, inside, _ = _warp_points(sax.data, sax, trans.shifts, pts)
    nx, ny = lax_plane.dims[0], lax_plane.dims[1]
    return (vals.reshape((nx, ny), order="F"),
            inside.reshape((nx, ny), order="F"))


class _ViewTerm:
    """Pre-extracted per-view quantities for the alignment loss."""

    def __init__(self, name, sax_vol, sax_pool, lax_vol, lax_mask, nmi_bins):
        self.name = name
        self.sax_vol = sax_vol
        self.sax_pool = sax_pool  # float32 LV-pool indicator volume
        self.nmi_bins = nmi_bins
        myo = lax_mask.labels[:, :, 0] == LabelMask.LV_MYO
        if not myo.any():
            raise ConfigError(f"{name}: long-axis myocardium mask is empty")
        pts = plane_grid_world(lax_vol)
        flat_myo = myo.ravel(order="F")
        self.myo_pts = pts[flat_myo]
        self.fixed_myo = (
            lax_vol.data[:, :, 0].ravel(order="F")[flat_myo].astype(np.float64)
        )
        self.all_pts = pts
        self.lax_pool = (lax_mask.labels[:, :, 0] == LabelMask.LV_POOL).ravel(
            order="F"
        ).astype(np.float64)

    def evaluate(self, shifts, nmi_scale):
        """(loss, d loss/d shifts, |ncc|, |nmi|) for this view."""
        nz = self.sax_vol.dims[2]
        grad = np.zeros((nz, 2))

        vals, inside, scatter = _warp_points(
            self.sax_vol.data, self.sax_vol, shifts, self.myo_pts
        )
        a = self.fixed_myo[inside]
        b = vals[inside]
        dvals = np.zeros_like(vals)
        r = ncc(a, b)
        loss = -r.value
        dvals[inside] = -r.grad_b
        kept_nmi = 0.0
        if nmi_scale != 0.0:
            mi = nmi_parzen(a, b, bins=self.nmi_bins)
            loss += nmi_scale * (-mi.value)
            dvals[inside] += nmi_scale * (-mi.grad_b)
            kept_nmi = mi.value
        grad += _scatter_shift_grad(dvals, self.sax_vol, scatter, nz)

        pool, _, pool_scatter = _warp_points(
            self.sax_pool, self.sax_vol, shifts, self.all_pts
        )
        d = soft_dice(pool, self.lax_pool)
        loss += 1.0 - d.value
        grad += _scatter_shift_grad(-d.grad_a, self.sax_vol, pool_scatter, nz)
        return loss, grad, abs(r.value), abs(kept_nmi)


def _view_terms(sax_vol, sax_mask, views_ed, nmi_bins):
    pool = np.asfortranarray(
        (sax_mask.labels == LabelMask.LV_POOL).astype(np.float32)
    )
    return [
        _ViewTerm(name, sax_vol, pool, lax_vol, lax_mask, nmi_bins)
        for name, (lax_vol, lax_mask) in views_ed.items()
    ]


def alignment_loss(trans: SliceTranslations, sax_vol, sax_mask, views_ed,
                   nmi_scales=None, nmi_bins=32):
    """Total alignment loss and its gradient w.r.t. the shifts.

    ``views_ed`` maps view name -> (lax Volume3D, lax LabelMask) at the
    alignment time point; ``nmi_scales`` maps view name -> frozen scale s.
    """
    terms = _view_terms(sax_vol, sax_mask, views_ed, nmi_bins)
    total, grad = 0.0, np.zeros_like(trans.shifts)
    for term in terms:
        s = 1.0 if nmi_scales is None else nmi_scales[term.name]
        loss, g, _, _ = term.evaluate(trans.shifts, s)
        total += loss
        grad = grad + g
    return total, grad


def align_stack(views, cfg: AlignConfig | None = None) -> AlignResult:
    """Optimize per-slice shifts of the SAX stack at the ED time point."""
    cfg = cfg or AlignConfig()
    t0 = time.perf_counter()
    ed = views.ed_index
    sax_vol, sax_mask = views.sax.frames[ed]
    views_ed = {"ch4": views.ch4.frames[ed]}
    if views.ch2 is not None:
        views_ed["ch2"] = views.ch2.frames[ed]
    terms = _view_terms(sax_vol, sax_mask, views_ed, cfg.nmi_bins)

    nz = sax_vol.dims[2]
    shifts = np.zeros((nz, 2))

    # freeze the NMI scale from iteration-0 magnitudes
    scales = {}
    for term in terms:
        if cfg.nmi_scale_mode == "off":
            scales[term.name] = 0.0
        else:
            _, _, ncc0, nmi0 = term.evaluate(shifts, 1.0)
            scales[term.name] = ncc0 / (nmi0 + 1e-12)

    m = np.zeros_like(shifts)
    v = np.zeros_like(shifts)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    trace = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        total, grad = 0.0, np.zeros_like(shifts)
        for term in terms:
            loss, g, _, _ = term.evaluate(shifts, scales[term.name])
            total += loss
            grad += g
        if not np.isfinite(total):
            raise OptimizerError(f"non-finite alignment loss at iteration {it}")
        trace[it] = total
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        mh = m / (1.0 - beta1 ** (it + 1))
        vh = v / (1.0 - beta2 ** (it + 1))
        shifts = shifts - cfg.lr * mh / (np.sqrt(vh) + eps)
        np.clip(shifts, -cfg.max_shift, cfg.max_shift, out=shifts)

    return AlignResult(
        translations=SliceTranslations(shifts),
        loss_trace=trace,
        nmi_scales=scales,
        wall_time=time.perf_counter() - t0,
    )


def apply_translations(obj, trans: SliceTranslations):
    """Resample each slice in-plane by its shift (bilinear data, nearest labels)."""
    nz = obj.dims[2]
    if trans.shifts.shape[0] != nz:
        raise ConfigError("one translation per slice required")
    if not trans.shifts.any():
        return obj
    nx, ny = obj.dims[0], obj.dims[1]
    ii, jj = np.meshgrid(np.arange(nx, dtype=np.float64),
                         np.arange(ny, dtype=np.float64), indexing="ij")
    is_mask = isinstance(obj, LabelMask)
    src = obj.labels if is_mask else obj.data
    out = np.zeros_like(src)
    for s in range(nz):
        u = ii - trans.shifts[s, 0] / obj.spacing[0]
        v = jj - trans.shifts[s, 1] / obj.spacing[1]
        if is_mask:
            ui = np.rint(u).astype(np.intp)
            vi = np.rint(v).astype(np.intp)
            ok = (ui >= 0) & (ui < nx) & (vi >= 0) & (vi < ny)
            plane = np.zeros((nx, ny), dtype=src.dtype)
            plane[ok] = src[ui[ok], vi[ok], s]
            out[:, :, s] = plane
        else:
            q = np.stack([u.ravel(), v.ravel(), np.zeros(nx * ny)], axis=1)
            vals, _, _ = trilinear(src[:, :, s : s + 1], q)
            out[:, :, s] = vals.reshape(nx, ny)
    if is_mask:
        return obj.with_labels(out)
    return obj.with_data(out)


def write_shifts_csv(trans: SliceTranslations, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write("slice_index,tx_mm,ty_mm\n")
        for i, (tx, ty) in enumerate(trans.shifts):
            f.write(f"{i},{tx:.9g},{ty:.9g}\n")


def read_shifts_csv(path) -> SliceTranslations:
    rows = []
    with open(path, encoding="ascii") as f:
        header = f.readline()
        if header.strip() != "slice_index,tx_mm,ty_mm":
            raise ConfigError(f"unexpected shifts CSV header: {header.strip()!r}")
        for line in f:
            if line.strip():
                _, tx, ty = line.split(",")
                rows.append((float(tx), float(ty)))
    return SliceTranslations(np.array(rows))
