"""Analytic strain from trained transformations.

The deformation gradient comes straight from the network's spatial Jacobian
through the canonical-frame chain rule (no finite differencing); strain is
Green-Lagrange by default with an engineering (small-strain) toggle, projected
onto anatomical radial/circumferential directions and averaged per segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .geometry import LabelMask, NormalizedFrame, normalize_world, voxel_to_world
from .siren import forward_with_jacobian

RADIAL = "radial"
CIRCUMFERENTIAL = "circumferential"


def det3(F):
    """Determinants of a (n, 3, 3) stack."""
    return np.einsum("ni,ni->n", F[:, 0], np.cross(F[:, 1], F[:, 2]))


def cof3(F):
    """Cofactor matrices: d det(F) / dF, row i = cross of the other two rows."""
    return np.stack(
        [
            np.cross(F[:, 1], F[:, 2]),
            np.cross(F[:, 2], F[:, 0]),
            np.cross(F[:, 0], F[:, 1]),
        ],
        axis=1,
    )


def deformation_gradient(params, frame: NormalizedFrame, pts_mm):
    """F = I + d u_mm / d x_mm at world points, (n, 3, 3)."""
    pts_mm = np.atleast_2d(np.asarray(pts_mm, dtype=np.float64))
    _, jac = forward_with_jacobian(params, normalize_world(frame, pts_mm))
    he = frame.half_extent
    F = jac * (he[:, None] / he[None, :])
    F[:, 0, 0] += 1.0
    F[:, 1, 1] += 1.0
    F[:, 2, 2] += 1.0
    return F


def green_lagrange(F):
    """E = (F^T F - I) / 2, symmetric by construction."""
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 2
    Fb = F[None] if single else F
    E = 0.5 * (np.einsum("nki,nkj->nij", Fb, Fb) - np.eye(3))
    return E[0] if single else E


def engineering_strain(F):
    """Small-strain tensor (F + F^T)/2 - I, for comparison runs."""
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 2
    Fb = F[None] if single else F
    E = 0.5 * (Fb + np.swapaxes(Fb, -1, -2)) - np.eye(3)
    return E[0] if single else E


def strain_tensor(F, kind="green"):
    if kind == "green":
        return green_lagrange(F)
    if kind == "engineering":
        return engineering_strain(F)
    raise ConfigError(f"unknown strain tensor kind {kind!r}")


def project_strain(E, e):
    """e^T E e for unit direction(s) e; broadcasts over leading axes."""
    return np.einsum("...ij,...i,...j->...", E, e, e)


@dataclass(frozen=True)
class DirectionField:
    """Per-voxel radial/circumferential unit vectors on evaluation voxels."""

    structure: str
    voxels: np.ndarray  # (n, 3) integer grid indices
    points: np.ndarray  # (n, 3) world mm
    e_r: np.ndarray
    e_c: np.ndarray
    skipped_slices: int = 0

    def __post_init__(self):
        for name in ("e_r", "e_c"):
            v = getattr(self, name)
            if v.size and np.max(np.abs(np.linalg.norm(v, axis=1) - 1.0)) > 1e-6:
                raise ConfigError(f"{name} is not unit length")
        if self.e_r.size and np.max(np.abs(np.einsum("ni,ni->n", self.e_r, self.e_c))) > 1e-6:
            raise ConfigError("radial and circumferential directions not orthogonal")


def lv_polar_dirs(mask: LabelMask) -> DirectionField:
    """Radial = away from the per-slice LV blood-pool centroid, in-plane."""
    labels = mask.labels
    normal = mask.direction[:, 2]
    vox, er = [], []
    skipped = 0
    for k in range(mask.dims[2]):
        myo = np.argwhere(labels[:, :, k] == LabelMask.LV_MYO)
        if myo.size == 0:
            continue
        pool = np.argwhere(labels[:, :, k] == LabelMask.LV_POOL)
        if pool.size == 0:
            skipped += 1
            continue
        c_idx = np.array([pool[:, 0].mean(), pool[:, 1].mean(), k])
        c_world = voxel_to_world(mask, c_idx)
        idx3 = np.column_stack([myo, np.full(len(myo), k)])
        p_world = voxel_to_world(mask, idx3.astype(np.float64))
        d = p_world - c_world
        norm = np.linalg.norm(d, axis=1)
        keep = norm > 1e-9
        vox.append(idx3[keep])
        er.append(d[keep] / norm[keep, None])
    if not vox:
        raise ConfigError("no LV myocardium voxels with a blood pool on their slice")
    voxels = np.concatenate(vox)
    e_r = np.concatenate(er)
    e_c = np.cross(normal, e_r)
    points = voxel_to_world(mask, voxels.astype(np.float64))
    return DirectionField("LV", voxels, points, e_r, e_c, skipped_slices=skipped)


def _contour_band(region2d):
    return region2d & ~ndimage.binary_erosion(
        region2d, structure=ndimage.generate_binary_structure(2, 1)
    )


def rv_dirs(mask: LabelMask) -> DirectionField:
    """Outward normals of the RV blood-pool contour, from the in-plane signed
    distance map, evaluated on the 1-voxel contour band."""
    labels = mask.labels
    normal = mask.direction[:, 2]
    sx, sy = mask.spacing[0], mask.spacing[1]
    if not (labels == LabelMask.RV_POOL).any():
        raise ConfigError("RV blood pool is empty")
    vox, er = [], []
    for k in range(mask.dims[2]):
        rv = labels[:, :, k] == LabelMask.RV_POOL
        if not rv.any():
            continue
        signed = ndimage.distance_transform_edt(~rv, sampling=(sx, sy)) - \
            ndimage.distance_transform_edt(rv, sampling=(sx, sy))
        gu, gv = np.gradient(signed, sx, sy)
        band = np.argwhere(_contour_band(rv))
        g = np.column_stack([gu[band[:, 0], band[:, 1]], gv[band[:, 0], band[:, 1]]])
        norm = np.linalg.norm(g, axis=1)
        keep = norm > 1e-6
        band, g, norm = band[keep], g[keep], norm[keep]
        g /= norm[:, None]
        # in-plane world direction from grid-plane components
        e = g[:, 0:1] * mask.direction[:, 0] + g[:, 1:2] * mask.direction[:, 1]
        vox.append(np.column_stack([band, np.full(len(band), k)]))
        er.append(e)
    voxels = np.concatenate(vox)
    e_r = np.concatenate(er)
    e_c = np.cross(normal, e_r)
    points = voxel_to_world(mask, voxels.astype(np.float64))
    return DirectionField("RV", voxels, points, e_r, e_c)


def segment_slices(mask: LabelMask) -> dict:
    """Contiguous thirds of the myocardium-bearing slices; remainder to mid;
    basal = the end with the larger LV blood-pool area."""
    labels = mask.labels
    has_myo = [k for k in range(mask.dims[2]) if (labels[:, :, k] == LabelMask.LV_MYO).any()]
    if len(has_myo) < 3:
        raise ConfigError(f"myocardium present on only {len(has_myo)} slices; need >= 3")
    pool_area_first = int((labels[:, :, has_myo[0]] == LabelMask.LV_POOL).sum())
    pool_area_last = int((labels[:, :, has_myo[-1]] == LabelMask.LV_POOL).sum())
    n = len(has_myo)
    q = n // 3
    names = ["basal"] * q + ["mid"] * (n - 2 * q) + ["apical"] * q
    if pool_area_last > pool_area_first:
        names = names[::-1]
    return dict(zip(has_myo, names))


@dataclass(frozen=True)
class StrainCurve:
    structure: str
    component: str
    segment: str
    times: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class PeakStrain:
    structure: str
    component: str
    segment: str
    value: float
    time_index: int


def identity_f_provider(pts):
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    return np.broadcast_to(np.eye(3), (pts.shape[0], 3, 3)).copy()


def strain_curves(ed_mask: LabelMask, f_providers, kind="green") -> list:
    """Segment-mean radial/circumferential strain over the cycle.

    ``f_providers[t]`` maps material (ED) world points to deformation
    gradients for phase t.  Evaluation voxels are fixed at ED (Lagrangian):
    LV myocardium for LV, the RV contour band for RV.
    """
    fields = [lv_polar_dirs(ed_mask)]
    if (ed_mask.labels == LabelMask.RV_POOL).any():
        fields.append(rv_dirs(ed_mask))
    segs = segment_slices(ed_mask)
    times = np.arange(len(f_providers))
    curves = []
    for dirs in fields:
        seg_names = np.array([segs.get(int(k), "") for k in dirs.voxels[:, 2]])
        in_seg = seg_names != ""
        groups = {
            name: np.flatnonzero(seg_names == name)
            for name in ("basal", "mid", "apical")
        }
        groups["global"] = np.flatnonzero(in_seg)
        rad = np.zeros((len(f_providers), dirs.points.shape[0]))
        cir = np.zeros_like(rad)
        for t, provider in enumerate(f_providers):
            E = strain_tensor(provider(dirs.points), kind)
            rad[t] = project_strain(E, dirs.e_r)
            cir[t] = project_strain(E, dirs.e_c)
        for comp, table in ((RADIAL, rad), (CIRCUMFERENTIAL, cir)):
            for seg, sel in groups.items():
                if sel.size == 0:
                    continue
                curves.append(
                    StrainCurve(dirs.structure, comp, seg, times,
                                table[:, sel].mean(axis=1))
                )
    return curves


def curves_from_results(results, ed_mask: LabelMask, ed_index: int, n_times: int,
                        kind="green") -> list:
    """Strain curves from one RegResult per non-ED phase (Lagrangian, ED ref)."""
    by_moving = {res.moving_index: res for res in results}
    providers = []
    for t in range(n_times):
        if t == ed_index:
            providers.append(identity_f_provider)
        else:
            res = by_moving[t]
            providers.append(
                lambda pts, p=res.params, fr=res.frame: deformation_gradient(p, fr, pts)
            )
    return strain_curves(ed_mask, providers, kind=kind)


def peak_strain(curve: StrainCurve) -> PeakStrain:
    """Signed extremum: maximum for radial, minimum for circumferential;
    earliest time on ties."""
    idx = int(np.argmin(curve.values)) if curve.component == CIRCUMFERENTIAL \
        else int(np.argmax(curve.values))
    return PeakStrain(curve.structure, curve.component, curve.segment,
                      float(curve.values[idx]), int(curve.times[idx]))


def write_strain_csv(curves, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write("time_index,structure,component,segment,value\n")
        for c in curves:
            for t, v in zip(c.times, c.values):
                f.write(f"{int(t)},{c.structure},{c.component},{c.segment},{v:.9g}\n")


def write_peaks_csv(peaks, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write("structure,component,segment,peak,time_index\n")
        for p in peaks:
            f.write(f"{p.structure},{p.component},{p.segment},{p.value:.9g},{p.time_index}\n")
