"""Overlap, boundary-distance, and volume-change metrics plus a rank test.

Dice and Hausdorff operate on label masks with matching geometry; Hausdorff
is the full (100th percentile) symmetric boundary distance in mm.  The
Kruskal-Wallis statistic is computed from ranks with tie correction and a
chi-square upper-tail p-value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import gammaincc
from scipy.stats import rankdata

from .errors import ConfigError, DegenerateInputError, GeometryError
from .geometry import LabelMask

STRUCTURES = {"LV": LabelMask.LV_POOL, "MYO": LabelMask.LV_MYO, "RV": LabelMask.RV_POOL}


def _check_geometry(a: LabelMask, b: LabelMask) -> None:
    if a.dims != b.dims:
        raise GeometryError(f"mask dims differ: {a.dims} vs {b.dims}")
    for name in ("spacing", "origin", "direction"):
        if not np.allclose(getattr(a, name), getattr(b, name), atol=1e-9):
            raise GeometryError(f"mask {name} differs")


def dice(a: LabelMask, b: LabelMask, label: int) -> float:
    """2|A∩B| / (|A|+|B|); two empty sets count as perfect agreement."""
    _check_geometry(a, b)
    am = a.labels == label
    bm = b.labels == label
    denom = int(am.sum()) + int(bm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((am & bm).sum()) / denom


def _boundary(region):
    """Voxels of the region with at least one 6-neighbour outside it."""
    core = ndimage.binary_erosion(
        region, structure=ndimage.generate_binary_structure(3, 1))
    return region & ~core


def hausdorff(a: LabelMask, b: LabelMask, label: int, spacing=None) -> float:
    """Symmetric maximum boundary-to-boundary distance in mm."""
    _check_geometry(a, b)
    am = a.labels == label
    bm = b.labels == label
    if not am.any() or not bm.any():
        raise DegenerateInputError(f"label {label} empty in at least one mask")
    spacing = a.spacing if spacing is None else np.asarray(spacing, dtype=np.float64)
    ba = _boundary(am)
    bb = _boundary(bm)
    # exact Euclidean distance to the nearest boundary voxel center
    d_to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    d_to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    return float(max(d_to_b[ba].max(), d_to_a[bb].max()))


def jacobian_stats(dets, mask: LabelMask, label: int) -> float:
    """Mean |det - 1| over voxels carrying the label."""
    dets = np.asarray(dets, dtype=np.float64)
    if dets.ndim == 1:
        dets = np.reshape(dets, mask.dims, order="F")
    if dets.shape != tuple(mask.dims):
        raise GeometryError(f"dets shape {dets.shape} does not match mask {mask.dims}")
    sel = mask.labels == label
    if not sel.any():
        raise DegenerateInputError(f"label {label} empty in mask")
    return float(np.abs(dets[sel] - 1.0).mean())


def kruskal_wallis(groups) -> tuple:
    """Rank-sum H with tie correction and chi-square tail p (df = k-1)."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise ConfigError("need at least two groups")
    if any(g.size == 0 for g in groups):
        raise DegenerateInputError("empty group")
    pooled = np.concatenate(groups)
    n = pooled.size
    if n < 3:
        raise DegenerateInputError("need at least 3 observations in total")
    if np.all(pooled == pooled[0]):
        return 0.0, 1.0
    ranks = rankdata(pooled)
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start:start + g.size]
        h += r.sum() ** 2 / g.size
        start += g.size
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    _, counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - float((counts ** 3 - counts).sum()) / (n ** 3 - n)
    if correction <= 0.0:
        return 0.0, 1.0
    h /= correction
    df = len(groups) - 1
    p = float(gammaincc(df / 2.0, h / 2.0))
    return float(h), p


@dataclass(frozen=True)
class MetricReport:
    """Per-structure agreement between a warped and a reference segmentation."""

    dsc_sax: dict
    dsc_4ch: dict = field(default_factory=dict)
    jac_abs_dev: dict = field(default_factory=dict)
    hd_mm: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    @property
    def structures(self):
        return sorted(self.dsc_sax, key=list(STRUCTURES).index)

    @property
    def hd_avg(self) -> float:
        vals = [v for v in self.hd_mm.values() if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")


def report_for_pair(fixed_mask: LabelMask, warped_mask: LabelMask,
                    fixed_4ch: LabelMask | None = None,
                    warped_4ch: LabelMask | None = None,
                    dets=None) -> MetricReport:
    """Evaluate every structure present in the reference mask."""
    dsc_sax, dsc_4ch, jac, hd, counts = {}, {}, {}, {}, {}
    for name, label in STRUCTURES.items():
        present = (fixed_mask.labels == label).any()
        if not present:
            continue
        counts[name] = int((fixed_mask.labels == label).sum())
        dsc_sax[name] = dice(fixed_mask, warped_mask, label)
        if (warped_mask.labels == label).any():
            hd[name] = hausdorff(fixed_mask, warped_mask, label)
        else:
            hd[name] = float("inf")
        if fixed_4ch is not None and warped_4ch is not None and \
                (fixed_4ch.labels == label).any():
            dsc_4ch[name] = dice(fixed_4ch, warped_4ch, label)
        if dets is not None:
            jac[name] = jacobian_stats(dets, fixed_mask, label)
    return MetricReport(dsc_sax, dsc_4ch, jac, hd, counts)


def write_metrics_csv(report: MetricReport, path) -> None:
    def cell(d, name):
        return f"{d[name]:.9g}" if name in d else ""

    with open(path, "w", encoding="ascii") as f:
        f.write("structure,dsc_sax,dsc_4ch,jac_abs_dev,hd_mm\n")
        for name in report.structures:
            f.write(f"{name},{cell(report.dsc_sax, name)},{cell(report.dsc_4ch, name)},"
                    f"{cell(report.jac_abs_dev, name)},{cell(report.hd_mm, name)}\n")
