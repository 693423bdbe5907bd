"""Directory layout for cine view sets.

One directory per study: ``series.json`` plus per-frame MetaImage files
named ``<view>_t###.mha`` / ``<view>_t###_mask.mha`` for the short-axis
stack and the long-axis reference planes.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataError
from .geometry import CineSeries, LabelMask, ViewSet
from .mha import read_mha, write_mha

_VIEW_NAMES = ("sax", "ch4", "ch2")


def _frame_path(directory, view, t, mask=False):
    suffix = "_mask" if mask else ""
    return os.path.join(directory, f"{view}_t{t:03d}{suffix}.mha")


def save_series(series: CineSeries, directory, view: str) -> list:
    written = []
    for t, (vol, mask) in enumerate(series.frames):
        p = _frame_path(directory, view, t)
        write_mha(vol, p)
        written.append(p)
        if mask is not None:
            p = _frame_path(directory, view, t, mask=True)
            write_mha(mask, p)
            written.append(p)
    return written


def load_series(directory, view: str, n_times: int, ed_index: int,
                es_index: int) -> CineSeries:
    frames = []
    for t in range(n_times):
        vol = read_mha(_frame_path(directory, view, t))
        if isinstance(vol, LabelMask):
            raise DataError(f"{view} frame {t} is a label image, expected intensities")
        mask_path = _frame_path(directory, view, t, mask=True)
        mask = None
        if os.path.exists(mask_path):
            mask = read_mha(mask_path)
            if not isinstance(mask, LabelMask):
                mask = LabelMask(mask.dims, mask.spacing, mask.origin,
                                 mask.direction, np.rint(mask.data).astype(np.uint8))
        frames.append((vol, mask))
    return CineSeries(tuple(frames), ed_index, es_index)


def save_viewset(views: ViewSet, directory) -> None:
    """Write all frames plus the series.json table of contents."""
    os.makedirs(directory, exist_ok=True)
    present = [v for v in _VIEW_NAMES if getattr(views, v) is not None]
    for view in present:
        save_series(getattr(views, view), directory, view)
    meta = {
        "n_times": views.n_times,
        "ed_index": views.ed_index,
        "es_index": views.es_index,
        "views": present,
    }
    with open(os.path.join(directory, "series.json"), "w", encoding="ascii") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_viewset(directory) -> ViewSet:
    meta_path = os.path.join(directory, "series.json")
    if not os.path.exists(meta_path):
        raise DataError(f"not a view-set directory (no series.json): {directory}")
    with open(meta_path, "r", encoding="ascii") as f:
        meta = json.load(f)
    kwargs = {}
    for view in meta["views"]:
        kwargs[view] = load_series(directory, view, meta["n_times"],
                                   meta["ed_index"], meta["es_index"])
    if "sax" not in kwargs or "ch4" not in kwargs:
        raise DataError("view set requires at least the sax and ch4 series")
    return ViewSet(**kwargs)
