"""Volumetric data model: grids with physical geometry and differentiable sampling.

Conventions fixed project-wide:

* arrays are indexed ``data[x, y, z]`` and stored Fortran-contiguous, i.e.
  x-fastest in memory, matching the MetaImage payload layout;
* voxel *centers* sit at integer indices; voxel (0, 0, 0) is at ``origin``;
* all world coordinates are in millimeters.

All types are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .kernels import trilinear

_ORTHO_TOL = 1e-6


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _check_geometry(dims, spacing, origin, direction):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise GeometryError(f"dims must be three positive integers, got {dims}")
    if spacing.shape != (3,) or np.any(spacing <= 0):
        raise GeometryError(f"spacing must be three positive floats, got {spacing}")
    if origin.shape != (3,):
        raise GeometryError("origin must be a 3-vector")
    if direction.shape != (3, 3):
        raise GeometryError("direction must be a 3x3 matrix")
    if np.max(np.abs(direction.T @ direction - np.eye(3))) >= _ORTHO_TOL:
        raise GeometryError("direction columns are not orthonormal")


@dataclass(frozen=True)
class Volume3D:
    """A 3D scalar grid with physical geometry.

    ``data`` has shape ``dims`` = (nx, ny, nz) and dtype float32; all
    intensities must be finite.
    """

    dims: tuple[int, int, int]
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        spacing = _freeze(np.asarray(self.spacing, dtype=np.float64).copy())
        origin = _freeze(np.asarray(self.origin, dtype=np.float64).copy())
        direction = _freeze(np.asarray(self.direction, dtype=np.float64).copy())
        dims = tuple(int(d) for d in self.dims)
        _check_geometry(dims, spacing, origin, direction)
        data = np.asfortranarray(self.data, dtype=np.float32)
        if data.shape != dims:
            raise GeometryError(f"data shape {data.shape} does not match dims {dims}")
        if not np.all(np.isfinite(data)):
            raise GeometryError("volume intensities must be finite")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "data", _freeze(data))

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """Same geometry, new intensities."""
        return Volume3D(self.dims, self.spacing, self.origin, self.direction, data)

    def same_geometry(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.array_equal(self.spacing, other.spacing)
            and np.array_equal(self.origin, other.origin)
            and np.array_equal(self.direction, other.direction)
        )


@dataclass(frozen=True)
class LabelMask:
    """Per-voxel label codes sharing a Volume3D's geometry.

    Codes: 0 background, 1 LV blood pool, 2 LV myocardium, 3 RV blood pool.
    """

    LV_POOL = 1
    LV_MYO = 2
    RV_POOL = 3

    dims: tuple[int, int, int]
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        spacing = _freeze(np.asarray(self.spacing, dtype=np.float64).copy())
        origin = _freeze(np.asarray(self.origin, dtype=np.float64).copy())
        direction = _freeze(np.asarray(self.direction, dtype=np.float64).copy())
        dims = tuple(int(d) for d in self.dims)
        _check_geometry(dims, spacing, origin, direction)
        labels = np.asfortranarray(self.labels, dtype=np.uint8)
        if labels.shape != dims:
            raise GeometryError(f"labels shape {labels.shape} does not match dims {dims}")
        if labels.max(initial=0) > 3:
            raise GeometryError("label codes must be in {0,1,2,3}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "labels", _freeze(labels))

    def with_labels(self, labels: np.ndarray) -> "LabelMask":
        return LabelMask(self.dims, self.spacing, self.origin, self.direction, labels)

    def same_geometry(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.array_equal(self.spacing, other.spacing)
            and np.array_equal(self.origin, other.origin)
            and np.array_equal(self.direction, other.direction)
        )


@dataclass(frozen=True)
class CineSeries:
    """Ordered cine time points, each an image/mask pair on one shared grid."""

    frames: tuple[tuple[Volume3D, LabelMask], ...]
    ed_index: int
    es_index: int

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise GeometryError("a cine series needs at least two time points")
        vol0 = frames[0][0]
        for vol, mask in frames:
            if not vol0.same_geometry(vol) or not vol.same_geometry(mask):
                raise GeometryError("all cine frames must share one geometry")
        if not (0 <= self.ed_index < len(frames) and 0 <= self.es_index < len(frames)):
            raise GeometryError("ed/es indices out of range")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def volume(self, t: int) -> Volume3D:
        return self.frames[t][0]

    def mask(self, t: int) -> LabelMask:
        return self.frames[t][1]


@dataclass(frozen=True)
class ViewSet:
    """The SAX stack plus the 4CH and (optional) 2CH long-axis references."""

    sax: CineSeries
    ch4: CineSeries
    ch2: CineSeries | None = None

    def __post_init__(self):
        series = [self.sax, self.ch4] + ([self.ch2] if self.ch2 is not None else [])
        n = len(series[0])
        for s in series:
            if len(s) != n or s.ed_index != series[0].ed_index or s.es_index != series[0].es_index:
                raise GeometryError("all views must share time-point count and ed/es indices")

    @property
    def n_times(self) -> int:
        return len(self.sax)

    @property
    def ed_index(self) -> int:
        return self.sax.ed_index

    @property
    def es_index(self) -> int:
        return self.sax.es_index


@dataclass(frozen=True)
class NormalizedFrame:
    """Affine map between world mm and the canonical cube [-1, 1]^3."""

    center: np.ndarray
    half_extent: np.ndarray

    def __post_init__(self):
        center = _freeze(np.asarray(self.center, dtype=np.float64).copy())
        half_extent = _freeze(np.asarray(self.half_extent, dtype=np.float64).copy())
        if np.any(half_extent <= 0):
            raise GeometryError("half_extent must be positive per axis")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_extent", half_extent)

    @classmethod
    def from_volume(cls, vol: Volume3D) -> "NormalizedFrame":
        """Frame spanning the volume's world-space bounding box."""
        nx, ny, nz = vol.dims
        corners = np.array(
            [(i, j, k) for i in (0, nx - 1) for j in (0, ny - 1) for k in (0, nz - 1)],
            dtype=np.float64,
        )
        world = voxel_to_world(vol, corners)
        lo, hi = world.min(axis=0), world.max(axis=0)
        half = np.maximum((hi - lo) / 2.0, 1e-9)
        return cls(center=(lo + hi) / 2.0, half_extent=half)


def voxel_to_world(vol, idx: np.ndarray) -> np.ndarray:
    """Map continuous voxel indices to world mm: p = origin + D (s * idx)."""
    idx = np.asarray(idx, dtype=np.float64)
    return (idx * vol.spacing) @ vol.direction.T + vol.origin


def world_to_voxel(vol, p: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`voxel_to_world` (direction is orthonormal)."""
    p = np.asarray(p, dtype=np.float64)
    return ((p - vol.origin) @ vol.direction) / vol.spacing


def normalize_world(frame: NormalizedFrame, p: np.ndarray) -> np.ndarray:
    """World mm to canonical coordinates, componentwise."""
    return (np.asarray(p, dtype=np.float64) - frame.center) / frame.half_extent


def denormalize_world(frame: NormalizedFrame, q: np.ndarray) -> np.ndarray:
    """Canonical coordinates back to world mm."""
    return np.asarray(q, dtype=np.float64) * frame.half_extent + frame.center


def sample_trilinear(vol: Volume3D, p: np.ndarray, with_grad: bool = False):
    """Trilinear interpolation of the volume at world points.

    Returns ``(values, inside)`` or ``(values, inside, grad_world)`` where
    ``grad_world`` is the spatial gradient of the interpolant in 1/mm.
    Points outside the lattice hull return 0 with ``inside`` False.
    """
    idx = world_to_voxel(vol, p)
    vals, grad_idx, inside = trilinear(vol.data, idx)
    if not with_grad:
        return vals, inside
    # d idx / d world = diag(1/spacing) @ direction^T
    grad_world = (grad_idx / vol.spacing) @ vol.direction.T
    return vals, inside, grad_world


def sample_plane_bilinear(plane: Volume3D, p: np.ndarray, with_grad: bool = False):
    """Sample a single-slice volume after orthogonal projection onto its plane.

    The out-of-plane coordinate is dropped before interpolation, so points
    displaced off the plane read the nearest in-plane value.  The returned
    gradient is purely in-plane (zero along the plane normal).
    """
    if plane.dims[2] != 1:
        raise GeometryError("sample_plane_bilinear expects nz == 1")
    idx = world_to_voxel(plane, p)
    idx[..., 2] = 0.0
    vals, grad_idx, inside = trilinear(plane.data, idx)
    if not with_grad:
        return vals, inside
    grad_world = (grad_idx / plane.spacing) @ plane.direction.T
    return vals, inside, grad_world


def resample_to_plane(vol: Volume3D, plane_geom: Volume3D) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``vol`` at every voxel center of a single-slice plane geometry.

    Returns ``(image, inside)`` both shaped (nx, ny) in the plane's own grid.
    """
    if plane_geom.dims[2] != 1:
        raise GeometryError("resample_to_plane expects a plane with nz == 1")
    nx, ny = plane_geom.dims[0], plane_geom.dims[1]
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    idx = np.stack([ii.ravel(), jj.ravel(), np.zeros(nx * ny)], axis=1)
    pts = voxel_to_world(plane_geom, idx)
    vals, inside = sample_trilinear(vol, pts)
    return vals.reshape(nx, ny), inside.reshape(nx, ny)


def plane_grid_world(plane: Volume3D) -> np.ndarray:
    """World coordinates of all voxel centers of a single-slice plane, (n, 3), x fastest."""
    nx, ny = plane.dims[0], plane.dims[1]
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    idx = np.stack(
        [ii.ravel(order="F"), jj.ravel(order="F"), np.zeros(nx * ny)], axis=1
    )
    return voxel_to_world(plane, idx)


def grid_world_coords(vol) -> np.ndarray:
    """World coordinates of every voxel center, shape (nx*ny*nz, 3), x fastest."""
    nx, ny, nz = vol.dims
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    idx = np.stack([ii.ravel(order="F"), jj.ravel(order="F"), kk.ravel(order="F")], axis=1)
    return voxel_to_world(vol, idx)
