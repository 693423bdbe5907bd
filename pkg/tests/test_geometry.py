import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from cinestrain.errors import GeometryError
from cinestrain.geometry import (
    CineSeries,
    LabelMask,
    NormalizedFrame,
    ViewSet,
    Volume3D,
    denormalize_world,
    grid_world_coords,
    normalize_world,
    plane_grid_world,
    resample_to_plane,
    sample_plane_bilinear,
    sample_trilinear,
    voxel_to_world,
    world_to_voxel,
)

from conftest import random_mask, random_volume


def rotation(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    m = np.eye(3)
    m[i, i] = m[j, j] = c
    m[i, j], m[j, i] = -s, s
    return m


class TestVolume3D:
    def test_data_is_float32_fortran_readonly(self):
        vol = random_volume(np.random.default_rng(0))
        assert vol.data.dtype == np.float32
        assert vol.data.flags["F_CONTIGUOUS"]
        assert not vol.data.flags["WRITEABLE"]

    def test_shape_mismatch_rejected(self):
        with pytest.raises(GeometryError):
            Volume3D((4, 4, 4), (1, 1, 1), (0, 0, 0), np.eye(3), np.zeros((4, 4, 3)))

    def test_non_finite_rejected(self):
        data = np.zeros((3, 3, 3))
        data[1, 1, 1] = np.nan
        with pytest.raises(GeometryError):
            Volume3D((3, 3, 3), (1, 1, 1), (0, 0, 0), np.eye(3), data)

    def test_non_orthonormal_direction_rejected(self):
        with pytest.raises(GeometryError):
            Volume3D((3, 3, 3), (1, 1, 1), (0, 0, 0), np.eye(3) * 2.0, np.zeros((3, 3, 3)))

    def test_nonpositive_spacing_rejected(self):
        with pytest.raises(GeometryError):
            Volume3D((3, 3, 3), (1, 0.0, 1), (0, 0, 0), np.eye(3), np.zeros((3, 3, 3)))

    def test_with_data_keeps_geometry(self):
        vol = random_volume(np.random.default_rng(1))
        out = vol.with_data(np.ones(vol.dims))
        assert out.same_geometry(vol)
        assert float(out.data.min()) == 1.0


class TestLabelMask:
    def test_codes_clamped_to_known_labels(self):
        with pytest.raises(GeometryError):
            LabelMask((3, 3, 3), (1, 1, 1), (0, 0, 0), np.eye(3),
                      np.full((3, 3, 3), 7, dtype=np.uint8))

    def test_labels_uint8(self):
        m = random_mask(np.random.default_rng(2))
        assert m.labels.dtype == np.uint8

    def test_label_constants(self):
        assert (LabelMask.LV_POOL, LabelMask.LV_MYO, LabelMask.RV_POOL) == (1, 2, 3)


class TestCoordinateMaps:
    def test_voxel_world_round_trip(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            d = rotation(int(rng.integers(3)), rng.uniform(-np.pi, np.pi))
            vol = Volume3D((5, 4, 3), rng.uniform(0.5, 3.0, 3), rng.normal(size=3),
                           d, np.zeros((5, 4, 3)))
            idx = rng.uniform(-2, 6, size=(50, 3))
            back = world_to_voxel(vol, voxel_to_world(vol, idx))
            assert_allclose(back, idx, atol=1e-12)

    def test_world_origin_is_voxel_zero(self):
        vol = random_volume(np.random.default_rng(4))
        assert_allclose(voxel_to_world(vol, np.zeros((1, 3)))[0], vol.origin)

    def test_normalize_round_trip(self):
        rng = np.random.default_rng(5)
        frame = NormalizedFrame(rng.normal(size=3), rng.uniform(1, 30, 3))
        p = rng.normal(scale=20, size=(40, 3))
        assert_allclose(denormalize_world(frame, normalize_world(frame, p)), p, atol=1e-12)

    def test_from_volume_covers_all_voxels(self):
        rng = np.random.default_rng(6)
        for trial in range(10):
            d = rotation(int(rng.integers(3)), rng.uniform(-np.pi, np.pi))
            vol = Volume3D((6, 5, 4), rng.uniform(0.5, 3.0, 3), rng.normal(size=3),
                           d, np.zeros((6, 5, 4)))
            frame = NormalizedFrame.from_volume(vol)
            q = normalize_world(frame, grid_world_coords(vol))
            assert np.all(np.abs(q) <= 1.0 + 1e-12)
            # the box is tight: every face is touched
            assert_allclose(np.abs(q).max(axis=0), 1.0, atol=1e-12)

    def test_frame_rejects_zero_extent(self):
        with pytest.raises(GeometryError):
            NormalizedFrame(np.zeros(3), np.array([1.0, 0.0, 1.0]))


class TestSampling:
    def brute_trilinear(self, data, p):
        # direct 8-corner formula with clamped corners, one point at a time
        nx, ny, nz = data.shape
        q = np.clip(p, 0, [nx - 1, ny - 1, nz - 1])
        i0 = np.minimum(np.floor(q).astype(int), [max(nx - 2, 0), max(ny - 2, 0), max(nz - 2, 0)])
        f = q - i0
        total = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    wx = f[0] if dx else 1 - f[0]
                    wy = f[1] if dy else 1 - f[1]
                    wz = f[2] if dz else 1 - f[2]
                    total += wx * wy * wz * data[
                        min(i0[0] + dx, nx - 1), min(i0[1] + dy, ny - 1), min(i0[2] + dz, nz - 1)
                    ]
        return total

    def test_values_match_brute_force(self):
        rng = np.random.default_rng(7)
        vol = random_volume(rng, dims=(6, 5, 4))
        pts_idx = rng.uniform(0, [5, 4, 3], size=(100, 3))
        pts = voxel_to_world(vol, pts_idx)
        vals, inside = sample_trilinear(vol, pts)
        assert inside.all()
        data64 = vol.data.astype(np.float64)
        for k in range(100):
            assert abs(vals[k] - self.brute_trilinear(data64, pts_idx[k])) < 1e-12

    def test_matches_scipy_map_coordinates(self):
        scipy_nd = pytest.importorskip("scipy.ndimage")
        rng = np.random.default_rng(8)
        vol = random_volume(rng, dims=(9, 7, 6))
        pts_idx = rng.uniform(0, [8, 6, 5], size=(200, 3))
        vals, inside = sample_trilinear(vol, voxel_to_world(vol, pts_idx))
        ref = scipy_nd.map_coordinates(vol.data.astype(np.float64), pts_idx.T, order=1)
        assert inside.all()
        assert_allclose(vals, ref, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        vol = random_volume(rng, dims=(8, 8, 6))
        # keep probes off lattice planes so the interpolant is smooth locally
        pts_idx = rng.uniform(0.2, 0.8, size=(50, 3)) + rng.integers(0, 5, size=(50, 3))
        pts = voxel_to_world(vol, pts_idx)
        vals, inside, grad = sample_trilinear(vol, pts, with_grad=True)
        h = 1e-6
        for ax in range(3):
            dp = np.zeros(3)
            dp[ax] = h
            vp, _ = sample_trilinear(vol, pts + dp)
            vm, _ = sample_trilinear(vol, pts - dp)
            assert_allclose(grad[:, ax], (vp - vm) / (2 * h), atol=1e-5)

    def test_outside_points_flagged(self):
        vol = random_volume(np.random.default_rng(10))
        far = np.array([[1e4, 1e4, 1e4], [-1e4, 0.0, 0.0]])
        vals, inside = sample_trilinear(vol, far)
        assert not inside.any()
        assert_array_equal(vals, 0.0)

    def test_plane_projection_drops_normal_offset(self):
        rng = np.random.default_rng(11)
        plane = Volume3D((8, 7, 1), (1.5, 2.0, 4.0), (-3, 2, 5), np.eye(3),
                         rng.standard_normal((8, 7, 1)))
        pts = plane_grid_world(plane)[:20]
        off = pts + np.array([0.0, 0.0, 17.0])
        v0, in0 = sample_plane_bilinear(plane, pts)
        v1, in1 = sample_plane_bilinear(plane, off)
        assert_allclose(v0, v1, atol=1e-12)
        assert in0.all() and in1.all()

    def test_plane_gradient_has_no_normal_component(self):
        rng = np.random.default_rng(12)
        plane = Volume3D((8, 7, 1), (1.5, 2.0, 4.0), (0, 0, 0), np.eye(3),
                         rng.standard_normal((8, 7, 1)))
        pts = plane_grid_world(plane) + rng.uniform(0.1, 0.4, size=(56, 3))
        vals, inside, grad = sample_plane_bilinear(plane, pts, with_grad=True)
        assert_array_equal(grad[:, 2], 0.0)

    def test_plane_requires_single_slice(self):
        vol = random_volume(np.random.default_rng(13))
        with pytest.raises(GeometryError):
            sample_plane_bilinear(vol, np.zeros((1, 3)))

    def test_resample_to_plane_identity(self):
        rng = np.random.default_rng(14)
        vol = random_volume(rng, dims=(6, 5, 4))
        plane = Volume3D((6, 5, 1), vol.spacing, vol.origin, np.eye(3), np.zeros((6, 5, 1)))
        img, inside = resample_to_plane(vol, plane)
        assert inside.all()
        assert_allclose(img, vol.data[:, :, 0], atol=1e-12)


class TestGridCoords:
    def test_fortran_order_matches_ravel(self):
        vol = random_volume(np.random.default_rng(15), dims=(4, 3, 2))
        pts = grid_world_coords(vol)
        # x index advances fastest; entry k corresponds to data.ravel(order="F")[k]
        flat = vol.data.ravel(order="F")
        vals, inside = sample_trilinear(vol, pts)
        assert inside.all()
        assert_allclose(vals, flat, atol=1e-6)


class TestSeriesValidation:
    def make_pair(self, rng, **kw):
        vol = random_volume(rng, **kw)
        mask = random_mask(rng, **kw)
        return vol, mask

    def test_series_requires_shared_geometry(self):
        rng = np.random.default_rng(16)
        a = self.make_pair(rng)
        b = self.make_pair(rng, origin=(0.0, 0.0, 0.0))
        with pytest.raises(GeometryError):
            CineSeries((a, b), ed_index=0, es_index=1)

    def test_series_indices_checked(self):
        rng = np.random.default_rng(17)
        frames = (self.make_pair(rng), self.make_pair(rng))
        with pytest.raises(GeometryError):
            CineSeries(frames, ed_index=5, es_index=0)

    def test_viewset_requires_equal_lengths(self, small_phantom):
        views, _ = small_phantom
        short = CineSeries(views.ch4.frames[:-1], 0, min(views.es_index, len(views.ch4) - 2))
        with pytest.raises(GeometryError):
            ViewSet(sax=views.sax, ch4=short)

    def test_accessors(self, small_phantom):
        views, _ = small_phantom
        assert views.sax.volume(0) is views.sax.frames[0][0]
        assert views.sax.mask(0) is views.sax.frames[0][1]
        assert views.n_times == len(views.sax)
        assert 0 <= views.es_index < views.n_times
