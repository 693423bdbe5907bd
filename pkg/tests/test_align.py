"""Slice-shift alignment: warp model, loss gradients, optimizer, CSV I/O."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from cinestrain.align import (
    AlignConfig,
    SliceTranslations,
    _view_terms,
    _warp_points,
    align_stack,
    alignment_loss,
    apply_translations,
    read_shifts_csv,
    warp_stack_to_lax,
    write_shifts_csv,
)
from cinestrain.errors import ConfigError
from cinestrain.geometry import CineSeries, LabelMask, ViewSet, Volume3D
from cinestrain.metrics import dice
from cinestrain.phantom import inject_misalignment


class TestSliceTranslations:
    def test_shape_validation(self):
        with pytest.raises(ConfigError):
            SliceTranslations(np.zeros((4, 3)))
        with pytest.raises(ConfigError):
            SliceTranslations(np.zeros(8))

    def test_rejects_non_finite(self):
        bad = np.zeros((3, 2))
        bad[1, 0] = np.nan
        with pytest.raises(ConfigError):
            SliceTranslations(bad)

    def test_array_is_frozen(self):
        t = SliceTranslations.zeros(3)
        with pytest.raises(ValueError):
            t.shifts[0, 0] = 1.0

    def test_zeros_constructor(self):
        t = SliceTranslations.zeros(5)
        assert t.shifts.shape == (5, 2)
        assert not t.shifts.any()


class TestAlignConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            AlignConfig(iterations=0)
        with pytest.raises(ConfigError):
            AlignConfig(lr=0.0)
        with pytest.raises(ConfigError):
            AlignConfig(nmi_scale_mode="sometimes")

    def test_modes_accepted(self):
        assert AlignConfig(nmi_scale_mode="off").nmi_scale_mode == "off"
        assert AlignConfig().nmi_scale_mode == "balance"


def delta_volume():
    data = np.zeros((9, 9, 2), dtype=np.float64)
    data[4, 4, 0] = 1.0
    return Volume3D((9, 9, 2), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), np.eye(3), data)


class TestApplyTranslations:
    def test_content_moves_by_plus_shift(self):
        # +2 mm in x at 1 mm spacing: the bright voxel lands two cells down i
        out = apply_translations(delta_volume(), SliceTranslations(
            np.array([[2.0, 0.0], [0.0, 0.0]])))
        assert_array_equal(np.argwhere(out.data > 0.5), [[6, 4, 0]])

    def test_mask_uses_nearest_lookup(self):
        lab = np.zeros((9, 9, 1), dtype=np.uint8)
        lab[4, 4, 0] = 2
        mask = LabelMask((9, 9, 1), (2.0, 2.0, 1.0), (0.0, 0.0, 0.0),
                         np.eye(3), lab)
        # 2.6 mm at 2 mm spacing = 1.3 voxels, nearest source lookup puts the
        # label at the single index i with round(i - 1.3) == 4
        out = apply_translations(mask, SliceTranslations(np.array([[2.6, 0.0]])))
        assert_array_equal(np.argwhere(out.labels == 2), [[5, 4, 0]])

    def test_zero_shift_returns_same_object(self):
        vol = delta_volume()
        assert apply_translations(vol, SliceTranslations.zeros(2)) is vol

    def test_slice_count_checked(self):
        with pytest.raises(ConfigError):
            apply_translations(delta_volume(), SliceTranslations.zeros(5))

    def test_round_trip_restores_interior(self):
        # a ramp is reproduced exactly by bilinear resampling, so shifting
        # forward and back is lossless away from the zero-filled borders
        ii, jj = np.meshgrid(np.arange(10.0), np.arange(8.0), indexing="ij")
        data = (0.3 * ii - 0.7 * jj + 2.0)[:, :, None] * np.ones((1, 1, 3))
        vol = Volume3D((10, 8, 3), (1.5, 1.0, 4.0), (0.0, 0.0, 0.0),
                       np.eye(3), data)
        sh = np.array([[1.2, -0.6], [0.0, 0.9], [-0.8, 0.3]])
        fwd = apply_translations(vol, SliceTranslations(sh))
        back = apply_translations(fwd, SliceTranslations(-sh))
        # resampling runs through the float32 kernel
        assert_allclose(back.data[2:-2, 2:-2, :], vol.data[2:-2, 2:-2, :],
                        atol=5e-7)

    def test_matches_point_warp_on_slice_centers(self):
        rng = np.random.default_rng(5)
        data = rng.standard_normal((10, 9, 3))
        vol = Volume3D((10, 9, 3), (2.0, 1.5, 4.0), (-3.0, 2.0, 1.0),
                       np.eye(3), data)
        sh = rng.uniform(-2.0, 2.0, size=(3, 2))
        applied = apply_translations(vol, SliceTranslations(sh))
        for k in range(3):
            ii, jj = np.meshgrid(np.arange(10.0), np.arange(9.0), indexing="ij")
            pts = np.stack([
                vol.origin[0] + ii.ravel(order="F") * vol.spacing[0],
                vol.origin[1] + jj.ravel(order="F") * vol.spacing[1],
                np.full(90, vol.origin[2] + k * vol.spacing[2]),
            ], axis=1)
            vals, inside, _ = _warp_points(vol.data, vol, sh, pts)
            got = applied.data[:, :, k].ravel(order="F")
            assert_allclose(vals[inside], got[inside], atol=1e-12)


class TestWarpStackToLax:
    def test_matches_rendered_lax_view(self, small_phantom):
        views, _ = small_phantom
        ed = views.ed_index
        sax = views.sax.volume(ed)
        plane = views.ch4.volume(ed)
        img, inside = warp_stack_to_lax(
            sax, SliceTranslations.zeros(sax.dims[2]), plane)
        assert img.shape == plane.data[:, :, 0].shape
        assert inside.mean() > 0.9
        a = plane.data[:, :, 0][inside]
        b = img[inside]
        assert np.corrcoef(a, b)[0, 1] > 0.9

    def test_out_of_stack_rows_flagged_outside(self, small_phantom):
        views, _ = small_phantom
        ed = views.ed_index
        sax = views.sax.volume(ed)
        plane = views.ch4.volume(ed)
        far = Volume3D(plane.dims, plane.spacing,
                       np.asarray(plane.origin) + np.array([0.0, 0.0, 500.0]),
                       plane.direction, plane.data)
        _, inside = warp_stack_to_lax(
            sax, SliceTranslations.zeros(sax.dims[2]), far)
        assert not inside.any()


def _views_ed(views):
    ed = views.ed_index
    return {"ch4": views.ch4.frames[ed], "ch2": views.ch2.frames[ed]}


class TestAlignmentLoss:
    def test_gradient_matches_finite_differences(self, small_phantom):
        views, _ = small_phantom
        ed = views.ed_index
        vol, mask = views.sax.frames[ed]
        views_ed = _views_ed(views)
        rng = np.random.default_rng(21)
        nz = vol.dims[2]
        # keep samples strictly inside interpolation cells so the objective
        # stays smooth across the finite-difference step
        base = rng.uniform(0.15, 0.45, size=(nz, 2)) * rng.choice(
            [-1.0, 1.0], size=(nz, 2))

        def f(sh):
            val, _ = alignment_loss(SliceTranslations(sh), vol, mask, views_ed)
            return val

        _, grad = alignment_loss(SliceTranslations(base), vol, mask, views_ed)
        h = 1e-5
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            up = base.copy()
            up[idx] += h
            dn = base.copy()
            dn[idx] -= h
            fd[idx] = (f(up) - f(dn)) / (2.0 * h)
        scale = max(np.abs(grad).max(), np.abs(fd).max())
        assert np.abs(grad - fd).max() / scale < 1e-4

    def test_gradient_with_frozen_nmi_scales(self, small_phantom):
        # the NMI rescaling range is detached from the gradient, so slices
        # holding the joint-extremal warped sample are excluded from the check
        views, _ = small_phantom
        ed = views.ed_index
        vol, mask = views.sax.frames[ed]
        views_ed = _views_ed(views)
        scales = {"ch4": 0.37, "ch2": 0.81}
        rng = np.random.default_rng(22)
        nz = vol.dims[2]
        base = rng.uniform(0.15, 0.45, size=(nz, 2)) * rng.choice(
            [-1.0, 1.0], size=(nz, 2))

        keep = np.ones(nz, dtype=bool)
        for term in _view_terms(vol, mask, views_ed, 32):
            vals, inside, scatter = _warp_points(
                vol.data, vol, base, term.myo_pts)
            k0, k1, _, _ = scatter
            a = term.fixed_myo[inside]
            b = vals[inside]
            for owner in (np.argmin(b), np.argmax(b)):
                if b[owner] < a.min() or b[owner] > a.max():
                    keep[k0[inside][owner]] = False
                    keep[k1[inside][owner]] = False

        _, grad = alignment_loss(SliceTranslations(base), vol, mask, views_ed,
                                 nmi_scales=scales)
        h = 1e-5
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            up = base.copy()
            up[idx] += h
            dn = base.copy()
            dn[idx] -= h
            lu, _ = alignment_loss(SliceTranslations(up), vol, mask, views_ed,
                                   nmi_scales=scales)
            ld, _ = alignment_loss(SliceTranslations(dn), vol, mask, views_ed,
                                   nmi_scales=scales)
            fd[idx] = (lu - ld) / (2.0 * h)
        assert keep.sum() >= nz - 4
        scale = max(np.abs(grad).max(), np.abs(fd).max())
        assert np.abs(grad - fd)[keep].max() / scale < 1e-4

    def test_views_add_linearly(self, small_phantom):
        views, _ = small_phantom
        ed = views.ed_index
        vol, mask = views.sax.frames[ed]
        both = _views_ed(views)
        t = SliceTranslations.zeros(vol.dims[2])
        l4, g4 = alignment_loss(t, vol, mask, {"ch4": both["ch4"]})
        l2, g2 = alignment_loss(t, vol, mask, {"ch2": both["ch2"]})
        lb, gb = alignment_loss(t, vol, mask, both)
        assert_allclose(lb, l4 + l2, rtol=1e-12)
        assert_allclose(gb, g4 + g2, rtol=1e-12)

    def test_clean_stack_prefers_zero_shift(self, small_phantom):
        views, _ = small_phantom
        ed = views.ed_index
        vol, mask = views.sax.frames[ed]
        views_ed = _views_ed(views)
        nz = vol.dims[2]
        l0, _ = alignment_loss(SliceTranslations.zeros(nz), vol, mask, views_ed)
        for ax in (0, 1):
            for tau in (-2.0, 2.0):
                sh = np.zeros((nz, 2))
                sh[:, ax] = tau
                lt, _ = alignment_loss(SliceTranslations(sh), vol, mask,
                                       views_ed)
                assert lt > l0

    def test_empty_lax_myocardium_rejected(self, small_phantom):
        views, _ = small_phantom
        ed = views.ed_index
        vol, mask = views.sax.frames[ed]
        ch4_vol, ch4_mask = views.ch4.frames[ed]
        blank = ch4_mask.with_labels(np.zeros_like(ch4_mask.labels))
        with pytest.raises(ConfigError):
            alignment_loss(SliceTranslations.zeros(vol.dims[2]), vol, mask,
                           {"ch4": (ch4_vol, blank)})


class TestAlignStack:
    def test_clean_stack_stays_put(self, small_phantom):
        views, _ = small_phantom
        res = align_stack(views, AlignConfig(iterations=600))
        assert np.abs(res.translations.shifts).mean() < 0.3
        assert res.loss_trace.shape == (600,)
        assert res.loss_trace[-1] <= res.loss_trace[0]
        assert res.wall_time > 0.0

    def test_recovers_injected_shifts(self, small_phantom):
        views, _ = small_phantom
        mis, inj = inject_misalignment(views.sax, seed=7, max_shift=3.0)
        res = align_stack(ViewSet(mis, views.ch4, views.ch2), AlignConfig())
        resid = np.abs(res.translations.shifts + inj).mean()
        assert resid < 0.8

    def test_applying_result_improves_masks(self, small_phantom):
        views, _ = small_phantom
        ed = views.ed_index
        clean = views.sax.mask(ed)
        mis, _ = inject_misalignment(views.sax, seed=8, max_shift=3.0)
        res = align_stack(ViewSet(mis, views.ch4, views.ch2), AlignConfig())
        fixed = apply_translations(mis.mask(ed), res.translations)
        assert dice(clean, fixed, 2) > dice(clean, mis.mask(ed), 2)
        assert dice(clean, fixed, 2) > 0.85

    def test_nmi_scales_by_mode(self, small_phantom):
        views, _ = small_phantom
        bal = align_stack(views, AlignConfig(iterations=2))
        assert set(bal.nmi_scales) == {"ch4", "ch2"}
        assert all(np.isfinite(s) and s > 0 for s in bal.nmi_scales.values())
        off = align_stack(views, AlignConfig(iterations=2,
                                             nmi_scale_mode="off"))
        assert all(s == 0.0 for s in off.nmi_scales.values())

    def test_max_shift_clips(self, small_phantom):
        views, _ = small_phantom
        mis, _ = inject_misalignment(views.sax, seed=9, max_shift=4.0)
        res = align_stack(ViewSet(mis, views.ch4, views.ch2),
                          AlignConfig(iterations=50, max_shift=0.5))
        assert np.abs(res.translations.shifts).max() <= 0.5 + 1e-12

    def test_runs_without_two_chamber_view(self, small_phantom):
        views, _ = small_phantom
        res = align_stack(ViewSet(views.sax, views.ch4, None),
                          AlignConfig(iterations=2))
        assert set(res.nmi_scales) == {"ch4"}

    def test_deterministic(self, small_phantom):
        views, _ = small_phantom
        a = align_stack(views, AlignConfig(iterations=40))
        b = align_stack(views, AlignConfig(iterations=40))
        assert_array_equal(a.translations.shifts, b.translations.shifts)
        assert_array_equal(a.loss_trace, b.loss_trace)


class TestShiftsCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        t = SliceTranslations(rng.uniform(-5, 5, size=(6, 2)))
        path = tmp_path / "shifts.csv"
        write_shifts_csv(t, path)
        back = read_shifts_csv(path)
        assert_allclose(back.shifts, t.shifts, rtol=1e-8)

    def test_header_written(self, tmp_path):
        path = tmp_path / "shifts.csv"
        write_shifts_csv(SliceTranslations.zeros(2), path)
        assert path.read_text().splitlines()[0] == "slice_index,tx_mm,ty_mm"

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("slice,tx,ty\n0,1.0,2.0\n")
        with pytest.raises(ConfigError):
            read_shifts_csv(path)

    def test_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "gaps.csv"
        path.write_text("slice_index,tx_mm,ty_mm\n0,1.5,-2.0\n\n1,0.0,3.25\n")
        back = read_shifts_csv(path)
        assert_allclose(back.shifts, [[1.5, -2.0], [0.0, 3.25]])
