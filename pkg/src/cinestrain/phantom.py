"""Synthetic cine phantom with closed-form incompressible deformation.

The left ventricle is an annulus around the z axis.  A material point at
radius R contracts to r(R, z, t) = sqrt(R^2 - c(t) sigma(z)^2 rho(R)): c(t)
is the contraction amplitude over the cycle, sigma(z) tapers the ventricle
toward the apex, rho(R) fades the deformation to zero far from the axis.
rho = 1 out to a shelf radius past the right-ventricle crescent, so on the
myocardium and the whole RV det F = 1 exactly and

    E_RR = ((R/r)^2 - 1) / 2,   E_CC = ((r/R)^2 - 1) / 2.

Inside the blood pool (below an anchor radius) the map switches to a linear
squash so it stays defined at the axis; no strain is evaluated there.
Intensities are tissue levels (bright pool, dark myocardium) blended over a
short edge width, plus a band-limited random-phase sinusoid texture, both
evaluated at material coordinates: every frame is the same pattern deformed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError
from .geometry import CineSeries, LabelMask, ViewSet, Volume3D

_POOL_ANCHOR = 0.9  # pool squash starts at this fraction of the inner radius
_RV_OFFSET = 1.55  # RV crescent centre, in units of r_out
_RV_RADIUS = 0.8  # RV crescent radius, in units of r_out
_EDGE_MM = 1.5  # tissue-contrast blend width
_LEVELS = {"pool": 1.0, "myo": 0.0, "bg": 0.35, "rv": 0.85}
_TEX_AMP = 0.6


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (64, 64, 12)
    spacing: tuple = (2.0, 2.0, 8.0)
    r_in: float = 12.0
    r_out: float = 20.0
    c_max: float = 70.0
    phases: int = 10
    seed: int = 0
    rv_enable: bool = True
    shelf_radius: float = 48.0
    taper_radius: float = 60.0
    apex_scale: float = 0.75
    noise_sigma: float = 0.0
    lax_spacing: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.r_in < self.r_out <= self.shelf_radius < self.taper_radius):
            raise ConfigError("need 0 < r_in < r_out <= shelf_radius < taper_radius")
        if self.phases < 3:
            raise ConfigError("need at least 3 phases")
        # pool cubic stays monotone iff c_max < (2/3)(anchor*r_in)^2
        limit = (2.0 / 3.0) * (_POOL_ANCHOR * self.r_in) ** 2
        if not self.c_max < limit:
            raise ConfigError(
                f"c_max must stay below (2/3)*({_POOL_ANCHOR}*r_in)^2 = "
                f"{limit:.3g} for an invertible map"
            )
        if not 0.0 < self.apex_scale <= 1.0:
            raise ConfigError("apex_scale must be in (0, 1]")
        if self.rv_enable and (_RV_OFFSET + _RV_RADIUS) * self.r_out > self.shelf_radius:
            raise ConfigError(
                "shelf_radius must reach past the RV crescent "
                f"(needs >= {(_RV_OFFSET + _RV_RADIUS) * self.r_out:.3g})"
            )


def _smoothstep5(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (s * (6.0 * s - 15.0) + 10.0)


def _smoothstep5_d(s):
    inside = (s > 0.0) & (s < 1.0)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, 30.0 * s * s * (s - 1.0) * (s - 1.0), 0.0)


@dataclass(frozen=True)
class GroundTruth:
    """Closed-form maps, strain, and generation record for one phantom."""

    cfg: PhantomConfig
    c_table: np.ndarray  # c(t), mm^2, c at ED indices is 0
    z_base: float
    z_apex: float
    tex_freqs: np.ndarray  # (m, 3) angular frequencies, rad/mm
    tex_phases: np.ndarray  # (m,)
    injected_shifts: np.ndarray | None = None  # (nz, 2) mm, if misaligned

    # -- per-z profile -------------------------------------------------
    def sigma(self, z):
        s = (np.asarray(z, dtype=np.float64) - self.z_base) / (self.z_apex - self.z_base)
        return 1.0 + (self.cfg.apex_scale - 1.0) * _smoothstep5(s)

    def _sigma_dz(self, z):
        s = (np.asarray(z, dtype=np.float64) - self.z_base) / (self.z_apex - self.z_base)
        return (self.cfg.apex_scale - 1.0) * _smoothstep5_d(s) / (self.z_apex - self.z_base)

    def _rho(self, R):
        s = (R - self.cfg.shelf_radius) / (self.cfg.taper_radius - self.cfg.shelf_radius)
        return 1.0 - _smoothstep5(s)

    def _rho_d(self, R):
        w = self.cfg.taper_radius - self.cfg.shelf_radius
        return -_smoothstep5_d((R - self.cfg.shelf_radius) / w) / w

    # -- maps ------------------------------------------------------------
    def _pool_coeffs(self, t):
        """Cubic r = r_a (a p + c p^3), p = R/R_a: C^1 match to the annulus
        at the anchor; monotone while c_max < (2/3)(anchor r_in)^2."""
        ratio = float(self.c_table[t]) / (_POOL_ANCHOR * self.cfg.r_in) ** 2
        beta = 1.0 / (1.0 - ratio)  # annulus slope at the anchor, squared
        return (3.0 - beta) / 2.0, (beta - 1.0) / 2.0

    def forward_map(self, t, pts):
        """Material (ED) points -> spatial points at phase t; (n, 3) mm."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        R = np.hypot(x, y)
        sig = self.sigma(z)
        c_loc = float(self.c_table[t]) * sig * sig
        r_a, R_a = self._anchor(sig, c_loc)
        ga, gc = self._pool_coeffs(t)
        p = np.minimum(R / R_a, 1.0)
        r = np.where(
            R >= R_a,
            np.sqrt(np.maximum(R * R - c_loc * self._rho(R), 0.0)),
            r_a * p * (ga + gc * p * p),
        )
        scale = np.where(R > 1e-12, r / np.maximum(R, 1e-12), ga * r_a / R_a)
        return np.stack([x * scale, y * scale, z], axis=1)

    def inverse_map(self, t, pts):
        """Spatial points at phase t -> material (ED) points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        rr = np.hypot(x, y)
        sig = self.sigma(z)
        c_loc = float(self.c_table[t]) * sig * sig
        r_a, R_a = self._anchor(sig, c_loc)
        ga, _ = self._pool_coeffs(t)
        R = self._invert_radius(t, rr, c_loc, r_a, R_a)
        scale = np.where(rr > 1e-12, R / np.maximum(rr, 1e-12), R_a / (ga * r_a))
        return np.stack([x * scale, y * scale, z], axis=1)

    def _anchor(self, sig, c_loc):
        R_a = _POOL_ANCHOR * self.cfg.r_in * sig
        return np.sqrt(R_a * R_a - c_loc), R_a

    def _invert_radius(self, t, rr, c_loc, r_a, R_a):
        shelf_sp = np.sqrt(self.cfg.shelf_radius**2 - c_loc)  # spatial shelf radius
        R = np.zeros_like(rr)
        pool = rr <= r_a
        if np.any(pool):
            # monotone cubic g(p) = a p + c p^3 = rr/r_a, p in [0, 1]
            ga, gc = self._pool_coeffs(t)
            q = rr[pool] / np.maximum(r_a if np.ndim(r_a) == 0 else r_a[pool], 1e-12)
            lo = np.zeros_like(q)
            hi = np.ones_like(q)
            for _ in range(64):
                mid = 0.5 * (lo + hi)
                g = mid * (ga + gc * mid * mid) - q
                lo = np.where(g < 0.0, mid, lo)
                hi = np.where(g < 0.0, hi, mid)
            R[pool] = 0.5 * (lo + hi) * (R_a if np.ndim(R_a) == 0 else R_a[pool])
        annulus = (rr > r_a) & (rr <= shelf_sp)
        R = np.where(annulus, np.sqrt(rr * rr + c_loc), R)
        beyond = rr >= self.cfg.taper_radius
        R = np.where(beyond, rr, R)
        band = ~(rr <= r_a) & ~annulus & ~beyond
        if np.any(band):
            # monotone bisection of g(R) = R^2 - c rho(R) - rr^2 on the taper band
            rb = rr[band]
            cb = c_loc[band] if np.ndim(c_loc) else np.full(rb.shape, c_loc)
            lo = np.full(rb.shape, self.cfg.shelf_radius)
            hi = np.full(rb.shape, self.cfg.taper_radius)
            for _ in range(64):
                mid = 0.5 * (lo + hi)
                g = mid * mid - cb * self._rho(mid) - rb * rb
                lo = np.where(g < 0.0, mid, lo)
                hi = np.where(g < 0.0, hi, mid)
            R[band] = 0.5 * (lo + hi)
        return R

    # -- derivatives -----------------------------------------------------
    def deformation_gradient(self, t, pts):
        """Analytic F = d phi / d X at material points; (n, 3, 3)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        R = np.hypot(x, y)
        sig = self.sigma(z)
        sig_z = self._sigma_dz(z)
        c_t = float(self.c_table[t])
        c_loc = c_t * sig * sig
        c_loc_z = 2.0 * c_t * sig * sig_z
        r_a, R_a = self._anchor(sig, c_loc)

        pool = R < R_a
        rho = self._rho(R)
        rho_d = self._rho_d(R)
        r_ann = np.sqrt(np.maximum(R * R - c_loc * rho, 1e-12))
        # annulus/taper branch partials
        rR_ann = (R - 0.5 * c_loc * rho_d) / r_ann
        rz_ann = -0.5 * c_loc_z * rho / r_ann
        # pool branch: r = r_a g(R/R_a) with the C^1 cubic g and z-dependent anchor
        ga, gc = self._pool_coeffs(t)
        R_a_z = _POOL_ANCHOR * self.cfg.r_in * sig_z
        r_a_z = (R_a * R_a_z - 0.5 * c_loc_z) / np.maximum(r_a, 1e-12)
        p = np.minimum(R / R_a, 1.0)
        g = p * (ga + gc * p * p)
        gp = ga + 3.0 * gc * p * p
        r_pool = r_a * g
        rR_pool = r_a * gp / R_a
        rz_pool = r_a_z * g - gp * p * R_a_z * (r_a / R_a)
        s_pool = ga * r_a / R_a  # R -> 0 limit of r/R
        s_pool_z = ga * (r_a_z * R_a - r_a * R_a_z) / (R_a * R_a)

        r = np.where(pool, r_pool, r_ann)
        r_R = np.where(pool, rR_pool, rR_ann)
        r_z = np.where(pool, rz_pool, rz_ann)

        Rsafe = np.maximum(R, 1e-12)
        s = np.where(R > 1e-12, r / Rsafe, s_pool)
        s_R = np.where(R > 1e-12, (r_R * Rsafe - r) / (Rsafe * Rsafe), 0.0)
        s_z = np.where(R > 1e-12, r_z / Rsafe, s_pool_z)

        n = pts.shape[0]
        F = np.zeros((n, 3, 3))
        F[:, 0, 0] = s + x * x * s_R / Rsafe
        F[:, 0, 1] = x * y * s_R / Rsafe
        F[:, 0, 2] = x * s_z
        F[:, 1, 0] = x * y * s_R / Rsafe
        F[:, 1, 1] = s + y * y * s_R / Rsafe
        F[:, 1, 2] = y * s_z
        F[:, 2, 2] = 1.0
        return F

    def analytic_strain(self, t, pts):
        """(E_RR, E_CC) at material points; errors off the myocardial annulus."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        R = np.hypot(pts[:, 0], pts[:, 1])
        sig = self.sigma(pts[:, 2])
        tol = 1e-9
        if np.any(R < sig * self.cfg.r_in - tol) or np.any(R > sig * self.cfg.r_out + tol):
            raise ConfigError("analytic strain is defined on the myocardial annulus only")
        c_loc = float(self.c_table[t]) * sig * sig
        ratio2 = R * R / (R * R - c_loc)  # (R/r)^2
        e_rr = 0.5 * (ratio2 - 1.0)
        e_cc = 0.5 * (1.0 / ratio2 - 1.0)
        return e_rr, e_cc

    # -- generation ------------------------------------------------------
    def texture(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        phase = pts @ self.tex_freqs.T + self.tex_phases
        return np.sin(phase).sum(axis=1) / np.sqrt(self.tex_freqs.shape[0])

    def _tissue_level(self, mat):
        """Piecewise tissue brightness at material points, blended over
        _EDGE_MM so boundary gradients stay finite on any grid."""
        x, y, z = mat[:, 0], mat[:, 1], mat[:, 2]
        R = np.hypot(x, y)
        sig = self.sigma(z)
        lv = _LEVELS
        f_in = _smoothstep5((R - self.cfg.r_in * sig) / _EDGE_MM + 0.5)
        f_out = _smoothstep5((R - self.cfg.r_out * sig) / _EDGE_MM + 0.5)
        level = lv["pool"] + (lv["myo"] - lv["pool"]) * f_in
        level += (lv["bg"] - level) * f_out
        if self.cfg.rv_enable:
            d = np.hypot(x + _RV_OFFSET * self.cfg.r_out * sig, y)
            f_rv = _smoothstep5((_RV_RADIUS * self.cfg.r_out * sig - d) / _EDGE_MM + 0.5)
            level += (lv["rv"] - level) * f_rv * f_out
        return level

    def intensity(self, t, pts):
        """Analytic image value at spatial points of phase t."""
        mat = self.inverse_map(t, np.atleast_2d(np.asarray(pts, dtype=np.float64)))
        return self._tissue_level(mat) + _TEX_AMP * self.texture(mat)

    def labels_at(self, t, pts):
        """Label codes at spatial points of phase t, from material geometry."""
        mat = self.inverse_map(t, np.atleast_2d(np.asarray(pts, dtype=np.float64)))
        x, y, z = mat[:, 0], mat[:, 1], mat[:, 2]
        R = np.hypot(x, y)
        sig = self.sigma(z)
        lab = np.zeros(mat.shape[0], dtype=np.uint8)
        lab[R < sig * self.cfg.r_in] = LabelMask.LV_POOL
        lab[(R >= sig * self.cfg.r_in) & (R <= sig * self.cfg.r_out)] = LabelMask.LV_MYO
        if self.cfg.rv_enable:
            dx = x - (-_RV_OFFSET * self.cfg.r_out) * sig
            rv = np.hypot(dx, y) < _RV_RADIUS * self.cfg.r_out * sig
            rv &= R > sig * self.cfg.r_out + 1.0
            lab[rv] = LabelMask.RV_POOL
        return lab


def _volume_grid(cfg: PhantomConfig):
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing
    origin = np.array(
        [-(nx - 1) * sx / 2.0, -(ny - 1) * sy / 2.0, -(nz - 1) * sz / 2.0]
    )
    return origin, np.eye(3)


def _grid_points(dims, spacing, origin, direction=None):
    nx, ny, nz = dims
    ii, jj, kk = np.meshgrid(
        np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
    )
    idx = np.stack(
        [ii.ravel(order="F"), jj.ravel(order="F"), kk.ravel(order="F")], axis=1
    ).astype(np.float64)
    xyz = idx * np.asarray(spacing)
    if direction is not None:
        xyz = xyz @ np.asarray(direction).T
    return xyz + np.asarray(origin)


def make_phantom(cfg: PhantomConfig | None = None):
    """Build the cine ViewSet (SAX + 4CH + 2CH) and its GroundTruth."""
    cfg = cfg or PhantomConfig()
    rng = np.random.default_rng(cfg.seed)
    tt = np.arange(cfg.phases, dtype=np.float64)
    c_table = cfg.c_max * np.sin(np.pi * tt / (cfg.phases - 1)) ** 2
    c_table[-1] = 0.0  # exact cycle closure against roundoff

    # band-limited texture: in-plane wavelengths 6-20 mm, through-plane 24-60 mm
    m = 24
    ang = rng.uniform(0.0, 2.0 * np.pi, size=m)
    lam_xy = rng.uniform(6.0, 20.0, size=m)
    lam_z = rng.uniform(24.0, 60.0, size=m) * rng.choice([-1.0, 1.0], size=m)
    freqs = np.stack(
        [
            2.0 * np.pi / lam_xy * np.cos(ang),
            2.0 * np.pi / lam_xy * np.sin(ang),
            2.0 * np.pi / lam_z,
        ],
        axis=1,
    )
    phases = rng.uniform(0.0, 2.0 * np.pi, size=m)

    origin, direction = _volume_grid(cfg)
    z_base = origin[2]
    z_apex = origin[2] + (cfg.dims[2] - 1) * cfg.spacing[2]
    gt = GroundTruth(
        cfg=cfg,
        c_table=c_table,
        z_base=z_base,
        z_apex=z_apex,
        tex_freqs=freqs,
        tex_phases=phases,
    )

    noise_rng = np.random.default_rng(cfg.seed + 1)

    def render(dims, spacing, origin3, direction3):
        pts = _grid_points(dims, spacing, origin3, direction3)
        frames = []
        for t in range(cfg.phases):
            vals = gt.intensity(t, pts)
            if cfg.noise_sigma > 0.0:
                vals = vals + noise_rng.normal(0.0, cfg.noise_sigma, size=vals.shape)
            vol = Volume3D(
                dims, spacing, origin3, direction3,
                np.asarray(vals, dtype=np.float32).reshape(dims, order="F"),
            )
            lab = gt.labels_at(t, pts).reshape(dims, order="F")
            frames.append((vol, LabelMask(dims, spacing, origin3, direction3, lab)))
        return frames

    ed, es = cfg.phases - 1, (cfg.phases - 1) // 2
    sax_frames = render(cfg.dims, cfg.spacing, origin, direction)
    sax = CineSeries(tuple(sax_frames), ed_index=ed, es_index=es)

    # long-axis planes through the LV axis: 4CH in the x-z plane, 2CH in y-z
    nu = int(round((cfg.dims[0] - 1) * cfg.spacing[0] / cfg.lax_spacing)) + 1
    nv = int(round((cfg.dims[2] - 1) * cfg.spacing[2] / cfg.lax_spacing)) + 1
    lax_dims = (nu, nv, 1)
    lax_spacing = (cfg.lax_spacing, cfg.lax_spacing, 1.0)
    dir_4ch = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    org_4ch = np.array([origin[0], 0.0, z_base])
    dir_2ch = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    org_2ch = np.array([0.0, origin[1], z_base])
    ch4 = CineSeries(tuple(render(lax_dims, lax_spacing, org_4ch, dir_4ch)), ed, es)
    ch2 = CineSeries(tuple(render(lax_dims, lax_spacing, org_2ch, dir_2ch)), ed, es)

    return ViewSet(sax=sax, ch4=ch4, ch2=ch2), gt


def inject_misalignment(sax: CineSeries, seed, max_shift):
    """Shift each slice (all time points alike) by uniform in-plane offsets."""
    from .align import SliceTranslations, apply_translations

    if max_shift < 0:
        raise ConfigError("max_shift must be non-negative")
    nz = sax.volume(0).dims[2]
    rng = np.random.default_rng(seed)
    shifts = rng.uniform(-max_shift, max_shift, size=(nz, 2))
    if max_shift == 0:
        return sax, np.zeros((nz, 2))
    trans = SliceTranslations(shifts)
    frames = tuple(
        (apply_translations(vol, trans), apply_translations(mask, trans))
        for vol, mask in sax.frames
    )
    return CineSeries(frames, sax.ed_index, sax.es_index), shifts


def decimate(obj, k: int):
    """Keep every k-th slice (0, k, 2k, ...) and scale spacing_z by k."""
    if k < 1:
        raise ConfigError("decimation factor must be >= 1")
    if k == 1:
        return obj
    nz = obj.dims[2]
    keep = np.arange(0, nz, k)
    if keep.size < 2:
        raise GeometryError(f"decimating {nz} slices by {k} leaves fewer than 2")
    dims = (obj.dims[0], obj.dims[1], int(keep.size))
    spacing = np.array([obj.spacing[0], obj.spacing[1], obj.spacing[2] * k])
    if isinstance(obj, LabelMask):
        return LabelMask(dims, spacing, obj.origin, obj.direction, obj.labels[:, :, keep])
    return Volume3D(dims, spacing, obj.origin, obj.direction, obj.data[:, :, keep])


def decimate_series(series: CineSeries, k: int) -> CineSeries:
    frames = tuple((decimate(v, k), decimate(m, k)) for v, m in series.frames)
    return CineSeries(frames, series.ed_index, series.es_index)


def ground_truth_record(gt: GroundTruth) -> dict:
    """JSON-ready record of the generation parameters."""
    rec = {
        "config": {
            "dims": list(gt.cfg.dims),
            "spacing": list(gt.cfg.spacing),
            "r_in": gt.cfg.r_in,
            "r_out": gt.cfg.r_out,
            "c_max": gt.cfg.c_max,
            "phases": gt.cfg.phases,
            "seed": gt.cfg.seed,
            "rv_enable": gt.cfg.rv_enable,
            "shelf_radius": gt.cfg.shelf_radius,
            "taper_radius": gt.cfg.taper_radius,
            "apex_scale": gt.cfg.apex_scale,
            "noise_sigma": gt.cfg.noise_sigma,
            "lax_spacing": gt.cfg.lax_spacing,
        },
        "c_table": [float(c) for c in gt.c_table],
        "z_base": gt.z_base,
        "z_apex": gt.z_apex,
    }
    if gt.injected_shifts is not None:
        rec["injected_shifts"] = [[float(s) for s in row] for row in gt.injected_shifts]
    return rec
