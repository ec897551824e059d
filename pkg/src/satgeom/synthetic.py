"""Procedural ground truth: synthetic DSMs and analytically exact cameras.

Everything here exists so the geometric pipeline can be verified without
real satellite data. The DSM generator is seeded and deterministic; the
affine camera is exactly representable as an RPC (linear numerators, unit
denominators), so its closed form is an independent oracle for projection;
and `render_depth` recovers slant-range depth by an exhaustive ray march,
independent of the fixed-point intersection used by the supervision path.

Affine view convention: `azimuth_deg` is the horizontal direction of the
sensor from the scene, in degrees counterclockwise from local east. A point
raised by 1 m moves by tan(off_nadir)/gsd pixels along that direction in
image space (azimuth 0 shifts samp, azimuth 90 shifts -line).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import GeodeticPoint, LocalFrame
from .parallel import thread_map
from .rasters import DepthMap, DsmGrid
from .rpc import LOC_OK, RpcModel, localize_batch, _poly20, denominator_min

_VALIDATE_TOL_M = 1e-6   # ray-interpolation validation threshold


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Deterministic recipe for a procedural DSM."""

    cols: int = 256
    rows: int = 256
    cell_size: float = 1.0
    ground_alt: float = 20.0
    building_count: int = 20
    building_height_range: tuple = (10.0, 30.0)
    terrain: str = "flat"            # "flat" | "sinusoidal"
    terrain_amplitude: float = 0.0
    terrain_period: float = 100.0
    seed: int = 0
    origin_lon: float = -115.0
    origin_lat: float = 36.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be > 0")
        lo, hi = self.building_height_range
        if lo < 0 or hi < lo:
            raise ValueError("building height range must be ordered and non-negative")
        if self.terrain not in ("flat", "sinusoidal"):
            raise ValueError(f"unknown terrain mode {self.terrain!r}")
        if self.terrain == "sinusoidal" and self.terrain_period <= 0:
            raise ValueError("terrain_period must be > 0")

    @property
    def max_terrain_slope(self) -> float:
        """Analytic bound on |grad z| of the terrain base (buildings excluded)."""
        if self.terrain == "flat":
            return 0.0
        return 2.0 * math.pi * self.terrain_amplitude / self.terrain_period


@dataclass(frozen=True)
class SyntheticView:
    """Affine viewing geometry for one synthetic image."""

    off_nadir_deg: float = 0.0
    azimuth_deg: float = 0.0
    gsd: float = 0.5
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not 0.0 <= self.off_nadir_deg < 45.0:
            raise ValueError("off_nadir_deg must be in [0, 45)")
        if self.gsd <= 0:
            raise ValueError("gsd must be > 0")

    @property
    def parallax(self) -> tuple[float, float]:
        """Horizontal image-plane shift (east, north) per meter of altitude."""
        t = math.tan(math.radians(self.off_nadir_deg))
        az = math.radians(self.azimuth_deg)
        return t * math.cos(az), t * math.sin(az)


def make_dsm(spec: SyntheticSceneSpec) -> DsmGrid:
    """Terrain base plus flat-roofed axis-aligned box buildings; all cells valid."""
    rng = np.random.default_rng(spec.seed)
    # build bottom-up (row index = cells north of origin), flip at the end
    east = np.arange(spec.cols) * spec.cell_size
    north = np.arange(spec.rows) * spec.cell_size
    if spec.terrain == "sinusoidal":
        w = 2.0 * math.pi / spec.terrain_period
        z = spec.ground_alt + spec.terrain_amplitude * np.outer(
            np.sin(w * north), np.sin(w * east)
        )
    else:
        z = np.full((spec.rows, spec.cols), spec.ground_alt, dtype=np.float64)

    lo, hi = spec.building_height_range
    max_side = max(6, min(spec.cols, spec.rows) // 8)
    for _ in range(spec.building_count):
        se = int(rng.integers(4, max_side + 1))
        sn = int(rng.integers(4, max_side + 1))
        j0 = int(rng.integers(0, max(spec.cols - se, 1)))
        k0 = int(rng.integers(0, max(spec.rows - sn, 1)))
        bh = float(rng.uniform(lo, hi))
        roof = z[k0 + sn // 2, j0 + se // 2] + bh
        patch = z[k0:k0 + sn, j0:j0 + se]
        np.maximum(patch, roof, out=patch)

    return DsmGrid(z[::-1, :], spec.origin_lon, spec.origin_lat, spec.cell_size)


def scene_frame(dsm: DsmGrid) -> LocalFrame:
    """Local metric frame anchored at the DSM center (the scene frame)."""
    c = dsm.center()
    return LocalFrame(c.lon, c.lat)


class AffineCamera:
    """Closed-form affine projector; the independent oracle for make_affine_rpc.

    line/samp are affine in local (east, north, up): a parallel projection
    onto the ground plane followed by the pixel grid, with elevated points
    shifted by the view parallax.
    """

    def __init__(self, view: SyntheticView, frame: LocalFrame):
        self.view = view
        self.frame = frame
        self.k_east, self.k_north = view.parallax

    def project(self, lon, lat, alt):
        v, f = self.view, self.frame
        east = (np.asarray(lon, dtype=float) - f.origin_lon) * f.meters_per_deg_lon
        north = (np.asarray(lat, dtype=float) - f.origin_lat) * f.meters_per_deg_lat
        up = np.asarray(alt, dtype=float)
        x = east + up * self.k_east
        y = north + up * self.k_north
        samp = x / v.gsd + (v.width - 1) / 2.0
        line = (v.height - 1) / 2.0 - y / v.gsd
        return line, samp


def make_affine_rpc(view: SyntheticView, frame: LocalFrame, alt_bounds) -> RpcModel:
    """Exact RPC form of the affine camera (unit denominators, linear numerators).

    Normalization offsets/scales are chosen so the image footprint over the
    altitude range maps into the unit cube.
    """
    alt_lo, alt_hi = float(alt_bounds[0]), float(alt_bounds[1])
    if not alt_hi >= alt_lo:
        raise ValueError("alt_bounds must be ordered")
    k_e, k_n = view.parallax
    alt_reach = max(abs(alt_lo), abs(alt_hi))

    lat_off, lon_off = frame.origin_lat, frame.origin_lon
    height_off = 0.5 * (alt_lo + alt_hi)
    height_scale = max(0.5 * (alt_hi - alt_lo), 1.0)
    half_e = 0.5 * view.width * view.gsd + abs(k_e) * alt_reach + 1.0
    half_n = 0.5 * view.height * view.gsd + abs(k_n) * alt_reach + 1.0
    lon_scale = half_e / frame.meters_per_deg_lon
    lat_scale = half_n / frame.meters_per_deg_lat
    line_off = (view.height - 1) / 2.0
    samp_off = (view.width - 1) / 2.0
    line_scale = max(line_off, 1.0)
    samp_scale = max(samp_off, 1.0)

    # numerators in the normalized domain: samp_n = c0 + cL*L + cP*P + cH*H
    samp_num = np.zeros(20)
    samp_num[0] = (height_off * k_e / view.gsd) / samp_scale
    samp_num[1] = lon_scale * frame.meters_per_deg_lon / (view.gsd * samp_scale)
    samp_num[3] = height_scale * k_e / (view.gsd * samp_scale)
    line_num = np.zeros(20)
    line_num[0] = -(height_off * k_n / view.gsd) / line_scale
    line_num[2] = -lat_scale * frame.meters_per_deg_lat / (view.gsd * line_scale)
    line_num[3] = -height_scale * k_n / (view.gsd * line_scale)
    unit_den = np.zeros(20)
    unit_den[0] = 1.0

    return RpcModel(
        line_off=line_off, samp_off=samp_off,
        lat_off=lat_off, lon_off=lon_off, height_off=height_off,
        line_scale=line_scale, samp_scale=samp_scale,
        lat_scale=lat_scale, lon_scale=lon_scale, height_scale=height_scale,
        line_num=line_num, line_den=unit_den.copy(),
        samp_num=samp_num, samp_den=unit_den.copy(),
    )


class PerspectiveCamera:
    """Distant pinhole looking at the scene center; exactly rational in geo
    coordinates, so fitting a cubic RPC to it recovers it to machine precision."""

    def __init__(self, view: SyntheticView, frame: LocalFrame, look_alt: float,
                 distance: float = 7.0e5):
        self.view = view
        self.frame = frame
        theta = math.radians(view.off_nadir_deg)
        az = math.radians(view.azimuth_deg)
        d = np.array([
            math.sin(theta) * math.cos(az),
            math.sin(theta) * math.sin(az),
            math.cos(theta),
        ])
        self.center = np.array([0.0, 0.0, look_alt]) + distance * d
        fwd = -d
        north = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, north)
        right /= np.linalg.norm(right) if np.linalg.norm(right) > 0 else 1.0
        if np.linalg.norm(np.cross(fwd, north)) == 0:  # exactly horizontal view
            right = np.array([1.0, 0.0, 0.0])
        down = np.cross(fwd, right)
        self.basis = np.stack([right, down, fwd])  # rows
        self.focal_px = distance / view.gsd

    def project(self, lon, lat, alt):
        f = self.frame
        east = (np.asarray(lon, dtype=float) - f.origin_lon) * f.meters_per_deg_lon
        north = (np.asarray(lat, dtype=float) - f.origin_lat) * f.meters_per_deg_lat
        up = np.asarray(alt, dtype=float)
        vx = east - self.center[0]
        vy = north - self.center[1]
        vz = up - self.center[2]
        r = self.basis[0, 0] * vx + self.basis[0, 1] * vy + self.basis[0, 2] * vz
        d = self.basis[1, 0] * vx + self.basis[1, 1] * vy + self.basis[1, 2] * vz
        w = self.basis[2, 0] * vx + self.basis[2, 1] * vy + self.basis[2, 2] * vz
        samp = (self.view.width - 1) / 2.0 + self.focal_px * r / w
        line = (self.view.height - 1) / 2.0 + self.focal_px * d / w
        return line, samp


def _terms20(P, L, H):
    """Stack of the 20 RPC00B basis terms, shape (n, 20)."""
    one = np.ones_like(P)
    return np.stack([
        one, L, P, H,
        L * P, L * H, P * H,
        L * L, P * P, H * H,
        P * L * H,
        L**3, L * P * P, L * H * H, L * L * P,
        P**3, P * H * H, L * L * H, P * P * H,
        H**3,
    ], axis=-1)


def fit_rpc(project_fn, *, lat_off, lat_scale, lon_off, lon_scale,
            height_off, height_scale, line_off, line_scale, samp_off, samp_scale,
            grid_n: int = 9) -> RpcModel:
    """Least-squares fit of a 78-coefficient rational model to a projector.

    `project_fn(lon, lat, alt) -> (line, samp)` is sampled on a grid_n^3
    lattice over the normalized cube; each channel solves the linearized
    rational system N(t) - target * (D(t) - 1) = target for the numerator and
    the 19 free denominator coefficients.
    """
    g = np.linspace(-1.0, 1.0, grid_n)
    P, L, H = (a.ravel() for a in np.meshgrid(g, g, g, indexing="ij"))
    lon = lon_off + L * lon_scale
    lat = lat_off + P * lat_scale
    alt = height_off + H * height_scale
    line, samp = project_fn(lon, lat, alt)
    T = _terms20(P, L, H)

    def solve(target):
        t = np.asarray(target, dtype=float).ravel()
        A = np.hstack([T, -t[:, None] * T[:, 1:]])
        x, *_ = np.linalg.lstsq(A, t, rcond=None)
        num = x[:20]
        den = np.concatenate([[1.0], x[20:]])
        return num, den

    line_num, line_den = solve((line - line_off) / line_scale)
    samp_num, samp_den = solve((samp - samp_off) / samp_scale)
    return RpcModel(
        line_off=line_off, samp_off=samp_off,
        lat_off=lat_off, lon_off=lon_off, height_off=height_off,
        line_scale=line_scale, samp_scale=samp_scale,
        lat_scale=lat_scale, lon_scale=lon_scale, height_scale=height_scale,
        line_num=line_num, line_den=line_den,
        samp_num=samp_num, samp_den=samp_den,
    )


def make_fitted_rpc(view: SyntheticView, frame: LocalFrame, alt_bounds,
                    distance: float = 7.0e5) -> RpcModel:
    """General RPC (nonzero denominators) fitted to a distant perspective camera."""
    affine = make_affine_rpc(view, frame, alt_bounds)  # reuse its normalization
    cam = PerspectiveCamera(view, frame, look_alt=affine.height_off, distance=distance)
    model = fit_rpc(
        cam.project,
        lat_off=affine.lat_off, lat_scale=affine.lat_scale,
        lon_off=affine.lon_off, lon_scale=affine.lon_scale,
        height_off=affine.height_off, height_scale=affine.height_scale,
        line_off=affine.line_off, line_scale=affine.line_scale,
        samp_off=affine.samp_off, samp_scale=affine.samp_scale,
    )
    if denominator_min(model) <= 0.5:
        raise RuntimeError("fitted RPC denominator not safely positive on the cube")
    return model


# --- exhaustive ray-march depth rendering -----------------------------------

class _RayTable:
    """Per-pixel ray geometry: localize() evaluated on an altitude knot grid,
    linearly interpolated in between. Interpolation accuracy is validated
    against direct localize() at knot midpoints; affine and perspective-style
    models are exactly linear in altitude, so validation passes at once."""

    def __init__(self, model, lines, samps, alt_lo, alt_hi, spacing=1.0):
        self.model = model
        self.lines = lines
        self.samps = samps
        n_seg = max(int(math.ceil((alt_hi - alt_lo) / spacing)), 1)
        self.knots = np.linspace(alt_lo, alt_hi, n_seg + 1)
        n_px = lines.size
        self.lon = np.empty((n_px, n_seg + 1))
        self.lat = np.empty((n_px, n_seg + 1))
        self.ok = np.ones(n_px, dtype=bool)
        init = None
        for k in range(n_seg, -1, -1):  # top-down so warm starts track the ray
            res = localize_batch(model, lines, samps, self.knots[k], init_normalized=init)
            self.lon[:, k] = res.lon
            self.lat[:, k] = res.lat
            self.ok &= res.status == LOC_OK
            init = ((res.lat - model.lat_off) / model.lat_scale,
                    (res.lon - model.lon_off) / model.lon_scale)

    def positions(self, rows, alts):
        """Interpolated (lon, lat) for pixel indices `rows`; alts broadcasts
        against rows along the first axis (shape (n,) or (n, m))."""
        a = np.clip(alts, self.knots[0], self.knots[-1])
        step = self.knots[1] - self.knots[0] if len(self.knots) > 1 else 1.0
        fi = (a - self.knots[0]) / step
        k0 = np.clip(fi.astype(np.intp), 0, max(len(self.knots) - 2, 0))
        t = fi - k0
        r = rows if np.ndim(a) == 1 else np.asarray(rows)[:, None]
        lon = self.lon[r, k0] * (1 - t) + self.lon[r, np.minimum(k0 + 1, len(self.knots) - 1)] * t
        lat = self.lat[r, k0] * (1 - t) + self.lat[r, np.minimum(k0 + 1, len(self.knots) - 1)] * t
        return lon, lat

    def validate(self, frame: LocalFrame, max_pixels: int = 256):
        """Max interpolation error (meters) at knot midpoints on a pixel subsample."""
        if len(self.knots) < 2:
            return 0.0
        n_px = self.lon.shape[0]
        sel = np.unique(np.linspace(0, n_px - 1, min(max_pixels, n_px)).astype(np.intp))
        sel = sel[self.ok[sel]]
        if sel.size == 0:
            return 0.0
        mids = 0.5 * (self.knots[:-1] + self.knots[1:])
        mids = mids[:: max(len(mids) // 8, 1)]
        worst = 0.0
        for a in mids:
            lon_i, lat_i = self.positions(sel, np.full(sel.size, a))
            res = localize_batch(self.model, self.lines[sel], self.samps[sel], a)
            err = np.hypot(
                (lon_i - res.lon) * frame.meters_per_deg_lon,
                (lat_i - res.lat) * frame.meters_per_deg_lat,
            )
            worst = max(worst, float(err[res.status == LOC_OK].max(initial=0.0)))
        return worst


def render_depth(
    model: RpcModel,
    dsm: DsmGrid,
    frame: LocalFrame,
    z_ref: float,
    width: int,
    height: int,
    *,
    march_step: float = 0.01,
    refine_tol: float = 1e-4,
    n_threads: int = 1,
    view_id: str = "",
) -> DepthMap:
    """Slant-range depth by exhaustive ray march over altitude.

    For every pixel the altitude is marched downward in `march_step`
    increments from just above the DSM maximum (no intersection can exist
    higher, since the bilinear surface never exceeds the valid maximum);
    the first sign change of (ray altitude - surface altitude) brackets the
    intersection, which bisection then refines to `refine_tol`. Pixels whose
    rays leave the DSM footprint (or meet nodata) before intersecting are
    invalid. This path is the independent oracle for the fixed-point
    intersection used by the supervision builder.
    """
    if not z_ref > dsm.valid_max:
        raise ValueError(f"z_ref ({z_ref}) must be above the DSM maximum ({dsm.valid_max})")
    a_hi = dsm.valid_max + march_step
    a_lo = dsm.valid_min - march_step
    n_levels = int(math.ceil((a_hi - a_lo) / march_step)) + 1
    levels = a_hi - np.arange(n_levels) * march_step

    def render_rows(r0, r1):
        ln, sp = np.meshgrid(
            np.arange(r0, r1, dtype=float), np.arange(width, dtype=float), indexing="ij"
        )
        lines, samps = ln.ravel(), sp.ravel()
        n_px = lines.size
        table = _RayTable(model, lines, samps, a_lo, max(a_hi, a_lo + march_step))
        if table.validate(frame) > _VALIDATE_TOL_M:
            raise RuntimeError(
                "ray interpolation error exceeds 1e-6 m; model rays are not "
                "altitude-linear at knot resolution"
            )

        depth = np.full(n_px, np.nan)
        chunk = max(int(4e6) // max(n_px, 1), 8)  # levels per pass, bounds memory
        above = np.full(n_px, np.nan)   # bracket altitude with f > 0
        below = np.full(n_px, np.nan)   # bracket altitude with f <= 0
        alive = table.ok.copy()
        prev_level = np.full(n_px, levels[0])
        for c0 in range(0, n_levels, chunk):
            if not alive.any():
                break
            sub = levels[c0:c0 + chunk]
            idx = np.nonzero(alive)[0]
            lon, lat = table.positions(idx, np.broadcast_to(sub, (idx.size, sub.size)))
            z = _bilinear2d(dsm, lon, lat)
            f = sub[None, :] - z
            is_below = f <= 0
            is_nan = np.isnan(f)
            first_below = np.where(is_below.any(axis=1), is_below.argmax(axis=1), sub.size)
            first_nan = np.where(is_nan.any(axis=1), is_nan.argmax(axis=1), sub.size)
            crossed = (first_below < sub.size) & (first_below <= first_nan)
            died = first_nan < first_below
            ic = idx[crossed]
            fb = first_below[crossed]
            below[ic] = sub[fb]
            above[ic] = np.where(fb > 0, sub[np.maximum(fb - 1, 0)], prev_level[ic])
            alive[idx[crossed | died]] = False
            prev_level[idx] = sub[-1]
        # pixels that ran out of levels without crossing stay invalid

        found = np.isfinite(below)
        fi = np.nonzero(found)[0]
        if fi.size:
            lo = below[fi]           # lower altitude, f <= 0
            hi = above[fi]           # higher altitude, f > 0
            steps = max(int(math.ceil(math.log2(max(march_step / refine_tol, 1.0)))) + 1, 1)
            for _ in range(steps):
                mid = 0.5 * (lo + hi)
                lon, lat = table.positions(fi, mid)
                z = np.asarray(dsm.sample_bilinear(lon, lat))
                f = mid - z
                bad = np.isnan(f)
                take_lo = (f <= 0) & ~bad
                lo = np.where(take_lo, mid, lo)
                hi = np.where(~take_lo & ~bad, mid, hi)
                if bad.any():  # nodata inside the bracket: drop those pixels
                    keep = ~bad
                    fi, lo, hi = fi[keep], lo[keep], hi[keep]
                    if fi.size == 0:
                        break
            if fi.size:
                a_star = 0.5 * (lo + hi)
                lon_h, lat_h = table.positions(fi, a_star)
                near = localize_batch(model, lines[fi], samps[fi], z_ref)
                ok = near.status == LOC_OK
                e_h = (lon_h - frame.origin_lon) * frame.meters_per_deg_lon
                n_h = (lat_h - frame.origin_lat) * frame.meters_per_deg_lat
                e_n = (near.lon - frame.origin_lon) * frame.meters_per_deg_lon
                n_n = (near.lat - frame.origin_lat) * frame.meters_per_deg_lat
                d = np.sqrt((e_h - e_n) ** 2 + (n_h - n_n) ** 2 + (a_star - z_ref) ** 2)
                depth[fi] = np.where(ok, d, np.nan)
        return depth.reshape(r1 - r0, width)

    blocks = thread_map(render_rows, height, n_threads)
    return DepthMap(np.vstack(blocks), view_id=view_id)


def _bilinear2d(dsm: DsmGrid, lon, lat):
    """sample_bilinear for already-2D coordinate arrays."""
    flat = dsm.sample_bilinear(lon.ravel(), lat.ravel())
    return np.asarray(flat).reshape(lon.shape)
