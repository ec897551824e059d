"""Slant-range pseudo-depth construction.

Depth for an RPC view has no perspective camera center to measure from, so
it is defined against a horizontal near-plane placed a fixed margin above
the scene: for each pixel, depth is the 3D distance from the pixel ray's
near-plane point to its surface intersection, found by fixed-point
iteration against the ground-truth DSM (alternate localizing the pixel at
the current altitude and reading the surface height there until the
altitude stabilizes).

The iteration contracts when terrain_slope * tan(off_nadir) < 1; at facade
discontinuities it may oscillate, and those pixels are masked rather than
guessed. The exhaustive ray-march renderer in `synthetic` is the
independent oracle for this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    DenominatorNearZero,
    EmptyOutput,
    NonPositiveMargin,
    RayExitsFootprint,
)
from .geometry import GeodeticPoint, LocalFrame
from .parallel import thread_map
from .rasters import DepthMap, DsmGrid
from .rpc import LOC_DEN_NEAR_ZERO, LOC_OK, RpcModel, localize, localize_batch

# per-pixel status codes for the batch fixed point
HIT_OK = 0
HIT_NOT_CONVERGED = 1
HIT_EXITS_FOOTPRINT = 2
HIT_LOCALIZE_FAILED = 3


@dataclass(frozen=True)
class NearPlane:
    """Horizontal depth-origin plane at z_ref = z_max + delta."""

    z_ref: float
    z_max: float
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise NonPositiveMargin(f"near-plane margin must be > 0, got {self.delta}")


def near_plane(z_max: float, delta: float = 50.0) -> NearPlane:
    if not np.isfinite(z_max):
        raise ValueError("z_max must be finite")
    if not delta > 0:
        raise NonPositiveMargin(f"near-plane margin must be > 0, got {delta}")
    return NearPlane(z_ref=float(z_max) + float(delta), z_max=float(z_max), delta=float(delta))


class SurfaceHit(NamedTuple):
    """Outcome of the ray/DSM fixed-point intersection for one pixel."""

    point: GeodeticPoint
    iterations: int
    converged: bool
    residual: float


@dataclass(frozen=True)
class PseudoDepthResult:
    depth: float
    near_point: GeodeticPoint
    hit: SurfaceHit


class _FixedPointBatch(NamedTuple):
    lon: np.ndarray
    lat: np.ndarray
    alt: np.ndarray
    status: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray


def _intersect_batch(
    model: RpcModel,
    lines: np.ndarray,
    samps: np.ndarray,
    dsm: DsmGrid,
    init_alt: float,
    tol: float,
    max_iter: int,
    damping: float | None = None,
) -> _FixedPointBatch:
    """Vectorized fixed point a_{k+1} = surface(localize(c, a_k)); never raises."""
    n = lines.size
    a = np.full(n, float(init_alt))
    status = np.full(n, HIT_NOT_CONVERGED, dtype=np.int8)
    iterations = np.zeros(n, dtype=np.int32)
    residual = np.full(n, np.inf)
    active = np.ones(n, dtype=bool)
    warm_P = np.zeros(n)
    warm_L = np.zeros(n)
    have_warm = False

    for it in range(1, max_iter + 1):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        init = (warm_P[idx], warm_L[idx]) if have_warm else None
        loc = localize_batch(model, lines[idx], samps[idx], a[idx], init_normalized=init)
        loc_bad = loc.status != LOC_OK
        if loc_bad.any():
            status[idx[loc_bad]] = HIT_LOCALIZE_FAILED
        warm_P[idx] = (loc.lat - model.lat_off) / model.lat_scale
        warm_L[idx] = (loc.lon - model.lon_off) / model.lon_scale
        have_warm = True

        z = np.asarray(dsm.sample_bilinear(loc.lon, loc.lat))
        exits = np.isnan(z) & ~loc_bad
        if exits.any():
            status[idx[exits]] = HIT_EXITS_FOOTPRINT

        step = z - a[idx]
        if damping is not None:
            step = damping * step
        a_new = a[idx] + step
        dmag = np.abs(step)
        ok_iter = ~loc_bad & ~exits
        a[idx[ok_iter]] = a_new[ok_iter]
        residual[idx[ok_iter]] = dmag[ok_iter]
        iterations[idx[ok_iter]] = it
        converged = ok_iter & (dmag < tol)
        status[idx[converged]] = HIT_OK
        active[idx] = ok_iter & ~converged

    # final on-ray positions at the settled altitudes
    loc = localize_batch(model, lines, samps, a, init_normalized=(warm_P, warm_L))
    fb = loc.status != LOC_OK
    if fb.any():
        bad = fb & (status == HIT_OK)
        status[bad] = HIT_LOCALIZE_FAILED
    return _FixedPointBatch(loc.lon, loc.lat, a, status, iterations, residual)


def intersect_surface(
    model: RpcModel,
    c,
    dsm: DsmGrid,
    init_alt: float,
    tol: float = 1e-4,
    max_iter: int = 100,
    damping: float | None = None,
) -> SurfaceHit:
    """Ray/DSM intersection for a single pixel.

    Non-convergence is reported in the result (converged=False), not raised;
    RayExitsFootprint is raised when an iterate lands on nodata or outside
    the grid; localize failures propagate.
    """
    r = _intersect_batch(
        model,
        np.atleast_1d(np.asarray(c.line, dtype=float)),
        np.atleast_1d(np.asarray(c.samp, dtype=float)),
        dsm, init_alt, tol, max_iter, damping,
    )
    st = int(r.status[0])
    if st == HIT_EXITS_FOOTPRINT:
        raise RayExitsFootprint(
            f"pixel (line={float(np.asarray(c.line)):g}, samp={float(np.asarray(c.samp)):g}): "
            "iterate left the DSM footprint"
        )
    if st == HIT_LOCALIZE_FAILED:
        raise DenominatorNearZero("localize failed during surface intersection")
    point = GeodeticPoint(float(r.lon[0]), float(r.lat[0]), float(r.alt[0]))
    return SurfaceHit(
        point=point,
        iterations=int(r.iterations[0]),
        converged=(st == HIT_OK),
        residual=float(r.residual[0]),
    )


def pseudo_depth_at(
    model: RpcModel,
    c,
    dsm: DsmGrid,
    plane: NearPlane,
    frame: LocalFrame,
    *,
    tol: float = 1e-4,
    max_iter: int = 100,
    damping: float | None = None,
) -> PseudoDepthResult:
    """Slant-range depth of one pixel: distance from the near-plane point to
    the surface hit, measured in the local frame."""
    if not plane.z_ref > dsm.valid_max:
        raise ValueError(
            f"near-plane z_ref ({plane.z_ref}) must be above the DSM maximum "
            f"({dsm.valid_max})"
        )
    near = localize(model, c, plane.z_ref)
    init_alt = 0.5 * (dsm.valid_min + dsm.valid_max)
    hit = intersect_surface(model, c, dsm, init_alt, tol=tol, max_iter=max_iter,
                            damping=damping)
    depth = float(frame.distance(hit.point, near))
    return PseudoDepthResult(depth=depth, near_point=near, hit=hit)


@dataclass
class PseudoDepthBuild:
    """A per-view pseudo-depth map plus the statistics its sidecar records."""

    depth_map: DepthMap
    stats: dict


def build_pseudo_depth_map(
    model: RpcModel,
    dsm: DsmGrid,
    plane: NearPlane,
    frame: LocalFrame,
    width: int,
    height: int,
    *,
    tol: float = 1e-4,
    max_iter: int = 100,
    damping: float | None = None,
    n_threads: int = 1,
    view_id: str = "",
    min_valid_fraction: float = 0.01,
) -> PseudoDepthBuild:
    """Per-pixel pseudo-depth over a full image.

    Non-converged and footprint-exiting pixels are masked invalid. Raises
    EmptyOutput when fewer than `min_valid_fraction` of pixels survive.
    """
    if not plane.z_ref > dsm.valid_max:
        raise ValueError(
            f"near-plane z_ref ({plane.z_ref}) must be above the DSM maximum "
            f"({dsm.valid_max})"
        )
    init_alt = 0.5 * (dsm.valid_min + dsm.valid_max)

    def build_rows(r0, r1):
        ln, sp = np.meshgrid(
            np.arange(r0, r1, dtype=float), np.arange(width, dtype=float), indexing="ij"
        )
        lines, samps = ln.ravel(), sp.ravel()
        fp = _intersect_batch(model, lines, samps, dsm, init_alt, tol, max_iter, damping)
        near = localize_batch(model, lines, samps, plane.z_ref)
        ok = (fp.status == HIT_OK) & (near.status == LOC_OK)

        de = (fp.lon - near.lon) * frame.meters_per_deg_lon
        dn = (fp.lat - near.lat) * frame.meters_per_deg_lat
        du = fp.alt - plane.z_ref
        depth = np.sqrt(de * de + dn * dn + du * du)
        depth[~ok] = np.nan

        counts = np.array(
            [int(np.sum(fp.status == s)) for s in
             (HIT_OK, HIT_NOT_CONVERGED, HIT_EXITS_FOOTPRINT, HIT_LOCALIZE_FAILED)],
            dtype=np.int64,
        )
        it_sum = int(fp.iterations[ok].sum()) if ok.any() else 0
        it_max = int(fp.iterations[ok].max()) if ok.any() else 0
        return depth.reshape(r1 - r0, width), counts, it_sum, it_max

    results = thread_map(build_rows, height, n_threads)
    blocks = [r[0] for r in results]
    counts = np.sum([r[1] for r in results], axis=0)
    iter_sum = sum(r[2] for r in results)
    iter_max = max(r[3] for r in results)

    dm = DepthMap(np.vstack(blocks), view_id=view_id)
    n_valid = int(dm.valid_mask.sum())
    stats = {
        "z_ref": plane.z_ref,
        "z_max": plane.z_max,
        "delta": plane.delta,
        "valid_fraction": dm.valid_fraction,
        "pixels": int(width * height),
        "converged": int(counts[HIT_OK]),
        "not_converged": int(counts[HIT_NOT_CONVERGED]),
        "exited_footprint": int(counts[HIT_EXITS_FOOTPRINT]),
        "localize_failed": int(counts[HIT_LOCALIZE_FAILED]),
        "mean_iterations": (iter_sum / n_valid) if n_valid else 0.0,
        "max_iterations": iter_max,
    }
    if dm.valid_fraction < min_valid_fraction:
        raise EmptyOutput(
            f"pseudo-depth map for view {view_id!r}: only "
            f"{dm.valid_fraction:.2%} of pixels valid"
        )
    return PseudoDepthBuild(depth_map=dm, stats=stats)
