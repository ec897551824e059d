"""Rational Polynomial Camera model: parsing, projection, and inversion.

The ground-to-image map is the standard rational form

    line = line_off + line_scale * N_L(P, L, H) / D_L(P, L, H)
    samp = samp_off + samp_scale * N_S(P, L, H) / D_S(P, L, H)

where P, L, H are latitude, longitude and altitude normalized by the model
offsets/scales and N, D are 20-term cubic polynomials in the RPC00B/NITF
term order (see _poly20). There is no physical camera center; the imaging
ray of a pixel is the altitude-parametrized curve a -> localize(c, a).

Coordinate arguments may be scalars or numpy arrays; everything broadcasts.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import (
    DenominatorNearZero,
    MalformedNumber,
    MissingKey,
    NoConvergence,
    NonPositiveScale,
    NonUnitDenominator,
)
from .geometry import GeodeticPoint, ImageCoord

DEN_EPS = 1e-10          # |denominator| below this is treated as degenerate
_DIVERGE_BOUND = 4.0     # normalized units; beyond this the solve is declared lost

# status codes reported by the batch solver
LOC_OK = 0
LOC_NO_CONVERGENCE = 1
LOC_DEN_NEAR_ZERO = 2


@dataclass(frozen=True)
class RpcModel:
    """One view's RPC: 80 coefficients plus normalization offsets/scales.

    Coefficient arrays are stored read-only; instances are immutable and
    safe to share across threads.
    """

    line_off: float
    samp_off: float
    lat_off: float
    lon_off: float
    height_off: float
    line_scale: float
    samp_scale: float
    lat_scale: float
    lon_scale: float
    height_scale: float
    line_num: np.ndarray
    line_den: np.ndarray
    samp_num: np.ndarray
    samp_den: np.ndarray

    def __post_init__(self):
        for name in ("line_scale", "samp_scale", "lat_scale", "lon_scale", "height_scale"):
            v = float(getattr(self, name))
            if not v > 0:
                raise NonPositiveScale(name.upper(), v)
            object.__setattr__(self, name, v)
        for name in ("line_off", "samp_off", "lat_off", "lon_off", "height_off"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("line_num", "line_den", "samp_num", "samp_den"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != (20,):
                raise ValueError(f"{name} must have exactly 20 coefficients")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite coefficients")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("line_den", "samp_den"):
            first = getattr(self, name)[0]
            if first != 1.0:
                raise NonUnitDenominator(name.upper(), first)

    def __eq__(self, other):
        if not isinstance(other, RpcModel):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


def _poly20(c, P, L, H):
    """Evaluate a 20-term cubic in the RPC00B order.

    Term order: 1, L, P, H, LP, LH, PH, L2, P2, H2, PLH, L3, LP2, LH2,
    L2P, P3, PH2, L2H, P2H, H3.
    """
    PP, LL, HH = P * P, L * L, H * H
    out = c[0] + c[1] * L + c[2] * P + c[3] * H
    out += c[4] * L * P + c[5] * L * H + c[6] * P * H
    out += c[7] * LL + c[8] * PP + c[9] * HH
    out += c[10] * P * L * H
    out += c[11] * LL * L + c[12] * L * PP + c[13] * L * HH + c[14] * LL * P
    out += c[15] * PP * P + c[16] * P * HH + c[17] * LL * H + c[18] * PP * H
    out += c[19] * HH * H
    return out


def _project_normalized(model: RpcModel, P, L, H):
    """Rational evaluation on normalized coordinates.

    Returns (line_px, samp_px, den_bad) where den_bad marks points whose
    denominator magnitude fell below DEN_EPS (their outputs are NaN).
    """
    dl = _poly20(model.line_den, P, L, H)
    ds = _poly20(model.samp_den, P, L, H)
    den_bad = (np.abs(dl) < DEN_EPS) | (np.abs(ds) < DEN_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        line = model.line_off + model.line_scale * _poly20(model.line_num, P, L, H) / dl
        samp = model.samp_off + model.samp_scale * _poly20(model.samp_num, P, L, H) / ds
    if np.any(den_bad):
        line = np.where(den_bad, np.nan, line)
        samp = np.where(den_bad, np.nan, samp)
    return line, samp, den_bad


def normalize_geo(model: RpcModel, lon, lat, alt):
    """Geodetic coordinates -> normalized (P, L, H)."""
    P = (np.asarray(lat, dtype=float) - model.lat_off) / model.lat_scale
    L = (np.asarray(lon, dtype=float) - model.lon_off) / model.lon_scale
    H = (np.asarray(alt, dtype=float) - model.height_off) / model.height_scale
    return P, L, H


def project(model: RpcModel, p: GeodeticPoint) -> ImageCoord:
    """Ground-to-image projection. Raises DenominatorNearZero on degeneracy."""
    P, L, H = normalize_geo(model, p.lon, p.lat, p.alt)
    line, samp, den_bad = _project_normalized(model, P, L, H)
    if np.any(den_bad):
        raise DenominatorNearZero(
            "rational denominator below 1e-10; degenerate model or far extrapolation"
        )
    if np.ndim(line) == 0:
        return ImageCoord(float(line), float(samp))
    return ImageCoord(line, samp)


class LocalizeResult(NamedTuple):
    """Per-point outcome of the batch image-to-ground solve."""

    lon: np.ndarray
    lat: np.ndarray
    status: np.ndarray      # LOC_OK / LOC_NO_CONVERGENCE / LOC_DEN_NEAR_ZERO
    iterations: np.ndarray
    residual_px: np.ndarray


def localize_batch(
    model: RpcModel,
    line,
    samp,
    alt,
    *,
    tol_px: float = 1e-8,
    max_iter: int = 50,
    init_normalized=None,
) -> LocalizeResult:
    """Vectorized inverse projection at fixed altitude(s); never raises.

    Damped Newton on the normalized (lat, lon) pair with a central
    finite-difference Jacobian (step 1e-6 normalized units), initialized at
    the model offsets unless `init_normalized` = (P0, L0) is given. The step
    damping is halved whenever the full update would increase the pixel
    residual. Points whose iterates wander past 4 normalized units are
    reported as non-converged rather than extrapolated further.
    """
    line, samp, alt = np.broadcast_arrays(
        np.asarray(line, dtype=float),
        np.asarray(samp, dtype=float),
        np.asarray(alt, dtype=float),
    )
    shape = line.shape
    line = line.ravel()
    samp = samp.ravel()
    H = ((alt.ravel() - model.height_off) / model.height_scale).copy()

    n = line.size
    if init_normalized is None:
        P = np.zeros(n)
        L = np.zeros(n)
    else:
        P0, L0 = init_normalized
        P = np.broadcast_to(np.asarray(P0, dtype=float).ravel(), (n,)).copy()
        L = np.broadcast_to(np.asarray(L0, dtype=float).ravel(), (n,)).copy()

    status = np.full(n, LOC_NO_CONVERGENCE, dtype=np.int8)
    iterations = np.zeros(n, dtype=np.int32)
    h = 1e-6  # finite-difference step, normalized units

    def resid(Pv, Lv, Hv, line_t, samp_t):
        ln, sp, bad = _project_normalized(model, Pv, Lv, Hv)
        return ln - line_t, sp - samp_t, bad

    r1, r2, bad = resid(P, L, H, line, samp)
    rnorm = np.hypot(r1, r2)
    status[bad] = LOC_DEN_NEAR_ZERO
    status[~bad & (rnorm <= tol_px)] = LOC_OK
    active = status == LOC_NO_CONVERGENCE

    for it in range(1, max_iter + 1):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        Pa, La, Ha = P[idx], L[idx], H[idx]
        lt, st = line[idx], samp[idx]

        lp, sp_p, bp1 = _project_normalized(model, Pa + h, La, Ha)
        lm, sp_m, bp2 = _project_normalized(model, Pa - h, La, Ha)
        ll, ss_p, bl1 = _project_normalized(model, Pa, La + h, Ha)
        lr, ss_m, bl2 = _project_normalized(model, Pa, La - h, Ha)
        den_bad = bp1 | bp2 | bl1 | bl2
        j11 = (lp - lm) / (2 * h)   # d line / d P
        j12 = (ll - lr) / (2 * h)   # d line / d L
        j21 = (sp_p - sp_m) / (2 * h)
        j22 = (ss_p - ss_m) / (2 * h)

        det = j11 * j22 - j12 * j21
        sing = (np.abs(det) < 1e-300) | ~np.isfinite(det) | den_bad
        with np.errstate(divide="ignore", invalid="ignore"):
            dP = (j22 * r1[idx] - j12 * r2[idx]) / det
            dL = (-j21 * r1[idx] + j11 * r2[idx]) / det

        lam = np.ones(idx.size)
        Pn, Ln = Pa - dP, La - dL
        n1, n2, nbad = resid(Pn, Ln, Ha, lt, st)
        nnorm = np.hypot(n1, n2)
        for _ in range(30):
            worse = ~sing & ~nbad & (nnorm > rnorm[idx]) & (lam > 1e-8)
            if not worse.any():
                break
            lam = np.where(worse, lam * 0.5, lam)
            Pw, Lw = Pa - lam * dP, La - lam * dL
            w1, w2, wbad = resid(Pw, Lw, Ha, lt, st)
            wnorm = np.hypot(w1, w2)
            Pn = np.where(worse, Pw, Pn)
            Ln = np.where(worse, Lw, Ln)
            n1 = np.where(worse, w1, n1)
            n2 = np.where(worse, w2, n2)
            nbad = np.where(worse, wbad, nbad)
            nnorm = np.where(worse, wnorm, nnorm)

        P[idx], L[idx] = Pn, Ln
        r1[idx], r2[idx] = n1, n2
        rnorm[idx] = nnorm
        iterations[idx] = it

        done = idx[nnorm <= tol_px]
        status[done] = LOC_OK
        # points that wandered out of the meaningful domain stay non-converged
        lost = idx[(np.abs(Pn) > _DIVERGE_BOUND) | (np.abs(Ln) > _DIVERGE_BOUND)]
        status[lost] = LOC_NO_CONVERGENCE
        bad_now = idx[nbad | sing]
        status[bad_now] = LOC_DEN_NEAR_ZERO
        active = np.zeros(n, dtype=bool)
        active[idx] = status[idx] == LOC_NO_CONVERGENCE
        active[lost] = False

    lon = (model.lon_off + L * model.lon_scale).reshape(shape)
    lat = (model.lat_off + P * model.lat_scale).reshape(shape)
    return LocalizeResult(
        lon,
        lat,
        status.reshape(shape),
        iterations.reshape(shape),
        rnorm.reshape(shape),
    )


def localize(model: RpcModel, c: ImageCoord, alt, *, tol_px: float = 1e-8, max_iter: int = 50) -> GeodeticPoint:
    """Image-to-ground at a fixed altitude.

    Raises NoConvergence if any requested point fails to meet tol_px within
    max_iter iterations, DenominatorNearZero on rational degeneracy.
    """
    res = localize_batch(model, c.line, c.samp, alt, tol_px=tol_px, max_iter=max_iter)
    if np.any(res.status == LOC_DEN_NEAR_ZERO):
        raise DenominatorNearZero("denominator vanished while solving image-to-ground")
    if np.any(res.status != LOC_OK):
        failed = np.atleast_1d(res.status) != LOC_OK
        raise NoConvergence(
            int(np.atleast_1d(res.iterations)[failed].max()),
            float(np.atleast_1d(res.residual_px)[failed].max()),
        )
    alt_arr = np.broadcast_to(np.asarray(alt, dtype=float), np.shape(res.lon))
    if np.ndim(res.lon) == 0:
        return GeodeticPoint(float(res.lon), float(res.lat), float(alt_arr))
    return GeodeticPoint(res.lon, res.lat, alt_arr.copy())


def imaging_ray(model: RpcModel, c: ImageCoord, alt_top: float, alt_bottom: float):
    """Bracketing endpoints of a pixel's imaging ray.

    The ray itself is the altitude-parametrized curve a -> localize(c, a);
    this returns (localize(c, alt_top), localize(c, alt_bottom)).
    """
    if not alt_top > alt_bottom:
        raise ValueError(f"alt_top ({alt_top}) must be strictly above alt_bottom ({alt_bottom})")
    return localize(model, c, alt_top), localize(model, c, alt_bottom)


def denominator_min(model: RpcModel, n: int = 21) -> float:
    """Minimum of both denominators over the normalized cube [-1, 1]^3, sampled n^3."""
    g = np.linspace(-1.0, 1.0, n)
    P, L, H = np.meshgrid(g, g, g, indexing="ij")
    dl = _poly20(model.line_den, P, L, H)
    ds = _poly20(model.samp_den, P, L, H)
    return float(min(dl.min(), ds.min()))


# --- RPC00B text format ----------------------------------------------------

_SCALAR_KEYS = (
    ("LINE_OFF", "line_off", "pixels"),
    ("SAMP_OFF", "samp_off", "pixels"),
    ("LAT_OFF", "lat_off", "degrees"),
    ("LONG_OFF", "lon_off", "degrees"),
    ("HEIGHT_OFF", "height_off", "meters"),
    ("LINE_SCALE", "line_scale", "pixels"),
    ("SAMP_SCALE", "samp_scale", "pixels"),
    ("LAT_SCALE", "lat_scale", "degrees"),
    ("LONG_SCALE", "lon_scale", "degrees"),
    ("HEIGHT_SCALE", "height_scale", "meters"),
)
_COEFF_KEYS = (
    ("LINE_NUM_COEFF", "line_num"),
    ("LINE_DEN_COEFF", "line_den"),
    ("SAMP_NUM_COEFF", "samp_num"),
    ("SAMP_DEN_COEFF", "samp_den"),
)


def parse_rpc(text: str) -> RpcModel:
    """Parse RPC00B-style `KEY: value` text into an RpcModel.

    Whitespace-tolerant; unit suffixes after the number are ignored; unknown
    keys are skipped. Raises MissingKey, NonPositiveScale, MalformedNumber,
    NonUnitDenominator.
    """
    values: dict[str, float] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or ":" not in stripped:
            continue
        key, _, rest = stripped.partition(":")
        key = key.strip().upper()
        tokens = rest.split()
        if not tokens:
            continue
        try:
            values[key] = float(tokens[0])
        except ValueError:
            raise MalformedNumber(line_no, tokens[0]) from None

    kwargs = {}
    for key, field, _unit in _SCALAR_KEYS:
        if key not in values:
            raise MissingKey(key)
        kwargs[field] = values[key]
    for key, field in _COEFF_KEYS:
        coeffs = []
        for i in range(1, 21):
            name = f"{key}_{i}"
            if name not in values:
                raise MissingKey(name)
            coeffs.append(values[name])
        kwargs[field] = np.array(coeffs)
    return RpcModel(**kwargs)


def serialize_rpc(model: RpcModel) -> str:
    """Render a model as RPC00B text with 17 significant digits (round-trip exact)."""
    out = []
    for key, field, unit in _SCALAR_KEYS:
        out.append(f"{key}: {getattr(model, field):.17g} {unit}")
    for key, field in _COEFF_KEYS:
        for i, v in enumerate(getattr(model, field), start=1):
            out.append(f"{key}_{i}: {v:.17g}")
    return "\n".join(out) + "\n"


def read_rpc(path) -> RpcModel:
    with open(path, "r", encoding="utf-8") as f:
        return parse_rpc(f.read())


def write_rpc(model: RpcModel, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_rpc(model))
