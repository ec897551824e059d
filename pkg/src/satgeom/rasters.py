"""Raster containers and their file formats.

Two raster types run through the whole pipeline:

* DsmGrid   -- geo-referenced single-band height raster (ground truth and
               reconstruction output), nodata sentinel -9999.0, stored
               north-to-south; serialized as a plain ASCII grid.
* DepthMap  -- per-view single-band raster of slant-range depths in meters
               with a validity mask; serialized as PFM with NaN for invalid
               pixels.

A DsmGrid's metric axes are defined by a LocalFrame anchored at its own
origin (the lower-left cell center), so a written-then-read grid behaves
identically to the original. Cell centers sit at integer multiples of the
cell size east/north of the origin.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .geometry import GeodeticPoint, LocalFrame

NODATA = -9999.0


@dataclass
class DsmGrid:
    """Height raster: `heights[0, :]` is the northernmost row."""

    heights: np.ndarray
    origin_lon: float
    origin_lat: float
    cell_size: float
    frame: LocalFrame = field(init=False)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError(f"cell_size must be > 0, got {self.cell_size}")
        h = np.asarray(self.heights, dtype=np.float64)
        if h.ndim != 2:
            raise ValueError("heights must be a 2-D array")
        self.heights = np.ascontiguousarray(h)
        self.origin_lon = float(self.origin_lon)
        self.origin_lat = float(self.origin_lat)
        self.cell_size = float(self.cell_size)
        self.frame = LocalFrame(self.origin_lon, self.origin_lat)

    @property
    def rows(self) -> int:
        return self.heights.shape[0]

    @property
    def cols(self) -> int:
        return self.heights.shape[1]

    @classmethod
    def filled(cls, cols, rows, origin_lon, origin_lat, cell_size, value=NODATA):
        return cls(np.full((rows, cols), value, dtype=np.float64),
                   origin_lon, origin_lat, cell_size)

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.heights) & (self.heights != NODATA)

    @property
    def valid_min(self) -> float:
        return float(self.heights[self.valid_mask].min())

    @property
    def valid_max(self) -> float:
        return float(self.heights[self.valid_mask].max())

    def spec_matches(self, other: "DsmGrid", tol: float = 1e-9) -> bool:
        return (
            self.cols == other.cols
            and self.rows == other.rows
            and abs(self.origin_lon - other.origin_lon) <= tol
            and abs(self.origin_lat - other.origin_lat) <= tol
            and abs(self.cell_size - other.cell_size) <= tol
        )

    def frac_index(self, lon, lat):
        """(lon, lat) -> fractional (col, row-from-bottom) grid coordinates."""
        fc = (np.asarray(lon, dtype=float) - self.origin_lon) \
            * self.frame.meters_per_deg_lon / self.cell_size
        fr = (np.asarray(lat, dtype=float) - self.origin_lat) \
            * self.frame.meters_per_deg_lat / self.cell_size
        return fc, fr

    def cell_center(self, col, row_from_bottom) -> GeodeticPoint:
        lon = self.origin_lon + np.asarray(col, dtype=float) * self.cell_size \
            / self.frame.meters_per_deg_lon
        lat = self.origin_lat + np.asarray(row_from_bottom, dtype=float) * self.cell_size \
            / self.frame.meters_per_deg_lat
        return GeodeticPoint(lon, lat, 0.0)

    def center(self) -> GeodeticPoint:
        return self.cell_center((self.cols - 1) / 2.0, (self.rows - 1) / 2.0)

    def sample_bilinear(self, lon, lat):
        """Bilinear height at geographic positions; NaN outside the grid of
        cell centers or wherever any of the four surrounding cells is nodata."""
        fc, fr = self.frac_index(lon, lat)
        fc = np.atleast_1d(np.asarray(fc, dtype=float))
        fr = np.atleast_1d(np.asarray(fr, dtype=float))
        scalar = fc.size == 1 and np.ndim(lon) == 0

        inside = (fc >= 0) & (fc <= self.cols - 1) & (fr >= 0) & (fr <= self.rows - 1)
        j0 = np.clip(np.floor(fc), 0, max(self.cols - 2, 0)).astype(np.intp)
        k0 = np.clip(np.floor(fr), 0, max(self.rows - 2, 0)).astype(np.intp)
        tx = fc - j0
        ty = fr - k0

        # row-from-bottom k maps to array row (rows - 1 - k)
        r1 = self.rows - 1 - k0        # bottom pair
        r0 = r1 - 1                    # top pair
        r0 = np.clip(r0, 0, self.rows - 1)
        h = self.heights
        z00 = h[r1, j0]                # (k0, j0)
        z10 = h[r1, np.minimum(j0 + 1, self.cols - 1)]
        z01 = h[r0, j0]
        z11 = h[r0, np.minimum(j0 + 1, self.cols - 1)]
        corners_ok = (
            (z00 != NODATA) & (z10 != NODATA) & (z01 != NODATA) & (z11 != NODATA)
            & np.isfinite(z00) & np.isfinite(z10) & np.isfinite(z01) & np.isfinite(z11)
        )
        val = (
            z00 * (1 - tx) * (1 - ty)
            + z10 * tx * (1 - ty)
            + z01 * (1 - tx) * ty
            + z11 * tx * ty
        )
        val = np.where(inside & corners_ok, val, np.nan)
        if scalar:
            return float(val[0])
        return val.reshape(np.shape(lon))


@dataclass
class DepthMap:
    """Per-view slant-range depths in meters; invalid pixels are NaN."""

    values: np.ndarray
    view_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("depth map must be a 2-D array")
        self.values = np.ascontiguousarray(v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def valid_fraction(self) -> float:
        return float(self.valid_mask.mean())

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy(), self.view_id)


# --- PFM (portable float map) ----------------------------------------------

def write_pfm(path, values: np.ndarray, scale: float = -1.0) -> None:
    """Write a single-band PFM; negative scale marks little-endian data.

    Rows are stored bottom-to-top per the PFM convention. NaN encodes
    invalid pixels.
    """
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 2:
        raise ValueError("PFM payload must be 2-D")
    if scale == 0:
        raise ValueError("PFM scale must be nonzero")
    data = v[::-1, :]
    if scale < 0:
        data = data.astype("<f4")
    else:
        data = data.astype(">f4")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{v.shape[1]} {v.shape[0]}\n".encode("ascii"))
        f.write(f"{scale:g}\n".encode("ascii"))
        f.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a single-band PFM into float64 with NaN preserved."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise ParseError(f"{path}: not a grayscale PFM (magic {magic!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ParseError(f"{path}: malformed PFM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        try:
            scale = float(f.readline().strip())
        except ValueError:
            raise ParseError(f"{path}: malformed PFM scale line") from None
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read(w * h * 4)
        if len(raw) != w * h * 4:
            raise ParseError(f"{path}: truncated PFM payload")
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return data[::-1, :].astype(np.float64)


def write_depth_map(path, dm: DepthMap) -> None:
    write_pfm(path, dm.values)


def read_depth_map(path, view_id: str = "") -> DepthMap:
    return DepthMap(read_pfm(path), view_id=view_id or str(path))


# --- DSM ASCII grid ----------------------------------------------------------

_DSM_HEADER_KEYS = ("ncols", "nrows", "origin_lon", "origin_lat", "cellsize_m", "nodata_value")


def dsm_to_ascii(grid: DsmGrid) -> str:
    lines = [
        f"ncols {grid.cols}",
        f"nrows {grid.rows}",
        f"origin_lon {grid.origin_lon:.17g}",
        f"origin_lat {grid.origin_lat:.17g}",
        f"cellsize_m {grid.cell_size:.17g}",
        "nodata_value -9999.0",
        "",
    ]
    h = np.where(grid.valid_mask, grid.heights, NODATA)
    for r in range(grid.rows):
        lines.append(" ".join(f"{v:.17g}" for v in h[r]))
    return "\n".join(lines) + "\n"


def dsm_from_ascii(text: str) -> DsmGrid:
    lines = text.splitlines()
    header = {}
    i = 0
    for i, raw in enumerate(lines):
        s = raw.strip()
        if not s:
            i += 1
            break
        parts = s.split()
        if len(parts) != 2:
            raise ParseError(f"DSM header line {i + 1}: expected 'name value', got {raw!r}")
        header[parts[0]] = parts[1]
    for key in _DSM_HEADER_KEYS:
        if key not in header:
            raise ParseError(f"DSM header missing {key!r}")
    cols, rows = int(header["ncols"]), int(header["nrows"])
    nodata = float(header["nodata_value"])
    data = []
    for raw in lines[i:]:
        if raw.strip():
            data.extend(float(t) for t in raw.split())
    if len(data) != cols * rows:
        raise ParseError(f"DSM data: expected {cols * rows} values, got {len(data)}")
    heights = np.array(data, dtype=np.float64).reshape(rows, cols)
    heights[heights == nodata] = NODATA
    return DsmGrid(heights, float(header["origin_lon"]), float(header["origin_lat"]),
                   float(header["cellsize_m"]))


def write_dsm(path, grid: DsmGrid) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(dsm_to_ascii(grid))


def read_dsm(path) -> DsmGrid:
    with open(path, "r", encoding="ascii") as f:
        return dsm_from_ascii(f.read())
