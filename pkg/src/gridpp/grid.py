"""Equirectangular grid geometry, latitude weights, tiling and spatial filters.

Rasters are ``(n_lat, n_lon)`` arrays, rows running north to south and
columns running east from ``lon_start``.  Filters treat longitude as
periodic and replicate the edge rows in latitude.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels


class GridError(ValueError):
    """Invalid grid geometry or raster shape."""


@dataclass(frozen=True)
class Grid:
    n_lat: int
    n_lon: int
    lat_start: float
    lat_step: float
    lon_start: float
    lon_step: float

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @property
    def lats(self) -> np.ndarray:
        return self.lat_start + self.lat_step * np.arange(self.n_lat)

    @property
    def lons(self) -> np.ndarray:
        return np.mod(self.lon_start + self.lon_step * np.arange(self.n_lon), 360.0)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(lat2d, lon2d)`` in degrees."""
        lon2d, lat2d = np.meshgrid(self.lons, self.lats)
        return lat2d, lon2d

    def to_dict(self) -> dict:
        return {
            "n_lat": self.n_lat,
            "n_lon": self.n_lon,
            "lat_start": self.lat_start,
            "lat_step": self.lat_step,
            "lon_start": self.lon_start,
            "lon_step": self.lon_step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return make_grid(
            d["n_lat"], d["n_lon"], d["lat_start"], d["lat_step"], d["lon_start"], d["lon_step"]
        )


def make_grid(n_lat, n_lon, lat_start, lat_step, lon_start, lon_step) -> Grid:
    """Build and validate a :class:`Grid`.

    Raises
    ------
    GridError
        If a count is below 2, a step is zero, or any row latitude falls
        outside [-90, 90].  The message names the offending field.
    """
    for name, n in (("n_lat", n_lat), ("n_lon", n_lon)):
        if int(n) != n or n < 2:
            raise GridError(f"{name}: must be an integer >= 2, got {n!r}")
    for name, step in (("lat_step", lat_step), ("lon_step", lon_step)):
        if not math.isfinite(step) or step == 0:
            raise GridError(f"{name}: must be finite and nonzero, got {step!r}")
    lat_end = lat_start + lat_step * (n_lat - 1)
    eps = 1e-9
    if not (-90 - eps <= lat_start <= 90 + eps and -90 - eps <= lat_end <= 90 + eps):
        raise GridError(f"lat_start: rows span [{lat_start}, {lat_end}], outside [-90, 90]")
    return Grid(int(n_lat), int(n_lon), float(lat_start), float(lat_step),
                float(lon_start), float(lon_step))


def global_grid(resolution: float = 1.0) -> Grid:
    """Pole-to-pole grid at ``resolution`` degrees (0.25 gives 721 x 1440)."""
    n_lat = int(round(180 / resolution)) + 1
    n_lon = int(round(360 / resolution))
    return make_grid(n_lat, n_lon, 90.0, -resolution, 0.0, resolution)


def check_raster(values, grid: Grid) -> np.ndarray:
    values = np.asarray(values)
    if values.shape[-2:] != grid.shape:
        raise GridError(f"raster shape {values.shape[-2:]} does not match grid {grid.shape}")
    if not np.all(np.isfinite(values)):
        raise GridError("raster contains NaN or Inf")
    return values


def cos_lat_weights(grid: Grid) -> np.ndarray:
    """Per-gridpoint weight ``max(cos(lat), 0)``, constant along each row."""
    w = np.clip(np.cos(np.deg2rad(grid.lats)), 0.0, None)
    # cos(90 deg) is 6e-17 in floating point
    w[np.isclose(np.abs(grid.lats), 90.0, atol=1e-12)] = 0.0
    return np.repeat(w[:, None], grid.n_lon, axis=1)


# ---------------------------------------------------------------- tiling


@dataclass
class TileSet:
    tiles: list  # [(row_offset, col_offset, ndarray[..., tile, tile])]
    tile_size: int
    shape: tuple  # original (n_lat, n_lon)
    pad_mode: str = "edge"

    @property
    def padded_shape(self) -> tuple[int, int]:
        t = self.tile_size
        return (-(-self.shape[0] // t) * t, -(-self.shape[1] // t) * t)

    def valid_masks(self) -> list[np.ndarray]:
        """Per-tile boolean masks, False over replicated padding."""
        mask = np.zeros(self.padded_shape, dtype=bool)
        mask[: self.shape[0], : self.shape[1]] = True
        t = self.tile_size
        return [mask[r : r + t, c : c + t] for r, c, _ in self.tiles]


def tile_field(values, tile_size: int, pad_mode: str = "edge") -> TileSet:
    """Edge-pad ``values`` up to multiples of ``tile_size`` and cut into tiles.

    Leading axes (e.g. features or channels) are carried along; tiling
    applies to the last two.  Tiles are ordered row-major by offset.
    """
    values = np.asarray(values)
    if pad_mode != "edge":
        raise ValueError(f"unsupported pad_mode {pad_mode!r}")
    if tile_size < 8:
        raise ValueError(f"tile_size must be >= 8, got {tile_size}")
    n_lat, n_lon = values.shape[-2:]
    pr, pc = -(-n_lat // tile_size) * tile_size, -(-n_lon // tile_size) * tile_size
    if tile_size > 2 * max(n_lat, n_lon):
        raise ValueError(f"tile_size {tile_size} exceeds twice the raster dimension")
    pad = [(0, 0)] * (values.ndim - 2) + [(0, pr - n_lat), (0, pc - n_lon)]
    padded = np.pad(values, pad, mode="edge")
    tiles = [
        (r, c, padded[..., r : r + tile_size, c : c + tile_size].copy())
        for r in range(0, pr, tile_size)
        for c in range(0, pc, tile_size)
    ]
    return TileSet(tiles, tile_size, (n_lat, n_lon), pad_mode)


def untile(tileset: TileSet) -> np.ndarray:
    """Reassemble tiles and crop the padding."""
    if not tileset.tiles:
        raise ValueError("empty TileSet")
    t = tileset.tile_size
    pr, pc = tileset.padded_shape
    lead = tileset.tiles[0][2].shape[:-2]
    out = np.empty(lead + (pr, pc), dtype=tileset.tiles[0][2].dtype)
    seen = np.zeros((pr // t, pc // t), dtype=int)
    for r, c, tile in tileset.tiles:
        if r % t or c % t or r >= pr or c >= pc or r < 0 or c < 0:
            raise ValueError(f"inconsistent tile offset ({r}, {c})")
        if tile.shape != lead + (t, t):
            raise ValueError(f"tile at ({r}, {c}) has shape {tile.shape}")
        out[..., r : r + t, c : c + t] = tile
        seen[r // t, c // t] += 1
    if not np.all(seen == 1):
        raise ValueError("tiles do not cover the padded raster exactly once")
    return out[..., : tileset.shape[0], : tileset.shape[1]]


# ---------------------------------------------------------------- filters


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1-D Gaussian truncated at ``ceil(4 sigma)`` and normalized to sum 1."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    r = int(math.ceil(4 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def separable_filter(values, kernel, adjoint: bool = False, lat_mode: str = "edge") -> np.ndarray:
    """Apply ``kernel`` along latitude and longitude (periodic).

    Works on 2-D rasters or stacks with leading axes.  Latitude is
    edge-replicated unless ``lat_mode="periodic"``.  With ``adjoint=True``
    the transpose operator is applied instead, which is what
    backpropagation through the filter needs.
    """
    if lat_mode not in ("edge", "periodic"):
        raise ValueError(f"unknown lat_mode {lat_mode!r}")
    values = np.asarray(values, dtype=np.float64)
    if len(kernel) == 1 and kernel[0] == 1.0:
        return values.copy()
    flat = values.reshape((-1,) + values.shape[-2:])
    out = np.empty_like(flat)
    if lat_mode == "periodic":
        def lat_op(a, k):
            return _kernels.convolve_lon_periodic(a.T, k).T
    elif adjoint:
        lat_op = _kernels.convolve_lat_edge_adjoint
    else:
        lat_op = _kernels.convolve_lat_edge
    for i, a in enumerate(flat):
        # symmetric kernel: the periodic passes are self-adjoint
        out[i] = _kernels.convolve_lon_periodic(lat_op(a, kernel), kernel)
    return out.reshape(values.shape)


def gaussian_blur(values, sigma: float, lat_mode: str = "edge") -> np.ndarray:
    """Separable Gaussian blur; ``sigma`` is in grid cells."""
    kernel = gaussian_kernel(sigma)
    if sigma == 0:
        return np.array(values, dtype=np.float64, copy=True)
    return separable_filter(values, kernel, lat_mode=lat_mode)


def box_kernel(window: int) -> np.ndarray:
    if int(window) != window or window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window!r}")
    return np.full(int(window), 1.0 / window)


def neighborhood_mean(values, window: int) -> np.ndarray:
    """Mean over a ``window`` x ``window`` box centred on each gridpoint."""
    kernel = box_kernel(window)
    if window == 1:
        return np.array(values, dtype=np.float64, copy=True)
    return separable_filter(values, kernel)


def neighborhood_mean_adjoint(values, window: int) -> np.ndarray:
    kernel = box_kernel(window)
    if window == 1:
        return np.array(values, dtype=np.float64, copy=True)
    return separable_filter(values, kernel, adjoint=True)
