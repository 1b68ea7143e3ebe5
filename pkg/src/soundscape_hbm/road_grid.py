"""Road rasterization and the road covariate at sites and grid cells.

The covariate at a location sums, over road pixels within the radius,
z-scored AADT + speed + truck share minus z-scored pixel distance.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

PIXEL = 10.0
RADIUS = 600.0
FACTORS = ("aadt", "speed", "truck", "distance")


@dataclass(frozen=True)
class RoadSegment:
    polyline: np.ndarray
    aadt: float
    speed: float
    truck_pct: float

    def __post_init__(self):
        pts = np.asarray(self.polyline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError("a road segment needs at least two (x, y) vertices")
        if self.aadt < 0 or self.speed <= 0 or not 0 <= self.truck_pct <= 100:
            raise ValueError("invalid road attributes")
        object.__setattr__(self, "polyline", pts)


@dataclass(frozen=True)
class RoadPixelTable:
    xy: np.ndarray  # (P, 2) cell centres
    aadt: np.ndarray
    speed: np.ndarray
    truck: np.ndarray
    resolution: float = PIXEL

    def __len__(self) -> int:
        return self.xy.shape[0]

    @classmethod
    def empty(cls) -> "RoadPixelTable":
        z = np.empty(0)
        return cls(np.empty((0, 2)), z, z, z)


@dataclass(frozen=True)
class CovariateValue:
    x: float
    y: float
    rc: float


def read_segments(path) -> list[RoadSegment]:
    """Rows ``segment_id,x1,y1,x2,y2,aadt,speed,truck_pct``; each row is one piece."""
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            pts = [[float(r["x1"]), float(r["y1"])], [float(r["x2"]), float(r["y2"])]]
            out.append(RoadSegment(np.array(pts), float(r["aadt"]), float(r["speed"]), float(r["truck_pct"])))
    return out


def write_segments(path, segments) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id", "x1", "y1", "x2", "y2", "aadt", "speed", "truck_pct"])
        for sid, s in enumerate(segments):
            for a, b in zip(s.polyline[:-1], s.polyline[1:]):
                w.writerow([sid, *(f"{v:.10g}" for v in (*a, *b)), f"{s.aadt:.10g}", f"{s.speed:.10g}",
                            f"{s.truck_pct:.10g}"])


def point_segment_distance(p, a, b):
    """Euclidean distance from points ``p`` (..., 2) to the segment ``a``-``b``."""
    p = np.asarray(p, dtype=float)
    d = b - a
    L2 = float(d @ d)
    t = np.zeros(p.shape[:-1]) if L2 == 0 else np.clip(((p - a) @ d) / L2, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * d), axis=-1)


def rasterize(segments, bbox, resolution: float = PIXEL) -> RoadPixelTable:
    """Cells of a grid anchored at the bbox lower-left corner whose centre lies
    within half a pixel of a segment.  Where segments overlap, the one with
    the larger AADT supplies the attributes."""
    segments = list(segments)
    if not segments:
        raise ValueError("no road segments")
    x0, y0, x1, y1 = map(float, bbox)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate bounding box")
    nx, ny = int(np.floor((x1 - x0) / resolution)), int(np.floor((y1 - y0) / resolution))
    half = resolution / 2.0
    cells: dict = {}
    for s in segments:
        for a, b in zip(s.polyline[:-1], s.polyline[1:]):
            lo = np.minimum(a, b) - half
            hi = np.maximum(a, b) + half
            i0 = max(int(np.floor((lo[0] - x0) / resolution - 0.5)), 0)
            i1 = min(int(np.ceil((hi[0] - x0) / resolution - 0.5)), nx - 1)
            j0 = max(int(np.floor((lo[1] - y0) / resolution - 0.5)), 0)
            j1 = min(int(np.ceil((hi[1] - y0) / resolution - 0.5)), ny - 1)
            if i1 < i0 or j1 < j0:
                continue
            ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
            centres = np.stack([x0 + (ii + 0.5) * resolution, y0 + (jj + 0.5) * resolution], axis=-1)
            hit = point_segment_distance(centres, a, b) <= half + 1e-9
            for i, j in zip(ii[hit], jj[hit]):
                key = (int(i), int(j))
                if key not in cells or cells[key][0] < s.aadt:
                    cells[key] = (s.aadt, s.speed, s.truck_pct)
    if not cells:
        return RoadPixelTable.empty()
    keys = sorted(cells)
    ij = np.array(keys, dtype=float)
    attrs = np.array([cells[k] for k in keys])
    xy = np.stack([x0 + (ij[:, 0] + 0.5) * resolution, y0 + (ij[:, 1] + 0.5) * resolution], axis=1)
    return RoadPixelTable(xy, attrs[:, 0], attrs[:, 1], attrs[:, 2], resolution)


@dataclass(frozen=True)
class Scaling:
    """Population mean and SD of each factor; ``sd == 0`` marks a dropped factor."""

    mean: dict
    sd: dict
    radius: float = RADIUS

    def z(self, name, values):
        values = np.asarray(values, dtype=float)
        if self.sd[name] == 0:
            return np.zeros_like(values)
        return (values - self.mean[name]) / self.sd[name]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Scaling":
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["mean"], d["sd"], d["radius"])


def site_pixel_pairs(table: RoadPixelTable, sites, radius: float = RADIUS):
    """``(pixel index, distance)`` of every pixel within ``radius`` of each site, concatenated."""
    sites = np.asarray(sites, dtype=float).reshape(-1, 2)
    if len(table) == 0:
        return np.empty(0, dtype=int), np.empty(0)
    tree = cKDTree(table.xy)
    idx = [np.sort(np.array(n, dtype=int)) for n in tree.query_ball_point(sites, radius)]
    dist = [np.linalg.norm(table.xy[i] - s, axis=1) for i, s in zip(idx, sites)]
    return np.concatenate(idx), np.concatenate(dist)


def scale_attributes(table: RoadPixelTable, sites, radius: float = RADIUS) -> Scaling:
    """Global z-score constants over all in-radius (site, pixel) pairs."""
    if len(table) == 0:
        raise ValueError("empty road pixel table")
    idx, dist = site_pixel_pairs(table, sites, radius)
    if idx.size == 0:
        raise ValueError(f"no road pixel lies within {radius} m of any site")
    cols = {"aadt": table.aadt[idx], "speed": table.speed[idx], "truck": table.truck[idx], "distance": dist}
    mean, sd = {}, {}
    for name in FACTORS:
        mean[name] = float(np.mean(cols[name]))
        s = float(np.std(cols[name]))
        if s <= 1e-12 * max(1.0, abs(mean[name])):
            warnings.warn(f"{name} has zero variance; it contributes 0 to the covariate", RuntimeWarning,
                          stacklevel=2)
            s = 0.0
        sd[name] = s
    return Scaling(mean, sd, radius)


def road_covariates(locations, table: RoadPixelTable, scaling: Scaling) -> np.ndarray:
    """Road covariate at each of ``locations`` (n, 2)."""
    locations = np.asarray(locations, dtype=float).reshape(-1, 2)
    out = np.zeros(locations.shape[0])
    if len(table) == 0:
        return out
    base = scaling.z("aadt", table.aadt) + scaling.z("speed", table.speed) + scaling.z("truck", table.truck)
    tree = cKDTree(table.xy)
    for n, (loc, nb) in enumerate(zip(locations, tree.query_ball_point(locations, scaling.radius))):
        if not nb:
            continue
        nb = np.sort(np.array(nb, dtype=int))
        d = np.linalg.norm(table.xy[nb] - loc, axis=1)
        out[n] = float(np.sum(base[nb] - scaling.z("distance", d)))
    return out


def road_covariate(location, table: RoadPixelTable, scaling: Scaling) -> CovariateValue:
    x, y = map(float, location)
    return CovariateValue(x, y, float(road_covariates([[x, y]], table, scaling)[0]))


def grid_centres(bbox, resolution: float) -> np.ndarray:
    """Centres of a regular grid anchored at the lower-left bbox corner, row-major from the bottom."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    x0, y0, x1, y1 = map(float, bbox)
    if resolution > x1 - x0 or resolution > y1 - y0:
        raise ValueError("resolution larger than the bounding box")
    nx = int(np.floor((x1 - x0) / resolution + 1e-9))
    ny = int(np.floor((y1 - y0) / resolution + 1e-9))
    gx = x0 + (np.arange(nx) + 0.5) * resolution
    gy = y0 + (np.arange(ny) + 0.5) * resolution
    yy, xx = np.meshgrid(gy, gx, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def prediction_grid(bbox, resolution: float, table: RoadPixelTable, scaling: Scaling) -> list[CovariateValue]:
    centres = grid_centres(bbox, resolution)
    rc = road_covariates(centres, table, scaling)
    return [CovariateValue(float(x), float(y), float(v)) for (x, y), v in zip(centres, rc)]


def write_covariate_raster(path, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "rc"])
        for v in values:
            w.writerow([f"{v.x:.10g}", f"{v.y:.10g}", f"{v.rc:.10g}"])


def read_covariate_raster(path) -> list[CovariateValue]:
    with open(path, newline="") as fh:
        return [CovariateValue(float(r["x"]), float(r["y"]), float(r["rc"])) for r in csv.DictReader(fh)]
