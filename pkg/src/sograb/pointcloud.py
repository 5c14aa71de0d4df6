"""Point cloud container, PLY I/O, nearest-neighbour index, downsampling and segmentation."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

PLY_FORMATS = ("ply-ascii", "ply-binary-le")

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PointCloudError(ValueError):
    """Raised for malformed clouds, files or parameters."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N x 3 float64 points in meters, optionally with N x 3 uint8 RGB colors."""

    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise PointCloudError(f"points must have shape (N, 3), got {pts.shape}")
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise PointCloudError(f"non-finite coordinate at point index {int(np.argmax(bad))}")
        object.__setattr__(self, "points", _readonly(pts))
        if self.colors is not None:
            cols = np.asarray(self.colors)
            if cols.shape != pts.shape:
                raise PointCloudError(
                    f"colors shape {cols.shape} does not match points shape {pts.shape}")
            if not np.all((cols >= 0) & (cols <= 255) & (cols == np.floor(cols))):
                raise PointCloudError("colors must be integer bytes in [0, 255]")
            object.__setattr__(self, "colors", _readonly(cols.astype(np.uint8)))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    def subset(self, mask_or_index) -> "PointCloud":
        cols = None if self.colors is None else self.colors[mask_or_index]
        return PointCloud(self.points[mask_or_index], cols)


def require_nonempty(cloud: PointCloud, name: str = "cloud") -> None:
    if len(cloud) == 0:
        raise PointCloudError(f"empty cloud: {name} has no points")


# ---------------------------------------------------------------------------
# PLY I/O
# ---------------------------------------------------------------------------

def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PointCloudError("malformed header: missing 'ply' magic line")
    fmt = None
    elements = []  # [name, count, [(prop_name, dtype or ('list', count_t, item_t))]]
    while True:
        raw = fh.readline()
        if not raw:
            raise PointCloudError("malformed header: missing 'end_header'")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith(("comment", "obj_info")):
            continue
        tok = line.split()
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) != 3 or tok[2] != "1.0":
                raise PointCloudError(f"malformed header: bad format line '{line}'")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PointCloudError(f"malformed header: bad element line '{line}'")
            try:
                count = int(tok[2])
            except ValueError:
                raise PointCloudError(f"malformed header: bad element count '{tok[2]}'") from None
            if count < 0:
                raise PointCloudError(f"malformed header: negative element count {count}")
            elements.append([tok[1], count, []])
        elif tok[0] == "property":
            if not elements:
                raise PointCloudError("malformed header: property before any element")
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise PointCloudError(f"malformed header: unknown type in '{line}'")
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            elif len(tok) == 3:
                if tok[1] not in _PLY_TYPES:
                    raise PointCloudError(f"malformed header: unknown property type '{tok[1]}'")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise PointCloudError(f"malformed header: bad property line '{line}'")
        else:
            raise PointCloudError(f"malformed header: unexpected line '{line}'")
    if fmt is None:
        raise PointCloudError("malformed header: missing format line")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PointCloudError(f"unsupported PLY format '{fmt}'")
    return fmt, elements


def _check_vertex_props(props):
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise PointCloudError(f"malformed header: vertex element lacks property '{axis}'")
        kind = dict(props)[axis]
        if isinstance(kind, tuple) or kind not in ("f4", "f8"):
            raise PointCloudError(f"malformed header: property '{axis}' must be float or double")
    has_rgb = all(c in names for c in ("red", "green", "blue"))
    known = {"x", "y", "z"} | ({"red", "green", "blue"} if has_rgb else set())
    for name, _ in props:
        if name not in known:
            logger.warning("skipping unknown vertex property '%s'", name)
    return has_rgb


def _read_ascii(fh, elements):
    result = None
    for name, count, props in elements:
        rows = []
        for i in range(count):
            raw = fh.readline()
            if not raw:
                raise PointCloudError(f"truncated ascii body in element '{name}' at row {i}")
            if name == "vertex":
                rows.append(raw.split())
        if name == "vertex":
            if any(isinstance(k, tuple) for _, k in props):
                raise PointCloudError("list properties on vertex element are not supported")
            try:
                table = np.array(rows, dtype=np.float64).reshape(count, len(props))
            except ValueError as exc:
                raise PointCloudError(f"malformed ascii vertex data: {exc}") from None
            result = {p[0]: table[:, j] for j, p in enumerate(props)}
            break
    return result


def _read_binary(fh, elements):
    for name, count, props in elements:
        has_list = any(isinstance(k, tuple) for _, k in props)
        if name == "vertex":
            if has_list:
                raise PointCloudError("list properties on vertex element are not supported")
            dtype = np.dtype([(p, "<" + k) for p, k in props])
            buf = fh.read(dtype.itemsize * count)
            if len(buf) != dtype.itemsize * count:
                raise PointCloudError("truncated binary vertex data")
            table = np.frombuffer(buf, dtype=dtype, count=count)
            return {p: table[p] for p, _ in props}
        if has_list:
            raise PointCloudError(
                f"cannot skip binary element '{name}' with list properties before vertex data")
        itemsize = sum(np.dtype(k).itemsize for _, k in props)
        fh.read(itemsize * count)
    return None


def load_cloud(path, format: Optional[str] = None) -> PointCloud:
    """Read a PLY file (ASCII or binary little-endian) into a PointCloud.

    ``format`` is optional; when given, the file's declared encoding must match.
    """
    path = os.fspath(path)
    if format is not None and format not in PLY_FORMATS:
        raise PointCloudError(f"unknown cloud format '{format}', expected one of {PLY_FORMATS}")
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        declared = "ply-ascii" if fmt == "ascii" else "ply-binary-le"
        if format is not None and format != declared:
            raise PointCloudError(f"{path}: expected {format} but file is {declared}")
        vertex = [e for e in elements if e[0] == "vertex"]
        if not vertex:
            raise PointCloudError("malformed header: no vertex element")
        _, count, props = vertex[0]
        has_rgb = _check_vertex_props(props)
        if count == 0:
            raise PointCloudError(f"empty cloud: {path} declares 0 vertices")
        cols = _read_ascii(fh, elements) if fmt == "ascii" else _read_binary(fh, elements)
    pts = np.column_stack([np.asarray(cols[a], dtype=np.float64) for a in "xyz"])
    colors = None
    if has_rgb:
        rgb = np.column_stack([np.asarray(cols[c]) for c in ("red", "green", "blue")])
        if rgb.min() < 0 or rgb.max() > 255:
            raise PointCloudError("color values outside [0, 255]")
        colors = rgb.astype(np.uint8)
    return PointCloud(pts, colors)


def save_cloud(cloud: PointCloud, path, format: str = "ply-binary-le") -> None:
    """Write a cloud as PLY.

    Binary output stores coordinates as ``double`` so a round trip is lossless;
    ASCII output writes ``float`` properties with six decimals.
    """
    require_nonempty(cloud)
    if format not in PLY_FORMATS:
        raise PointCloudError(f"unknown cloud format '{format}', expected one of {PLY_FORMATS}")
    n = len(cloud)
    binary = format == "ply-binary-le"
    ctype = "double" if binary else "float"
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        f"property {ctype} x",
        f"property {ctype} y",
        f"property {ctype} z",
    ]
    if cloud.has_colors:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(os.fspath(path), "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if cloud.has_colors:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            table = np.empty(n, dtype=np.dtype(fields))
            for j, a in enumerate("xyz"):
                table[a] = cloud.points[:, j]
            if cloud.has_colors:
                for j, c in enumerate(("red", "green", "blue")):
                    table[c] = cloud.colors[:, j]
            fh.write(table.tobytes())
        else:
            lines = []
            for i in range(n):
                x, y, z = cloud.points[i]
                row = f"{x:.6f} {y:.6f} {z:.6f}"
                if cloud.has_colors:
                    r, g, b = cloud.colors[i]
                    row += f" {r} {g} {b}"
                lines.append(row)
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# Nearest-neighbour index
# ---------------------------------------------------------------------------

def _euclid(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


class NNIndex:
    """k-d tree over a cloud that answers exactly like a brute-force scan.

    Distances are recomputed from coordinates for each candidate, and equal
    distances resolve to the lowest point index.
    """

    _K = 8

    def __init__(self, cloud: PointCloud):
        require_nonempty(cloud)
        self._points = cloud.points
        self._tree = cKDTree(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def __len__(self) -> int:
        return self._points.shape[0]

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest point index and distance for every row of ``queries``."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self)
        if q.shape[0] == 0:
            return np.empty(0, dtype=np.intp), np.empty(0)
        k = min(self._K, n)
        _, cand = self._tree.query(q, k=k)
        cand = np.asarray(cand).reshape(q.shape[0], k)
        dist = _euclid(q[:, None, :], self._points[cand])
        # lexicographic (distance, index) minimum per row
        best_idx = np.empty(q.shape[0], dtype=np.intp)
        best_d = np.empty(q.shape[0])
        dmin = dist.min(axis=1)
        masked = np.where(dist == dmin[:, None], cand, n)
        best_idx[:] = masked.min(axis=1)
        best_d[:] = dmin
        # every candidate tied: more tied points may lie outside the k returned
        if k < n:
            saturated = np.nonzero(dist.max(axis=1) <= dmin)[0]
            for row in saturated:
                self._resolve_ties(q[row], row, best_idx, best_d)
        return best_idx, best_d

    def _resolve_ties(self, qp, row, best_idx, best_d):
        radius = best_d[row] * (1.0 + 1e-9) + 1e-300
        cand = np.asarray(self._tree.query_ball_point(qp, radius), dtype=np.intp)
        d = _euclid(qp[None, :], self._points[cand])
        dmin = d.min()
        best_idx[row] = cand[d == dmin].min()
        best_d[row] = dmin

    def nearest(self, query) -> tuple[int, float]:
        idx, dist = self.query(np.asarray(query, dtype=np.float64).reshape(1, 3))
        return int(idx[0]), float(dist[0])


def build_index(cloud: PointCloud) -> NNIndex:
    return NNIndex(cloud)


def nearest(index: NNIndex, query) -> tuple[int, float]:
    return index.nearest(query)


# ---------------------------------------------------------------------------
# Downsampling, segmentation, moments
# ---------------------------------------------------------------------------

def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    Voxel keys are ``floor(coord / voxel_size)`` on raw coordinates. Output
    order follows the sorted voxel keys, so it is deterministic.
    """
    if not (voxel_size > 0 and np.isfinite(voxel_size)):
        raise PointCloudError(f"voxel size must be positive, got {voxel_size}")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = counts.shape[0]
    sums = np.zeros((m, 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]
    colors = None
    if cloud.has_colors:
        csum = np.zeros((m, 3))
        np.add.at(csum, inverse, cloud.colors.astype(np.float64))
        colors = np.clip(np.rint(csum / counts[:, None]), 0, 255).astype(np.uint8)
    return PointCloud(centroids, colors)


@dataclass(frozen=True)
class SegmentationParams:
    """White-object-on-black-scene color filter.

    ``crop_box`` is ``((xmin, ymin, zmin), (xmax, ymax, zmax))`` in meters, inclusive.
    """

    min_brightness: int = 128
    max_chroma_spread: int = 30
    crop_box: Optional[tuple[Sequence[float], Sequence[float]]] = None

    def __post_init__(self):
        for name in ("min_brightness", "max_chroma_spread"):
            v = getattr(self, name)
            if not (0 <= v <= 255):
                raise PointCloudError(f"{name} must be in [0, 255], got {v}")
        if self.crop_box is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in self.crop_box)
            if lo.shape != (3,) or hi.shape != (3,) or np.any(lo > hi):
                raise PointCloudError(f"invalid crop box {self.crop_box}")


def segment_by_color(cloud: PointCloud, params: SegmentationParams = SegmentationParams()) -> PointCloud:
    if not cloud.has_colors:
        raise PointCloudError("segmentation requires a colored cloud")
    rgb = cloud.colors.astype(np.int32)
    brightness = rgb.sum(axis=1) // 3
    spread = rgb.max(axis=1) - rgb.min(axis=1)
    keep = (brightness >= params.min_brightness) & (spread <= params.max_chroma_spread)
    if params.crop_box is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in params.crop_box)
        keep &= np.all((cloud.points >= lo) & (cloud.points <= hi), axis=1)
    if not keep.any():
        raise PointCloudError("segmentation removed all points")
    return cloud.subset(keep)


def centroid(cloud: PointCloud) -> np.ndarray:
    require_nonempty(cloud)
    return cloud.points.mean(axis=0)


def covariance(cloud: PointCloud) -> np.ndarray:
    """Population covariance (divides by N)."""
    centered = cloud.points - centroid(cloud)
    cov = centered.T @ centered / len(cloud)
    return (cov + cov.T) / 2
