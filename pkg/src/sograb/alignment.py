"""Rigid registration of the pre-grasp cloud onto the during-grasp cloud."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import NNIndex, PointCloud, centroid, covariance, require_nonempty


class AlignmentError(ValueError):
    pass


_ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``p -> rotation @ p + translation`` (meters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise AlignmentError("transform contains non-finite values")
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_TOL:
            raise AlignmentError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise AlignmentError("rotation is not proper (det != 1)")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``first`` and then ``self``."""
        return RigidTransform(_reorthonormalize(self.rotation @ first.rotation),
                              self.rotation @ first.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def to_json_dict(self) -> dict:
        return {"rotation": [float(v) for v in self.rotation.reshape(-1)],
                "translation": [float(v) for v in self.translation]}

    @classmethod
    def from_json_dict(cls, d: dict) -> "RigidTransform":
        try:
            rot = [float(v) for v in d["rotation"]]
            trans = [float(v) for v in d["translation"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise AlignmentError(f"unparsable transform: {exc!r}") from None
        if len(rot) != 9 or len(trans) != 3:
            raise AlignmentError("transform needs 9 rotation and 3 translation values")
        return cls(np.array(rot).reshape(3, 3), np.array(trans))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "RigidTransform":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    # drift from repeated composition; project back onto SO(3)
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(r) - 1.0) / 2.0
    s = np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rotation matrix from an axis and an angle in radians (Rodrigues)."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    return PointCloud(t.apply(cloud.points), cloud.colors)


def best_fit_transform(src, dst) -> RigidTransform:
    """Least-squares proper rotation and translation mapping ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise AlignmentError(f"correspondence shapes differ: {src.shape} vs {dst.shape}")
    if src.shape[0] < 3:
        raise AlignmentError("degenerate correspondence set: need at least 3 pairs")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    for name, m in (("source", a), ("target", b)):
        sv = np.linalg.svd(m, compute_uv=False)
        if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
            raise AlignmentError(f"degenerate correspondence set: {name} points are collinear or coincident")
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T
    return RigidTransform(r, cd - r @ cs)


@dataclass(frozen=True)
class ICPParams:
    max_iterations: int = 50
    convergence_tol: float = 1e-6
    max_correspondence_dist: float = 0.01

    def __post_init__(self):
        if self.max_iterations < 1:
            raise AlignmentError("max_iterations must be >= 1")
        if not (self.convergence_tol > 0 and self.max_correspondence_dist > 0):
            raise AlignmentError("ICP tolerances must be positive")


@dataclass(frozen=True)
class ICPResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    converged: bool
    rmse_history: tuple = ()


def icp_align(source: PointCloud, target: PointCloud,
              init: RigidTransform = RigidTransform(),
              params: ICPParams = ICPParams()) -> ICPResult:
    """Point-to-point ICP moving ``source`` onto ``target``, starting from ``init``.

    Each iteration matches the transformed source against the target, drops
    pairs farther than ``max_correspondence_dist`` and refits. Iteration stops
    once the inlier RMSE changes by less than ``convergence_tol``.
    """
    require_nonempty(source, "source")
    require_nonempty(target, "target")
    index = NNIndex(target)
    current = init
    history = []
    converged = False
    prev = None
    for _ in range(params.max_iterations):
        moved = current.apply(source.points)
        idx, dist = index.query(moved)
        keep = dist <= params.max_correspondence_dist
        if not keep.any():
            raise AlignmentError("correspondence set empty; increase max_correspondence_dist")
        rmse = float(np.sqrt(np.mean(dist[keep] ** 2)))
        history.append(rmse)
        # an exact fit cannot improve; refitting would only add roundoff
        if rmse == 0.0 or (prev is not None and abs(prev - rmse) < params.convergence_tol):
            converged = True
            break
        prev = rmse
        step = best_fit_transform(moved[keep], index.points[idx[keep]])
        current = step.compose(current)
    else:
        # budget exhausted: report the error of the final transform
        moved = current.apply(source.points)
        _, dist = index.query(moved)
        keep = dist <= params.max_correspondence_dist
        if keep.any():
            rmse = float(np.sqrt(np.mean(dist[keep] ** 2)))
            converged = abs(history[-1] - rmse) < params.convergence_tol
            history.append(rmse)
    return ICPResult(current, history[-1], min(len(history), params.max_iterations),
                     converged, tuple(history))


def _principal_axes(cloud: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(covariance(cloud))
    if vals[-1] <= 0 or vals[0] <= 1e-12 * vals[-1]:
        raise AlignmentError("degenerate geometry for PCA alignment")
    order = sorted(range(3), key=lambda i: (-vals[i], tuple(vecs[:, i])))
    return vals[order], vecs[:, order]


_SIGNS = [np.array(s, dtype=float) for s in itertools.product((1.0, -1.0), repeat=3)]


def pca_align(source: PointCloud, target: PointCloud) -> RigidTransform:
    """Match centroids and principal axes of ``source`` to those of ``target``.

    Of the axis sign choices giving a proper rotation, the one with the lowest
    mean nearest-neighbour distance from the moved source to the target wins;
    earlier candidates win ties, with the unflipped assignment first.
    """
    require_nonempty(source, "source")
    require_nonempty(target, "target")
    _, es = _principal_axes(source)
    _, et = _principal_axes(target)
    cs, ct = centroid(source), centroid(target)
    index = NNIndex(target)
    best, best_cost = None, np.inf
    for s in _SIGNS:
        r = et @ np.diag(s) @ es.T
        if np.linalg.det(r) < 0:
            continue
        r = _reorthonormalize(r)
        cand = RigidTransform(r, ct - r @ cs)
        _, dist = index.query(cand.apply(source.points))
        cost = float(dist.mean())
        if cost < best_cost:
            best, best_cost = cand, cost
    return best


def alignment_rmse(source: PointCloud, target: PointCloud, t: RigidTransform) -> float:
    """RMS nearest-neighbour distance from the transformed source to the target."""
    _, dist = NNIndex(target).query(t.apply(source.points))
    return float(np.sqrt(np.mean(dist ** 2)))
