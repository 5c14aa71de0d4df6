"""Synthetic grasp fixtures: sampled object surfaces and squash/move/occlude deformations.

All randomness comes from ``numpy.random.default_rng(seed)`` (PCG64).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .alignment import RigidTransform, axis_angle
from .pointcloud import PointCloud, save_cloud

GENERATOR = "numpy.random.PCG64"
SHAPE_KINDS = ("box", "cylinder", "sphere", "extruded-spline")

# (kind -> number of dimensions): box (lx, ly, lz); cylinder (radius, height);
# sphere (radius,); extruded-spline (mean radius, height)
_DIMS = {"box": 3, "cylinder": 2, "sphere": 1, "extruded-spline": 2}


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    dimensions: tuple
    n_points: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise SynthError(f"unknown shape kind '{self.kind}', expected one of {SHAPE_KINDS}")
        dims = tuple(float(d) for d in self.dimensions)
        if len(dims) != _DIMS[self.kind]:
            raise SynthError(f"{self.kind} takes {_DIMS[self.kind]} dimensions, got {len(dims)}")
        if any(not d > 0 for d in dims):
            raise SynthError("shape dimensions must be positive")
        if self.n_points < 10:
            raise SynthError("n_points must be at least 10")
        object.__setattr__(self, "dimensions", dims)


@dataclass(frozen=True)
class DeformSpec:
    """Squash about the centroid, then move rigidly, occlude, and add noise.

    ``occlusion`` is ``(normal, offset)``; points with ``normal . p > offset``
    after the rigid motion are dropped.
    """

    squash_axis: Sequence[float] = (1.0, 0.0, 0.0)
    squash_ratio: float = 1.0
    rigid_motion: RigidTransform = field(default_factory=RigidTransform)
    occlusion: Optional[tuple] = None
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.squash_ratio <= 1):
            raise SynthError(f"squash_ratio must lie in (0, 1], got {self.squash_ratio}")
        if self.noise_sigma < 0:
            raise SynthError("noise_sigma must be non-negative")
        axis = np.asarray(self.squash_axis, dtype=float)
        if axis.shape != (3,) or not np.linalg.norm(axis) > 0:
            raise SynthError("squash_axis must be a non-zero 3-vector")


def _sample_box(rng, dims, n):
    lx, ly, lz = dims
    areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array(dims)
    half = np.array(dims) / 2
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    uv[np.arange(n), axis] = sign * half[axis]
    return uv


def _sample_cylinder(rng, dims, n):
    r, h = dims
    areas = np.array([2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.uniform(0, 2 * np.pi, size=n)
    rho = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(part == 0, rng.uniform(-h / 2, h / 2, size=n),
                 np.where(part == 1, h / 2, -h / 2))
    return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])


def _sample_sphere(rng, dims, n):
    v = rng.normal(size=(n, 3))
    return dims[0] * v / np.linalg.norm(v, axis=1, keepdims=True)


def spline_profile(rng, mean_radius, n_ctrl=6):
    """Random closed radial spline r(theta), mirrored so r(-theta) = r(theta)."""
    half = np.linspace(0.0, np.pi, n_ctrl)
    radii = mean_radius * rng.uniform(0.6, 1.4, size=n_ctrl)
    theta = np.concatenate([half, 2 * np.pi - half[-2::-1]])
    r = np.concatenate([radii, radii[-2::-1]])
    spline = CubicSpline(theta, r, bc_type="periodic")
    floor = 0.2 * mean_radius

    def profile(t):
        return np.maximum(spline(np.mod(t, 2 * np.pi)), floor)
    return profile


def _sample_extruded_spline(rng, dims, n):
    mean_r, h = dims
    profile = spline_profile(rng, mean_r)
    m = 2048
    grid = 2 * np.pi * np.arange(m) / m
    rr = profile(grid)
    verts = np.column_stack([rr * np.cos(grid), rr * np.sin(grid)])
    seg = np.roll(verts, -1, axis=0) - verts
    seg_len = np.linalg.norm(seg, axis=1)
    perimeter = seg_len.sum()
    area = 0.5 * np.sum(verts[:, 0] * seg[:, 1] - verts[:, 1] * seg[:, 0])
    areas = np.array([perimeter * h, area, area])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    out = np.empty((n, 3))
    side = np.nonzero(part == 0)[0]
    k = rng.choice(m, size=side.size, p=seg_len / perimeter)
    u = rng.uniform(size=side.size)
    out[side, :2] = verts[k] + u[:, None] * seg[k]
    out[side, 2] = rng.uniform(-h / 2, h / 2, size=side.size)
    caps = np.nonzero(part != 0)[0]
    rmax = rr.max()
    filled = 0
    xy = np.empty((caps.size, 2))
    while filled < caps.size:
        cand = rng.uniform(-rmax, rmax, size=(2 * (caps.size - filled) + 16, 2))
        inside = np.hypot(cand[:, 0], cand[:, 1]) <= profile(np.arctan2(cand[:, 1], cand[:, 0]))
        cand = cand[inside][: caps.size - filled]
        xy[filled:filled + cand.shape[0]] = cand
        filled += cand.shape[0]
    out[caps, :2] = xy
    out[caps, 2] = np.where(part[caps] == 1, h / 2, -h / 2)
    return out


_SAMPLERS = {
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "sphere": _sample_sphere,
    "extruded-spline": _sample_extruded_spline,
}


def sample_shape(spec: ShapeSpec) -> PointCloud:
    """Uniform surface sample centred on the origin.

    The extruded spline is mirror-symmetric about the plane y = 0.
    """
    rng = np.random.default_rng(spec.seed)
    return PointCloud(_SAMPLERS[spec.kind](rng, spec.dimensions, spec.n_points))


def squash(points: np.ndarray, axis, ratio: float) -> np.ndarray:
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    c = points.mean(axis=0)
    return points + (ratio - 1.0) * np.outer((points - c) @ a, a)


def deform(cloud: PointCloud, spec: DeformSpec) -> tuple[PointCloud, RigidTransform]:
    """Apply ``spec`` to ``cloud``; returns the deformed cloud and the rigid motion used."""
    pts = squash(cloud.points, spec.squash_axis, spec.squash_ratio)
    pts = spec.rigid_motion.apply(pts)
    colors = cloud.colors
    if spec.occlusion is not None:
        normal, offset = spec.occlusion
        keep = pts @ np.asarray(normal, dtype=float) <= float(offset)
        if not keep.any():
            raise SynthError("occlusion removed all points")
        pts = pts[keep]
        colors = None if colors is None else colors[keep]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        pts = pts + rng.normal(scale=spec.noise_sigma, size=pts.shape)
    return PointCloud(pts, colors), spec.rigid_motion


def random_rotation(rng, max_angle: float) -> np.ndarray:
    """Rotation about a uniformly random axis by an angle uniform in [0, max_angle]."""
    axis = rng.normal(size=3)
    return axis_angle(axis, rng.uniform(0, max_angle))


def write_pair(shape: ShapeSpec, deformation: DeformSpec, out_dir, stem: str = "",
               fmt: str = "ply-binary-le") -> dict:
    """Write ``<stem>pre.ply``, ``<stem>grasp.ply`` and ``<stem>truth.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pre = sample_shape(shape)
    grasp, truth = deform(pre, deformation)
    paths = {"pre": out / f"{stem}pre.ply", "grasp": out / f"{stem}grasp.ply",
             "truth": out / f"{stem}truth.json"}
    save_cloud(pre, paths["pre"], fmt)
    save_cloud(grasp, paths["grasp"], fmt)
    sidecar = {
        "ground_truth": truth.to_json_dict(),
        "shape": {"kind": shape.kind, "dimensions": list(shape.dimensions),
                  "n_points": shape.n_points, "seed": shape.seed},
        "deform": {
            "squash_axis": [float(v) for v in deformation.squash_axis],
            "squash_ratio": deformation.squash_ratio,
            "occlusion": None if deformation.occlusion is None else {
                "normal": [float(v) for v in deformation.occlusion[0]],
                "offset": float(deformation.occlusion[1])},
            "noise_sigma": deformation.noise_sigma,
            "seed": deformation.seed,
        },
        "generator": GENERATOR,
    }
    paths["truth"].write_text(json.dumps(sidecar, indent=2) + "\n")
    return paths


def write_synthetic_manifest(out_dir, object_ids: Sequence[str], materials: dict,
                             grippers: dict, repeats: int, n_points: int = 300,
                             seed: int = 0, alpha: Optional[float] = None,
                             init_error: tuple = (np.radians(3.0), 0.003)) -> Path:
    """Write a grid of synthetic trials plus ``manifest.json`` and return the manifest path.

    ``materials`` and ``grippers`` map labels to multiplicative squash factors;
    each trial is squashed along x by ``material * gripper`` (capped at 1),
    moved by a seeded random rigid motion, and given a kinematic prior that is
    off by at most ``init_error`` (radians, meters). All outcomes are successful.
    """
    out = Path(out_dir)
    clouds = out / "clouds"
    kinds = [("box", (0.055, 0.04, 0.03)), ("extruded-spline", (0.025, 0.03)),
             ("cylinder", (0.02, 0.05)), ("sphere", (0.025,))]
    rng = np.random.default_rng(seed)
    trials = []
    for oi, obj in enumerate(object_ids):
        kind, dims = kinds[oi % len(kinds)]
        for mat, mat_factor in materials.items():
            for grip, grip_factor in grippers.items():
                for rep in range(repeats):
                    tid = f"{obj}-{mat}-{grip}-{rep}"
                    ratio = min(1.0, mat_factor * grip_factor)
                    r = random_rotation(rng, np.radians(30))
                    t = rng.uniform(-0.05, 0.05, size=3)
                    motion = RigidTransform(r, t)
                    shape = ShapeSpec(kind, dims, n_points, seed=int(rng.integers(2**31)))
                    write_pair(shape, DeformSpec(squash_ratio=ratio, rigid_motion=motion),
                               clouds, stem=f"{tid}-")
                    err = random_rotation(rng, init_error[0])
                    dt = rng.normal(size=3)
                    dt *= init_error[1] / np.linalg.norm(dt)
                    init = RigidTransform(err @ r, t + dt)
                    trials.append({
                        "trial_id": tid, "object_id": obj, "material": mat,
                        "gripper_id": grip, "repeat": rep,
                        "pre_cloud": f"clouds/{tid}-pre.ply",
                        "grasp_cloud": f"clouds/{tid}-grasp.ply",
                        "init_transform": init.to_json_dict(),
                        "alignment_mode": "icp",
                        "outcome": {"type": "successful"},
                    })
    manifest = {"trials": trials}
    if alpha is not None:
        manifest = {"alpha": alpha, **manifest}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path
