"""Density-aware Chamfer distance and the grasp score built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .pointcloud import NNIndex, PointCloud, require_nonempty

DEFAULT_ALPHA = 100.0  # 1/m; 10 mm displacement -> per-point term ~0.63


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class DCDParams:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise MetricError(f"alpha must be positive and finite, got {self.alpha}")


@dataclass(frozen=True)
class Unsuccessful:
    kind = "unsuccessful"


@dataclass(frozen=True)
class Successful:
    kind = "successful"


@dataclass(frozen=True)
class Partial:
    """Object dropped ``t_dropped`` seconds into a ``t_cycle`` second pick-and-place."""

    t_dropped: float
    t_cycle: float
    kind = "partial"

    def __post_init__(self):
        if not (math.isfinite(self.t_cycle) and self.t_cycle > 0):
            raise MetricError(f"t_cycle must be positive, got {self.t_cycle}")
        if not (0 <= self.t_dropped <= self.t_cycle):
            raise MetricError(
                f"t_dropped must lie in [0, t_cycle], got {self.t_dropped} (t_cycle={self.t_cycle})")


GraspOutcome = Union[Unsuccessful, Partial, Successful]


def one_sided_dcd(ref: PointCloud, other: NNIndex, alpha: float) -> float:
    """Mean of ``1 - exp(-alpha * d) / n`` over the points of ``ref``.

    ``d`` is the distance to the nearest point of ``other`` and ``n`` the number
    of ``ref`` points sharing that nearest point, counted over the whole pass.
    """
    require_nonempty(ref, "reference cloud")
    idx, dist = other.query(ref.points)
    counts = np.bincount(idx, minlength=len(other))
    terms = 1.0 - np.exp(-alpha * dist) / counts[idx]
    return float(math.fsum(terms) / terms.shape[0])


def dcd(s1: PointCloud, s2: PointCloud, params: DCDParams = DCDParams()) -> float:
    """Symmetric density-aware Chamfer distance in [0, 1]."""
    require_nonempty(s1, "s1")
    require_nonempty(s2, "s2")
    forward = one_sided_dcd(s1, NNIndex(s2), params.alpha)
    backward = one_sided_dcd(s2, NNIndex(s1), params.alpha)
    value = 0.5 * (forward + backward)
    assert math.isfinite(value) and 0.0 <= value <= 1.0, value
    return value


def grasp_score(outcome: GraspOutcome, d: Optional[float] = None) -> float:
    if isinstance(outcome, Unsuccessful):
        return 0.0
    if d is None:
        raise MetricError("a DCD value is required for partial and successful grasps")
    if not (0.0 <= d <= 1.0):
        raise MetricError(f"DCD value must lie in [0, 1], got {d}")
    if isinstance(outcome, Partial):
        return (1.0 - d) * outcome.t_dropped / (2.0 * outcome.t_cycle)
    if isinstance(outcome, Successful):
        return 1.0 - d / 2.0
    raise MetricError(f"unknown grasp outcome {outcome!r}")


def outcome_from_dict(d: dict) -> GraspOutcome:
    kind = d.get("type") if isinstance(d, dict) else None
    if kind == "successful":
        return Successful()
    if kind == "unsuccessful":
        return Unsuccessful()
    if kind == "partial":
        for key in ("t_dropped", "t_cycle"):
            if key not in d:
                raise MetricError(f"partial outcome missing field '{key}'")
        return Partial(float(d["t_dropped"]), float(d["t_cycle"]))
    raise MetricError(f"unknown outcome type {kind!r}")


def outcome_to_dict(o: GraspOutcome) -> dict:
    if isinstance(o, Partial):
        return {"type": "partial", "t_dropped": o.t_dropped, "t_cycle": o.t_cycle}
    return {"type": o.kind}
