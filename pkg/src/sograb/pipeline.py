"""Batch evaluation of recorded grasp trials: manifest in, score tables out."""

from __future__ import annotations

import csv
import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .alignment import (ICPParams, RigidTransform, alignment_rmse, apply_transform,
                        icp_align, pca_align)
from .metric import (DEFAULT_ALPHA, DCDParams, GraspOutcome, Partial, Unsuccessful, dcd,
                     grasp_score, outcome_from_dict, outcome_to_dict)
from .pointcloud import (PointCloud, SegmentationParams, load_cloud, segment_by_color,
                         voxel_downsample)

logger = logging.getLogger(__name__)

ALIGNMENT_MODES = ("icp", "pca")

SCORE_COLUMNS = ["trial_id", "object_id", "material", "gripper_id", "repeat", "outcome",
                 "dcd", "score", "alignment_mode", "alignment_rmse", "alpha",
                 "t_dropped", "t_cycle"]
AGGREGATE_COLUMNS = ["object_id", "material", "gripper_id", "n", "mean", "std"]


class ManifestError(ValueError):
    pass


class TrialEvaluationError(RuntimeError):
    def __init__(self, trial_id: str, message: str):
        super().__init__(f"trial {trial_id}: {message}")
        self.trial_id = trial_id
        self.message = message


@dataclass(frozen=True)
class TrialRecord:
    trial_id: str
    object_id: str
    material: str
    gripper_id: str
    repeat: int
    pre_cloud_path: str
    grasp_cloud_path: Optional[str]
    init_transform: RigidTransform
    alignment_mode: str
    outcome: GraspOutcome

    @property
    def cell_key(self) -> tuple[str, str, str]:
        return (self.object_id, self.material, self.gripper_id)


@dataclass(frozen=True)
class Manifest:
    trials: tuple
    alpha: Optional[float] = None
    path: Optional[str] = None

    def __iter__(self):
        return iter(self.trials)

    def __len__(self):
        return len(self.trials)

    def __getitem__(self, i):
        return self.trials[i]


@dataclass(frozen=True)
class ScoreRecord:
    trial_id: str
    object_id: str
    material: str
    gripper_id: str
    repeat: int
    outcome: GraspOutcome
    dcd_value: Optional[float]
    score: float
    alignment_mode: Optional[str]
    alignment_rmse: Optional[float]
    alpha: float


@dataclass(frozen=True)
class TrialError:
    trial_id: str
    message: str


@dataclass(frozen=True)
class AggregateCell:
    object_id: str
    material: str
    gripper_id: str
    n: int
    mean: float
    std: float


@dataclass(frozen=True)
class PipelineConfig:
    """Per-run settings shared by every trial.

    ``max_correspondence_dist`` left as ``None`` resolves to ten voxels, or
    10 mm without downsampling. With ``auto_pca_fallback`` an ICP trial whose
    final RMSE exceeds ``pca_fallback_rmse`` is re-aligned with PCA.
    """

    alpha: float = DEFAULT_ALPHA
    voxel_size: Optional[float] = None
    segmentation: Optional[SegmentationParams] = None
    max_iterations: int = 50
    convergence_tol: float = 1e-6
    max_correspondence_dist: Optional[float] = None
    auto_pca_fallback: bool = False
    pca_fallback_rmse: float = 0.005
    parallel: int = 1

    def __post_init__(self):
        DCDParams(self.alpha)
        self.icp_params()
        if self.voxel_size is not None and not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.parallel < 1:
            raise ValueError("parallel must be >= 1")

    def icp_params(self) -> ICPParams:
        dist = self.max_correspondence_dist
        if dist is None:
            dist = 10 * self.voxel_size if self.voxel_size else 0.01
        return ICPParams(self.max_iterations, self.convergence_tol, dist)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["max_correspondence_dist"] = self.icp_params().max_correspondence_dist
        if self.segmentation is not None and self.segmentation.crop_box is not None:
            d["segmentation"]["crop_box"] = [list(map(float, b)) for b in self.segmentation.crop_box]
        return d


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

_REQUIRED = ("trial_id", "object_id", "material", "gripper_id", "pre_cloud", "outcome")


def _parse_trial(raw: dict, base: Path, pos: int) -> TrialRecord:
    if not isinstance(raw, dict):
        raise ManifestError(f"trials[{pos}] is not an object")
    for key in _REQUIRED:
        if key not in raw:
            raise ManifestError(f"trials[{pos}] missing field '{key}'")
    tid = str(raw["trial_id"])
    try:
        outcome = outcome_from_dict(raw["outcome"])
    except ValueError as exc:
        raise ManifestError(f"trial {tid}: outcome: {exc}") from None
    grasp = raw.get("grasp_cloud")
    if isinstance(outcome, Unsuccessful) and grasp is not None:
        raise ManifestError(f"trial {tid}: unsuccessful outcome must not have a grasp_cloud")
    if not isinstance(outcome, Unsuccessful) and not grasp:
        raise ManifestError(f"trial {tid}: missing field 'grasp_cloud' for {outcome.kind} outcome")
    mode = raw.get("alignment_mode", "icp")
    if mode not in ALIGNMENT_MODES:
        raise ManifestError(f"trial {tid}: alignment_mode must be one of {ALIGNMENT_MODES}, got {mode!r}")
    init = RigidTransform()
    if raw.get("init_transform") is not None:
        try:
            init = RigidTransform.from_json_dict(raw["init_transform"])
        except ValueError as exc:
            raise ManifestError(f"trial {tid}: unparsable init_transform: {exc}") from None
    try:
        repeat = int(raw.get("repeat", 0))
    except (TypeError, ValueError):
        raise ManifestError(f"trial {tid}: field 'repeat' must be an integer") from None
    return TrialRecord(
        trial_id=tid,
        object_id=str(raw["object_id"]),
        material=str(raw["material"]),
        gripper_id=str(raw["gripper_id"]),
        repeat=repeat,
        pre_cloud_path=str(base / raw["pre_cloud"]),
        grasp_cloud_path=None if grasp is None else str(base / grasp),
        init_transform=init,
        alignment_mode=mode,
        outcome=outcome,
    )


def parse_manifest(data: dict, base_dir: Union[str, os.PathLike] = ".") -> Manifest:
    if not isinstance(data, dict) or not isinstance(data.get("trials"), list):
        raise ManifestError("manifest must be an object with a 'trials' list")
    base = Path(base_dir)
    trials = [_parse_trial(raw, base, i) for i, raw in enumerate(data["trials"])]
    seen = set()
    for t in trials:
        if t.trial_id in seen:
            raise ManifestError(f"duplicate trial_id '{t.trial_id}'")
        seen.add(t.trial_id)
    alpha = data.get("alpha")
    if alpha is not None:
        alpha = float(alpha)
        DCDParams(alpha)
    return Manifest(tuple(trials), alpha)


def load_manifest(path) -> Manifest:
    path = Path(path)
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON: {exc}") from None
    return replace(parse_manifest(data, path.parent), path=str(path))


def manifest_to_dict(manifest: Manifest, base_dir=None) -> dict:
    def rel(p):
        if p is None or base_dir is None:
            return p
        return os.path.relpath(p, base_dir)

    trials = []
    for t in manifest:
        d = {"trial_id": t.trial_id, "object_id": t.object_id, "material": t.material,
             "gripper_id": t.gripper_id, "repeat": t.repeat, "pre_cloud": rel(t.pre_cloud_path)}
        if t.grasp_cloud_path is not None:
            d["grasp_cloud"] = rel(t.grasp_cloud_path)
        d["init_transform"] = t.init_transform.to_json_dict()
        d["alignment_mode"] = t.alignment_mode
        d["outcome"] = outcome_to_dict(t.outcome)
        trials.append(d)
    out = {"trials": trials}
    if manifest.alpha is not None:
        out = {"alpha": manifest.alpha, **out}
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def prepare_cloud(cloud: PointCloud, config: PipelineConfig) -> PointCloud:
    if config.segmentation is not None:
        cloud = segment_by_color(cloud, config.segmentation)
    if config.voxel_size is not None:
        cloud = voxel_downsample(cloud, config.voxel_size)
    return cloud


def align(pre: PointCloud, grasp: PointCloud, mode: str, init: RigidTransform,
          config: PipelineConfig) -> tuple[RigidTransform, float, str]:
    """Move ``pre`` onto ``grasp``; returns (transform, rmse, mode actually used)."""
    if mode == "icp":
        res = icp_align(pre, grasp, init, config.icp_params())
        if not (config.auto_pca_fallback and res.rmse > config.pca_fallback_rmse):
            return res.transform, res.rmse, "icp"
        logger.info("ICP rmse %.6g m above %.6g m, switching to PCA", res.rmse, config.pca_fallback_rmse)
    t = pca_align(pre, grasp)
    return t, alignment_rmse(pre, grasp, t), "pca"


def evaluate_trial(record: TrialRecord, config: PipelineConfig = PipelineConfig()) -> ScoreRecord:
    common = dict(trial_id=record.trial_id, object_id=record.object_id, material=record.material,
                  gripper_id=record.gripper_id, repeat=record.repeat, outcome=record.outcome,
                  alpha=config.alpha)
    if isinstance(record.outcome, Unsuccessful):
        return ScoreRecord(dcd_value=None, score=0.0, alignment_mode=None,
                           alignment_rmse=None, **common)
    try:
        pre = prepare_cloud(load_cloud(record.pre_cloud_path), config)
        grasp = prepare_cloud(load_cloud(record.grasp_cloud_path), config)
        t, rmse, mode = align(pre, grasp, record.alignment_mode, record.init_transform, config)
        d = dcd(apply_transform(pre, t), grasp, DCDParams(config.alpha))
        score = grasp_score(record.outcome, d)
    except (OSError, ValueError, ArithmeticError) as exc:
        raise TrialEvaluationError(record.trial_id, f"{type(exc).__name__}: {exc}") from exc
    return ScoreRecord(dcd_value=d, score=score, alignment_mode=mode, alignment_rmse=rmse, **common)


def _evaluate_isolated(args) -> Union[ScoreRecord, TrialError]:
    record, config = args
    try:
        return evaluate_trial(record, config)
    except TrialEvaluationError as exc:
        return TrialError(exc.trial_id, exc.message)
    except Exception as exc:  # noqa: BLE001 - one bad trial must not void the batch
        return TrialError(record.trial_id, f"{type(exc).__name__}: {exc}")


def run_batch(manifest: Iterable[TrialRecord], config: PipelineConfig = PipelineConfig()
              ) -> tuple[list[ScoreRecord], list[TrialError]]:
    """Evaluate every trial; results come back in manifest order whatever ``config.parallel`` is."""
    jobs = [(t, config) for t in manifest]
    if config.parallel > 1 and len(jobs) > 1:
        chunk = max(1, len(jobs) // (4 * config.parallel))
        with ProcessPoolExecutor(max_workers=config.parallel) as pool:
            outcomes = list(pool.map(_evaluate_isolated, jobs, chunksize=chunk))
    else:
        outcomes = [_evaluate_isolated(j) for j in jobs]
    records = [o for o in outcomes if isinstance(o, ScoreRecord)]
    errors = [o for o in outcomes if isinstance(o, TrialError)]
    for e in errors:
        logger.error("trial %s failed: %s", e.trial_id, e.message)
    return records, errors


def aggregate(records: Sequence[ScoreRecord], manifest: Iterable[TrialRecord]) -> list[AggregateCell]:
    """Mean and population standard deviation of scores per (object, material, gripper)."""
    keys = {t.trial_id: t.cell_key for t in manifest}
    groups: dict[tuple, list[float]] = {}
    for r in records:
        if r.trial_id not in keys:
            raise ManifestError(f"score record for unknown trial_id '{r.trial_id}'")
        groups.setdefault(keys[r.trial_id], []).append(r.score)
    return [AggregateCell(*key, n=len(scores), mean=statistics.mean(scores),
                          std=statistics.pstdev(scores))
            for key, scores in sorted(groups.items())]


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def _num(v) -> str:
    # repr round-trips, so score formulas can be re-evaluated exactly from the CSV
    return "" if v is None else repr(float(v))


def score_row(r: ScoreRecord) -> dict:
    partial = isinstance(r.outcome, Partial)
    return {
        "trial_id": r.trial_id, "object_id": r.object_id, "material": r.material,
        "gripper_id": r.gripper_id, "repeat": r.repeat, "outcome": r.outcome.kind,
        "dcd": _num(r.dcd_value), "score": _num(r.score),
        "alignment_mode": r.alignment_mode or "", "alignment_rmse": _num(r.alignment_rmse),
        "alpha": _num(r.alpha),
        "t_dropped": _num(r.outcome.t_dropped) if partial else "",
        "t_cycle": _num(r.outcome.t_cycle) if partial else "",
    }


def write_scores_csv(records: Sequence[ScoreRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SCORE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(score_row(r))


def write_aggregate_csv(cells: Sequence[AggregateCell], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for c in cells:
            w.writerow([c.object_id, c.material, c.gripper_id, c.n, _num(c.mean), _num(c.std)])


_STOPS = [(0.0, (68, 1, 84)), (0.5, (33, 145, 140)), (1.0, (253, 231, 37))]


def heat_color(mean: float, lo: float = 0.5, hi: float = 1.0) -> str:
    """Linear three-stop colour ramp over [lo, hi]; values outside are clamped."""
    u = min(1.0, max(0.0, (mean - lo) / (hi - lo)))
    for (u0, c0), (u1, c1) in zip(_STOPS, _STOPS[1:]):
        if u <= u1:
            f = (u - u0) / (u1 - u0)
            rgb = [round(a + f * (b - a)) for a, b in zip(c0, c1)]
            return "#%02x%02x%02x" % tuple(rgb)
    return "#%02x%02x%02x" % _STOPS[-1][1]


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def render_heatmap_svg(cells: Sequence[AggregateCell]) -> str:
    """Objects as rows, (material, gripper) pairs as columns, cells labelled mean ± std."""
    objects = sorted({c.object_id for c in cells})
    columns = sorted({(c.material, c.gripper_id) for c in cells})
    lookup = {(c.object_id, c.material, c.gripper_id): c for c in cells}
    cw, ch, left, top = 96, 28, 80, 56
    width = left + cw * len(columns) + 20
    height = top + ch * len(objects) + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for j, (mat, grip) in enumerate(columns):
        x = left + cw * j + cw / 2
        out.append(f'<text x="{x}" y="{top - 28}" text-anchor="middle">{_esc(mat)}</text>')
        out.append(f'<text x="{x}" y="{top - 12}" text-anchor="middle">{_esc(grip)}</text>')
    for i, obj in enumerate(objects):
        y = top + ch * i
        out.append(f'<text x="{left - 8}" y="{y + ch / 2 + 4}" text-anchor="end">{_esc(obj)}</text>')
        for j, (mat, grip) in enumerate(columns):
            x = left + cw * j
            c = lookup.get((obj, mat, grip))
            if c is None:
                out.append(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="#dddddd" stroke="white"/>')
                continue
            fill = heat_color(c.mean)
            ink = "black" if c.mean >= 0.8 else "white"
            out.append(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{fill}" stroke="white"/>')
            out.append(f'<text x="{x + cw / 2}" y="{y + ch / 2 + 4}" text-anchor="middle" '
                       f'fill="{ink}">{c.mean:.3f} ± {c.std:.3f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_results(records: Sequence[ScoreRecord], cells: Sequence[AggregateCell], out_dir,
                   errors: Sequence[TrialError] = (), metadata: Optional[dict] = None) -> dict:
    """Write scores.csv, aggregate.csv, heatmap.svg and a run.json sidecar; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("scores.csv", "aggregate.csv", "heatmap.svg", "run.json")}
    write_scores_csv(records, paths["scores.csv"])
    write_aggregate_csv(cells, paths["aggregate.csv"])
    paths["heatmap.svg"].write_text(render_heatmap_svg(cells), encoding="utf-8")
    meta = dict(metadata or {})
    meta.update({
        "std_convention": "population (divide by n)",
        "n_scored": len(records),
        "n_failed": len(errors),
        "errors": [{"trial_id": e.trial_id, "message": e.message} for e in errors],
    })
    paths["run.json"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
