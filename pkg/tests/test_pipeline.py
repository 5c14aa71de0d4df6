import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from sograb.alignment import RigidTransform, apply_transform, axis_angle, icp_align
from sograb.metric import DCDParams, Partial, Successful, Unsuccessful, dcd
from sograb.pipeline import (AGGREGATE_COLUMNS, SCORE_COLUMNS, ManifestError, PipelineConfig,
                             ScoreRecord, TrialEvaluationError, aggregate, evaluate_trial,
                             export_results, heat_color, load_manifest, parse_manifest,
                             prepare_cloud, run_batch)
from sograb.pointcloud import PointCloud, SegmentationParams, load_cloud, save_cloud
from sograb.synth import DeformSpec, ShapeSpec, write_pair, write_synthetic_manifest

MOTION = RigidTransform(axis_angle([0, 0, 1], np.radians(15)), [0.02, 0.01, 0.0])


def trial(tid="t0", outcome=None, **kw):
    d = {"trial_id": tid, "object_id": "B1", "material": "40A", "gripper_id": "rigid",
         "repeat": 0, "pre_cloud": "pre.ply", "grasp_cloud": "grasp.ply",
         "outcome": outcome or {"type": "successful"}}
    d.update(kw)
    return {k: v for k, v in d.items() if v is not None}


@pytest.fixture
def pair_dir(tmp_path):
    def make(squash=1.0, stem="", kind="box", dims=(0.05, 0.04, 0.03), n=800):
        write_pair(ShapeSpec(kind, dims, n, seed=21), DeformSpec(squash_ratio=squash, rigid_motion=MOTION),
                   tmp_path, stem)
        return tmp_path
    return make


def write_manifest(path, trials, **extra):
    path.write_text(json.dumps({**extra, "trials": trials}))
    return path


# --- manifest ------------------------------------------------------------

def test_minimal_manifest(tmp_path):
    m = load_manifest(write_manifest(tmp_path / "m.json", [trial()]))
    assert len(m) == 1
    t = m[0]
    assert t.pre_cloud_path == str(tmp_path / "pre.ply")
    assert t.alignment_mode == "icp"
    assert isinstance(t.outcome, Successful)
    np.testing.assert_array_equal(t.init_transform.rotation, np.eye(3))


def test_partial_missing_t_cycle(tmp_path):
    path = write_manifest(tmp_path / "m.json", [trial(outcome={"type": "partial", "t_dropped": 2})])
    with pytest.raises(ManifestError, match="t_cycle"):
        load_manifest(path)


@pytest.mark.parametrize("trials, message", [
    ([trial("a"), trial("a")], "duplicate trial_id"),
    ([trial(grasp_cloud=None)], "grasp_cloud"),
    ([trial(outcome={"type": "unsuccessful"})], "must not have a grasp_cloud"),
    ([trial(init_transform={"rotation": [1, 0], "translation": [0, 0, 0]})], "unparsable init_transform"),
    ([trial(alignment_mode="ransac")], "alignment_mode"),
    ([{"trial_id": "x"}], "missing field 'object_id'"),
])
def test_manifest_validation(tmp_path, trials, message):
    with pytest.raises(ManifestError, match=message):
        load_manifest(write_manifest(tmp_path / "m.json", trials))


def test_manifest_invalid_json(tmp_path):
    (tmp_path / "m.json").write_text("{nope")
    with pytest.raises(ManifestError, match="invalid JSON"):
        load_manifest(tmp_path / "m.json")


def test_full_factorial_manifest_grouping(tmp_path):
    trials = [trial(f"{o}-{m}-{g}-{r}", object_id=o, material=m, gripper_id=g, repeat=r)
              for o in [f"O{i}" for i in range(15)] for m in ("40A", "60A", "85A")
              for g in ("fin-ray-4", "fin-ray-6", "fin-ray-8", "rigid") for r in range(5)]
    m = parse_manifest({"alpha": 50, "trials": trials}, tmp_path)
    assert len(m) == 900 and m.alpha == 50.0
    records = [ScoreRecord(t.trial_id, *t.cell_key, t.repeat, t.outcome, 0.2, 0.9, "icp", 0.0, 100.0)
               for t in m]
    cells = aggregate(records, m)
    assert len(cells) == 180 and all(c.n == 5 for c in cells)


# --- evaluate_trial ----------------------------------------------------------

def test_unsuccessful_skips_clouds(tmp_path):
    m = parse_manifest({"trials": [trial(outcome={"type": "unsuccessful"}, grasp_cloud=None,
                                         pre_cloud="does-not-exist.ply")]}, tmp_path)
    r = evaluate_trial(m[0])
    assert r.score == 0.0 and r.dcd_value is None and r.alignment_mode is None


def test_rigidly_moved_box_scores_high(pair_dir):
    d = pair_dir()
    init = RigidTransform(axis_angle([1, 0, 0], np.radians(4)) @ MOTION.rotation, MOTION.translation + 0.003)
    m = parse_manifest({"trials": [trial(init_transform=init.to_json_dict())]}, d)
    r = evaluate_trial(m[0])
    assert r.dcd_value <= 0.02 and r.score >= 0.99
    assert r.alignment_mode == "icp" and r.alpha == 100.0


def test_squashed_pair_matches_direct_computation(pair_dir):
    d = pair_dir(squash=0.7)
    m = parse_manifest({"trials": [trial(init_transform=MOTION.to_json_dict())]}, d)
    config = PipelineConfig()
    r = evaluate_trial(m[0], config)
    pre, grasp = load_cloud(d / "pre.ply"), load_cloud(d / "grasp.ply")
    res = icp_align(pre, grasp, MOTION, config.icp_params())
    direct = dcd(apply_transform(pre, res.transform), grasp, DCDParams(config.alpha))
    assert abs(r.dcd_value - direct) <= 1e-12
    assert r.score == 1 - r.dcd_value / 2


def test_pca_mode_and_partial(pair_dir):
    d = pair_dir(squash=0.8)
    m = parse_manifest({"trials": [trial(alignment_mode="pca",
                                         outcome={"type": "partial", "t_dropped": 3, "t_cycle": 12})]}, d)
    r = evaluate_trial(m[0])
    assert r.alignment_mode == "pca"
    assert r.score == (1 - r.dcd_value) * 3.0 / (2 * 12.0)


def test_auto_pca_fallback(pair_dir):
    d = pair_dir(squash=0.5)
    m = parse_manifest({"trials": [trial(init_transform=MOTION.to_json_dict())]}, d)
    off = evaluate_trial(m[0], PipelineConfig())
    assert off.alignment_mode == "icp"
    on = evaluate_trial(m[0], PipelineConfig(auto_pca_fallback=True, pca_fallback_rmse=1e-6))
    assert on.alignment_mode == "pca"


def test_missing_cloud_is_annotated(tmp_path):
    m = parse_manifest({"trials": [trial("lost")]}, tmp_path)
    with pytest.raises(TrialEvaluationError, match="trial lost"):
        evaluate_trial(m[0])


def test_segmentation_and_downsampling_stages(tmp_path):
    rng = np.random.default_rng(4)
    obj = rng.uniform(-0.02, 0.02, size=(400, 3))
    bg = rng.uniform(-0.2, 0.2, size=(400, 3)) + [0, 0, -0.3]
    pts = np.vstack([obj, bg])
    rgb = np.vstack([np.full((400, 3), 240), np.full((400, 3), 15)])
    save_cloud(PointCloud(pts, rgb), tmp_path / "pre.ply")
    save_cloud(PointCloud(pts, rgb), tmp_path / "grasp.ply")
    m = parse_manifest({"trials": [trial()]}, tmp_path)
    config = PipelineConfig(segmentation=SegmentationParams(), voxel_size=0.002)
    prepared = prepare_cloud(load_cloud(tmp_path / "pre.ply"), config)
    assert len(prepared) <= 400 and np.abs(prepared.points).max() <= 0.02
    r = evaluate_trial(m[0], config)
    assert r.dcd_value <= 1e-12 and r.score == pytest.approx(1.0, abs=1e-12)


# --- batch, aggregate, export ----------------------------------------------------

def test_aggregate_statistics():
    recs = [ScoreRecord(f"t{i}", "B1", "40A", "rigid", i, Successful(), 0.4, s, "icp", 0.0, 100.0)
            for i, s in enumerate([0.5, 1.0])]
    manifest = parse_manifest({"trials": [trial(f"t{i}", repeat=i) for i in range(2)]})
    (cell,) = aggregate(recs, manifest)
    assert (cell.n, cell.mean, cell.std) == (2, 0.75, 0.25)
    same = [ScoreRecord(f"t{i}", "B1", "40A", "rigid", i, Successful(), 0.4, 0.8, "icp", 0.0, 100.0)
            for i in range(5)]
    manifest = parse_manifest({"trials": [trial(f"t{i}", repeat=i) for i in range(5)]})
    (cell,) = aggregate(same, manifest)
    assert cell.mean == 0.8 and cell.std == 0.0
    with pytest.raises(ManifestError, match="unknown trial_id"):
        aggregate(same, parse_manifest({"trials": [trial("t0")]}))


@pytest.fixture(scope="module")
def small_batch(tmp_path_factory):
    root = tmp_path_factory.mktemp("batch")
    path = write_synthetic_manifest(root, ["B1", "O3"], {"40A": 0.8, "85A": 0.95},
                                    {"fin-ray-4": 1.0, "rigid": 0.9}, 2, n_points=250, seed=3)
    return load_manifest(path)


def test_run_batch_order_and_parallel_equivalence(small_batch):
    serial, e1 = run_batch(small_batch, PipelineConfig(parallel=1))
    para, e2 = run_batch(small_batch, PipelineConfig(parallel=3))
    assert not e1 and not e2
    assert [r.trial_id for r in serial] == [t.trial_id for t in small_batch]
    assert serial == para


def test_run_batch_isolates_failures(small_batch, tmp_path):
    broken = list(small_batch.trials)
    broken[1] = replace(broken[1], grasp_cloud_path=str(tmp_path / "gone.ply"))
    recs, errs = run_batch(broken, PipelineConfig())
    assert len(recs) == len(broken) - 1 and [e.trial_id for e in errs] == [broken[1].trial_id]
    assert "gone.ply" in errs[0].message


def test_export_formats(small_batch, tmp_path):
    recs, errs = run_batch(small_batch, PipelineConfig())
    cells = aggregate(recs, small_batch)
    paths = export_results(recs, cells, tmp_path / "out", errs, metadata={"config": {"alpha": 100.0}})
    with open(paths["scores.csv"]) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == SCORE_COLUMNS
    assert len(rows) == len(small_batch)
    for row in rows:
        assert float(row["score"]) == 1 - float(row["dcd"]) / 2
    with open(paths["aggregate.csv"]) as fh:
        agg = list(csv.DictReader(fh))
    assert list(agg[0]) == AGGREGATE_COLUMNS and len(agg) == 8
    assert [(a["object_id"], a["material"], a["gripper_id"]) for a in agg] == sorted(
        (a["object_id"], a["material"], a["gripper_id"]) for a in agg)
    for a, c in zip(agg, cells):
        assert min(float(r["score"]) for r in rows if (r["object_id"], r["material"], r["gripper_id"])
                   == (c.object_id, c.material, c.gripper_id)) <= float(a["mean"])
    svg = paths["heatmap.svg"].read_text()
    assert svg.startswith("<svg") and svg.count("<rect") == 1 + 8
    assert f"{cells[0].mean:.3f} ± {cells[0].std:.3f}" in svg
    meta = json.loads(paths["run.json"].read_text())
    assert meta["n_failed"] == 0 and meta["std_convention"].startswith("population")


def test_partial_and_unsuccessful_rows(tmp_path):
    rec = [ScoreRecord("p", "B1", "40A", "rigid", 0, Partial(2.5, 7.0), 0.3, (1 - 0.3) * 2.5 / (2 * 7.0),
                       "icp", 0.001, 100.0),
           ScoreRecord("u", "B1", "40A", "rigid", 1, Unsuccessful(), None, 0.0, None, None, 100.0)]
    export_results(rec, [], tmp_path)
    with open(tmp_path / "scores.csv") as fh:
        p, u = list(csv.DictReader(fh))
    assert float(p["score"]) == (1 - float(p["dcd"])) * float(p["t_dropped"]) / (2 * float(p["t_cycle"]))
    assert u["dcd"] == "" and u["score"] == "0.0" and u["outcome"] == "unsuccessful"


def test_heat_color_scale():
    assert heat_color(0.5) == "#440154"
    assert heat_color(1.0) == "#fde725"
    assert heat_color(0.2) == heat_color(0.5)
    assert heat_color(0.75) == "#21918c"


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(alpha=-1)
    with pytest.raises(ValueError):
        PipelineConfig(parallel=0)
    assert PipelineConfig(voxel_size=0.002).icp_params().max_correspondence_dist == pytest.approx(0.02)
    assert PipelineConfig().icp_params().max_correspondence_dist == 0.01
    assert math.isclose(PipelineConfig().to_dict()["max_correspondence_dist"], 0.01)
