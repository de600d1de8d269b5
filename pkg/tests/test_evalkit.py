from __future__ import annotations

import csv
import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from dgnfit.evalkit import (DEFAULT_THRESHOLDS, evaluate, joint_error, posed, preview_camera, report, save_preview,
                            shade, success_frames)
from dgnfit.fitter import perturb_pose
from dgnfit.kinematics import PoseParams

from conftest import random_pose

# sha256 of the rest-pose preview pixels, recorded from the first generation
REST_PREVIEW_SHA256 = "8632f2e10ad238debf105ebc5a61d2f5936074db9a617c14f8c4461d3b602672"


def test_joint_error():
    gt = np.zeros((4, 3))
    assert not joint_error(gt, gt).any()
    pred = gt.copy()
    pred[2] = [3.0, 4.0, 0.0]
    np.testing.assert_allclose(joint_error(pred, gt), [0, 0, 5, 0])
    with pytest.raises(ValueError):
        joint_error(np.zeros((3, 3)), gt)


def test_mean_joint_error_recomputed(hand):
    truth = {f"f{i}": random_pose(hand, i) for i in range(4)}
    results = {k: perturb_pose(v, 10.0, 10.0, seed=i) for i, (k, v) in enumerate(truth.items())}
    m = evaluate(results, truth, hand)
    # spreadsheet-style: every joint of every frame, summed then divided once
    total, count = 0.0, 0
    for k in truth:
        pj = posed(hand, results[k])[1]
        gj = posed(hand, truth[k])[1]
        for a, b in zip(pj, gj):
            total += float(np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b))))
            count += 1
    assert m.mean_joint_err == pytest.approx(total / count, rel=1e-12)


def test_success_curve():
    assert all(f == 1.0 for _, f in success_frames([0.0, 0.0]))
    curve = dict(success_frames([25.0]))
    assert curve[20.0] == 0.0 and curve[30.0] == 1.0
    rng = np.random.default_rng(1)
    e = rng.uniform(0, 90, 57)
    for t, f in success_frames(e):
        assert f == sum(1 for x in e if x <= t) / len(e)
    fr = [f for _, f in success_frames(e)]
    assert fr == sorted(fr)
    assert success_frames([0.0, 3.0], [0.0])[0][1] == 0.5
    assert success_frames([1e9 - 1], [np.inf])[0][1] == 1.0
    with pytest.raises(ValueError):
        success_frames([])
    with pytest.raises(ValueError):
        success_frames([1.0], [10.0, 5.0])
    assert DEFAULT_THRESHOLDS[0] == 5.0 and DEFAULT_THRESHOLDS[-1] == 80.0


def test_evaluate_errors_and_order(hand):
    truth = {"a": random_pose(hand, 1), "b": random_pose(hand, 2)}
    with pytest.raises(ValueError):
        evaluate({}, truth, hand)
    with pytest.raises(ValueError, match="differ"):
        evaluate({"a": truth["a"], "c": truth["b"]}, truth, hand)
    res = {"b": perturb_pose(truth["b"], 5, 5, 1), "a": perturb_pose(truth["a"], 5, 5, 2)}
    m1 = evaluate(res, truth, hand)
    m2 = evaluate(dict(reversed(list(res.items()))), dict(reversed(list(truth.items()))), hand)
    assert m1.to_dict() == m2.to_dict()


def test_report_files(hand, tmp_path):
    truth = {f"f{i}": random_pose(hand, i) for i in range(3)}
    res = {k: perturb_pose(v, 10.0, 15.0, seed=i) for i, (k, v) in enumerate(truth.items())}
    m = report(res, truth, hand, tmp_path, inits=res)
    doc = json.loads((tmp_path / "metrics.json").read_text())
    rows = [json.loads(line) for line in (tmp_path / "frames.jsonl").read_text().splitlines()]
    assert doc["frames"] == len(rows) == 3
    all_j = [e for r in rows for e in r["joint_err"]]
    assert doc["mean_joint_err"] == pytest.approx(sum(all_j) / len(all_j))
    assert doc["mean_vertex_err"] == pytest.approx(np.mean([r["mean_vertex_err"] for r in rows]))
    with open(tmp_path / "success.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["threshold_mm", "fraction"]
    assert len(table) == 1 + len(DEFAULT_THRESHOLDS)
    for key in truth:
        for kind in ("fit", "gt", "init"):
            assert (tmp_path / f"{key}_{kind}.png").exists()
    assert m.mean_vertex_err > 0


def test_rest_preview_golden(hand, tmp_path):
    v = posed(hand, PoseParams.rest(hand.n_joints))[0]
    img = shade(hand, v, preview_camera(v))
    assert hashlib.sha256(img.tobytes()).hexdigest() == REST_PREVIEW_SHA256
    save_preview(tmp_path / "a.png", hand, v)
    save_preview(tmp_path / "b.png", hand, v)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "a.png")), img)
