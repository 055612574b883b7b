import json

import numpy as np
import pytest

from partforest.evaluation import (
    correct_joints,
    double_count_events,
    double_count_rate,
    evaluate,
    joint_trace,
    limb_pck,
    mpjpe,
    pck,
    plot_trace,
    torso_length,
)
from partforest.imaging import ShapeError
from partforest.skeleton import JOINTS_2D, JOINTS_3D

I = {n: i for i, n in enumerate(JOINTS_2D)}


def _figure():
    """One frame with a 40 px torso and limbs well apart."""
    g = np.zeros((13, 2))
    g[I["head"]] = (50, 10)
    g[I["left_shoulder"]], g[I["right_shoulder"]] = (40, 20), (60, 20)
    g[I["left_hip"]], g[I["right_hip"]] = (45, 60), (55, 60)
    g[I["left_elbow"]], g[I["right_elbow"]] = (30, 40), (70, 40)
    g[I["left_wrist"]], g[I["right_wrist"]] = (25, 55), (75, 55)
    g[I["left_knee"]], g[I["right_knee"]] = (40, 80), (60, 80)
    g[I["left_ankle"]], g[I["right_ankle"]] = (38, 100), (62, 100)
    return g[None]


def test_torso_length():
    assert torso_length(_figure())[0] == 40.0


def test_pck_threshold_is_inclusive():
    g = _figure()
    d = g.copy()
    d[0, I["left_knee"], 0] += 8.0  # exactly 0.2 * 40
    d[0, I["right_knee"], 0] += 8.01
    ok = correct_joints(d, g, 0.2)[0]
    assert ok[I["left_knee"]] and not ok[I["right_knee"]]
    per = pck(d, g)
    assert per.sum() == 12
    assert limb_pck(per) == pytest.approx(7 / 8)


def test_double_count_rate():
    g = _figure()
    d = g.copy()
    d[0, I["right_knee"]] = d[0, I["left_knee"]] + (3.0, 0.0)
    eligible, hit = double_count_events(d, g)
    assert eligible.all() and hit[0].tolist() == [False, False, True, False]
    assert double_count_rate(d, g) == 0.25
    # truly close siblings are not eligible
    g2 = g.copy()
    g2[0, I["right_knee"]] = g2[0, I["left_knee"]] + (10.0, 0.0)
    assert double_count_rate(d, g2) == 0.0
    assert double_count_rate(g2, g2, pairs=[("left_knee", "right_knee")]) == 0.0


def test_mpjpe_frozen():
    p = np.zeros((2, 20, 3))
    g = np.zeros((2, 20, 3))
    g[0, :, 0] = 3.0
    g[1, :, 2] = 4.0
    assert mpjpe(p, g) == 3.5
    assert mpjpe(p.reshape(2, 60), g.reshape(2, 60)) == 3.5
    with pytest.raises(ShapeError):
        mpjpe(p[:1], g)


def test_joint_trace_and_plot(tmp_path):
    p = np.arange(3 * 60, dtype=float).reshape(3, 60)
    g = p + 1.0
    tr = joint_trace(p, g, "left_elbow", 1)
    j = JOINTS_3D.index("left_elbow")
    np.testing.assert_array_equal(tr.predicted, p.reshape(3, 20, 3)[:, j, 1])
    np.testing.assert_array_equal(tr.residual, -np.ones(3))
    plot_trace(tr, tmp_path / "t.png")
    assert (tmp_path / "t.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    with pytest.raises(KeyError):
        joint_trace(p, g, "tail", 0)
    with pytest.raises(ValueError):
        joint_trace(p, g, "head", 3)


def test_evaluate_report():
    g = np.repeat(_figure(), 2, axis=0)
    d = g.copy()
    d[1, I["head"]] += 100
    rep = evaluate(d, g, np.zeros((2, 60)), np.ones((2, 60)))
    assert rep.per_joint_pck["head"] == 0.5
    assert rep.mean_pck == pytest.approx(25 / 26)
    assert rep.mpjpe == pytest.approx(np.sqrt(3))
    assert rep.frames[1]["correct"] == list(JOINTS_2D[1:])
    data = json.loads(rep.to_json())
    assert data["limb_pck"] == 1.0 and data["double_count_rate"] == 0.0
    with pytest.raises(ShapeError):
        evaluate(d, g, np.zeros((2, 60)), None)
    with pytest.raises(ShapeError):
        evaluate(d, g, np.zeros((3, 60)), np.zeros((3, 60)))
