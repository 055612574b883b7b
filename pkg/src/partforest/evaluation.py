"""2D localization accuracy, 3D joint error and double-counting incidence."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .imaging import ShapeError
from .skeleton import DOUBLE_COUNT_PAIRS, JOINTS_2D, JOINTS_3D, LIMB_JOINTS, pair_indices

DEFAULT_ALPHA = 0.2
DEFAULT_MIN_SEP = 8.0

_SHOULDERS = (JOINTS_2D.index("left_shoulder"), JOINTS_2D.index("right_shoulder"))
_HIPS = (JOINTS_2D.index("left_hip"), JOINTS_2D.index("right_hip"))


def _as_frames(points, n_joints, dim, what):
    a = np.asarray(points, dtype=np.float64)
    if a.ndim == 2 and a.shape[1] == n_joints * dim:
        a = a.reshape(len(a), n_joints, dim)
    if a.ndim != 3 or a.shape[1:] != (n_joints, dim):
        raise ShapeError(f"{what}: expected (frames, {n_joints}, {dim}), got {np.shape(points)}")
    return a


def _paired(pred, gt, n_joints, dim):
    p = _as_frames(pred, n_joints, dim, "predictions")
    g = _as_frames(gt, n_joints, dim, "ground truth")
    if len(p) != len(g):
        raise ShapeError(f"{len(p)} predicted frames but {len(g)} ground-truth frames")
    return p, g


def torso_length(gt2d) -> np.ndarray:
    """Per-frame reference length: shoulder midpoint to hip midpoint (pixels)."""
    g = _as_frames(gt2d, len(JOINTS_2D), 2, "ground truth")
    top = g[:, list(_SHOULDERS)].mean(axis=1)
    bottom = g[:, list(_HIPS)].mean(axis=1)
    return np.linalg.norm(top - bottom, axis=1)


def correct_joints(detections, gt2d, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Boolean (frames, joints): within ``alpha`` torso lengths of the truth."""
    d, g = _paired(detections, gt2d, len(JOINTS_2D), 2)
    err = np.linalg.norm(d - g, axis=2)
    return err <= alpha * torso_length(g)[:, None]


def pck(detections, gt2d, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Fraction of frames in which each joint is correct."""
    return correct_joints(detections, gt2d, alpha).mean(axis=0)


def limb_pck(per_joint) -> float:
    """Mean PCK over elbows, wrists, knees and ankles."""
    idx = [JOINTS_2D.index(n) for n in LIMB_JOINTS]
    return float(np.mean(np.asarray(per_joint)[idx]))


def mpjpe(pred3d, gt3d) -> float:
    """Mean Euclidean joint error over frames and joints (mm)."""
    p, g = _paired(pred3d, gt3d, len(JOINTS_3D), 3)
    return float(np.linalg.norm(p - g, axis=2).mean())


def double_count_events(detections, gt2d, pairs=DOUBLE_COUNT_PAIRS, min_sep: float = DEFAULT_MIN_SEP):
    """(eligible, collided) boolean arrays over (frames, pairs).

    A pair is eligible when the true siblings are at least ``2 * min_sep``
    apart and collides when the detected siblings are within ``min_sep``.
    """
    d, g = _paired(detections, gt2d, len(JOINTS_2D), 2)
    idx = np.array(pair_indices(JOINTS_2D, pairs), dtype=np.int64).reshape(-1, 2)
    gt_sep = np.linalg.norm(g[:, idx[:, 0]] - g[:, idx[:, 1]], axis=2)
    det_sep = np.linalg.norm(d[:, idx[:, 0]] - d[:, idx[:, 1]], axis=2)
    eligible = gt_sep >= 2.0 * min_sep
    return eligible, eligible & (det_sep <= min_sep)


def double_count_rate(detections, gt2d, pairs=DOUBLE_COUNT_PAIRS, min_sep: float = DEFAULT_MIN_SEP) -> float:
    """Share of eligible (frame, pair) events in which the siblings coincide; 0 if none are eligible."""
    eligible, hit = double_count_events(detections, gt2d, pairs, min_sep)
    n = int(eligible.sum())
    return float(hit.sum()) / n if n else 0.0


@dataclass(frozen=True)
class JointTrace:
    joint: str
    axis: int
    frames: np.ndarray
    predicted: np.ndarray
    truth: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return self.predicted - self.truth


def joint_trace(pred3d, gt3d, joint: str, axis: int) -> JointTrace:
    """Per-frame predicted and true coordinate of one 3D joint along one axis."""
    p, g = _paired(pred3d, gt3d, len(JOINTS_3D), 3)
    if joint not in JOINTS_3D:
        raise KeyError(f"unknown joint {joint!r}")
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    j = JOINTS_3D.index(joint)
    return JointTrace(joint, axis, np.arange(len(p)), p[:, j, axis].copy(), g[:, j, axis].copy())


def plot_trace(trace: JointTrace, path, labels=("predicted", "ground truth")) -> None:
    """Line chart of a joint trace, frame index against millimetres."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.ticker import MaxNLocator

    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    ax.plot(trace.frames, trace.predicted, "-o", ms=3, label=labels[0])
    ax.plot(trace.frames, trace.truth, "-s", ms=3, label=labels[1])
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_xlabel("frame index")
    ax.set_ylabel(f"{trace.joint} {'xyz'[trace.axis]} (mm)")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


@dataclass
class EvalReport:
    per_joint_pck: dict
    mean_pck: float
    limb_pck: float
    double_count_rate: float
    mpjpe: float | None = None
    alpha: float = DEFAULT_ALPHA
    min_sep: float = DEFAULT_MIN_SEP
    frames: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate(detections, gt2d, pred3d=None, gt3d=None, alpha: float = DEFAULT_ALPHA,
             min_sep: float = DEFAULT_MIN_SEP, pairs=DOUBLE_COUNT_PAIRS) -> EvalReport:
    """Aggregate report; per-frame records list correct joints and 3D error."""
    ok = correct_joints(detections, gt2d, alpha)
    per_joint = ok.mean(axis=0)
    eligible, hit = double_count_events(detections, gt2d, pairs, min_sep)
    frame_err = None
    if pred3d is not None or gt3d is not None:
        if pred3d is None or gt3d is None:
            raise ShapeError("3D evaluation needs both predictions and ground truth")
        p, g = _paired(pred3d, gt3d, len(JOINTS_3D), 3)
        if len(p) != len(ok):
            raise ShapeError(f"{len(p)} 3D frames but {len(ok)} 2D frames")
        frame_err = np.linalg.norm(p - g, axis=2).mean(axis=1)
    records = []
    for f in range(len(ok)):
        rec = {
            "frame": f,
            "correct": [name for name, c in zip(JOINTS_2D, ok[f]) if c],
            "double_counts": int(hit[f].sum()),
        }
        if frame_err is not None:
            rec["mpjpe"] = float(frame_err[f])
        records.append(rec)
    n_eligible = int(eligible.sum())
    return EvalReport(
        per_joint_pck={name: float(v) for name, v in zip(JOINTS_2D, per_joint)},
        mean_pck=float(per_joint.mean()),
        limb_pck=limb_pck(per_joint),
        double_count_rate=float(hit.sum()) / n_eligible if n_eligible else 0.0,
        mpjpe=None if frame_err is None else float(frame_err.mean()),
        alpha=alpha,
        min_sep=min_sep,
        frames=records,
    )
