"""File-based experiment steps: synthesize, train, detect, lift, evaluate, render.

Layout under the output directory::

    data/{train,test}/scenes.jsonl   frames, true masks and ground truth
    data/plates/plate_NNNN.pgm       empty frames for the background model
    model.pfm, lifter.gpl
    detections_<mode>.jsonl, predictions_<mode>.jsonl
    report_<mode>.json, trace_<mode>.png, render_<mode>/frame_NNNN.png
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, save_config
from .evaluation import evaluate, joint_trace, plot_trace
from .features import compute_hog
from .imaging import BackgroundModel, clean_mask, read_pgm, subtract_background, update_background, write_pgm
from .infer import DetectParams, detect_baseline, detect_enhanced, part_responses
from .lift3d import lift, load_lifter, save_lifter, train_lifter
from .model import load_model, save_model, train_part_model
from .skeleton import JOINTS_2D, PARENTS_2D
from .synth import ACTORS, RenderStyle, background_plates, read_scenes, synth_sequence, write_scenes

log = logging.getLogger(__name__)

MODES = ("baseline", "enhanced")


class DataError(ValueError):
    """Missing, inconsistent or malformed experiment files."""


def render_style(cfg: ExperimentConfig) -> RenderStyle:
    return RenderStyle(yaw_deg=cfg.yaw_deg)


def _data(out) -> Path:
    return Path(out) / "data"


def _require(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"missing input {path}")
    return path


def _write_lines(path: Path, records) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _read_lines(path: Path) -> list[dict]:
    out = []
    for lineno, line in enumerate(_require(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


# -- synth -----------------------------------------------------------------------


def synth_split(cfg: ExperimentConfig, split: str):
    """Scenes of the train or test split, straight from the renderer."""
    actor = ACTORS[cfg.actor]
    style = render_style(cfg)
    if split == "train":
        return synth_sequence(cfg.n_train, cfg.action, actor, style, seed=cfg.seed)
    if split == "test":
        return synth_sequence(
            cfg.n_test, cfg.action, actor, style, seed=cfg.seed + 1, phase_offset=cfg.test_phase_offset
        )
    raise ValueError(f"unknown split {split!r}")


def plates_for(cfg: ExperimentConfig):
    return background_plates(render_style(cfg), cfg.n_plates, cfg.seed + 2)


def run_synth(cfg: ExperimentConfig, out) -> dict:
    data = _data(out)
    counts = {}
    for split in ("train", "test"):
        scenes = synth_split(cfg, split)
        write_scenes(data / split, scenes)
        counts[split] = len(scenes)
    plate_dir = data / "plates"
    plate_dir.mkdir(parents=True, exist_ok=True)
    plates = plates_for(cfg)
    for k, plate in enumerate(plates):
        write_pgm(plate_dir / f"plate_{k:04d}.pgm", plate)
    counts["plates"] = len(plates)
    save_config(cfg, Path(out) / "config.txt")
    return counts


def _load_split(out, split):
    try:
        return read_scenes(_require(_data(out) / split / "scenes.jsonl"))
    except (KeyError, ValueError, OSError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"cannot read {split} scenes: {exc}") from None


def _load_plates(out):
    paths = sorted((_data(out) / "plates").glob("plate_*.pgm"))
    if not paths:
        raise DataError(f"no background plates under {_data(out) / 'plates'}")
    return [read_pgm(p) for p in paths]


# -- train -----------------------------------------------------------------------


def run_train(cfg: ExperimentConfig, out) -> tuple[Path, Path]:
    scenes = _load_split(out, "train")
    model = train_part_model(scenes, cfg.train_config())
    model_path = Path(out) / "model.pfm"
    save_model(model, model_path)
    X = np.stack([s.pose2d for s in scenes])
    Y = np.stack([s.pose3d for s in scenes])
    lifter = train_lifter(X, Y, max_iter=cfg.gp_max_iter)
    lifter_path = Path(out) / "lifter.gpl"
    save_lifter(lifter, lifter_path)
    return model_path, lifter_path


# -- detect ----------------------------------------------------------------------


def background_model(cfg: ExperimentConfig, plates) -> BackgroundModel:
    bg = BackgroundModel(plates[0], cfg.bg_alpha, cfg.bg_threshold)
    for plate in plates[1:]:
        bg = update_background(bg, plate)
    return bg


def detect_params(cfg: ExperimentConfig) -> DetectParams:
    return DetectParams(cfg.thresh1, cfg.thresh2, cfg.top_n, shared_weight=cfg.shared_weight)


def detect_frames(cfg: ExperimentConfig, model, frames, plates, mode: str):
    """FrameResult per frame; masks come from background subtraction."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    bg = background_model(cfg, plates)
    params = detect_params(cfg)
    results = []
    for frame in frames:
        mask = clean_mask(subtract_background(bg, frame), cfg.min_blob_area)
        rs = part_responses(compute_hog(frame, model.cell_size, model.n_orientations), model)
        if mode == "baseline":
            results.append(detect_baseline(rs, model, mask, params))
        else:
            results.append(detect_enhanced(rs, model, mask, params))
    return results


def detection_record(frame_index: int, det, model) -> dict:
    return {
        "frame_index": int(frame_index),
        "parts": [
            {"name": p.name, "x_px": float(det.pixels[i, 0]), "y_px": float(det.pixels[i, 1]),
             "type": int(det.types[i])}
            for i, p in enumerate(model.parts)
        ],
        "root_score": float(det.root_score),
        "s_mc": None if det.s_mc is None else float(det.s_mc),
        "flags": list(det.flags),
    }


def run_detect(cfg: ExperimentConfig, out, mode: str) -> Path:
    model = load_model(_require(Path(out) / "model.pfm"))
    scenes = _load_split(out, "test")
    results = detect_frames(cfg, model, [s.frame for s in scenes], _load_plates(out), mode)
    path = Path(out) / f"detections_{mode}.jsonl"
    _write_lines(path, [detection_record(s.index, r.detection, model) for s, r in zip(scenes, results)])
    log.info("%s: %d frames, mean s_mc %.4f", mode, len(results),
             float(np.mean([r.detection.s_mc for r in results])))
    return path


def read_detections(path) -> tuple[list[int], np.ndarray, list[dict]]:
    """Frame indices, (frames, 13, 2) pixel positions in joint order, raw records."""
    records = _read_lines(Path(path))
    frames, points = [], []
    for rec in records:
        try:
            by_name = {p["name"]: (p["x_px"], p["y_px"]) for p in rec["parts"]}
            points.append([by_name[name] for name in JOINTS_2D])
            frames.append(int(rec["frame_index"]))
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed detection record ({exc})") from None
    return frames, np.asarray(points, dtype=np.float64).reshape(-1, len(JOINTS_2D), 2), records


# -- lift ------------------------------------------------------------------------


def run_lift(cfg: ExperimentConfig, out, mode: str) -> Path:
    lifter = load_lifter(_require(Path(out) / "lifter.gpl"))
    frames, points, _ = read_detections(Path(out) / f"detections_{mode}.jsonl")
    if not frames:
        raise DataError("no detections to lift")
    mean, var = lift(lifter, points.reshape(len(points), -1))
    path = Path(out) / f"predictions_{mode}.jsonl"
    _write_lines(path, [
        {"frame_index": f, "pose3d": [float(v) for v in mean[k]], "variance": [float(v) for v in var[k]]}
        for k, f in enumerate(frames)
    ])
    return path


def read_predictions(path) -> tuple[list[int], np.ndarray]:
    records = _read_lines(Path(path))
    try:
        frames = [int(r["frame_index"]) for r in records]
        poses = np.asarray([r["pose3d"] for r in records], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed prediction record ({exc})") from None
    return frames, poses


# -- eval ------------------------------------------------------------------------


def run_eval(cfg: ExperimentConfig, out, mode: str) -> Path:
    scenes = _load_split(out, "test")
    det_frames, points, _ = read_detections(Path(out) / f"detections_{mode}.jsonl")
    pred_frames, poses = read_predictions(Path(out) / f"predictions_{mode}.jsonl")
    truth = [s.index for s in scenes]
    for what, frames in (("detections", det_frames), ("predictions", pred_frames)):
        if frames != truth:
            raise DataError(f"{what} cover {len(frames)} frames but the test set has {len(truth)}")
    gt2d = np.stack([s.pose2d for s in scenes])
    gt3d = np.stack([s.pose3d for s in scenes])
    report = evaluate(points, gt2d, poses, gt3d, cfg.pck_alpha, cfg.min_sep)
    path = Path(out) / f"report_{mode}.json"
    path.write_text(report.to_json() + "\n")
    trace = joint_trace(poses, gt3d, cfg.trace_joint, cfg.trace_axis)
    plot_trace(trace, Path(out) / f"trace_{mode}.png")
    return path


# -- render ----------------------------------------------------------------------

_LEFT = (220, 60, 60)
_RIGHT = (60, 110, 230)
_CENTRE = (240, 200, 40)


def overlay(frame, points, scale: int = 3):
    """RGB image of ``frame`` with the 13-joint skeleton drawn on top."""
    from PIL import Image, ImageDraw

    gray = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
    img = Image.fromarray(gray, mode="L").convert("RGB")
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    pts = np.asarray(points, dtype=np.float64) * scale

    def colour(name):
        return _LEFT if name.startswith("left") else _RIGHT if name.startswith("right") else _CENTRE

    for i, parent in enumerate(PARENTS_2D):
        if parent >= 0:
            draw.line([tuple(pts[parent]), tuple(pts[i])], fill=colour(JOINTS_2D[i]), width=2)
    for i, name in enumerate(JOINTS_2D):
        x, y = pts[i]
        draw.ellipse([x - 3, y - 3, x + 3, y + 3], fill=colour(name))
    return img


def run_render(cfg: ExperimentConfig, out, mode: str) -> Path:
    scenes = _load_split(out, "test")
    frames, points, _ = read_detections(Path(out) / f"detections_{mode}.jsonl")
    by_frame = dict(zip(frames, points))
    target = Path(out) / f"render_{mode}"
    target.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        if s.index not in by_frame:
            raise DataError(f"no detection for test frame {s.index}")
        overlay(s.frame, by_frame[s.index]).save(target / f"frame_{s.index:04d}.png", format="PNG")
    return target

