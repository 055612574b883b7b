"""Experiment configuration stored as flat ``key = value`` text."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .model import ConfigError, TrainConfig
from .synth import ACTIONS, ACTORS


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    action: str = "walk"
    actor: str = "S1"
    n_train: int = 200
    n_test: int = 21
    seed: int = 0
    yaw_deg: float = 30.0
    test_phase_offset: float = 0.0025
    n_plates: int = 10
    # background subtraction
    bg_alpha: float = 0.05
    bg_threshold: float = 25.0
    min_blob_area: int = 20
    # features and part model
    cell_size: int = 4
    n_orientations: int = 9
    template_w: int = 4
    template_h: int = 4
    ridge_lambda: float = 1.0
    n_negatives: int = 400
    var_prior: float = 0.25
    # inference
    thresh1: float = 0.5
    thresh2: float = 0.2
    top_n: int = 5
    shared_weight: float = 0.0
    # lifting
    gp_max_iter: int = 500
    # evaluation
    pck_alpha: float = 0.2
    min_sep: float = 8.0
    trace_joint: str = "left_elbow"
    trace_axis: int = 1
    out_dir: str = "out"

    def __post_init__(self):
        checks = [
            (self.action in ACTIONS, f"action must be one of {ACTIONS}"),
            (self.actor in ACTORS, f"actor must be one of {tuple(ACTORS)}"),
            (self.n_train >= 8, "n_train must be >= 8"),
            (self.n_test >= 1, "n_test must be >= 1"),
            (self.seed >= 0, "seed must be >= 0"),
            (self.n_plates >= 1, "n_plates must be >= 1"),
            (0.0 < self.bg_alpha <= 1.0, "bg_alpha must be in (0, 1]"),
            (self.bg_threshold > 0, "bg_threshold must be positive"),
            (self.min_blob_area >= 0, "min_blob_area must be >= 0"),
            (self.cell_size >= 1, "cell_size must be >= 1"),
            (self.n_orientations >= 2, "n_orientations must be >= 2"),
            (self.template_w >= 1 and self.template_h >= 1, "template size must be >= 1"),
            (self.ridge_lambda >= 0, "ridge_lambda must be >= 0"),
            (self.n_negatives >= 1, "n_negatives must be >= 1"),
            (self.var_prior >= 0, "var_prior must be >= 0"),
            (0.0 <= self.thresh1 <= 1.0, "thresh1 must be in [0, 1]"),
            (0.0 <= self.thresh2 <= 1.0, "thresh2 must be in [0, 1]"),
            (self.top_n >= 1, "top_n must be >= 1"),
            (0.0 <= self.shared_weight <= 1.0, "shared_weight must be in [0, 1]"),
            (self.gp_max_iter >= 0, "gp_max_iter must be >= 0"),
            (self.pck_alpha > 0, "pck_alpha must be positive"),
            (self.min_sep > 0, "min_sep must be positive"),
            (self.trace_axis in (0, 1, 2), "trace_axis must be 0, 1 or 2"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            cell_size=self.cell_size,
            n_orientations=self.n_orientations,
            template_w=self.template_w,
            template_h=self.template_h,
            ridge_lambda=self.ridge_lambda,
            n_negatives=self.n_negatives,
            var_prior=self.var_prior,
            seed=self.seed,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key, raw):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return replace(base or ExperimentConfig(), **values)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.to_text())
