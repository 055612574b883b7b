"""Part-tree mixture model: templates, type priors, deformation springs.

Positions are cell coordinates ``(x, y)`` on the feature grid. A part placed
at cell ``c`` uses the template window whose top-left cell is
``c - (w // 2, h // 2)``; its pixel location is the window centre.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .features import FeatureMap, compute_hog, crop_feature
from .imaging import BoundingBox, ShapeError
from .skeleton import JOINTS_2D, N_TYPES_2D, PARENTS_2D

log = logging.getLogger(__name__)

MAGIC = b"PFM1"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class SingularSystemError(ArithmeticError):
    pass


class FormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


@dataclass(frozen=True)
class PartSpec:
    part_id: int
    parent: int | None
    n_types: int
    template_w: int = 4
    template_h: int = 4
    name: str = ""


@dataclass
class PartType:
    filter: np.ndarray
    bias: float
    anchor: np.ndarray  # (dx, dy) cells from the parent

    def __post_init__(self):
        self.filter = np.asarray(self.filter, dtype=np.float64)
        self.anchor = np.asarray(self.anchor, dtype=np.float64).reshape(2)
        self.bias = float(self.bias)


@dataclass
class PairwiseParams:
    """Type co-occurrence scores and springs for one child/parent edge.

    ``co_occurrence[ti, tj]`` and ``deform[ti, tj] = (w_dx, w_dx2, w_dy, w_dy2)``
    are indexed by child type ``ti`` and parent type ``tj``.
    """

    co_occurrence: np.ndarray
    deform: np.ndarray

    def __post_init__(self):
        self.co_occurrence = np.asarray(self.co_occurrence, dtype=np.float64)
        self.deform = np.asarray(self.deform, dtype=np.float64)
        if self.deform.shape != self.co_occurrence.shape + (4,):
            raise ShapeError(
                f"deform shape {self.deform.shape} does not match co-occurrence {self.co_occurrence.shape}"
            )
        if np.any(self.deform[..., 1] >= 0) or np.any(self.deform[..., 3] >= 0):
            raise ValueError("quadratic deformation weights must be strictly negative")


@dataclass
class PartTreeModel:
    parts: list[PartSpec]
    types: list[list[PartType]]
    pairwise: list[PairwiseParams | None]
    cell_size: int = 8
    n_orientations: int = 9
    version: int = FORMAT_VERSION
    channels: int = field(default=0)

    def __post_init__(self):
        if not self.channels:
            self.channels = self.n_orientations
        validate_tree([p.parent for p in self.parts])
        for i, part in enumerate(self.parts):
            if part.part_id != i:
                raise ConfigError(f"part {i} has id {part.part_id}")
            if len(self.types[i]) != part.n_types:
                raise ConfigError(f"part {part.name or i}: {len(self.types[i])} types, expected {part.n_types}")
            dim = part.template_w * part.template_h * self.channels
            for t in self.types[i]:
                if t.filter.shape != (dim,):
                    raise ShapeError(f"part {part.name or i}: filter length {t.filter.size}, expected {dim}")
            pw = self.pairwise[i]
            if part.parent is None:
                if pw is not None:
                    raise ConfigError("root part cannot carry pairwise parameters")
            else:
                expected = (part.n_types, self.parts[part.parent].n_types)
                if pw is None or pw.co_occurrence.shape != expected:
                    raise ConfigError(f"part {part.name or i}: pairwise table must be {expected}")

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def root(self) -> int:
        return next(i for i, p in enumerate(self.parts) if p.parent is None)

    def children(self, i: int) -> list[int]:
        return [k for k, p in enumerate(self.parts) if p.parent == i]

    def ancestors(self, i: int) -> list[int]:
        out = []
        parent = self.parts[i].parent
        while parent is not None:
            out.append(parent)
            parent = self.parts[parent].parent
        return out

    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.parts)


def validate_tree(parents) -> None:
    """Check a parent list describes a single tree in topological order."""
    parents = list(parents)
    roots = [i for i, p in enumerate(parents) if p is None]
    if len(roots) != 1:
        raise ConfigError(f"expected exactly one root, found {len(roots)}")
    for i, p in enumerate(parents):
        if p is not None and not 0 <= p < i:
            raise ConfigError(f"part {i}: parent {p} must precede it")


# -- geometry ----------------------------------------------------------------


def window_origin(part: PartSpec, cell):
    return cell[0] - part.template_w // 2, cell[1] - part.template_h // 2


def cell_to_pixel(part: PartSpec, cell, cell_size: int) -> np.ndarray:
    """Pixel centre of the template window of ``part`` placed at ``cell``."""
    cell = np.asarray(cell, dtype=np.float64)
    half = np.array([part.template_w % 2, part.template_h % 2]) / 2.0
    return (cell + half) * cell_size


def pixel_to_cell(part: PartSpec, pixel, cell_size: int) -> np.ndarray:
    pixel = np.asarray(pixel, dtype=np.float64)
    half = np.array([part.template_w % 2, part.template_h % 2]) / 2.0
    return np.rint(pixel / cell_size - half).astype(np.int64)


def part_box(part: PartSpec, cell, cell_size: int) -> BoundingBox:
    ox, oy = window_origin(part, cell)
    return BoundingBox(
        int(ox) * cell_size, int(oy) * cell_size, part.template_w * cell_size, part.template_h * cell_size
    )


# -- training primitives -----------------------------------------------------


def _lloyd(points, centroids, max_iter):
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        labels = np.argmin(d2, axis=1)
        new = centroids.copy()
        for k in range(len(centroids)):
            members = points[labels == k]
            if len(members):
                new[k] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-served point
                new[k] = points[np.argmax(d2[np.arange(len(points)), labels])]
        if np.array_equal(new, centroids):
            break
        centroids = new
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    labels = np.argmin(d2, axis=1)
    sse = float(d2[np.arange(len(points)), labels].sum())
    return labels, centroids, sse


def cluster_part_types(offsets, n_types: int, seed: int = 0, restarts: int = 10, max_iter: int = 100):
    """k-means over part offsets; returns (labels, anchors).

    Best of ``restarts`` seeded Lloyd runs by within-cluster SSE. Clusters are
    reordered by anchor (x, then y) so the result does not depend on the
    initialisation order.
    """
    points = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    if n_types < 1 or len(points) < n_types:
        raise ConfigError(f"need at least {n_types} samples to form {n_types} types, got {len(points)}")
    rng = np.random.default_rng(seed)
    unique = np.unique(points, axis=0)
    best = None
    for _ in range(restarts):
        if len(unique) >= n_types:
            init = unique[rng.choice(len(unique), n_types, replace=False)]
        else:
            init = points[rng.choice(len(points), n_types, replace=False)]
        labels, centroids, sse = _lloyd(points, init.copy(), max_iter)
        if best is None or sse < best[2]:
            best = (labels, centroids, sse)
    _, centroids, _ = best
    order = np.lexsort((centroids[:, 1], centroids[:, 0]))
    centroids = centroids[order]
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1), centroids


def fit_templates(positives, negatives, ridge_lambda: float = 1.0):
    """Ridge regression of +1/-1 targets on features; returns (filter, bias).

    The intercept is not penalized.
    """
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    X = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    if ridge_lambda > 0:
        A = Xc.T @ Xc + ridge_lambda * np.eye(X.shape[1])
        w = np.linalg.solve(A, Xc.T @ yc)
    else:
        if not np.any(Xc):
            raise SingularSystemError("all training features are identical; use ridge_lambda > 0")
        w = np.linalg.lstsq(Xc, yc, rcond=None)[0]
    return w, float(y_mean - x_mean @ w)


def _spring(offsets, min_stiffness, max_stiffness, var_prior):
    """Axis-aligned Gaussian spring (w_dx, w_dx2, w_dy, w_dy2) for offsets from the anchor."""
    mu = offsets.mean(axis=0)
    var = offsets.var(axis=0) + var_prior
    out = []
    for m, v in zip(mu, var):
        w2 = -1.0 / (2.0 * v) if v > 0 else -max_stiffness
        w2 = float(np.clip(w2, -max_stiffness, -min_stiffness))
        v_eff = -1.0 / (2.0 * w2)
        out.extend([m / v_eff, w2])
    return np.array(out)


def fit_pairwise(
    offsets,
    child_labels,
    parent_labels,
    anchors,
    n_parent_types: int,
    min_stiffness: float = 1e-3,
    max_stiffness: float = 1e3,
    var_prior: float = 0.0,
) -> PairwiseParams:
    """Generative spring and co-occurrence fit for one edge.

    ``offsets`` are child-minus-parent cell offsets, one per training sample.
    Type pairs with fewer than two samples reuse the spring pooled over the
    whole part.
    """
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    child_labels = np.asarray(child_labels)
    parent_labels = np.asarray(parent_labels)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    n_child = len(anchors)
    rel = offsets - anchors[child_labels]
    pooled = _spring(rel, min_stiffness, max_stiffness, var_prior)
    deform = np.empty((n_child, n_parent_types, 4))
    cooc = np.empty((n_child, n_parent_types))
    for ti in range(n_child):
        n_i = int(np.sum(child_labels == ti))
        for tj in range(n_parent_types):
            sel = (child_labels == ti) & (parent_labels == tj)
            n_ij = int(sel.sum())
            cooc[ti, tj] = np.log((n_ij + 1.0) / (n_i + n_parent_types))
            deform[ti, tj] = _spring(rel[sel], min_stiffness, max_stiffness, var_prior) if n_ij >= 2 else pooled
    return PairwiseParams(co_occurrence=cooc, deform=deform)


# -- training from scenes ----------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Training settings. ``var_prior`` (cells^2) is added to every spring
    variance so that nearly rigid training offsets do not yield springs stiff
    enough to swamp appearance."""

    cell_size: int = 4
    n_orientations: int = 9
    template_w: int = 4
    template_h: int = 4
    ridge_lambda: float = 1.0
    n_negatives: int = 400
    var_prior: float = 0.25
    seed: int = 0


def default_parts(template_w: int = 4, template_h: int = 4, n_types=N_TYPES_2D) -> list[PartSpec]:
    return [
        PartSpec(i, None if p < 0 else p, int(n_types[i]), template_w, template_h, JOINTS_2D[i])
        for i, p in enumerate(PARENTS_2D)
    ]


def _type_offsets(parts, cells):
    """Offsets used to cluster types: child minus parent; the root uses root minus mean child."""
    offsets = np.zeros_like(cells, dtype=np.float64)
    for i, part in enumerate(parts):
        if part.parent is None:
            kids = [k for k, p in enumerate(parts) if p.parent == i]
            ref = cells[:, kids].mean(axis=1) if kids else cells[:, i]
            offsets[:, i] = cells[:, i] - ref
        else:
            offsets[:, i] = cells[:, i] - cells[:, part.parent]
    return offsets


def train_part_model(scenes, config: TrainConfig = TrainConfig(), parts=None) -> PartTreeModel:
    """Fit templates, type clusters and springs from annotated scenes."""
    parts = list(parts or default_parts(config.template_w, config.template_h))
    if len(scenes) < max(p.n_types for p in parts):
        raise ConfigError("not enough training scenes for the requested number of types")
    cs = config.cell_size
    fmaps = [compute_hog(s.frame, cs, config.n_orientations) for s in scenes]
    K = len(parts)
    joints = np.stack([np.asarray(s.pose2d).reshape(-1, 2) for s in scenes])  # (n, K, 2)
    if joints.shape[1] != K:
        raise ShapeError(f"scenes carry {joints.shape[1]} joints, model has {K} parts")
    cells = np.stack([[pixel_to_cell(parts[i], joints[n, i], cs) for i in range(K)] for n in range(len(scenes))])
    # types are clustered on sub-cell offsets; quantized ones collapse to too few points
    offsets = _type_offsets(parts, joints / cs)

    labels = np.zeros((len(scenes), K), dtype=np.int64)
    anchors = []
    for i, part in enumerate(parts):
        distinct = len(np.unique(np.round(offsets[:, i], 9), axis=0))
        if distinct < part.n_types:
            log.warning("part %s: only %d distinct offsets, using that many types", part.name, distinct)
            parts[i] = part = replace(part, n_types=distinct)
        labels[:, i], anc = cluster_part_types(offsets[:, i], part.n_types, seed=config.seed + i)
        anchors.append(anc)

    rng = np.random.default_rng(config.seed)
    types = []
    for i, part in enumerate(parts):
        pos_feats = []
        for n, fm in enumerate(fmaps):
            ox, oy = window_origin(part, cells[n, i])
            pos_feats.append(_safe_crop(fm, (ox, oy), part))
        negs = _sample_negatives(fmaps, cells, part, config.n_negatives, rng)
        part_types = []
        for t in range(part.n_types):
            sel = [f for f, lab in zip(pos_feats, labels[:, i]) if lab == t and f is not None]
            if not sel:
                raise ConfigError(f"part {part.name}: type {t} has no positive samples inside the frame")
            w, b = fit_templates(np.array(sel), negs, config.ridge_lambda)
            part_types.append(PartType(w, b, anchors[i][t]))
        types.append(part_types)

    pairwise = []
    for i, part in enumerate(parts):
        if part.parent is None:
            pairwise.append(None)
            continue
        j = part.parent
        pairwise.append(
            fit_pairwise(
                cells[:, i] - cells[:, j],
                labels[:, i],
                labels[:, j],
                anchors[i],
                parts[j].n_types,
                var_prior=config.var_prior,
            )
        )
    log.info("trained %d-part model on %d scenes", K, len(scenes))
    return PartTreeModel(parts, types, pairwise, cell_size=cs, n_orientations=config.n_orientations)


def _safe_crop(fm: FeatureMap, origin, part):
    try:
        return crop_feature(fm, origin, part.template_w, part.template_h)
    except ShapeError:
        return None


def _sample_negatives(fmaps, cells, part, n, rng):
    """Random windows whose centre is at least two cells from every annotated joint."""
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 100 * n:
            raise ConfigError("could not sample enough background windows")
        k = int(rng.integers(len(fmaps)))
        fm = fmaps[k]
        cx = int(rng.integers(part.template_w // 2, fm.cells_x - (part.template_w - part.template_w // 2) + 1))
        cy = int(rng.integers(part.template_h // 2, fm.cells_y - (part.template_h - part.template_h // 2) + 1))
        if np.min(np.max(np.abs(cells[k] - np.array([cx, cy])), axis=1)) < 2:
            continue
        crop = _safe_crop(fm, window_origin(part, (cx, cy)), part)
        if crop is not None:
            out.append(crop)
    return np.array(out)


# -- serialization -----------------------------------------------------------


def _pack_model(m: PartTreeModel) -> bytes:
    buf = io.BytesIO()
    w = buf.write
    w(MAGIC)
    w(struct.pack("<5I", m.version, m.n_parts, m.cell_size, m.n_orientations, m.channels))
    for p in m.parts:
        name = p.name.encode("utf-8")
        w(struct.pack("<iIIII", -1 if p.parent is None else p.parent, p.n_types, p.template_w, p.template_h, len(name)))
        w(name)
    for part_types in m.types:
        for t in part_types:
            w(struct.pack("<I", t.filter.size))
            w(t.filter.astype("<f8").tobytes())
            w(struct.pack("<3d", t.bias, *t.anchor))
    for pw in m.pairwise:
        if pw is None:
            continue
        w(pw.co_occurrence.astype("<f8").tobytes())
        w(pw.deform.astype("<f8").tobytes())
    return buf.getvalue()


def save_model(m: PartTreeModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_pack_model(m))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: needed {n} bytes, {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def load_model(path) -> PartTreeModel:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise FormatError("bad magic, not a part model file", 0)
    version, K, cell_size, n_orient, channels = r.unpack("<5I")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported model format version {version}", 4)
    parts = []
    for i in range(K):
        parent, n_types, tw, th, name_len = r.unpack("<iIIII")
        name = r.take(name_len).decode("utf-8")
        parts.append(PartSpec(i, None if parent < 0 else parent, n_types, tw, th, name))
    types = []
    for p in parts:
        part_types = []
        for _ in range(p.n_types):
            (n,) = r.unpack("<I")
            filt = r.floats(n)
            bias, ax, ay = r.unpack("<3d")
            part_types.append(PartType(filt, bias, (ax, ay)))
        types.append(part_types)
    pairwise = []
    for p in parts:
        if p.parent is None:
            pairwise.append(None)
            continue
        shape = (p.n_types, parts[p.parent].n_types)
        cooc = r.floats(shape[0] * shape[1]).reshape(shape)
        deform = r.floats(shape[0] * shape[1] * 4).reshape(shape + (4,))
        pairwise.append(PairwiseParams(cooc, deform))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after model", r.pos)
    return PartTreeModel(parts, types, pairwise, cell_size, n_orient, version, channels)
