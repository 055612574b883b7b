"""Inference over the part tree.

Responses, generalized distance transforms, (optionally blob-gated) leaf-to-root
message passing, root selection, backtracking, and the multi-cue
configuration search that re-places double-counted sibling parts.

Score grids are indexed ``[y, x]`` over feature cells; positions are ``(x, y)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy import ndimage

from .features import FeatureMap, window_stack
from .imaging import ShapeError, box_sums, integral_image
from .model import ConfigError, PartTreeModel, cell_to_pixel, part_box
from .skeleton import DOUBLE_COUNT_PAIRS

log = logging.getLogger(__name__)

# Score given to gated-out and out-of-image cells.
SENTINEL = -1e6

DEFAULT_THRESH1 = 0.5
DEFAULT_THRESH2 = 0.2
MAX_SEARCH_TABLE = 1_000_000


class ContractError(ValueError):
    pass


@dataclass
class ResponseStack:
    """Unary scores per part, each an array (n_types, cells_y, cells_x)."""

    scores: list[np.ndarray]
    cell_size: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores[0].shape[1:]


@dataclass
class MessageTables:
    """Per-part total scores and the argmax bookkeeping needed to backtrack.

    For a child part ``i`` and parent type ``tj``, ``child_type[i][tj]``,
    ``child_y[i][tj]`` and ``child_x[i][tj]`` give the best child type and cell
    for each parent cell.
    """

    scores: list[np.ndarray]
    child_type: list[np.ndarray | None]
    child_y: list[np.ndarray | None]
    child_x: list[np.ndarray | None]
    root_type: np.ndarray


@dataclass(frozen=True)
class Candidate:
    part_id: int
    type: int
    cell: tuple[int, int]
    unary: float
    blob_overlap: float


@dataclass
class Detection:
    cells: np.ndarray  # (K, 2) int, (x, y)
    types: np.ndarray  # (K,) int
    pixels: np.ndarray  # (K, 2) float
    root_score: float = float("nan")
    s_mc: float | None = None
    flags: tuple[str, ...] = ()

    def with_config(self, cells, types, model) -> "Detection":
        return make_detection(model, cells, types, self.root_score, flags=self.flags)


def make_detection(model: PartTreeModel, cells, types, root_score=float("nan"), s_mc=None, flags=()):
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    types = np.asarray(types, dtype=np.int64)
    pixels = np.stack([cell_to_pixel(p, cells[i], model.cell_size) for i, p in enumerate(model.parts)])
    return Detection(cells, types, pixels, float(root_score), s_mc, tuple(flags))


# -- unary responses -----------------------------------------------------------


def part_responses(fm: FeatureMap, m: PartTreeModel) -> ResponseStack:
    """Filter response plus bias for every part, type and cell.

    Cells whose template window leaves the feature grid score ``SENTINEL``.
    """
    if fm.cell_size != m.cell_size or fm.channels != m.channels:
        raise ShapeError(
            f"feature map (cell {fm.cell_size}, {fm.channels} ch) does not match model "
            f"(cell {m.cell_size}, {m.channels} ch)"
        )
    cy, cx = fm.cells_y, fm.cells_x
    stacks = {}
    scores = []
    for part, part_types in zip(m.parts, m.types):
        key = (part.template_w, part.template_h)
        if key not in stacks:
            stacks[key] = window_stack(fm, *key)
        win = stacks[key]
        filters = np.stack([t.filter for t in part_types], axis=1)
        biases = np.array([t.bias for t in part_types])
        resp = np.full((len(part_types), cy, cx), SENTINEL)
        oy, ox = part.template_h // 2, part.template_w // 2
        if win.shape[0] > 0 and win.shape[1] > 0:
            inner = np.moveaxis(win @ filters, -1, 0) + biases[:, None, None]
            resp[:, oy : oy + win.shape[0], ox : ox + win.shape[1]] = inner
        scores.append(resp)
    return ResponseStack(scores, fm.cell_size)


# -- generalized distance transform --------------------------------------------


@numba.njit(cache=True)
def _dt1d(f, lin, quad, shift, out, arg):
    """out[q] = max_p f[p] + lin*d + quad*d**2 with d = p - q - shift, quad < 0.

    Lower envelope of parabolas in the query coordinate s = q + shift; ties go
    to the lower p.
    """
    n = f.shape[0]
    a = -quad
    v = np.empty(n)  # parabola vertices
    h = np.empty(n)  # parabola heights
    idx = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    idx[0] = 0
    v[0] = 0.0 - lin / (2.0 * a)
    h[0] = -f[0]
    z[0] = -np.inf
    z[1] = np.inf
    for p in range(1, n):
        vp = p - lin / (2.0 * a)
        hp = -f[p]
        s = ((hp + a * vp * vp) - (h[k] + a * v[k] * v[k])) / (2.0 * a * (vp - v[k]))
        while s <= z[k]:
            k -= 1
            s = ((hp + a * vp * vp) - (h[k] + a * v[k] * v[k])) / (2.0 * a * (vp - v[k]))
        k += 1
        idx[k] = p
        v[k] = vp
        h[k] = hp
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        s = q + shift
        while z[k + 1] < s:
            k += 1
        p = idx[k]
        d = p - q - shift
        out[q] = f[p] + lin * d + quad * d * d
        arg[q] = p


@numba.njit(cache=True)
def _dt2d(score, wx, wx2, wy, wy2, ax, ay, out, arg_y, arg_x):
    ny, nx = score.shape
    tmp = np.empty((ny, nx))
    argx_rows = np.empty((ny, nx), dtype=np.int64)
    for y in range(ny):
        _dt1d(score[y], wx, wx2, ax, tmp[y], argx_rows[y])
    col = np.empty(ny)
    col_out = np.empty(ny)
    col_arg = np.empty(ny, dtype=np.int64)
    for x in range(nx):
        for y in range(ny):
            col[y] = tmp[y, x]
        _dt1d(col, wy, wy2, ay, col_out, col_arg)
        for y in range(ny):
            out[y, x] = col_out[y]
            arg_y[y, x] = col_arg[y]
            arg_x[y, x] = argx_rows[col_arg[y], x]


def distance_transform(score, deform, anchor=(0.0, 0.0)):
    """Max-convolve a score grid with a quadratic spring.

    ``transformed[q] = max_p score[p] + w_dx*dx + w_dx2*dx**2 + w_dy*dy + w_dy2*dy**2``
    with ``(dx, dy) = p - q - anchor``. Returns ``(transformed, arg_y, arg_x)``,
    the maximizing ``p`` for every ``q``. A 1-D score is treated as a single row.
    """
    w_dx, w_dx2, w_dy, w_dy2 = (float(v) for v in deform)
    if not (w_dx2 < 0 and w_dy2 < 0):
        raise ContractError(f"deformation must be strictly concave, got quadratic terms {w_dx2}, {w_dy2}")
    score = np.asarray(score, dtype=np.float64)
    one_d = score.ndim == 1
    grid = np.ascontiguousarray(score.reshape(1, -1) if one_d else score)
    out = np.empty_like(grid)
    arg_y = np.empty(grid.shape, dtype=np.int64)
    arg_x = np.empty(grid.shape, dtype=np.int64)
    _dt2d(grid, w_dx, w_dx2, w_dy, w_dy2, float(anchor[0]), float(anchor[1]), out, arg_y, arg_x)
    if one_d:
        return out[0], arg_y[0], arg_x[0]
    return out, arg_y, arg_x


# -- blob overlap ---------------------------------------------------------------


def overlap_grid(mask: np.ndarray, part, cell_size: int, shape) -> np.ndarray:
    """Overlap ratio of the part box with the mask for every cell of a grid."""
    integral = integral_image(mask)
    cy, cx = shape
    ys, xs = np.mgrid[0:cy, 0:cx]
    x0 = (xs - part.template_w // 2) * cell_size
    y0 = (ys - part.template_h // 2) * cell_size
    w, h = part.template_w * cell_size, part.template_h * cell_size
    return box_sums(integral, x0, y0, x0 + w, y0 + h) / float(w * h)


def gate_responses(rs: ResponseStack, m: PartTreeModel, mask: np.ndarray, thresh2: float) -> ResponseStack:
    """Replace unary scores by ``SENTINEL`` where the part box overlaps the blob less than ``thresh2``."""
    gated = []
    for part, resp in zip(m.parts, rs.scores):
        ov = overlap_grid(mask, part, rs.cell_size, resp.shape[1:])
        gated.append(np.where((ov < thresh2)[None], SENTINEL, resp))
    return ResponseStack(gated, rs.cell_size)


# -- message passing ---------------------------------------------------------


def pass_messages(
    rs: ResponseStack,
    m: PartTreeModel,
    mask: np.ndarray | None = None,
    gate: bool = False,
    thresh2: float = DEFAULT_THRESH2,
):
    """Leaf-to-root max-sum sweep. Returns ``(root_score_map, MessageTables)``."""
    if gate:
        if mask is None:
            raise ConfigError("gating requested without a blob mask")
        rs = gate_responses(rs, m, mask, thresh2)
    K = m.n_parts
    scores = [s.copy() for s in rs.scores]
    child_type = [None] * K
    child_y = [None] * K
    child_x = [None] * K
    shape = rs.shape
    for i in range(K - 1, -1, -1):
        part = m.parts[i]
        if part.parent is None:
            continue
        j = part.parent
        pw = m.pairwise[i]
        n_ci, n_pj = pw.co_occurrence.shape
        ct = np.zeros((n_pj,) + shape, dtype=np.int64)
        cyy = np.zeros((n_pj,) + shape, dtype=np.int64)
        cxx = np.zeros((n_pj,) + shape, dtype=np.int64)
        for tj in range(n_pj):
            best = np.full(shape, -np.inf)
            for ti in range(n_ci):
                dt, ay, ax = distance_transform(scores[i][ti], pw.deform[ti, tj], m.types[i][ti].anchor)
                dt = dt + pw.co_occurrence[ti, tj]
                better = dt > best
                best = np.where(better, dt, best)
                ct[tj] = np.where(better, ti, ct[tj])
                cyy[tj] = np.where(better, ay, cyy[tj])
                cxx[tj] = np.where(better, ax, cxx[tj])
            scores[j][tj] += best
        child_type[i], child_y[i], child_x[i] = ct, cyy, cxx
    root = m.root
    root_type = np.argmax(scores[root], axis=0)
    root_map = np.max(scores[root], axis=0)
    return root_map, MessageTables(scores, child_type, child_y, child_x, root_type)


def find_root(root_map: np.ndarray, min_score: float = -np.inf, radius: float = 4.0, max_results=None):
    """Greedy non-maximum suppression over a root score map.

    Returns ``[((x, y), score), ...]`` by descending score; equal scores keep the
    row-major first cell. Cells within Euclidean distance ``radius`` of a kept
    cell are suppressed; scores ``<= min_score`` are dropped.
    """
    flat = root_map.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))
    ny, nx = root_map.shape
    suppressed = np.zeros(flat.size, dtype=bool)
    ys, xs = np.divmod(np.arange(flat.size), nx)
    out = []
    for idx in order:
        if flat[idx] <= min_score:
            break
        if suppressed[idx]:
            continue
        y, x = int(ys[idx]), int(xs[idx])
        out.append(((x, y), float(flat[idx])))
        if max_results is not None and len(out) >= max_results:
            break
        suppressed |= (xs - x) ** 2 + (ys - y) ** 2 <= radius * radius
    return out


def backtrack(root_cell, tables: MessageTables, m: PartTreeModel) -> Detection:
    """Root-to-leaf argmax trace; the plain tree-model answer."""
    K = m.n_parts
    cells = np.zeros((K, 2), dtype=np.int64)
    types = np.zeros(K, dtype=np.int64)
    x, y = root_cell
    root = m.root
    cells[root] = (x, y)
    types[root] = tables.root_type[y, x]
    score = float(tables.scores[root][types[root], y, x])
    for i, part in enumerate(m.parts):
        if part.parent is None:
            continue
        j = part.parent
        tj = types[j]
        px, py = cells[j]
        types[i] = tables.child_type[i][tj, py, px]
        cells[i] = (tables.child_x[i][tj, py, px], tables.child_y[i][tj, py, px])
    return make_detection(m, cells, types, root_score=score)


def detect_tree(rs: ResponseStack, m: PartTreeModel, mask=None, gate=False, thresh2=DEFAULT_THRESH2):
    """Message passing, best root, backtrack. Returns (Detection, root_map)."""
    root_map, tables = pass_messages(rs, m, mask, gate, thresh2)
    root_part = m.parts[m.root]
    roots = find_root(root_map, radius=max(root_part.template_w, root_part.template_h), max_results=1)
    return backtrack(roots[0][0], tables, m), root_map


# -- configuration scores -------------------------------------------------------


def tree_score(d: Detection, m: PartTreeModel, rs: ResponseStack) -> float:
    """Full tree-model score: unary responses, springs and type co-occurrence."""
    total = 0.0
    for i, part in enumerate(m.parts):
        x, y = d.cells[i]
        total += rs.scores[i][d.types[i], y, x]
    for i, part in enumerate(m.parts):
        if part.parent is None:
            continue
        total += _edge_term(m, i, d.types[i], d.types[part.parent], d.cells[i] - d.cells[part.parent])
    return float(total)


def _edge_term(m, i, ti, tj, offset):
    pw = m.pairwise[i]
    w = pw.deform[ti, tj]
    dx, dy = np.asarray(offset, dtype=np.float64) - m.types[i][ti].anchor
    return w[0] * dx + w[1] * dx * dx + w[2] * dy + w[3] * dy * dy + pw.co_occurrence[ti, tj]


def partner_map(m: PartTreeModel, pairs=DOUBLE_COUNT_PAIRS) -> dict[int, int]:
    names = m.names()
    out = {}
    for a, b in pairs:
        if a in names and b in names:
            ia, ib = names.index(a), names.index(b)
            out[ia], out[ib] = ib, ia
    return out


def _boxes(m, part_ids, cells):
    """Half-open pixel boxes (x0, y0, x1, y1) for parallel arrays of parts and cells."""
    cs = m.cell_size
    tw = np.array([m.parts[i].template_w for i in part_ids])
    th = np.array([m.parts[i].template_h for i in part_ids])
    x0 = (cells[:, 0] - tw // 2) * cs
    y0 = (cells[:, 1] - th // 2) * cs
    return x0, y0, x0 + tw * cs, y0 + th * cs


def overlap_credit(integral, box_a, box_b=None, share: float = 0.0):
    """Blob credit of box ``a``: its foreground fraction, less ``share`` times the
    foreground it shares with box ``b``.

    Arrays broadcast, so a column of ``a`` boxes against a row of ``b`` boxes
    gives the full table.
    """
    ax0, ay0, ax1, ay1 = box_a
    area = (ax1 - ax0) * (ay1 - ay0)
    fg = box_sums(integral, ax0, ay0, ax1, ay1)
    if box_b is None or share == 0.0:
        return fg / area
    bx0, by0, bx1, by1 = box_b
    shared = box_sums(
        integral, np.maximum(ax0, bx0), np.maximum(ay0, by0), np.minimum(ax1, bx1), np.minimum(ay1, by1)
    )
    return (fg - share * shared) / area


def score_config(
    d: Detection, m: PartTreeModel, rs: ResponseStack, mask: np.ndarray, pairs=DOUBLE_COUNT_PAIRS, share: float = 0.0
) -> float:
    """Multi-cue score S_MC of a configuration.

    Appearance terms (response minus bias) are weighted by each part's blob
    credit F, edge terms by the product of both endpoints' credits, and type
    biases are added unweighted. F is the part box's foreground fraction. With
    ``share > 0`` the foreground inside the intersection of a left/right
    sibling pair's boxes is discounted by that fraction for each of the two,
    so stacking both siblings on one patch earns less than covering two.
    """
    integral = integral_image(mask)
    partners = partner_map(m, pairs)
    ids = np.arange(m.n_parts)
    boxes = _boxes(m, ids, d.cells)
    F = np.empty(m.n_parts)
    for i in ids:
        own = tuple(b[i] for b in boxes)
        other = tuple(b[partners[i]] for b in boxes) if i in partners else None
        F[i] = overlap_credit(integral, own, other, share)
    total = 0.0
    for i in ids:
        t = d.types[i]
        bias = m.types[i][t].bias
        x, y = d.cells[i]
        total += (rs.scores[i][t, y, x] - bias) * F[i] + bias
    for i, part in enumerate(m.parts):
        if part.parent is None:
            continue
        j = part.parent
        total += _edge_term(m, i, d.types[i], d.types[j], d.cells[i] - d.cells[j]) * F[i] * F[j]
    return float(total)


# -- candidates and double counting --------------------------------------------


def pair_label(m: PartTreeModel, a: int, b: int) -> str:
    return f"{m.parts[a].name or a}/{m.parts[b].name or b}"


def detect_double_counts(d: Detection, m: PartTreeModel, thresh1: float = DEFAULT_THRESH1, pairs=DOUBLE_COUNT_PAIRS):
    """Sibling pairs whose part boxes share more than ``thresh1`` of the smaller box."""
    names = m.names()
    flagged = set()
    for a, b in pairs:
        if a not in names or b not in names:
            continue
        ia, ib = names.index(a), names.index(b)
        box_a = part_box(m.parts[ia], d.cells[ia], m.cell_size)
        box_b = part_box(m.parts[ib], d.cells[ib], m.cell_size)
        if box_a.intersection(box_b) > thresh1 * min(box_a.area, box_b.area):
            flagged.add((ia, ib))
    return flagged


def enumerate_candidates(
    rs: ResponseStack,
    m: PartTreeModel,
    mask: np.ndarray,
    thresh2: float = DEFAULT_THRESH2,
    top_n: int = 5,
    baselines=(),
):
    """Per-part candidate lists and the set of parts that fell back to baselines only.

    Candidates are local maxima (3x3) of each type's unary map whose part box
    overlaps the blob by at least ``thresh2``, the ``top_n`` best per type. The
    positions of every detection in ``baselines`` are always included.
    """
    out = []
    fallback = set()
    for i, part in enumerate(m.parts):
        resp = rs.scores[i]
        ov = overlap_grid(mask, part, rs.cell_size, resp.shape[1:])
        seen = set()
        cands = []
        for t in range(resp.shape[0]):
            r = resp[t]
            peak = (r == ndimage.maximum_filter(r, size=3, mode="constant", cval=-np.inf)) & (r > SENTINEL / 2)
            peak &= ov >= thresh2
            ys, xs = np.nonzero(peak)
            vals = r[ys, xs]
            order = np.lexsort((ys * r.shape[1] + xs, -vals))[:top_n]
            for k in order:
                key = (t, int(xs[k]), int(ys[k]))
                seen.add(key)
                cands.append(Candidate(i, t, (int(xs[k]), int(ys[k])), float(vals[k]), float(ov[ys[k], xs[k]])))
        if not cands:
            fallback.add(i)
        for base in baselines:
            t = int(base.types[i])
            x, y = (int(v) for v in base.cells[i])
            if (t, x, y) not in seen:
                seen.add((t, x, y))
                cands.append(Candidate(i, t, (x, y), float(resp[t, y, x]), float(ov[y, x])))
        out.append(cands)
    return out, fallback


# -- global configuration search -------------------------------------------------


def _align(vars_, table, scope):
    """Broadcast ``table`` over ``vars_`` to the axis order of ``scope``."""
    perm = sorted(range(len(vars_)), key=lambda k: scope.index(vars_[k]))
    t = np.transpose(table, perm)
    present = [vars_[k] for k in perm]
    shape = [t.shape[present.index(v)] if v in present else 1 for v in scope]
    return t.reshape(shape)


def _max_sum(factors, domain_sizes, cap):
    """Exact maximization of a sum of small factors by variable elimination.

    Returns the assignment (one index per variable), or None when some
    elimination table would exceed ``cap`` entries. Ties resolve to the lowest
    index of each eliminated variable.
    """
    factors = [(tuple(v), np.asarray(t, dtype=np.float64)) for v, t in factors]
    remaining = [v for v in range(len(domain_sizes))]
    # plan the order first so oversized searches fail before any work
    plan_scopes = [set(v) for v, _ in factors]
    order = []
    rem = set(remaining)
    while rem:
        best = None
        for v in sorted(rem):
            scope = set().union(*[s for s in plan_scopes if v in s]) | {v}
            size = int(np.prod([domain_sizes[u] for u in scope]))
            if best is None or size < best[1]:
                best = (v, size, scope)
        v, size, scope = best
        if size > cap:
            return None
        order.append(v)
        plan_scopes = [s for s in plan_scopes if v not in s] + [scope - {v}]
        rem.discard(v)

    traces = []
    for v in order:
        touching = [f for f in factors if v in f[0]]
        factors = [f for f in factors if v not in f[0]]
        scope = sorted(set().union(*[set(s) for s, _ in touching]) | {v})
        total = np.zeros([domain_sizes[u] for u in scope])
        for s, t in touching:
            total = total + _align(s, t, scope)
        axis = scope.index(v)
        rest = tuple(u for u in scope if u != v)
        traces.append((v, rest, np.argmax(total, axis=axis)))
        factors.append((rest, np.max(total, axis=axis)))

    assign = {}
    for v, rest, arg in reversed(traces):
        assign[v] = int(arg[tuple(assign[u] for u in rest)]) if rest else int(arg)
    return [assign[v] for v in range(len(domain_sizes))]


def _search_factors(m, rs, integral, domains, partners, share):
    """Factor tables of S_MC over per-part candidate domains.

    ``domains[i]`` is a list of (type, (x, y)). Factors are (variables, table).
    """
    K = m.n_parts
    cells = [np.array([c for _, c in domains[i]], dtype=np.int64).reshape(-1, 2) for i in range(K)]
    types = [np.array([t for t, _ in domains[i]], dtype=np.int64) for i in range(K)]
    boxes = [_boxes(m, [i] * len(domains[i]), cells[i]) for i in range(K)]

    credit = []  # (vars, table) giving F_i
    for i in range(K):
        if i in partners:
            j = partners[i]
            a = tuple(b[:, None] for b in boxes[i])
            b = tuple(bb[None, :] for bb in boxes[j])
            credit.append(((i, j), overlap_credit(integral, a, b, share)))
        else:
            credit.append(((i,), overlap_credit(integral, boxes[i])))

    factors = []
    for i in range(K):
        bias = np.array([m.types[i][t].bias for t in types[i]])
        unary = rs.scores[i][types[i], cells[i][:, 1], cells[i][:, 0]]
        vars_, F = credit[i]
        scope = list(vars_)
        factors.append((tuple(scope), _align((i,), unary - bias, scope) * F + _align((i,), bias, scope)))
    for i, part in enumerate(m.parts):
        if part.parent is None:
            continue
        j = part.parent
        pw = m.pairwise[i]
        anchors = np.stack([m.types[i][t].anchor for t in range(len(m.types[i]))])
        off = cells[i][:, None, :] - cells[j][None, :, :] - anchors[types[i]][:, None, :]
        w = pw.deform[types[i][:, None], types[j][None, :]]
        edge = (
            w[..., 0] * off[..., 0]
            + w[..., 1] * off[..., 0] ** 2
            + w[..., 2] * off[..., 1]
            + w[..., 3] * off[..., 1] ** 2
            + pw.co_occurrence[types[i][:, None], types[j][None, :]]
        )
        (vi, Fi), (vj, Fj) = credit[i], credit[j]
        scope = sorted({i, j} | set(vi) | set(vj))
        factors.append(
            (tuple(scope), _align((i, j), edge, scope) * _align(vi, Fi, scope) * _align(vj, Fj, scope))
        )
    return factors


def optimize_global(
    candidates,
    m: PartTreeModel,
    rs: ResponseStack,
    mask: np.ndarray,
    flagged_pairs,
    baseline: Detection,
    max_table: int = MAX_SEARCH_TABLE,
    pairs=DOUBLE_COUNT_PAIRS,
    max_sweeps: int = 50,
    share: float = 0.0,
) -> Detection:
    """Re-place flagged sibling pairs (and their ancestors) to maximize S_MC.

    All other parts stay at ``baseline``. The maximum over the Cartesian
    product of candidate lists is found exactly by variable elimination; if an
    elimination table would exceed ``max_table`` entries the search falls back
    to coordinate ascent from the baseline (flag ``coordinate_ascent``). Single
    part coordinate-ascent sweeps over the same parts follow until no move
    improves the score. The result never scores below the baseline.
    """
    base_score = score_config(baseline, m, rs, mask, pairs, share)
    if not flagged_pairs:
        return replace(baseline, s_mc=base_score)
    K = m.n_parts
    free = set()
    for a, b in flagged_pairs:
        for i in (a, b):
            free.add(i)
            free.update(m.ancestors(i))
    domains = []
    for i in range(K):
        base = (int(baseline.types[i]), tuple(int(v) for v in baseline.cells[i]))
        if i in free:
            dom = [(c.type, tuple(c.cell)) for c in candidates[i]]
            if base not in dom:
                dom.append(base)
        else:
            dom = [base]
        domains.append(dom)

    integral = integral_image(mask)
    partners = partner_map(m, pairs)
    flags = list(baseline.flags)
    factors = _search_factors(m, rs, integral, domains, partners, share)
    assign = _max_sum(factors, [len(d) for d in domains], max_table)
    best, best_score = baseline, base_score
    if assign is None:
        flags.append("coordinate_ascent")
    else:
        cand = _from_domains(m, domains, assign, baseline)
        cand_score = score_config(cand, m, rs, mask, pairs, share)
        if cand_score >= best_score:
            best, best_score = cand, cand_score

    # coordinate ascent over the free parts
    current = [domains[i].index((int(best.types[i]), tuple(int(v) for v in best.cells[i]))) for i in range(K)]
    for _ in range(max_sweeps):
        improved = False
        for i in sorted(free):
            for k in range(len(domains[i])):
                if k == current[i]:
                    continue
                trial = list(current)
                trial[i] = k
                det = _from_domains(m, domains, trial, baseline)
                sc = score_config(det, m, rs, mask, pairs, share)
                if sc > best_score:
                    best, best_score, current = det, sc, trial
                    improved = True
        if not improved:
            break
    return replace(best, s_mc=best_score, flags=tuple(flags))


def _from_domains(m, domains, assign, baseline):
    cells = [domains[i][k][1] for i, k in enumerate(assign)]
    types = [domains[i][k][0] for i, k in enumerate(assign)]
    return make_detection(m, cells, types, baseline.root_score, flags=baseline.flags)


# -- full per-frame detectors -----------------------------------------------------


@dataclass(frozen=True)
class DetectParams:
    thresh1: float = DEFAULT_THRESH1
    thresh2: float = DEFAULT_THRESH2
    top_n: int = 5
    max_table: int = MAX_SEARCH_TABLE
    shared_weight: float = 0.0


@dataclass
class FrameResult:
    detection: Detection
    baseline: Detection
    root_map: np.ndarray
    flagged: set = field(default_factory=set)


def detect_baseline(rs: ResponseStack, m: PartTreeModel, mask=None, params: DetectParams = DetectParams()) -> FrameResult:
    """Plain tree model; S_MC is still reported when a mask is available."""
    det, root_map = detect_tree(rs, m)
    if mask is not None:
        det = replace(det, s_mc=score_config(det, m, rs, mask, share=params.shared_weight))
    return FrameResult(det, det, root_map, detect_double_counts(det, m, params.thresh1))


def detect_enhanced(rs: ResponseStack, m: PartTreeModel, mask: np.ndarray, params: DetectParams = DetectParams()) -> FrameResult:
    """Blob-gated root search followed by the multi-cue configuration search."""
    plain, _ = detect_tree(rs, m)
    gated, root_map = detect_tree(rs, m, mask, gate=True, thresh2=params.thresh2)
    share = params.shared_weight
    s_plain = score_config(plain, m, rs, mask, share=share)
    s_gated = score_config(gated, m, rs, mask, share=share)
    start = gated if s_gated >= s_plain else plain
    cands, fallback = enumerate_candidates(rs, m, mask, params.thresh2, params.top_n, baselines=(gated, plain))
    flagged = detect_double_counts(plain, m, params.thresh1) | detect_double_counts(gated, m, params.thresh1)
    start = replace(start, flags=tuple(f"fallback:{m.parts[i].name or i}" for i in sorted(fallback)))
    result = optimize_global(cands, m, rs, mask, flagged, start, params.max_table, share=share)
    labels = tuple(sorted(pair_label(m, a, b) for a, b in flagged))
    result = replace(result, flags=result.flags + tuple(f"double_count:{lab}" for lab in labels))
    plain = replace(plain, s_mc=s_plain)
    return FrameResult(result, plain, root_map, flagged)
