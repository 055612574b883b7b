from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_dt, brute_tree, random_responses, random_tree_model
from partforest.config import ConfigError
from partforest.features import compute_hog
from partforest.infer import (
    SENTINEL,
    ContractError,
    DetectParams,
    ResponseStack,
    backtrack,
    detect_baseline,
    detect_double_counts,
    detect_enhanced,
    detect_tree,
    distance_transform,
    enumerate_candidates,
    find_root,
    gate_responses,
    make_detection,
    optimize_global,
    overlap_credit,
    overlap_grid,
    part_responses,
    pass_messages,
    score_config,
    tree_score,
)
from partforest.imaging import ShapeError, integral_image
from partforest.model import PairwiseParams, PartSpec, PartTreeModel, PartType, part_box

# -- distance transform --------------------------------------------------------


def test_dt_worked_example():
    out, _, arg = distance_transform(np.array([3.0, 0.0, 0.0]), (0.0, -1.0, 0.0, -1.0))
    # q=2: max(3 - 4, 0 - 1, 0 - 0) = 0
    np.testing.assert_array_equal(out, [3.0, 2.0, 0.0])
    np.testing.assert_array_equal(arg, [0, 0, 2])


def test_dt_rigid_spring_shifts_scores():
    score = np.arange(6.0)
    out, _, arg = distance_transform(score, (0.0, -1e6, 0.0, -1e6), anchor=(1.0, 0.0))
    np.testing.assert_array_equal(arg[:5], [1, 2, 3, 4, 5])
    np.testing.assert_array_equal(out[:5], score[1:])


def test_dt_constant_shift(rng):
    s = rng.normal(size=(5, 7))
    w = (0.1, -0.4, -0.2, -0.7)
    a = distance_transform(s, w, (0.3, -1.2))
    b = distance_transform(s + 2.5, w, (0.3, -1.2))
    np.testing.assert_allclose(b[0], a[0] + 2.5, atol=1e-12)
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[2], b[2])


def test_dt_rejects_non_concave():
    with pytest.raises(ContractError):
        distance_transform(np.zeros(3), (0.0, 0.0, 0.0, -1.0))


@settings(max_examples=80, deadline=None)
@given(
    st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1),
    st.sampled_from([0.0, 0.5, -1.0, 1.75]), st.sampled_from([0.0, -2.0, 0.25]),
)
def test_dt_matches_brute_force(ny, nx, seed, ax, ay):
    r = np.random.default_rng(seed)
    s = r.normal(size=(ny, nx))
    w = (r.normal(0, 0.5), -r.uniform(0.05, 2), r.normal(0, 0.5), -r.uniform(0.05, 2))
    got = distance_transform(s, w, (ax, ay))
    exp = brute_dt(s, w, (ax, ay))
    np.testing.assert_allclose(got[0], exp[0], atol=1e-9)
    np.testing.assert_array_equal(got[1], exp[1])
    np.testing.assert_array_equal(got[2], exp[2])


def test_dt_ties_go_to_lower_index():
    # equal scores and a flat-bottomed spring centred between two cells
    out, ay, ax = distance_transform(np.zeros((2, 2)), (1.0, -1.0, 1.0, -1.0), (0.5, 0.5))
    exp = brute_dt(np.zeros((2, 2)), (1.0, -1.0, 1.0, -1.0), (0.5, 0.5))
    np.testing.assert_array_equal(out, exp[0])
    np.testing.assert_array_equal(ay, exp[1])
    np.testing.assert_array_equal(ax, exp[2])


# -- message passing -----------------------------------------------------------


def test_root_only_model_returns_best_type_map(rng):
    m = random_tree_model(rng, 1, 3)
    rs = random_responses(rng, m, (4, 5))
    root_map, tables = pass_messages(rs, m)
    np.testing.assert_array_equal(root_map, rs.scores[0].max(axis=0))
    np.testing.assert_array_equal(tables.root_type, rs.scores[0].argmax(axis=0))


@pytest.mark.parametrize("seed", range(12))
def test_tree_inference_matches_enumeration(seed):
    r = np.random.default_rng(seed)
    m = random_tree_model(r, int(r.integers(2, 5)), 2)
    rs = random_responses(r, m, (int(r.integers(1, 4)), int(r.integers(1, 4))))
    det, root_map = detect_tree(rs, m)
    score, cells, types = brute_tree(m, rs)
    assert root_map.max() == pytest.approx(score, abs=1e-9)
    assert tree_score(det, m, rs) == pytest.approx(score, abs=1e-9)
    np.testing.assert_array_equal(det.cells, cells)
    np.testing.assert_array_equal(det.types, types)


def test_backtrack_score_matches_tree_score_everywhere(rng):
    m = random_tree_model(rng, 4, 3)
    rs = random_responses(rng, m, (3, 4))
    root_map, tables = pass_messages(rs, m)
    for y in range(3):
        for x in range(4):
            d = backtrack((x, y), tables, m)
            assert tree_score(d, m, rs) == pytest.approx(root_map[y, x], abs=1e-9)
            assert d.root_score == pytest.approx(root_map[y, x], abs=1e-12)


def test_gate_requires_mask(rng):
    m = random_tree_model(rng, 2, 1)
    with pytest.raises(ConfigError):
        pass_messages(random_responses(rng, m, (3, 3)), m, None, gate=True)


def test_find_root_nms():
    root_map = np.array([[5.0, 4.0, 0.0, 5.0], [1.0, 0.0, 0.0, 2.0]])
    peaks = find_root(root_map, radius=1.0)
    assert peaks[0] == ((0, 0), 5.0) and peaks[1] == ((3, 0), 5.0)
    assert ((1, 0), 4.0) not in peaks
    assert find_root(root_map, min_score=4.5, radius=1.0) == [((0, 0), 5.0), ((3, 0), 5.0)]
    assert len(find_root(root_map, radius=0.0, max_results=3)) == 3


# -- responses and gating ------------------------------------------------------


def _one_part_model(cell_size=4, tw=2, th=2, channels=2, bias=0.5):
    filt = np.arange(tw * th * channels, dtype=float)
    return PartTreeModel([PartSpec(0, None, 1, tw, th, "a")], [[PartType(filt, bias, (0, 0))]], [None],
                         cell_size=cell_size, n_orientations=channels)


def test_part_responses_are_window_dot_products(rng):
    from partforest.features import FeatureMap, crop_feature

    m = _one_part_model()
    fm = FeatureMap(rng.normal(size=(4, 5, 2)), 4)
    rs = part_responses(fm, m)
    assert rs.scores[0].shape == (1, 4, 5)
    filt = m.types[0][0].filter
    for y in range(4):
        for x in range(5):
            ox, oy = x - 1, y - 1
            if ox < 0 or oy < 0 or ox + 2 > 5 or oy + 2 > 4:
                assert rs.scores[0][0, y, x] == SENTINEL
            else:
                assert rs.scores[0][0, y, x] == pytest.approx(crop_feature(fm, (ox, oy), 2, 2) @ filt + 0.5)
    with pytest.raises(ShapeError):
        part_responses(FeatureMap(fm.data, 8), m)


def test_overlap_grid_and_gating():
    m = _one_part_model(cell_size=2)
    mask = np.zeros((8, 8), dtype=bool)
    mask[:4, :4] = True
    ov = overlap_grid(mask, m.parts[0], 2, (4, 4))
    # cell (x, y) box covers pixels [2x-2, 2x+2) x [2y-2, 2y+2)
    assert ov[1, 1] == 1.0 and ov[0, 0] == 0.25 and ov[3, 3] == 0.0 and ov[1, 2] == 0.5
    rs = ResponseStack([np.ones((1, 4, 4))], 2)
    gated = gate_responses(rs, m, mask, 0.3)
    np.testing.assert_array_equal(gated.scores[0][0] == SENTINEL, ov < 0.3)


# -- configuration score and search ------------------------------------------------


def _two_limb_model():
    """Root with two sibling leaves named as a double-counting pair."""
    names = ("head", "left_knee", "right_knee")
    parts = [PartSpec(0, None, 1, 2, 2, names[0]), PartSpec(1, 0, 1, 2, 2, names[1]), PartSpec(2, 0, 1, 2, 2, names[2])]
    types = [[PartType(np.zeros(4), b, a)] for b, a in ((0.5, (0, 0)), (-0.25, (-1, 2)), (0.75, (1, 2)))]
    pw = PairwiseParams([[0.1]], [[[0.0, -0.5, 0.0, -0.5]]])
    return PartTreeModel(parts, types, [None, pw, pw], cell_size=4, n_orientations=1)


def test_score_config_frozen_value():
    m = _two_limb_model()
    mask = np.zeros((32, 32), dtype=bool)
    mask[:, :12] = True
    scores = [np.full((1, 8, 8), v) for v in (2.5, 1.75, 0.75)]
    rs = ResponseStack(scores, 4)
    d = make_detection(m, [[2, 2], [2, 4], [4, 4]], [0, 0, 0])
    # F: head box x 4..12 -> 1; left box 4..12 -> 1; right box 12..20 -> 0
    # unary: (2.5-0.5)*1+0.5 + (1.75+0.25)*1-0.25 + (0.75-0.75)*0+0.75 = 5.0
    # edges: left d=(1,0): -0.5 + 0.1 = -0.4 times 1; right d=(1,0) times 0
    assert score_config(d, m, rs, mask) == pytest.approx(4.6, abs=1e-12)


def test_score_config_with_full_mask_equals_tree_score(rng):
    m = _two_limb_model()
    rs = ResponseStack([rng.normal(size=(1, 8, 8)) for _ in range(3)], 4)
    d = make_detection(m, [[3, 3], [2, 5], [4, 5]], [0, 0, 0])
    full = np.ones((32, 32), dtype=bool)
    assert score_config(d, m, rs, full) == pytest.approx(tree_score(d, m, rs), abs=1e-12)


def test_overlap_credit_share():
    mask = np.ones((8, 8), dtype=bool)
    integral = integral_image(mask)
    a, b = (0, 0, 4, 4), (2, 0, 6, 4)
    assert overlap_credit(integral, a) == 1.0
    assert overlap_credit(integral, a, b, share=0.0) == 1.0
    assert overlap_credit(integral, a, b, share=0.5) == pytest.approx(1.0 - 0.5 * 8 / 16)
    assert overlap_credit(integral, a, a, share=1.0) == 0.0


def test_double_count_flags():
    m = _two_limb_model()
    d = make_detection(m, [[2, 2], [4, 4], [4, 4]], [0, 0, 0])
    assert detect_double_counts(d, m) == {(1, 2)}
    d = make_detection(m, [[2, 2], [4, 4], [5, 4]], [0, 0, 0])
    # boxes overlap by exactly half: not more than thresh1
    assert part_box(m.parts[1], d.cells[1], 4).intersection(part_box(m.parts[2], d.cells[2], 4)) == 32
    assert detect_double_counts(d, m, 0.5) == set()
    assert detect_double_counts(d, m, 0.49) == {(1, 2)}


def _brute_best(m, rs, mask, free, cands, baseline):
    import itertools

    doms = []
    for i in range(m.n_parts):
        base = (int(baseline.types[i]), tuple(int(v) for v in baseline.cells[i]))
        if i in free:
            dom = [(c.type, c.cell) for c in cands[i]]
            doms.append(dom + ([base] if base not in dom else []))
        else:
            doms.append([base])
    best = -np.inf
    for combo in itertools.product(*doms):
        d = make_detection(m, [c for _, c in combo], [t for t, _ in combo])
        best = max(best, score_config(d, m, rs, mask))
    return best


@pytest.mark.parametrize("seed", range(6))
def test_optimize_global_finds_exact_maximum(seed):
    r = np.random.default_rng(seed)
    m = _two_limb_model()
    rs = ResponseStack([r.normal(size=(1, 8, 8)) for _ in range(3)], 4)
    mask = np.zeros((32, 32), dtype=bool)
    mask[4:28, 6:26] = True
    base, _ = detect_tree(rs, m)
    cands, _ = enumerate_candidates(rs, m, mask, 0.2, 3, baselines=(base,))
    res = optimize_global(cands, m, rs, mask, {(1, 2)}, base)
    assert res.s_mc == pytest.approx(_brute_best(m, rs, mask, {0, 1, 2}, cands, base), abs=1e-12)
    assert res.s_mc >= score_config(base, m, rs, mask)
    assert res.s_mc == score_config(res, m, rs, mask)


def test_optimize_global_falls_back_to_coordinate_ascent(rng):
    m = _two_limb_model()
    rs = ResponseStack([rng.normal(size=(1, 8, 8)) for _ in range(3)], 4)
    mask = np.ones((32, 32), dtype=bool)
    base, _ = detect_tree(rs, m)
    cands, _ = enumerate_candidates(rs, m, mask, 0.2, 5, baselines=(base,))
    res = optimize_global(cands, m, rs, mask, {(1, 2)}, base, max_table=1)
    assert "coordinate_ascent" in res.flags
    assert res.s_mc >= score_config(base, m, rs, mask)


def test_optimize_global_without_flags_keeps_baseline(rng):
    m = _two_limb_model()
    rs = ResponseStack([rng.normal(size=(1, 8, 8)) for _ in range(3)], 4)
    mask = np.ones((32, 32), dtype=bool)
    base, _ = detect_tree(rs, m)
    res = optimize_global([[], [], []], m, rs, mask, set(), base)
    np.testing.assert_array_equal(res.cells, base.cells)
    assert res.s_mc == score_config(base, m, rs, mask)


def test_candidates_are_peaks_inside_the_blob():
    m = _two_limb_model()
    s = np.zeros((1, 8, 8))
    s[0, 2, 2], s[0, 2, 6], s[0, 6, 2] = 3.0, 4.0, 2.0
    rs = ResponseStack([s, s.copy(), s.copy()], 4)
    mask = np.zeros((32, 32), dtype=bool)
    mask[:, :16] = True
    cands, fallback = enumerate_candidates(rs, m, mask, 0.2, 5)
    assert [c.cell for c in cands[0][:2]] == [(2, 2), (2, 6)]
    assert all(c.blob_overlap >= 0.2 for c in cands[0])
    assert fallback == set()
    cands, fallback = enumerate_candidates(rs, m, np.zeros((32, 32), bool), 0.2, 5)
    assert fallback == {0, 1, 2}


# -- full detectors on rendered frames -----------------------------------------------


def test_detectors_on_rendered_frames(small_model, test_scenes):
    m = small_model
    for scene in test_scenes:
        rs = part_responses(compute_hog(scene.frame, m.cell_size, m.n_orientations), m)
        base = detect_baseline(rs, m, scene.true_mask)
        enh = detect_enhanced(rs, m, scene.true_mask)
        assert base.detection.s_mc == score_config(base.detection, m, rs, scene.true_mask)
        assert enh.detection.s_mc >= base.detection.s_mc
        assert enh.detection.pixels.shape == (13, 2)
        err = np.linalg.norm(base.detection.pixels - scene.pose2d.reshape(-1, 2), axis=1)
        assert np.median(err) < 8.0
        shared = detect_enhanced(rs, m, scene.true_mask, DetectParams(shared_weight=0.5))
        assert shared.detection.s_mc >= score_config(base.detection, m, rs, scene.true_mask, share=0.5)
        assert all(f.startswith(("double_count:", "fallback:", "coordinate_ascent")) for f in enh.detection.flags)
    assert replace(DetectParams(), top_n=2).top_n == 2
