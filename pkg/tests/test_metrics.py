import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ap_all_point, evaluate_brute

from gla.detection import BoxSet
from gla.metrics import (
    FP,
    IGNORED,
    TP,
    EvalResult,
    EvalSpec,
    PrCurve,
    evaluate,
    match_detections,
    pr_curve,
    results_table,
    voc_ap,
    write_results,
)

GOLDEN = Path(__file__).parent / "golden"


def _ap(flags, num_gt):
    flags = np.asarray(flags)
    return voc_ap(pr_curve(-np.arange(len(flags), dtype=float), flags, num_gt))


# --------------------------------------------------------------------------
# AP
# --------------------------------------------------------------------------


def test_ap_hand_example():
    curve = pr_curve(np.array([0.9, 0.8, 0.7]), np.array([TP, FP, TP]), 2)
    np.testing.assert_allclose(curve.recall, [0.5, 0.5, 1.0])
    np.testing.assert_allclose(curve.precision, [1.0, 0.5, 2 / 3])
    assert voc_ap(curve) == pytest.approx(5 / 6, abs=1e-9)


def test_ap_trivial_cases():
    assert _ap([TP, TP, TP], 3) == 1.0
    assert _ap([FP, FP], 3) == 0.0
    assert _ap([], 0) == 0.0


def test_ap_no_gt_with_detections_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert voc_ap(PrCurve(np.zeros(2), np.zeros(2), 0)) == 0.0
    assert any(issubclass(c.category, RuntimeWarning) for c in caught)


def test_pr_curve_drops_ignored_and_sorts_stably():
    curve = pr_curve(np.array([0.5, 0.9, 0.5, 0.7]), np.array([FP, TP, TP, IGNORED]), 2)
    # ranked: 0.9 TP, 0.5 FP (index 0), 0.5 TP (index 2)
    np.testing.assert_allclose(curve.recall, [0.5, 0.5, 1.0])
    np.testing.assert_allclose(curve.precision, [1.0, 0.5, 2 / 3])


flag_lists = st.lists(st.sampled_from([TP, FP]), min_size=0, max_size=30)


@pytest.mark.filterwarnings("ignore:AP requested")
@settings(max_examples=200, deadline=None)
@given(flags=flag_lists, extra=st.integers(0, 5))
def test_ap_matches_oracle_and_is_bounded(flags, extra):
    num_gt = sum(f == TP for f in flags) + extra
    ap = _ap(flags, num_gt)
    assert 0.0 <= ap <= 1.0
    assert ap == pytest.approx(ap_all_point(flags, num_gt), abs=1e-12)


@pytest.mark.filterwarnings("ignore:AP requested")
@settings(max_examples=100, deadline=None)
@given(flags=flag_lists, extra=st.integers(0, 5), data=st.data())
def test_ap_depends_only_on_rank(flags, extra, data):
    num_gt = sum(f == TP for f in flags) + extra
    scores = np.array(data.draw(st.permutations(range(len(flags)))), dtype=float) * 0.25 - 2.0
    flags = np.asarray(flags, dtype=np.int64)
    base = voc_ap(pr_curve(scores, flags, num_gt))
    for f in (lambda s: 3 * s + 1, np.exp, lambda s: np.arctan(s) * 100):
        assert voc_ap(pr_curve(f(scores), flags, num_gt)) == pytest.approx(base, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(flags=flag_lists, extra=st.integers(1, 5), pos=st.integers(0, 30))
def test_ap_monotone_under_additions(flags, extra, pos):
    num_gt = sum(f == TP for f in flags) + extra
    base = _ap(flags, num_gt)
    assert _ap(flags + [FP], num_gt) <= base + 1e-12
    k = min(pos, len(flags))
    assert _ap(flags[:k] + [TP] + flags[k:], num_gt) >= base - 1e-12


# --------------------------------------------------------------------------
# matching
# --------------------------------------------------------------------------


def _gts():
    # g0 easy, g1 hard; both class 0
    return BoxSet([[0, 0, 10, 10], [20, 0, 30, 10]], [0, 0], difficulty=[0, 2])


def test_match_exact_hit():
    flags, n = match_detections(BoxSet([[0, 0, 10, 10]], [0], [0.9]), BoxSet([[0, 0, 10, 10]], [0], difficulty=[0]))
    assert flags.tolist() == [TP] and n == 1


def test_match_threshold_boundary():
    gts = BoxSet([[0, 0, 10, 10]], [0], difficulty=[0])
    iou_04 = BoxSet([[0, 0, 25, 10]], [0], [0.9])  # 100 / 250
    iou_05 = BoxSet([[0, 0, 20, 10]], [0], [0.9])  # 100 / 200
    assert match_detections(iou_04, gts, 0.5)[0].tolist() == [FP]
    assert match_detections(iou_05, gts, 0.5)[0].tolist() == [TP]


def test_match_hand_traced_three_detections():
    dets = BoxSet([[0, 0, 10, 10], [20, 0, 30, 10], [50, 0, 60, 10]], [0, 0, 0], [0.9, 0.8, 0.7])
    flags, n = match_detections(dets, _gts(), 0.5, "Easy")
    assert flags.tolist() == [TP, IGNORED, FP] and n == 1
    flags, n = match_detections(dets, _gts(), 0.5, "Overall")
    assert flags.tolist() == [TP, TP, FP] and n == 2
    # exhaustive check over every score ordering of the three detections
    for perm in [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]:
        scores = np.array([0.9, 0.8, 0.7])[list(perm)]
        f, _ = match_detections(BoxSet(dets.boxes, dets.classes, scores), _gts(), 0.5, "Easy")
        assert f.tolist() == [TP, IGNORED, FP]


def test_match_prefers_highest_iou_even_if_ignored():
    gts = BoxSet([[0, 0, 10, 10], [2, 0, 12, 10]], [0, 0], difficulty=[0, 2])
    det = BoxSet([[2, 0, 12, 10]], [0], [0.9])  # IoU 0.67 with g0, 1.0 with hard g1
    assert match_detections(det, gts, 0.5, "Easy")[0].tolist() == [IGNORED]


def test_match_each_gt_once_and_score_order():
    gts = BoxSet([[0, 0, 10, 10]], [0], difficulty=[0])
    dets = BoxSet([[0, 0, 10, 10], [0, 0, 10, 9]], [0, 0], [0.3, 0.8])
    assert match_detections(dets, gts)[0].tolist() == [FP, TP]
    tie = BoxSet([[0, 0, 10, 10], [0, 0, 10, 10]], [0, 0], [0.5, 0.5])
    assert match_detections(tie, gts)[0].tolist() == [TP, FP]


def test_match_requires_same_class():
    gts = BoxSet([[0, 0, 10, 10]], [1], difficulty=[0])
    assert match_detections(BoxSet([[0, 0, 10, 10]], [0], [0.9]), gts)[0].tolist() == [FP]


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------


def _random_instance(seed, frames=20, classes=3):
    r = np.random.default_rng(seed)
    gts, dets, meta = {}, {}, {}
    for f in range(frames):
        ng = int(r.integers(0, 5))
        gb = r.random((ng, 2)) * 50
        gbox = np.concatenate([gb, gb + 5 + r.random((ng, 2)) * 15], axis=1)
        gts[f] = BoxSet(gbox, r.integers(0, classes, ng), difficulty=r.integers(0, 3, ng))
        nd = int(r.integers(0, 7))
        src = r.integers(0, max(ng, 1), nd)
        jitter = r.normal(0, 3, (nd, 4))
        dbox = gbox[src] + jitter if ng else r.random((nd, 4)) * 50
        dbox = np.concatenate([np.minimum(dbox[:, :2], dbox[:, 2:] - 1), np.maximum(dbox[:, 2:], dbox[:, :2] + 1)], axis=1)
        dcls = np.where(r.random(nd) < 0.8, gts[f].classes[src] if ng else 0, r.integers(0, classes, nd))
        dets[f] = BoxSet(dbox, dcls, r.random(nd))
        meta[f] = (("Clear", "DenseFog")[f % 2], ("Day", "Night")[(f // 2) % 2])
    return dets, gts, meta


def _as_lists(dets, gts):
    d = {f: [(int(c), float(s), b.tolist()) for b, c, s in zip(v.boxes, v.classes, v.scores)] for f, v in dets.items()}
    g = {f: [(int(c), int(k), b.tolist()) for b, c, k in zip(v.boxes, v.classes, v.difficulty)] for f, v in gts.items()}
    return d, g


@pytest.mark.parametrize("seed", range(10))
def test_evaluate_matches_exhaustive_oracle(seed):
    dets, gts, meta = _random_instance(seed)
    res = evaluate(dets, gts, meta)
    dl, gl = _as_lists(dets, gts)
    for level, lmax in (("Easy", 0), ("Moderate", 1), ("Hard", 2), ("Overall", None)):
        ref = evaluate_brute(dl, gl, 0.5, lmax, range(3))
        got = res.cells[("All", "All", level)]["ap"]
        assert set(got) == set(ref)
        for c in ref:
            assert got[c] == pytest.approx(ref[c], abs=1e-12)
        if ref:
            assert res.map(level=level) == pytest.approx(np.mean(list(ref.values())), abs=1e-12)


def test_perfect_detector_and_empty_detections():
    _, gts, meta = _random_instance(3)
    perfect = {f: BoxSet(g.boxes, g.classes, np.ones(len(g))) for f, g in gts.items()}
    res = evaluate(perfect, gts, meta)
    for key, cell in res.cells.items():
        if cell["ap"]:
            assert cell["map"] == 1.0, key
    empty = evaluate({}, gts, meta)
    assert empty.map() == 0.0


def test_overall_equals_easy_when_all_gts_easy():
    dets, gts, meta = _random_instance(4)
    gts = {f: BoxSet(g.boxes, g.classes, difficulty=np.zeros(len(g), dtype=int)) for f, g in gts.items()}
    res = evaluate(dets, gts, meta)
    for key in res.cells:
        if key[2] == "Overall":
            assert res.cells[key] == res.cells[(key[0], key[1], "Easy")]


def test_evaluate_groups_and_unknown_frames():
    dets, gts, meta = _random_instance(5)
    res = evaluate(dets, gts, meta)
    groups = {(w, d) for w, d, _ in res.cells}
    assert groups == {("All", "All"), ("Clear", "Day"), ("DenseFog", "Day"), ("Clear", "Night"), ("DenseFog", "Night")}
    assert np.isnan(res.map("Snow", "Day"))
    with pytest.raises(ValueError, match="99"):
        evaluate({99: BoxSet(scores=np.zeros(0))}, gts, meta)


def test_class_filter():
    dets, gts, meta = _random_instance(6)
    res = evaluate(dets, gts, meta, EvalSpec(classes=(0,)))
    assert set(res.cells[("All", "All", "Overall")]["ap"]) == {0}


def test_eval_spec_validation():
    with pytest.raises(ValueError):
        EvalSpec(iou_threshold=1.0)
    with pytest.raises(ValueError):
        EvalSpec(levels=("Extreme",))


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------


def _result(values):
    """``values[(weather, daytime, level)] = map``."""
    return EvalResult({k: {"ap": {0: v}, "map": v} for k, v in values.items()})


def test_one_run_one_cell():
    txt, csv_text = results_table({"A": _result({("Fog", "Day", "Overall"): 0.5})}, ["Fog"], ["Day"], ["Overall"])
    lines = txt.splitlines()
    assert lines[0].split("|")[1:-1] == [" Model ", " Day/Night ", " Fog O "]
    assert lines[2] == "| A     | Day       | 50.00 |"
    assert csv_text.splitlines()[1] == "A,Day,Fog,Overall,0.500000,,ok"


def test_two_runs_best_everywhere():
    cells = [("Fog", d, lv) for d in ("Day", "Night") for lv in ("Easy", "Overall")]
    runs = {"A": _result({k: 0.8 for k in cells}), "B": _result({k: 0.3 for k in cells})}
    txt, _ = results_table(runs, ["Fog"], ["Day", "Night"], ["Easy", "Overall"])
    for line in txt.splitlines()[2:6]:
        if line.startswith("| A"):
            assert line.count("**80.00**") == 2
        else:
            assert line.count("30.00*") == 2


def _three_runs():
    keys = [(w, d, lv) for w in ("Clear", "DenseFog") for d in ("Day", "Night") for lv in ("Easy", "Overall")]
    r = np.random.default_rng(0)
    vals = {name: {k: float(np.round(r.random(), 4)) for k in keys} for name in ("Camera", "Concat", "GLA")}
    vals["Concat"].pop(("DenseFog", "Night", "Easy"))
    vals["GLA"][("Clear", "Day", "Easy")] = vals["Camera"][("Clear", "Day", "Easy")]  # tie for best
    return {name: _result(v) for name, v in vals.items()}


def test_three_run_golden_files(tmp_path):
    runs = _three_runs()
    runs["Broken"] = None
    write_results(tmp_path, runs, ["Clear", "DenseFog"], ["Day", "Night"], ["Easy", "Overall"], notes={n: "abc123" for n in runs}, note_header="dataset")
    assert (tmp_path / "results.txt").read_bytes() == (GOLDEN / "three_runs.txt").read_bytes()
    assert (tmp_path / "results.csv").read_bytes() == (GOLDEN / "three_runs.csv").read_bytes()
