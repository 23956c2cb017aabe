import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from oracles import dice_handcount, hausdorff_bruteforce, ttest_one_tailed_mp
from scipy import stats

from polycl.metrics import (
    EvalReport,
    ScanScore,
    ShapeMismatchError,
    dice_score,
    hausdorff,
    paired_ttest_one_tailed,
    score_volume,
    significance_marker,
)

masks16 = arrays(bool, (16, 16))


def test_dice_two_empty_masks_is_one():
    z = np.zeros((4, 4), bool)
    assert dice_score(z, z) == 1.0


def test_dice_one_empty_is_zero():
    a = np.zeros((4, 4), bool)
    b = a.copy()
    b[1, 1] = True
    assert dice_score(a, b) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        dice_score(np.zeros((4, 4)), np.zeros((4, 5)))


def test_dice_all_4x4_row_patterns():
    # every pair of masks built from per-row bit patterns of one fixed row set
    rng = np.random.default_rng(7)
    pool = [rng.random((4, 4)) < p for p in np.linspace(0, 1, 12)]
    pool += [np.eye(4, dtype=bool), ~np.eye(4, dtype=bool), np.zeros((4, 4), bool)]
    for a, b in itertools.product(pool, repeat=2):
        assert dice_score(a, b) == float(dice_handcount(a, b))


@given(masks16, masks16)
def test_dice_symmetric_and_bounded(a, b):
    d = dice_score(a, b)
    assert 0.0 <= d <= 1.0
    assert d == dice_score(b, a)


@given(masks16)
def test_dice_self_is_one(a):
    assert dice_score(a, a) == 1.0


def test_hausdorff_known_value():
    a = np.zeros((10, 10), bool)
    b = np.zeros((10, 10), bool)
    a[0, 0] = True
    b[3, 4] = True
    assert hausdorff(a, b) == 5.0


def test_hausdorff_empty_is_none():
    a = np.zeros((5, 5), bool)
    b = a.copy()
    b[2, 2] = True
    assert hausdorff(a, b) is None
    assert hausdorff(b, a) is None
    assert hausdorff(a, a) is None


@settings(max_examples=60)
@given(masks16, masks16)
def test_hausdorff_matches_bruteforce(a, b):
    assert hausdorff(a, b) == hausdorff_bruteforce(a, b)


@given(masks16, masks16)
def test_hausdorff_symmetric_and_zero_on_self(a, b):
    assert hausdorff(a, b) == hausdorff(b, a)
    if a.any():
        assert hausdorff(a, a) == 0.0


def test_hausdorff_3d_stack():
    a = np.zeros((3, 6, 6), bool)
    b = np.zeros((3, 6, 6), bool)
    a[0, 2, 2] = True
    b[2, 2, 2] = True
    assert hausdorff(a, b) == 2.0


def _fixed_vectors():
    rng = np.random.default_rng(1234)
    out = []
    for k in range(20):
        n = 3 + k
        x = rng.normal(0.5, 0.2, n)
        y = x + rng.normal(-0.05 + 0.005 * k, 0.1, n)
        out.append((x, y))
    return out


@pytest.mark.parametrize("direction", ["greater", "less"])
def test_ttest_matches_independent_oracles(direction):
    for x, y in _fixed_vectors():
        res = paired_ttest_one_tailed(x, y, direction)
        t_ref, p_ref = ttest_one_tailed_mp(x, y, direction)
        assert res.df == len(x) - 1
        assert res.statistic == pytest.approx(t_ref, abs=1e-6)
        assert res.p_value == pytest.approx(p_ref, abs=1e-6)
        sp = stats.ttest_rel(x, y, alternative=direction)
        assert res.p_value == pytest.approx(sp.pvalue, abs=1e-6)


def test_ttest_direction_complements():
    x, y = _fixed_vectors()[5]
    g = paired_ttest_one_tailed(x, y, "greater").p_value
    l_ = paired_ttest_one_tailed(x, y, "less").p_value
    assert g + l_ == pytest.approx(1.0, abs=1e-12)


def test_ttest_zero_variance_is_degenerate():
    res = paired_ttest_one_tailed([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
    assert res.degenerate and math.isnan(res.p_value)


def test_ttest_input_errors():
    with pytest.raises(ShapeMismatchError):
        paired_ttest_one_tailed([1, 2, 3], [1, 2])
    with pytest.raises(ValueError):
        paired_ttest_one_tailed([1.0], [2.0])
    with pytest.raises(ValueError):
        paired_ttest_one_tailed([1, 2], [2, 3], "two-sided")


@pytest.mark.parametrize("p, marker", [(0.001, "**"), (0.0099, "**"), (0.01, "*"), (0.049, "*"), (0.05, ""), (float("nan"), "")])
def test_significance_marker(p, marker):
    assert significance_marker(p) == marker


def test_report_aggregate_single_run_and_excluded_hd():
    rep = EvalReport("m", [ScanScore("a", 0.8, 2.0), ScanScore("b", 0.6, None)])
    agg = rep.aggregate
    assert agg["mean_dice"] == pytest.approx(0.7)
    assert agg["std_dice"] == pytest.approx(0.1)
    assert agg["mean_hd"] == 2.0
    assert agg["hd_excluded"] == 1


def test_report_aggregate_over_runs_uses_run_means():
    rep = EvalReport("m")
    rep.extend(EvalReport("m", [ScanScore("a", 1.0, 1.0), ScanScore("b", 0.0, 3.0)]), run=0)
    rep.extend(EvalReport("m", [ScanScore("a", 1.0, 1.0), ScanScore("b", 1.0, 1.0)]), run=1)
    agg = rep.aggregate
    assert rep.runs == 2
    assert agg["mean_dice"] == pytest.approx(0.75)
    assert agg["std_dice"] == pytest.approx(0.25)


def test_report_roundtrip(tmp_path):
    rep = EvalReport("m", [ScanScore("a", 0.8, 2.0, 0), ScanScore("b", 0.6, None, 1)])
    rep.save(tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert back.per_scan == rep.per_scan and back.model == "m"
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "model,run,scan_id,dice,hausdorff"
    assert lines[2].endswith(",")


def test_score_volume():
    t = np.zeros((4, 8, 8), bool)
    t[1:3, 2:5, 2:5] = True
    s = score_volume(t, t, "x", run=2)
    assert (s.dice, s.hausdorff, s.run) == (1.0, 0.0, 2)
