import csv
import io
import json
import statistics
import warnings
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p4rec import evaluation as ev
from p4rec.rewards import RewardWeights

CAND = [0.9, 0.4, 0.7, 0.2, 0.5]
BASE = [0.6, 0.4, 0.8, -0.1, 0.25]


@contextmanager
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


vectors = st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=20)


# -- win rate --------------------------------------------------------------------------

def test_win_rate_examples():
    assert ev.win_rate([2, 3], [1, 2]) == 1.0
    assert ev.win_rate(CAND, CAND) == 0.0
    assert ev.win_rate(CAND, BASE) == 0.6  # wins at 0, 3, 4; tie at 1; loss at 2


def test_win_rate_length_mismatch():
    with pytest.raises(ValueError):
        ev.win_rate([1.0], [1.0, 2.0])


@given(vectors)
def test_win_rate_self_zero(x):
    assert ev.win_rate(x, x) == 0.0


@given(st.lists(st.tuples(st.integers(-3, 3), st.integers(-3, 3)), min_size=1, max_size=20))
def test_win_rate_complement(pairs):
    c, b = [p[0] for p in pairs], [p[1] for p in pairs]
    total = ev.win_rate(c, b) + ev.win_rate(b, c)
    ties = any(x == y for x, y in pairs)
    assert total <= 1.0 + 1e-12
    assert (abs(total - 1.0) < 1e-12) == (not ties)


# -- increases -------------------------------------------------------------------------

def test_increase_examples():
    inc = ev.score_increases([3.0], [2.0])
    assert inc.absolute == 1.0 and inc.percentage == 50.0
    assert ev.score_increases([-1.0], [-2.0]).percentage == 50.0


def test_increase_fixture_spreadsheet():
    inc = ev.score_increases(CAND, BASE)
    diffs = [0.3, 0.0, -0.1, 0.3, 0.25]
    pcts = [0.3 / 0.6 * 100, 0.0, -0.1 / 0.8 * 100, 0.3 / 0.1 * 100, 0.25 / 0.25 * 100]
    assert inc.absolute == pytest.approx(sum(diffs) / 5, abs=1e-12)
    assert inc.percentage == pytest.approx(sum(pcts) / 5, abs=1e-9)
    assert inc.excluded == 0


def test_increase_zero_baseline_excluded():
    with pytest.warns(UserWarning):
        inc = ev.score_increases([1.0, 3.0], [0.0, 2.0])
    assert inc.excluded == 1 and inc.percentage == 50.0 and inc.absolute == 1.0


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=20))
def test_absolute_antisymmetric(pairs):
    c, b = [p[0] for p in pairs], [p[1] for p in pairs]
    with _quiet():
        assert ev.score_increases(c, b).absolute == pytest.approx(-ev.score_increases(b, c).absolute, abs=1e-9)


@given(vectors)
def test_self_comparison_all_zero(x):
    with _quiet():
        inc = ev.score_increases(x, x)
    assert inc.absolute == 0.0 and (inc.percentage == 0.0 or np.isnan(inc.percentage))
    assert ev.win_rate(x, x) == 0.0


# -- summary statistics ------------------------------------------------------------------

def test_single_context_stderr_zero():
    assert ev.mean_stderr([0.42]) == (0.42, 0.0)


@settings(max_examples=30)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=30))
def test_stderr_matches_statistics_module(x):
    m, se = ev.mean_stderr(x)
    assert m == pytest.approx(statistics.fmean(x), abs=1e-9)
    assert se == pytest.approx(statistics.stdev(x) / len(x) ** 0.5, abs=1e-9)


# -- reports -------------------------------------------------------------------------------

def _reports():
    rng = np.random.default_rng(0)
    base = {k: rng.normal(size=5) for k in ev.METRICS}
    cand = {k: v + rng.normal(size=5) for k, v in base.items()}
    return [ev.build_report("anchor", base, fingerprint="abc", seed=1),
            ev.build_report("rlaif", cand, base, "anchor", fingerprint="abc", seed=1)]


def test_report_json_schema_and_determinism(tmp_path):
    reps = _reports()
    p1 = ev.emit_report(reps, tmp_path / "a")
    p2 = ev.emit_report(reps, tmp_path / "b")
    for k in ("json", "csv", "svg"):
        assert p1[k].read_bytes() == p2[k].read_bytes()
    doc = json.loads(p1["json"].read_text())
    ev.validate_report_document(doc)
    assert doc["reports"][1]["metrics"]["joint"]["win_rate"] == reps[1].metrics["joint"].win_rate


def test_csv_row_count(tmp_path):
    reps = _reports()
    rows = list(csv.reader(io.StringIO(ev.report_csv(reps))))
    assert len(rows) - 1 == len(reps) * len(ev.METRICS)


def test_svg_is_valid_and_dateless(tmp_path):
    path = ev.emit_report(_reports(), tmp_path, formats=("svg",))["svg"]
    text = path.read_text()
    assert text.lstrip().startswith("<?xml") and "<svg" in text and "dc:date" not in text


def test_validation_rejects_bad_documents():
    with pytest.raises(ValueError):
        ev.validate_report_document({"schema_version": 99, "reports": []})
    doc = ev.report_document(_reports())
    doc["reports"][1]["metrics"]["nli"]["win_rate"] = 1.5
    with pytest.raises(ValueError):
        ev.validate_report_document(doc)


def test_emit_errors(tmp_path):
    with pytest.raises(ValueError):
        ev.emit_report([], tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        ev.emit_report(_reports(), blocker / "sub")


# -- ablation grid ---------------------------------------------------------------------------

def _fake_train(w, name):
    return w.as_array()


def _fake_eval(w):
    scores = {k: np.full(3, float(w[j])) + 0.01 * np.arange(3) for j, k in enumerate(ev.KINDS)}
    scores["joint"] = np.zeros(3)
    return scores


def test_single_rm_grid_shape_and_diagonal():
    res = ev.ablation_grid("single", _fake_train, _fake_eval, budget=1)
    assert res.means.shape == (4, 4) and len(res.reports) == 4
    assert res.runs == list(ev.KINDS)
    assert all(res.diagonal().values())


def test_eta_grid_and_errors():
    res = ev.ablation_grid("eta", _fake_train, _fake_eval, 1, etas=[(2.0, 0.1, 1.0, 1.0), (1, 1, 1, 1)])
    assert res.runs == ["2,0.1,1,1", "1,1,1,1"]
    with pytest.raises(ValueError):
        ev.ablation_grid("eta", _fake_train, _fake_eval, 1, etas=[(0, 0, 0, 0)])
    with pytest.raises(ValueError):
        ev.ablation_grid("single", _fake_train, _fake_eval, budget=0)
    with pytest.raises(ValueError):
        RewardWeights(0, 0, 0, 0)


def test_ablation_figure(tmp_path):
    res = ev.ablation_grid("single", _fake_train, _fake_eval, budget=1)
    paths = ev.emit_report(res.reports, tmp_path, ablation=res)
    assert paths["ablation_svg"].exists()
    doc = json.loads(paths["json"].read_text())
    assert doc["ablation"]["diagonal"] == {k: True for k in ev.KINDS}
