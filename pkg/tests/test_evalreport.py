import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from berrymass.errors import ArityError, DivisionUndefinedError, FormatError, ValidationError
from berrymass.evalreport import (BIN_LABELS, Distribution, ErrorStats, aggregate_stats, build_report,
                                  dumps, emit_report, iou_histogram, percent_error, read_report)

from oracles import population_variance

unit = st.floats(0.0, 1.0)
positive = st.floats(0.1, 1000.0)


# ---------------------------------------------------------------- percent error

def test_percent_error_examples():
    assert percent_error(108, 100) == pytest.approx(8.0)
    assert percent_error(100, 100) == 0.0
    assert percent_error(92, 100) == pytest.approx(8.0)


@pytest.mark.parametrize("truth", [0.0, -3.0])
def test_percent_error_undefined(truth):
    with pytest.raises(DivisionUndefinedError):
        percent_error(1.0, truth)


# ---------------------------------------------------------------- aggregation

def test_aggregate_identical_pairs():
    s = aggregate_stats([(5.0, 5.0), (7.0, 7.0)])
    assert (s.mean_percent_error, s.variance, s.n) == (0.0, 0.0, 2)


def test_aggregate_hand_example():
    s = aggregate_stats([(12.0, 10.0), (9.0, 10.0)])
    assert s.mean_percent_error == pytest.approx(15.0)
    assert s.variance == pytest.approx(2.25)


def test_aggregate_single_pair():
    assert aggregate_stats([(3.0, 2.0)]).variance == 0.0


def test_aggregate_empty():
    with pytest.raises(ArityError):
        aggregate_stats([])


def test_mass_row_reconstruction():
    # deviations of +-sqrt(1.67) g on fruits of T g give variance 1.67 g^2 and
    # a mean error of 100 sqrt(1.67) / T percent; T is chosen to land on 8.11 %
    d = math.sqrt(1.67)
    t = 100 * d / 8.11
    s = aggregate_stats([(t + d, t), (t - d, t)])
    assert s.mean_percent_error == pytest.approx(8.11, abs=1e-9)
    assert s.variance == pytest.approx(1.67, abs=1e-9)


@settings(max_examples=80)
@given(st.lists(st.tuples(positive, positive), min_size=1, max_size=30))
def test_aggregate_matches_recomputation(pairs):
    s = aggregate_stats(pairs)
    pe = [100 * abs(p - t) / t for p, t in pairs]
    assert s.mean_percent_error == pytest.approx(sum(pe) / len(pe), rel=1e-9, abs=1e-9)
    assert s.variance == pytest.approx(population_variance([p - t for p, t in pairs]), rel=1e-9, abs=1e-9)
    assert s.n == len(pairs)


def test_error_stats_invariants():
    with pytest.raises(ValidationError):
        ErrorStats(1.0, -1.0, 3)
    with pytest.raises(ValidationError):
        ErrorStats(1.0, 1.0, 0)


# ---------------------------------------------------------------- histogram

def test_histogram_all_top_bin():
    assert iou_histogram([0.95] * 5) == (0.0, 0.0, 0.0, 1.0)


def test_histogram_one_per_bin():
    assert iou_histogram([0.5, 0.7, 0.85, 0.95]) == (0.25, 0.25, 0.25, 0.25)


@pytest.mark.parametrize("value, index", [(0.6, 1), (0.8, 2), (0.9, 3), (1.0, 3), (0.0, 0), (0.5999, 0)])
def test_histogram_boundaries(value, index):
    h = iou_histogram([value])
    assert h[index] == 1.0


@pytest.mark.parametrize("bad", [[-0.1], [1.01], [float("nan")]])
def test_histogram_rejects(bad):
    with pytest.raises(ValidationError):
        iou_histogram(bad)


@given(st.lists(unit, min_size=1, max_size=60))
def test_histogram_partition(values):
    h = iou_histogram(values)
    assert sum(h) == pytest.approx(1.0, abs=1e-9)
    counts = [sum(lo <= v < hi for v in values) for lo, hi in ((0, .6), (.6, .8), (.8, .9))]
    counts.append(sum(0.9 <= v <= 1.0 for v in values))
    assert sum(counts) == len(values)
    assert h == pytest.approx(tuple(c / len(values) for c in counts))


# ---------------------------------------------------------------- reports

def _record(i, label="isolated", err=0.1, iou=0.95, par=1.0):
    t = 10.0 + i
    return {"id": f"f{i:02d}", "occlusion_label": label, "status": "ok",
            "area_cm2": t * (1 + err), "true_area_cm2": t, "theta_deg": 20.0, "true_theta_deg": 18.0,
            "volume_cm3": 2 * t, "true_volume_cm3": 2 * t, "mass_g": 1.9 * t, "true_mass_g": 1.9 * t,
            "grade": "C", "true_grade": "C", "par": par, "iou": iou}


def test_report_groups_by_label():
    recs = [_record(0), _record(1, "occluded", err=0.2), _record(2, "occluded", err=0.2)]
    rep = build_report(recs)
    assert set(rep.stats) == {"isolated", "occluded", "all"}
    assert rep.stats["occluded"]["area"].mean_percent_error == pytest.approx(20.0)
    assert rep.stats["all"]["area"].n == 3
    assert rep.stats["all"]["mass"].mean_percent_error == 0.0


def test_report_keeps_failures_out_of_statistics():
    recs = [_record(0), {"id": "bad", "occlusion_label": "isolated", "status": "failed", "error": "boom"}]
    rep = build_report(recs)
    assert rep.stats["all"]["area"].n == 1
    assert [r["id"] for r in rep.to_dict()["records"]] == ["bad", "f00"]


def test_report_completion_table_reconstruction():
    # per-fruit PAR values realising a mean of 0.978 with population variance 0.022
    s = math.sqrt(0.022)
    pars = [0.978 + s, 0.978 - s, 0.978 + s, 0.978 - s]
    rep = build_report([_record(i, "occluded", par=p) for i, p in enumerate(pars)])
    assert rep.completion["par"].mean == pytest.approx(0.978, abs=1e-12)
    assert rep.completion["par"].variance == pytest.approx(0.022, abs=1e-12)
    s = math.sqrt(0.104)
    rep = build_report([_record(i, "occluded", par=p) for i, p in enumerate([1.112 + s, 1.112 - s])])
    assert rep.completion["par"].mean == pytest.approx(1.112, abs=1e-12)
    assert rep.completion["par"].variance == pytest.approx(0.104, abs=1e-12)
    assert rep.par_in_band == 0.0


def test_report_par_band_fraction():
    rep = build_report([_record(0, par=1.0), _record(1, par=1.15), _record(2, par=1.2), _record(3, par=None)])
    assert rep.par_in_band == pytest.approx(2 / 3)


def test_report_round_trip(tmp_path):
    rep = build_report([_record(i, ("isolated", "occluded")[i % 2], err=0.01 * i, iou=0.5 + 0.05 * i)
                        for i in range(8)])
    emit_report(rep, tmp_path / "r.json")
    back = read_report(tmp_path / "r.json")
    assert back.to_dict() == rep.to_dict()
    emit_report(back, tmp_path / "r2.json")
    assert (tmp_path / "r.json").read_bytes() == (tmp_path / "r2.json").read_bytes()


def test_report_field_order_is_stable():
    rec = _record(0)
    shuffled = dict(reversed(list(rec.items())))
    a = dumps(build_report([rec]).to_dict())
    b = dumps(build_report([shuffled]).to_dict())
    assert a == b
    keys = list(json.loads(a)["records"][0])
    assert keys[:3] == ["id", "occlusion_label", "status"]


def test_empty_report_omits_sections(tmp_path):
    rep = build_report([])
    doc = rep.to_dict()
    assert doc == {"records": []}
    emit_report(rep, tmp_path / "e.json")
    assert read_report(tmp_path / "e.json").to_dict() == doc


def test_report_histogram_labels():
    doc = build_report([_record(0, iou=0.6)]).to_dict()
    assert list(doc["histograms"]["iou"]) == list(BIN_LABELS)
    assert doc["histograms"]["iou"]["[0.6,0.8)"] == 1.0


def test_read_report_malformed(tmp_path):
    (tmp_path / "r.json").write_text('{"stats": {}}')
    with pytest.raises(FormatError):
        read_report(tmp_path / "r.json")


def test_emit_report_unwritable(tmp_path):
    with pytest.raises(OSError):
        emit_report(build_report([]), tmp_path / "missing" / "r.json")


def test_distribution_of():
    d = Distribution.of([1.0, 3.0])
    assert (d.mean, d.variance, d.n) == (2.0, 1.0, 2)
    with pytest.raises(ArityError):
        Distribution.of([])
