import gzip
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathtomo.counting import (
    CountTable,
    MalformedRecordError,
    count,
    count_jsonl,
    estimate_diagonals,
    inclusive_from_exclusive,
)
from pathtomo.detection import DetectorModel
from pathtomo.montecarlo import ExperimentConfig, PhaseSetting, sample_events
from pathtomo.states import StructuredState, WStateSpec, make_w_state

THREE = [
    {"shot": 0, "phase_idx": 0, "clicks": ["A"]},
    {"shot": 1, "phase_idx": 0, "clicks": ["A", "B"]},
    {"shot": 2, "phase_idx": 0, "clicks": []},
]


def write_lines(path, records, header=None, opener=open):
    with opener(path, "wt") as fh:
        if header is not None:
            fh.write(json.dumps(header) + "\n")
        for r in records:
            fh.write((r if isinstance(r, str) else json.dumps(r)) + "\n")
    return path


def test_three_record_example(tmp_path):
    table = count_jsonl(write_lines(tmp_path / "ev.jsonl", THREE))
    assert table.inclusive_count("A")[0] == 2
    assert table.exclusive_count("A")[0] == 1
    assert table.inclusive_count("AB")[0] == 1
    assert table.exclusive_count("")[0] == 1
    assert table.shots[0] == 3


def test_gzip_input_detected(tmp_path):
    plain = count_jsonl(write_lines(tmp_path / "a.jsonl", THREE))
    packed = count_jsonl(write_lines(tmp_path / "a.jsonl.gz", THREE, opener=gzip.open))
    assert plain == packed


def test_empty_file_gives_zero_table(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    table = count_jsonl(path)
    assert table.shots.sum() == 0
    assert not table.exclusive.any()


@pytest.mark.parametrize(
    "bad, line",
    [
        ("{not json", 2),
        ('{"shot": 1, "phase_idx": 0}', 2),
        ('{"shot": 0, "phase_idx": 0, "clicks": ["A"]}', 2),
        ('{"shot": 1, "phase_idx": 0, "clicks": ["Z"]}', 2),
        ('{"shot": 1, "phase_idx": -1, "clicks": []}', 2),
        ("[1, 2]", 2),
    ],
)
def test_malformed_records_name_the_line(tmp_path, bad, line):
    path = write_lines(tmp_path / "bad.jsonl", [THREE[0], bad])
    with pytest.raises(MalformedRecordError) as err:
        count_jsonl(path)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_ideal_w_direct_detection_has_no_coincidences():
    cfg = ExperimentConfig(make_w_state(WStateSpec(3)), DetectorModel.uniform(3, 1.0), (PhaseSetting((0, 0, 0), 20000),), seed=1)
    inc = count(sample_events(cfg)).inclusive[0]
    for mask in range(8):
        if bin(mask).count("1") >= 2:
            assert inc[mask] == 0


def test_streaming_count_matches_in_memory(tmp_path):
    cfg = ExperimentConfig(make_w_state(WStateSpec(3)), DetectorModel.uniform(3, 0.6), (PhaseSetting((0, 0, 0), 5000),), seed=2)
    ev = sample_events(cfg)
    ev.write_jsonl(tmp_path / "ev.jsonl.gz")
    assert count_jsonl(tmp_path / "ev.jsonl.gz") == count(ev)


def test_json_and_csv_output(tmp_path):
    table = count_jsonl(write_lines(tmp_path / "ev.jsonl", THREE))
    doc = json.loads(json.dumps(table.to_json()))
    assert CountTable.from_json(doc) == table
    assert doc["subsets"][0b011] == "AB"
    buf = io.StringIO()
    table.to_csv(buf)
    rows = buf.getvalue().strip().splitlines()
    head = rows[0].split(",")
    vals = dict(zip(head, rows[1].split(",")))
    assert vals["excl_A"] == "1" and vals["incl_A"] == "2" and vals["excl_none"] == "1"


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 7), min_size=1, max_size=60))
def test_inclusive_is_superset_sum(masks):
    excl = np.bincount(masks, minlength=8)[None, :]
    inc = inclusive_from_exclusive(excl)[0]
    for s in range(8):
        assert inc[s] == sum(excl[0, t] for t in range(8) if t & s == s)
    assert inc[0] == len(masks)


def test_diagonal_estimate_efficiency_correction():
    excl = np.zeros((1, 8), dtype=np.int64)
    excl[0, 0b000] = 700
    excl[0, 0b001] = 100
    excl[0, 0b010] = 150
    excl[0, 0b100] = 50
    table = CountTable(("A", "B", "C"), np.array([1000]), excl)
    est = estimate_diagonals(table, DetectorModel.uniform(3, 0.5))
    assert est.single(0) == pytest.approx(0.2)
    assert est.single(1) == pytest.approx(0.3)
    assert est.single(2) == pytest.approx(0.1)
    assert est.vacuum == pytest.approx(0.4)
    assert est.raw[(1, 0, 0)] == pytest.approx(0.1)
    assert est.single_sigma(0) == pytest.approx(2 * np.sqrt(0.1 * 0.9 / 1000))
    assert est.two_photon_mass == 0


def test_diagonal_estimate_from_sampled_lossy_state():
    m = StructuredState(3, {(0, 0, 0): 0.4, (1, 0, 0): 0.2, (0, 1, 0): 0.25, (0, 0, 1): 0.15})
    det = DetectorModel((0.5, 0.7, 0.9))
    cfg = ExperimentConfig(m, det, (PhaseSetting((0, 0, 0), 400_000),), seed=17)
    est = estimate_diagonals(count(sample_events(cfg)), det)
    for k, p in enumerate((0.2, 0.25, 0.15)):
        assert abs(est.single(k) - p) < 4 * est.single_sigma(k)


def test_diagonal_estimate_rejects_empty_table():
    table = CountTable(("A", "B"), np.array([0]), np.zeros((1, 4), dtype=np.int64))
    with pytest.raises(ValueError):
        estimate_diagonals(table, DetectorModel.uniform(2, 0.5))
