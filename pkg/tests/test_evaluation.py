"""Accuracy matrices, forgetting, aggregation, and report emission."""

import json

import numpy as np
import pytest

from metadr import evaluation as E
from metadr.data import LabeledDataset
from metadr.models import ModelConfig, build_model


def matrix(rows, domains=("a", "b", "c")):
    m = E.AccuracyMatrix(domains=list(domains))
    for r in rows:
        m.add_row(r)
    return m


def report(rows=((0.9, 0.1, 0.1), (0.7, 0.8, 0.2), (0.6, 0.7, 0.9)), seed=0,
           config=None):
    return E.RunReport(
        config=config or {"method": "naive", "steps": 3, "seed": seed},
        matrix=matrix(rows),
        seed=seed,
    )


def test_evaluate_counts_argmax_matches():
    model = build_model(ModelConfig(arch="mlp", hidden=(4,), seed=0))
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (20, 3, 28, 28), dtype=np.uint8)
    ds = LabeledDataset(images, model.predict(images.astype(np.float32)), "t")
    assert E.evaluate(model, ds) == 1.0
    wrong = LabeledDataset(images, (ds.labels + 1) % 10, "t")
    assert E.evaluate(model, wrong) == 0.0
    with pytest.raises(ValueError):
        E.evaluate(model, LabeledDataset(images[:0], ds.labels[:0], "t"))


def test_matrix_validation():
    m = E.AccuracyMatrix(domains=["a", "b"])
    with pytest.raises(ValueError):
        m.add_row([0.5])
    with pytest.raises(ValueError):
        m.add_row([0.5, 1.5])
    m.add_row([0.25, 0.75])
    assert m.final_row == [0.25, 0.75]
    assert E.AccuracyMatrix.from_dict(m.to_dict()).rows == m.rows


def test_forgetting_definition():
    m = matrix([(0.9, 0.1, 0.1), (0.7, 0.8, 0.2), (0.6, 0.7, 0.9)])
    f = E.forgetting(m)
    assert f == {"a": pytest.approx(0.9 - 0.6), "b": pytest.approx(0.8 - 0.7)}
    assert "c" not in f  # last domain never gets a forgetting entry


def test_report_roundtrip():
    r = report()
    d = r.to_dict()
    assert d["schema"] == E.SCHEMA
    assert d["final_accuracies"] == {"a": 0.6, "b": 0.7, "c": 0.9}
    back = E.RunReport.from_dict(json.loads(json.dumps(d)))
    assert back.matrix.rows == r.matrix.rows
    assert back.seed == r.seed
    with pytest.raises(ValueError):
        E.RunReport.from_dict({"schema": "metadr-report/99"})


def test_aggregate_mean_and_population_std():
    r0 = report(rows=[[0.8, 0.2, 0.1]] * 3, seed=0)
    r1 = report(rows=[[0.6, 0.4, 0.1]] * 3, seed=1)
    agg = E.aggregate([r0, r1])
    assert agg["final_mean"]["a"] == pytest.approx(0.7)
    assert agg["final_std"]["a"] == pytest.approx(0.1)  # population std
    assert agg["seeds"] == [0, 1]
    assert "seed" not in agg["config"]


def test_aggregate_rejects_mixed_configs():
    r0 = report(seed=0)
    r1 = report(seed=1, config={"method": "er", "steps": 3, "seed": 1})
    with pytest.raises(ValueError):
        E.aggregate([r0, r1])
    with pytest.raises(ValueError):
        E.aggregate([])


def test_aggregate_ignores_seed_differences():
    assert E.aggregate([report(seed=0), report(seed=7)])["seeds"] == [0, 7]


def test_emit_json_stable_and_parseable(tmp_path):
    r = report()
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    E.emit(r, "json", p1)
    E.emit(r, "json", p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = E.parse_report(p1)
    assert back.matrix.rows == r.matrix.rows


def test_emit_csv_layout(tmp_path):
    p = tmp_path / "r.csv"
    E.emit(report(), "csv", p)
    lines = p.read_text().strip().split("\n")
    assert lines[0] == "stage,a,b,c"
    assert lines[1] == "after_a,0.900000,0.100000,0.100000"
    assert len(lines) == 4


def test_emit_table_has_percentages(tmp_path):
    p = tmp_path / "r.txt"
    E.emit(report(), "table", p)
    text = p.read_text()
    assert "90.0" in text and "after c" in text


def test_emit_rejects_unsafe_names_and_formats(tmp_path):
    bad = E.RunReport(
        config={}, matrix=matrix([(0.5,)], domains=("has space",)), seed=0
    )
    with pytest.raises(ValueError):
        E.emit(bad, "json", tmp_path / "x.json")
    with pytest.raises(ValueError):
        E.emit(report(), "yaml", tmp_path / "x.yaml")
