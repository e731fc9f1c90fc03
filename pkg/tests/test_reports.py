import json

import numpy as np
import pandas as pd
import pytest

from sense.attacks import AttackSpec
from sense.datasets import LabeledSet, make_rng
from sense.errors import ArtifactError, InputError, ShapeError
from sense.models import Model, ModelSpec
from sense.reports import (
    CurveSeries,
    EvalReport,
    convergence_curves,
    emit_csv,
    eval_accuracy,
    read_csv,
    write_manifest,
)

ATTACK = AttackSpec(epsilon=0.2, step_size=0.05, steps=5, restarts=3, random_start=True)


def test_constant_model_scores_one_in_ten():
    spec = ModelSpec.mlp((2, 10))
    flat = Model(spec, {name: np.zeros(shape) for name, shape in spec.param_shapes().items()})
    data = LabeledSet(np.random.default_rng(0).normal(size=(100, 2)), np.arange(100) % 10, num_classes=10)
    report = eval_accuracy(flat, data, chunk=7)
    assert report.natural_acc == pytest.approx(0.1)
    assert report.n == 100
    assert report.robust_acc == {}


def test_zero_budget_robust_accuracy_is_natural(tiny_mlp, points):
    attack = AttackSpec(epsilon=0.0, step_size=0.01, steps=3, restarts=2)
    report = eval_accuracy(tiny_mlp, points, attack, make_rng(0, "eval"), c=0.5, chunk=16)
    assert report.robust_acc["pgd"] == report.natural_acc
    assert sum(report.partition.values()) == len(points)
    np.testing.assert_array_equal(report.worst_case_curve, [report.natural_acc] * 2)


def test_attack_report(tiny_mlp, points):
    report = eval_accuracy(tiny_mlp, points, ATTACK, make_rng(0, "eval"), transfer={"self": tiny_mlp})
    assert report.robust_acc["pgd"] <= report.natural_acc
    assert report.robust_acc["transfer/self"] <= report.natural_acc
    assert np.all(np.diff(report.worst_case_curve) <= 0)
    assert report.partition is None
    frame = report.to_frame()
    assert list(frame.columns) == ["metric", "index", "value"]
    assert set(frame["metric"]) == {"natural_acc", "robust_acc/pgd", "robust_acc/transfer/self", "worst_case_acc", "n"}
    assert frame.loc[frame["metric"] == "worst_case_acc", "index"].tolist() == [1, 2, 3]


def test_eval_edge_cases(tiny_mlp, points):
    empty = eval_accuracy(tiny_mlp, points.take([]))
    assert np.isnan(empty.natural_acc)
    assert empty.n == 0
    with pytest.raises(InputError):
        eval_accuracy(tiny_mlp, points, ATTACK)


def test_fgsm_report_has_one_point_curve(tiny_mlp, points):
    report = eval_accuracy(tiny_mlp, points, ATTACK.with_(kind="fgsm"), make_rng(0, "eval"))
    assert report.worst_case_curve.shape == (1,)
    assert "fgsm" in report.robust_acc


@pytest.mark.parametrize(
    "kwargs",
    [
        {"natural_acc": 1.2},
        {"natural_acc": 0.5, "robust_acc": {"pgd": 0.6}},
        {"natural_acc": 0.5, "worst_case_curve": [0.3, 0.4]},
    ],
)
def test_eval_report_validation(kwargs):
    with pytest.raises(InputError):
        EvalReport(**kwargs)


def test_curve_series():
    curve = CurveSeries("loss", "step", [0, 1, 2], {"mean": [0.1, 0.2, 0.3]})
    assert list(curve.to_frame().columns) == ["step", "mean"]
    with pytest.raises(InputError):
        CurveSeries("loss", "step", [0, 2, 1], {})
    with pytest.raises(ShapeError):
        CurveSeries("loss", "step", [0, 1], {"mean": [0.1]})


def test_convergence_curves(tiny_mlp, points):
    losses, restarts = convergence_curves(tiny_mlp, points.inputs[:5], points.labels[:5], ATTACK, make_rng(0, "c"))
    frame = losses.to_frame()
    assert list(frame.columns) == ["step", "ex0", "ex1", "ex2", "ex3", "ex4", "mean"]
    assert frame["step"].tolist() == list(range(ATTACK.steps + 1))
    assert restarts.x.tolist() == [1, 2, 3]
    assert np.all(np.diff(restarts.series["robust_acc"]) <= 0)
    with pytest.raises(InputError):
        convergence_curves(tiny_mlp, np.zeros((0, 2)), [], ATTACK, make_rng(0, "c"))


# ── Artifacts ─────────────────────────────────────────────────────────────────


def test_header_only_csv(tmp_path):
    path = emit_csv(pd.DataFrame(columns=["step", "a"]), tmp_path / "empty.csv")
    assert path.read_bytes() == b"step,a\r\n"


def test_csv_round_trip_is_exact(tmp_path):
    frame = pd.DataFrame({"metric": ["x", "y", "z"], "value": [0.1, 1 / 3, 2.0**-40]})
    path = emit_csv(frame, tmp_path / "deep" / "t.csv")
    raw = path.read_bytes()
    assert raw.count(b"\r\n") == 4
    assert b"\n" not in raw.replace(b"\r\n", b"")
    pd.testing.assert_frame_equal(read_csv(path), frame)
    first = raw
    emit_csv(frame, path)
    assert path.read_bytes() == first


def test_csv_write_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ArtifactError):
        emit_csv(pd.DataFrame({"a": [1]}), blocker / "t.csv")
    with pytest.raises(ArtifactError):
        read_csv(tmp_path / "missing.csv")


def test_emit_accepts_reports(tmp_path, points, tiny_mlp):
    report = eval_accuracy(tiny_mlp, points)
    frame = read_csv(emit_csv(report, tmp_path / "eval.csv"))
    assert frame.loc[frame["metric"] == "natural_acc", "value"].iloc[0] == report.natural_acc


def test_manifest(tmp_path):
    path = write_manifest(tmp_path / "run", {"seed": "1"}, 1, artifacts=["b.csv", "a.csv"], checkpoint_hash="abc")
    manifest = json.loads(path.read_text())
    assert manifest["status"] == "ok"
    assert manifest["partial"] is False
    assert manifest["artifacts"] == ["a.csv", "b.csv"]
    assert manifest["checkpoint_hash"] == "abc"
    assert manifest["version"]

    failed = json.loads(write_manifest(tmp_path / "run", {}, 1, status="failed").read_text())
    assert failed["partial"] is True
    assert failed["summary"] == {}
