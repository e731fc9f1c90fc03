import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from main import load_dataset
from sense.attacks import AttackSpec, pgd
from sense.config import parse_args
from sense.datasets import LabeledSet, make_rng, mnist_paths
from sense.distributions import ThreeClusters
from sense.errors import InputError, NumericInputError, SpecError
from sense.models import ModelSpec, build_model, example_losses, predict
from sense.oracles import grid_sensible_loss, grid_worst_case
from sense.reports import eval_accuracy
from sense.trainer import (
    SenseSpec,
    TrainLog,
    TrainSpec,
    convergence_summary,
    generate_sensible,
    logistic_init,
    loss_identity_check,
    partition_from_probs,
    partition_labels,
    partition_point,
    sense_loss,
    sensible_example,
    three_clusters_experiment,
    train_nat,
    train_rat,
    train_sense,
    trunc_nat_loss,
    trunc_rob_loss,
)

ATTACK = AttackSpec(epsilon=0.2, step_size=0.05, steps=4)
WIDE_ATTACK = AttackSpec(epsilon=1.0, step_size=0.25, steps=8)

# linear2 margins 2.8 to 4.2: loss below log(1/0.9), and a unit l-inf move takes every row past it
CONFIDENT = LabeledSet(np.array([[1.5, 0.0], [1.75, 0.5], [-1.5, 0.0], [-1.75, -0.5]]), np.array([1, 1, 0, 0]))


# ── Truncated losses ──────────────────────────────────────────────────────────


def test_truncated_loss_values():
    assert trunc_nat_loss(0.9, 0.7) == 0.0
    assert trunc_nat_loss(0.35, 0.7) == pytest.approx(math.log(2))
    assert trunc_rob_loss(0.9, 0.7) == pytest.approx(-math.log(0.9))
    assert trunc_rob_loss(0.1, 0.5) == pytest.approx(math.log(2))
    np.testing.assert_allclose(trunc_rob_loss([0.9, 0.1], 0.5), [-math.log(0.9), math.log(2)])


def test_truncated_loss_inputs():
    with pytest.raises(NumericInputError):
        trunc_nat_loss(0.0, 0.5)
    with pytest.raises(NumericInputError):
        trunc_rob_loss(1.5, 0.5)
    with pytest.raises(InputError):
        trunc_nat_loss(0.5, 0.0)


def test_loss_identity_holds_on_random_triples():
    rng = make_rng(0, "identity")
    p_nat = rng.uniform(1e-6, 1.0, size=100_000)
    p_adv = p_nat * rng.uniform(1e-3, 1.0, size=100_000)
    c = rng.uniform(1e-3, 1.0, size=100_000)
    check = loss_identity_check(p_nat, p_adv, c)
    np.testing.assert_allclose(check.lhs, check.rhs_decomposed, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(check.lhs, check.rhs_piecewise, rtol=1e-12, atol=1e-9)


def test_loss_identity_scalar_and_ordering():
    check = loss_identity_check(0.9, 0.6, 0.7)
    assert check.lhs == pytest.approx(-math.log(0.7))
    assert check.rhs_decomposed == pytest.approx(check.lhs)
    with pytest.raises(InputError):
        loss_identity_check(0.5, 0.6, 0.7)


def test_partition():
    parts = partition_from_probs([0.5, 0.9, 0.9, 0.7], [0.4, 0.6, 0.8, 0.1], 0.7)
    assert parts.tolist() == ["A", "B", "C", "A"]


def test_partition_of_a_model(linear2):
    x = np.array([[0.5, 0.0], [0.5, 0.0], [-0.5, 0.0]])
    # logit gap 0.8 gives p ≈ 0.69 for class 1
    parts = partition_labels(linear2, x, [1, 1, 1], x - 0.3, 0.6)
    assert parts.tolist() == ["B", "B", "A"]


def _confident(p: float) -> np.ndarray:
    """Input where linear2 gives class 1 probability p."""
    return np.array([(math.log(p / (1 - p)) + 0.2) / 2, 0.0])


def test_partition_point_cases(linear2):
    assert partition_point(linear2, _confident(0.4), 1, _confident(0.3), 0.5) == "A"
    assert partition_point(linear2, _confident(0.9), 1, _confident(0.3), 0.5) == "B"
    assert partition_point(linear2, _confident(0.9), 1, _confident(0.7), 0.5) == "C"


# ── Sensible examples ─────────────────────────────────────────────────────────


def test_sense_spec():
    assert SenseSpec(0.7).threshold == pytest.approx(-math.log(0.7))
    assert SenseSpec(0.0).threshold == math.inf
    with pytest.raises(SpecError):
        SenseSpec(1.5)
    with pytest.raises(SpecError):
        SenseSpec(0.7, reversion="restart")
    with pytest.raises(SpecError):
        SenseSpec(0.7, warmup_epochs=-1)


def test_low_c_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="sense.trainer"):
        SenseSpec(0.3)
    assert "recommended band" in caplog.text


def test_zero_c_is_plain_pgd(tiny_mlp, points):
    spec = SenseSpec(0.0, ATTACK.with_(random_start=True))
    out = generate_sensible(tiny_mlp, points.inputs, points.labels, spec, make_rng(5, "attack"))
    plain = pgd(tiny_mlp, points.inputs, points.labels, spec.attack, make_rng(5, "attack"))
    np.testing.assert_array_equal(out.points, plain)
    assert not out.reverted.any()
    assert out.grad_evals == ATTACK.steps
    assert out.forward_evals == ATTACK.steps


def test_unit_c_returns_the_input(linear2, points):
    spec = SenseSpec(1.0, ATTACK.with_(random_start=True))
    out = generate_sensible(linear2, points.inputs, points.labels, spec, make_rng(5, "attack"))
    np.testing.assert_array_equal(out.points, points.inputs)
    correct = predict(linear2, points.inputs) == points.labels
    np.testing.assert_array_equal(out.reverted, correct)
    assert out.forward_evals == ATTACK.steps + 1


def test_endpoints_of_c_over_many_models_and_inputs():
    attack = AttackSpec(epsilon=0.3, step_size=0.1, steps=3, random_start=True)
    at_zero, at_one = SenseSpec(0.0, attack), SenseSpec(1.0, attack)
    for pair in range(1000):
        classes = 2 + pair % 3
        spec = ModelSpec.mlp((2, 4 + pair % 5, classes), seed=pair) if pair % 2 else ModelSpec.linear(2, classes, seed=pair)
        model = build_model(spec)
        draw = make_rng(pair, "pairs")
        x = draw.normal(size=(8, 2))
        y = draw.integers(0, classes, size=8)
        plain = pgd(model, x, y, attack, make_rng(pair, "attack"))
        np.testing.assert_array_equal(generate_sensible(model, x, y, at_zero, make_rng(pair, "attack")).points, plain)
        np.testing.assert_array_equal(generate_sensible(model, x, y, at_one, make_rng(pair, "attack")).points, x)


def test_full_pgd_rows_skip_the_threshold(linear2):
    x, y = CONFIDENT.inputs, CONFIDENT.labels
    spec = SenseSpec(0.9, WIDE_ATTACK)
    plain = pgd(linear2, x, y, WIDE_ATTACK, make_rng(0, "attack"))
    full = generate_sensible(linear2, x, y, spec, make_rng(0, "attack"), full_pgd=np.ones(4, dtype=bool))
    np.testing.assert_array_equal(full.points, plain)
    assert not full.reverted.any()
    checked = generate_sensible(linear2, x, y, spec, make_rng(0, "attack"))
    assert checked.reverted.all()
    assert np.all(example_losses(linear2, checked.points, y) <= spec.threshold)
    assert np.all(example_losses(linear2, plain, y) > spec.threshold)


@pytest.mark.parametrize("reversion", ["break", "noise"])
def test_sensible_loss_is_capped(tiny_mlp, points, reversion):
    spec = SenseSpec(0.6, ATTACK.with_(epsilon=0.5, steps=8), reversion=reversion)
    losses = sense_loss(tiny_mlp, points.inputs, points.labels, spec, make_rng(0, "attack"))
    own = example_losses(tiny_mlp, points.inputs, points.labels)
    assert np.all(losses <= np.maximum(spec.threshold, own) + 1e-9)
    adv = sensible_example(tiny_mlp, points.inputs, points.labels, spec, make_rng(0, "attack"))
    assert np.all(np.abs(adv - points.inputs) <= 0.5 + 1e-12)


def test_sensible_loss_sits_between_natural_and_pgd_loss(linear2, points):
    spec = SenseSpec(0.7, ATTACK)
    natural = example_losses(linear2, points.inputs, points.labels)
    sensible = sense_loss(linear2, points.inputs, points.labels, spec, make_rng(0, "attack"))
    worst = example_losses(
        linear2, pgd(linear2, points.inputs, points.labels, ATTACK, make_rng(0, "attack")), points.labels
    )
    assert np.all(natural <= sensible + 1e-12)
    assert np.all(sensible <= worst + 1e-12)
    assert np.any(sensible < worst - 1e-6)


def test_single_input_forms(tiny_mlp):
    x = np.array([0.2, 0.1])
    spec = SenseSpec(0.6, ATTACK)
    assert sensible_example(tiny_mlp, x, 0, spec, make_rng(0, "a")).shape == (2,)
    assert isinstance(sense_loss(tiny_mlp, x, 0, spec, make_rng(0, "a")), float)


def test_grid_sensible_loss_cases(linear2):
    x = np.array([0.5, 0.0])
    # the whole ball keeps p > 0.5, so the sensible and worst-case losses agree
    _, worst = grid_worst_case(linear2, x, 1, 0.1, resolution=41)
    _, sensible = grid_sensible_loss(linear2, x, 1, 0.1, 0.5, resolution=41)
    assert sensible == pytest.approx(worst)
    assert worst == pytest.approx(math.log1p(math.exp(-0.5)))

    own = float(example_losses(linear2, x[None], [1])[0])
    _, capped = grid_sensible_loss(linear2, x, 1, 0.1, 0.65, resolution=41)
    assert own <= capped <= -math.log(0.65)

    point, value = grid_sensible_loss(linear2, x, 1, 0.1, 0.9, resolution=41)
    np.testing.assert_array_equal(point, x)
    assert value == own

    wrong = np.array([-0.5, 0.0])
    point, value = grid_sensible_loss(linear2, wrong, 1, 0.1, 0.5, resolution=41)
    np.testing.assert_array_equal(point, wrong)


# ── Training ──────────────────────────────────────────────────────────────────


def small_train_spec(**changes) -> TrainSpec:
    return TrainSpec(**{"epochs": 2, "batch_size": 16, "lr": 0.1, "lr_decay_steps": (), "monitor_size": 20, **changes})


def test_train_spec():
    spec = TrainSpec(lr=0.1, lr_decay_steps=(2, 4), lr_decay_factor=0.1)
    assert spec.lr_at(0) == 0.1
    assert spec.lr_at(2) == pytest.approx(0.01)
    assert spec.lr_at(5) == pytest.approx(0.001)
    for bad in ({"epochs": 0}, {"lr": 0.0}, {"lr_decay_factor": 0.0}, {"monitor_c": 0.0}):
        with pytest.raises(SpecError):
            TrainSpec(**bad)


def test_zero_c_trains_exactly_like_rat(points):
    model = build_model(ModelSpec.mlp((2, 8, 2), seed=3))
    tspec = small_train_spec()
    sense_model, sense_log = train_sense(model, points, SenseSpec(0.0, ATTACK, warmup_epochs=1), tspec)
    rat_model, rat_log = train_rat(model, points, ATTACK, tspec)
    assert sense_model.content_hash() == rat_model.content_hash()
    assert [r["param_hash"] for r in sense_log.records] == [r["param_hash"] for r in rat_log.records]


def test_unit_c_trains_exactly_like_natural(points):
    model = build_model(ModelSpec.mlp((2, 8, 2), seed=3))
    tspec = small_train_spec()
    sense_model, _ = train_sense(model, points, SenseSpec(1.0, ATTACK, warmup_epochs=1), tspec)
    nat_model, _ = train_nat(model, points, tspec, attack=ATTACK)
    assert sense_model.content_hash() == nat_model.content_hash()


def test_warmup_gives_confident_rows_full_pgd(linear2):
    tspec = small_train_spec(epochs=1, batch_size=4, monitor_size=4)
    warm, _ = train_sense(linear2, CONFIDENT, SenseSpec(0.9, WIDE_ATTACK, warmup_epochs=1), tspec)
    cold, _ = train_sense(linear2, CONFIDENT, SenseSpec(0.9, WIDE_ATTACK, warmup_epochs=0), tspec)
    rat, _ = train_rat(linear2, CONFIDENT, WIDE_ATTACK, tspec)
    assert warm.content_hash() == rat.content_hash()
    assert cold.content_hash() != rat.content_hash()


def test_train_log_records(points):
    model = build_model(ModelSpec.mlp((2, 8, 2), seed=3))
    trained, train_log = train_sense(model, points, SenseSpec(0.7, ATTACK), small_train_spec(pretrain_epochs=1))
    frame = train_log.to_frame()
    assert list(frame.columns) == list(TrainLog.COLUMNS)
    assert frame["epoch"].tolist() == [0, 1, 2]
    assert (frame[["n_A", "n_B", "n_C"]].sum(axis=1) == 20).all()
    assert (frame["rob_acc"] <= frame["nat_acc"]).all()
    assert frame["param_hash"].iloc[-1] == trained.content_hash()
    assert train_log.snapshots == []


def test_training_is_deterministic(points):
    model = build_model(ModelSpec.mlp((2, 8, 2), seed=3))
    spec = SenseSpec(0.7, ATTACK.with_(random_start=True))
    a, _ = train_sense(model, points, spec, small_train_spec())
    b, _ = train_sense(model, points, spec, small_train_spec())
    assert a.content_hash() == b.content_hash()


def test_empty_dataset_is_rejected(points):
    model = build_model(ModelSpec.mlp((2, 8, 2)))
    with pytest.raises(InputError):
        train_nat(model, points.take([]), small_train_spec())


def test_logistic_init_separates_clusters(clusters):
    model = logistic_init(clusters)
    assert np.mean(predict(model, clusters.inputs) == clusters.labels) > 0.95
    W = model.params["fc0.weight"]
    np.testing.assert_allclose(W[0], -W[1])


def test_logistic_init_is_close_to_the_vertical_boundary(clusters):
    W = logistic_init(clusters).params["fc0.weight"]
    w = W[1] - W[0]
    assert abs(math.degrees(math.atan2(w[1], w[0]))) < 5.0


@pytest.mark.slow
def test_three_clusters_experiment():
    run = three_clusters_experiment(ThreeClusters(p=0.55, sigma=0.2, m=7.0), n=1000, gamma=8.0, c=0.9, iterations=300)
    assert len(run.trajectories) == 600
    summary = run.summary.set_index("method")
    sense, rat = summary.loc["sense"], summary.loc["rat"]

    assert sense["boundary_cov"] < 0.05
    assert abs(sense["final_angle_deg"]) < 5.0
    assert sense["final_nat_acc"] > 0.95
    assert sense["c_non_decreasing"]

    assert rat["slope_sign_changes"] >= 10
    assert rat["boundary_cov"] > 0.05
    assert rat["angle_travelled_deg"] > sense["angle_travelled_deg"]
    assert run.sense_model.content_hash() != run.rat_model.content_hash()


def test_convergence_summary_statistics():
    frame = pd.DataFrame(
        {
            "iteration": np.arange(1, 7),
            "w1": [1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            "w2": [1.0, -1.0, 1.0, -1.0, 1.0, -1.0],
            "b": np.zeros(6),
            "n_C": [0, 0, 1, 1, 2, 2],
            "nat_acc": np.ones(6),
            "rob_acc": np.zeros(6),
        }
    )
    frame["angle_deg"] = np.degrees(np.arctan2(frame["w2"], frame["w1"]))
    frame["slope"] = -frame["w1"] / frame["w2"]
    summary = convergence_summary(frame, window=6, flow_window=6)
    assert summary["slope_sign_changes"] == 5
    assert summary["angle_travelled_deg"] == pytest.approx(450.0)
    assert summary["boundary_cov"] == pytest.approx(1.0)
    assert summary["c_trend_spearman"] > 0
    assert summary["c_non_decreasing"]

    still = frame.assign(w2=0.5, n_C=3)
    still["angle_deg"] = np.degrees(np.arctan2(still["w2"], still["w1"]))
    still["slope"] = -still["w1"] / still["w2"]
    calm = convergence_summary(still, window=6, flow_window=6)
    assert calm["boundary_cov"] == pytest.approx(0.0, abs=1e-12)
    assert calm["slope_sign_changes"] == 0
    assert math.isnan(calm["c_trend_spearman"])
    assert calm["c_non_decreasing"]


# ── Scaled MNIST ──────────────────────────────────────────────────────────────

MNIST_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "mnist.env"


def _scaled_mnist(*overrides):
    if not all(path.exists() for split in ("train", "test") for path in mnist_paths(split)):
        pytest.skip("MNIST files not present")
    return parse_args(["train", "--config", str(MNIST_CONFIG), *overrides])


def _monotone_up_to_one_small_inversion(values, increasing: bool) -> bool:
    steps = np.diff(values) if increasing else -np.diff(values)
    inversions = steps[steps < 0]
    return inversions.size <= 1 and bool(np.all(inversions >= -0.005))


@pytest.mark.slow
def test_scaled_mnist_sense_training_does_not_collapse():
    cfg = _scaled_mnist()
    train, test = load_dataset(cfg, "train"), load_dataset(cfg, "test")
    model = build_model(cfg.model)
    sense_model, _ = train_sense(model, train, cfg.sense, cfg.train)
    nat_model, _ = train_nat(model, train, cfg.train, attack=cfg.attack)

    sense_report = eval_accuracy(sense_model, test, cfg.eval_attack, make_rng(cfg.seed, "eval"))
    nat_report = eval_accuracy(nat_model, test, cfg.eval_attack, make_rng(cfg.seed, "eval"))
    predicted = np.concatenate([predict(sense_model, test.inputs[i : i + 1000]) for i in range(0, len(test), 1000)])
    assert sense_report.natural_acc > 0.9
    assert np.unique(predicted).size >= 5
    assert sense_report.robust_acc["pgd"] > nat_report.robust_acc["pgd"]


@pytest.mark.slow
def test_scaled_mnist_c_trades_robustness_for_accuracy():
    natural, robust = [], []
    for c in (0.1, 0.5, 0.9):
        cfg = _scaled_mnist("--c", str(c))
        if not natural:
            train, test = load_dataset(cfg, "train"), load_dataset(cfg, "test")
        trained, _ = train_sense(build_model(cfg.model), train, cfg.sense, cfg.train)
        report = eval_accuracy(trained, test, cfg.eval_attack, make_rng(cfg.seed, "eval"))
        natural.append(report.natural_acc)
        robust.append(report.robust_acc["pgd"])
    assert _monotone_up_to_one_small_inversion(natural, increasing=True)
    assert _monotone_up_to_one_small_inversion(robust, increasing=False)
