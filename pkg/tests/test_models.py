import numpy as np
import pytest

from sense.errors import ArtifactError, ShapeError, SpecError
from sense.models import (
    Model,
    ModelSpec,
    build_model,
    checkpoint_bytes,
    example_losses,
    forward_logits,
    input_gradient,
    load_checkpoint,
    loss_and_input_gradient,
    loss_and_param_grads,
    predict,
    probabilities,
    save_checkpoint,
)


def test_cnn_parameter_shapes_for_mnist():
    shapes = ModelSpec.cnn(2).param_shapes()
    assert shapes["conv1.weight"] == (2, 1, 5, 5)
    assert shapes["conv2.weight"] == (4, 2, 5, 5)
    assert shapes["fc1.weight"] == (64, 64)
    assert shapes["head.weight"] == (10, 64)
    assert list(shapes) == [
        "conv1.weight",
        "conv1.bias",
        "conv2.weight",
        "conv2.bias",
        "fc1.weight",
        "fc1.bias",
        "head.weight",
        "head.bias",
    ]


@pytest.mark.parametrize(
    "make",
    [
        lambda: ModelSpec("rnn"),
        lambda: ModelSpec.linear(2, 1),
        lambda: ModelSpec("linear", widths=(2, 4, 2)),
        lambda: ModelSpec.mlp((3,)),
        lambda: ModelSpec.cnn(0),
        lambda: ModelSpec.cnn(1, image_size=14),
    ],
)
def test_invalid_specs(make):
    with pytest.raises(SpecError):
        make()


def test_build_is_seeded_and_kaiming_bounded():
    spec = ModelSpec.mlp((2, 16, 3), seed=4)
    a, b = build_model(spec), build_model(spec)
    assert a.content_hash() == b.content_hash()
    assert build_model(ModelSpec.mlp((2, 16, 3), seed=5)).content_hash() != a.content_hash()
    assert np.all(np.abs(a.params["fc0.weight"]) <= np.sqrt(6 / 2))
    assert np.all(np.abs(a.params["fc1.weight"]) <= np.sqrt(6 / 16))
    assert not np.any(a.params["fc0.bias"])


def test_models_are_immutable(tiny_mlp):
    with pytest.raises(ValueError):
        tiny_mlp.params["fc0.weight"][0, 0] = 1.0
    with pytest.raises(ShapeError):
        tiny_mlp.with_params({**tiny_mlp.params, "fc0.bias": np.zeros(3)})


def test_single_and_batched_inputs(tiny_mlp):
    x = np.array([[0.1, 0.2], [0.3, -0.4]])
    batch = forward_logits(tiny_mlp, x).data
    assert batch.shape == (2, 3)
    np.testing.assert_allclose(forward_logits(tiny_mlp, x[0]).data, batch[0], rtol=1e-12)
    assert isinstance(predict(tiny_mlp, x[0]), int)
    assert predict(tiny_mlp, x).shape == (2,)
    np.testing.assert_allclose(probabilities(tiny_mlp, x).sum(axis=1), 1.0)
    with pytest.raises(ShapeError):
        forward_logits(tiny_mlp, np.zeros((2, 3)))


def test_constant_model_ties_go_to_class_zero():
    spec = ModelSpec.mlp((4, 10))
    model = Model(spec, {name: np.zeros(shape) for name, shape in spec.param_shapes().items()})
    assert np.all(predict(model, np.random.default_rng(0).normal(size=(20, 4))) == 0)


def test_linear_input_gradient_matches_closed_form(linear2):
    x = np.array([[0.2, -0.1], [-0.5, 0.4]])
    y = np.array([1, 0])
    losses, grad = loss_and_input_gradient(linear2, x, y)
    probs = probabilities(linear2, x)
    onehot = np.eye(2)[y]
    expected = (probs - onehot) @ linear2.params["fc0.weight"]
    np.testing.assert_allclose(grad, expected, atol=1e-12)
    np.testing.assert_allclose(losses, -np.log(probs[np.arange(2), y]), rtol=1e-12)
    np.testing.assert_array_equal(input_gradient(linear2, x[0], 1), grad[0])


def test_param_grads_cover_every_parameter(tiny_cnn):
    x = np.random.default_rng(1).uniform(size=(3, 1, 16, 16))
    loss, grads = loss_and_param_grads(tiny_cnn, x, [0, 1, 2])
    assert loss == pytest.approx(example_losses(tiny_cnn, x, [0, 1, 2]).mean())
    assert list(grads) == list(tiny_cnn.params)
    for name, g in grads.items():
        assert g.shape == tiny_cnn.params[name].shape


def test_checkpoint_round_trip(tmp_path, tiny_cnn):
    path = tmp_path / "nested" / "model.ckpt"
    digest = save_checkpoint(tiny_cnn, path)
    assert digest == tiny_cnn.content_hash()
    assert len(digest) == 10
    loaded = load_checkpoint(path)
    assert loaded.spec == tiny_cnn.spec
    assert loaded.content_hash() == digest
    for name, value in tiny_cnn.params.items():
        np.testing.assert_array_equal(loaded.params[name], value)
    assert path.read_bytes()[:4] == b"SNSM"


def test_checkpoint_errors(tmp_path, tiny_mlp):
    with pytest.raises(ArtifactError):
        load_checkpoint(tmp_path / "missing.ckpt")

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ArtifactError):
        load_checkpoint(bad)

    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(checkpoint_bytes(tiny_mlp)[:-8])
    with pytest.raises(ArtifactError):
        load_checkpoint(truncated)

    trailing = tmp_path / "long.ckpt"
    trailing.write_bytes(checkpoint_bytes(tiny_mlp) + b"\x00")
    with pytest.raises(ArtifactError, match="trailing"):
        load_checkpoint(trailing)


def test_artifact_error_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_spec_json_round_trip():
    spec = ModelSpec.cnn(3, num_classes=5, seed=7)
    assert ModelSpec.from_json(spec.to_json()) == spec
    with pytest.raises(SpecError):
        ModelSpec.from_json('{"kind": "mlp", "colour": 1}')
