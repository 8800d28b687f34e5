# SPDX-License-Identifier: GPL-3.0-or-later
import math
import struct

import numpy as np
from pytest import approx, fixture, mark, raises

from osclab.network import (
    FULL_PRECISION,
    Activation,
    AdamState,
    CheckpointFormatError,
    FakeQuant,
    Gradients,
    LayerSpec,
    Model,
    accuracy,
    adam_step,
    backward,
    forward,
    init_model,
    load_checkpoint,
    loss_mse,
    loss_softmax_ce,
    mlp_layers,
    save_checkpoint,
)
from osclab.quantizer import QuantSpec, quantize
from osclab.tensor import ContractError, Rng, ShapeError, as_matrix, rand_normal

from .factory import scalar_model, tiny_model

UNIT_SCALE = FakeQuant(QuantSpec(bits=3), scales=(1.0,))


@fixture
def random_input():
    return rand_normal(Rng(99), 5, 3, 0.0, 1.0)


def test_forward_fake_quant():
    logits, _ = forward(scalar_model(0.6), as_matrix(1.0), UNIT_SCALE)
    assert logits.item() == 1.0


def test_forward_fake_quant_clips_frozen_scale():
    logits, _ = forward(scalar_model(5.0), as_matrix(1.0), UNIT_SCALE)
    assert logits.item() == 3.0


def test_forward_full_precision():
    logits, _ = forward(scalar_model(0.6), as_matrix(1.0))
    assert logits.item() == 0.6


def test_forward_zero_input_gives_bias():
    logits, _ = forward(scalar_model(0.6, b=0.25), as_matrix(0.0), UNIT_SCALE)
    assert logits.item() == 0.25


def test_forward_shape_mismatch():
    with raises(ShapeError, match="expects 1 input columns"):
        forward(scalar_model(0.6), np.zeros((1, 2)))


def test_forward_does_not_mutate_latent_weights(random_input):
    model = tiny_model()
    before = [w.copy() for w in model.weights]
    forward(model, random_input, FakeQuant(QuantSpec(bits=2)))
    forward(model, random_input)
    assert all(np.array_equal(a, b) for a, b in zip(before, model.weights))


def test_backward_ste_scalar():
    model = scalar_model(0.6)
    pred, cache = forward(model, as_matrix(1.0), UNIT_SCALE)
    _, grad = loss_mse(pred, as_matrix(0.75))
    gradients = backward(model, cache, grad, UNIT_SCALE)
    assert gradients.weights[0].item() == approx(0.25)


def test_backward_zero_gradient(random_input):
    model = tiny_model()
    logits, cache = forward(model, random_input)
    gradients = backward(model, cache, np.zeros_like(logits))
    assert all(not np.any(g) for g in [*gradients.weights, *gradients.biases])


def test_backward_stale_cache(random_input):
    model = tiny_model()
    logits, cache = forward(model, random_input)
    model.touch()
    with raises(ContractError, match="Stale forward cache"):
        backward(model, cache, np.ones_like(logits))


def test_backward_mode_mismatch(random_input):
    model = tiny_model()
    logits, cache = forward(model, random_input)
    with raises(ContractError, match="Forward ran in"):
        backward(model, cache, np.ones_like(logits), FakeQuant(QuantSpec(bits=4)))


def test_backward_gradient_shape(random_input):
    model = tiny_model()
    _, cache = forward(model, random_input)
    with raises(ShapeError):
        backward(model, cache, np.ones((1, 1)))


def loss_at(model: Model, x, labels) -> float:
    logits, _ = forward(model, x)
    return loss_softmax_ce(logits, labels)[0]


@mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    rng = Rng(seed)
    model = init_model(mlp_layers(3, [5, 4], 3), rng)
    for i in range(len(model.biases)):
        out_dim = model.layers[i].out_dim
        model.biases[i] = rand_normal(rng.split(10, i), 1, out_dim, 0.0, 0.1)
    x = rand_normal(rng.split(20), 6, 3, 0.0, 1.0)
    labels = rng.split(30).generator.integers(0, 3, size=6)

    logits, cache = forward(model, x)
    _, grad = loss_softmax_ce(logits, labels)
    gradients = backward(model, cache, grad)

    h = 1e-5
    params = [*model.weights, *model.biases]
    for param, analytic in zip(params, [*gradients.weights, *gradients.biases]):
        numeric = np.zeros_like(param)
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + h
            up = loss_at(model, x, labels)
            param[index] = original - h
            down = loss_at(model, x, labels)
            param[index] = original
            numeric[index] = (up - down) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


@mark.parametrize("width", ("ternary", 3, 4))
def test_fake_quant_backward_is_full_precision_backward_at_q(width, random_input):
    spec = QuantSpec.from_width(width)
    model = tiny_model()
    quantized = model.copy()
    quantized.weights = [quantize(w, spec).values for w in model.weights]
    mode = FakeQuant(spec)

    logits, cache = forward(model, random_input, mode)
    fp_logits, fp_cache = forward(quantized, random_input)
    assert np.array_equal(logits, fp_logits)

    grad = np.ones_like(logits)
    ste = backward(model, cache, grad, mode)
    reference = backward(quantized, fp_cache, grad)
    for a, b in zip(ste.weights, reference.weights):
        assert np.array_equal(a, b)


def test_unquantized_layer_keeps_latent_weights(random_input):
    layers = mlp_layers(3, [4], 2, unquantized_layers=[1])
    model = init_model(layers, Rng(0))
    _, cache = forward(model, random_input, FakeQuant(QuantSpec(bits=2)))
    assert np.array_equal(cache.weights[1], model.weights[1])
    assert not np.array_equal(cache.weights[0], model.weights[0])


def test_loss_mse():
    value, grad = loss_mse(as_matrix(1.0), as_matrix(0.75))
    assert value == approx(0.03125)
    assert grad.item() == approx(0.25)
    assert loss_mse(as_matrix([1, 2]), as_matrix([1, 2]))[0] == 0.0


def test_loss_mse_shape_mismatch():
    with raises(ShapeError):
        loss_mse(np.zeros((1, 2)), np.zeros((2, 1)))


def test_loss_softmax_ce():
    value, grad = loss_softmax_ce(as_matrix([0.0, 0.0]), np.array([0]))
    assert value == approx(math.log(2))
    assert grad.tolist() == [[-0.5, 0.5]]


@mark.parametrize("labels", (np.array([0, 1]), np.array([2])))
def test_loss_softmax_ce_invalid_labels(labels):
    with raises(ShapeError):
        loss_softmax_ce(as_matrix([0.0, 0.0]), labels)


def test_accuracy():
    logits = as_matrix([[1, 0], [0, 1], [1, 0]])
    assert accuracy(logits, np.array([0, 1, 1])) == approx(2 / 3)
    assert accuracy(np.zeros((0, 2)), np.array([], dtype=np.int64)) == 0.0


def test_adam_zero_gradient_keeps_parameters():
    model = tiny_model()
    before = [w.copy() for w in model.weights]
    state = AdamState.for_model(model, lr=0.1)
    zeros = Gradients(
        weights=[np.zeros_like(w) for w in model.weights],
        biases=[np.zeros_like(b) for b in model.biases],
    )
    adam_step(model, zeros, state)
    assert all(np.array_equal(a, b) for a, b in zip(before, model.weights))
    assert state.step == 1


def test_adam_first_step():
    model = scalar_model(0.0)
    state = AdamState.for_model(model, lr=0.1)
    ones = Gradients(weights=[np.ones((1, 1))], biases=[np.zeros((1, 1))])
    adam_step(model, ones, state)
    assert model.weights[0].item() == approx(-0.1)
    assert model.version == 1


def test_adam_deterministic():
    a, b = tiny_model(), tiny_model()
    grads = Gradients(
        weights=[np.full_like(w, 0.3) for w in a.weights],
        biases=[np.full_like(x, -0.1) for x in a.biases],
    )
    for model in (a, b):
        state = AdamState.for_model(model, lr=0.01)
        for _ in range(3):
            adam_step(model, grads, state)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


def test_adam_shape_mismatch():
    model = scalar_model(0.0)
    state = AdamState.for_model(model, lr=0.1)
    with raises(ShapeError):
        adam_step(
            model,
            Gradients(weights=[np.ones((2, 1))], biases=[np.ones((1, 1))]),
            state,
        )


def test_model_validation():
    with raises(ShapeError, match="at least one layer"):
        Model(layers=[], weights=[], biases=[])
    with raises(ShapeError, match="do not match"):
        Model(
            layers=[LayerSpec(2, 1)],
            weights=[np.zeros((1, 1))],
            biases=[np.zeros((1, 1))],
        )
    with raises(ShapeError, match="previous layer produces"):
        Model(
            layers=[LayerSpec(1, 2), LayerSpec(3, 1)],
            weights=[np.zeros((1, 2)), np.zeros((3, 1))],
            biases=[np.zeros((1, 2)), np.zeros((1, 1))],
        )


def test_mlp_layers():
    layers = mlp_layers(4, [8, 8], 3, unquantized_layers=[0])
    assert [(x.in_dim, x.out_dim) for x in layers] == [(4, 8), (8, 8), (8, 3)]
    assert [x.activation for x in layers] == [
        Activation.RELU,
        Activation.RELU,
        Activation.IDENTITY,
    ]
    assert [x.quantized for x in layers] == [False, True, True]


def test_init_model_he_normal():
    model = init_model([LayerSpec(200, 300)], Rng(0))
    assert np.std(model.weights[0]) == approx(math.sqrt(2 / 200), rel=0.02)
    assert not np.any(model.biases[0])


def test_checkpoint_round_trip(tmp_path):
    model = init_model(mlp_layers(3, [4], 2, unquantized_layers=[1]), Rng(1))
    model.biases[0] += 0.5
    path = tmp_path / "model.oscl"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.layers == model.layers
    for a, b in zip([*loaded.weights, *loaded.biases], [*model.weights, *model.biases]):
        assert a.tobytes() == b.tobytes()
    assert path.read_bytes()[:4] == b"OSCL"


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "model.oscl"
    save_checkpoint(scalar_model(1.0), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with raises(CheckpointFormatError, match="byte offset 0"):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "model.oscl"
    save_checkpoint(scalar_model(1.0), path)
    data = path.read_bytes()
    path.write_bytes(data[:4] + struct.pack("<I", 9) + data[8:])
    with raises(CheckpointFormatError, match="version 9 at byte offset 4"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "model.oscl"
    save_checkpoint(scalar_model(1.0), path)
    path.write_bytes(path.read_bytes()[:-4])
    # header 12 bytes, layer header 10 bytes, weights 8 bytes
    with raises(CheckpointFormatError, match="byte offset 30"):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes(tmp_path):
    path = tmp_path / "model.oscl"
    save_checkpoint(scalar_model(1.0), path)
    path.write_bytes(path.read_bytes() + b"\0")
    with raises(CheckpointFormatError, match="Trailing bytes after byte offset 38"):
        load_checkpoint(path)
