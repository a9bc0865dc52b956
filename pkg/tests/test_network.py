import math

import numpy as np
import pytest
from pydantic import ValidationError

from forgetloc.engine.network import (
    Batch, accuracy, build_model, forward_loss, gradients, load_snapshot, predict, save_snapshot
)
from forgetloc.engine.optim import AdamState, adam_step
from forgetloc.models.schemas import BlockKind, LayerSpec, LayerKind, Mode, ModelConfig, reference_layers
from forgetloc.utils.exceptions import InvalidInputError


def _batch(size=8, seed=0):
    rng = np.random.default_rng(seed)
    return Batch.from_pixels(rng.integers(0, 256, size=(size, 28, 28, 1)), rng.integers(0, 10, size=size))


def test_block_shapes_follow_reference_cnn():
    """Weight and bias shapes of every block, in model order"""
    model = build_model(ModelConfig(), seed=0)
    shapes = [(b.name, b.shape) for b in model.blocks]
    assert shapes == [
        ("conv1.weight", (3, 3, 1, 32)), ("conv1.bias", (32,)),
        ("conv2.weight", (3, 3, 32, 32)), ("conv2.bias", (32,)),
        ("dense1.weight", (1568, 64)), ("dense1.bias", (64,)),
        ("dense2.weight", (64, 32)), ("dense2.bias", (32,)),
        ("head0.weight", (32, 10)), ("head0.bias", (10,)),
    ]
    assert [b.kind for b in model.blocks[:2]] == [BlockKind.WEIGHT, BlockKind.BIAS]


@pytest.mark.parametrize("heads", [1, 2, 5])
def test_parameter_census(heads):
    """112,394 parameters plus 330 per extra head"""
    model = build_model(ModelConfig(head_count=heads), seed=0)
    assert model.parameter_count == 112_394 + 330 * (heads - 1)


def test_config_rejects_other_architectures():
    """Only the reference layer list is accepted"""
    layers = reference_layers()[:-1] + [LayerSpec(name="head", kind=LayerKind.OUTPUT, units=5, activation="softmax")]
    with pytest.raises(ValidationError):
        ModelConfig(layers=layers)
    with pytest.raises(ValidationError):
        ModelConfig(head_count=0)


def test_same_seed_same_parameters():
    """Initialization is a pure function of the seed"""
    a, b = build_model(ModelConfig(), 3), build_model(ModelConfig(), 3)
    c = build_model(ModelConfig(), 4)
    assert all(np.array_equal(x.values.data, y.values.data) for x, y in zip(a.blocks, b.blocks))
    assert not np.array_equal(a.block("dense1.weight").values.data, c.block("dense1.weight").values.data)
    assert not np.any(a.block("conv1.bias").values.data)


def test_initial_loss_near_uniform():
    """Untrained logits are small, so the loss is close to ln 10"""
    loss, _ = forward_loss(build_model(ModelConfig(), 0), _batch(), Mode.EVAL, 0)
    assert abs(loss.item() - math.log(10)) <= 0.3


def test_eval_mode_is_pure():
    """Two eval passes give bit-identical losses and gradients, whatever the generator"""
    model, batch = build_model(ModelConfig(), 1), _batch(seed=1)
    first = gradients(model, batch, 0, Mode.EVAL, np.random.default_rng(0))
    second = gradients(model, batch, 0, Mode.EVAL, np.random.default_rng(99))
    assert first[0] == second[0]
    assert all(np.array_equal(first[1][name], second[1][name]) for name in first[1])


def test_train_mode_uses_dropout():
    """Different dropout draws change the train-mode loss"""
    model, batch = build_model(ModelConfig(), 1), _batch(seed=2)
    a = forward_loss(model, batch, Mode.TRAIN, 0, np.random.default_rng(0))[0].item()
    b = forward_loss(model, batch, Mode.TRAIN, 0, np.random.default_rng(1))[0].item()
    assert a != b


def test_unknown_head_rejected():
    """head_id must be below head_count"""
    with pytest.raises(InvalidInputError):
        forward_loss(build_model(ModelConfig(), 0), _batch(), Mode.EVAL, 1)


def test_other_heads_get_exact_zero_gradients():
    """Loss through head 0 does not touch head 1"""
    model = build_model(ModelConfig(head_count=2), 0)
    _, grads = gradients(model, _batch(), 0)
    assert not np.any(grads["head1.weight"]) and not np.any(grads["head1.bias"])
    assert np.any(grads["head0.weight"])


def test_zero_image_gradients_match_finite_differences():
    """Blank images with label 0, nonzero biases to stay off relu kinks"""
    model = build_model(ModelConfig(), 2)
    rng = np.random.default_rng(2)
    for block in model.blocks:
        if block.kind is BlockKind.BIAS:
            block.values.data[...] = rng.uniform(0.05, 0.2, size=block.shape)
    batch = Batch.from_pixels(np.zeros((2, 28, 28, 1)), np.zeros(2, dtype=np.int64))
    _, grads = gradients(model, batch, 0)

    h = 1e-5
    for name in ("conv1.bias", "conv2.weight", "dense1.weight", "dense2.bias", "head0.weight"):
        values = model.block(name).values.data
        for _ in range(5):
            index = tuple(int(rng.integers(extent)) for extent in values.shape)
            original = values[index]
            values[index] = original + h
            plus = gradients(model, batch, 0)[0]
            values[index] = original - h
            minus = gradients(model, batch, 0)[0]
            values[index] = original
            numeric = (plus - minus) / (2 * h)
            analytic = grads[name][index]
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-6)


def test_duplicated_example_same_gradient():
    """Mean reduction: an example repeated twice has the single-example gradient"""
    model = build_model(ModelConfig(), 5)
    single = _batch(size=1, seed=5)
    double = Batch(images=np.concatenate([single.images] * 2), labels=np.concatenate([single.labels] * 2))
    loss1, g1 = gradients(model, single, 0)
    loss2, g2 = gradients(model, double, 0)
    assert loss1 == pytest.approx(loss2, abs=1e-14)
    assert all(np.allclose(g1[n], g2[n], rtol=0, atol=1e-14) for n in g1)


def test_single_example_overfits():
    """200 Adam steps on one example drive its loss below 0.05"""
    model = build_model(ModelConfig(), 6)
    batch = _batch(size=1, seed=6)
    state, params = AdamState(), model.params()
    for _ in range(200):
        _, grads = gradients(model, batch, 0)
        adam_step(state, grads, params)
    assert gradients(model, batch, 0)[0] < 0.05


def test_swapped_restores_parameters():
    """Temporary parameter values do not leak out of the context"""
    model = build_model(ModelConfig(), 7)
    before = model.snapshot()
    other = {name: np.zeros_like(v) for name, v in before.items()}
    with model.swapped(other):
        assert not np.any(model.block("dense1.weight").values.data)
    assert all(np.array_equal(before[n], v) for n, v in model.params().items())


def test_predict_and_accuracy():
    """Probabilities sum to one; accuracy lies in [0, 1]"""
    model = build_model(ModelConfig(), 8)
    rng = np.random.default_rng(8)
    pixels = rng.integers(0, 256, size=(5, 28, 28, 1))
    probs = predict(model, pixels, 0, batch_size=2)
    assert probs.shape == (5, 10)
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert 0.0 <= accuracy(model, pixels, np.zeros(5, dtype=np.int64), 0) <= 1.0
    assert math.isnan(accuracy(model, pixels[:0], np.zeros(0), 0))


def test_snapshot_round_trip(tmp_path):
    """Saved parameters load back bit-identically with their head count"""
    model = build_model(ModelConfig(head_count=2), 9)
    path = save_snapshot(model, tmp_path / "snap.npz")
    restored = load_snapshot(path)
    assert restored.head_count == 2
    assert all(np.array_equal(a.values.data, b.values.data) for a, b in zip(model.blocks, restored.blocks))
